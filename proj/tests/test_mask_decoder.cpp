#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>

#include "partseg/gradcheck.hpp"
#include "partseg/mask_decoder.hpp"
#include "partseg/ops.hpp"

using namespace partseg;
using namespace partseg::decoder;

namespace {
Tensor random_tensor(const std::vector<int>& shape, std::uint64_t seed, double scale = 1.0,
                     bool requires_grad = false) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (auto& v : *t.data) v = scale * rng.normal();
  return t;
}
}  // namespace

TEST_CASE("decode yields one 64x64 logit map per class at desk defaults") {
  Rng rng(1);
  MaskDecoder dec = MaskDecoder::init(DecoderConfig{}, rng);
  Tensor f = random_tensor({32, 8, 8}, 2, 0.5);
  Tensor dense = random_tensor({32, 8, 8}, 3, 0.5);
  Tensor sparse = random_tensor({kNumClasses, 32}, 4, 0.5);
  MaskDecoder::Output out = dec.decode(f, dense, sparse);
  CHECK(out.masks.logits.shape == std::vector<int>{kNumClasses, 64, 64});
  CHECK(out.tokens.shape == std::vector<int>{kNumClasses, 32});
  for (std::size_t i = 0; i < out.masks.logits.numel(); ++i)
    CHECK(std::isfinite(out.masks.logits.at(i)));
  CHECK_THROWS(dec.decode(f, random_tensor({32, 4, 4}, 5), sparse));
  CHECK_THROWS(dec.decode(f, dense, random_tensor({kNumClasses, 16}, 6)));
}

TEST_CASE("zero logits binarize to empty masks under the strict threshold") {
  MaskSet m;
  m.logits = Tensor::zeros({kNumClasses, 4, 4});
  for (int c = 0; c < kNumClasses; ++c) {
    auto bin = m.binary(c);
    CHECK(std::all_of(bin.begin(), bin.end(), [](std::uint8_t v) { return v == 0; }));
  }
  // and the semantic map is all background
  std::vector<int> sem = semantic_map(m);
  CHECK(std::all_of(sem.begin(), sem.end(), [](int v) { return v == -1; }));
}

TEST_CASE("consistently permuting class structures permutes the output maps") {
  DecoderConfig cfg;
  cfg.out_size = 16;
  Rng rng(7);
  MaskDecoder dec = MaskDecoder::init(cfg, rng);
  Tensor f = random_tensor({32, 4, 4}, 8, 0.5);
  Tensor dense = random_tensor({32, 4, 4}, 9, 0.5);
  Tensor sparse = random_tensor({kNumClasses, 32}, 10, 0.5);
  MaskDecoder::Output base = dec.decode(f, dense, sparse);

  // rotate all class-indexed structures by 3
  std::vector<int> perm(kNumClasses);
  for (int c = 0; c < kNumClasses; ++c) perm[c] = (c + 3) % kNumClasses;
  MaskDecoder dec2 = dec;
  dec2.mask_tokens = dec.mask_tokens.clone_data();
  Tensor sparse2 = sparse.clone_data();
  dec2.hypernets.assign(kNumClasses, dec.hypernets[0]);
  for (int c = 0; c < kNumClasses; ++c) {
    dec2.hypernets[perm[c]] = dec.hypernets[c];
    for (int k = 0; k < 32; ++k) {
      (*dec2.mask_tokens.data)[static_cast<std::size_t>(perm[c]) * 32 + k] =
          dec.mask_tokens.at(static_cast<std::size_t>(c) * 32 + k);
      (*sparse2.data)[static_cast<std::size_t>(perm[c]) * 32 + k] =
          sparse.at(static_cast<std::size_t>(c) * 32 + k);
    }
  }
  MaskDecoder::Output rot = dec2.decode(f, dense, sparse2);
  std::size_t plane = 16 * 16;
  for (int c = 0; c < kNumClasses; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      CHECK(base.masks.logits.at(static_cast<std::size_t>(c) * plane + i) ==
            doctest::Approx(rot.masks.logits.at(static_cast<std::size_t>(perm[c]) * plane + i))
                .epsilon(1e-9));
}

TEST_CASE("semantic map picks argmax above threshold with low-id tie break") {
  MaskSet m;
  m.logits = Tensor::zeros({kNumClasses, 1, 2});
  // pixel 0: classes 2 and 5 above threshold, 5 higher
  (*m.logits.data)[2 * 2 + 0] = 1.0;
  (*m.logits.data)[5 * 2 + 0] = 2.0;
  // pixel 1: classes 3 and 9 tie exactly
  (*m.logits.data)[3 * 2 + 1] = 1.5;
  (*m.logits.data)[9 * 2 + 1] = 1.5;
  std::vector<int> sem = semantic_map(m);
  CHECK(sem[0] == 5);
  CHECK(sem[1] == 3);

  // dropping class 5 via keep flags falls back to class 2
  std::vector<bool> keep(kNumClasses, true);
  keep[5] = false;
  CHECK(semantic_map(m, keep)[0] == 2);
}

TEST_CASE("adding a positive constant to logits only grows binary masks") {
  Rng rng(11);
  MaskSet m;
  m.logits = random_tensor({kNumClasses, 6, 6}, 12, 1.5);
  MaskSet shifted;
  shifted.logits = m.logits.clone_data();
  for (auto& v : *shifted.logits.data) v += 0.7;
  for (int c = 0; c < kNumClasses; ++c) {
    auto a = m.binary(c), b = shifted.binary(c);
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i]) CHECK(b[i]);  // no pixel may turn off
  }
}

TEST_CASE("decode gradients w.r.t. F, D, and S pass finite differences") {
  DecoderConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_up = 4;
  cfg.out_size = 8;
  Rng rng(13);
  MaskDecoder dec = MaskDecoder::init(cfg, rng);
  Tensor f = random_tensor({8, 2, 2}, 14, 0.5, true);
  Tensor dense = random_tensor({8, 2, 2}, 15, 0.5, true);
  Tensor sparse = random_tensor({kNumClasses, 8}, 16, 0.5, true);
  auto loss = [&]() {
    MaskDecoder::Output out = dec.decode(f, dense, sparse);
    return mean_all(mul(out.masks.logits, out.masks.logits));
  };
  for (Tensor* t : {&f, &dense, &sparse}) {
    GradCheckResult r = grad_check(loss, *t, 1e-5, /*max_samples=*/12, /*seed=*/5);
    CAPTURE(r.what);
    CHECK(r.max_rel_err < 1e-4);
  }
}
