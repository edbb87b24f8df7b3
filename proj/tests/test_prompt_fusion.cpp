#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "partseg/backbone.hpp"
#include "partseg/gradcheck.hpp"
#include "partseg/ops.hpp"
#include "partseg/prompt_fusion.hpp"

using namespace partseg;
using namespace partseg::fusion;

namespace {
Tensor random_tensor(const std::vector<int>& shape, std::uint64_t seed, double scale = 1.0,
                     bool requires_grad = false) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (auto& v : *t.data) v = scale * rng.normal();
  return t;
}
}  // namespace

TEST_CASE("zero-parameter adapter is the identity on prototypes") {
  Cdt cdt = Cdt::zeros(8, 2);
  Tensor f = random_tensor({8, 4, 4}, 1);
  PrototypeSet p = PrototypeSet::textual(random_tensor({kNumClasses, 8}, 2));
  PrototypeSet out = cdt.forward(f, p);
  REQUIRE(out.p.shape == p.p.shape);
  for (std::size_t i = 0; i < p.p.numel(); ++i) CHECK(out.p.at(i) == p.p.at(i));
  CHECK(out.valid == p.valid);
}

TEST_CASE("spatially constant features add the projected mean feature to every row") {
  // uniform attention over positions collapses the value average to a single
  // feature vector; brute-force the 2x2 case
  const int d = 4;
  Rng rng(3);
  Cdt cdt = Cdt::init(d, 1, rng);
  // force uniform attention: zero the query projection so all logits are equal
  for (auto& v : *cdt.attn.wq.w.data) v = 0;
  for (auto& v : *cdt.attn.wq.b.data) v = 0;
  Tensor f = Tensor::zeros({d, 2, 2});
  for (int c = 0; c < d; ++c)
    for (int i = 0; i < 4; ++i) (*f.data)[static_cast<std::size_t>(c) * 4 + i] = 0.3 * (c + 1);
  PrototypeSet p = PrototypeSet::textual(random_tensor({kNumClasses, d}, 4));
  PrototypeSet out = cdt.forward(f, p);

  // expected update: wo(wv(mean feature)) added to every prototype row
  Tensor mean_f = Tensor::from({1, d}, {0.3, 0.6, 0.9, 1.2});
  Tensor upd = cdt.attn.wo.forward(cdt.attn.wv.forward(mean_f));
  for (int c = 0; c < kNumClasses; ++c)
    for (int k = 0; k < d; ++k)
      CHECK(out.p.at(static_cast<std::size_t>(c) * d + k) ==
            doctest::Approx(p.p.at(static_cast<std::size_t>(c) * d + k) + upd.at(k)).epsilon(1e-10));
}

TEST_CASE("adapter rejects mismatched prototype width") {
  Cdt cdt = Cdt::zeros(8, 2);
  PrototypeSet p = PrototypeSet::textual(Tensor::zeros({kNumClasses, 6}));
  CHECK_THROWS(cdt.forward(Tensor::zeros({8, 2, 2}), p));
}

TEST_CASE("activation rule hand cases") {
  // F' row [1,2] against prototype [1,0]: dot 1, activation doubles the row
  Tensor f_rows = Tensor::from({1, 2}, {1, 2});
  Tensor p = Tensor::from({1, 2}, {1, 0});
  std::vector<Tensor> acts = ppem_activate(f_rows, p);
  REQUIRE(acts.size() == 1);
  CHECK(acts[0].at(0) == doctest::Approx(2.0));
  CHECK(acts[0].at(1) == doctest::Approx(4.0));

  // orthogonal prototype leaves the row unchanged
  Tensor p_orth = Tensor::from({1, 2}, {0.0, 0.0});
  CHECK(ppem_activate(f_rows, p_orth)[0].at(0) == doctest::Approx(1.0));
  CHECK(ppem_activate(f_rows, p_orth)[0].at(1) == doctest::Approx(2.0));

  // zero feature row stays zero
  Tensor f_zero = Tensor::from({1, 2}, {0, 0});
  CHECK(ppem_activate(f_zero, p)[0].at(0) == 0.0);
  CHECK(ppem_activate(f_zero, p)[0].at(1) == 0.0);
}

TEST_CASE("activation against a random prototype matrix matches scalar brute force") {
  Tensor f_rows = random_tensor({6, 5}, 7);
  Tensor p = random_tensor({kNumClasses, 5}, 8);
  std::vector<Tensor> acts = ppem_activate(f_rows, p);
  for (int c = 0; c < kNumClasses; ++c)
    for (int i = 0; i < 6; ++i) {
      double dot = 0;
      for (int k = 0; k < 5; ++k)
        dot += f_rows.at(static_cast<std::size_t>(i) * 5 + k) *
               p.at(static_cast<std::size_t>(c) * 5 + k);
      for (int k = 0; k < 5; ++k) {
        double fi = f_rows.at(static_cast<std::size_t>(i) * 5 + k);
        CHECK(acts[static_cast<std::size_t>(c)].at(static_cast<std::size_t>(i) * 5 + k) ==
              doctest::Approx(fi + fi * dot).epsilon(1e-12));
      }
    }
}

TEST_CASE("embedding shapes and presence-flag locality") {
  const int d = 8, h = 3, w = 3;
  Rng rng(9);
  Ppem ppem = Ppem::init(d, 4, rng);
  Tensor f_rows = random_tensor({h * w, d}, 10);
  Tensor p = random_tensor({kNumClasses, d}, 11);
  std::vector<Tensor> acts = ppem_activate(f_rows, p);
  std::vector<bool> presence(kNumClasses, false);
  presence[2] = true;
  PromptEmbeddings e = ppem.forward(acts, presence, h, w);
  CHECK(e.dense.shape == std::vector<int>{d, h, w});
  CHECK(e.sparse.shape == std::vector<int>{kNumClasses, d});

  std::vector<bool> flipped = presence;
  flipped[5] = true;
  PromptEmbeddings e2 = ppem.forward(acts, flipped, h, w);
  for (int c = 0; c < kNumClasses; ++c)
    for (int k = 0; k < d; ++k) {
      double a = e.sparse.at(static_cast<std::size_t>(c) * d + k);
      double b = e2.sparse.at(static_cast<std::size_t>(c) * d + k);
      if (c == 5) continue;  // only the flipped class may move
      CHECK(a == b);
    }
  // the dense path ignores presence entirely
  for (std::size_t i = 0; i < e.dense.numel(); ++i) CHECK(e.dense.at(i) == e2.dense.at(i));
}

TEST_CASE("perturbing another class's activations leaves a sparse token unchanged") {
  const int d = 6, h = 2, w = 2;
  Rng rng(13);
  Ppem ppem = Ppem::init(d, 3, rng);
  Tensor f_rows = random_tensor({h * w, d}, 14);
  Tensor p = random_tensor({kNumClasses, d}, 15);
  std::vector<Tensor> acts = ppem_activate(f_rows, p);
  std::vector<bool> presence(kNumClasses, true);
  PromptEmbeddings e1 = ppem.forward(acts, presence, h, w);
  acts[7] = add_scalar(acts[7], 0.5);  // perturb class 7 only
  PromptEmbeddings e2 = ppem.forward(acts, presence, h, w);
  for (int k = 0; k < d; ++k) {
    CHECK(e1.sparse.at(static_cast<std::size_t>(3) * d + k) ==
          e2.sparse.at(static_cast<std::size_t>(3) * d + k));
    CHECK(e1.sparse.at(static_cast<std::size_t>(7) * d + k) !=
          doctest::Approx(e2.sparse.at(static_cast<std::size_t>(7) * d + k)).epsilon(1e-15));
  }
}

TEST_CASE("gradients flow through activation and embedding") {
  const int d = 4, h = 2, w = 2;
  Rng rng(17);
  Ppem ppem = Ppem::init(d, 2, rng);
  Tensor f_rows = random_tensor({h * w, d}, 18, 0.5, /*requires_grad=*/true);
  Tensor p = random_tensor({kNumClasses, d}, 19, 0.5, /*requires_grad=*/true);
  std::vector<bool> presence(kNumClasses, true);
  presence[1] = presence[4] = false;

  auto loss = [&]() {
    std::vector<Tensor> acts = ppem_activate(f_rows, p);
    PromptEmbeddings e = ppem.forward(acts, presence, h, w);
    return add(mean_all(mul(e.dense, e.dense)), mean_all(mul(e.sparse, e.sparse)));
  };
  for (Tensor* t : {&f_rows, &p, &ppem.pos_embed, &ppem.mix.w}) {
    GradCheckResult r = grad_check(loss, *t, 1e-5, /*max_samples=*/16, /*seed=*/3);
    CAPTURE(r.what);
    CHECK(r.max_rel_err < 1e-4);
  }
}

TEST_CASE("presence scores are the max pooled similarity") {
  Tensor f_rows = Tensor::from({3, 2}, {1, 0, 0, 1, -1, -1});
  Tensor p = Tensor::from({2, 2}, {2, 0, 0, 3});
  std::vector<double> s = presence_scores(f_rows, p);
  CHECK(s[0] == doctest::Approx(2.0));  // best row for class 0 is [1,0]
  CHECK(s[1] == doctest::Approx(3.0));
}
