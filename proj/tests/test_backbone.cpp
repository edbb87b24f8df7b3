#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "partseg/backbone.hpp"
#include "partseg/gradcheck.hpp"
#include "partseg/ops.hpp"

using namespace partseg;
using namespace partseg::backbone;

namespace {
Tensor random_image(int h, int w, std::uint64_t seed, bool requires_grad = false) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(3) * h * w);
  for (double& x : v) x = rng.uniform();
  return Tensor::from({3, h, w}, std::move(v), requires_grad);
}
}  // namespace

TEST_CASE("encode_image maps 3x64x64 to 32x8x8 deterministically") {
  Rng rng(1);
  Backbone b = Backbone::init(BackboneConfig{}, rng);
  Tensor img = random_image(64, 64, 2);
  Tensor f = b.encode_image(img);
  REQUIRE(f.shape == std::vector<int>{32, 8, 8});
  Tensor f2 = b.encode_image(img);
  for (std::size_t i = 0; i < f.numel(); ++i) {
    CHECK(f.at(i) == f2.at(i));
    CHECK(std::isfinite(f.at(i)));
  }
  CHECK_THROWS(b.encode_image(Tensor::zeros({1, 64, 64})));
  CHECK_THROWS(b.encode_image(Tensor::zeros({3, 60, 64})));
}

TEST_CASE("pyramid level shapes, widths, and projections") {
  Rng rng(3);
  BackboneConfig cfg;
  Backbone b = Backbone::init(cfg, rng);
  PyramidFeatures p = b.pyramid(random_image(64, 64, 4));
  const int hw[4] = {16, 8, 4, 2};
  for (int l = 0; l < 4; ++l) {
    CHECK(p.levels[l].shape == std::vector<int>{cfg.widths[l], hw[l], hw[l]});
    CHECK(p.projected[l].shape == std::vector<int>{cfg.d_proto, hw[l], hw[l]});
  }
}

TEST_CASE("feature_rows round trips and is row-major over positions") {
  Tensor x = Tensor::from({2, 2, 3}, {1, 2, 3, 4, 5, 6, 10, 20, 30, 40, 50, 60});
  Tensor rows = feature_rows(x);
  REQUIRE(rows.shape == std::vector<int>{6, 2});
  // position (y=0,x=1) is row 1; channels (2, 20)
  CHECK(rows.at(1 * 2 + 0) == 2);
  CHECK(rows.at(1 * 2 + 1) == 20);
  Tensor back = rows_to_chw(rows, 2, 3);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(back.at(i) == x.at(i));
}

TEST_CASE("positional encoding is deterministic with pairwise-distinct rows") {
  CHECK_THROWS(positional_encoding(8, 8, 31));
  Tensor one = positional_encoding(1, 1, 16);
  REQUIRE(one.shape == std::vector<int>{1, 16});
  Tensor a = positional_encoding(8, 8, 32), b = positional_encoding(8, 8, 32);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
  double min_dist = 1e18;
  for (int r = 0; r < 64; ++r)
    for (int q = r + 1; q < 64; ++q) {
      double d = 0;
      for (int c = 0; c < 32; ++c) {
        double diff = a.at(r * 32 + c) - a.at(q * 32 + c);
        d += diff * diff;
      }
      min_dist = std::min(min_dist, std::sqrt(d));
    }
  CHECK(min_dist > 0.0);
}

TEST_CASE("finite-difference gradient through encode_image on a small input") {
  Rng rng(7);
  Backbone b = Backbone::init(BackboneConfig{}, rng);
  Tensor img = random_image(16, 16, 8, /*requires_grad=*/true);
  GradCheckResult r = grad_check(
      [&]() { return mean_all(mul(b.encode_image(img), b.encode_image(img))); }, img, 1e-5,
      /*max_samples=*/24, /*seed=*/1);
  CAPTURE(r.what);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("loss gradient reaches the first backbone layer") {
  Rng rng(9);
  Backbone b = Backbone::init(BackboneConfig{}, rng);
  nn::ParamRegistry reg;
  b.collect(reg, "bb");
  nn::zero_grads(reg);
  Tensor loss = mean_all(mul(b.encode_image(random_image(64, 64, 10)),
                             b.encode_image(random_image(64, 64, 10))));
  backward(loss);
  Tensor* stem_w = reg.find("bb.stem.w");
  REQUIRE(stem_w != nullptr);
  double g = 0;
  for (double v : *stem_w->grad) g += std::abs(v);
  CHECK(g > 0.0);
}
