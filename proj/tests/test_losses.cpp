#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "partseg/gradcheck.hpp"
#include "partseg/losses.hpp"
#include "partseg/ops.hpp"

using namespace partseg;
using namespace partseg::loss;

TEST_CASE("point bce hand values") {
  Tensor y = Tensor::from({2}, {1, 0});
  CHECK(bce_loss(Tensor::from({2}, {1.0, 0.0}), y).value() <= 1.2e-6);  // clamped perfection
  Tensor half = Tensor::full({4}, 0.5);
  CHECK(bce_loss(half, Tensor::from({4}, {1, 0, 1, 0})).value() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  double expect = -(std::log(0.9) + std::log(0.8)) / 2.0;
  CHECK(bce_loss(Tensor::from({2}, {0.9, 0.2}), y).value() == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS(bce_loss(Tensor::zeros({0}), Tensor::zeros({0})));
  CHECK(bce_loss(Tensor::from({2}, {0.3, 0.6}), y).value() >= 0.0);
}

TEST_CASE("dice hand values and range") {
  Tensor a = Tensor::from({4}, {1, 1, 0, 0});
  CHECK(dice_loss(a, a).value() == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(dice_loss(a, Tensor::from({4}, {0, 0, 1, 1})).value() == doctest::Approx(1.0));
  CHECK(dice_loss(a, Tensor::from({4}, {1, 0, 0, 0})).value() ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  // stays within [0, 1] on random probability maps
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    Tensor p = Tensor::zeros({16}), y = Tensor::zeros({16});
    for (auto& v : *p.data) v = rng.uniform();
    for (auto& v : *y.data) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    double d = dice_loss(p, y).value();
    CHECK(d >= 0.0);
    CHECK(d <= 1.0 + 1e-6);
  }
}

TEST_CASE("presence classification loss hand values") {
  std::vector<double> w(kNumClasses, 1.0);
  // strongly correct predictions: present classes get a big positive margin
  Tensor logits = Tensor::zeros({kNumClasses, 2});
  std::vector<double> y(kNumClasses, 0.0);
  for (int c = 0; c < kNumClasses; ++c) {
    bool present = c % 3 == 0;
    y[static_cast<std::size_t>(c)] = present ? 1.0 : 0.0;
    (*logits.data)[static_cast<std::size_t>(c) * 2 + (present ? 1 : 0)] = 20.0;
    (*logits.data)[static_cast<std::size_t>(c) * 2 + (present ? 0 : 1)] = -20.0;
  }
  CHECK(cls_loss(logits, y, w).value() <= 1e-6);

  // uniform present/absent belief costs ln 2 per class
  CHECK(cls_loss(Tensor::zeros({kNumClasses, 2}), y, w).value() ==
        doctest::Approx(kNumClasses * std::log(2.0)).epsilon(1e-9));

  // doubling one class's weight adds exactly its contribution again
  std::vector<double> w2 = w;
  w2[4] = 2.0;
  Tensor r = Tensor::zeros({kNumClasses, 2});
  Rng rng(7);
  for (auto& v : *r.data) v = rng.normal();
  double base = cls_loss(r, y, w).value();
  double bumped = cls_loss(r, y, w2).value();
  std::vector<double> only4(kNumClasses, 0.0);
  only4[4] = 1.0;
  double contrib4 = cls_loss(r, y, only4).value();
  CHECK(bumped == doctest::Approx(base + contrib4).epsilon(1e-12));
}

TEST_CASE("total loss weighting") {
  Tensor z = Tensor::scalar(0.0);
  CHECK(total_loss(z, z, z).value() == 0.0);
  CHECK(total_loss(Tensor::scalar(0.1), Tensor::scalar(0.2), Tensor::scalar(0.3)).value() ==
        doctest::Approx(2.1).epsilon(1e-12));
}

TEST_CASE("loss gradients pass finite differences") {
  Rng rng(9);
  Tensor p = Tensor::zeros({12}, true), y = Tensor::zeros({12});
  for (auto& v : *p.data) v = 0.1 + 0.8 * rng.uniform();
  for (auto& v : *y.data) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  GradCheckResult rb = grad_check([&]() { return bce_loss(p, y); }, p);
  CAPTURE(rb.what);
  CHECK(rb.max_rel_err < 1e-4);
  GradCheckResult rd = grad_check([&]() { return dice_loss(p, y); }, p);
  CHECK(rd.max_rel_err < 1e-4);

  Tensor logits = Tensor::zeros({kNumClasses, 2}, true);
  for (auto& v : *logits.data) v = rng.normal();
  std::vector<double> lab(kNumClasses, 0.0);
  lab[0] = lab[5] = 1.0;
  std::vector<double> w(kNumClasses, 1.0);
  w[5] = 1.7;
  GradCheckResult rc = grad_check([&]() { return cls_loss(logits, lab, w); }, logits);
  CHECK(rc.max_rel_err < 1e-4);

  // combined gradient is the weighted sum of component gradients
  GradCheckResult rt = grad_check(
      [&]() { return total_loss(bce_loss(p, y), dice_loss(p, y), mean_all(p)); }, p);
  CHECK(rt.max_rel_err < 1e-4);
}

TEST_CASE("uncertain pixel is always kept when the oversample covers the map") {
  std::vector<double> logits(64, 9.0);
  logits[37] = 0.0;  // the single uncertain pixel
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(100 + static_cast<std::uint64_t>(trial));
    std::vector<int> pts = sample_uncertain_points(logits, 22, 3, 0.75, rng);
    REQUIRE(pts.size() == 22);
    CHECK(std::find(pts.begin(), pts.end(), 37) != pts.end());
  }
}

TEST_CASE("point sampling is seed-deterministic and clamps oversized requests") {
  std::vector<double> logits(32, 1.0);
  Rng a(3), b(3);
  CHECK(sample_uncertain_points(logits, 8, 3, 0.75, a) ==
        sample_uncertain_points(logits, 8, 3, 0.75, b));
  Rng c(4);
  CHECK(sample_uncertain_points(logits, 100, 3, 0.75, c).size() == 32);
}

TEST_CASE("uncertain half of the map receives at least the importance fraction") {
  // pixels 0..127 uncertain (logit 0), 128..255 certain (logit 10)
  std::vector<double> logits(256, 10.0);
  for (int i = 0; i < 128; ++i) logits[static_cast<std::size_t>(i)] = 0.0;
  Rng rng(11);
  int in_uncertain = 0, total = 0;
  for (int draw = 0; draw < 200; ++draw) {
    std::vector<int> pts = sample_uncertain_points(logits, 50, 3, 0.75, rng);
    for (int p : pts) {
      ++total;
      if (p < 128) ++in_uncertain;
    }
  }
  CHECK(static_cast<double>(in_uncertain) / total >= 0.75);
}
