#include "partseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "partseg/ops.hpp"

namespace partseg::loss {

Tensor bce_loss(const Tensor& p, const Tensor& y) {
  if (p.numel() == 0) throw std::invalid_argument("bce over an empty point set");
  if (p.shape != y.shape) throw std::invalid_argument("bce shapes differ");
  const double eps = 1e-7;
  Tensor pc = clamp(p, eps, 1.0 - eps);
  Tensor ones = Tensor::full(p.shape, 1.0);
  Tensor pos = mul(y, log_t(pc));
  Tensor neg_term = mul(sub(ones, y), log_t(sub(ones, pc)));
  return neg(mean_all(add(pos, neg_term)));
}

Tensor dice_loss(const Tensor& p, const Tensor& y) {
  if (p.shape != y.shape) throw std::invalid_argument("dice shapes differ");
  const double eps = 1e-6;
  Tensor inter = sum_all(mul(p, y));
  Tensor denom = add_scalar(add(sum_all(mul(p, p)), sum_all(mul(y, y))), eps);
  return add_scalar(neg(div(scale(inter, 2.0), denom)), 1.0);
}

Tensor cls_loss(const Tensor& logits, const std::vector<double>& presence,
                const std::vector<double>& w_cls) {
  if (logits.ndim() != 2 || logits.dim(1) != 2)
    throw std::invalid_argument("cls_loss expects (n_cls, 2) present/absent logits");
  int n = logits.dim(0);
  if (presence.size() != static_cast<std::size_t>(n) || w_cls.size() != presence.size())
    throw std::invalid_argument("cls_loss label/weight count mismatch");
  Tensor p = softmax_rows(logits);
  // pick column 0 (absent) for y=0, column 1 (present) for y=1, scaled by w_c
  Tensor sel = Tensor::zeros({n, 2});
  for (int c = 0; c < n; ++c) {
    double y = presence[static_cast<std::size_t>(c)];
    (*sel.data)[static_cast<std::size_t>(c) * 2 + 0] = w_cls[static_cast<std::size_t>(c)] * (1.0 - y);
    (*sel.data)[static_cast<std::size_t>(c) * 2 + 1] = w_cls[static_cast<std::size_t>(c)] * y;
  }
  return neg(sum_all(mul(sel, log_t(clamp(p, 1e-12, 1.0)))));
}

Tensor total_loss(const Tensor& mask, const Tensor& dice, const Tensor& cls,
                  const LossWeights& w) {
  return add(add(scale(mask, w.lambda_mask), scale(dice, w.lambda_dice)),
             scale(cls, w.lambda_cls));
}

std::vector<int> sample_uncertain_points(const std::vector<double>& logits, int n_points,
                                         int oversample_ratio, double importance_fraction,
                                         Rng& rng) {
  if (n_points < 1) throw std::invalid_argument("n_points must be >= 1");
  int n_pix = static_cast<int>(logits.size());
  if (n_points > n_pix) {
    std::fprintf(stderr, "warning: clamping %d sample points to %d pixels\n", n_points, n_pix);
    n_points = n_pix;
  }
  int n_cand = std::min(n_pix, n_points * oversample_ratio);
  // candidates drawn without replacement (partial shuffle) so a full
  // oversample covers every pixel
  std::vector<int> pool(static_cast<std::size_t>(n_pix));
  for (int i = 0; i < n_pix; ++i) pool[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < n_cand; ++i)
    std::swap(pool[static_cast<std::size_t>(i)],
              pool[static_cast<std::size_t>(i + rng.uniform_int(n_pix - i))]);
  std::vector<int> cand(pool.begin(), pool.begin() + n_cand);
  int n_imp = std::min(n_points, static_cast<int>(importance_fraction * n_points));
  std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) {
    return std::abs(logits[static_cast<std::size_t>(a)]) < std::abs(logits[static_cast<std::size_t>(b)]);
  });
  std::vector<int> out(cand.begin(), cand.begin() + n_imp);
  for (int i = n_imp; i < n_points; ++i) out.push_back(rng.uniform_int(n_pix));
  return out;
}

}  // namespace partseg::loss
