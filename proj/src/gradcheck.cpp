#include "partseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace partseg {

GradCheckResult grad_check(const std::function<Tensor()>& f, Tensor& x, double eps,
                           int max_samples, std::uint64_t seed) {
  GradCheckResult res;
  if (!x.requires_grad || !x.grad) {
    res.what = "grad_check: x does not require grad";
    return res;
  }
  x.zero_grad();
  Tensor loss = f();
  backward(loss);
  std::vector<double> analytic = *x.grad;

  std::vector<std::size_t> idx(x.numel());
  std::iota(idx.begin(), idx.end(), 0);
  if (max_samples >= 0 && static_cast<std::size_t>(max_samples) < idx.size()) {
    Rng rng(seed ^ 0xC0FFEEull);
    for (std::size_t i = idx.size() - 1; i > 0; --i)
      std::swap(idx[i], idx[rng.uniform_int(static_cast<int>(i + 1))]);
    idx.resize(static_cast<std::size_t>(max_samples));
  }

  NoGradGuard ng;  // finite differences do not need the tape
  for (std::size_t i : idx) {
    double orig = (*x.data)[i];
    (*x.data)[i] = orig + eps;
    double fp = f().value();
    (*x.data)[i] = orig - eps;
    double fm = f().value();
    (*x.data)[i] = orig;
    double numeric = (fp - fm) / (2.0 * eps);
    double a = analytic[i];
    if (!std::isfinite(numeric) || !std::isfinite(a)) {
      res.what = "non-finite gradient at index " + std::to_string(i);
      res.worst_index = i;
      return res;
    }
    double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
    double rel = std::abs(a - numeric) / denom;
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace partseg
