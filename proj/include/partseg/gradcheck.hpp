#pragma once

#include <functional>
#include <string>

#include "partseg/tensor.hpp"

namespace partseg {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  std::string what;  // set on numeric failure (NaN/inf)
  bool ok() const { return what.empty(); }
};

// Compares the reverse-mode gradient of f() w.r.t. x against central finite
// differences. f must rebuild the graph on every call and return a scalar.
// max_samples < 0 checks every entry; otherwise a seeded subset.
GradCheckResult grad_check(const std::function<Tensor()>& f, Tensor& x, double eps = 1e-5,
                           int max_samples = -1, std::uint64_t seed = 0);

}  // namespace partseg
