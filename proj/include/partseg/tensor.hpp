#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace partseg {

struct Node {
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;  // captures the grad buffers it needs
  bool visited = false;            // scratch for topo sort
};

// Dense row-major tensor with an optional reverse-mode tape.
// Copies are shallow: they share data, grad, and the tape node.
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> data;
  std::shared_ptr<std::vector<double>> grad;  // allocated iff requires_grad
  std::shared_ptr<Node> node;
  bool requires_grad = false;

  Tensor() = default;

  static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false);
  static Tensor full(const std::vector<int>& shape, double value, bool requires_grad = false);
  static Tensor from(const std::vector<int>& shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  std::size_t numel() const;
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  double value() const;  // scalar tensors only
  double& at(std::size_t i) { return (*data)[i]; }
  double at(std::size_t i) const { return (*data)[i]; }

  // Metadata-only reshape: shares data, grad, and tape node.
  Tensor view(const std::vector<int>& new_shape) const;

  // Shares data but drops the tape and gradient.
  Tensor detach() const;

  // Deep copy of the values, no tape.
  Tensor clone_data() const;

  void zero_grad();
  bool has_grad() const { return grad != nullptr; }
};

// True while gradients are being recorded (thread-local).
bool grad_enabled();

// RAII guard disabling tape construction, for inference paths.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  bool prev;
};

// Seeds loss.grad with 1 and runs the tape in reverse topological order.
void backward(const Tensor& loss);

std::string shape_str(const std::vector<int>& shape);
std::size_t shape_numel(const std::vector<int>& shape);

// Deterministic RNG used everywhere; all draws derive from mt19937_64
// output so sequences are identical across platforms.
struct Rng {
  explicit Rng(std::uint64_t seed);
  std::uint64_t next();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // standard normal (Box-Muller)
  int uniform_int(int n);                // [0, n)
  std::uint64_t fork(std::uint64_t stream) const;  // child seed for stream id

 private:
  std::uint64_t seed_;
  std::shared_ptr<void> eng_;  // std::mt19937_64
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace partseg
