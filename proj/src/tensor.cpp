#include "partseg/tensor.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace partseg {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

Tensor Tensor::zeros(const std::vector<int>& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const std::vector<int>& shape, double value, bool requires_grad) {
  Tensor t;
  t.shape = shape;
  std::size_t n = shape_numel(shape);
  t.data = std::make_shared<std::vector<double>>(n, value);
  t.requires_grad = requires_grad;
  if (requires_grad) t.grad = std::make_shared<std::vector<double>>(n, 0.0);
  return t;
}

Tensor Tensor::from(const std::vector<int>& shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  t.requires_grad = requires_grad;
  if (requires_grad) t.grad = std::make_shared<std::vector<double>>(t.data->size(), 0.0);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

std::size_t Tensor::numel() const { return data ? data->size() : 0; }

double Tensor::value() const {
  if (numel() != 1) throw std::runtime_error("value() on non-scalar tensor " + shape_str(shape));
  return (*data)[0];
}

Tensor Tensor::view(const std::vector<int>& new_shape) const {
  if (shape_numel(new_shape) != numel())
    throw std::invalid_argument("view " + shape_str(new_shape) + " incompatible with " +
                                shape_str(shape));
  Tensor t = *this;
  t.shape = new_shape;
  return t;
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape = shape;
  t.data = data;
  t.requires_grad = false;
  return t;
}

Tensor Tensor::clone_data() const {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(*data);
  return t;
}

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw std::runtime_error("backward() expects a scalar loss");
  if (!loss.requires_grad || !loss.grad) throw std::runtime_error("loss does not require grad");
  (*loss.grad)[0] = 1.0;
  if (!loss.node) return;

  // iterative post-order DFS; parents before the node itself
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.push_back({loss.node.get(), 0});
  loss.node->visited = true;
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p && !p->visited) {
        p->visited = true;
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward();
    (*it)->visited = false;
  }
}

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  eng_ = std::make_shared<std::mt19937_64>(seed);
}

std::uint64_t Rng::next() { return (*static_cast<std::mt19937_64*>(eng_.get()))(); }

double Rng::uniform() {
  return static_cast<double>(next() >> 11) * (1.0 / 9007199254740992.0);
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = uniform(), u2 = uniform();
  while (u1 <= 1e-300) u1 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

int Rng::uniform_int(int n) {
  if (n <= 0) throw std::invalid_argument("uniform_int needs n > 0");
  return static_cast<int>(next() % static_cast<std::uint64_t>(n));
}

std::uint64_t Rng::fork(std::uint64_t stream) const {
  // splitmix-style mix of (seed, stream)
  std::uint64_t z = seed_ + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace partseg
