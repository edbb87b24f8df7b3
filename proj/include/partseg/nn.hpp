#pragma once

#include <string>
#include <utility>
#include <vector>

#include "partseg/ops.hpp"
#include "partseg/tensor.hpp"

namespace partseg::nn {

// Named, ordered view of a model's learnable tensors. Order is the
// collection order and is what the optimizer and checkpoints key on.
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor*>> items;
  void add(const std::string& name, Tensor* t) { items.push_back({name, t}); }
  Tensor* find(const std::string& name);
  std::size_t total_numel() const;
};

// Give every parameter in the registry a fresh gradient buffer while keeping
// the shared value storage. Used for per-thread tapes in data-parallel steps.
void reattach_fresh_grads(ParamRegistry& reg);

void zero_grads(ParamRegistry& reg);

Tensor glorot(const std::vector<int>& shape, int fan_in, int fan_out, Rng& rng);

struct Linear {
  Tensor w;  // (in, out)
  Tensor b;  // (out), absent when bias=false
  bool has_bias = true;

  static Linear init(int in, int out, Rng& rng, bool bias = true);
  static Linear zeros(int in, int out, bool bias = true);
  Tensor forward(const Tensor& x) const;  // (N,in) -> (N,out)
  void collect(ParamRegistry& reg, const std::string& prefix);
};

struct Mlp {
  Linear l1, l2;
  static Mlp init(int in, int hidden, int out, Rng& rng);
  Tensor forward(const Tensor& x) const;  // relu in the middle
  void collect(ParamRegistry& reg, const std::string& prefix);
};

struct LayerNorm {
  Tensor gamma, beta;
  static LayerNorm init(int dim);
  Tensor forward(const Tensor& x) const;
  void collect(ParamRegistry& reg, const std::string& prefix);
};

struct Conv2d {
  Tensor w, b;
  int stride = 1, pad = 0;
  static Conv2d init(int in_ch, int out_ch, int k, int stride, int pad, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(ParamRegistry& reg, const std::string& prefix);
};

struct ConvTranspose2d {
  Tensor w, b;
  int stride = 2;
  static ConvTranspose2d init(int in_ch, int out_ch, int k, int stride, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(ParamRegistry& reg, const std::string& prefix);
};

struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int heads = 1;
  static MultiHeadAttention init(int d_model, int heads, Rng& rng);
  // zero-initialized projections: attention output is identically zero,
  // handy for residual blocks that must start as the identity
  static MultiHeadAttention zeros(int d_model, int heads);
  Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionMask& mask = AttentionMask::none()) const;
  void collect(ParamRegistry& reg, const std::string& prefix);
};

}  // namespace partseg::nn
