#include "partseg/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace partseg::nn {

Tensor* ParamRegistry::find(const std::string& name) {
  for (auto& [n, t] : items)
    if (n == name) return t;
  return nullptr;
}

std::size_t ParamRegistry::total_numel() const {
  std::size_t n = 0;
  for (auto& [name, t] : items) n += t->numel();
  return n;
}

void reattach_fresh_grads(ParamRegistry& reg) {
  for (auto& [name, t] : reg.items) {
    t->requires_grad = true;
    t->grad = std::make_shared<std::vector<double>>(t->numel(), 0.0);
    t->node = nullptr;
  }
}

void zero_grads(ParamRegistry& reg) {
  for (auto& [name, t] : reg.items) t->zero_grad();
}

Tensor glorot(const std::vector<int>& shape, int fan_in, int fan_out, Rng& rng) {
  double lim = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t = Tensor::zeros(shape, true);
  for (std::size_t i = 0; i < t.numel(); ++i) (*t.data)[i] = rng.uniform(-lim, lim);
  return t;
}

Linear Linear::init(int in, int out, Rng& rng, bool bias) {
  Linear l;
  l.w = glorot({in, out}, in, out, rng);
  l.has_bias = bias;
  if (bias) l.b = Tensor::zeros({out}, true);
  return l;
}

Linear Linear::zeros(int in, int out, bool bias) {
  Linear l;
  l.w = Tensor::zeros({in, out}, true);
  l.has_bias = bias;
  if (bias) l.b = Tensor::zeros({out}, true);
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x.ndim() == 1 ? x.view({1, x.dim(0)}) : x, w);
  if (has_bias) y = add_row_broadcast(y, b);
  return y;
}

void Linear::collect(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".w", &w);
  if (has_bias) reg.add(prefix + ".b", &b);
}

Mlp Mlp::init(int in, int hidden, int out, Rng& rng) {
  Mlp m;
  m.l1 = Linear::init(in, hidden, rng);
  m.l2 = Linear::init(hidden, out, rng);
  return m;
}

Tensor Mlp::forward(const Tensor& x) const { return l2.forward(relu(l1.forward(x))); }

void Mlp::collect(ParamRegistry& reg, const std::string& prefix) {
  l1.collect(reg, prefix + ".l1");
  l2.collect(reg, prefix + ".l2");
}

LayerNorm LayerNorm::init(int dim) {
  LayerNorm n;
  n.gamma = Tensor::full({dim}, 1.0, true);
  n.beta = Tensor::zeros({dim}, true);
  return n;
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

void LayerNorm::collect(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".gamma", &gamma);
  reg.add(prefix + ".beta", &beta);
}

Conv2d Conv2d::init(int in_ch, int out_ch, int k, int stride, int pad, Rng& rng) {
  Conv2d c;
  c.w = glorot({out_ch, in_ch, k, k}, in_ch * k * k, out_ch * k * k, rng);
  c.b = Tensor::zeros({out_ch}, true);
  c.stride = stride;
  c.pad = pad;
  return c;
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }

void Conv2d::collect(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".w", &w);
  reg.add(prefix + ".b", &b);
}

ConvTranspose2d ConvTranspose2d::init(int in_ch, int out_ch, int k, int stride, Rng& rng) {
  ConvTranspose2d c;
  c.w = glorot({in_ch, out_ch, k, k}, in_ch * k * k, out_ch * k * k, rng);
  c.b = Tensor::zeros({out_ch}, true);
  c.stride = stride;
  return c;
}

Tensor ConvTranspose2d::forward(const Tensor& x) const { return conv_transpose2d(x, w, b, stride); }

void ConvTranspose2d::collect(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".w", &w);
  reg.add(prefix + ".b", &b);
}

MultiHeadAttention MultiHeadAttention::init(int d_model, int heads, Rng& rng) {
  MultiHeadAttention m;
  m.wq = Linear::init(d_model, d_model, rng);
  m.wk = Linear::init(d_model, d_model, rng);
  m.wv = Linear::init(d_model, d_model, rng);
  m.wo = Linear::init(d_model, d_model, rng);
  m.heads = heads;
  if (d_model % heads != 0)
    throw std::invalid_argument("attention heads must divide d_model");
  return m;
}

MultiHeadAttention MultiHeadAttention::zeros(int d_model, int heads) {
  MultiHeadAttention m;
  m.wq = Linear::zeros(d_model, d_model);
  m.wk = Linear::zeros(d_model, d_model);
  m.wv = Linear::zeros(d_model, d_model);
  m.wo = Linear::zeros(d_model, d_model);
  m.heads = heads;
  return m;
}

Tensor MultiHeadAttention::forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const AttentionMask& mask) const {
  Tensor a = attention(wq.forward(q), wk.forward(k), wv.forward(v), mask, heads);
  return wo.forward(a);
}

void MultiHeadAttention::collect(ParamRegistry& reg, const std::string& prefix) {
  wq.collect(reg, prefix + ".wq");
  wk.collect(reg, prefix + ".wk");
  wv.collect(reg, prefix + ".wv");
  wo.collect(reg, prefix + ".wo");
}

}  // namespace partseg::nn
