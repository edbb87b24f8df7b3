#include "partseg/prompt_fusion.hpp"

#include <stdexcept>

#include "partseg/backbone.hpp"
#include "partseg/ops.hpp"

namespace partseg::fusion {

using backbone::feature_rows;
using backbone::positional_encoding;
using backbone::rows_to_chw;

PrototypeSet PrototypeSet::textual(Tensor rows) {
  PrototypeSet s;
  s.p = std::move(rows);
  s.valid.assign(static_cast<std::size_t>(s.p.dim(0)), true);
  return s;
}

Cdt Cdt::init(int d_model, int heads, Rng& rng) {
  Cdt c;
  c.attn = nn::MultiHeadAttention::init(d_model, heads, rng);
  c.key_proj = nn::Linear::init(d_model, d_model, rng);
  return c;
}

Cdt Cdt::zeros(int d_model, int heads) {
  Cdt c;
  c.attn = nn::MultiHeadAttention::zeros(d_model, heads);
  c.key_proj = nn::Linear::zeros(d_model, d_model);
  return c;
}

void Cdt::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  attn.collect(reg, prefix + ".attn");
  key_proj.collect(reg, prefix + ".key");
}

PrototypeSet Cdt::forward(const Tensor& f, const PrototypeSet& p) const {
  int d = f.dim(0), h = f.dim(1), w = f.dim(2);
  if (p.p.dim(1) != d)
    throw std::invalid_argument("prototype width " + std::to_string(p.p.dim(1)) +
                                " does not match feature channels " + std::to_string(d));
  Tensor rows = feature_rows(f);
  Tensor keys = add(positional_encoding(h, w, d), key_proj.forward(rows));
  PrototypeSet out;
  out.p = add(p.p, attn.forward(p.p, keys, rows));
  out.valid = p.valid;
  return out;
}

std::vector<Tensor> ppem_activate(const Tensor& f_rows, const Tensor& p) {
  if (f_rows.dim(1) != p.dim(1))
    throw std::invalid_argument("activation dims disagree: " + shape_str(f_rows.shape) + " vs " +
                                shape_str(p.shape));
  int n_cls = p.dim(0), d = p.dim(1);
  Tensor ones_row = Tensor::full({1, d}, 1.0);
  std::vector<Tensor> acts;
  acts.reserve(static_cast<std::size_t>(n_cls));
  for (int c = 0; c < n_cls; ++c) {
    Tensor dots = matmul(f_rows, transpose(slice_rows(p, c, 1)));  // (n,1) scalar similarities
    acts.push_back(add(f_rows, mul(f_rows, matmul(dots, ones_row))));
  }
  return acts;
}

Ppem Ppem::init(int d_model, int d_mid, Rng& rng) {
  Ppem m;
  m.dense_mlp = nn::Mlp::init(d_model, d_model, d_mid, rng);
  m.mix = nn::Conv2d::init(kNumClasses * d_mid, d_model, 1, 1, 0, rng);
  m.sparse_mlp = nn::Mlp::init(d_model, d_model, d_model, rng);
  m.pos_embed = Tensor::zeros({d_model}, /*requires_grad=*/true);
  m.neg_embed = Tensor::zeros({d_model}, /*requires_grad=*/true);
  for (auto& v : *m.pos_embed.data) v = 0.1 * rng.normal();
  for (auto& v : *m.neg_embed.data) v = 0.1 * rng.normal();
  return m;
}

void Ppem::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  dense_mlp.collect(reg, prefix + ".dense");
  mix.collect(reg, prefix + ".mix");
  sparse_mlp.collect(reg, prefix + ".sparse");
  reg.add(prefix + ".pos_embed", &pos_embed);
  reg.add(prefix + ".neg_embed", &neg_embed);
}

PromptEmbeddings Ppem::forward(const std::vector<Tensor>& acts, const std::vector<bool>& presence,
                               int h, int w) const {
  if (acts.size() != static_cast<std::size_t>(kNumClasses) || presence.size() != acts.size())
    throw std::invalid_argument("ppem expects one activation map and flag per class");
  std::vector<Tensor> dense_cols, tokens;
  dense_cols.reserve(acts.size());
  tokens.reserve(acts.size());
  for (std::size_t c = 0; c < acts.size(); ++c) {
    dense_cols.push_back(dense_mlp.forward(acts[c]));
    Tensor pooled = mean_axis0(acts[c]).view({1, acts[c].dim(1)});
    Tensor tok = sparse_mlp.forward(pooled);
    tok = add(tok, (presence[c] ? pos_embed : neg_embed).view({1, pos_embed.dim(0)}));
    tokens.push_back(tok);
  }
  PromptEmbeddings out;
  out.dense = mix.forward(rows_to_chw(concat_cols(dense_cols), h, w));
  out.sparse = concat_rows(tokens);
  return out;
}

std::vector<double> presence_scores(const Tensor& f_rows, const Tensor& p) {
  int n = f_rows.dim(0), d = f_rows.dim(1), n_cls = p.dim(0);
  std::vector<double> scores(static_cast<std::size_t>(n_cls), -1e18);
  for (int c = 0; c < n_cls; ++c)
    for (int i = 0; i < n; ++i) {
      double dot = 0;
      for (int k = 0; k < d; ++k)
        dot += f_rows.at(static_cast<std::size_t>(i) * d + k) *
               p.at(static_cast<std::size_t>(c) * d + k);
      scores[static_cast<std::size_t>(c)] = std::max(scores[static_cast<std::size_t>(c)], dot);
    }
  return scores;
}

}  // namespace partseg::fusion
