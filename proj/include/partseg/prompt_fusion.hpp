#pragma once

#include <array>
#include <vector>

#include "partseg/nn.hpp"
#include "partseg/ontology.hpp"
#include "partseg/tensor.hpp"

namespace partseg::fusion {

struct PrototypeSet {
  Tensor p;                   // (n_cls, d_proto)
  std::vector<bool> valid;    // per-class validity (all true for textual)

  static PrototypeSet textual(Tensor rows);
};

struct PromptEmbeddings {
  Tensor dense;   // (d_model, h, w)
  Tensor sparse;  // (n_cls, d_model), one token per class
};

// conditional adapter: P + CrossAttn(query=P, key=PE+proj(F'), value=F');
// zero-initialized projections make it the identity at start
struct Cdt {
  nn::MultiHeadAttention attn;
  nn::Linear key_proj;

  static Cdt init(int d_model, int heads, Rng& rng);
  static Cdt zeros(int d_model, int heads);
  void collect(nn::ParamRegistry& reg, const std::string& prefix);
  // f is the (d_model,h,w) decode-time map
  PrototypeSet forward(const Tensor& f, const PrototypeSet& p) const;
};

// A_{i,c} = F'_i + F'_i * (F'_i . P_c); returns n_cls tensors of (n_pos, d)
std::vector<Tensor> ppem_activate(const Tensor& f_rows, const Tensor& p);

struct Ppem {
  nn::Mlp dense_mlp;          // shared per-class map before channel concat
  nn::Conv2d mix;             // 1x1 over concatenated per-class channels
  nn::Mlp sparse_mlp;         // activation rows -> one token per class
  Tensor pos_embed, neg_embed;  // learned presence embeddings (d_model)

  static Ppem init(int d_model, int d_mid, Rng& rng);
  void collect(nn::ParamRegistry& reg, const std::string& prefix);
  // activations from ppem_activate; presence flags teacher-forced at train
  PromptEmbeddings forward(const std::vector<Tensor>& acts, const std::vector<bool>& presence,
                           int h, int w) const;
};

// max over positions of F'_i . P_c, the presence score thresholded at inference
std::vector<double> presence_scores(const Tensor& f_rows, const Tensor& p);

}  // namespace partseg::fusion
