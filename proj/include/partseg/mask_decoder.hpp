#pragma once

#include <vector>

#include "partseg/nn.hpp"
#include "partseg/ontology.hpp"
#include "partseg/tensor.hpp"

namespace partseg::decoder {

struct MaskSet {
  Tensor logits;  // (n_cls, H_out, W_out)

  // strict > threshold on the sigmoid
  std::vector<std::uint8_t> binary(int cls, double threshold = 0.5) const;
};

struct TwoWayBlock {
  nn::MultiHeadAttention self_attn, tok_to_img, img_to_tok;
  nn::Mlp mlp;
  nn::LayerNorm ln1, ln2, ln3, ln4;

  static TwoWayBlock init(int d_model, int heads, Rng& rng);
  void collect(nn::ParamRegistry& reg, const std::string& prefix);
};

struct DecoderConfig {
  int d_model = 32;
  int heads = 4;
  int d_up = 8;      // channels of the upscaled map = hypernet output width
  int out_size = 64;
};

struct MaskDecoder {
  DecoderConfig cfg;
  Tensor mask_tokens;                 // (n_cls, d_model), learned
  std::vector<TwoWayBlock> blocks;    // two rounds of bidirectional attention
  nn::ConvTranspose2d up1, up2;       // x4 total, then bilinear to out_size
  std::vector<nn::Mlp> hypernets;     // one per class

  static MaskDecoder init(const DecoderConfig& cfg, Rng& rng);
  void collect(nn::ParamRegistry& reg, const std::string& prefix);

  struct Output {
    MaskSet masks;
    Tensor tokens;  // (n_cls, d_model) post-attention class tokens
  };
  // f: (d_model,h,w) image features; dense: same shape; sparse: (n_cls,d_model)
  Output decode(const Tensor& f, const Tensor& dense, const Tensor& sparse) const;
};

// pixel label = argmax-logit class among classes whose sigmoid exceeds 0.5,
// else -1 (background); exact logit tie goes to the lower class id. keep
// lets the caller drop classes wholesale (e.g. classification gating).
std::vector<int> semantic_map(const MaskSet& masks,
                              const std::vector<bool>& keep = std::vector<bool>());

}  // namespace partseg::decoder
