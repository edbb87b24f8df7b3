#include "partseg/mask_decoder.hpp"

#include <cmath>
#include <stdexcept>

#include "partseg/backbone.hpp"
#include "partseg/ops.hpp"

namespace partseg::decoder {

using backbone::feature_rows;
using backbone::positional_encoding;
using backbone::rows_to_chw;

std::vector<std::uint8_t> MaskSet::binary(int cls, double threshold) const {
  int h = logits.dim(1), w = logits.dim(2);
  std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<std::uint8_t> out(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    double s = 1.0 / (1.0 + std::exp(-logits.at(static_cast<std::size_t>(cls) * plane + i)));
    out[i] = s > threshold ? 1 : 0;
  }
  return out;
}

TwoWayBlock TwoWayBlock::init(int d_model, int heads, Rng& rng) {
  TwoWayBlock b;
  b.self_attn = nn::MultiHeadAttention::init(d_model, heads, rng);
  b.tok_to_img = nn::MultiHeadAttention::init(d_model, heads, rng);
  b.img_to_tok = nn::MultiHeadAttention::init(d_model, heads, rng);
  b.mlp = nn::Mlp::init(d_model, 2 * d_model, d_model, rng);
  b.ln1 = nn::LayerNorm::init(d_model);
  b.ln2 = nn::LayerNorm::init(d_model);
  b.ln3 = nn::LayerNorm::init(d_model);
  b.ln4 = nn::LayerNorm::init(d_model);
  return b;
}

void TwoWayBlock::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  self_attn.collect(reg, prefix + ".self");
  tok_to_img.collect(reg, prefix + ".t2i");
  img_to_tok.collect(reg, prefix + ".i2t");
  mlp.collect(reg, prefix + ".mlp");
  ln1.collect(reg, prefix + ".ln1");
  ln2.collect(reg, prefix + ".ln2");
  ln3.collect(reg, prefix + ".ln3");
  ln4.collect(reg, prefix + ".ln4");
}

MaskDecoder MaskDecoder::init(const DecoderConfig& cfg, Rng& rng) {
  MaskDecoder d;
  d.cfg = cfg;
  d.mask_tokens = nn::glorot({kNumClasses, cfg.d_model}, cfg.d_model, cfg.d_model, rng);
  d.blocks.push_back(TwoWayBlock::init(cfg.d_model, cfg.heads, rng));
  d.blocks.push_back(TwoWayBlock::init(cfg.d_model, cfg.heads, rng));
  int mid = cfg.d_model / 2;
  d.up1 = nn::ConvTranspose2d::init(cfg.d_model, mid, 2, 2, rng);
  d.up2 = nn::ConvTranspose2d::init(mid, cfg.d_up, 2, 2, rng);
  for (int c = 0; c < kNumClasses; ++c)
    d.hypernets.push_back(nn::Mlp::init(cfg.d_model, cfg.d_model, cfg.d_up, rng));
  return d;
}

void MaskDecoder::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".mask_tokens", &mask_tokens);
  for (std::size_t b = 0; b < blocks.size(); ++b)
    blocks[b].collect(reg, prefix + ".blk" + std::to_string(b));
  up1.collect(reg, prefix + ".up1");
  up2.collect(reg, prefix + ".up2");
  for (std::size_t c = 0; c < hypernets.size(); ++c)
    hypernets[c].collect(reg, prefix + ".hyper" + std::to_string(c));
}

MaskDecoder::Output MaskDecoder::decode(const Tensor& f, const Tensor& dense,
                                        const Tensor& sparse) const {
  if (f.shape != dense.shape)
    throw std::invalid_argument("dense prompt shape " + shape_str(dense.shape) +
                                " must match features " + shape_str(f.shape));
  if (sparse.dim(0) != kNumClasses || sparse.dim(1) != cfg.d_model)
    throw std::invalid_argument("sparse prompt shape mismatch: " + shape_str(sparse.shape));
  int h = f.dim(1), w = f.dim(2);
  Tensor pe = positional_encoding(h, w, cfg.d_model);
  Tensor src = add(feature_rows(add(f, dense)), pe);
  Tensor tok = add(mask_tokens, sparse);

  for (const TwoWayBlock& b : blocks) {
    tok = b.ln1.forward(add(tok, b.self_attn.forward(tok, tok, tok)));
    tok = b.ln2.forward(add(tok, b.tok_to_img.forward(tok, src, src)));
    tok = b.ln3.forward(add(tok, b.mlp.forward(tok)));
    src = b.ln4.forward(add(src, b.img_to_tok.forward(src, tok, tok)));
  }

  Tensor up = relu(up1.forward(rows_to_chw(src, h, w)));
  up = up2.forward(up);
  up = bilinear_resize(up, cfg.out_size, cfg.out_size);
  Tensor up_rows = feature_rows(up);  // (H*W, d_up)

  std::vector<Tensor> maps;
  maps.reserve(static_cast<std::size_t>(kNumClasses));
  for (int c = 0; c < kNumClasses; ++c) {
    Tensor hv = hypernets[static_cast<std::size_t>(c)].forward(slice_rows(tok, c, 1));  // (1,d_up)
    maps.push_back(matmul(up_rows, transpose(hv)));  // (H*W, 1)
  }
  Output out;
  out.masks.logits = transpose(concat_cols(maps)).view({kNumClasses, cfg.out_size, cfg.out_size});
  out.tokens = tok;
  return out;
}

std::vector<int> semantic_map(const MaskSet& masks, const std::vector<bool>& keep) {
  int h = masks.logits.dim(1), w = masks.logits.dim(2);
  std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<int> out(plane, -1);
  for (std::size_t i = 0; i < plane; ++i) {
    int best = -1;
    double best_logit = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
      if (!keep.empty() && !keep[static_cast<std::size_t>(c)]) continue;
      double logit = masks.logits.at(static_cast<std::size_t>(c) * plane + i);
      if (logit <= 0.0) continue;  // sigmoid(logit) > 0.5 iff logit > 0
      if (best == -1 || logit > best_logit) {  // ties keep the lower class id
        best = c;
        best_logit = logit;
      }
    }
    out[i] = best;
  }
  return out;
}

}  // namespace partseg::decoder
