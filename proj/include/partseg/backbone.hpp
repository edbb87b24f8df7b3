#pragma once

#include <array>
#include <vector>

#include "partseg/nn.hpp"
#include "partseg/tensor.hpp"

namespace partseg::backbone {

struct BackboneConfig {
  int d_model = 32;   // channels of the decode-time map F
  int d_proto = 32;   // channel width of the projected pyramid levels
  int stem_width = 8;
  std::vector<int> widths = {16, 32, 64, 128};  // strides 4/8/16/32
  int attn_heads = 4;
};

struct PyramidFeatures {
  std::array<Tensor, 4> levels;     // native widths, strides 4/8/16/32
  std::array<Tensor, 4> projected;  // d_proto channels each
};

// (C,h,w) -> (h*w, C) row-major over spatial positions
Tensor feature_rows(const Tensor& chw);
// inverse of feature_rows
Tensor rows_to_chw(const Tensor& rows, int h, int w);

// fixed 2-d sinusoidal encoding, one row per position, row-major; d even
Tensor positional_encoding(int h, int w, int d);

struct Backbone {
  BackboneConfig cfg;
  nn::Conv2d stem, c1, c2, c3, c4;   // stride-2 stages
  std::array<nn::Conv2d, 4> proj;    // 1x1 projections to d_proto
  nn::Linear neck_lin;
  // two-block transformer neck over F rows: attention, a small mlp, then a
  // second attention pass; the global mixing lets any cell condition on cues
  // elsewhere in the image (view side, face markers)
  nn::MultiHeadAttention neck_attn;
  nn::Linear neck_mlp1, neck_mlp2;
  nn::MultiHeadAttention neck_attn2;

  static Backbone init(const BackboneConfig& cfg, Rng& rng);
  void collect(nn::ParamRegistry& reg, const std::string& prefix);

  // stride-8 decode-time map, d_model channels
  Tensor encode_image(const Tensor& img) const;
  PyramidFeatures pyramid(const Tensor& img) const;
};

}  // namespace partseg::backbone
