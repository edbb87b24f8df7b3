#pragma once

#include <vector>

#include "partseg/backbone.hpp"
#include "partseg/context_bank.hpp"
#include "partseg/mask_decoder.hpp"
#include "partseg/nn.hpp"
#include "partseg/ontology.hpp"

namespace partseg::roi {

struct RoiBox {
  ClassId cls = 0;
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;  // inclusive, tight over the binary mask
  int area = 0;                        // thresholded pixel count
};

// one tight box per class whose binary mask holds >= min_area pixels
std::vector<RoiBox> mask_to_boxes(const decoder::MaskSet& masks, double threshold = 0.5,
                                  int min_area = 8);

// pyramid level for a box: larger regions read coarser maps
int roi_level_for_area(int area);

// bilinear sampling of one level onto an out_size grid; image-space box
// coordinates, half-pixel centers; degenerate extents replicate the single
// sample line
Tensor roi_align_level(const Tensor& level_map, const RoiBox& box, int out_size, int image_size);

// level chosen by roi_level_for_area over the projected pyramid maps
Tensor roi_align(const backbone::PyramidFeatures& pyramid, const RoiBox& box, int out_size,
                 int image_size);

struct RoiRefiner {
  nn::MultiHeadAttention attn;  // ROI rows query the valid visual prototypes
  nn::Linear cls;
  int out_size = 4;

  static RoiRefiner init(int d_model, int heads, Rng& rng);
  static RoiRefiner zeros(int d_model, int heads);
  void collect(nn::ParamRegistry& reg, const std::string& prefix);

  // per-box class logits; pass-through (all zeros, warned=true) when no
  // prototype row is valid
  Tensor refine_logits(const Tensor& roi_rows, const context::VisualPrototypes& pv,
                       bool* warned = nullptr) const;
};

}  // namespace partseg::roi
