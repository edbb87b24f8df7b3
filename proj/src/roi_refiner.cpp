#include "partseg/roi_refiner.hpp"

#include <cmath>
#include <stdexcept>

#include "partseg/ops.hpp"

namespace partseg::roi {

std::vector<RoiBox> mask_to_boxes(const decoder::MaskSet& masks, double threshold, int min_area) {
  int h = masks.logits.dim(1), w = masks.logits.dim(2);
  std::vector<RoiBox> boxes;
  for (int c = 0; c < kNumClasses; ++c) {
    std::vector<std::uint8_t> bin = masks.binary(c, threshold);
    RoiBox box;
    box.cls = c;
    box.r0 = h;
    box.c0 = w;
    box.r1 = -1;
    box.c1 = -1;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (bin[static_cast<std::size_t>(y) * w + x]) {
          ++box.area;
          box.r0 = std::min(box.r0, y);
          box.c0 = std::min(box.c0, x);
          box.r1 = std::max(box.r1, y);
          box.c1 = std::max(box.c1, x);
        }
    if (box.area >= min_area) boxes.push_back(box);
  }
  return boxes;
}

int roi_level_for_area(int area) {
  if (area < 1) throw std::invalid_argument("roi area must be positive");
  int level = static_cast<int>(std::floor(std::log2(std::sqrt(static_cast<double>(area)) / 8.0)));
  return std::max(0, std::min(3, level));
}

Tensor roi_align_level(const Tensor& level_map, const RoiBox& box, int out_size, int image_size) {
  if (box.r0 > box.r1 || box.c0 > box.c1 || box.r0 < 0 || box.c0 < 0 || box.r1 >= image_size ||
      box.c1 >= image_size)
    throw std::invalid_argument("roi box out of bounds");
  int lh = level_map.dim(1), lw = level_map.dim(2);
  double sy = static_cast<double>(lh) / image_size;
  double sx = static_cast<double>(lw) / image_size;
  auto coords = [out_size](int lo, int hi, double scale) {
    std::vector<double> cs(static_cast<std::size_t>(out_size));
    int extent = hi - lo + 1;
    for (int i = 0; i < out_size; ++i) {
      // image-space sample point; a one-pixel extent replicates the center
      double img = extent == 1 ? lo : lo + (i + 0.5) * extent / out_size - 0.5;
      cs[static_cast<std::size_t>(i)] = (img + 0.5) * scale - 0.5;
    }
    return cs;
  };
  std::vector<double> ys_axis = coords(box.r0, box.r1, sy);
  std::vector<double> xs_axis = coords(box.c0, box.c1, sx);
  std::vector<double> ys, xs;
  ys.reserve(static_cast<std::size_t>(out_size) * out_size);
  xs.reserve(ys.capacity());
  for (double y : ys_axis)
    for (double x : xs_axis) {
      ys.push_back(y);
      xs.push_back(x);
    }
  return bilinear_sample(level_map, ys, xs);  // (out*out, C)
}

Tensor roi_align(const backbone::PyramidFeatures& pyramid, const RoiBox& box, int out_size,
                 int image_size) {
  int level = roi_level_for_area(box.area);
  return roi_align_level(pyramid.projected[static_cast<std::size_t>(level)], box, out_size,
                         image_size);
}

RoiRefiner RoiRefiner::init(int d_model, int heads, Rng& rng) {
  RoiRefiner r;
  r.attn = nn::MultiHeadAttention::init(d_model, heads, rng);
  r.cls = nn::Linear::init(d_model, kNumClasses, rng);
  return r;
}

RoiRefiner RoiRefiner::zeros(int d_model, int heads) {
  RoiRefiner r;
  r.attn = nn::MultiHeadAttention::zeros(d_model, heads);
  r.cls = nn::Linear::zeros(d_model, kNumClasses);
  return r;
}

void RoiRefiner::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  attn.collect(reg, prefix + ".attn");
  cls.collect(reg, prefix + ".cls");
}

Tensor RoiRefiner::refine_logits(const Tensor& roi_rows, const context::VisualPrototypes& pv,
                                 bool* warned) const {
  if (warned) *warned = false;
  bool any = false;
  for (bool v : pv.valid) any = any || v;
  if (!any) {
    if (warned) *warned = true;
    return Tensor::zeros({1, kNumClasses});  // pass-through: decoder scores stand
  }
  int nq = roi_rows.dim(0);
  AttentionMask mask;
  mask.rows = nq;
  mask.cols = kNumClasses;
  mask.allowed.assign(static_cast<std::size_t>(nq) * kNumClasses, 0);
  for (int q = 0; q < nq; ++q)
    for (int c = 0; c < kNumClasses; ++c)
      if (pv.valid[static_cast<std::size_t>(c)]) mask.set(q, c, true);
  Tensor attended = add(roi_rows, attn.forward(roi_rows, pv.p, pv.p, mask));
  Tensor pooled = mean_axis0(attended).view({1, attended.dim(1)});
  return cls.forward(pooled);  // (1, n_cls)
}

}  // namespace partseg::roi
