#include "partseg/backbone.hpp"

#include <cmath>
#include <stdexcept>

#include "partseg/ops.hpp"

namespace partseg::backbone {

Tensor feature_rows(const Tensor& chw) {
  if (chw.ndim() != 3) throw std::invalid_argument("feature map must be 3-d");
  int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  return transpose(chw.view({c, h * w}));
}

Tensor rows_to_chw(const Tensor& rows, int h, int w) {
  if (rows.dim(0) != h * w) throw std::invalid_argument("row count must equal h*w");
  return transpose(rows).view({rows.dim(1), h, w});
}

Tensor positional_encoding(int h, int w, int d) {
  if (d % 2 != 0) throw std::invalid_argument("positional encoding dim must be even");
  int da = d / 2;  // per-axis width
  std::vector<double> v(static_cast<std::size_t>(h) * w * d);
  auto axis_val = [da](int pos, int k) {
    double freq = std::pow(10000.0, -static_cast<double>(k - k % 2) / da);
    double t = pos * freq;
    return k % 2 == 0 ? std::sin(t) : std::cos(t);
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::size_t row = (static_cast<std::size_t>(y) * w + x) * d;
      for (int k = 0; k < da; ++k) {
        v[row + k] = axis_val(y, k);
        v[row + da + k] = axis_val(x, k);
      }
    }
  return Tensor::from({h * w, d}, std::move(v));
}

Backbone Backbone::init(const BackboneConfig& cfg, Rng& rng) {
  if (cfg.widths.size() != 4) throw std::invalid_argument("backbone needs four level widths");
  if (cfg.widths[1] != cfg.d_model)
    throw std::invalid_argument("stride-8 width must equal d_model");
  Backbone b;
  b.cfg = cfg;
  b.stem = nn::Conv2d::init(3, cfg.stem_width, 3, 2, 1, rng);
  b.c1 = nn::Conv2d::init(cfg.stem_width, cfg.widths[0], 3, 2, 1, rng);
  b.c2 = nn::Conv2d::init(cfg.widths[0], cfg.widths[1], 3, 2, 1, rng);
  b.c3 = nn::Conv2d::init(cfg.widths[1], cfg.widths[2], 3, 2, 1, rng);
  b.c4 = nn::Conv2d::init(cfg.widths[2], cfg.widths[3], 3, 2, 1, rng);
  for (int l = 0; l < 4; ++l)
    b.proj[static_cast<std::size_t>(l)] =
        nn::Conv2d::init(cfg.widths[static_cast<std::size_t>(l)], cfg.d_proto, 1, 1, 0, rng);
  b.neck_lin = nn::Linear::init(cfg.d_model, cfg.d_model, rng);
  b.neck_attn = nn::MultiHeadAttention::init(cfg.d_model, cfg.attn_heads, rng);
  b.neck_mlp1 = nn::Linear::init(cfg.d_model, cfg.d_model * 2, rng);
  b.neck_mlp2 = nn::Linear::init(cfg.d_model * 2, cfg.d_model, rng);
  b.neck_attn2 = nn::MultiHeadAttention::init(cfg.d_model, cfg.attn_heads, rng);
  return b;
}

void Backbone::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  stem.collect(reg, prefix + ".stem");
  c1.collect(reg, prefix + ".c1");
  c2.collect(reg, prefix + ".c2");
  c3.collect(reg, prefix + ".c3");
  c4.collect(reg, prefix + ".c4");
  for (int l = 0; l < 4; ++l)
    proj[static_cast<std::size_t>(l)].collect(reg, prefix + ".proj" + std::to_string(l));
  neck_lin.collect(reg, prefix + ".neck_lin");
  neck_attn.collect(reg, prefix + ".neck_attn");
  neck_mlp1.collect(reg, prefix + ".neck_mlp1");
  neck_mlp2.collect(reg, prefix + ".neck_mlp2");
  neck_attn2.collect(reg, prefix + ".neck_attn2");
}

namespace {
void check_image(const Tensor& img) {
  if (img.ndim() != 3 || img.dim(0) != 3)
    throw std::invalid_argument("backbone expects a (3,H,W) image, got " + shape_str(img.shape));
  if (img.dim(1) % 8 != 0 || img.dim(2) % 8 != 0)
    throw std::invalid_argument("image dims must be divisible by 8");
}
}  // namespace

Tensor Backbone::encode_image(const Tensor& img) const {
  check_image(img);
  Tensor x = relu(stem.forward(img));
  x = relu(c1.forward(x));
  x = relu(c2.forward(x));  // (d_model, H/8, W/8)
  int h = x.dim(1), w = x.dim(2);
  // neck: projection plus one self-attention block with positional queries
  Tensor rows = neck_lin.forward(feature_rows(x));
  Tensor pe = positional_encoding(h, w, cfg.d_model);
  Tensor qk = add(rows, pe);
  rows = add(rows, neck_attn.forward(qk, qk, rows));
  rows = add(rows, neck_mlp2.forward(relu(neck_mlp1.forward(rows))));
  Tensor qk2 = add(rows, pe);
  rows = add(rows, neck_attn2.forward(qk2, qk2, rows));
  return rows_to_chw(rows, h, w);
}

PyramidFeatures Backbone::pyramid(const Tensor& img) const {
  check_image(img);
  Tensor x = relu(stem.forward(img));
  PyramidFeatures p;
  p.levels[0] = relu(c1.forward(x));
  p.levels[1] = relu(c2.forward(p.levels[0]));
  p.levels[2] = relu(c3.forward(p.levels[1]));
  p.levels[3] = relu(c4.forward(p.levels[2]));
  for (int l = 0; l < 4; ++l)
    p.projected[static_cast<std::size_t>(l)] =
        proj[static_cast<std::size_t>(l)].forward(p.levels[static_cast<std::size_t>(l)]);
  return p;
}

}  // namespace partseg::backbone
