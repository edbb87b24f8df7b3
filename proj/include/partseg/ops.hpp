#pragma once

#include <vector>

#include "partseg/tensor.hpp"

namespace partseg {

// Additive attention mask: allowed entries contribute bias 0, disallowed a
// large negative constant. Every query row must keep at least one allowed
// entry unless allow_empty_rows is set (then the row softmaxes to all zeros).
struct AttentionMask {
  int rows = 0, cols = 0;
  std::vector<std::uint8_t> allowed;  // rows*cols, 1 = visible; empty = no mask
  bool allow_empty_rows = false;

  static AttentionMask none() { return {}; }
  static AttentionMask all_visible(int rows, int cols);
  bool empty() const { return allowed.empty(); }
  void set(int r, int c, bool visible) {
    allowed[static_cast<std::size_t>(r) * cols + c] = visible ? 1 : 0;
  }
  bool visible(int r, int c) const {
    return allowed[static_cast<std::size_t>(r) * cols + c] != 0;
  }
};

// large negative stand-in for -inf; masked probabilities are zeroed exactly
// after the softmax so the bit-exact zero contract still holds
constexpr double kMaskNegInf = -1e9;

// elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor elu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor sqrt_t(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor scale_by(const Tensor& a, const Tensor& s);  // scalar-tensor multiplier

// reductions
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis0(const Tensor& a);   // (N,D) -> (D)
Tensor mean_axis0(const Tensor& a);  // (N,D) -> (D)
Tensor mean_axis1(const Tensor& a);  // (N,D) -> (N)

// linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);  // (N,K)x(K,M) -> (N,M)
Tensor transpose(const Tensor& a);                // 2-d

// structure
Tensor add_row_broadcast(const Tensor& mat, const Tensor& row);  // (N,D)+(D)
Tensor mul_row_broadcast(const Tensor& mat, const Tensor& row);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int start, int len);
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);

// softmax over the last dimension of a 2-d tensor (1-d treated as one row)
Tensor masked_softmax(const Tensor& logits, const AttentionMask& mask);
Tensor softmax_rows(const Tensor& logits);

// scaled dot-product attention; heads split the feature dim, outputs are
// concatenated back. No projections here; see nn::MultiHeadAttention.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionMask& mask, int heads);

// per-row layer norm with affine parameters, x (N,D), gamma/beta (D)
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// image ops, layout (C,H,W)
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);
// samples (C,H,W) at continuous pixel-center coords, one (C) row per point
Tensor bilinear_sample(const Tensor& x, const std::vector<double>& ys,
                       const std::vector<double>& xs);

}  // namespace partseg
