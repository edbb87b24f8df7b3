#include "partseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace partseg {

namespace {

using Buf = std::shared_ptr<std::vector<double>>;

bool want_grad(const Tensor& t) { return grad_enabled() && t.requires_grad; }

std::shared_ptr<Node> make_node(std::initializer_list<const Tensor*> parents) {
  auto n = std::make_shared<Node>();
  for (const Tensor* p : parents)
    if (p && p->node) n->parents.push_back(p->node);
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
}

// rows/cols interpretation for 1-d and 2-d tensors
void rows_cols(const Tensor& t, int& rows, int& cols, const char* op) {
  if (t.ndim() == 1) {
    rows = 1;
    cols = t.dim(0);
  } else if (t.ndim() == 2) {
    rows = t.dim(0);
    cols = t.dim(1);
  } else {
    throw std::invalid_argument(std::string(op) + ": expected 1-d or 2-d, got " +
                                shape_str(t.shape));
  }
}

Tensor unary_op(const Tensor& a, double (*f)(double), double (*df)(double)) {
  bool rg = want_grad(a);
  Tensor out = Tensor::zeros(a.shape, rg);
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = f((*a.data)[i]);
  if (rg) {
    out.node = make_node({&a});
    Buf ga = a.grad, og = out.grad, ad = a.data;
    out.node->backward = [ga, og, ad, df, n]() {
      for (std::size_t i = 0; i < n; ++i) (*ga)[i] += (*og)[i] * df((*ad)[i]);
    };
  }
  return out;
}

}  // namespace

AttentionMask AttentionMask::all_visible(int rows, int cols) {
  AttentionMask m;
  m.rows = rows;
  m.cols = cols;
  m.allowed.assign(static_cast<std::size_t>(rows) * cols, 1);
  return m;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  bool rg = want_grad(a) || want_grad(b);
  Tensor out = Tensor::zeros(a.shape, rg);
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  if (rg) {
    out.node = make_node({&a, &b});
    Buf ga = want_grad(a) ? a.grad : nullptr;
    Buf gb = want_grad(b) ? b.grad : nullptr;
    Buf og = out.grad;
    out.node->backward = [ga, gb, og, n]() {
      if (ga)
        for (std::size_t i = 0; i < n; ++i) (*ga)[i] += (*og)[i];
      if (gb)
        for (std::size_t i = 0; i < n; ++i) (*gb)[i] += (*og)[i];
    };
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  bool rg = want_grad(a) || want_grad(b);
  Tensor out = Tensor::zeros(a.shape, rg);
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
  if (rg) {
    out.node = make_node({&a, &b});
    Buf ga = want_grad(a) ? a.grad : nullptr;
    Buf gb = want_grad(b) ? b.grad : nullptr;
    Buf og = out.grad;
    out.node->backward = [ga, gb, og, n]() {
      if (ga)
        for (std::size_t i = 0; i < n; ++i) (*ga)[i] += (*og)[i];
      if (gb)
        for (std::size_t i = 0; i < n; ++i) (*gb)[i] -= (*og)[i];
    };
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  bool rg = want_grad(a) || want_grad(b);
  Tensor out = Tensor::zeros(a.shape, rg);
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  if (rg) {
    out.node = make_node({&a, &b});
    Buf ga = want_grad(a) ? a.grad : nullptr;
    Buf gb = want_grad(b) ? b.grad : nullptr;
    Buf og = out.grad, ad = a.data, bd = b.data;
    out.node->backward = [ga, gb, og, ad, bd, n]() {
      if (ga)
        for (std::size_t i = 0; i < n; ++i) (*ga)[i] += (*og)[i] * (*bd)[i];
      if (gb)
        for (std::size_t i = 0; i < n; ++i) (*gb)[i] += (*og)[i] * (*ad)[i];
    };
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  bool rg = want_grad(a) || want_grad(b);
  Tensor out = Tensor::zeros(a.shape, rg);
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] / (*b.data)[i];
  if (rg) {
    out.node = make_node({&a, &b});
    Buf ga = want_grad(a) ? a.grad : nullptr;
    Buf gb = want_grad(b) ? b.grad : nullptr;
    Buf og = out.grad, ad = a.data, bd = b.data;
    out.node->backward = [ga, gb, og, ad, bd, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        double inv = 1.0 / (*bd)[i];
        if (ga) (*ga)[i] += (*og)[i] * inv;
        if (gb) (*gb)[i] -= (*og)[i] * (*ad)[i] * inv * inv;
      }
    };
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  bool rg = want_grad(a);
  Tensor out = Tensor::zeros(a.shape, rg);
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * s;
  if (rg) {
    out.node = make_node({&a});
    Buf ga = a.grad, og = out.grad;
    out.node->backward = [ga, og, s, n]() {
      for (std::size_t i = 0; i < n; ++i) (*ga)[i] += (*og)[i] * s;
    };
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  bool rg = want_grad(a);
  Tensor out = Tensor::zeros(a.shape, rg);
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + s;
  if (rg) {
    out.node = make_node({&a});
    Buf ga = a.grad, og = out.grad;
    out.node->backward = [ga, og, n]() {
      for (std::size_t i = 0; i < n; ++i) (*ga)[i] += (*og)[i];
    };
  }
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  bool rg = want_grad(a);
  Tensor out = Tensor::zeros(a.shape, rg);
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    double x = (*a.data)[i];
    (*out.data)[i] = x > 0 ? x : slope * x;
  }
  if (rg) {
    out.node = make_node({&a});
    Buf ga = a.grad, og = out.grad, ad = a.data;
    out.node->backward = [ga, og, ad, slope, n]() {
      for (std::size_t i = 0; i < n; ++i)
        (*ga)[i] += (*og)[i] * ((*ad)[i] > 0 ? 1.0 : slope);
    };
  }
  return out;
}

Tensor elu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0 ? x : std::expm1(x); },
      [](double x) { return x > 0 ? 1.0 : std::exp(x); });
}

Tensor sigmoid(const Tensor& a) {
  bool rg = want_grad(a);
  Tensor out = Tensor::zeros(a.shape, rg);
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = 1.0 / (1.0 + std::exp(-(*a.data)[i]));
  if (rg) {
    out.node = make_node({&a});
    Buf ga = a.grad, og = out.grad, od = out.data;
    out.node->backward = [ga, og, od, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        double y = (*od)[i];
        (*ga)[i] += (*og)[i] * y * (1.0 - y);
      }
    };
  }
  return out;
}

Tensor log_t(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Tensor sqrt_t(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); }, [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw std::invalid_argument("scale_by expects a scalar multiplier");
  bool rg = want_grad(a) || want_grad(s);
  Tensor out = Tensor::zeros(a.shape, rg);
  std::size_t n = a.numel();
  double sv = (*s.data)[0];
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * sv;
  if (rg) {
    out.node = make_node({&a, &s});
    Buf ga = want_grad(a) ? a.grad : nullptr;
    Buf gs = want_grad(s) ? s.grad : nullptr;
    Buf og = out.grad, ad = a.data;
    out.node->backward = [ga, gs, og, ad, sv, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        if (ga) (*ga)[i] += (*og)[i] * sv;
        if (gs) (*gs)[0] += (*og)[i] * (*ad)[i];
      }
    };
  }
  return out;
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  bool rg = want_grad(a);
  Tensor out = Tensor::zeros(a.shape, rg);
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = std::min(hi, std::max(lo, (*a.data)[i]));
  if (rg) {
    out.node = make_node({&a});
    Buf ga = a.grad, og = out.grad, ad = a.data;
    out.node->backward = [ga, og, ad, lo, hi, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        double x = (*ad)[i];
        if (x > lo && x < hi) (*ga)[i] += (*og)[i];
      }
    };
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  bool rg = want_grad(a);
  Tensor out = Tensor::zeros({1}, rg);
  double s = 0;
  std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) s += (*a.data)[i];
  (*out.data)[0] = s;
  if (rg) {
    out.node = make_node({&a});
    Buf ga = a.grad, og = out.grad;
    out.node->backward = [ga, og, n]() {
      double g = (*og)[0];
      for (std::size_t i = 0; i < n; ++i) (*ga)[i] += g;
    };
  }
  return out;
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_axis0(const Tensor& a) {
  int rows, cols;
  rows_cols(a, rows, cols, "sum_axis0");
  bool rg = want_grad(a);
  Tensor out = Tensor::zeros({cols}, rg);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      (*out.data)[c] += (*a.data)[static_cast<std::size_t>(r) * cols + c];
  if (rg) {
    out.node = make_node({&a});
    Buf ga = a.grad, og = out.grad;
    out.node->backward = [ga, og, rows, cols]() {
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          (*ga)[static_cast<std::size_t>(r) * cols + c] += (*og)[c];
    };
  }
  return out;
}

Tensor mean_axis0(const Tensor& a) {
  int rows, cols;
  rows_cols(a, rows, cols, "mean_axis0");
  return scale(sum_axis0(a), 1.0 / rows);
}

Tensor mean_axis1(const Tensor& a) {
  int rows, cols;
  rows_cols(a, rows, cols, "mean_axis1");
  bool rg = want_grad(a);
  Tensor out = Tensor::zeros({rows}, rg);
  for (int r = 0; r < rows; ++r) {
    double s = 0;
    for (int c = 0; c < cols; ++c) s += (*a.data)[static_cast<std::size_t>(r) * cols + c];
    (*out.data)[r] = s / cols;
  }
  if (rg) {
    out.node = make_node({&a});
    Buf ga = a.grad, og = out.grad;
    out.node->backward = [ga, og, rows, cols]() {
      for (int r = 0; r < rows; ++r) {
        double g = (*og)[r] / cols;
        for (int c = 0; c < cols; ++c) (*ga)[static_cast<std::size_t>(r) * cols + c] += g;
      }
    };
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape) + " x " +
                                shape_str(b.shape));
  int N = a.dim(0), K = a.dim(1), M = b.dim(1);
  bool rg = want_grad(a) || want_grad(b);
  Tensor out = Tensor::zeros({N, M}, rg);
  const double* pa = a.data->data();
  const double* pb = b.data->data();
  double* po = out.data->data();
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < K; ++k) {
      double av = pa[static_cast<std::size_t>(i) * K + k];
      if (av == 0.0) continue;
      const double* brow = pb + static_cast<std::size_t>(k) * M;
      double* orow = po + static_cast<std::size_t>(i) * M;
      for (int j = 0; j < M; ++j) orow[j] += av * brow[j];
    }
  if (rg) {
    out.node = make_node({&a, &b});
    Buf ga = want_grad(a) ? a.grad : nullptr;
    Buf gb = want_grad(b) ? b.grad : nullptr;
    Buf og = out.grad, ad = a.data, bd = b.data;
    out.node->backward = [ga, gb, og, ad, bd, N, K, M]() {
      const double* pg = og->data();
      if (ga) {
        // dA = dC * B^T
        double* pga = ga->data();
        const double* pb2 = bd->data();
        for (int i = 0; i < N; ++i)
          for (int k = 0; k < K; ++k) {
            double s = 0;
            const double* grow = pg + static_cast<std::size_t>(i) * M;
            const double* brow = pb2 + static_cast<std::size_t>(k) * M;
            for (int j = 0; j < M; ++j) s += grow[j] * brow[j];
            pga[static_cast<std::size_t>(i) * K + k] += s;
          }
      }
      if (gb) {
        // dB = A^T * dC
        double* pgb = gb->data();
        const double* pa2 = ad->data();
        for (int i = 0; i < N; ++i) {
          const double* grow = pg + static_cast<std::size_t>(i) * M;
          for (int k = 0; k < K; ++k) {
            double av = pa2[static_cast<std::size_t>(i) * K + k];
            if (av == 0.0) continue;
            double* brow = pgb + static_cast<std::size_t>(k) * M;
            for (int j = 0; j < M; ++j) brow[j] += av * grow[j];
          }
        }
      }
    };
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("transpose: expected 2-d, got " + shape_str(a.shape));
  int N = a.dim(0), M = a.dim(1);
  bool rg = want_grad(a);
  Tensor out = Tensor::zeros({M, N}, rg);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < M; ++j)
      (*out.data)[static_cast<std::size_t>(j) * N + i] = (*a.data)[static_cast<std::size_t>(i) * M + j];
  if (rg) {
    out.node = make_node({&a});
    Buf ga = a.grad, og = out.grad;
    out.node->backward = [ga, og, N, M]() {
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < M; ++j)
          (*ga)[static_cast<std::size_t>(i) * M + j] += (*og)[static_cast<std::size_t>(j) * N + i];
    };
  }
  return out;
}

Tensor add_row_broadcast(const Tensor& mat, const Tensor& row) {
  int rows, cols;
  rows_cols(mat, rows, cols, "add_row_broadcast");
  if (row.numel() != static_cast<std::size_t>(cols))
    throw std::invalid_argument("add_row_broadcast: row length mismatch");
  bool rg = want_grad(mat) || want_grad(row);
  Tensor out = Tensor::zeros(mat.shape, rg);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      (*out.data)[static_cast<std::size_t>(r) * cols + c] =
          (*mat.data)[static_cast<std::size_t>(r) * cols + c] + (*row.data)[c];
  if (rg) {
    out.node = make_node({&mat, &row});
    Buf gm = want_grad(mat) ? mat.grad : nullptr;
    Buf gr = want_grad(row) ? row.grad : nullptr;
    Buf og = out.grad;
    out.node->backward = [gm, gr, og, rows, cols]() {
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          double g = (*og)[static_cast<std::size_t>(r) * cols + c];
          if (gm) (*gm)[static_cast<std::size_t>(r) * cols + c] += g;
          if (gr) (*gr)[c] += g;
        }
    };
  }
  return out;
}

Tensor mul_row_broadcast(const Tensor& mat, const Tensor& row) {
  int rows, cols;
  rows_cols(mat, rows, cols, "mul_row_broadcast");
  if (row.numel() != static_cast<std::size_t>(cols))
    throw std::invalid_argument("mul_row_broadcast: row length mismatch");
  bool rg = want_grad(mat) || want_grad(row);
  Tensor out = Tensor::zeros(mat.shape, rg);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      (*out.data)[static_cast<std::size_t>(r) * cols + c] =
          (*mat.data)[static_cast<std::size_t>(r) * cols + c] * (*row.data)[c];
  if (rg) {
    out.node = make_node({&mat, &row});
    Buf gm = want_grad(mat) ? mat.grad : nullptr;
    Buf gr = want_grad(row) ? row.grad : nullptr;
    Buf og = out.grad, md = mat.data, rd = row.data;
    out.node->backward = [gm, gr, og, md, rd, rows, cols]() {
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          std::size_t i = static_cast<std::size_t>(r) * cols + c;
          double g = (*og)[i];
          if (gm) (*gm)[i] += g * (*rd)[c];
          if (gr) (*gr)[c] += g * (*md)[i];
        }
    };
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  int cols = parts[0].ndim() == 1 ? parts[0].dim(0) : parts[0].dim(1);
  int total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    int r, c;
    rows_cols(p, r, c, "concat_rows");
    if (c != cols) throw std::invalid_argument("concat_rows: column mismatch");
    total += r;
    rg = rg || want_grad(p);
  }
  Tensor out = Tensor::zeros({total, cols}, rg);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data->begin(), p.data->end(), out.data->begin() + off);
    off += p.numel();
  }
  if (rg) {
    auto n = std::make_shared<Node>();
    std::vector<Buf> gs;
    std::vector<std::size_t> lens;
    for (const Tensor& p : parts) {
      if (p.node) n->parents.push_back(p.node);
      gs.push_back(want_grad(p) ? p.grad : nullptr);
      lens.push_back(p.numel());
    }
    Buf og = out.grad;
    n->backward = [gs, lens, og]() {
      std::size_t off2 = 0;
      for (std::size_t k = 0; k < gs.size(); ++k) {
        if (gs[k])
          for (std::size_t i = 0; i < lens[k]; ++i) (*gs[k])[i] += (*og)[off2 + i];
        off2 += lens[k];
      }
    };
    out.node = n;
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  int rows = parts[0].ndim() == 1 ? 1 : parts[0].dim(0);
  int total = 0;
  bool rg = false;
  std::vector<int> widths;
  for (const Tensor& p : parts) {
    int r, c;
    rows_cols(p, r, c, "concat_cols");
    if (r != rows) throw std::invalid_argument("concat_cols: row mismatch");
    widths.push_back(c);
    total += c;
    rg = rg || want_grad(p);
  }
  Tensor out = Tensor::zeros({rows, total}, rg);
  int off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    int c = widths[k];
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < c; ++j)
        (*out.data)[static_cast<std::size_t>(r) * total + off + j] =
            (*parts[k].data)[static_cast<std::size_t>(r) * c + j];
    off += c;
  }
  if (rg) {
    auto n = std::make_shared<Node>();
    std::vector<Buf> gs;
    for (const Tensor& p : parts) {
      if (p.node) n->parents.push_back(p.node);
      gs.push_back(want_grad(p) ? p.grad : nullptr);
    }
    Buf og = out.grad;
    n->backward = [gs, widths, og, rows, total]() {
      int off2 = 0;
      for (std::size_t k = 0; k < gs.size(); ++k) {
        int c = widths[k];
        if (gs[k])
          for (int r = 0; r < rows; ++r)
            for (int j = 0; j < c; ++j)
              (*gs[k])[static_cast<std::size_t>(r) * c + j] +=
                  (*og)[static_cast<std::size_t>(r) * total + off2 + j];
        off2 += c;
      }
    };
    out.node = n;
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int start, int len) {
  int rows, cols;
  rows_cols(a, rows, cols, "slice_rows");
  if (start < 0 || len <= 0 || start + len > rows)
    throw std::invalid_argument("slice_rows: range out of bounds");
  bool rg = want_grad(a);
  Tensor out = Tensor::zeros({len, cols}, rg);
  std::copy(a.data->begin() + static_cast<std::size_t>(start) * cols,
            a.data->begin() + static_cast<std::size_t>(start + len) * cols, out.data->begin());
  if (rg) {
    out.node = make_node({&a});
    Buf ga = a.grad, og = out.grad;
    out.node->backward = [ga, og, start, len, cols]() {
      for (std::size_t i = 0; i < static_cast<std::size_t>(len) * cols; ++i)
        (*ga)[static_cast<std::size_t>(start) * cols + i] += (*og)[i];
    };
  }
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  int rows, cols;
  rows_cols(a, rows, cols, "gather_rows");
  for (int i : idx)
    if (i < 0 || i >= rows) throw std::invalid_argument("gather_rows: index out of range");
  bool rg = want_grad(a);
  Tensor out = Tensor::zeros({static_cast<int>(idx.size()), cols}, rg);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy(a.data->begin() + static_cast<std::size_t>(idx[r]) * cols,
              a.data->begin() + static_cast<std::size_t>(idx[r] + 1) * cols,
              out.data->begin() + r * cols);
  if (rg) {
    out.node = make_node({&a});
    Buf ga = a.grad, og = out.grad;
    out.node->backward = [ga, og, idx, cols]() {
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < cols; ++c)
          (*ga)[static_cast<std::size_t>(idx[r]) * cols + c] += (*og)[r * cols + c];
    };
  }
  return out;
}

Tensor masked_softmax(const Tensor& logits, const AttentionMask& mask) {
  int rows, cols;
  rows_cols(logits, rows, cols, "masked_softmax");
  if (!mask.empty() && (mask.rows != rows || mask.cols != cols))
    throw std::invalid_argument("masked_softmax: mask " + std::to_string(mask.rows) + "x" +
                                std::to_string(mask.cols) + " does not match logits " +
                                shape_str(logits.shape));
  bool rg = want_grad(logits);
  Tensor out = Tensor::zeros(logits.shape, rg);
  for (int r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    int alive = 0;
    for (int c = 0; c < cols; ++c) {
      bool vis = mask.empty() || mask.visible(r, c);
      if (!vis) continue;
      ++alive;
      mx = std::max(mx, (*logits.data)[static_cast<std::size_t>(r) * cols + c]);
    }
    if (alive == 0) {
      if (!mask.allow_empty_rows)
        throw std::runtime_error("masked_softmax: fully masked row " + std::to_string(r));
      continue;  // row stays exactly zero
    }
    double sum = 0;
    for (int c = 0; c < cols; ++c) {
      bool vis = mask.empty() || mask.visible(r, c);
      if (!vis) continue;
      double e = std::exp((*logits.data)[static_cast<std::size_t>(r) * cols + c] - mx);
      (*out.data)[static_cast<std::size_t>(r) * cols + c] = e;
      sum += e;
    }
    for (int c = 0; c < cols; ++c) {
      std::size_t i = static_cast<std::size_t>(r) * cols + c;
      bool vis = mask.empty() || mask.visible(r, c);
      (*out.data)[i] = vis ? (*out.data)[i] / sum : 0.0;  // masked entries exactly 0
    }
  }
  if (rg) {
    out.node = make_node({&logits});
    Buf ga = logits.grad, og = out.grad, od = out.data;
    out.node->backward = [ga, og, od, rows, cols]() {
      for (int r = 0; r < rows; ++r) {
        double dot = 0;
        for (int c = 0; c < cols; ++c) {
          std::size_t i = static_cast<std::size_t>(r) * cols + c;
          dot += (*od)[i] * (*og)[i];
        }
        for (int c = 0; c < cols; ++c) {
          std::size_t i = static_cast<std::size_t>(r) * cols + c;
          (*ga)[i] += (*od)[i] * ((*og)[i] - dot);
        }
      }
    };
  }
  return out;
}

Tensor softmax_rows(const Tensor& logits) { return masked_softmax(logits, AttentionMask::none()); }

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                 int heads) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
    throw std::invalid_argument("attention: q/k/v must be 2-d");
  if (q.dim(1) != k.dim(1))
    throw std::invalid_argument("attention: q/k key dim mismatch " + shape_str(q.shape) + " vs " +
                                shape_str(k.shape));
  if (k.dim(0) != v.dim(0)) throw std::invalid_argument("attention: k/v row mismatch");
  int d = q.dim(1), dv = v.dim(1);
  if (heads < 1 || d % heads != 0 || dv % heads != 0)
    throw std::invalid_argument("attention: heads=" + std::to_string(heads) +
                                " must divide dims " + std::to_string(d) + "/" + std::to_string(dv));
  int dh = d / heads, dvh = dv / heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  Tensor qt = transpose(q), kt = transpose(k), vt = transpose(v);
  for (int h = 0; h < heads; ++h) {
    Tensor qh = transpose(slice_rows(qt, h * dh, dh));
    Tensor kh = transpose(slice_rows(kt, h * dh, dh));
    Tensor vh = transpose(slice_rows(vt, h * dvh, dvh));
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Tensor w = masked_softmax(scores, mask);
    outs.push_back(matmul(w, vh));
  }
  return heads == 1 ? outs[0] : concat_cols(outs);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  int rows, cols;
  rows_cols(x, rows, cols, "layer_norm");
  if (gamma.numel() != static_cast<std::size_t>(cols) || beta.numel() != static_cast<std::size_t>(cols))
    throw std::invalid_argument("layer_norm: affine params must have length " + std::to_string(cols));
  bool rg = want_grad(x) || want_grad(gamma) || want_grad(beta);
  Tensor out = Tensor::zeros(x.shape, rg);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv = std::make_shared<std::vector<double>>(rows);
  for (int r = 0; r < rows; ++r) {
    double mu = 0;
    for (int c = 0; c < cols; ++c) mu += (*x.data)[static_cast<std::size_t>(r) * cols + c];
    mu /= cols;
    double var = 0;
    for (int c = 0; c < cols; ++c) {
      double d = (*x.data)[static_cast<std::size_t>(r) * cols + c] - mu;
      var += d * d;
    }
    var /= cols;
    double iv = 1.0 / std::sqrt(var + eps);
    (*inv)[r] = iv;
    for (int c = 0; c < cols; ++c) {
      std::size_t i = static_cast<std::size_t>(r) * cols + c;
      double xh = ((*x.data)[i] - mu) * iv;
      (*xhat)[i] = xh;
      (*out.data)[i] = xh * (*gamma.data)[c] + (*beta.data)[c];
    }
  }
  if (rg) {
    out.node = make_node({&x, &gamma, &beta});
    Buf gx = want_grad(x) ? x.grad : nullptr;
    Buf gg = want_grad(gamma) ? gamma.grad : nullptr;
    Buf gb = want_grad(beta) ? beta.grad : nullptr;
    Buf og = out.grad, gd = gamma.data;
    out.node->backward = [gx, gg, gb, og, gd, xhat, inv, rows, cols]() {
      for (int r = 0; r < rows; ++r) {
        double m1 = 0, m2 = 0;
        for (int c = 0; c < cols; ++c) {
          std::size_t i = static_cast<std::size_t>(r) * cols + c;
          double dg = (*og)[i] * (*gd)[c];
          m1 += dg;
          m2 += dg * (*xhat)[i];
          if (gg) (*gg)[c] += (*og)[i] * (*xhat)[i];
          if (gb) (*gb)[c] += (*og)[i];
        }
        m1 /= cols;
        m2 /= cols;
        if (gx)
          for (int c = 0; c < cols; ++c) {
            std::size_t i = static_cast<std::size_t>(r) * cols + c;
            double dg = (*og)[i] * (*gd)[c];
            (*gx)[i] += (*inv)[r] * (dg - m1 - (*xhat)[i] * m2);
          }
      }
    };
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.ndim() != 3 || w.ndim() != 4)
    throw std::invalid_argument("conv2d: x must be (C,H,W), w (OC,IC,kh,kw)");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  int OC = w.dim(0), IC = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  if (IC != C)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(C) +
                                " != weight channels " + std::to_string(IC));
  if (b.numel() != static_cast<std::size_t>(OC)) throw std::invalid_argument("conv2d: bias size mismatch");
  int OH = (H + 2 * pad - KH) / stride + 1;
  int OW = (W + 2 * pad - KW) / stride + 1;
  if (OH <= 0 || OW <= 0) throw std::invalid_argument("conv2d: empty output");
  bool rg = want_grad(x) || want_grad(w) || want_grad(b);
  Tensor out = Tensor::zeros({OC, OH, OW}, rg);
  const double* px = x.data->data();
  const double* pw = w.data->data();
  double* po = out.data->data();
  for (int oc = 0; oc < OC; ++oc) {
    double bias = (*b.data)[oc];
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        double s = bias;
        for (int ic = 0; ic < C; ++ic)
          for (int ky = 0; ky < KH; ++ky) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < KW; ++kx) {
              int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= W) continue;
              s += px[(static_cast<std::size_t>(ic) * H + iy) * W + ix] *
                   pw[((static_cast<std::size_t>(oc) * C + ic) * KH + ky) * KW + kx];
            }
          }
        po[(static_cast<std::size_t>(oc) * OH + oy) * OW + ox] = s;
      }
  }
  if (rg) {
    out.node = make_node({&x, &w, &b});
    Buf gx = want_grad(x) ? x.grad : nullptr;
    Buf gw = want_grad(w) ? w.grad : nullptr;
    Buf gb = want_grad(b) ? b.grad : nullptr;
    Buf og = out.grad, xd = x.data, wd = w.data;
    out.node->backward = [gx, gw, gb, og, xd, wd, C, H, W, OC, KH, KW, OH, OW, stride, pad]() {
      const double* pg = og->data();
      const double* px2 = xd->data();
      const double* pw2 = wd->data();
      for (int oc = 0; oc < OC; ++oc)
        for (int oy = 0; oy < OH; ++oy)
          for (int ox = 0; ox < OW; ++ox) {
            double g = pg[(static_cast<std::size_t>(oc) * OH + oy) * OW + ox];
            if (g == 0.0) continue;
            if (gb) (*gb)[oc] += g;
            for (int ic = 0; ic < C; ++ic)
              for (int ky = 0; ky < KH; ++ky) {
                int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < KW; ++kx) {
                  int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= W) continue;
                  std::size_t xi = (static_cast<std::size_t>(ic) * H + iy) * W + ix;
                  std::size_t wi = ((static_cast<std::size_t>(oc) * C + ic) * KH + ky) * KW + kx;
                  if (gx) (*gx)[xi] += g * pw2[wi];
                  if (gw) (*gw)[wi] += g * px2[xi];
                }
              }
          }
    };
  }
  return out;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  if (x.ndim() != 3 || w.ndim() != 4)
    throw std::invalid_argument("conv_transpose2d: x must be (C,H,W), w (IC,OC,k,k)");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  int IC = w.dim(0), OC = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  if (IC != C) throw std::invalid_argument("conv_transpose2d: channel mismatch");
  if (b.numel() != static_cast<std::size_t>(OC))
    throw std::invalid_argument("conv_transpose2d: bias size mismatch");
  int OH = (H - 1) * stride + KH;
  int OW = (W - 1) * stride + KW;
  bool rg = want_grad(x) || want_grad(w) || want_grad(b);
  Tensor out = Tensor::zeros({OC, OH, OW}, rg);
  double* po = out.data->data();
  for (int oc = 0; oc < OC; ++oc) {
    double bias = (*b.data)[oc];
    for (std::size_t i = 0; i < static_cast<std::size_t>(OH) * OW; ++i)
      po[static_cast<std::size_t>(oc) * OH * OW + i] = bias;
  }
  const double* px = x.data->data();
  const double* pw = w.data->data();
  for (int ic = 0; ic < C; ++ic)
    for (int iy = 0; iy < H; ++iy)
      for (int ix = 0; ix < W; ++ix) {
        double xv = px[(static_cast<std::size_t>(ic) * H + iy) * W + ix];
        if (xv == 0.0) continue;
        for (int oc = 0; oc < OC; ++oc)
          for (int ky = 0; ky < KH; ++ky)
            for (int kx = 0; kx < KW; ++kx)
              po[(static_cast<std::size_t>(oc) * OH + iy * stride + ky) * OW + ix * stride + kx] +=
                  xv * pw[((static_cast<std::size_t>(ic) * OC + oc) * KH + ky) * KW + kx];
      }
  if (rg) {
    out.node = make_node({&x, &w, &b});
    Buf gx = want_grad(x) ? x.grad : nullptr;
    Buf gw = want_grad(w) ? w.grad : nullptr;
    Buf gb = want_grad(b) ? b.grad : nullptr;
    Buf og = out.grad, xd = x.data, wd = w.data;
    out.node->backward = [gx, gw, gb, og, xd, wd, C, H, W, OC, KH, KW, OH, OW, stride]() {
      const double* pg = og->data();
      if (gb)
        for (int oc = 0; oc < OC; ++oc)
          for (std::size_t i = 0; i < static_cast<std::size_t>(OH) * OW; ++i)
            (*gb)[oc] += pg[static_cast<std::size_t>(oc) * OH * OW + i];
      const double* px2 = xd->data();
      const double* pw2 = wd->data();
      for (int ic = 0; ic < C; ++ic)
        for (int iy = 0; iy < H; ++iy)
          for (int ix = 0; ix < W; ++ix) {
            std::size_t xi = (static_cast<std::size_t>(ic) * H + iy) * W + ix;
            double xv = px2[xi];
            double acc = 0;
            for (int oc = 0; oc < OC; ++oc)
              for (int ky = 0; ky < KH; ++ky)
                for (int kx = 0; kx < KW; ++kx) {
                  std::size_t oi =
                      (static_cast<std::size_t>(oc) * OH + iy * stride + ky) * OW + ix * stride + kx;
                  std::size_t wi = ((static_cast<std::size_t>(ic) * OC + oc) * KH + ky) * KW + kx;
                  double g = pg[oi];
                  acc += g * pw2[wi];
                  if (gw) (*gw)[wi] += g * xv;
                }
            if (gx) (*gx)[xi] += acc;
          }
    };
  }
  return out;
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  if (x.ndim() != 3) throw std::invalid_argument("bilinear_resize: x must be (C,H,W)");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  bool rg = want_grad(x);
  Tensor out = Tensor::zeros({C, out_h, out_w}, rg);
  // precompute sample positions (half-pixel centers)
  struct Tap {
    int i0, i1;
    double w0, w1;
  };
  auto taps = [](int in, int outn) {
    std::vector<Tap> t(outn);
    for (int o = 0; o < outn; ++o) {
      double s = (o + 0.5) * in / static_cast<double>(outn) - 0.5;
      s = std::max(0.0, std::min(static_cast<double>(in - 1), s));
      int i0 = static_cast<int>(std::floor(s));
      int i1 = std::min(in - 1, i0 + 1);
      double f = s - i0;
      t[o] = {i0, i1, 1.0 - f, f};
    }
    return t;
  };
  auto ty = taps(H, out_h), tx = taps(W, out_w);
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < out_h; ++oy)
      for (int ox = 0; ox < out_w; ++ox) {
        const Tap &a = ty[oy], &bt = tx[ox];
        double v = a.w0 * (bt.w0 * (*x.data)[(static_cast<std::size_t>(c) * H + a.i0) * W + bt.i0] +
                           bt.w1 * (*x.data)[(static_cast<std::size_t>(c) * H + a.i0) * W + bt.i1]) +
                   a.w1 * (bt.w0 * (*x.data)[(static_cast<std::size_t>(c) * H + a.i1) * W + bt.i0] +
                           bt.w1 * (*x.data)[(static_cast<std::size_t>(c) * H + a.i1) * W + bt.i1]);
        (*out.data)[(static_cast<std::size_t>(c) * out_h + oy) * out_w + ox] = v;
      }
  if (rg) {
    out.node = make_node({&x});
    Buf gx = x.grad, og = out.grad;
    out.node->backward = [gx, og, ty, tx, C, H, W, out_h, out_w]() {
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < out_h; ++oy)
          for (int ox = 0; ox < out_w; ++ox) {
            double g = (*og)[(static_cast<std::size_t>(c) * out_h + oy) * out_w + ox];
            const Tap &a = ty[oy], &bt = tx[ox];
            (*gx)[(static_cast<std::size_t>(c) * H + a.i0) * W + bt.i0] += g * a.w0 * bt.w0;
            (*gx)[(static_cast<std::size_t>(c) * H + a.i0) * W + bt.i1] += g * a.w0 * bt.w1;
            (*gx)[(static_cast<std::size_t>(c) * H + a.i1) * W + bt.i0] += g * a.w1 * bt.w0;
            (*gx)[(static_cast<std::size_t>(c) * H + a.i1) * W + bt.i1] += g * a.w1 * bt.w1;
          }
    };
  }
  return out;
}

Tensor bilinear_sample(const Tensor& x, const std::vector<double>& ys,
                       const std::vector<double>& xs) {
  if (x.ndim() != 3) throw std::invalid_argument("bilinear_sample: x must be (C,H,W)");
  if (ys.size() != xs.size()) throw std::invalid_argument("bilinear_sample: point count mismatch");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  int n = static_cast<int>(ys.size());
  struct Tap {
    int i0, i1;
    double w0, w1;
  };
  auto tap_of = [](double s, int in) {
    s = std::max(0.0, std::min(static_cast<double>(in - 1), s));
    int i0 = static_cast<int>(std::floor(s));
    int i1 = std::min(in - 1, i0 + 1);
    double f = s - i0;
    return Tap{i0, i1, 1.0 - f, f};
  };
  std::vector<Tap> ty(static_cast<std::size_t>(n)), tx(static_cast<std::size_t>(n));
  for (int p = 0; p < n; ++p) {
    ty[static_cast<std::size_t>(p)] = tap_of(ys[static_cast<std::size_t>(p)], H);
    tx[static_cast<std::size_t>(p)] = tap_of(xs[static_cast<std::size_t>(p)], W);
  }
  bool rg = want_grad(x);
  Tensor out = Tensor::zeros({n, C}, rg);  // one feature row per point
  for (int p = 0; p < n; ++p) {
    const Tap &a = ty[static_cast<std::size_t>(p)], &b = tx[static_cast<std::size_t>(p)];
    for (int c = 0; c < C; ++c) {
      const double* base = x.data->data() + static_cast<std::size_t>(c) * H * W;
      double v = a.w0 * (b.w0 * base[a.i0 * W + b.i0] + b.w1 * base[a.i0 * W + b.i1]) +
                 a.w1 * (b.w0 * base[a.i1 * W + b.i0] + b.w1 * base[a.i1 * W + b.i1]);
      (*out.data)[static_cast<std::size_t>(p) * C + c] = v;
    }
  }
  if (rg) {
    out.node = make_node({&x});
    Buf gx = x.grad, og = out.grad;
    out.node->backward = [gx, og, ty, tx, C, H, W, n]() {
      for (int p = 0; p < n; ++p) {
        const Tap &a = ty[static_cast<std::size_t>(p)], &b = tx[static_cast<std::size_t>(p)];
        for (int c = 0; c < C; ++c) {
          double g = (*og)[static_cast<std::size_t>(p) * C + c];
          double* base = gx->data() + static_cast<std::size_t>(c) * H * W;
          base[a.i0 * W + b.i0] += g * a.w0 * b.w0;
          base[a.i0 * W + b.i1] += g * a.w0 * b.w1;
          base[a.i1 * W + b.i0] += g * a.w1 * b.w0;
          base[a.i1 * W + b.i1] += g * a.w1 * b.w1;
        }
      }
    };
  }
  return out;
}

}  // namespace partseg
