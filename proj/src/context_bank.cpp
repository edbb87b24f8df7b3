#include "partseg/context_bank.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "partseg/backbone.hpp"
#include "partseg/ops.hpp"

namespace partseg::context {

using backbone::feature_rows;

ReidNet ReidNet::init(int d_reid, Rng& rng) {
  ReidNet n;
  n.d_reid = d_reid;
  n.c1 = nn::Conv2d::init(3, 8, 3, 2, 1, rng);
  n.c2 = nn::Conv2d::init(8, 16, 3, 2, 1, rng);
  n.c3 = nn::Conv2d::init(16, 32, 3, 2, 1, rng);
  n.head = nn::Linear::init(32, d_reid, rng);
  return n;
}

void ReidNet::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  c1.collect(reg, prefix + ".c1");
  c2.collect(reg, prefix + ".c2");
  c3.collect(reg, prefix + ".c3");
  head.collect(reg, prefix + ".head");
}

Tensor ReidNet::embed(const Tensor& img) const {
  Tensor x = relu(c1.forward(img));
  x = relu(c2.forward(x));
  x = relu(c3.forward(x));
  Tensor pooled = mean_axis0(feature_rows(x)).view({1, x.dim(0)});  // global average
  Tensor f = head.forward(pooled);
  Tensor norm_sq = sum_all(mul(f, f));
  if (norm_sq.value() <= 0.0) throw std::runtime_error("zero-norm embedding");
  Tensor inv = div(Tensor::scalar(1.0), sqrt_t(norm_sq));
  return scale_by(f, inv);
}

std::vector<RetrievalHit> retrieve(const Tensor& query_f, const std::vector<GalleryEntry>& gallery,
                                   int k) {
  if (gallery.empty()) throw std::invalid_argument("retrieval gallery is empty");
  if (k < 1) throw std::invalid_argument("retrieval k must be >= 1");
  std::size_t d = query_f.numel();
  std::vector<RetrievalHit> hits;
  hits.reserve(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    const GalleryEntry& e = gallery[i];
    if (e.feature.numel() != d) throw std::invalid_argument("gallery feature width mismatch");
    double dot = 0;
    for (std::size_t j = 0; j < d; ++j) dot += query_f.at(j) * e.feature.at(j);
    hits.push_back({static_cast<int>(i), e.id, dot});
  }
  std::sort(hits.begin(), hits.end(), [](const RetrievalHit& a, const RetrievalHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  if (static_cast<int>(hits.size()) > k) hits.resize(static_cast<std::size_t>(k));
  return hits;
}

RefEncoder RefEncoder::init(int d_model, Rng& rng) {
  RefEncoder e;
  e.m1 = nn::Conv2d::init(1, 4, 3, 2, 1, rng);
  e.m2 = nn::Conv2d::init(4, 8, 3, 2, 1, rng);
  e.m3 = nn::Conv2d::init(8, d_model, 3, 2, 1, rng);
  return e;
}

void RefEncoder::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  m1.collect(reg, prefix + ".m1");
  m2.collect(reg, prefix + ".m2");
  m3.collect(reg, prefix + ".m3");
}

EncodedReference RefEncoder::encode(const Tensor& f_map, const std::vector<std::uint8_t>& mask,
                                    int mask_w, int mask_h) const {
  if (static_cast<std::size_t>(mask_w) * mask_h != mask.size())
    throw std::invalid_argument("reference mask size does not match its dims");
  if (mask_h != f_map.dim(1) * 8 || mask_w != f_map.dim(2) * 8)
    throw std::invalid_argument("reference mask must be 8x the feature resolution");
  EncodedReference out;
  out.tokens.reserve(static_cast<std::size_t>(kNumClasses));
  out.flags.assign(static_cast<std::size_t>(kNumClasses), false);
  Tensor f_rows = feature_rows(f_map);
  for (int c = 0; c < kNumClasses; ++c) {
    Tensor bin = Tensor::zeros({1, mask_h, mask_w});
    bool any = false;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i] == static_cast<std::uint8_t>(c + 1)) {
        (*bin.data)[i] = 1.0;
        any = true;
      }
    out.flags[static_cast<std::size_t>(c)] = any;
    Tensor m = relu(m1.forward(bin));
    m = relu(m2.forward(m));
    m = m3.forward(m);  // (d_model, h, w)
    out.tokens.push_back(add(f_rows, feature_rows(m)));
  }
  return out;
}

PrototypePooler PrototypePooler::init(int d_model, int heads, Rng& rng) {
  PrototypePooler p;
  p.phi_in = nn::Linear::init(d_model, d_model, rng);
  p.phi_out = nn::Linear::init(d_model, d_model, rng);
  p.class_attn = nn::MultiHeadAttention::init(d_model, heads, rng);
  p.example_attn = nn::MultiHeadAttention::init(d_model, heads, rng);
  p.joint_attn = nn::MultiHeadAttention::init(d_model, heads, rng);
  return p;
}

PrototypePooler PrototypePooler::zeros(int d_model, int heads) {
  PrototypePooler p;
  p.phi_in = nn::Linear::zeros(d_model, d_model);
  p.phi_out = nn::Linear::zeros(d_model, d_model);
  // identity-ish projections so the zero variant still passes features through
  for (int i = 0; i < d_model; ++i) {
    (*p.phi_in.w.data)[static_cast<std::size_t>(i) * d_model + i] = 1.0;
    (*p.phi_out.w.data)[static_cast<std::size_t>(i) * d_model + i] = 1.0;
  }
  p.class_attn = nn::MultiHeadAttention::zeros(d_model, heads);
  p.example_attn = nn::MultiHeadAttention::zeros(d_model, heads);
  p.joint_attn = nn::MultiHeadAttention::zeros(d_model, heads);
  return p;
}

void PrototypePooler::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  phi_in.collect(reg, prefix + ".phi_in");
  phi_out.collect(reg, prefix + ".phi_out");
  class_attn.collect(reg, prefix + ".class_attn");
  example_attn.collect(reg, prefix + ".example_attn");
  joint_attn.collect(reg, prefix + ".joint_attn");
}

VisualPrototypes PrototypePooler::visual_prototypes(const std::vector<EncodedReference>& refs) const {
  if (refs.empty()) throw std::invalid_argument("visual prototypes need >= 1 reference");
  int k = static_cast<int>(refs.size());
  int d = refs[0].tokens[0].dim(1);

  std::vector<bool> valid(static_cast<std::size_t>(kNumClasses), false);
  bool any_valid = false;
  for (const EncodedReference& r : refs)
    for (int c = 0; c < kNumClasses; ++c)
      if (r.flags[static_cast<std::size_t>(c)]) valid[static_cast<std::size_t>(c)] = any_valid = true;
  if (!any_valid) throw std::runtime_error("no reference supports any class");

  // token-mean per (example, class), then phi_in: rows ordered m-major
  std::vector<Tensor> pooled;
  pooled.reserve(static_cast<std::size_t>(k) * kNumClasses);
  for (const EncodedReference& r : refs)
    for (int c = 0; c < kNumClasses; ++c)
      pooled.push_back(mean_axis0(r.tokens[static_cast<std::size_t>(c)]).view({1, d}));
  Tensor e = phi_in.forward(concat_rows(pooled));  // (k*13, d)

  auto supported = [&](int m, int c) { return refs[static_cast<std::size_t>(m)].flags[static_cast<std::size_t>(c)]; };

  // class attention: within each example, keys masked to supported classes
  {
    std::vector<Tensor> outs;
    for (int m = 0; m < k; ++m) {
      Tensor em = slice_rows(e, m * kNumClasses, kNumClasses);
      AttentionMask mask;
      mask.rows = mask.cols = kNumClasses;
      mask.allowed.assign(static_cast<std::size_t>(kNumClasses) * kNumClasses, 0);
      mask.allow_empty_rows = true;  // an example may support no class at all
      for (int qc = 0; qc < kNumClasses; ++qc)
        for (int kc = 0; kc < kNumClasses; ++kc)
          if (supported(m, kc)) mask.set(qc, kc, true);
      outs.push_back(add(em, class_attn.forward(em, em, em, mask)));
    }
    e = concat_rows(outs);
  }

  // example attention: per class, across the k examples
  {
    std::vector<Tensor> per_class(static_cast<std::size_t>(kNumClasses));
    for (int c = 0; c < kNumClasses; ++c) {
      std::vector<int> idx;
      for (int m = 0; m < k; ++m) idx.push_back(m * kNumClasses + c);
      Tensor ec = gather_rows(e, idx);  // (k, d)
      AttentionMask mask;
      mask.rows = mask.cols = k;
      mask.allowed.assign(static_cast<std::size_t>(k) * k, 0);
      mask.allow_empty_rows = true;
      for (int qm = 0; qm < k; ++qm)
        for (int km = 0; km < k; ++km)
          if (supported(km, c)) mask.set(qm, km, true);
      per_class[static_cast<std::size_t>(c)] = add(ec, example_attn.forward(ec, ec, ec, mask));
    }
    // stitch back to m-major order
    std::vector<Tensor> rows;
    for (int m = 0; m < k; ++m)
      for (int c = 0; c < kNumClasses; ++c)
        rows.push_back(slice_rows(per_class[static_cast<std::size_t>(c)], m, 1));
    e = concat_rows(rows);
  }

  // joint class-example attention over all (m,c) tokens
  {
    int n = k * kNumClasses;
    AttentionMask mask;
    mask.rows = mask.cols = n;
    mask.allowed.assign(static_cast<std::size_t>(n) * n, 0);
    for (int q = 0; q < n; ++q)
      for (int m = 0; m < k; ++m)
        for (int c = 0; c < kNumClasses; ++c)
          if (supported(m, c)) mask.set(q, m * kNumClasses + c, true);
    e = add(e, joint_attn.forward(e, e, e, mask));
  }

  Tensor e_hat = phi_out.forward(e);

  // flag-weighted pooling with the epsilon'd denominator; unsupported rows
  // come out exactly zero
  const double eps = 1e-6;
  std::vector<Tensor> proto_rows;
  proto_rows.reserve(static_cast<std::size_t>(kNumClasses));
  for (int c = 0; c < kNumClasses; ++c) {
    Tensor acc = Tensor::zeros({1, d});
    double count = 0;
    for (int m = 0; m < k; ++m)
      if (supported(m, c)) {
        acc = add(acc, slice_rows(e_hat, m * kNumClasses + c, 1));
        count += 1.0;
      }
    proto_rows.push_back(scale(acc, 1.0 / (count + eps)));
  }
  VisualPrototypes out;
  out.p = concat_rows(proto_rows);
  out.valid = valid;
  return out;
}

}  // namespace partseg::context
