#include "partseg/graph_encoder.hpp"

#include <cmath>
#include <stdexcept>

#include "partseg/ops.hpp"
#include "partseg/serialize.hpp"

namespace partseg::graph {

Tensor label_embeddings(std::uint64_t seed, int d_text) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(kNumClasses) * d_text);
  for (double& x : v) x = rng.normal();
  for (int r = 0; r < kNumClasses; ++r) {
    double nrm = 0;
    for (int c = 0; c < d_text; ++c) nrm += v[r * d_text + c] * v[r * d_text + c];
    nrm = std::sqrt(nrm);
    for (int c = 0; c < d_text; ++c) v[r * d_text + c] /= nrm;
  }
  return Tensor::from({kNumClasses, d_text}, std::move(v));
}

Tensor label_embeddings_from_file(const std::filesystem::path& dir, int d_text) {
  Tensor t = Tensor::zeros({kNumClasses, d_text});
  nn::ParamRegistry reg;
  reg.add("label_embeddings", &t);
  load_checkpoint(dir, reg);  // throws on row-count (shape) mismatch
  for (int r = 0; r < kNumClasses; ++r) {
    double nrm = 0;
    for (int c = 0; c < d_text; ++c) nrm += t.at(r * d_text + c) * t.at(r * d_text + c);
    nrm = std::sqrt(nrm);
    if (nrm == 0.0) throw std::runtime_error("label embedding row " + std::to_string(r) + " is zero");
    for (int c = 0; c < d_text; ++c) (*t.data)[r * d_text + c] /= nrm;
  }
  return t;
}

void GatConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("gat layers must be >= 1");
  if (static_cast<int>(heads.size()) != layers)
    throw std::invalid_argument("gat heads list must have one entry per layer");
  for (int h : heads)
    if (h < 1) throw std::invalid_argument("gat head counts must be >= 1");
  if (heads.back() != 1) throw std::invalid_argument("output gat layer must be single-head");
  if (d_hidden % heads[0] != 0)
    throw std::invalid_argument("hidden width must divide evenly across heads");
}

GraphView GraphView::from_ontology(const PartOntology& g) {
  GraphView v;
  v.nbrs.resize(kNumClasses);
  v.weights.assign(static_cast<std::size_t>(kNumClasses) * kNumClasses, 0.0);
  for (ClassId i = 0; i < kNumClasses; ++i) {
    for (ClassId j : g.neighbors(i)) {
      v.nbrs[static_cast<std::size_t>(i)].insert(j);
      v.weights[static_cast<std::size_t>(i) * kNumClasses + j] = g.weight(i, j);
    }
  }
  return v;
}

namespace {
constexpr double kWeightEps = 1e-3;

Tensor head_forward(const Tensor& h, const GraphView& g, const GatHead& head, double slope,
                    Tensor* alpha_out) {
  int n = g.n();
  Tensor hl = head.w_l.forward(h);  // (n, d)
  Tensor hr = head.w_r.forward(h);
  int d = hl.dim(1);

  AttentionMask mask;
  mask.rows = mask.cols = n;
  mask.allowed.assign(static_cast<std::size_t>(n) * n, 0);
  Tensor bias = Tensor::zeros({n, n});
  for (int i = 0; i < n; ++i) {
    mask.set(i, i, true);  // self loop, bias 0
    for (int j : g.nbrs[static_cast<std::size_t>(i)]) {
      mask.set(i, j, true);
      (*bias.data)[static_cast<std::size_t>(i) * n + j] = std::log(g.weight(i, j) + kWeightEps);
    }
  }

  std::vector<Tensor> logit_rows;
  logit_rows.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor hi = slice_rows(hl, i, 1).view({d});
    Tensor s = leaky_relu(add_row_broadcast(hr, hi), slope);  // (n, d)
    logit_rows.push_back(transpose(matmul(s, head.a)));        // (1, n)
  }
  Tensor alpha = masked_softmax(add(concat_rows(logit_rows), bias), mask);
  if (alpha_out) *alpha_out = alpha;
  return matmul(alpha, hr);
}
}  // namespace

Tensor gatv2_layer(const Tensor& h, const GraphView& g, const GatLayer& layer, double slope) {
  if (h.dim(0) != g.n()) throw std::invalid_argument("node feature rows must match graph size");
  std::vector<Tensor> outs;
  outs.reserve(layer.heads.size());
  for (const GatHead& head : layer.heads) outs.push_back(head_forward(h, g, head, slope, nullptr));
  return outs.size() == 1 ? outs[0] : concat_cols(outs);
}

GraphEncoder GraphEncoder::init(const GatConfig& cfg, int d_text, Rng& rng) {
  cfg.validate();
  GraphEncoder enc;
  enc.cfg = cfg;
  int d_in = d_text;
  for (int l = 0; l < cfg.layers; ++l) {
    bool last = l == cfg.layers - 1;
    int n_heads = cfg.heads[static_cast<std::size_t>(l)];
    int d_head = last ? cfg.d_proto : cfg.d_hidden / n_heads;
    GatLayer layer;
    layer.d_out_per_head = d_head;
    for (int k = 0; k < n_heads; ++k) {
      GatHead head;
      head.w_l = nn::Linear::init(d_in, d_head, rng, /*bias=*/false);
      head.w_r = nn::Linear::init(d_in, d_head, rng, /*bias=*/false);
      head.a = nn::glorot({d_head, 1}, d_head, 1, rng);
      layer.heads.push_back(std::move(head));
    }
    enc.layers.push_back(std::move(layer));
    d_in = last ? cfg.d_proto : cfg.d_hidden;
  }
  enc.skip = nn::Linear::init(d_text, cfg.d_proto, rng, /*bias=*/false);
  return enc;
}

void GraphEncoder::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (std::size_t k = 0; k < layers[l].heads.size(); ++k) {
      std::string p = prefix + ".l" + std::to_string(l) + ".h" + std::to_string(k);
      GatHead& head = layers[l].heads[k];
      head.w_l.collect(reg, p + ".wl");
      head.w_r.collect(reg, p + ".wr");
      reg.add(p + ".a", &head.a);
    }
  skip.collect(reg, prefix + ".skip");
}

Tensor GraphEncoder::forward(const Tensor& t, const GraphView& g) const {
  Tensor h = t;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h = gatv2_layer(h, g, layers[l], cfg.leaky_slope);
    if (l + 1 < layers.size()) h = elu(h);  // identity on the output layer
  }
  return add(h, skip.forward(t));
}

Tensor encode_prototypes(const Tensor& t, const PartOntology& ontology, const GraphEncoder& enc) {
  Tensor p = enc.forward(t, GraphView::from_ontology(ontology));
  if (p.dim(0) != kNumClasses || p.dim(1) != enc.cfg.d_proto)
    throw std::runtime_error("prototype shape mismatch: " + shape_str(p.shape));
  return p;
}

}  // namespace partseg::graph
