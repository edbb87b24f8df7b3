#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "partseg/gradcheck.hpp"
#include "partseg/graph_encoder.hpp"
#include "partseg/ops.hpp"

using namespace partseg;
using namespace partseg::graph;

namespace {

GraphView path3(double w01, double w12) {
  GraphView g;
  g.nbrs = {{1}, {0, 2}, {1}};
  g.weights.assign(9, 0.0);
  g.weights[0 * 3 + 1] = g.weights[1 * 3 + 0] = w01;
  g.weights[1 * 3 + 2] = g.weights[2 * 3 + 1] = w12;
  return g;
}

double leaky(double x, double s) { return x >= 0 ? x : s * x; }

}  // namespace

TEST_CASE("label embedding surrogate is deterministic with distinct rows") {
  Tensor a = label_embeddings(42), b = label_embeddings(42);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
  int d = a.dim(1);
  double min_dist = 1e18;
  for (int r = 0; r < kNumClasses; ++r) {
    double nrm = 0;
    for (int c = 0; c < d; ++c) nrm += a.at(r * d + c) * a.at(r * d + c);
    CHECK(std::abs(std::sqrt(nrm) - 1.0) < 1e-12);
    for (int q = r + 1; q < kNumClasses; ++q) {
      double dist = 0;
      for (int c = 0; c < d; ++c) {
        double diff = a.at(r * d + c) - a.at(q * d + c);
        dist += diff * diff;
      }
      min_dist = std::min(min_dist, std::sqrt(dist));
    }
  }
  CHECK(min_dist > 0.0);
}

TEST_CASE("config validation rejects bad layer/head layouts") {
  GatConfig bad;
  bad.layers = 3;  // heads list still has 4 entries
  CHECK_THROWS(bad.validate());
  GatConfig multi_out;
  multi_out.heads = {4, 4, 1, 2};
  CHECK_THROWS(multi_out.validate());
  GatConfig ok;
  ok.layers = 5;
  ok.heads = {4, 4, 1, 1, 1};
  CHECK_NOTHROW(ok.validate());
}

TEST_CASE("single node with self-loop only gives alpha 1 and h' = W_r h") {
  GraphView g;
  g.nbrs = {{}};
  g.weights = {0.0};
  Rng rng(3);
  GatLayer layer;
  layer.heads.resize(1);
  layer.heads[0].w_l = nn::Linear::init(4, 2, rng, false);
  layer.heads[0].w_r = nn::Linear::init(4, 2, rng, false);
  layer.heads[0].a = nn::glorot({2, 1}, 2, 1, rng);
  Tensor h = Tensor::from({1, 4}, {0.3, -0.7, 1.1, 0.2});
  Tensor out = gatv2_layer(h, g, layer, 0.2);
  Tensor expect = layer.heads[0].w_r.forward(h);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.at(i) == doctest::Approx(expect.at(i)).epsilon(1e-12));
}

TEST_CASE("two identical connected nodes with unit edge weight attend 50/50") {
  GraphView g;
  g.nbrs = {{1}, {0}};
  // weight chosen so the cross-edge logit bias log(w + 1e-3) is exactly 0,
  // matching the self-loop bias
  g.weights = {0, 1.0 - 1e-3, 1.0 - 1e-3, 0};
  Rng rng(5);
  GatLayer layer;
  layer.heads.resize(1);
  layer.heads[0].w_l = nn::Linear::init(3, 2, rng, false);
  layer.heads[0].w_r = nn::Linear::init(3, 2, rng, false);
  layer.heads[0].a = nn::glorot({2, 1}, 2, 1, rng);
  Tensor h = Tensor::from({2, 3}, {0.5, -0.2, 0.9, 0.5, -0.2, 0.9});
  Tensor out = gatv2_layer(h, g, layer, 0.2);
  // with identical inputs the 50/50 average equals either message
  Tensor expect = layer.heads[0].w_r.forward(slice_rows(h, 0, 1));
  CHECK(out.at(0) == doctest::Approx(expect.at(0)).epsilon(1e-12));
  CHECK(out.at(1) == doctest::Approx(expect.at(1)).epsilon(1e-12));
  CHECK(out.at(2) == doctest::Approx(expect.at(0)).epsilon(1e-12));
}

TEST_CASE("3-node path graph matches a scalar brute-force of the attention rule") {
  const double slope = 0.2;
  GraphView g = path3(0.6, 0.25);
  Rng rng(11);
  const int din = 3, dout = 2;
  GatLayer layer;
  layer.heads.resize(1);
  layer.heads[0].w_l = nn::Linear::init(din, dout, rng, false);
  layer.heads[0].w_r = nn::Linear::init(din, dout, rng, false);
  layer.heads[0].a = nn::glorot({dout, 1}, dout, 1, rng);
  Tensor h = Tensor::from({3, din}, {0.1, -0.4, 0.8, 1.2, 0.05, -0.9, -0.3, 0.6, 0.2});
  Tensor out = gatv2_layer(h, g, layer, slope);

  // independent scalar evaluation
  const auto& wl = *layer.heads[0].w_l.w.data;
  const auto& wr = *layer.heads[0].w_r.w.data;
  const auto& av = *layer.heads[0].a.data;
  auto proj = [&](const std::vector<double>& w, int node, int c) {
    double s = 0;
    for (int k = 0; k < din; ++k) s += h.at(node * din + k) * w[k * dout + c];
    return s;
  };
  auto logit = [&](int i, int j) {
    double s = 0;
    for (int c = 0; c < dout; ++c) s += av[c] * leaky(proj(wl, i, c) + proj(wr, j, c), slope);
    if (i != j) s += std::log(g.weight(i, j) + 1e-3);
    return s;
  };
  for (int i = 0; i < 3; ++i) {
    std::vector<int> nhood(g.nbrs[i].begin(), g.nbrs[i].end());
    nhood.push_back(i);
    double z = 0;
    for (int j : nhood) z += std::exp(logit(i, j));
    for (int c = 0; c < dout; ++c) {
      double expect = 0;
      for (int j : nhood) expect += std::exp(logit(i, j)) / z * proj(wr, j, c);
      CHECK(out.at(i * dout + c) == doctest::Approx(expect).epsilon(1e-10));
    }
  }
}

TEST_CASE("zero attention vector with uniform unit weights gives uniform alpha") {
  PartOntology g = build_adjacency();
  for (auto [a, b] : g.edges) g.set_weight(a, b, 1.0 - 1e-3);  // bias 0 everywhere
  GraphView view = GraphView::from_ontology(g);
  Rng rng(7);
  GatLayer layer;
  layer.heads.resize(1);
  layer.heads[0].w_l = nn::Linear::init(8, 4, rng, false);
  layer.heads[0].w_r = nn::Linear::init(8, 4, rng, false);
  layer.heads[0].a = Tensor::zeros({4, 1});
  Tensor h = Tensor::zeros({kNumClasses, 8});
  Rng fill(9);
  for (auto& v : *h.data) v = fill.normal();
  Tensor out = gatv2_layer(h, view, layer, 0.2);
  // uniform alpha over the neighborhood = plain average of W_r-projected nbrs
  Tensor hr = layer.heads[0].w_r.forward(h);
  for (ClassId i = 0; i < kNumClasses; ++i) {
    std::vector<int> nhood;
    for (int j : view.nbrs[static_cast<std::size_t>(i)]) nhood.push_back(j);
    nhood.push_back(i);
    for (int c = 0; c < 4; ++c) {
      double expect = 0;
      for (int j : nhood) expect += hr.at(static_cast<std::size_t>(j) * 4 + c);
      expect /= static_cast<double>(nhood.size());
      CHECK(out.at(static_cast<std::size_t>(i) * 4 + c) == doctest::Approx(expect).epsilon(1e-10));
    }
  }
}

TEST_CASE("node relabeling permutes encoder output rows identically") {
  // random 6-node graph, run under two labelings related by a permutation
  Rng rng(21);
  int n = 6, d = 5;
  GraphView g;
  g.nbrs.resize(static_cast<std::size_t>(n));
  g.weights.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (rng.uniform() < 0.5) {
        double w = rng.uniform();
        g.nbrs[static_cast<std::size_t>(i)].insert(j);
        g.nbrs[static_cast<std::size_t>(j)].insert(i);
        g.weights[static_cast<std::size_t>(i) * n + j] = w;
        g.weights[static_cast<std::size_t>(j) * n + i] = w;
      }
  std::vector<int> perm = {3, 5, 0, 1, 4, 2};  // perm[old] = new
  GraphView gp;
  gp.nbrs.resize(static_cast<std::size_t>(n));
  gp.weights.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j : g.nbrs[static_cast<std::size_t>(i)]) {
      gp.nbrs[static_cast<std::size_t>(perm[i])].insert(perm[j]);
      gp.weights[static_cast<std::size_t>(perm[i]) * n + perm[j]] = g.weight(i, j);
    }

  Rng prng(33);
  GatLayer layer;
  layer.heads.resize(2);
  for (auto& head : layer.heads) {
    head.w_l = nn::Linear::init(d, 3, prng, false);
    head.w_r = nn::Linear::init(d, 3, prng, false);
    head.a = nn::glorot({3, 1}, 3, 1, prng);
  }
  Tensor h = Tensor::zeros({n, d});
  Rng fill(55);
  for (auto& v : *h.data) v = fill.normal();
  Tensor hp = Tensor::zeros({n, d});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c)
      (*hp.data)[static_cast<std::size_t>(perm[i]) * d + c] = h.at(static_cast<std::size_t>(i) * d + c);

  Tensor out = gatv2_layer(h, g, layer, 0.2);
  Tensor outp = gatv2_layer(hp, gp, layer, 0.2);
  int dout = out.dim(1);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < dout; ++c)
      CHECK(out.at(static_cast<std::size_t>(i) * dout + c) ==
            doctest::Approx(outp.at(static_cast<std::size_t>(perm[i]) * dout + c)).epsilon(1e-10));
}

TEST_CASE("alpha rows sum to one over the neighborhood and vanish outside it") {
  // re-derive alpha through the masked softmax by probing with a linear layer
  // whose message identifies each source node
  PartOntology onto = build_adjacency();
  std::vector<std::set<ClassId>> corpus;
  Rng crng(2);
  for (int s = 0; s < 40; ++s) {
    std::set<ClassId> present = {kForeground};
    for (ClassId c = 1; c < kNumClasses; ++c)
      if (crng.uniform() < 0.5) present.insert(c);
    corpus.push_back(present);
  }
  onto = compute_cooccurrence(onto, corpus);
  GraphView g = GraphView::from_ontology(onto);

  Rng rng(17);
  GatLayer layer;
  layer.heads.resize(1);
  layer.heads[0].w_l = nn::Linear::init(kNumClasses, kNumClasses, rng, false);
  // one-hot inputs + identity W_r: output row i = sum_j alpha_ij e_j = alpha row i
  layer.heads[0].w_r = nn::Linear::zeros(kNumClasses, kNumClasses, false);
  for (int k = 0; k < kNumClasses; ++k)
    (*layer.heads[0].w_r.w.data)[static_cast<std::size_t>(k) * kNumClasses + k] = 1.0;
  layer.heads[0].a = nn::glorot({kNumClasses, 1}, kNumClasses, 1, rng);

  Tensor h = Tensor::zeros({kNumClasses, kNumClasses});
  for (int i = 0; i < kNumClasses; ++i) (*h.data)[static_cast<std::size_t>(i) * kNumClasses + i] = 1.0;
  Tensor alpha = gatv2_layer(h, g, layer, 0.2);
  for (int i = 0; i < kNumClasses; ++i) {
    double row = 0;
    for (int j = 0; j < kNumClasses; ++j) {
      double a = alpha.at(static_cast<std::size_t>(i) * kNumClasses + j);
      row += a;
      bool in_nbhd = j == i || g.nbrs[static_cast<std::size_t>(i)].count(j) > 0;
      if (!in_nbhd) CHECK(a == 0.0);
      else CHECK(a > 0.0);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("one layer passes no message between unconnected left and right parts") {
  PartOntology onto = build_adjacency();
  GraphView g = GraphView::from_ontology(onto);
  REQUIRE_FALSE(g.nbrs[kLeftFrontWindow].count(kRightBackDoor));
  Rng rng(29);
  GatLayer layer;
  layer.heads.resize(1);
  layer.heads[0].w_l = nn::Linear::init(6, 4, rng, false);
  layer.heads[0].w_r = nn::Linear::init(6, 4, rng, false);
  layer.heads[0].a = nn::glorot({4, 1}, 4, 1, rng);
  Tensor h = Tensor::zeros({kNumClasses, 6});
  Rng fill(31);
  for (auto& v : *h.data) v = fill.normal();
  Tensor h2 = h.clone_data();
  for (int c = 0; c < 6; ++c) (*h2.data)[static_cast<std::size_t>(kRightBackDoor) * 6 + c] = 0.0;
  Tensor a = gatv2_layer(h, g, layer, 0.2);
  Tensor b = gatv2_layer(h2, g, layer, 0.2);
  for (int c = 0; c < 4; ++c)
    CHECK(a.at(static_cast<std::size_t>(kLeftFrontWindow) * 4 + c) ==
          b.at(static_cast<std::size_t>(kLeftFrontWindow) * 4 + c));
}

TEST_CASE("encoder output shape and depth variants") {
  PartOntology onto = build_adjacency();
  Tensor t = label_embeddings(1);
  for (int depth : {3, 4, 5}) {
    GatConfig cfg;
    cfg.layers = depth;
    cfg.heads.assign(static_cast<std::size_t>(depth), 1);
    cfg.heads[0] = cfg.heads[1] = 4;
    Rng rng(100 + depth);
    GraphEncoder enc = GraphEncoder::init(cfg, t.dim(1), rng);
    Tensor p = encode_prototypes(t, onto, enc);
    CHECK(p.dim(0) == kNumClasses);
    CHECK(p.dim(1) == cfg.d_proto);
    for (std::size_t i = 0; i < p.numel(); ++i) CHECK(std::isfinite(p.at(i)));
  }
}

TEST_CASE("gradients through the attention layer pass a finite-difference check") {
  GraphView g = path3(0.4, 0.9);
  Rng rng(41);
  GatLayer layer;
  layer.heads.resize(1);
  layer.heads[0].w_l = nn::Linear::init(3, 2, rng, false);
  layer.heads[0].w_r = nn::Linear::init(3, 2, rng, false);
  layer.heads[0].a = nn::glorot({2, 1}, 2, 1, rng);
  Tensor h = Tensor::from({3, 3}, {0.2, -0.5, 0.7, 1.0, 0.3, -0.8, -0.1, 0.9, 0.4});

  auto loss_of = [&](Tensor* param) {
    return grad_check(
        [&]() {
          Tensor out = gatv2_layer(h, g, layer, 0.2);
          return sum_all(mul(out, out));  // squared norm of the prototypes
        },
        *param, 1e-5);
  };
  for (Tensor* p : {&layer.heads[0].w_l.w, &layer.heads[0].w_r.w, &layer.heads[0].a}) {
    GradCheckResult r = loss_of(p);
    CAPTURE(r.what);
    CHECK(r.max_rel_err < 1e-4);
  }
}
