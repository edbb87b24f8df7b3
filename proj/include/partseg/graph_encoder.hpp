#pragma once

#include <filesystem>
#include <set>
#include <vector>

#include "partseg/nn.hpp"
#include "partseg/ontology.hpp"
#include "partseg/tensor.hpp"

namespace partseg::graph {

// deterministic stand-in for a text encoder: one L2-normalized row per label
Tensor label_embeddings(std::uint64_t seed, int d_text = 48);
// loads a (13, d_text) tensor from a checkpoint directory holding a single
// "label_embeddings" entry; rows are L2-normalized on load
Tensor label_embeddings_from_file(const std::filesystem::path& dir, int d_text = 48);

struct GatConfig {
  int layers = 4;
  std::vector<int> heads = {4, 4, 1, 1};  // one entry per layer
  int d_hidden = 32;                      // concat width of hidden layers
  int d_proto = 32;                       // output width (single head)
  double leaky_slope = 0.2;

  void validate() const;  // throws on inconsistent layer/head layout
};

// generic graph view used by the attention layer; node count may differ from
// the part ontology in tests
struct GraphView {
  std::vector<std::set<int>> nbrs;   // neighborhoods, no self entries
  std::vector<double> weights;       // n x n edge weights

  int n() const { return static_cast<int>(nbrs.size()); }
  double weight(int i, int j) const { return weights[static_cast<std::size_t>(i) * nbrs.size() + j]; }
  static GraphView from_ontology(const PartOntology& g);
};

struct GatHead {
  nn::Linear w_l, w_r;  // no bias
  Tensor a;             // (d_out, 1) attention vector
};

struct GatLayer {
  std::vector<GatHead> heads;
  int d_out_per_head = 0;
};

// one attention layer: alpha_ij = softmax_{j in N_i + self} of
// a^T leaky_relu(W_l h_i + W_r h_j) + log(W_ij + 1e-3) [0 on the self loop];
// h'_i = sum_j alpha_ij W_r h_j, heads concatenated, no activation here
Tensor gatv2_layer(const Tensor& h, const GraphView& g, const GatLayer& layer, double slope);

struct GraphEncoder {
  GatConfig cfg;
  std::vector<GatLayer> layers;
  // per-node input skip: stacked attention alone drives node features toward
  // a common average and erases class identity; adding a projection of the
  // raw embeddings keeps prototypes distinct at any depth
  nn::Linear skip;

  static GraphEncoder init(const GatConfig& cfg, int d_text, Rng& rng);
  void collect(nn::ParamRegistry& reg, const std::string& prefix);
  // ELU between layers, identity after the last, plus the input skip
  Tensor forward(const Tensor& t, const GraphView& g) const;
};

// P_t: structure-aware textual prototypes, one row per class
Tensor encode_prototypes(const Tensor& t, const PartOntology& ontology, const GraphEncoder& enc);

}  // namespace partseg::graph
