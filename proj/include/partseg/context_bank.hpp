#pragma once

#include <vector>

#include "partseg/nn.hpp"
#include "partseg/ontology.hpp"
#include "partseg/tensor.hpp"

namespace partseg::context {

// small convolutional embedder producing L2-normalized vehicle descriptors
struct ReidNet {
  nn::Conv2d c1, c2, c3;
  nn::Linear head;
  int d_reid = 64;

  static ReidNet init(int d_reid, Rng& rng);
  void collect(nn::ParamRegistry& reg, const std::string& prefix);
  // (1, d_reid) unit row; differentiable (used by the contrastive objective)
  Tensor embed(const Tensor& img) const;
};

struct GalleryEntry {
  int id = 0;
  Tensor image;                    // (3,H,W)
  std::vector<std::uint8_t> mask;  // label map, 0 = background
  int width = 0, height = 0;
  Tensor feature;                  // (d_reid), unit norm
};

struct RetrievalHit {
  int index = 0;  // position in the gallery
  int id = 0;
  double score = 0.0;
};

// exact top-k by cosine similarity; ties broken by ascending id
std::vector<RetrievalHit> retrieve(const Tensor& query_f, const std::vector<GalleryEntry>& gallery,
                                   int k);

struct EncodedReference {
  std::vector<Tensor> tokens;  // n_cls entries of (n_tok, d_model)
  std::vector<bool> flags;     // class has >= 1 pixel in the reference mask
};

// downsamples each class's binary mask through strided convolutions to the
// feature resolution and combines it with the image feature map
struct RefEncoder {
  nn::Conv2d m1, m2, m3;

  static RefEncoder init(int d_model, Rng& rng);
  void collect(nn::ParamRegistry& reg, const std::string& prefix);
  // f_map: (d_model, h, w) features of the reference image; mask at 8x the
  // feature resolution
  EncodedReference encode(const Tensor& f_map, const std::vector<std::uint8_t>& mask, int mask_w,
                          int mask_h) const;
};

struct VisualPrototypes {
  Tensor p;                 // (n_cls, d_proto); unsupported rows exactly 0
  std::vector<bool> valid;  // supported by >= 1 reference
};

// class / example / class-example masked attentions over the pooled reference
// tokens, then per-class flag-weighted pooling
struct PrototypePooler {
  nn::Linear phi_in, phi_out;
  nn::MultiHeadAttention class_attn, example_attn, joint_attn;

  static PrototypePooler init(int d_model, int heads, Rng& rng);
  static PrototypePooler zeros(int d_model, int heads);
  void collect(nn::ParamRegistry& reg, const std::string& prefix);
  VisualPrototypes visual_prototypes(const std::vector<EncodedReference>& refs) const;
};

}  // namespace partseg::context
