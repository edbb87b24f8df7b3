#pragma once

#include <string>
#include <vector>

#include "partseg/backbone.hpp"
#include "partseg/context_bank.hpp"
#include "partseg/graph_encoder.hpp"
#include "partseg/mask_decoder.hpp"
#include "partseg/nn.hpp"
#include "partseg/ontology.hpp"
#include "partseg/prompt_fusion.hpp"
#include "partseg/roi_refiner.hpp"
#include "partseg/synth.hpp"
#include "partseg/tensor.hpp"

namespace partseg::model {

struct SavConfig {
  backbone::BackboneConfig bb;
  graph::GatConfig gat;
  decoder::DecoderConfig dec;
  int d_text = 48;
  int d_mid = 8;    // per-class channel width inside the dense prompt path
  int heads = 4;
  int d_reid = 64;
  bool gtp = true;  // structure-aware textual prototypes
  bool vp = true;   // retrieval-based visual prototypes
  bool ram = true;  // region classification refinement
  int refs = 2;     // retrieved references per query
  std::uint64_t label_seed = 17;
  // presence gate on the max pooled prototype-feature dot product, calibrated
  // on the validation split after training
  std::vector<double> presence_thresholds = std::vector<double>(kNumClasses, 0.0);

  void validate() const;
};

// Full segmentation model. The visual-stream members exist regardless of the
// ablation flags so checkpoints stay structurally stable; collect() only
// registers the parts the flags enable.
struct SavModel {
  SavConfig cfg;
  Tensor label_emb;            // (13, d_text) fixed surrogate text embeddings
  backbone::Backbone bb;
  graph::GraphEncoder gat;     // gtp path
  nn::Linear text_proj;        // no-gtp path: raw embeddings -> d_proto
  fusion::Cdt cdt;
  fusion::Ppem ppem;
  decoder::MaskDecoder dec;
  nn::Linear presence_head;    // class token -> {present, absent} logits
  context::RefEncoder ref_enc; // vp path
  context::PrototypePooler pooler;
  nn::Linear vp_head;          // bias-free prototype read added to presence
  roi::RoiRefiner ram;

  static SavModel init(const SavConfig& cfg, Rng& rng);
  void collect(nn::ParamRegistry& reg);

  // textual prototypes before image adaptation: graph-refined when gtp is on,
  // otherwise a plain projection of the label embeddings
  Tensor prototypes(const PartOntology& ontology) const;
};

struct ForwardOut {
  Tensor f;                         // (d_model, h, w) image features
  Tensor f_rows;                    // (h*w, d_model) view of the same features
  fusion::PrototypeSet adapted;     // image-adapted textual prototypes
  decoder::MaskDecoder::Output dec;
  Tensor presence_logits;           // (13, 2) per-class {absent, present}
  context::VisualPrototypes pv;     // zero-size tensor when vp is off or refs empty
  bool has_pv = false;
};

// One image through backbone -> prototypes -> adapter -> prompts -> decoder.
// presence flags select the positive/negative sparse embedding (ground truth
// at train time, thresholded scores at inference). refs are pre-encoded
// retrieval references; ignored unless cfg.vp.
ForwardOut forward(const SavModel& m, const Tensor& img, const PartOntology& ontology,
                   const std::vector<bool>& presence,
                   const std::vector<context::EncodedReference>& refs);

// encodes one gallery sample into reference tokens using the model's backbone
context::EncodedReference encode_reference(const SavModel& m, const synth::LabeledSample& s);

struct Prediction {
  decoder::MaskSet masks;
  std::vector<int> labels;          // semantic map, -1 background
  std::vector<double> class_scores; // final per-class keep scores
  std::vector<bool> keep;
};

// Full inference: presence thresholding, decoding, optional region
// refinement, class gating. refs as in forward().
Prediction predict(const SavModel& m, const Tensor& img, const PartOntology& ontology,
                   const std::vector<context::EncodedReference>& refs);

}  // namespace partseg::model
