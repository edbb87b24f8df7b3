#include "partseg/model.hpp"

#include <stdexcept>

#include "partseg/ops.hpp"

namespace partseg::model {

namespace {

// random projections with a zeroed output layer: the block starts as the
// identity on its residual path but still receives gradient through wo
// (an all-zero attention is a saddle the optimizer can never leave)
void zero_out_proj(nn::MultiHeadAttention& attn) {
  for (auto& v : *attn.wo.w.data) v = 0.0;
  for (auto& v : *attn.wo.b.data) v = 0.0;
}

}  // namespace

void SavConfig::validate() const {
  gat.validate();
  if (bb.d_model != dec.d_model) throw std::invalid_argument("backbone/decoder width mismatch");
  if (bb.d_proto != bb.d_model) throw std::invalid_argument("prototype width must match d_model");
  if (gat.d_proto != bb.d_model) throw std::invalid_argument("graph output width must match d_model");
  if (refs < 1) throw std::invalid_argument("refs must be >= 1");
  if (d_text < 1 || d_mid < 1) throw std::invalid_argument("widths must be positive");
}

SavModel SavModel::init(const SavConfig& cfg, Rng& rng) {
  cfg.validate();
  SavModel m;
  m.cfg = cfg;
  m.label_emb = graph::label_embeddings(cfg.label_seed, cfg.d_text);
  m.bb = backbone::Backbone::init(cfg.bb, rng);
  m.gat = graph::GraphEncoder::init(cfg.gat, cfg.d_text, rng);
  m.text_proj = nn::Linear::init(cfg.d_text, cfg.bb.d_model, rng);
  m.cdt = fusion::Cdt::init(cfg.bb.d_model, cfg.heads, rng);
  zero_out_proj(m.cdt.attn);
  m.ppem = fusion::Ppem::init(cfg.bb.d_model, cfg.d_mid, rng);
  m.dec = decoder::MaskDecoder::init(cfg.dec, rng);
  m.presence_head = nn::Linear::init(cfg.bb.d_model, 2, rng);
  m.ref_enc = context::RefEncoder::init(cfg.bb.d_model, rng);
  m.pooler = context::PrototypePooler::init(cfg.bb.d_model, cfg.heads, rng);
  zero_out_proj(m.pooler.class_attn);
  zero_out_proj(m.pooler.example_attn);
  zero_out_proj(m.pooler.joint_attn);
  m.vp_head = nn::Linear::init(cfg.bb.d_model, 2, rng, /*bias=*/false);
  // presence must start as the token head alone; the prototype read grows in
  for (auto& v : *m.vp_head.w.data) v *= 0.1;
  m.ram = roi::RoiRefiner::init(cfg.bb.d_model, cfg.heads, rng);
  zero_out_proj(m.ram.attn);
  for (auto& v : *m.ram.cls.w.data) v = 0.0;
  for (auto& v : *m.ram.cls.b.data) v = 0.0;
  return m;
}

void SavModel::collect(nn::ParamRegistry& reg) {
  bb.collect(reg, "bb");
  if (cfg.gtp) {
    gat.collect(reg, "gat");
  } else {
    text_proj.collect(reg, "text_proj");
  }
  cdt.collect(reg, "cdt");
  ppem.collect(reg, "ppem");
  dec.collect(reg, "dec");
  presence_head.collect(reg, "presence");
  if (cfg.vp) {
    ref_enc.collect(reg, "ref_enc");
    pooler.collect(reg, "pooler");
    vp_head.collect(reg, "vp_head");
  }
  if (cfg.ram) ram.collect(reg, "ram");
}

Tensor SavModel::prototypes(const PartOntology& ontology) const {
  if (cfg.gtp) return graph::encode_prototypes(label_emb, ontology, gat);
  return text_proj.forward(label_emb);
}

ForwardOut forward(const SavModel& m, const Tensor& img, const PartOntology& ontology,
                   const std::vector<bool>& presence,
                   const std::vector<context::EncodedReference>& refs) {
  if (presence.size() != static_cast<std::size_t>(kNumClasses))
    throw std::invalid_argument("presence flags must cover every class");
  ForwardOut out;
  out.f = m.bb.encode_image(img);
  int h = out.f.dim(1), w = out.f.dim(2);

  Tensor pt = m.prototypes(ontology);
  out.adapted = m.cdt.forward(out.f, fusion::PrototypeSet::textual(pt));

  out.f_rows = backbone::feature_rows(out.f);
  std::vector<Tensor> acts = fusion::ppem_activate(out.f_rows, out.adapted.p);
  fusion::PromptEmbeddings prompts = m.ppem.forward(acts, presence, h, w);

  out.dec = m.dec.decode(out.f, prompts.dense, prompts.sparse);
  out.presence_logits = m.presence_head.forward(out.dec.tokens);

  if (m.cfg.vp && !refs.empty()) {
    out.pv = m.pooler.visual_prototypes(refs);
    out.has_pv = true;
    // bias-free read: unsupported prototype rows are exactly zero, so they
    // leave the token-path presence logits untouched
    out.presence_logits = add(out.presence_logits, m.vp_head.forward(out.pv.p));
  }
  return out;
}

context::EncodedReference encode_reference(const SavModel& m, const synth::LabeledSample& s) {
  Tensor f_map = m.bb.encode_image(s.image);
  return m.ref_enc.encode(f_map, s.mask, s.width, s.height);
}

Prediction predict(const SavModel& m, const Tensor& img, const PartOntology& ontology,
                   const std::vector<context::EncodedReference>& refs) {
  NoGradGuard ng;
  // presence for the sparse prompt path: thresholded prototype-feature dots
  Tensor f = m.bb.encode_image(img);
  fusion::PrototypeSet adapted = m.cdt.forward(f, fusion::PrototypeSet::textual(m.prototypes(ontology)));
  std::vector<double> scores = fusion::presence_scores(backbone::feature_rows(f), adapted.p);
  std::vector<bool> flags(kNumClasses);
  for (int c = 0; c < kNumClasses; ++c)
    flags[static_cast<std::size_t>(c)] = scores[static_cast<std::size_t>(c)] > m.cfg.presence_thresholds[static_cast<std::size_t>(c)];

  ForwardOut out = forward(m, img, ontology, flags, refs);

  Prediction pred;
  pred.masks = out.dec.masks;
  pred.class_scores.assign(kNumClasses, 0.0);
  for (int c = 0; c < kNumClasses; ++c) {
    auto cc = static_cast<std::size_t>(c);
    pred.class_scores[cc] = out.presence_logits.at(cc * 2 + 1) - out.presence_logits.at(cc * 2);
  }

  if (m.cfg.ram && out.has_pv) {
    std::vector<roi::RoiBox> boxes = roi::mask_to_boxes(pred.masks);
    if (!boxes.empty()) {
      backbone::PyramidFeatures pyr = m.bb.pyramid(img);
      int image_size = img.dim(1);
      for (const auto& box : boxes) {
        Tensor rows = roi_align(pyr, box, m.ram.out_size, image_size);
        Tensor refined = m.ram.refine_logits(rows, out.pv);
        pred.class_scores[static_cast<std::size_t>(box.cls)] +=
            refined.at(static_cast<std::size_t>(box.cls));
      }
    }
  }

  pred.keep.assign(kNumClasses, false);
  for (int c = 0; c < kNumClasses; ++c)
    pred.keep[static_cast<std::size_t>(c)] = pred.class_scores[static_cast<std::size_t>(c)] > 0.0;
  pred.labels = decoder::semantic_map(pred.masks, pred.keep);
  return pred;
}

}  // namespace partseg::model
