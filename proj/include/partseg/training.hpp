#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "partseg/context_bank.hpp"
#include "partseg/evaluation.hpp"
#include "partseg/losses.hpp"
#include "partseg/model.hpp"
#include "partseg/nn.hpp"
#include "partseg/ontology.hpp"
#include "partseg/synth.hpp"

namespace partseg::train {

struct TrainConfig {
  double base_lr = 1e-4;
  double weight_decay = 0.005;
  int batch = 4;
  int warmup_iters = 100;
  std::vector<int> milestones = {16, 18, 19};  // epoch indices
  double gamma = 0.1;
  double backbone_lr_mult = 0.1;
  int epochs = 20;
  std::uint64_t seed = 1;
  int n_points = 256;
  int oversample_ratio = 3;
  double importance_fraction = 0.75;
  int threads = 1;
  // contrastive pretraining of the retrieval embedder
  int reid_iters = 300;
  double reid_lr = 1e-3;
  double reid_temp = 0.1;
  // presence-gate pretraining: dot-map-only iterations before the joint
  // epochs, so the gate statistic starts separated instead of at the prior
  int gate_warmup_iters = 1500;

  void validate() const;  // milestones ascending, epochs >= 1, etc.
};

// decoupled-weight-decay adaptive-moment optimizer; per-parameter learning
// rate multipliers keyed by registry name prefix
struct AdamW {
  struct Slot {
    std::vector<double> m, v;
    double lr_mult = 1.0;
  };
  std::vector<Slot> slots;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;
  long long t = 0;

  AdamW(const nn::ParamRegistry& reg, double weight_decay,
        const std::vector<std::pair<std::string, double>>& prefix_lr_mults = {});
  void step(nn::ParamRegistry& reg, double lr);
};

// warmup then stepped decay: base * t / warmup for t < warmup (t 0-based),
// afterwards base * gamma^(milestones passed by the current epoch)
double lr_at(const TrainConfig& cfg, long long iter, int epoch);

// contrastive embedder training: same-identity pairs attract, the rest of
// the batch repels (softmax over cosine similarities / temperature)
context::ReidNet pretrain_reid(const std::vector<synth::LabeledSample>& samples,
                               const TrainConfig& cfg, int d_reid);

std::vector<context::GalleryEntry> build_gallery(const std::vector<synth::LabeledSample>& samples,
                                                 const context::ReidNet& reid);

// top-k retrieval for a query that may itself sit in the gallery at
// exclude_index (pass -1 to keep everything)
std::vector<context::RetrievalHit> retrieve_refs(const Tensor& query_feature,
                                                 const std::vector<context::GalleryEntry>& gallery,
                                                 int k, int exclude_index);

// presence-gate threshold maximizing the balanced score min(precision,
// recall) over (score, label) pairs; ties take the smaller threshold
double calibrate_presence_threshold(const std::vector<double>& scores,
                                    const std::vector<std::uint8_t>& labels);

// full-dataset confusion from model predictions
eval::ConfusionAccumulator evaluate(const model::SavModel& m, const context::ReidNet& reid,
                                    const std::vector<context::GalleryEntry>& gallery,
                                    const std::vector<synth::LabeledSample>& samples,
                                    const PartOntology& ontology);

struct TrainOutcome {
  model::SavModel model;
  context::ReidNet reid;
  PartOntology ontology;
  double val_miou = 0.0, val_macc = 0.0;
  long long iters = 0;
};

// end-to-end training on a generated corpus directory; writes the checkpoint
// (with the resolved config embedded), the ontology, and a JSON-lines metrics
// log into out_dir. Aborts on non-finite loss after saving the last good
// parameter state.
TrainOutcome train(const model::SavConfig& mcfg, const TrainConfig& tcfg,
                   const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                   const std::string& config_json);

// rebuilds the model from a checkpoint directory written by train()
struct LoadedModel {
  model::SavModel model;
  context::ReidNet reid;
  PartOntology ontology;
  std::string config_json;
};
LoadedModel load_model(const std::filesystem::path& ckpt_dir);

std::vector<synth::LabeledSample> load_split(const std::filesystem::path& data_dir,
                                             const std::vector<synth::ManifestEntry>& entries);

// trains one configuration and scores it on the requested split
eval::RunMetrics train_and_score(const model::SavConfig& mcfg, const TrainConfig& tcfg,
                                 const std::filesystem::path& data_dir,
                                 const std::filesystem::path& out_dir);

// component rows (base / +gtp / +gtp+ram / +vp+ram / full), graph-depth rows
// {3,4,5}, and the reference-count sweep k in {1..4}; runs sharing the full
// configuration reuse its result
eval::AblationReport run_ablation(const model::SavConfig& base_model, const TrainConfig& base_train,
                                  const std::filesystem::path& data_dir,
                                  const std::filesystem::path& work_dir);

}  // namespace partseg::train
