#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "partseg/config.hpp"
#include "partseg/model.hpp"
#include "partseg/ops.hpp"
#include "partseg/synth.hpp"
#include "partseg/training.hpp"

using namespace partseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "partseg_train_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// byte-level fingerprint of a checkpoint directory
std::string checkpoint_bytes(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += f.filename().string() + "\n" + slurp(f);
  return all;
}

train::TrainConfig tiny_train() {
  train::TrainConfig t;
  t.epochs = 1;
  t.warmup_iters = 2;
  t.base_lr = 1e-3;
  t.reid_iters = 5;
  t.gate_warmup_iters = 5;
  t.n_points = 32;
  return t;
}

}  // namespace

TEST_CASE("learning rate warms up linearly and decays at milestones") {
  train::TrainConfig c;
  c.base_lr = 2e-4;
  c.warmup_iters = 100;
  c.milestones = {12, 16, 18};
  c.gamma = 0.1;
  for (int t : {0, 1, 37, 99})
    CHECK(train::lr_at(c, t, 0) == 2e-4 * static_cast<double>(t) / 100.0);  // exact
  CHECK(train::lr_at(c, 100, 0) == 2e-4);
  CHECK(train::lr_at(c, 500, 11) == 2e-4);
  CHECK(train::lr_at(c, 500, 12) == doctest::Approx(2e-5).epsilon(1e-12));
  CHECK(train::lr_at(c, 500, 17) == doctest::Approx(2e-6).epsilon(1e-12));
  CHECK(train::lr_at(c, 500, 19) == doctest::Approx(2e-7).epsilon(1e-12));
}

TEST_CASE("config validation rejects bad schedules") {
  train::TrainConfig c;
  c.milestones = {16, 12};
  CHECK_THROWS(c.validate());
  c = train::TrainConfig();
  c.epochs = 0;
  CHECK_THROWS(c.validate());
  c = train::TrainConfig();
  c.importance_fraction = 1.5;
  CHECK_THROWS(c.validate());
  CHECK_NOTHROW(train::TrainConfig().validate());
}

TEST_CASE("optimizer first step matches the hand formula and honors lr groups") {
  Tensor a = Tensor::from({2}, {1.0, -2.0}, true);
  Tensor b = Tensor::from({1}, {0.5}, true);
  nn::ParamRegistry reg;
  reg.add("bb.w", &a);
  reg.add("head.w", &b);
  train::AdamW opt(reg, 0.0, {{"bb.", 0.1}});
  (*a.grad)[0] = 0.3;
  (*a.grad)[1] = -0.7;
  (*b.grad)[0] = 1.1;
  double lr = 1e-2;
  opt.step(reg, lr);
  // bias-corrected first step is lr * g / (|g| + eps), scaled by the group
  CHECK(a.at(0) == doctest::Approx(1.0 - 0.1 * lr * (0.3 / (0.3 + 1e-8))).epsilon(1e-12));
  CHECK(a.at(1) == doctest::Approx(-2.0 - 0.1 * lr * (-0.7 / (0.7 + 1e-8))).epsilon(1e-12));
  CHECK(b.at(0) == doctest::Approx(0.5 - lr * (1.1 / (1.1 + 1e-8))).epsilon(1e-12));
}

TEST_CASE("decoupled weight decay shrinks parameters without gradients") {
  Tensor a = Tensor::from({1}, {4.0}, true);
  nn::ParamRegistry reg;
  reg.add("w", &a);
  train::AdamW opt(reg, 0.5);
  (*a.grad)[0] = 0.0;
  opt.step(reg, 1e-2);
  CHECK(a.at(0) == doctest::Approx(4.0 - 1e-2 * 0.5 * 4.0).epsilon(1e-12));
}

TEST_CASE("presence threshold calibration separates clean score groups") {
  std::vector<double> scores = {0.1, 0.2, 0.3, 0.8, 0.9, 1.0};
  std::vector<std::uint8_t> labels = {0, 0, 0, 1, 1, 1};
  double th = train::calibrate_presence_threshold(scores, labels);
  CHECK(th > 0.3);
  CHECK(th < 0.8);
  // degenerate all-positive input keeps everything above the threshold
  double lo = train::calibrate_presence_threshold({0.5, 0.6}, {1, 1});
  CHECK(lo < 0.5);
  CHECK_THROWS(train::calibrate_presence_threshold({}, {}));
}

TEST_CASE("retrieval wrapper drops the query's own gallery slot") {
  Rng rng(4);
  std::vector<context::GalleryEntry> gal(5);
  for (int i = 0; i < 5; ++i) {
    std::vector<double> f(8);
    double norm = 0.0;
    for (auto& v : f) {
      v = rng.normal();
      norm += v * v;
    }
    for (auto& v : f) v /= std::sqrt(norm);
    gal[static_cast<std::size_t>(i)].id = i;
    gal[static_cast<std::size_t>(i)].feature = Tensor::from({8}, f);
  }
  auto hits = train::retrieve_refs(gal[2].feature, gal, 2, 2);
  REQUIRE(hits.size() == 2);
  for (const auto& h : hits) CHECK(h.index != 2);
  auto with_self = train::retrieve_refs(gal[2].feature, gal, 2, -1);
  CHECK(with_self[0].index == 2);
}

TEST_CASE("raw-embedding prototypes ignore the ontology, graph prototypes do not") {
  Rng rng(5);
  model::SavConfig mcfg;
  model::SavModel m = model::SavModel::init(mcfg, rng);
  PartOntology a = build_adjacency();
  PartOntology b = build_adjacency();
  for (auto [i, j] : b.edges) b.set_weight(i, j, 0.9);
  for (auto [i, j] : a.edges) a.set_weight(i, j, 0.2);
  NoGradGuard ng;
  Tensor ga = m.prototypes(a), gb = m.prototypes(b);
  bool differs = false;
  for (std::size_t i = 0; i < ga.numel(); ++i)
    if (ga.at(i) != gb.at(i)) differs = true;
  CHECK(differs);

  m.cfg.gtp = false;
  Tensor ra = m.prototypes(a), rb = m.prototypes(b);
  for (std::size_t i = 0; i < ra.numel(); ++i) REQUIRE(ra.at(i) == rb.at(i));
}

TEST_CASE("smoke run finishes with finite decreasing loss and writes artifacts") {
  fs::path data = scratch("smoke_data");
  synth::generate_corpus(data, 24, 7);
  fs::path out = scratch("smoke_ckpt");
  cfg::RunConfig rc;
  rc.train = tiny_train();
  rc.train.epochs = 2;
  train::TrainOutcome o = train::train(rc.model, rc.train, data, out, cfg::to_json(rc));
  CHECK(o.iters > 0);
  CHECK(fs::exists(out / "manifest.json"));
  CHECK(fs::exists(out / "ontology.txt"));
  std::ifstream log(out / "metrics.jsonl");
  std::string line;
  std::vector<double> losses;
  while (std::getline(log, line)) {
    auto pos = line.find("\"train_loss\":");
    REQUIRE(pos != std::string::npos);
    losses.push_back(std::stod(line.substr(pos + 13)));
  }
  REQUIRE(losses.size() == 2);
  for (double l : losses) CHECK(std::isfinite(l));
  CHECK(losses[1] < losses[0]);

  // the checkpoint reloads into a working model
  train::LoadedModel lm = train::load_model(out);
  auto samples = train::load_split(data, synth::read_manifest(data).val);
  REQUIRE(!samples.empty());
  auto gallery = train::build_gallery(train::load_split(data, synth::read_manifest(data).train), lm.reid);
  model::Prediction p = model::predict(lm.model, samples[0].image, lm.ontology, {});
  CHECK(p.labels.size() == samples[0].mask.size());
}

TEST_CASE("identical seeds give byte-identical checkpoints") {
  fs::path data = scratch("det_data");
  synth::generate_corpus(data, 16, 9);
  cfg::RunConfig rc;
  rc.train = tiny_train();
  fs::path a = scratch("det_a"), b = scratch("det_b");
  train::train(rc.model, rc.train, data, a, cfg::to_json(rc));
  train::train(rc.model, rc.train, data, b, cfg::to_json(rc));
  CHECK(checkpoint_bytes(a) == checkpoint_bytes(b));
}

TEST_CASE("thread count does not change the result") {
  fs::path data = scratch("thr_data");
  synth::generate_corpus(data, 16, 11);
  cfg::RunConfig rc;
  rc.train = tiny_train();
  fs::path a = scratch("thr_1"), b = scratch("thr_4");
  train::train(rc.model, rc.train, data, a, cfg::to_json(rc));
  rc.train.threads = 4;
  train::train(rc.model, rc.train, data, b, cfg::to_json(rc));
  // the embedded config differs in the thread count; compare tensors only
  std::string ba = checkpoint_bytes(a), bb = checkpoint_bytes(b);
  train::LoadedModel la = train::load_model(a), lb = train::load_model(b);
  nn::ParamRegistry ra, rb;
  la.model.collect(ra);
  lb.model.collect(rb);
  REQUIRE(ra.items.size() == rb.items.size());
  for (std::size_t i = 0; i < ra.items.size(); ++i)
    for (std::size_t j = 0; j < ra.items[i].second->numel(); ++j)
      REQUIRE(ra.items[i].second->at(j) == rb.items[i].second->at(j));
}

TEST_CASE("exploding training aborts but leaves a loadable checkpoint") {
  fs::path data = scratch("boom_data");
  synth::generate_corpus(data, 16, 13);
  cfg::RunConfig rc;
  rc.train = tiny_train();
  rc.train.epochs = 3;
  rc.train.warmup_iters = 0;
  rc.train.base_lr = 1e14;  // guaranteed numeric blow-up
  fs::path out = scratch("boom_ckpt");
  CHECK_THROWS_AS(train::train(rc.model, rc.train, data, out, cfg::to_json(rc)),
                  std::runtime_error);
  CHECK(fs::exists(out / "manifest.json"));
  train::LoadedModel lm = train::load_model(out);
  nn::ParamRegistry reg;
  lm.model.collect(reg);
  for (const auto& [name, t] : reg.items)
    for (std::size_t i = 0; i < t->numel(); ++i) REQUIRE(std::isfinite(t->at(i)));
}

TEST_CASE("base path ignores ontology weights and gallery end to end") {
  fs::path data = scratch("base_data");
  synth::generate_corpus(data, 16, 15);
  cfg::RunConfig rc;
  rc.model.gtp = rc.model.vp = rc.model.ram = false;
  rc.train = tiny_train();
  fs::path out = scratch("base_ckpt");
  train::TrainOutcome o = train::train(rc.model, rc.train, data, out, cfg::to_json(rc));
  auto samples = train::load_split(data, synth::read_manifest(data).train);
  PartOntology perturbed = o.ontology;
  for (auto [i, j] : perturbed.edges) perturbed.set_weight(i, j, 0.123);
  model::Prediction p1 = model::predict(o.model, samples[0].image, o.ontology, {});
  model::Prediction p2 = model::predict(o.model, samples[0].image, perturbed, {});
  REQUIRE(p1.labels == p2.labels);
  for (std::size_t i = 0; i < p1.masks.logits.numel(); ++i)
    REQUIRE(p1.masks.logits.at(i) == p2.masks.logits.at(i));
}

TEST_CASE("contrastive pretraining groups identities") {
  fs::path data = scratch("reid_data");
  synth::generate_corpus(data, 32, 21);
  auto samples = train::load_split(data, synth::read_manifest(data).train);
  train::TrainConfig tc;
  tc.reid_iters = 120;
  context::ReidNet reid = train::pretrain_reid(samples, tc, 64);
  auto gallery = train::build_gallery(samples, reid);
  // same-identity entries should outrank different identities most of the time
  int good = 0, total = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    bool has_same = false;
    for (std::size_t j = 0; j < samples.size(); ++j)
      if (j != i && samples[j].identity == samples[i].identity) has_same = true;
    if (!has_same) continue;
    auto hits = train::retrieve_refs(gallery[i].feature, gallery, 1, static_cast<int>(i));
    ++total;
    if (samples[static_cast<std::size_t>(hits[0].index)].identity == samples[i].identity) ++good;
  }
  REQUIRE(total > 0);
  CHECK(static_cast<double>(good) / total >= 0.6);
}
