#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "partseg/config.hpp"
#include "partseg/gradcheck.hpp"
#include "partseg/model.hpp"
#include "partseg/ops.hpp"
#include "partseg/synth.hpp"
#include "partseg/training.hpp"

namespace {

using namespace partseg;

// fixed palette for mask overlays, one color per class
const double kPalette[kNumClasses][3] = {
    {0.55, 0.55, 0.55}, {0.10, 0.10, 0.10}, {0.95, 0.95, 0.20}, {0.20, 0.60, 0.95},
    {0.20, 0.95, 0.60}, {0.60, 0.20, 0.95}, {0.95, 0.40, 0.20}, {0.95, 0.20, 0.60},
    {0.20, 0.95, 0.95}, {0.50, 0.80, 0.20}, {0.80, 0.50, 0.20}, {0.20, 0.50, 0.80},
    {0.90, 0.70, 0.90}};

std::vector<synth::LabeledSample> load_gallery_samples(const std::filesystem::path& dir) {
  synth::CorpusManifest man = synth::read_manifest(dir);
  const auto& entries = man.train.empty() ? man.test : man.train;
  return train::load_split(dir, entries);
}

void cmd_gen_data(const std::string& out, int count, std::uint64_t seed, const std::string& mix,
                  double train_frac, double val_frac, int size) {
  synth::CorpusManifest man =
      synth::generate_corpus(out, count, seed, train_frac, val_frac, mix, size);
  std::printf("wrote %zu train / %zu val / %zu test samples to %s\n", man.train.size(),
              man.val.size(), man.test.size(), out.c_str());
}

void cmd_build_graph(const std::string& data, const std::string& out) {
  synth::CorpusManifest man = synth::read_manifest(data);
  std::vector<std::set<ClassId>> presences;
  for (const auto& e : man.train) presences.push_back(e.present);
  for (const auto& e : man.val) presences.push_back(e.present);
  for (const auto& e : man.test) presences.push_back(e.present);
  PartOntology onto = compute_cooccurrence(build_adjacency(), presences);
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out);
  f << serialize_ontology(onto);
  std::printf("wrote part graph (%zu edges) to %s\n", onto.edges.size(), out.c_str());
}

void cmd_train(const cfg::RunConfig& rc, const std::string& data, const std::string& out) {
  train::TrainOutcome o = train::train(rc.model, rc.train, data, out, cfg::to_json(rc));
  std::printf("trained %lld iterations; val mIoU %.2f mAcc %.2f; checkpoint at %s\n", o.iters,
              o.val_miou, o.val_macc, out.c_str());
}

void cmd_eval(const std::string& ckpt, const std::string& data, const std::string& report,
              const std::string& split) {
  train::LoadedModel lm = train::load_model(ckpt);
  synth::CorpusManifest man = synth::read_manifest(data);
  const auto& entries = split == "train" ? man.train : split == "val" ? man.val : man.test;
  if (entries.empty()) throw std::runtime_error("empty split: " + split);
  std::vector<synth::LabeledSample> samples = train::load_split(data, entries);
  std::vector<context::GalleryEntry> gallery;
  if (lm.model.cfg.vp)
    gallery = train::build_gallery(train::load_split(data, man.train), lm.reid);
  eval::ConfusionAccumulator acc =
      train::evaluate(lm.model, lm.reid, gallery, samples, lm.ontology);
  nlohmann::json j;
  j["split"] = split;
  j["miou"] = eval::miou(acc);
  j["macc"] = eval::macc(acc);
  for (int c = 0; c < kNumClasses; ++c) {
    double iou = eval::iou_class(acc, c);
    if (iou == iou) j["per_class_iou"][class_names()[static_cast<std::size_t>(c)]] = iou;
  }
  j["config"] = nlohmann::json::parse(lm.config_json);
  std::ofstream f(report);
  if (!f) throw std::runtime_error("cannot write " + report);
  f << j.dump(2) << "\n";
  std::printf("%s mIoU %s mAcc %s -> %s\n", split.c_str(),
              eval::format_percent(eval::miou(acc)).c_str(),
              eval::format_percent(eval::macc(acc)).c_str(), report.c_str());
}

void cmd_predict(const std::string& ckpt, const std::string& image, const std::string& gallery_dir,
                 const std::string& out_mask, const std::string& out_overlay) {
  train::LoadedModel lm = train::load_model(ckpt);
  Tensor img = synth::read_image(image);
  std::vector<context::EncodedReference> refs;
  if (lm.model.cfg.vp && !gallery_dir.empty()) {
    std::vector<synth::LabeledSample> samples = load_gallery_samples(gallery_dir);
    std::vector<context::GalleryEntry> gallery = train::build_gallery(samples, lm.reid);
    NoGradGuard ng;
    Tensor qf = lm.reid.embed(img).view({lm.reid.d_reid});
    for (const auto& h : train::retrieve_refs(qf, gallery, lm.model.cfg.refs, -1))
      refs.push_back(model::encode_reference(lm.model, samples[static_cast<std::size_t>(h.index)]));
  }
  model::Prediction pred = model::predict(lm.model, img, lm.ontology, refs);
  int h = img.dim(1), w = img.dim(2);
  std::vector<std::uint8_t> mask(pred.labels.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = static_cast<std::uint8_t>(pred.labels[i] + 1);
  synth::write_mask(out_mask, mask, w, h);
  // sit the resolved config beside the artifact for provenance
  std::ofstream cf(out_mask + ".config.json");
  cf << lm.config_json << "\n";
  if (!out_overlay.empty()) {
    Tensor overlay = img.clone_data();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int c = pred.labels[static_cast<std::size_t>(y) * w + x];
        if (c < 0) continue;
        for (int ch = 0; ch < 3; ++ch) {
          std::size_t i = static_cast<std::size_t>(ch) * h * w + static_cast<std::size_t>(y) * w + x;
          overlay.at(i) = 0.45 * overlay.at(i) + 0.55 * kPalette[c][ch];
        }
      }
    synth::write_image(out_overlay, overlay);
  }
  std::printf("wrote %s\n", out_mask.c_str());
}

void cmd_retrieve(const std::string& gallery_dir, const std::string& query, int k,
                  const std::string& ckpt) {
  context::ReidNet reid = [&] {
    if (!ckpt.empty()) return train::load_model(ckpt).reid;
    Rng rng(0);
    return context::ReidNet::init(64, rng);
  }();
  std::vector<synth::LabeledSample> samples = load_gallery_samples(gallery_dir);
  std::vector<context::GalleryEntry> gallery = train::build_gallery(samples, reid);
  NoGradGuard ng;
  Tensor qf = reid.embed(synth::read_image(query)).view({reid.d_reid});
  for (const auto& h : context::retrieve(qf, gallery, k))
    std::printf("index %d id %d score %.6f\n", h.index, h.id, h.score);
}

void cmd_ablate(const cfg::RunConfig& rc, const std::string& data, const std::string& out) {
  std::filesystem::path work = std::filesystem::path(out).parent_path();
  if (work.empty()) work = ".";
  eval::AblationReport rep = train::run_ablation(rc.model, rc.train, data, work / "ablate_runs");
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out);
  nlohmann::json j = nlohmann::json::parse(rep.to_json());
  j["config"] = nlohmann::json::parse(cfg::to_json(rc));
  f << j.dump(2) << "\n";
  std::cout << rep.to_text();
}

int run_selftest() {
  int failures = 0;
  auto expect = [&](bool ok, const char* what) {
    std::printf("%-52s %s\n", what, ok ? "ok" : "FAIL");
    if (!ok) ++failures;
  };

  {  // gradient spot checks
    Rng rng(3);
    std::vector<double> xv(12 * 8), wv(8 * 8);
    for (auto& v : xv) v = rng.normal();
    for (auto& v : wv) v = 0.3 * rng.normal();
    Tensor x = Tensor::from({12, 8}, xv, true);
    Tensor w = Tensor::from({8, 8}, wv, true);
    auto f = [&] { return sum_all(sigmoid(matmul(relu(matmul(x, w)), transpose(w)))); };
    GradCheckResult r = grad_check(f, w, 1e-5, 32);
    expect(r.ok() && r.max_rel_err < 1e-4, "grad: matmul/relu/sigmoid chain");

    Tensor q = Tensor::from({4, 8}, std::vector<double>(xv.begin(), xv.begin() + 32), true);
    auto g = [&] { return sum_all(attention(q, x, x, AttentionMask::none(), 2)); };
    GradCheckResult r2 = grad_check(g, q, 1e-5, 16);
    expect(r2.ok() && r2.max_rel_err < 1e-4, "grad: multi-head attention");
  }

  {  // co-occurrence oracle
    Rng rng(11);
    bool ok = true;
    for (int trial = 0; trial < 50 && ok; ++trial) {
      std::vector<std::set<ClassId>> corpus;
      int n = 3 + rng.uniform_int(20);
      for (int i = 0; i < n; ++i) {
        std::set<ClassId> p{kForeground};
        for (int c = 1; c < kNumClasses; ++c)
          if (rng.uniform() < 0.4) p.insert(c);
        corpus.push_back(p);
      }
      PartOntology g = compute_cooccurrence(build_adjacency(), corpus);
      for (auto [a, b] : g.edges) {
        int cnt = 0;
        for (const auto& p : corpus) cnt += p.count(a) && p.count(b) ? 1 : 0;
        if (std::abs(g.weight(a, b) - static_cast<double>(cnt) / n) > 1e-12) ok = false;
      }
    }
    expect(ok, "oracle: co-occurrence weights");
  }

  {  // retrieval oracle
    Rng rng(12);
    bool ok = true;
    for (int trial = 0; trial < 50 && ok; ++trial) {
      int n = 2 + rng.uniform_int(12);
      std::vector<context::GalleryEntry> gal(static_cast<std::size_t>(n));
      std::vector<double> qv(8);
      for (auto& v : qv) v = rng.normal();
      for (int i = 0; i < n; ++i) {
        gal[static_cast<std::size_t>(i)].id = i;
        std::vector<double> fv(8);
        for (auto& v : fv) v = rng.normal();
        gal[static_cast<std::size_t>(i)].feature = Tensor::from({8}, fv);
      }
      Tensor q = Tensor::from({8}, qv);
      auto hits = context::retrieve(q, gal, n);
      for (std::size_t i = 1; i < hits.size(); ++i)
        if (hits[i - 1].score < hits[i].score - 1e-12) ok = false;
    }
    expect(ok, "oracle: retrieval ordering");
  }

  {  // confusion counts
    Rng rng(13);
    std::vector<int> pred(256), gt(256);
    for (auto& v : pred) v = rng.uniform_int(kNumClasses + 1) - 1;
    for (auto& v : gt) v = rng.uniform_int(kNumClasses + 1) - 1;
    eval::ConfusionAccumulator acc;
    acc.accumulate(pred, gt);
    bool ok = true;
    for (int c = 0; c < kNumClasses; ++c) {
      long long tp = 0;
      for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == c && gt[i] == c) ++tp;
      if (acc.tp[static_cast<std::size_t>(c)] != tp) ok = false;
    }
    expect(ok, "oracle: confusion counts");
  }

  {  // loss identities
    Tensor half = Tensor::full({4, 1}, 0.5);
    Tensor y = Tensor::from({4, 1}, {1, 0, 1, 0});
    bool ok = std::abs(loss::bce_loss(half, y).value() - std::log(2.0)) < 1e-9;
    Tensor p = Tensor::from({1, 4}, {1, 1, 0, 0});
    Tensor d = Tensor::from({1, 4}, {0, 0, 1, 1});
    ok = ok && std::abs(loss::dice_loss(p, d).value() - 1.0) < 1e-9;
    expect(ok, "identity: bce/dice reference values");
  }

  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vehicle part segmentation workbench"};
  app.require_subcommand(1);

  std::string out, data, mix = "all", ckpt, report, image, gallery, query, out_mask, out_overlay;
  std::string config_path, split = "test";
  int count = 640, k = 2, size = 64;
  std::uint64_t seed = 7;
  double train_frac = 0.75, val_frac = 0.1;

  auto* gen = app.add_subcommand("gen-data", "render a synthetic corpus");
  gen->add_option("--out", out)->required();
  gen->add_option("--count", count);
  gen->add_option("--seed", seed);
  gen->add_option("--view-mix", mix);
  gen->add_option("--train-frac", train_frac);
  gen->add_option("--val-frac", val_frac);
  gen->add_option("--size", size);

  auto* graph = app.add_subcommand("build-graph", "adjacency + co-occurrence weights");
  graph->add_option("--data", data)->required()->check(CLI::ExistingDirectory);
  graph->add_option("--out", out)->required();

  auto* tr = app.add_subcommand("train", "train a model");
  bool no_gtp = false, no_vp = false, no_ram = false;
  int gat_layers = 0, refs = 0, threads = 0, epochs = 0;
  double lr = 0.0;
  std::uint64_t tseed = 0;
  bool seed_set = false;
  tr->add_option("--config", config_path)->check(CLI::ExistingFile);
  tr->add_option("--data", data)->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", out)->required();
  tr->add_flag("--no-gtp", no_gtp);
  tr->add_flag("--no-vp", no_vp);
  tr->add_flag("--no-ram", no_ram);
  tr->add_option("--gat-layers", gat_layers)->check(CLI::Range(3, 5));
  tr->add_option("--refs", refs)->check(CLI::Range(1, 16));
  tr->add_option("--threads", threads)->check(CLI::Range(1, 64));
  tr->add_option("--epochs", epochs)->check(CLI::Range(1, 1000));
  tr->add_option("--lr", lr);
  tr->add_option("--seed", tseed)->each([&](const std::string&) { seed_set = true; });

  auto* ev = app.add_subcommand("eval", "score a checkpoint on a corpus split");
  ev->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--data", data)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--report", report)->required();
  ev->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));

  auto* pr = app.add_subcommand("predict", "segment one image");
  pr->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingDirectory);
  pr->add_option("--image", image)->required()->check(CLI::ExistingFile);
  pr->add_option("--gallery", gallery)->check(CLI::ExistingDirectory);
  pr->add_option("--out-mask", out_mask)->required();
  pr->add_option("--out-overlay", out_overlay);

  auto* re = app.add_subcommand("retrieve", "rank gallery images against a query");
  re->add_option("--gallery", gallery)->required()->check(CLI::ExistingDirectory);
  re->add_option("--query", query)->required()->check(CLI::ExistingFile);
  re->add_option("-k", k)->check(CLI::Range(1, 1000));
  re->add_option("--ckpt", ckpt)->check(CLI::ExistingDirectory);

  auto* ab = app.add_subcommand("ablate", "run the component/depth/reference matrix");
  ab->add_option("--config", config_path)->check(CLI::ExistingFile);
  ab->add_option("--data", data)->required()->check(CLI::ExistingDirectory);
  ab->add_option("--out", report)->required();

  auto* st = app.add_subcommand("selftest", "gradient and oracle spot checks");
  (void)st;

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    auto resolved = [&] {
      cfg::RunConfig rc = config_path.empty() ? cfg::RunConfig() : cfg::load_file(config_path);
      if (no_gtp) rc.model.gtp = false;
      if (no_vp) rc.model.vp = false;
      if (no_ram) rc.model.ram = false;
      if (gat_layers > 0) {
        rc.model.gat.layers = gat_layers;
        rc.model.gat.heads = cfg::gat_heads_for_depth(gat_layers);
      }
      if (refs > 0) rc.model.refs = refs;
      if (threads > 0) rc.train.threads = threads;
      if (epochs > 0) rc.train.epochs = epochs;
      if (lr > 0.0) rc.train.base_lr = lr;
      if (seed_set) rc.train.seed = tseed;
      return rc;
    };
    if (gen->parsed()) cmd_gen_data(out, count, seed, mix, train_frac, val_frac, size);
    if (graph->parsed()) cmd_build_graph(data, out);
    if (tr->parsed()) cmd_train(resolved(), data, out);
    if (ev->parsed()) cmd_eval(ckpt, data, report, split);
    if (pr->parsed()) cmd_predict(ckpt, image, gallery, out_mask, out_overlay);
    if (re->parsed()) cmd_retrieve(gallery, query, k, ckpt);
    if (ab->parsed()) cmd_ablate(resolved(), data, report);
    if (st->parsed()) return run_selftest();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
