#include "partseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "partseg/config.hpp"
#include "partseg/ops.hpp"
#include "partseg/serialize.hpp"

namespace partseg::train {

void TrainConfig::validate() const {
  if (base_lr <= 0.0) throw std::invalid_argument("base_lr must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (warmup_iters < 0) throw std::invalid_argument("warmup_iters must be >= 0");
  for (std::size_t i = 1; i < milestones.size(); ++i)
    if (milestones[i] <= milestones[i - 1])
      throw std::invalid_argument("milestones must be strictly ascending");
  if (gamma <= 0.0 || gamma > 1.0) throw std::invalid_argument("gamma must be in (0, 1]");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (n_points < 1) throw std::invalid_argument("n_points must be >= 1");
  if (oversample_ratio < 1) throw std::invalid_argument("oversample_ratio must be >= 1");
  if (importance_fraction < 0.0 || importance_fraction > 1.0)
    throw std::invalid_argument("importance_fraction must be in [0, 1]");
  if (threads < 1) throw std::invalid_argument("threads must be >= 1");
  if (gate_warmup_iters < 0) throw std::invalid_argument("gate_warmup_iters must be >= 0");
}

AdamW::AdamW(const nn::ParamRegistry& reg, double wd,
             const std::vector<std::pair<std::string, double>>& prefix_lr_mults)
    : weight_decay(wd) {
  slots.reserve(reg.items.size());
  for (const auto& [name, t] : reg.items) {
    Slot s;
    s.m.assign(t->numel(), 0.0);
    s.v.assign(t->numel(), 0.0);
    for (const auto& [prefix, mult] : prefix_lr_mults)
      if (name.rfind(prefix, 0) == 0) {
        s.lr_mult = mult;
        break;
      }
    slots.push_back(std::move(s));
  }
}

void AdamW::step(nn::ParamRegistry& reg, double lr) {
  if (reg.items.size() != slots.size()) throw std::invalid_argument("registry/optimizer mismatch");
  ++t;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    Tensor* p = reg.items[i].second;
    if (!p->grad) throw std::runtime_error("parameter without gradient: " + reg.items[i].first);
    Slot& s = slots[i];
    double eff = lr * s.lr_mult;
    for (std::size_t j = 0; j < p->numel(); ++j) {
      double g = (*p->grad)[j];
      s.m[j] = beta1 * s.m[j] + (1.0 - beta1) * g;
      s.v[j] = beta2 * s.v[j] + (1.0 - beta2) * g * g;
      double mhat = s.m[j] / bc1;
      double vhat = s.v[j] / bc2;
      (*p->data)[j] -= eff * (mhat / (std::sqrt(vhat) + eps) + weight_decay * (*p->data)[j]);
    }
  }
}

double lr_at(const TrainConfig& cfg, long long iter, int epoch) {
  if (cfg.warmup_iters > 0 && iter < cfg.warmup_iters)
    return cfg.base_lr * static_cast<double>(iter) / static_cast<double>(cfg.warmup_iters);
  int passed = 0;
  for (int m : cfg.milestones)
    if (epoch >= m) ++passed;
  return cfg.base_lr * std::pow(cfg.gamma, passed);
}

context::ReidNet pretrain_reid(const std::vector<synth::LabeledSample>& samples,
                               const TrainConfig& cfg, int d_reid) {
  Rng rng(Rng(cfg.seed).fork(0xB0D1));
  context::ReidNet reid = context::ReidNet::init(d_reid, rng);

  // identities with at least two views form the positive pairs
  std::vector<std::vector<int>> groups;
  {
    std::vector<std::pair<int, int>> id_idx;
    for (std::size_t i = 0; i < samples.size(); ++i)
      id_idx.push_back({samples[i].identity, static_cast<int>(i)});
    std::sort(id_idx.begin(), id_idx.end());
    for (std::size_t i = 0; i < id_idx.size();) {
      std::size_t j = i;
      std::vector<int> g;
      while (j < id_idx.size() && id_idx[j].first == id_idx[i].first) g.push_back(id_idx[j++].second);
      if (g.size() >= 2) groups.push_back(std::move(g));
      i = j;
    }
  }
  if (groups.empty()) return reid;

  nn::ParamRegistry reg;
  reid.collect(reg, "reid");
  AdamW opt(reg, 0.0);

  int n_ids = static_cast<int>(std::min<std::size_t>(4, groups.size()));
  for (int it = 0; it < cfg.reid_iters; ++it) {
    // nid identities, two distinct views each
    std::vector<int> picked;
    {
      std::vector<int> gsel;
      while (static_cast<int>(gsel.size()) < n_ids) {
        int g = rng.uniform_int(static_cast<int>(groups.size()));
        if (std::find(gsel.begin(), gsel.end(), g) == gsel.end()) gsel.push_back(g);
      }
      for (int g : gsel) {
        const auto& grp = groups[static_cast<std::size_t>(g)];
        int a = rng.uniform_int(static_cast<int>(grp.size()));
        int b = rng.uniform_int(static_cast<int>(grp.size()) - 1);
        if (b >= a) ++b;
        picked.push_back(grp[static_cast<std::size_t>(a)]);
        picked.push_back(grp[static_cast<std::size_t>(b)]);
      }
    }
    int n = static_cast<int>(picked.size());
    std::vector<Tensor> rows;
    for (int idx : picked) rows.push_back(reid.embed(samples[static_cast<std::size_t>(idx)].image));
    Tensor emb = concat_rows(rows);
    Tensor sim = scale(matmul(emb, transpose(emb)), 1.0 / cfg.reid_temp);
    AttentionMask mask = AttentionMask::all_visible(n, n);
    for (int i = 0; i < n; ++i) mask.set(i, i, false);
    Tensor p = masked_softmax(sim, mask);
    // positive of 2i is 2i+1 and vice versa
    Tensor sel = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i) sel.at(static_cast<std::size_t>(i) * n + (i ^ 1)) = 1.0;
    Tensor picked_p = sum_all(mul(p, sel));  // sums the n positive probs
    Tensor loss = neg(log_t(clamp(scale(picked_p, 1.0 / n), 1e-12, 1.0)));
    nn::zero_grads(reg);
    backward(loss);
    opt.step(reg, cfg.reid_lr);
  }
  return reid;
}

std::vector<context::GalleryEntry> build_gallery(const std::vector<synth::LabeledSample>& samples,
                                                 const context::ReidNet& reid) {
  NoGradGuard ng;
  std::vector<context::GalleryEntry> gallery;
  gallery.reserve(samples.size());
  for (const auto& s : samples) {
    context::GalleryEntry e;
    e.id = s.identity;
    e.image = s.image;
    e.mask = s.mask;
    e.width = s.width;
    e.height = s.height;
    e.feature = reid.embed(s.image).view({reid.d_reid});
    gallery.push_back(std::move(e));
  }
  return gallery;
}

std::vector<context::RetrievalHit> retrieve_refs(const Tensor& query_feature,
                                                 const std::vector<context::GalleryEntry>& gallery,
                                                 int k, int exclude_index) {
  int want = exclude_index >= 0 ? k + 1 : k;
  std::vector<context::RetrievalHit> hits =
      context::retrieve(query_feature, gallery, std::min<int>(want, static_cast<int>(gallery.size())));
  std::vector<context::RetrievalHit> out;
  for (const auto& h : hits) {
    if (h.index == exclude_index) continue;
    out.push_back(h);
    if (static_cast<int>(out.size()) == k) break;
  }
  return out;
}

double calibrate_presence_threshold(const std::vector<double>& scores,
                                    const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("calibration needs matching nonempty score/label lists");
  std::vector<double> uniq = scores;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<double> cands;
  cands.push_back(uniq.front() - 1.0);
  for (std::size_t i = 1; i < uniq.size(); ++i) cands.push_back(0.5 * (uniq[i - 1] + uniq[i]));
  double best_th = cands.front(), best_score = -1.0;
  for (double th : cands) {
    long long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      bool pred = scores[i] > th;
      bool pos = labels[i] != 0;
      if (pred && pos) ++tp;
      if (pred && !pos) ++fp;
      if (!pred && pos) ++fn;
    }
    double prec = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    double rec = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    double s = std::min(prec, rec);
    if (s > best_score + 1e-15) {
      best_score = s;
      best_th = th;
    }
  }
  return best_th;
}

namespace {

std::vector<context::EncodedReference> encode_refs_for(
    const model::SavModel& m, const std::vector<context::RetrievalHit>& hits,
    const std::vector<context::GalleryEntry>& gallery) {
  std::vector<context::EncodedReference> refs;
  for (const auto& h : hits) {
    const auto& e = gallery[static_cast<std::size_t>(h.index)];
    synth::LabeledSample s;
    s.image = e.image;
    s.mask = e.mask;
    s.width = e.width;
    s.height = e.height;
    refs.push_back(model::encode_reference(m, s));
  }
  return refs;
}

std::vector<int> gt_labels(const synth::LabeledSample& s) {
  std::vector<int> out(s.mask.size());
  for (std::size_t i = 0; i < s.mask.size(); ++i) out[i] = static_cast<int>(s.mask[i]) - 1;
  return out;
}

struct GtBox {
  roi::RoiBox box;
};

std::vector<roi::RoiBox> gt_boxes(const synth::LabeledSample& s, int min_area) {
  std::vector<roi::RoiBox> boxes;
  for (int c = 0; c < kNumClasses; ++c) {
    int r0 = s.height, c0 = s.width, r1 = -1, c1 = -1, area = 0;
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x)
        if (s.label_at(y, x) == c) {
          ++area;
          r0 = std::min(r0, y);
          r1 = std::max(r1, y);
          c0 = std::min(c0, x);
          c1 = std::max(c1, x);
        }
    if (area >= min_area) boxes.push_back({c, r0, c0, r1, c1, area});
  }
  return boxes;
}

Tensor mean_of(const std::vector<Tensor>& parts) {
  Tensor acc = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return scale(acc, 1.0 / static_cast<double>(parts.size()));
}

// single-sample objective: point-sampled pixel loss on every class, overlap
// loss on present classes, presence classification, and (when enabled)
// region classification against the visual prototypes
// dot-map supervision shared by the gate warmup and the joint loss: weighted
// bce of sigmoid(F rows . adapted prototypes) against cell occupancy (cell
// label = any pixel of the class in the cell). Occupied cells are a small
// minority, so positives are upweighted; otherwise the map settles at the
// per-class prior and the presence gate never separates.
constexpr double kGateLossWeight = 5.0;
constexpr double kGatePosWeight = 10.0;

Tensor gate_loss(const Tensor& f_rows, const Tensor& adapted_p, int fh, int fw,
                 const synth::LabeledSample& s) {
  Tensor dots = matmul(f_rows, transpose(adapted_p));  // (fh*fw, n_cls)
  int sy = s.height / fh, sx = s.width / fw;
  std::vector<double> y(static_cast<std::size_t>(fh * fw * kNumClasses), 0.0);
  for (int py = 0; py < s.height; ++py)
    for (int px = 0; px < s.width; ++px) {
      int lbl = static_cast<int>(s.mask[static_cast<std::size_t>(py) * s.width + px]) - 1;
      if (lbl < 0) continue;
      std::size_t cell = static_cast<std::size_t>((py / sy) * fw + px / sx);
      y[cell * kNumClasses + static_cast<std::size_t>(lbl)] = 1.0;
    }
  Tensor yt = Tensor::from({fh * fw, kNumClasses}, y);
  Tensor sg = clamp(sigmoid(dots), 1e-7, 1.0 - 1e-7);
  return neg(mean_all(add(scale(mul(yt, log_t(sg)), kGatePosWeight),
                          mul(add_scalar(neg(yt), 1.0), log_t(add_scalar(neg(sg), 1.0))))));
}

Tensor sample_loss(const model::SavModel& m, const synth::LabeledSample& s,
                   const PartOntology& onto, const std::vector<context::EncodedReference>& refs,
                   const TrainConfig& tcfg, Rng& rng) {
  std::set<ClassId> present = s.present_classes();
  std::vector<bool> flags(kNumClasses);
  std::vector<double> presence01(kNumClasses, 0.0);
  for (int c = 0; c < kNumClasses; ++c)
    if (present.count(c)) {
      flags[static_cast<std::size_t>(c)] = true;
      presence01[static_cast<std::size_t>(c)] = 1.0;
    }
  // flag-corruption augmentation: the inference gate over-flags rather than
  // misses, so train the decoder and presence head to reject spurious flags
  // (mask target stays empty, presence label stays 0)
  for (int c = 0; c < kNumClasses; ++c)
    if (!flags[static_cast<std::size_t>(c)] && rng.uniform() < 0.25)
      flags[static_cast<std::size_t>(c)] = true;

  model::ForwardOut out = model::forward(m, s.image, onto, flags, refs);
  int out_size = m.cfg.dec.out_size;
  int n_pix = out_size * out_size;
  if (s.width != out_size || s.height != out_size)
    throw std::invalid_argument("sample resolution does not match the decoder output");
  Tensor flat = out.dec.masks.logits.view({kNumClasses, n_pix});

  std::vector<Tensor> bces, dices;
  for (int c = 0; c < kNumClasses; ++c) {
    Tensor row = slice_rows(flat, c, 1);
    std::vector<double> raw(static_cast<std::size_t>(n_pix));
    std::vector<double> y(static_cast<std::size_t>(n_pix), 0.0);
    for (int i = 0; i < n_pix; ++i) {
      raw[static_cast<std::size_t>(i)] = row.at(static_cast<std::size_t>(i));
      if (static_cast<int>(s.mask[static_cast<std::size_t>(i)]) - 1 == c)
        y[static_cast<std::size_t>(i)] = 1.0;
    }
    std::vector<int> idx = loss::sample_uncertain_points(raw, tcfg.n_points, tcfg.oversample_ratio,
                                                         tcfg.importance_fraction, rng);
    Tensor col = transpose(row);  // (n_pix, 1)
    Tensor pts = sigmoid(gather_rows(col, idx));
    std::vector<double> ypts;
    ypts.reserve(idx.size());
    for (int i : idx) ypts.push_back(y[static_cast<std::size_t>(i)]);
    bces.push_back(loss::bce_loss(pts, Tensor::from({static_cast<int>(idx.size()), 1}, ypts)));
    if (present.count(c))
      dices.push_back(loss::dice_loss(sigmoid(row), Tensor::from({1, n_pix}, y)));
  }

  Tensor cls = loss::cls_loss(out.presence_logits, presence01, loss::LossWeights().w_cls);

  // presence calibration signal: the inference path flags classes by the max
  // feature/prototype dot, so train the dot map as a coarse per-class
  // segmentation (cell label = any pixel of the class in the cell)
  cls = add(cls, scale(gate_loss(out.f_rows, out.adapted.p, out.f.dim(1), out.f.dim(2), s),
                       kGateLossWeight));

  if (m.cfg.ram && out.has_pv) {
    std::vector<roi::RoiBox> boxes = gt_boxes(s, 8);
    if (!boxes.empty()) {
      backbone::PyramidFeatures pyr = m.bb.pyramid(s.image);
      std::vector<Tensor> ces;
      for (const auto& box : boxes) {
        Tensor rows = roi_align(pyr, box, m.ram.out_size, s.width);
        Tensor logits = m.ram.refine_logits(rows, out.pv);
        Tensor p = softmax_rows(logits);
        Tensor sel = Tensor::zeros({1, kNumClasses});
        sel.at(static_cast<std::size_t>(box.cls)) = 1.0;
        ces.push_back(neg(log_t(clamp(sum_all(mul(p, sel)), 1e-12, 1.0))));
      }
      cls = add(cls, mean_of(ces));
    }
  }

  Tensor dice = dices.empty() ? Tensor::scalar(0.0) : mean_of(dices);
  return loss::total_loss(mean_of(bces), dice, cls);
}

struct Worker {
  model::SavModel shadow;
  nn::ParamRegistry reg;
};

}  // namespace

eval::ConfusionAccumulator evaluate(const model::SavModel& m, const context::ReidNet& reid,
                                    const std::vector<context::GalleryEntry>& gallery,
                                    const std::vector<synth::LabeledSample>& samples,
                                    const PartOntology& ontology) {
  NoGradGuard ng;
  eval::ConfusionAccumulator acc;
  for (const auto& s : samples) {
    std::vector<context::EncodedReference> refs;
    if (m.cfg.vp && !gallery.empty()) {
      Tensor qf = reid.embed(s.image).view({reid.d_reid});
      refs = encode_refs_for(m, retrieve_refs(qf, gallery, m.cfg.refs, -1), gallery);
    }
    model::Prediction pred = model::predict(m, s.image, ontology, refs);
    acc.accumulate(pred.labels, gt_labels(s));
  }
  return acc;
}

std::vector<synth::LabeledSample> load_split(const std::filesystem::path& data_dir,
                                             const std::vector<synth::ManifestEntry>& entries) {
  std::vector<synth::LabeledSample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(synth::load_sample(data_dir, e));
  return out;
}

namespace {

// presence scores over a sample set for threshold calibration
void collect_presence_scores(const model::SavModel& m, const PartOntology& onto,
                             const std::vector<synth::LabeledSample>& samples,
                             std::vector<double>& scores, std::vector<std::uint8_t>& labels) {
  NoGradGuard ng;
  scores.clear();
  labels.clear();
  Tensor pt = m.prototypes(onto);
  for (const auto& s : samples) {
    Tensor f = m.bb.encode_image(s.image);
    fusion::PrototypeSet adapted = m.cdt.forward(f, fusion::PrototypeSet::textual(pt));
    std::vector<double> sc = fusion::presence_scores(backbone::feature_rows(f), adapted.p);
    std::set<ClassId> present = s.present_classes();
    for (int c = 0; c < kNumClasses; ++c) {
      scores.push_back(sc[static_cast<std::size_t>(c)]);
      labels.push_back(present.count(c) ? 1 : 0);
    }
  }
}

std::vector<std::vector<double>> snapshot_params(const nn::ParamRegistry& reg) {
  std::vector<std::vector<double>> snap;
  snap.reserve(reg.items.size());
  for (const auto& [name, t] : reg.items) snap.push_back(*t->data);
  return snap;
}

void restore_params(nn::ParamRegistry& reg, const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < reg.items.size(); ++i) *reg.items[i].second->data = snap[i];
}

}  // namespace

TrainOutcome train(const model::SavConfig& mcfg, const train::TrainConfig& tcfg,
                   const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                   const std::string& config_json) {
  tcfg.validate();
  mcfg.validate();
  std::filesystem::create_directories(out_dir);

  synth::CorpusManifest manifest = synth::read_manifest(data_dir);
  std::vector<synth::LabeledSample> train_set = load_split(data_dir, manifest.train);
  std::vector<synth::LabeledSample> val_set = load_split(data_dir, manifest.val);
  if (train_set.empty()) throw std::runtime_error("empty training split");

  std::vector<std::set<ClassId>> presences;
  for (const auto& e : manifest.train) presences.push_back(e.present);
  PartOntology onto = compute_cooccurrence(build_adjacency(), presences);

  Rng rng(tcfg.seed);
  model::SavModel m = model::SavModel::init(mcfg, rng);
  context::ReidNet reid = mcfg.vp ? pretrain_reid(train_set, tcfg, mcfg.d_reid)
                                  : context::ReidNet::init(mcfg.d_reid, rng);

  std::vector<context::GalleryEntry> gallery;
  std::vector<std::vector<context::RetrievalHit>> ref_hits(train_set.size());
  if (mcfg.vp) {
    gallery = build_gallery(train_set, reid);
    for (std::size_t i = 0; i < train_set.size(); ++i)
      ref_hits[i] = retrieve_refs(gallery[i].feature, gallery, mcfg.refs, static_cast<int>(i));
  }

  nn::ParamRegistry reg;
  m.collect(reg);
  AdamW opt(reg, tcfg.weight_decay, {{"bb.", tcfg.backbone_lr_mult}});

  // per-batch-slot shadows: values shared with the main model, private grad
  // buffers, so the batch gradient is a fixed-order sum no matter how many
  // threads computed it
  std::vector<Worker> workers(static_cast<std::size_t>(tcfg.batch));
  for (auto& w : workers) {
    w.shadow = m;
    w.shadow.collect(w.reg);
    nn::reattach_fresh_grads(w.reg);
  }

  auto save_all = [&](const std::vector<double>& thresholds) {
    m.cfg.presence_thresholds = thresholds;
    nn::ParamRegistry full;
    m.collect(full);
    reid.collect(full, "reid");
    nlohmann::json cj = config_json.empty() ? nlohmann::json::object()
                                            : nlohmann::json::parse(config_json);
    cj["model"]["presence_thresholds"] = thresholds;
    save_checkpoint(out_dir, full, cj.dump(2));
    std::ofstream of(out_dir / "ontology.txt");
    of << serialize_ontology(onto);
  };

  // stage 1: presence-gate warmup. Only the dot map is trained (backbone,
  // graph encoder, adaptation), no decoder forward, no weight decay; a short
  // linear ramp then constant base lr. Runs on the same worker shadows with
  // the fixed-order gradient sum, so it is thread-count invariant.
  if (tcfg.gate_warmup_iters > 0) {
    std::vector<std::vector<double>> pre_warmup = snapshot_params(reg);
    AdamW gate_opt(reg, 0.0);
    for (int it = 0; it < tcfg.gate_warmup_iters; ++it) {
      Rng brng(Rng(tcfg.seed).fork(0x6A7E0000u + static_cast<std::uint64_t>(it)));
      std::vector<int> picks(static_cast<std::size_t>(tcfg.batch));
      for (int& p : picks) p = brng.uniform_int(static_cast<int>(train_set.size()));
      std::vector<std::exception_ptr> errs(picks.size());
      auto run_slot = [&](std::size_t b) {
        try {
          Worker& w = workers[b];
          nn::zero_grads(w.reg);
          const synth::LabeledSample& s = train_set[static_cast<std::size_t>(picks[b])];
          Tensor f = w.shadow.bb.encode_image(s.image);
          fusion::PrototypeSet ad = w.shadow.cdt.forward(
              f, fusion::PrototypeSet::textual(w.shadow.prototypes(onto)));
          backward(gate_loss(backbone::feature_rows(f), ad.p, f.dim(1), f.dim(2), s));
        } catch (...) {
          errs[b] = std::current_exception();
        }
      };
      int nthreads = std::min<int>(tcfg.threads, static_cast<int>(picks.size()));
      if (nthreads <= 1) {
        for (std::size_t b = 0; b < picks.size(); ++b) run_slot(b);
      } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nthreads; ++t)
          pool.emplace_back([&, t]() {
            for (std::size_t b = static_cast<std::size_t>(t); b < picks.size();
                 b += static_cast<std::size_t>(nthreads))
              run_slot(b);
          });
        for (auto& th : pool) th.join();
      }
      for (auto& e : errs)
        if (e) std::rethrow_exception(e);
      nn::zero_grads(reg);
      for (std::size_t b = 0; b < picks.size(); ++b)
        for (std::size_t i = 0; i < reg.items.size(); ++i) {
          const auto& src = *workers[b].reg.items[i].second->grad;
          auto& dst = *reg.items[i].second->grad;
          for (std::size_t j = 0; j < dst.size(); ++j)
            dst[j] += src[j] / static_cast<double>(picks.size());
        }
      double ramp = std::min(1.0, (it + 1) / 50.0);
      gate_opt.step(reg, tcfg.base_lr * ramp);
    }
    double param_sum = 0.0;
    for (const auto& [name, t] : reg.items)
      for (std::size_t j = 0; j < t->numel(); ++j) param_sum += (*t->data)[j];
    if (!std::isfinite(param_sum)) {
      restore_params(reg, pre_warmup);
      save_all(m.cfg.presence_thresholds);
      throw std::runtime_error("non-finite parameters after gate warmup; pre-warmup checkpoint saved");
    }
  }

  std::ofstream log(out_dir / "metrics.jsonl");
  std::vector<std::vector<double>> last_good = snapshot_params(reg);
  TrainOutcome outcome;
  long long iter = 0;

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::vector<int> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng shuffle_rng(Rng(tcfg.seed).fork(1000 + static_cast<std::uint64_t>(epoch)));
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(i + 1))]);

    double epoch_loss = 0.0;
    int epoch_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tcfg.batch)) {
      std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(tcfg.batch),
                                                order.size() - start);
      std::vector<double> slot_loss(count, 0.0);
      std::vector<std::exception_ptr> errs(count);

      auto run_slot = [&](std::size_t b) {
        try {
          int si = order[start + b];
          const synth::LabeledSample& s = train_set[static_cast<std::size_t>(si)];
          Worker& w = workers[b];
          nn::zero_grads(w.reg);
          std::vector<context::EncodedReference> refs;
          if (mcfg.vp)
            refs = encode_refs_for(w.shadow, ref_hits[static_cast<std::size_t>(si)], gallery);
          Rng prng(Rng(tcfg.seed).fork(0x9E3779B9u + static_cast<std::uint64_t>(epoch) * 1000003u +
                                       static_cast<std::uint64_t>(si)));
          Tensor l = sample_loss(w.shadow, s, onto, refs, tcfg, prng);
          slot_loss[b] = l.value();
          backward(l);
        } catch (...) {
          errs[b] = std::current_exception();
        }
      };

      int nthreads = std::min<int>(tcfg.threads, static_cast<int>(count));
      if (nthreads <= 1) {
        for (std::size_t b = 0; b < count; ++b) run_slot(b);
      } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nthreads; ++t)
          pool.emplace_back([&, t]() {
            for (std::size_t b = static_cast<std::size_t>(t); b < count;
                 b += static_cast<std::size_t>(nthreads))
              run_slot(b);
          });
        for (auto& th : pool) th.join();
      }
      for (auto& e : errs)
        if (e) std::rethrow_exception(e);

      double batch_loss = 0.0;
      for (double l : slot_loss) batch_loss += l;
      batch_loss /= static_cast<double>(count);
      // the clamped losses stay finite even when weights blow up, so the
      // parameters themselves are part of the health check
      double param_sum = 0.0;
      for (const auto& [name, t] : reg.items)
        for (std::size_t j = 0; j < t->numel(); ++j) param_sum += (*t->data)[j];
      if (!std::isfinite(batch_loss) || !std::isfinite(param_sum)) {
        restore_params(reg, last_good);
        save_all(m.cfg.presence_thresholds);
        throw std::runtime_error("non-finite loss at iteration " + std::to_string(iter) +
                                 "; last good checkpoint saved");
      }

      // fixed-order gradient sum over batch slots, then one optimizer step
      nn::zero_grads(reg);
      for (std::size_t b = 0; b < count; ++b)
        for (std::size_t i = 0; i < reg.items.size(); ++i) {
          const auto& src = *workers[b].reg.items[i].second->grad;
          auto& dst = *reg.items[i].second->grad;
          for (std::size_t j = 0; j < dst.size(); ++j)
            dst[j] += src[j] / static_cast<double>(count);
        }
      opt.step(reg, lr_at(tcfg, iter, epoch));
      ++iter;
      epoch_loss += batch_loss;
      ++epoch_batches;
    }
    last_good = snapshot_params(reg);

    // per-epoch validation with a freshly calibrated presence gate
    double val_miou = -1.0, val_macc = -1.0;
    if (!val_set.empty()) {
      std::vector<double> scores;
      std::vector<std::uint8_t> labels;
      collect_presence_scores(m, onto, val_set, scores, labels);
      // one threshold per class: the dot scales differ wildly across classes
      for (int c = 0; c < kNumClasses; ++c) {
        std::vector<double> sc;
        std::vector<std::uint8_t> lb;
        for (std::size_t i = static_cast<std::size_t>(c); i < scores.size();
             i += static_cast<std::size_t>(kNumClasses)) {
          sc.push_back(scores[i]);
          lb.push_back(labels[i]);
        }
        m.cfg.presence_thresholds[static_cast<std::size_t>(c)] =
            calibrate_presence_threshold(sc, lb);
      }
      eval::ConfusionAccumulator acc = evaluate(m, reid, gallery, val_set, onto);
      try {
        val_miou = eval::miou(acc);
        val_macc = eval::macc(acc);
      } catch (const std::exception&) {
      }
    }
    nlohmann::json rec = {{"epoch", epoch},
                          {"iter", iter},
                          {"train_loss", epoch_loss / std::max(1, epoch_batches)},
                          {"lr", lr_at(tcfg, iter, epoch)},
                          {"val_miou", val_miou},
                          {"val_macc", val_macc}};
    log << rec.dump() << "\n";
    log.flush();
    outcome.val_miou = val_miou;
    outcome.val_macc = val_macc;
  }

  save_all(m.cfg.presence_thresholds);
  outcome.model = m;
  outcome.reid = reid;
  outcome.ontology = onto;
  outcome.iters = iter;
  return outcome;
}

eval::RunMetrics train_and_score(const model::SavConfig& mcfg, const TrainConfig& tcfg,
                                 const std::filesystem::path& data_dir,
                                 const std::filesystem::path& out_dir) {
  cfg::RunConfig rc;
  rc.model = mcfg;
  rc.train = tcfg;
  TrainOutcome out = train(mcfg, tcfg, data_dir, out_dir, cfg::to_json(rc));
  synth::CorpusManifest manifest = synth::read_manifest(data_dir);
  std::vector<synth::LabeledSample> test_set = load_split(data_dir, manifest.test);
  std::vector<context::GalleryEntry> gallery;
  if (mcfg.vp) {
    std::vector<synth::LabeledSample> train_set = load_split(data_dir, manifest.train);
    gallery = build_gallery(train_set, out.reid);
  }
  eval::ConfusionAccumulator acc = evaluate(out.model, out.reid, gallery, test_set, out.ontology);
  eval::RunMetrics m;
  m.miou = eval::miou(acc);
  m.macc = eval::macc(acc);
  m.available = true;
  return m;
}

eval::AblationReport run_ablation(const model::SavConfig& base_model, const TrainConfig& base_train,
                                  const std::filesystem::path& data_dir,
                                  const std::filesystem::path& work_dir) {
  struct Row {
    std::string name;
    bool gtp, vp, ram;
  };
  const std::vector<Row> rows = {{"base", false, false, false},
                                 {"+gtp", true, false, false},
                                 {"+gtp+ram", true, false, true},
                                 {"+vp+ram", false, true, true},
                                 {"full", true, true, true}};
  eval::AblationReport report;
  eval::RunMetrics full_metrics;
  auto run_cfg = [&](const model::SavConfig& mc, const std::string& tag) {
    return train_and_score(mc, base_train, data_dir, work_dir / tag);
  };
  for (const auto& r : rows) {
    model::SavConfig mc = base_model;
    mc.gtp = r.gtp;
    mc.vp = r.vp;
    mc.ram = r.ram;
    std::string tag = r.name;
    for (auto& ch : tag)
      if (ch == '+') ch = '_';
    eval::RunMetrics m = run_cfg(mc, tag);
    if (r.name == "full") full_metrics = m;
    report.components.push_back({r.name, m});
  }
  for (int depth : {3, 4, 5}) {
    model::SavConfig mc = base_model;
    mc.gtp = mc.vp = mc.ram = true;
    mc.gat.layers = depth;
    mc.gat.heads = cfg::gat_heads_for_depth(depth);
    eval::RunMetrics m = depth == base_model.gat.layers && base_model.gat.heads == mc.gat.heads
                             ? full_metrics
                             : run_cfg(mc, "depth_" + std::to_string(depth));
    report.gat_depths.push_back({depth, m});
  }
  for (int k = 1; k <= 4; ++k) {
    model::SavConfig mc = base_model;
    mc.gtp = mc.vp = mc.ram = true;
    mc.refs = k;
    eval::RunMetrics m = k == base_model.refs ? full_metrics : run_cfg(mc, "refs_" + std::to_string(k));
    report.ref_counts.push_back({k, m});
  }
  return report;
}

LoadedModel load_model(const std::filesystem::path& ckpt_dir) {
  LoadedModel lm;
  lm.config_json = read_checkpoint_config(ckpt_dir);
  cfg::RunConfig rc = cfg::from_json(lm.config_json);
  Rng rng(rc.train.seed);
  lm.model = model::SavModel::init(rc.model, rng);
  lm.reid = context::ReidNet::init(rc.model.d_reid, rng);
  nn::ParamRegistry reg;
  lm.model.collect(reg);
  lm.reid.collect(reg, "reid");
  load_checkpoint(ckpt_dir, reg);
  std::ifstream in(ckpt_dir / "ontology.txt");
  if (!in) throw std::runtime_error("checkpoint is missing its ontology file");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  lm.ontology = parse_ontology(text);
  return lm;
}

}  // namespace partseg::train
