#include "partseg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace partseg::cfg {

using json = nlohmann::json;

std::vector<int> gat_heads_for_depth(int layers) {
  if (layers < 1) throw std::invalid_argument("graph encoder needs at least one layer");
  std::vector<int> heads(static_cast<std::size_t>(layers), 1);
  for (std::size_t i = 0; i < heads.size() && i < 2; ++i) heads[i] = 4;
  return heads;
}

namespace {

void check_keys(const json& j, const std::string& section, const std::set<std::string>& known) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw std::invalid_argument("unknown config key '" + it.key() + "' in " + section);
}

}  // namespace

std::string to_json(const RunConfig& c) {
  json j;
  j["model"] = {{"d_model", c.model.bb.d_model},
                {"d_text", c.model.d_text},
                {"d_mid", c.model.d_mid},
                {"heads", c.model.heads},
                {"d_reid", c.model.d_reid},
                {"gat_layers", c.model.gat.layers},
                {"gat_heads", c.model.gat.heads},
                {"gat_hidden", c.model.gat.d_hidden},
                {"gtp", c.model.gtp},
                {"vp", c.model.vp},
                {"ram", c.model.ram},
                {"refs", c.model.refs},
                {"label_seed", c.model.label_seed},
                {"presence_thresholds", c.model.presence_thresholds},
                {"out_size", c.model.dec.out_size}};
  j["train"] = {{"base_lr", c.train.base_lr},
                {"weight_decay", c.train.weight_decay},
                {"batch", c.train.batch},
                {"warmup_iters", c.train.warmup_iters},
                {"milestones", c.train.milestones},
                {"gamma", c.train.gamma},
                {"backbone_lr_mult", c.train.backbone_lr_mult},
                {"epochs", c.train.epochs},
                {"seed", c.train.seed},
                {"n_points", c.train.n_points},
                {"oversample_ratio", c.train.oversample_ratio},
                {"importance_fraction", c.train.importance_fraction},
                {"threads", c.train.threads},
                {"reid_iters", c.train.reid_iters},
                {"gate_warmup_iters", c.train.gate_warmup_iters},
                {"reid_lr", c.train.reid_lr},
                {"reid_temp", c.train.reid_temp}};
  j["data"] = {{"count", c.data_count},
               {"seed", c.data_seed},
               {"view_mix", c.view_mix},
               {"train_frac", c.train_frac},
               {"val_frac", c.val_frac}};
  return j.dump(2);
}

RunConfig from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("config parse error: ") + e.what());
  }
  RunConfig c;
  check_keys(j, "config root", {"model", "train", "data"});
  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m, "model", {"d_model", "d_text", "d_mid", "heads", "d_reid", "gat_layers",
                            "gat_heads", "gat_hidden", "gtp", "vp", "ram", "refs", "label_seed",
                            "presence_thresholds", "out_size"});
    if (m.contains("d_model")) {
      int d = m["d_model"];
      c.model.bb.d_model = d;
      c.model.bb.d_proto = d;
      c.model.gat.d_proto = d;
      c.model.dec.d_model = d;
    }
    if (m.contains("d_text")) c.model.d_text = m["d_text"];
    if (m.contains("d_mid")) c.model.d_mid = m["d_mid"];
    if (m.contains("heads")) c.model.heads = m["heads"];
    if (m.contains("d_reid")) c.model.d_reid = m["d_reid"];
    if (m.contains("gat_layers")) {
      c.model.gat.layers = m["gat_layers"];
      c.model.gat.heads = gat_heads_for_depth(c.model.gat.layers);
    }
    if (m.contains("gat_heads")) c.model.gat.heads = m["gat_heads"].get<std::vector<int>>();
    if (m.contains("gat_hidden")) c.model.gat.d_hidden = m["gat_hidden"];
    if (m.contains("gtp")) c.model.gtp = m["gtp"];
    if (m.contains("vp")) c.model.vp = m["vp"];
    if (m.contains("ram")) c.model.ram = m["ram"];
    if (m.contains("refs")) c.model.refs = m["refs"];
    if (m.contains("label_seed")) c.model.label_seed = m["label_seed"];
    if (m.contains("presence_thresholds")) {
      c.model.presence_thresholds = m["presence_thresholds"].get<std::vector<double>>();
      if (c.model.presence_thresholds.size() != static_cast<std::size_t>(kNumClasses))
        throw std::invalid_argument("presence_thresholds must have one entry per class");
    }
    if (m.contains("out_size")) c.model.dec.out_size = m["out_size"];
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, "train",
               {"base_lr", "weight_decay", "batch", "warmup_iters", "milestones", "gamma",
                "backbone_lr_mult", "epochs", "seed", "n_points", "oversample_ratio",
                "importance_fraction", "threads", "reid_iters", "reid_lr", "reid_temp",
                "gate_warmup_iters"});
    if (t.contains("base_lr")) c.train.base_lr = t["base_lr"];
    if (t.contains("weight_decay")) c.train.weight_decay = t["weight_decay"];
    if (t.contains("batch")) c.train.batch = t["batch"];
    if (t.contains("warmup_iters")) c.train.warmup_iters = t["warmup_iters"];
    if (t.contains("milestones")) c.train.milestones = t["milestones"].get<std::vector<int>>();
    if (t.contains("gamma")) c.train.gamma = t["gamma"];
    if (t.contains("backbone_lr_mult")) c.train.backbone_lr_mult = t["backbone_lr_mult"];
    if (t.contains("epochs")) c.train.epochs = t["epochs"];
    if (t.contains("seed")) c.train.seed = t["seed"];
    if (t.contains("n_points")) c.train.n_points = t["n_points"];
    if (t.contains("oversample_ratio")) c.train.oversample_ratio = t["oversample_ratio"];
    if (t.contains("importance_fraction")) c.train.importance_fraction = t["importance_fraction"];
    if (t.contains("threads")) c.train.threads = t["threads"];
    if (t.contains("reid_iters")) c.train.reid_iters = t["reid_iters"];
    if (t.contains("gate_warmup_iters")) c.train.gate_warmup_iters = t["gate_warmup_iters"];
    if (t.contains("reid_lr")) c.train.reid_lr = t["reid_lr"];
    if (t.contains("reid_temp")) c.train.reid_temp = t["reid_temp"];
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    check_keys(d, "data", {"count", "seed", "view_mix", "train_frac", "val_frac"});
    if (d.contains("count")) c.data_count = d["count"];
    if (d.contains("seed")) c.data_seed = d["seed"];
    if (d.contains("view_mix")) c.view_mix = d["view_mix"];
    if (d.contains("train_frac")) c.train_frac = d["train_frac"];
    if (d.contains("val_frac")) c.val_frac = d["val_frac"];
  }
  return c;
}

RunConfig load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

}  // namespace partseg::cfg
