#include "partseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "json.hpp"

namespace partseg::eval {

void ConfusionAccumulator::accumulate(const std::vector<int>& pred, const std::vector<int>& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("confusion maps differ in size");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    int p = pred[i], g = gt[i];
    if (p == g) {
      if (p >= 0) ++tp[static_cast<std::size_t>(p)];
      continue;
    }
    if (p >= 0) ++fp[static_cast<std::size_t>(p)];
    if (g >= 0) ++fn[static_cast<std::size_t>(g)];
  }
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
  for (int c = 0; c < kNumClasses; ++c) {
    tp[static_cast<std::size_t>(c)] += other.tp[static_cast<std::size_t>(c)];
    fp[static_cast<std::size_t>(c)] += other.fp[static_cast<std::size_t>(c)];
    fn[static_cast<std::size_t>(c)] += other.fn[static_cast<std::size_t>(c)];
  }
}

double iou_class(const ConfusionAccumulator& acc, int cls) {
  auto c = static_cast<std::size_t>(cls);
  long long denom = acc.tp[c] + acc.fp[c] + acc.fn[c];
  if (denom == 0) return std::nan("");
  return 100.0 * static_cast<double>(acc.tp[c]) / static_cast<double>(denom);
}

namespace {
double class_mean(const ConfusionAccumulator& acc, bool accuracy) {
  double sum = 0;
  int n = 0;
  for (int cls = 0; cls < kNumClasses; ++cls) {
    auto c = static_cast<std::size_t>(cls);
    long long denom = accuracy ? acc.tp[c] + acc.fn[c] : acc.tp[c] + acc.fp[c] + acc.fn[c];
    if (!acc.evaluable(cls)) continue;
    // a class seen only in predictions still counts against mAcc as 0/0-free:
    // with TP+FN == 0 but FP > 0 its accuracy is undefined; score it 0
    double v = denom == 0 ? 0.0 : static_cast<double>(acc.tp[c]) / static_cast<double>(denom);
    sum += v;
    ++n;
  }
  if (n == 0) throw std::runtime_error("no evaluable class in the accumulator");
  return 100.0 * sum / n;
}
}  // namespace

double miou(const ConfusionAccumulator& acc) { return class_mean(acc, false); }
double macc(const ConfusionAccumulator& acc) { return class_mean(acc, true); }

std::string format_percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

namespace {
std::string metrics_cells(const RunMetrics& m) {
  if (!m.available) return "   (missing run)";
  return "  " + format_percent(m.miou) + "  " + format_percent(m.macc);
}
}  // namespace

std::string AblationReport::to_text() const {
  std::string out;
  out += "configuration          mIoU    mAcc\n";
  for (const auto& [name, m] : components) {
    char line[96];
    std::snprintf(line, sizeof(line), "%-20s%s\n", name.c_str(), metrics_cells(m).c_str());
    out += line;
  }
  out += "\ngraph encoder depth    mIoU    mAcc\n";
  for (const auto& [depth, m] : gat_depths) {
    char line[96];
    std::snprintf(line, sizeof(line), "%-20d%s\n", depth, metrics_cells(m).c_str());
    out += line;
  }
  out += "\nreference count k      mIoU    mAcc\n";
  for (const auto& [k, m] : ref_counts) {
    char line[96];
    std::snprintf(line, sizeof(line), "%-20d%s\n", k, metrics_cells(m).c_str());
    out += line;
  }
  return out;
}

std::string AblationReport::to_json() const {
  nlohmann::json j;
  auto metrics_json = [](const RunMetrics& m) {
    nlohmann::json e;
    if (m.available) {
      e["miou"] = std::stod(format_percent(m.miou));
      e["macc"] = std::stod(format_percent(m.macc));
    } else {
      e["note"] = "missing run";
    }
    return e;
  };
  for (const auto& [name, m] : components) j["components"][name] = metrics_json(m);
  for (const auto& [depth, m] : gat_depths)
    j["gat_depth"][std::to_string(depth)] = metrics_json(m);
  for (const auto& [k, m] : ref_counts) j["ref_count"][std::to_string(k)] = metrics_json(m);
  return j.dump(2);
}

}  // namespace partseg::eval
