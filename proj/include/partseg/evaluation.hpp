#pragma once

#include <map>
#include <string>
#include <vector>

#include "partseg/ontology.hpp"

namespace partseg::eval {

struct ConfusionAccumulator {
  std::vector<long long> tp, fp, fn;  // one entry per class

  ConfusionAccumulator()
      : tp(kNumClasses, 0), fp(kNumClasses, 0), fn(kNumClasses, 0) {}

  // label maps with -1 (or any negative) = background
  void accumulate(const std::vector<int>& pred, const std::vector<int>& gt);
  void merge(const ConfusionAccumulator& other);
  bool evaluable(int cls) const {
    return tp[static_cast<std::size_t>(cls)] + fp[static_cast<std::size_t>(cls)] +
               fn[static_cast<std::size_t>(cls)] >
           0;
  }
};

// percent, averaged over classes present in gt or pred; throws when no class
// is evaluable
double miou(const ConfusionAccumulator& acc);
double macc(const ConfusionAccumulator& acc);
double iou_class(const ConfusionAccumulator& acc, int cls);  // NaN when not evaluable

std::string format_percent(double v);  // two decimals, paper-table style

struct RunMetrics {
  double miou = 0.0, macc = 0.0;
  bool available = false;
};

struct AblationReport {
  // component rows keyed by configuration name, in canonical order
  std::vector<std::pair<std::string, RunMetrics>> components;
  std::vector<std::pair<int, RunMetrics>> gat_depths;  // {3,4,5}
  std::vector<std::pair<int, RunMetrics>> ref_counts;  // k sweep, ascending

  std::string to_text() const;
  std::string to_json() const;
};

}  // namespace partseg::eval
