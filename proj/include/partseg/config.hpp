#pragma once

#include <string>

#include "partseg/model.hpp"
#include "partseg/training.hpp"

namespace partseg::cfg {

// resolved experiment configuration: model dims + ablation flags + training
// schedule + data generation settings, embedded verbatim in every artifact
struct RunConfig {
  model::SavConfig model;
  train::TrainConfig train;
  int data_count = 640;
  std::uint64_t data_seed = 7;
  std::string view_mix = "all";
  double train_frac = 0.75, val_frac = 0.1;
};

// standard attention-head layout for a given graph encoder depth: four heads
// on the first two layers, single heads after
std::vector<int> gat_heads_for_depth(int layers);

std::string to_json(const RunConfig& c);
// rejects unknown keys at any level; missing keys keep defaults
RunConfig from_json(const std::string& text);
RunConfig load_file(const std::string& path);

}  // namespace partseg::cfg
