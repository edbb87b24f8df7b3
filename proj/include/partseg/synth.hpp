#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "partseg/ontology.hpp"
#include "partseg/tensor.hpp"

namespace partseg::synth {

enum class Viewpoint {
  kLeft = 0,
  kRight,
  kFront,
  kBack,
  kFrontLeft,
  kFrontRight,
  kBackLeft,
  kBackRight,
};
constexpr int kNumViewpoints = 8;

const char* viewpoint_name(Viewpoint v);
Viewpoint viewpoint_from_name(const std::string& name);

// classes that can appear in a rendered sample of the given viewpoint
std::set<ClassId> visible_classes(Viewpoint v);

struct VehicleSpec {
  int identity = 0;        // archetype/color/proportions key
  Viewpoint viewpoint = Viewpoint::kLeft;
  std::uint64_t jitter_seed = 0;
  int size = 64;
};

struct LabeledSample {
  Tensor image;                    // (3,H,W) in [0,1]
  std::vector<std::uint8_t> mask;  // H*W label map, 0 = background, 1..13 = class+1
  int width = 0, height = 0;
  int identity = 0;
  Viewpoint viewpoint = Viewpoint::kLeft;

  std::set<ClassId> present_classes() const;
  ClassId label_at(int y, int x) const {  // -1 = background
    return static_cast<ClassId>(mask[static_cast<std::size_t>(y) * width + x]) - 1;
  }
};

// Deterministic hard-edged render; masks are pixel-exact.
LabeledSample generate(const VehicleSpec& spec);

struct ManifestEntry {
  std::string image_path, mask_path;
  int identity = 0;
  std::string viewpoint;
  std::set<ClassId> present;
};

struct CorpusManifest {
  std::vector<ManifestEntry> train, val, test;
  std::uint64_t seed = 0;
  int image_size = 64;
};

// Renders n samples into dir/{images,masks} with disjoint identities across
// splits and writes manifest.json. view_mix selects which viewpoints are
// cycled ("all" or comma-separated names).
CorpusManifest generate_corpus(const std::filesystem::path& dir, int n, std::uint64_t seed,
                               double train_frac = 0.75, double val_frac = 0.1,
                               const std::string& view_mix = "all", int size = 64);

CorpusManifest read_manifest(const std::filesystem::path& dir);

// Binary graymap (P5), pixel value = label-map value (0..13).
void write_mask(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask,
                int width, int height);
std::vector<std::uint8_t> read_mask(const std::filesystem::path& path, int& width, int& height);

// Binary pixmap (P6) for the rendered image.
void write_image(const std::filesystem::path& path, const Tensor& image);
Tensor read_image(const std::filesystem::path& path);

LabeledSample load_sample(const std::filesystem::path& dir, const ManifestEntry& e);

}  // namespace partseg::synth
