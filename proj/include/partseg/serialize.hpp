#pragma once

#include <filesystem>
#include <string>

#include "partseg/nn.hpp"
#include "partseg/tensor.hpp"

namespace partseg {

// Raw little-endian IEEE-754 doubles, row-major, one file per tensor.
void write_tensor_raw(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor_raw(const std::filesystem::path& path, const std::vector<int>& shape);

// Checkpoint directory: <name>.bin per tensor plus manifest.json mapping
// name -> {shape, dtype, file} and carrying the resolved config that
// produced the parameters.
void save_checkpoint(const std::filesystem::path& dir, nn::ParamRegistry& params,
                     const std::string& config_json);
// Loads values into an already-built registry; shapes and names must match.
// Returns the embedded config JSON text.
std::string load_checkpoint(const std::filesystem::path& dir, nn::ParamRegistry& params);

// Reads just the embedded config of a checkpoint.
std::string read_checkpoint_config(const std::filesystem::path& dir);

}  // namespace partseg
