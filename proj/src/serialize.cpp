#include "partseg/serialize.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace partseg {

namespace fs = std::filesystem;
using nlohmann::json;

void write_tensor_raw(const fs::path& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write tensor file " + path.string());
  static_assert(sizeof(double) == 8);
  f.write(reinterpret_cast<const char*>(t.data->data()),
          static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!f) throw std::runtime_error("short write to " + path.string());
}

Tensor read_tensor_raw(const fs::path& path, const std::vector<int>& shape) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read tensor file " + path.string());
  std::size_t n = shape_numel(shape);
  std::vector<double> v(n);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (static_cast<std::size_t>(f.gcount()) != n * sizeof(double))
    throw std::runtime_error("tensor file " + path.string() + " too short for shape " +
                             shape_str(shape));
  return Tensor::from(shape, std::move(v));
}

namespace {
std::string tensor_file_name(const std::string& name) {
  std::string s = name;
  for (char& c : s)
    if (c == '/' || c == '\\') c = '_';
  return s + ".bin";
}
}  // namespace

void save_checkpoint(const fs::path& dir, nn::ParamRegistry& params,
                     const std::string& config_json) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "partseg-checkpoint-v1";
  manifest["config"] = config_json.empty() ? json::object() : json::parse(config_json);
  json tensors = json::object();
  for (auto& [name, t] : params.items) {
    std::string file = tensor_file_name(name);
    write_tensor_raw(dir / file, *t);
    tensors[name] = {{"shape", t->shape}, {"dtype", "f64"}, {"file", file}};
  }
  manifest["tensors"] = tensors;
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("cannot write manifest in " + dir.string());
  mf << manifest.dump(2) << "\n";
}

std::string load_checkpoint(const fs::path& dir, nn::ParamRegistry& params) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("no manifest.json in " + dir.string());
  json manifest = json::parse(mf);
  const json& tensors = manifest.at("tensors");
  for (auto& [name, t] : params.items) {
    if (!tensors.contains(name))
      throw std::runtime_error("checkpoint missing tensor '" + name + "'");
    const json& e = tensors.at(name);
    std::vector<int> shape = e.at("shape").get<std::vector<int>>();
    if (shape != t->shape)
      throw std::runtime_error("checkpoint tensor '" + name + "' shape " + shape_str(shape) +
                               " does not match model " + shape_str(t->shape));
    Tensor loaded = read_tensor_raw(dir / e.at("file").get<std::string>(), shape);
    *t->data = *loaded.data;
  }
  return manifest.at("config").dump();
}

std::string read_checkpoint_config(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("no manifest.json in " + dir.string());
  json manifest = json::parse(mf);
  return manifest.at("config").dump();
}

}  // namespace partseg
