#include "treekv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace treekv {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is defined little-endian");

void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "treekv-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "f32";
  manifest["endianness"] = "little";
  manifest["tensors"] = nlohmann::json::array();

  std::ofstream payload(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!payload) throw std::runtime_error("save_checkpoint: cannot write " + dir.string());
  std::int64_t offset = 0;
  std::vector<float> buf;
  for (const auto& [name, t] : params.items()) {
    buf.resize(static_cast<std::size_t>(t.numel()));
    const auto src = t.data();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(src[i]);
    const std::int64_t nbytes = static_cast<std::int64_t>(buf.size()) * 4;
    payload.write(reinterpret_cast<const char*>(buf.data()), nbytes);
    manifest["tensors"].push_back({{"name", name},
                                   {"shape", t.shape()},
                                   {"dtype", "f32"},
                                   {"offset", offset},
                                   {"nbytes", nbytes}});
    offset += nbytes;
  }
  payload.close();
  if (!payload) throw std::runtime_error("save_checkpoint: write failed in " + dir.string());

  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  if (!mf) throw std::runtime_error("save_checkpoint: cannot write manifest in " + dir.string());
}

void load_checkpoint(const std::filesystem::path& dir, ModelParams& params) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("load_checkpoint: missing manifest in " + dir.string());
  nlohmann::json manifest;
  mf >> manifest;
  if (manifest.value("format", "") != "treekv-checkpoint")
    throw std::runtime_error("load_checkpoint: not a treekv checkpoint: " + dir.string());
  if (manifest.value("dtype", "") != "f32" || manifest.value("endianness", "") != "little")
    throw std::runtime_error("load_checkpoint: unsupported payload encoding");

  std::ifstream payload(dir / "weights.bin", std::ios::binary);
  if (!payload) throw std::runtime_error("load_checkpoint: missing weights.bin in " + dir.string());

  std::size_t loaded = 0;
  std::vector<float> buf;
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    Tensor& t = params.get(name);
    if (t.shape() != shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name + ": expected " +
                               shape_str(t.shape()) + ", manifest has " + shape_str(shape));
    const std::int64_t nbytes = entry.at("nbytes").get<std::int64_t>();
    if (nbytes != t.numel() * 4)
      throw std::runtime_error("load_checkpoint: byte count mismatch for " + name);
    buf.resize(static_cast<std::size_t>(t.numel()));
    payload.seekg(entry.at("offset").get<std::int64_t>());
    payload.read(reinterpret_cast<char*>(buf.data()), nbytes);
    if (!payload) throw std::runtime_error("load_checkpoint: truncated payload at " + name);
    auto dst = t.raw_data();
    for (std::size_t i = 0; i < buf.size(); ++i) dst[i] = static_cast<double>(buf[i]);
    ++loaded;
  }
  if (loaded != params.size())
    throw std::runtime_error("load_checkpoint: manifest covers " + std::to_string(loaded) +
                             " tensors, model has " + std::to_string(params.size()));
}

}  // namespace treekv
