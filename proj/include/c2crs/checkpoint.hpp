#pragma once

// Checkpoint directories: manifest.json describes every parameter (name,
// shape, byte range) and params.bin holds the values as little-endian
// 32-bit floats, row-major, concatenated in registration order.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "c2crs/config.hpp"
#include "c2crs/parameters.hpp"

namespace c2crs {

inline constexpr const char* kCheckpointFormat = "c2crs-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointManifest {
  TrainConfig config;
  std::string stage;
  long step = 0;
  CorpusShape shape;
  std::uint64_t vocab_fingerprint = 0;
};

namespace detail {

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline void put_f32(std::string& out, float f) {
  auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

/// Serialises parameter values to the blob layout.
template <typename T>
std::string parameter_blob(const ParamStore<T>& params) {
  std::string blob;
  blob.reserve(params.scalar_count() * 4);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Matrix<T>& m = params[k].value;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) detail::put_f32(blob, static_cast<float>(m(i, j)));
  }
  return blob;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ParamStore<T>& params, const CheckpointManifest& info) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    const std::size_t length = static_cast<std::size_t>(p.value.size()) * 4;
    entries.push_back({{"name", p.name},
                       {"shape", {p.value.rows(), p.value.cols()}},
                       {"dtype", "f32"},
                       {"offset", offset},
                       {"length", length}});
    offset += length;
  }
  nlohmann::ordered_json manifest = {
      {"format", kCheckpointFormat},
      {"version", kCheckpointVersion},
      {"stage", info.stage},
      {"step", info.step},
      {"config", to_json(info.config)},
      {"corpus",
       {{"vocab_size", info.shape.vocab_size},
        {"vocab_fingerprint", detail::hex64(info.vocab_fingerprint)},
        {"n_entities", info.shape.n_entities},
        {"n_relations", info.shape.n_relations},
        {"n_items", info.shape.n_items}}},
      {"blob_length", offset},
      {"parameters", entries}};

  const std::string blob = parameter_blob(params);
  std::ofstream b(dir / "params.bin", std::ios::binary | std::ios::trunc);
  b.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!b) throw Error("failed to write " + (dir / "params.bin").string());
  std::ofstream m(dir / "manifest.json", std::ios::trunc);
  m << manifest.dump(2) << "\n";
  if (!m) throw Error("failed to write " + (dir / "manifest.json").string());
}

inline nlohmann::json read_manifest_json(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint manifest: " + std::string(e.what()));
  }
  if (j.value("format", "") != kCheckpointFormat) throw Error("not a checkpoint manifest: " + dir.string());
  if (j.value("version", 0) != kCheckpointVersion) throw Error("unsupported checkpoint version");
  return j;
}

inline CheckpointManifest read_manifest(const std::filesystem::path& dir) {
  const nlohmann::json j = read_manifest_json(dir);
  CheckpointManifest info;
  try {
    info.config = train_config_from_json(j.at("config"));
    info.stage = j.value("stage", "");
    info.step = j.value("step", 0L);
    const auto& c = j.at("corpus");
    info.shape = {c.at("vocab_size").get<int>(), c.at("n_entities").get<int>(), c.at("n_relations").get<int>(),
                  c.at("n_items").get<int>()};
    info.vocab_fingerprint = std::stoull(c.at("vocab_fingerprint").get<std::string>(), nullptr, 16);
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint manifest: " + std::string(e.what()));
  }
  return info;
}

/// Loads values into an existing store. Every store parameter must appear
/// in the manifest exactly once with the same shape, and vice versa.
template <typename T>
CheckpointManifest load_checkpoint(const std::filesystem::path& dir, ParamStore<T>& params) {
  const nlohmann::json j = read_manifest_json(dir);
  CheckpointManifest info = read_manifest(dir);
  const std::string blob = detail::read_file(dir / "params.bin");
  const auto declared = j.at("blob_length").get<std::size_t>();
  if (blob.size() != declared) {
    throw Error("blob length mismatch: manifest declares " + std::to_string(declared) + " bytes, params.bin has " +
                std::to_string(blob.size()));
  }

  std::set<std::string> seen;
  for (const auto& e : j.at("parameters")) {
    const auto name = e.at("name").get<std::string>();
    if (!seen.insert(name).second) throw Error("duplicate parameter " + name + " in manifest");
    Parameter<T>* p = params.find(name);
    if (!p) throw Error("unexpected parameter " + name + " in checkpoint");
    if (e.value("dtype", "") != "f32") throw Error("parameter " + name + ": unsupported dtype");
    const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.size() != 2 || shape[0] != p->value.rows() || shape[1] != p->value.cols()) {
      throw Error("shape mismatch for parameter " + name + ": checkpoint " + e.at("shape").dump() + ", model [" +
                  std::to_string(p->value.rows()) + "," + std::to_string(p->value.cols()) + "]");
    }
    const auto offset = e.at("offset").get<std::size_t>();
    const auto length = e.at("length").get<std::size_t>();
    if (length != static_cast<std::size_t>(p->value.size()) * 4 || offset + length > blob.size())
      throw Error("parameter " + name + ": byte range does not match the blob");
    const char* src = blob.data() + offset;
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c, src += 4) p->value(r, c) = static_cast<T>(detail::get_f32(src));
  }
  for (std::size_t k = 0; k < params.size(); ++k)
    if (!seen.contains(params[k].name)) throw Error("missing parameter " + params[k].name);
  return info;
}

}  // namespace c2crs
