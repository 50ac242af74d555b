// Self-describing JSON model container: format tag, version, model kind,
// config echo, training seed and named parameter tensors (row-major).

#pragma once

#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "pktrack/error.hpp"
#include "pktrack/nn/autograd.hpp"
#include "pktrack/nn/layers.hpp"

namespace pktrack::nn {

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"layers", c.layers}, {"embed_dim", c.embed_dim}, {"ff_dim", c.ff_dim}, {"heads", c.heads}};
}
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.layers = j.value("layers", c.layers);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.heads = j.value("heads", c.heads);
}
inline constexpr const char* kCheckpointFormat = "pktrack-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;
  nlohmann::json config;
  std::uint64_t seed = 0;
  nlohmann::json extra;  // model-specific frozen state (e.g. normalizers)
  std::map<std::string, Mat> tensors;
};

inline nlohmann::json to_json(const Checkpoint& c) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["kind"] = c.kind;
  j["config"] = c.config;
  j["seed"] = c.seed;
  j["extra"] = c.extra;
  nlohmann::json t = nlohmann::json::object();
  for (const auto& [name, m] : c.tensors) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index col = 0; col < m.cols(); ++col) data.push_back(m(r, col));
    t[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
  }
  j["tensors"] = t;
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j, const std::string& expected_kind) {
  try {
    if (j.at("format") != kCheckpointFormat) throw SchemaError("not a pktrack checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw SchemaError("unsupported checkpoint version " + j.at("version").dump());
    Checkpoint c;
    c.kind = j.at("kind").get<std::string>();
    if (!expected_kind.empty() && c.kind != expected_kind)
      throw SchemaError("checkpoint holds a " + c.kind + " model, expected " + expected_kind);
    c.config = j.at("config");
    c.seed = j.at("seed").get<std::uint64_t>();
    c.extra = j.value("extra", nlohmann::json::object());
    for (const auto& [name, t] : j.at("tensors").items()) {
      const auto rows = t.at("rows").get<Eigen::Index>(), cols = t.at("cols").get<Eigen::Index>();
      const auto data = t.at("data").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw SchemaError("tensor " + name + " has inconsistent size");
      Mat m(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index col = 0; col < cols; ++col) m(r, col) = data[static_cast<std::size_t>(r * cols + col)];
      c.tensors[name] = std::move(m);
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << to_json(c).dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path, const std::string& expected_kind = "") {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("checkpoint is not valid JSON: " + std::string(e.what()));
  }
  return checkpoint_from_json(j, expected_kind);
}

}  // namespace pktrack::nn
