#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rtn/nn.hpp"
#include "rtn/tensor.hpp"

namespace rtn::ckpt {

// On-disk container for weights and trainer state: a fixed magic, a JSON
// header describing config plus the tensor directory, then raw float64 data
// in directory order (little-endian hosts assumed).
struct Checkpoint {
  std::string config_json = "{}";
  std::string extra_json = "{}";
  std::vector<std::pair<std::string, Tensor<double>>> tensors;

  const Tensor<double>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline void write_checkpoint(const std::string& path, const Checkpoint& c) {
  nlohmann::json header;
  header["config"] = nlohmann::json::parse(c.config_json);
  header["extra"] = nlohmann::json::parse(c.extra_json);
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& [name, t] : c.tensors) dir.push_back({{"name", name}, {"shape", t.shape()}});
  header["tensors"] = dir;
  std::string htext = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write("RTNW", 4);
  uint32_t version = 1;
  uint64_t hlen = htext.size();
  f.write(reinterpret_cast<const char*>(&version), sizeof version);
  f.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  f.write(htext.data(), std::streamsize(htext.size()));
  for (const auto& [name, t] : c.tensors)
    f.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(double)));
  if (!f) throw std::runtime_error("short write: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "RTNW", 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  uint32_t version = 0;
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof version);
  f.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  if (!f || version != 1) throw std::runtime_error("unsupported checkpoint version in " + path);
  std::string htext(hlen, '\0');
  f.read(htext.data(), std::streamsize(hlen));
  if (!f) throw std::runtime_error("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(htext);

  Checkpoint c;
  c.config_json = header.at("config").dump();
  c.extra_json = header.value("extra", nlohmann::json::object()).dump();
  for (const auto& entry : header.at("tensors")) {
    std::string name = entry.at("name").get<std::string>();
    std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
    Tensor<double> t(shape);
    f.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(double)));
    if (!f) throw std::runtime_error("truncated tensor data for " + name + " in " + path);
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  return c;
}

template <class T>
void collect_params(Checkpoint& c, const nn::ParamStore<T>& ps) {
  for (const std::string& name : ps.names())
    c.tensors.emplace_back(name, tensor_cast<double>(ps.get(name)));
}

template <class T>
void restore_params(const Checkpoint& c, nn::ParamStore<T>& ps) {
  for (const std::string& name : ps.names()) {
    const Tensor<double>* t = c.find(name);
    if (!t) throw std::runtime_error("checkpoint is missing parameter: " + name);
    ps.set_value(name, tensor_cast<T>(*t));
  }
}

}  // namespace rtn::ckpt
