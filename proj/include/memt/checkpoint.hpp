#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "memt/adam.hpp"
#include "memt/tensor.hpp"

// Self-describing checkpoint container: a text header listing each parameter
// with its shape, a "data" marker, then raw little-endian float32 payloads in
// manifest order.

namespace memt {

inline constexpr const char* kCheckpointMagic = "memt-checkpoint";
inline constexpr int kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const std::string& path, const ParamMap<T>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out << kCheckpointMagic << " " << kCheckpointVersion << "\n";
  for (const auto& [name, t] : params) {
    out << "param " << name << " " << t.rank();
    for (int d : t.shape()) out << " " << d;
    out << "\n";
  }
  out << "data\n";
  for (const auto& [name, t] : params) {
    for (T x : t.data()) {
      float f = static_cast<float>(x);
      out.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

template <class T>
ParamMap<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != kCheckpointMagic || version != kCheckpointVersion)
    throw std::runtime_error("not a checkpoint file: " + path);
  std::vector<std::pair<std::string, Shape>> manifest;
  std::string tok;
  while (in >> tok) {
    if (tok == "data") break;
    if (tok != "param") throw std::runtime_error("malformed checkpoint header: " + path);
    std::string name;
    int rank = 0;
    in >> name >> rank;
    Shape shape(static_cast<std::size_t>(rank));
    for (int& d : shape) in >> d;
    manifest.emplace_back(std::move(name), std::move(shape));
  }
  in.get();  // newline after "data"
  ParamMap<T> params;
  for (auto& [name, shape] : manifest) {
    int n = shape_numel(shape);
    std::vector<T> data(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      float f;
      in.read(reinterpret_cast<char*>(&f), sizeof(float));
      data[static_cast<std::size_t>(i)] = static_cast<T>(f);
    }
    if (!in) throw std::runtime_error("truncated checkpoint payload: " + path);
    params.emplace(name, Tensor<T>::from_data(shape, std::move(data), true));
  }
  return params;
}

// Copies values from a checkpoint into an existing parameter map; every name
// must exist with a matching shape.
template <class T>
void load_checkpoint_into(const std::string& path, ParamMap<T>& params) {
  ParamMap<T> loaded = load_checkpoint<T>(path);
  for (auto& [name, t] : params) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw std::runtime_error("checkpoint missing parameter: " + name);
    if (it->second.shape() != t.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": " +
                               shape_str(it->second.shape()) + " vs " + shape_str(t.shape()));
    std::copy(it->second.data().begin(), it->second.data().end(), t.raw().begin());
  }
}

}  // namespace memt
