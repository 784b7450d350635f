#pragma once

// Parameter containers and the named-tensor checkpoint format.

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "vtn/errors.hpp"
#include "vtn/tensor.hpp"

namespace vtn::nn {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
std::vector<Tensor<T>> tensors_of(const ParamList<T>& list) {
  std::vector<Tensor<T>> out;
  out.reserve(list.size());
  for (const auto& p : list) out.push_back(p.tensor);
  return out;
}

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [1, out]

  Linear() = default;
  template <class Rng>
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(glorot_uniform<T>(in, out, rng)), bias(1, out, T(0), true) {}

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }

  Tensor<T> operator()(const Tensor<T>& x) const { return dense(x, weight, bias); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;
  T eps = T(1e-5);

  LayerNorm() = default;
  explicit LayerNorm(std::size_t n) : gain(1, n, T(1), true), bias(1, n, T(0), true) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias, eps); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

// ---------------------------------------------------------------------------
// Checkpoint: {"format": "vtn-tensors", "version": 1, "header": {...},
//              "tensors": [{"name", "shape": [r, c], "values": [...]}, ...]}

inline constexpr int kCheckpointVersion = 1;

template <class T>
nlohmann::json tensors_to_json(const ParamList<T>& params, const nlohmann::json& header) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : params) {
    const auto v = p.tensor.values();
    tensors.push_back({{"name", p.name},
                       {"shape", {p.tensor.rows(), p.tensor.cols()}},
                       {"values", std::vector<T>(v.begin(), v.end())}});
  }
  return {{"format", "vtn-tensors"},
          {"version", kCheckpointVersion},
          {"header", header},
          {"tensors", std::move(tensors)}};
}

// Copies values into the given parameters by name; every parameter must be
// present with a matching shape.
template <class T>
void tensors_from_json(const nlohmann::json& doc, ParamList<T>& params) {
  if (!doc.is_object() || doc.value("format", std::string{}) != "vtn-tensors") {
    throw StructuralError("not a vtn tensor checkpoint");
  }
  if (doc.value("version", 0) != kCheckpointVersion) {
    throw StructuralError("unsupported checkpoint version " +
                          std::to_string(doc.value("version", 0)));
  }
  std::unordered_map<std::string, const nlohmann::json*> by_name;
  for (const auto& t : doc.at("tensors")) by_name[t.at("name").get<std::string>()] = &t;
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw StructuralError("checkpoint lacks tensor '" + p.name + "'");
    const auto& rec = *it->second;
    const auto shape = rec.at("shape").template get<std::vector<std::size_t>>();
    if (shape.size() != 2 || shape[0] != p.tensor.rows() || shape[1] != p.tensor.cols()) {
      throw StructuralError("tensor '" + p.name + "' has shape mismatch with model");
    }
    const auto values = rec.at("values").template get<std::vector<T>>();
    if (values.size() != p.tensor.size()) {
      throw StructuralError("tensor '" + p.name + "' value count mismatch");
    }
    std::copy(values.begin(), values.end(), p.tensor.values().begin());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& doc) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write '" + path.string() + "'");
  os << doc.dump() << '\n';
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw StructuralError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

}  // namespace vtn::nn
