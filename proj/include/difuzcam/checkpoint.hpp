#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "difuzcam/nn.hpp"
#include "difuzcam/sep_transform.hpp"

namespace difuzcam {

/// Named float32 / float64 arrays plus a JSON header. On disk:
/// "DFZC", u64 header length, header JSON, then the raw arrays in header order.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, std::vector<float>> f32;
  std::map<std::string, std::vector<double>> f64;

  bool has(const std::string& name) const { return f32.count(name) || f64.count(name); }
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Header only.
nlohmann::json load_checkpoint_meta(const std::filesystem::path& path);

void store_params(Checkpoint& ckpt, const nn::ParamList& params);
/// Every param must be present with a matching size.
void load_params(const Checkpoint& ckpt, const nn::ParamList& params);

void store_sep(Checkpoint& ckpt, SepTransform& sep);
/// Shapes come from `sep`, which must already be initialized for the system.
void load_sep(const Checkpoint& ckpt, SepTransform& sep);

template <typename T>
void store_adam(Checkpoint& ckpt, const std::string& prefix, nn::AdamW<T>& opt) {
  ckpt.meta[prefix + ".step"] = opt.steps();
  auto& slots = opt.slots();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::string key = prefix + "." + std::to_string(i);
    if constexpr (std::is_same_v<T, float>) {
      ckpt.f32[key + ".m"] = slots[i].m;
      ckpt.f32[key + ".v"] = slots[i].v;
    } else {
      ckpt.f64[key + ".m"] = slots[i].m;
      ckpt.f64[key + ".v"] = slots[i].v;
    }
  }
}

template <typename T>
void load_adam(const Checkpoint& ckpt, const std::string& prefix, nn::AdamW<T>& opt) {
  opt.set_steps(ckpt.meta.at(prefix + ".step").template get<std::int64_t>());
  auto& slots = opt.slots();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::string key = prefix + "." + std::to_string(i);
    const auto& store = [&]() -> const std::map<std::string, std::vector<T>>& {
      if constexpr (std::is_same_v<T, float>) return ckpt.f32; else return ckpt.f64;
    }();
    const auto m = store.find(key + ".m"), v = store.find(key + ".v");
    if (m == store.end() || v == store.end() || m->second.size() != slots[i].m.size() ||
        v->second.size() != slots[i].v.size())
      throw std::runtime_error("checkpoint: optimizer state " + key + " missing or mis-sized");
    slots[i].m = m->second;
    slots[i].v = v->second;
  }
}

}  // namespace difuzcam
