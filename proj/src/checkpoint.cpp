#include "difuzcam/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace difuzcam {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'D', 'F', 'Z', 'C'};

template <typename T>
void write_blob(std::ofstream& out, const std::vector<T>& v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
std::vector<T> read_blob(std::ifstream& in, std::size_t count, const fs::path& path) {
  std::vector<T> v(count);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (!in) throw std::runtime_error("checkpoint truncated: " + path.string());
  return v;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  json header;
  header["meta"] = ckpt.meta;
  json arrays = json::array();
  for (const auto& [name, v] : ckpt.f32) arrays.push_back({{"name", name}, {"dtype", "f32"}, {"count", v.size()}});
  for (const auto& [name, v] : ckpt.f64) arrays.push_back({{"name", name}, {"dtype", "f64"}, {"count", v.size()}});
  header["arrays"] = arrays;
  const std::string text = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.parent_path() / (path.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
    out.write(kMagic, 4);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(len));
    for (const auto& [name, v] : ckpt.f32) write_blob(out, v);
    for (const auto& [name, v] : ckpt.f64) write_blob(out, v);
    if (!out.flush()) throw std::runtime_error("checkpoint write failed: " + path.string());
  }
  fs::rename(tmp, path);
}

namespace {

json read_header(std::ifstream& in, const fs::path& path) {
  char magic[4];
  std::uint64_t len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("not a checkpoint: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("checkpoint truncated: " + path.string());
  return json::parse(text);
}

}  // namespace

json load_checkpoint_meta(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  return read_header(in, path).at("meta");
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  const json header = read_header(in, path);
  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& a : header.at("arrays")) {
    const auto name = a.at("name").get<std::string>();
    const auto count = a.at("count").get<std::size_t>();
    if (a.at("dtype") == "f32") ckpt.f32[name] = read_blob<float>(in, count, path);
    else ckpt.f64[name] = read_blob<double>(in, count, path);
  }
  return ckpt;
}

void store_params(Checkpoint& ckpt, const nn::ParamList& params) {
  for (const auto* p : params) {
    if (ckpt.f32.count(p->name)) throw std::logic_error("checkpoint: duplicate param name " + p->name);
    ckpt.f32[p->name] = p->value;
  }
}

void load_params(const Checkpoint& ckpt, const nn::ParamList& params) {
  for (auto* p : params) {
    const auto it = ckpt.f32.find(p->name);
    if (it == ckpt.f32.end()) throw std::runtime_error("checkpoint: missing param " + p->name);
    if (it->second.size() != p->value.size()) throw std::runtime_error("checkpoint: size mismatch for " + p->name);
    p->value = it->second;
  }
}

void store_sep(Checkpoint& ckpt, SepTransform& sep) {
  for (auto& [name, span] : sep.blocks()) ckpt.f64[name] = std::vector<double>(span.begin(), span.end());
  ckpt.meta["sep.input_scale"] = sep.input_scale;
}

void load_sep(const Checkpoint& ckpt, SepTransform& sep) {
  for (auto& [name, span] : sep.blocks()) {
    const auto it = ckpt.f64.find(name);
    if (it == ckpt.f64.end() || it->second.size() != span.size())
      throw std::runtime_error("checkpoint: separable block " + name + " missing or mis-sized");
    std::copy(it->second.begin(), it->second.end(), span.begin());
  }
  sep.input_scale = ckpt.meta.at("sep.input_scale").get<double>();
}

}  // namespace difuzcam
