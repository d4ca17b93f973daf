#include "bridgeprune/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include <json.hpp>

namespace bridgeprune::ckpt {

namespace {

using json = nlohmann::json;

constexpr const char* kMagic = "BRIDGEPRUNE-CKPT";
constexpr const char* kVelocityPrefix = "velocity/";

static_assert(std::endian::native == std::endian::little, "checkpoint blob assumes little-endian");

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

json layer_to_json(const nn::LayerSpec& l) {
  return json{{"kind", nn::to_string(l.kind)}, {"name", l.name},
              {"in_channels", l.in_channels},  {"out_channels", l.out_channels},
              {"kernel", l.kernel},            {"stride", l.stride},
              {"padding", l.padding},          {"skip_from", l.skip_from}};
}

nn::LayerSpec layer_from_json(const json& j) {
  nn::LayerSpec l;
  l.kind = nn::layer_kind_from_string(j.at("kind").get<std::string>());
  l.name = j.at("name").get<std::string>();
  l.in_channels = j.at("in_channels").get<std::size_t>();
  l.out_channels = j.at("out_channels").get<std::size_t>();
  l.kernel = j.at("kernel").get<std::size_t>();
  l.stride = j.at("stride").get<std::size_t>();
  l.padding = j.at("padding").get<std::size_t>();
  l.skip_from = j.at("skip_from").get<std::size_t>();
  return l;
}

template <typename T>
void append_tensor(json& entries, std::string& blob, const std::string& name, const Tensor<T>& t) {
  const std::size_t bytes = t.numel() * sizeof(T);
  entries.push_back(json{{"name", name},
                         {"shape", t.shape()},
                         {"dtype", dtype_name<T>()},
                         {"offset", blob.size()},
                         {"length", bytes}});
  blob.append(reinterpret_cast<const char*>(t.raw()), bytes);
}

template <typename S, typename T>
Tensor<T> read_as(const std::string& name, const Shape& shape, const char* src,
                  std::size_t length) {
  const std::size_t n = shape_numel(shape);
  if (length != n * sizeof(S)) {
    throw TensorLengthError(name, "declared " + std::to_string(length) + " bytes, shape " +
                                      shape_str(shape) + " needs " +
                                      std::to_string(n * sizeof(S)));
  }
  Tensor<T> t(shape);
  if constexpr (std::is_same_v<S, T>) {
    std::memcpy(t.raw(), src, length);
  } else {
    std::vector<S> tmp(n);
    std::memcpy(tmp.data(), src, length);
    for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<T>(tmp[i]);
  }
  return t;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Parsed {
  json manifest;
  std::string blob;
};

Parsed parse(const std::string& path) {
  const std::string bytes = read_file(path);
  const std::size_t magic_end = bytes.find('\n');
  if (magic_end == std::string::npos || bytes.compare(0, magic_end, kMagic) != 0) {
    throw CorruptManifestError("'" + path + "' is not a checkpoint (bad magic line)");
  }
  const std::size_t len_end = bytes.find('\n', magic_end + 1);
  if (len_end == std::string::npos) throw CorruptManifestError("missing manifest length");
  std::size_t len = 0;
  try {
    std::size_t used = 0;
    const std::string field = bytes.substr(magic_end + 1, len_end - magic_end - 1);
    len = std::stoull(field, &used);
    if (used != field.size()) throw std::invalid_argument(field);
  } catch (const std::exception&) {
    throw CorruptManifestError("unreadable manifest length");
  }
  const std::size_t start = len_end + 1;
  if (len > bytes.size() - start) throw CorruptManifestError("manifest runs past end of file");
  Parsed p;
  try {
    p.manifest = json::parse(bytes.substr(start, len));
  } catch (const json::exception& e) {
    throw CorruptManifestError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!p.manifest.is_object() || !p.manifest.contains("version")) {
    throw CorruptManifestError("manifest has no version");
  }
  const json& v = p.manifest["version"];
  if (!v.is_number_integer() || v.get<int>() != kFormatVersion) {
    throw CheckpointVersionError("checkpoint version " + v.dump() + " is not supported (expected " +
                                 std::to_string(kFormatVersion) + ")");
  }
  p.blob = bytes.substr(start + len);
  return p;
}

}  // namespace

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw FormatError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
  }
}

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
  json m;
  m["version"] = kFormatVersion;
  m["input_shape"] = ckpt.graph.input_shape;
  json layers = json::array();
  for (const auto& l : ckpt.graph.layers) layers.push_back(layer_to_json(l));
  m["layers"] = layers;

  std::string blob;
  json entries = json::array();
  for (const auto& name : ckpt.graph.param_names()) {
    append_tensor(entries, blob, name, ckpt.graph.param(name));
  }
  for (const auto& [name, v] : ckpt.optimizer.velocity) {
    append_tensor(entries, blob, kVelocityPrefix + name, v);
  }
  m["tensors"] = entries;
  m["optimizer"] = json{{"step", ckpt.optimizer.step}, {"lr", ckpt.optimizer.lr}};
  m["epoch"] = ckpt.epoch;
  m["config"] = ckpt.config;
  m["rng_state"] = ckpt.rng_state;
  m["meta"] = ckpt.meta;

  const std::string manifest = m.dump(1);
  std::string out = std::string(kMagic) + "\n" + std::to_string(manifest.size()) + "\n";
  out += manifest;
  out += blob;
  write_file_atomic(path, out);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  const Parsed p = parse(path);
  const json& m = p.manifest;
  Checkpoint<T> c;
  try {
    c.graph.input_shape = m.at("input_shape").get<Shape>();
    for (const auto& j : m.at("layers")) c.graph.layers.push_back(layer_from_json(j));
    c.optimizer.step = m.at("optimizer").at("step").get<std::uint64_t>();
    c.optimizer.lr = m.at("optimizer").at("lr").get<double>();
    c.epoch = m.at("epoch").get<std::size_t>();
    c.config = m.at("config").get<std::map<std::string, std::string>>();
    c.rng_state = m.at("rng_state").get<std::string>();
    c.meta = m.at("meta").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw CorruptManifestError(std::string("manifest field missing or mistyped: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorruptManifestError(std::string("manifest layer list: ") + e.what());
  }
  const json* tensors = nullptr;
  try {
    tensors = &m.at("tensors");
  } catch (const json::exception&) {
    throw CorruptManifestError("manifest has no tensor table");
  }
  for (const auto& e : *tensors) {
    std::string name, dtype;
    Shape shape;
    std::size_t offset = 0, length = 0;
    try {
      name = e.at("name").get<std::string>();
      dtype = e.at("dtype").get<std::string>();
      shape = e.at("shape").get<Shape>();
      offset = e.at("offset").get<std::size_t>();
      length = e.at("length").get<std::size_t>();
    } catch (const json::exception& ex) {
      throw CorruptManifestError(std::string("bad tensor entry: ") + ex.what());
    }
    if (offset > p.blob.size() || length > p.blob.size() - offset) {
      throw TensorLengthError(name, "blob holds " + std::to_string(p.blob.size()) +
                                        " bytes, tensor needs " + std::to_string(offset + length));
    }
    const char* src = p.blob.data() + offset;
    Tensor<T> t;
    if (dtype == "f32") {
      t = read_as<float, T>(name, shape, src, length);
    } else if (dtype == "f64") {
      t = read_as<double, T>(name, shape, src, length);
    } else {
      throw CorruptManifestError("tensor '" + name + "' has unknown dtype '" + dtype + "'");
    }
    if (name.rfind(kVelocityPrefix, 0) == 0) {
      c.optimizer.velocity.emplace(name.substr(std::strlen(kVelocityPrefix)), std::move(t));
    } else {
      c.graph.params.emplace(name, std::move(t));
    }
  }
  try {
    c.graph.validate();
  } catch (const DimensionError& e) {
    throw CorruptManifestError(std::string("tensors do not fit the layer list: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorruptManifestError(std::string("tensors do not fit the layer list: ") + e.what());
  }
  return c;
}

std::string checkpoint_dtype(const std::string& path) {
  const Parsed p = parse(path);
  const auto& t = p.manifest.value("tensors", json::array());
  if (t.empty()) return "f32";
  return t.front().value("dtype", "f32");
}

template void save_checkpoint(const std::string&, const Checkpoint<float>&);
template void save_checkpoint(const std::string&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint(const std::string&);
template Checkpoint<double> load_checkpoint(const std::string&);

}  // namespace bridgeprune::ckpt
