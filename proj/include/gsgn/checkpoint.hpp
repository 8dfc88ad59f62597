#pragma once

// Checkpoint file:
//   "GSGN" | u32 LE format version | u64 LE header length | UTF-8 JSON header
//   | f32 LE tensor payloads in directory order
// The header holds the model config, task names, the tensor directory
// (name, shape, byte offset relative to the payload start) and optional
// training state.

#include <bit>
#include <cstring>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>

#include "gsgn/image.hpp"
#include "gsgn/optim.hpp"

namespace gsgn {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'G', 'S', 'G', 'N'};

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

class Checkpoint {
 public:
  ModelConfig config;
  std::vector<std::string> task_names;
  nlohmann::json metadata = nlohmann::json::object();  // free-form (mode, critic config, ...)
  nlohmann::json training = nullptr;                   // iteration counter, optimizer step counts, ...

  void put(const std::string& name, const Shape& shape, std::span<const float> values) {
    if (index_.count(name)) throw Error("duplicate checkpoint tensor '" + name + "'");
    if (numel_of(shape) != values.size()) throw ShapeError("checkpoint tensor '" + name + "' size mismatch");
    index_[name] = tensors_.size();
    tensors_.push_back({name, shape, std::vector<float>(values.begin(), values.end())});
  }
  void put(const std::string& name, const Tensor<float>& t) { put(name, t.shape(), t.data()); }

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const StoredTensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("checkpoint has no tensor '" + name + "'");
    return tensors_[it->second];
  }
  const std::vector<StoredTensor>& tensors() const { return tensors_; }

  /// Names under `prefix` (in directory order).
  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& t : tensors_)
      if (t.name.compare(0, prefix.size(), prefix) == 0) out.push_back(t.name);
    return out;
  }

  void validate() const {
    config.validate();
    if (task_names.empty()) throw Error("checkpoint needs at least one task name");
    for (const auto& n : task_names)
      if (n.empty()) throw Error("checkpoint task names must not be empty");
    if (config.norm_mode == NormMode::adaptive && task_names.size() != config.task_count)
      throw Error("checkpoint has " + std::to_string(task_names.size()) + " task names for a " +
                  std::to_string(config.task_count) + "-task model");
  }

  nlohmann::json header() const {
    nlohmann::json dir = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : tensors_) {
      dir.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
      offset += t.values.size() * sizeof(float);
    }
    return {{"config", config}, {"task_names", task_names}, {"metadata", metadata},
            {"training", training}, {"tensors", dir}, {"payload_bytes", offset}};
  }

  /// Raw f32 LE payload in directory order.
  std::string payload() const {
    std::string out;
    std::size_t total = 0;
    for (const auto& t : tensors_) total += t.values.size();
    out.reserve(total * 4);
    for (const auto& t : tensors_)
      for (float f : t.values) {
        const auto u = std::bit_cast<std::uint32_t>(f);
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
      }
    return out;
  }

  std::string serialize() const {
    validate();
    const std::string head = header().dump();
    std::string out(kCheckpointMagic, 4);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((kCheckpointVersion >> (8 * b)) & 0xFF));
    const std::uint64_t len = head.size();
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((len >> (8 * b)) & 0xFF));
    out += head;
    out += payload();
    return out;
  }

  static Checkpoint deserialize(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
      throw Error("not a GSGN checkpoint (bad magic)");
    auto u = [&](std::size_t at, int n) {
      std::uint64_t v = 0;
      for (int b = 0; b < n; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + b])) << (8 * b);
      return v;
    };
    const auto version = static_cast<std::uint32_t>(u(4, 4));
    if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t len = u(8, 8);
    if (16 + len > bytes.size()) throw Error("truncated checkpoint header");
    nlohmann::json head;
    try {
      head = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("corrupt checkpoint header: ") + e.what());
    }
    Checkpoint ck;
    ck.config = head.at("config").get<ModelConfig>();
    ck.task_names = head.at("task_names").get<std::vector<std::string>>();
    ck.metadata = head.value("metadata", nlohmann::json::object());
    ck.training = head.value("training", nlohmann::json());
    const std::size_t base = 16 + len;
    for (const auto& e : head.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const std::size_t n = numel_of(shape);
      if (base + offset + 4 * n > bytes.size()) throw Error("truncated checkpoint payload at '" + name + "'");
      std::vector<float> v(n);
      for (std::size_t i = 0; i < n; ++i)
        v[i] = std::bit_cast<float>(static_cast<std::uint32_t>(u(base + offset + 4 * i, 4)));
      ck.put(name, shape, v);
    }
    ck.validate();
    return ck;
  }

  void save(const std::filesystem::path& path) const { write_file(path, serialize()); }
  static Checkpoint load(const std::filesystem::path& path) {
    try {
      return deserialize(read_file(path));
    } catch (const Error& e) {
      throw Error(path.string() + ": " + e.what());
    }
  }

  /// FNV-1a 64 of the serialized bytes.
  std::uint64_t content_hash() const { return fnv1a64(serialize()); }

 private:
  std::vector<StoredTensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

template <class Module>
void store_module(Checkpoint& ck, const std::string& prefix, Module& m) {
  for (auto& [name, t] : named_parameters(m)) {
    if constexpr (std::is_same_v<typename Module::value_type, float>) {
      ck.put(prefix + name, t);
    } else {
      ck.put(prefix + name, t.template cast<float>());
    }
  }
}

/// Every parameter of `m` must have exactly one same-shaped entry under
/// `prefix`, and the prefix may hold nothing else.
template <class Module>
void load_module(const Checkpoint& ck, const std::string& prefix, Module& m) {
  using T = typename Module::value_type;
  auto params = named_parameters(m);
  for (auto& [name, t] : params) {
    const auto& st = ck.get(prefix + name);
    if (st.shape != t.shape())
      throw ShapeError("checkpoint tensor '" + st.name + "' has shape " + to_string(st.shape) + ", model expects " +
                       to_string(t.shape()));
    std::vector<T> v(st.values.begin(), st.values.end());
    t.assign(v);
  }
  if (ck.names_with_prefix(prefix).size() != params.size())
    throw Error("checkpoint holds parameters under '" + prefix + "' that the model does not have");
}

template <class T>
void store_adam(Checkpoint& ck, const std::string& prefix, Adam<T>& opt) {
  opt.visit_state(prefix, [&](const std::string& name, const Shape& shape, std::vector<T>& v) {
    std::vector<float> f(v.begin(), v.end());
    ck.put(name, shape, f);
  });
}

template <class T>
void load_adam(const Checkpoint& ck, const std::string& prefix, Adam<T>& opt, std::uint64_t steps) {
  opt.visit_state(prefix, [&](const std::string& name, const Shape& shape, std::vector<T>& v) {
    const auto& st = ck.get(name);
    if (st.shape != shape) throw ShapeError("optimizer state '" + name + "' shape mismatch");
    v.assign(st.values.begin(), st.values.end());
  });
  opt.set_step_count(steps);
}

inline constexpr const char* kGeneratorPrefix = "generator.";

/// Inference checkpoint for one generator.
inline Checkpoint make_generator_checkpoint(Gsgn<float>& g, const std::vector<std::string>& task_names) {
  Checkpoint ck;
  ck.config = g.config();
  ck.task_names = task_names;
  store_module(ck, kGeneratorPrefix, g);
  ck.validate();
  return ck;
}

inline Gsgn<float> load_generator(const Checkpoint& ck) {
  Gsgn<float> g(ck.config, 0);
  load_module(ck, kGeneratorPrefix, g);
  return g;
}

}  // namespace gsgn
