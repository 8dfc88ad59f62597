#pragma once

// Generator (GSGN / MT-GSGN), style mapping network, critic and classifier.
//
// Generator topology, for `levels` = L shuffle levels above the base:
//
//   level L (coarsest): shuffle^L(x) -> head -> residual blocks -> global gate
//   level l < L:        shuffle^l(x) -> head, concat unshuffle(level l+1 features)
//                       -> fuse -> residual blocks
//   level 0 output:     conv -> 3 channels, added to x when global_residual is set
//
// Every conv except the output head is followed by leaky ReLU and a
// normalization site. Sites are numbered top level first; in adaptive mode
// each site's scale/shift come from a per-site linear head on the mapped
// style latent w.

#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <string>

#include "gsgn/layers.hpp"

namespace gsgn {

enum class NormMode { none, instance, adaptive };

inline std::string to_string(NormMode m) {
  switch (m) {
    case NormMode::none: return "none";
    case NormMode::instance: return "instance";
    case NormMode::adaptive: return "adaptive";
  }
  return "?";
}

inline NormMode parse_norm_mode(const std::string& s) {
  if (s == "none") return NormMode::none;
  if (s == "instance") return NormMode::instance;
  if (s == "adaptive") return NormMode::adaptive;
  throw Error("unknown norm mode '" + s + "'");
}

struct ModelConfig {
  std::size_t levels = 2;
  std::size_t base_channels = 64;
  // Width of every level above the base relative to base_channels.
  double level_channel_factor = 0.5;
  // Residual blocks per level, index 0 = base (full resolution).
  std::vector<std::size_t> blocks_per_level{3, 1, 1};
  bool use_global_features = true;
  NormMode norm_mode = NormMode::instance;
  std::size_t task_count = 1;
  std::size_t latent_w_dim = 128;
  std::size_t mapping_depth = 3;
  bool global_residual = true;
  // Hidden width of the gate MLP is channels / gate_reduction.
  std::size_t gate_reduction = 1;
  // Zero output conv makes an untrained residual generator the identity.
  bool zero_init_output = true;

  std::size_t level_channels(std::size_t level) const {
    if (level == 0) return base_channels;
    auto c = static_cast<std::size_t>(std::lround(static_cast<double>(base_channels) * level_channel_factor));
    c = std::max<std::size_t>(4, (c + 3) / 4 * 4);  // unshuffle needs a multiple of 4
    return c;
  }

  std::size_t spatial_multiple() const { return std::size_t{1} << levels; }

  void validate() const {
    if (levels < 1) throw Error("ModelConfig: levels must be >= 1");
    if (base_channels == 0 || latent_w_dim == 0 || mapping_depth == 0 || !(level_channel_factor > 0))
      throw Error("ModelConfig: widths must be positive");
    if (blocks_per_level.size() != levels + 1)
      throw Error("ModelConfig: blocks_per_level needs one entry per level (" + std::to_string(levels + 1) + ")");
    if (norm_mode == NormMode::adaptive && task_count < 1)
      throw Error("ModelConfig: adaptive normalization requires task_count >= 1");
    if (gate_reduction == 0) throw Error("ModelConfig: gate_reduction must be positive");
  }

  /// Full GSGN (about 336k parameters).
  static ModelConfig gsgn() { return {}; }
  static ModelConfig gsgn_without_instance_norm() {
    ModelConfig c;
    c.norm_mode = NormMode::none;
    return c;
  }
  static ModelConfig gsgn_without_global_features_and_instance_norm() {
    ModelConfig c;
    c.use_global_features = false;
    c.norm_mode = NormMode::none;
    return c;
  }
  /// Two-level SGN baseline: half-width base, double-width upper levels,
  /// deeper upper levels, no gate and no normalization.
  static ModelConfig sgn2() {
    ModelConfig c;
    c.base_channels = 32;
    c.level_channel_factor = 2.0;
    c.blocks_per_level = {3, 4, 4};
    c.use_global_features = false;
    c.norm_mode = NormMode::none;
    return c;
  }
  static ModelConfig mt_gsgn(std::size_t tasks) {
    ModelConfig c;
    c.norm_mode = NormMode::adaptive;
    c.task_count = tasks;
    return c;
  }
  /// Small widths for 64x64 desk-scale experiments.
  static ModelConfig desk(NormMode mode = NormMode::instance, std::size_t tasks = 1) {
    ModelConfig c;
    c.base_channels = 16;
    c.level_channel_factor = 0.5;
    c.blocks_per_level = {2, 1, 1};
    c.norm_mode = mode;
    c.task_count = tasks;
    c.latent_w_dim = 32;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"levels", c.levels},
                     {"base_channels", c.base_channels},
                     {"level_channel_factor", c.level_channel_factor},
                     {"blocks_per_level", c.blocks_per_level},
                     {"use_global_features", c.use_global_features},
                     {"norm_mode", to_string(c.norm_mode)},
                     {"task_count", c.task_count},
                     {"latent_w_dim", c.latent_w_dim},
                     {"mapping_depth", c.mapping_depth},
                     {"global_residual", c.global_residual},
                     {"gate_reduction", c.gate_reduction},
                     {"zero_init_output", c.zero_init_output}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.levels = j.value("levels", d.levels);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.level_channel_factor = j.value("level_channel_factor", d.level_channel_factor);
  c.blocks_per_level = j.value("blocks_per_level", d.blocks_per_level);
  c.use_global_features = j.value("use_global_features", d.use_global_features);
  c.norm_mode = parse_norm_mode(j.value("norm_mode", to_string(d.norm_mode)));
  c.task_count = j.value("task_count", d.task_count);
  c.latent_w_dim = j.value("latent_w_dim", d.latent_w_dim);
  c.mapping_depth = j.value("mapping_depth", d.mapping_depth);
  c.global_residual = j.value("global_residual", d.global_residual);
  c.gate_reduction = j.value("gate_reduction", d.gate_reduction);
  c.zero_init_output = j.value("zero_init_output", d.zero_init_output);
}

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Handles (aliasing the module's storage) to every learnable tensor.
template <class Module>
auto named_parameters(Module& m) {
  using T = typename Module::value_type;
  NamedTensors<T> out;
  m.visit([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <class Module>
std::size_t parameter_count(Module& m) {
  std::size_t n = 0;
  for (auto& [name, t] : named_parameters(m)) n += t.numel();
  return n;
}

/// Copies values between two modules with identical parameter layouts
/// (possibly different scalar types).
template <class Dst, class Src>
void copy_parameters(Dst& dst, Src& src) {
  auto d = named_parameters(dst);
  auto s = named_parameters(src);
  using U = typename Dst::value_type;
  std::size_t matched = 0;
  for (auto& [name, t] : d) {
    for (auto& [sname, st] : s) {
      if (sname != name) continue;
      if (st.shape() != t.shape()) throw ShapeError("copy_parameters: shape mismatch for " + name);
      auto v = st.template cast<U>();
      t.assign(v.values());
      ++matched;
      break;
    }
  }
  if (matched != d.size()) throw Error("copy_parameters: parameter sets differ");
}

template <class T>
struct Modulation {
  Tensor<T> scale;  // (N, C)
  Tensor<T> shift;  // (N, C)
};

/// z (N, K) -> w (N, latent_w_dim) through `depth` linear + leaky ReLU stages.
template <class T>
class MappingNetwork {
 public:
  using value_type = T;
  MappingNetwork() = default;
  template <class Rng>
  MappingNetwork(std::size_t in, std::size_t width, std::size_t depth, Rng& rng) : in_(in) {
    for (std::size_t i = 0; i < depth; ++i) layers_.emplace_back(i == 0 ? in : width, width, rng);
  }

  Tensor<T> operator()(const Tensor<T>& z) const {
    if (z.dim() != 2 || z.size(1) != in_)
      throw ShapeError("mapping network: z has shape " + to_string(z.shape()) + ", expected (N, " +
                       std::to_string(in_) + ")");
    Tensor<T> h = z;
    for (const auto& l : layers_) h = leaky_relu(l(h), T(kLeakySlope));
    return h;
  }

  std::size_t input_dim() const { return in_; }
  std::vector<Linear<T>>& layers() { return layers_; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].visit(prefix + "." + std::to_string(i), f);
  }

 private:
  std::size_t in_ = 0;
  std::vector<Linear<T>> layers_;
};

template <class T>
class Gsgn {
 public:
  using value_type = T;

  explicit Gsgn(const ModelConfig& config, std::uint64_t seed = 0) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t L = config_.levels;
    levels_.resize(L + 1);
    for (std::size_t l = L + 1; l-- > 0;) {
      Level& lv = levels_[l];
      const std::size_t c = config_.level_channels(l);
      lv.channels = c;
      lv.head = Conv2d<T>(ConvSpec{3 * (std::size_t{1} << (2 * l)), c, 3}, rng);
      lv.head_site = new_site(c);
      if (l < L) {
        lv.fuse = Conv2d<T>(ConvSpec{c + config_.level_channels(l + 1) / 4, c, 3}, rng);
        lv.fuse_site = new_site(c);
      }
      for (std::size_t b = 0; b < config_.blocks_per_level[l]; ++b) {
        lv.blocks.emplace_back(c, rng, site_channels_.size());
        new_site(c);
        new_site(c);
      }
      if (l == L && config_.use_global_features)
        lv.gate = GlobalFeatureGate<T>(c, config_.gate_reduction, rng);
    }
    out_ = Conv2d<T>(ConvSpec{config_.base_channels, 3, 3}, rng, config_.zero_init_output);

    if (config_.norm_mode == NormMode::instance) {
      for (auto ch : site_channels_) norms_.emplace_back(ch);
    } else if (config_.norm_mode == NormMode::adaptive) {
      mapping_ = MappingNetwork<T>(config_.task_count, config_.latent_w_dim, config_.mapping_depth, rng);
      for (auto ch : site_channels_) heads_.emplace_back(config_.latent_w_dim, 2 * ch, rng, true);
    }
  }

  Gsgn(Gsgn&&) noexcept = default;
  Gsgn& operator=(Gsgn&&) noexcept = default;
  Gsgn(const Gsgn&) = delete;
  Gsgn& operator=(const Gsgn&) = delete;

  /// Deep copy.
  Gsgn clone() const {
    Gsgn copy(config_);
    copy_parameters(copy, const_cast<Gsgn&>(*this));
    return copy;
  }

  const ModelConfig& config() const { return config_; }
  std::size_t site_count() const { return site_channels_.size(); }
  const std::vector<std::size_t>& site_channels() const { return site_channels_; }
  bool conditional() const { return config_.norm_mode == NormMode::adaptive; }

  /// Style latent z: (K) or (N, K) -> w: (N, latent_w_dim).
  Tensor<T> map_style(const Tensor<T>& z, std::size_t batch = 1) const {
    if (!conditional()) throw Error("map_style on a model without adaptive normalization");
    return mapping_(as_batch_z(z, batch));
  }

  /// Per-site (scale, shift), with scale = 1 + head output.
  std::vector<Modulation<T>> adain_heads(const Tensor<T>& w) const {
    if (heads_.size() != site_channels_.size()) throw Error("adain head count does not match site count");
    std::vector<Modulation<T>> mods;
    mods.reserve(heads_.size());
    for (std::size_t s = 0; s < heads_.size(); ++s) {
      const std::size_t C = site_channels_[s];
      auto out = heads_[s](w);
      if (out.size(1) != 2 * C) throw ShapeError("adain head output does not match site channels");
      mods.push_back({affine(slice(out, 1, 0, C), T(1), T(1)), slice(out, 1, C, C)});
    }
    return mods;
  }

  /// Training-path forward: unclamped. `z` is required in adaptive mode.
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& z = Tensor<T>()) const {
    if (x.dim() != 4 || x.size(1) != 3)
      throw ShapeError("generator expects (N, 3, H, W), got " + to_string(x.shape()));
    const std::size_t m = config_.spatial_multiple();
    if (x.size(2) % m || x.size(3) % m)
      throw ShapeError("generator input " + to_string(x.shape()) + " not divisible by " + std::to_string(m));
    std::vector<Modulation<T>> mods;
    if (conditional()) {
      if (!z.defined()) throw Error("adaptive generator requires a style vector z");
      mods = adain_heads(map_style(z, x.size(0)));
    }
    auto norm = [&](const Tensor<T>& h, std::size_t site) -> Tensor<T> {
      switch (config_.norm_mode) {
        case NormMode::none: return h;
        case NormMode::instance: return norms_[site](h);
        case NormMode::adaptive: return adaptive_instance_norm(h, mods[site].scale, mods[site].shift);
      }
      return h;
    };

    const std::size_t L = config_.levels;
    std::vector<Tensor<T>> pyramid{x};
    for (std::size_t l = 1; l <= L; ++l) pyramid.push_back(shuffle(pyramid.back()));

    Tensor<T> guide;
    for (std::size_t l = L + 1; l-- > 0;) {
      const Level& lv = levels_[l];
      auto h = norm(leaky_relu(lv.head(pyramid[l]), T(kLeakySlope)), lv.head_site);
      if (guide.defined())
        h = norm(leaky_relu((*lv.fuse)(concat<T>({h, unshuffle(guide)}, 1)), T(kLeakySlope)), lv.fuse_site);
      for (const auto& b : lv.blocks) h = b(h, norm);
      if (lv.gate) h = (*lv.gate)(h);
      guide = h;
    }
    auto correction = out_(guide);
    return config_.global_residual ? add(x, correction) : correction;
  }

  /// Inference: no graph, output clamped to [0, 1].
  Tensor<T> enhance(const Tensor<T>& x, const Tensor<T>& z = Tensor<T>()) const {
    NoGradGuard ng;
    return clamp(forward(x, z), T(0), T(1));
  }

  template <class F>
  void visit(F&& f) {
    for (std::size_t l = levels_.size(); l-- > 0;) {
      Level& lv = levels_[l];
      const std::string p = "level" + std::to_string(l);
      lv.head.visit(p + ".head", f);
      if (lv.fuse) lv.fuse->visit(p + ".fuse", f);
      for (std::size_t b = 0; b < lv.blocks.size(); ++b) lv.blocks[b].visit(p + ".block" + std::to_string(b), f);
      if (lv.gate) lv.gate->visit(p + ".gate", f);
    }
    out_.visit("out", f);
    for (std::size_t s = 0; s < norms_.size(); ++s) norms_[s].visit("norm" + std::to_string(s), f);
    if (conditional()) {
      mapping_.visit("mapping", f);
      for (std::size_t s = 0; s < heads_.size(); ++s) heads_[s].visit("adain" + std::to_string(s), f);
    }
  }

  Conv2d<T>& output_conv() { return out_; }
  std::vector<Linear<T>>& adain_head_layers() { return heads_; }
  MappingNetwork<T>& mapping() { return mapping_; }
  std::vector<InstanceNorm<T>>& instance_norms() { return norms_; }

 private:
  struct Level {
    std::size_t channels = 0;
    Conv2d<T> head;
    std::size_t head_site = 0;
    std::optional<Conv2d<T>> fuse;
    std::size_t fuse_site = 0;
    std::vector<ResidualBlock<T>> blocks;
    std::optional<GlobalFeatureGate<T>> gate;
  };

  std::size_t new_site(std::size_t channels) {
    site_channels_.push_back(channels);
    return site_channels_.size() - 1;
  }

  Tensor<T> as_batch_z(const Tensor<T>& z, std::size_t batch) const {
    const std::size_t K = config_.task_count;
    if (z.dim() == 1) {
      if (z.size(0) != K)
        throw ShapeError("style vector has length " + std::to_string(z.size(0)) + ", model expects " +
                         std::to_string(K));
      return broadcast_to(reshape(z, Shape{1, K}), Shape{batch, K});
    }
    if (z.dim() == 2 && z.size(1) == K && (z.size(0) == batch || z.size(0) == 1))
      return broadcast_to(z, Shape{batch, K});
    throw ShapeError("style batch has shape " + to_string(z.shape()) + ", expected (" + std::to_string(batch) +
                     ", " + std::to_string(K) + ")");
  }

  ModelConfig config_;
  std::vector<Level> levels_;
  Conv2d<T> out_;
  std::vector<std::size_t> site_channels_;
  std::vector<InstanceNorm<T>> norms_;
  MappingNetwork<T> mapping_;
  std::vector<Linear<T>> heads_;
};

/// Exact number of learnable scalars of a generator built from `config`.
inline std::size_t count_parameters(const ModelConfig& config) {
  Gsgn<float> g(config, 0);
  return parameter_count(g);
}

// ---------------------------------------------------------------------------
// Critic and classifier share a downsampling trunk: each stage is a
// space-to-depth shuffle followed by a 3x3 conv and leaky ReLU (a stride-2
// convolution with a 6x6 receptive field). No normalization, so samples
// never interact and per-sample input gradients are well defined.

struct CriticConfig {
  std::vector<std::size_t> widths{16, 32, 64, 64};

  std::size_t spatial_multiple() const { return std::size_t{1} << widths.size(); }
  static CriticConfig desk() { return {{8, 16, 32, 32}}; }
};

inline void to_json(nlohmann::json& j, const CriticConfig& c) { j = nlohmann::json{{"widths", c.widths}}; }
inline void from_json(const nlohmann::json& j, CriticConfig& c) { c.widths = j.value("widths", CriticConfig{}.widths); }

template <class T>
class ConvTrunk {
 public:
  ConvTrunk() = default;
  template <class Rng>
  ConvTrunk(const CriticConfig& cfg, Rng& rng) {
    if (cfg.widths.empty()) throw Error("critic trunk needs at least one stage");
    std::size_t in = 3;
    for (auto w : cfg.widths) {
      stages_.emplace_back(ConvSpec{4 * in, w, 3}, rng);
      in = w;
    }
  }

  /// (N, 3, H, W) -> pooled features (N, C_last)
  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.dim() != 4 || x.size(1) != 3) throw ShapeError("critic expects (N, 3, H, W)");
    const std::size_t m = std::size_t{1} << stages_.size();
    if (x.size(2) % m || x.size(3) % m)
      throw ShapeError("critic input " + to_string(x.shape()) + " not divisible by " + std::to_string(m));
    Tensor<T> h = x;
    for (const auto& s : stages_) h = leaky_relu(s(shuffle(h)), T(kLeakySlope));
    return global_average_pool(h);
  }

  std::size_t out_features() const { return stages_.back().spec.out_channels; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < stages_.size(); ++i) stages_[i].visit(prefix + ".stage" + std::to_string(i), f);
  }

 private:
  std::vector<Conv2d<T>> stages_;
};

/// Unbounded per-sample score (no sigmoid).
template <class T>
class Critic {
 public:
  using value_type = T;
  explicit Critic(const CriticConfig& cfg = {}, std::uint64_t seed = 0) : config_(cfg) {
    std::mt19937_64 rng(seed);
    trunk_ = ConvTrunk<T>(cfg, rng);
    head_ = Linear<T>(trunk_.out_features(), 1, rng);
  }
  Critic(Critic&&) noexcept = default;
  Critic& operator=(Critic&&) noexcept = default;
  Critic(const Critic&) = delete;

  /// (N, 3, H, W) -> (N)
  Tensor<T> operator()(const Tensor<T>& x) const {
    auto s = head_(trunk_(x));
    return reshape(s, Shape{x.size(0)});
  }

  const CriticConfig& config() const { return config_; }
  Linear<T>& head() { return head_; }

  template <class F>
  void visit(F&& f) {
    trunk_.visit("trunk", f);
    head_.visit("head", f);
  }

 private:
  CriticConfig config_;
  ConvTrunk<T> trunk_;
  Linear<T> head_;
};

/// Independent per-task sigmoid confidences.
template <class T>
class Classifier {
 public:
  using value_type = T;
  Classifier(std::size_t tasks, const CriticConfig& cfg = {}, std::uint64_t seed = 0) : config_(cfg) {
    if (tasks == 0) throw Error("classifier needs at least one task");
    std::mt19937_64 rng(seed);
    trunk_ = ConvTrunk<T>(cfg, rng);
    head_ = Linear<T>(trunk_.out_features(), tasks, rng);
  }
  Classifier(Classifier&&) noexcept = default;
  Classifier& operator=(Classifier&&) noexcept = default;
  Classifier(const Classifier&) = delete;

  /// (N, 3, H, W) -> (N, K) in (0, 1)
  Tensor<T> operator()(const Tensor<T>& x) const { return sigmoid(head_(trunk_(x))); }

  std::size_t tasks() const { return head_.out_features(); }
  const CriticConfig& config() const { return config_; }

  template <class F>
  void visit(F&& f) {
    trunk_.visit("trunk", f);
    head_.visit("head", f);
  }

 private:
  CriticConfig config_;
  ConvTrunk<T> trunk_;
  Linear<T> head_;
};

}  // namespace gsgn
