#pragma once

// Paired multitask datasets, the synthetic tone-curve style oracle, the
// on-disk directory layout and seeded batch sampling.
//
// Directory layout of one split:   <split>/source/<id>.png
//                                  <split>/<task>/<id>.png   (one dir per task)
// A dataset root holds train/ val/ test/ splits and manifest.json.

#include <algorithm>
#include <array>
#include <map>
#include <numbers>
#include <nlohmann/json.hpp>

#include "gsgn/image.hpp"
#include "gsgn/rng.hpp"

namespace gsgn {

/// clip(gain_c * x_c^gamma + lift, 0, 1) per channel.
struct SyntheticStyle {
  std::string name;
  double gamma = 1.0;
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  double lift = 0.0;

  void validate() const {
    if (name.empty()) throw Error("style name must not be empty");
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw Error("style '" + name + "': gamma must be positive");
    for (double g : gain)
      if (!(g > 0.0) || !std::isfinite(g)) throw Error("style '" + name + "': gains must be positive");
    if (!std::isfinite(lift)) throw Error("style '" + name + "': lift must be finite");
  }
};

inline void to_json(nlohmann::json& j, const SyntheticStyle& s) {
  j = nlohmann::json{{"name", s.name}, {"gamma", s.gamma}, {"gain", s.gain}, {"lift", s.lift}};
}

inline void from_json(const nlohmann::json& j, SyntheticStyle& s) {
  s.name = j.at("name").get<std::string>();
  s.gamma = j.at("gamma").get<double>();
  s.gain = j.at("gain").get<std::array<double, 3>>();
  s.lift = j.at("lift").get<double>();
  s.validate();
}

inline Image apply_style(const Image& x, const SyntheticStyle& s) {
  check_image(x);
  s.validate();
  const std::size_t hw = x.size(1) * x.size(2);
  std::vector<float> out(x.values());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = std::max(0.0, static_cast<double>(out[c * hw + i]));
      out[c * hw + i] = static_cast<float>(std::clamp(s.gain[c] * std::pow(v, s.gamma) + s.lift, 0.0, 1.0));
    }
  return Image(x.shape(), std::move(out));
}

/// Three retouching-like tone curves: bright/warm, dark/cool, punchy.
inline std::vector<SyntheticStyle> default_styles() {
  return {{"expertA", 0.6, {1.05, 1.0, 0.9}, 0.03},
          {"expertB", 1.5, {0.9, 1.0, 1.1}, 0.0},
          {"expertC", 1.0, {1.25, 1.1, 0.95}, -0.06}};
}

/// One (source, target, task) triple viewed from a dataset.
struct PairedSample {
  const Image* source = nullptr;
  const Image* target = nullptr;
  std::size_t task = 0;
  const std::string* id = nullptr;
};

/// Source images with one target per task. Sample k addresses image k / K,
/// task k % K (image-major, K = task count).
struct PairedDataset {
  std::vector<std::string> ids;
  std::vector<std::string> task_names;
  std::vector<Image> sources;
  std::vector<std::vector<Image>> targets;  // [task][image]

  std::size_t image_count() const { return sources.size(); }
  std::size_t task_count() const { return task_names.size(); }
  std::size_t size() const { return sources.size() * task_names.size(); }

  PairedSample sample(std::size_t k) const {
    if (k >= size()) throw Error("sample index out of range");
    const std::size_t K = task_count(), i = k / K, t = k % K;
    return {&sources[i], &targets[t][i], t, &ids[i]};
  }

  std::size_t task_index(const std::string& name) const {
    auto it = std::find(task_names.begin(), task_names.end(), name);
    if (it == task_names.end()) throw Error("unknown task '" + name + "'");
    return static_cast<std::size_t>(it - task_names.begin());
  }

  /// Keeps only task `t` (a single-task view sharing the same sources).
  PairedDataset only_task(std::size_t t) const {
    if (t >= task_count()) throw Error("task index out of range");
    return {ids, {task_names[t]}, sources, {targets[t]}};
  }

  void validate() const {
    if (sources.empty() || task_names.empty()) throw Error("empty dataset");
    if (ids.size() != sources.size() || targets.size() != task_names.size())
      throw Error("dataset tables are inconsistent");
    for (const auto& n : task_names)
      if (n.empty()) throw Error("task names must not be empty");
    for (std::size_t t = 0; t < targets.size(); ++t) {
      if (targets[t].size() != sources.size()) throw Error("task '" + task_names[t] + "' is missing targets");
      for (std::size_t i = 0; i < sources.size(); ++i)
        if (targets[t][i].shape() != sources[i].shape())
          throw ShapeError("image '" + ids[i] + "': target for '" + task_names[t] + "' has shape " +
                           to_string(targets[t][i].shape()) + ", source has " + to_string(sources[i].shape()));
    }
  }
};

// ---------------------------------------------------------------------------
// Synthetic benchmark

/// Procedural base image: a smooth two-color gradient, 2 to 5 soft-edged
/// shapes, low-frequency value-noise texture and fine grain. Quantized to
/// 8 bits so PNG storage is lossless.
inline Image make_base_image(std::mt19937_64& rng, std::size_t size = 64) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N(0.0, 1.0);
  const std::size_t S = size;
  std::vector<double> img(3 * S * S);
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = 0.1 + 0.8 * U(rng);
    c1[c] = 0.1 + 0.8 * U(rng);
  }
  const double angle = 2.0 * std::numbers::pi * U(rng);
  const double dx = std::cos(angle), dy = std::sin(angle);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const double u = (x + 0.5) / S - 0.5, v = (y + 0.5) / S - 0.5;
      const double t = std::clamp(0.5 + u * dx + v * dy, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) img[(c * S + y) * S + x] = c0[c] * (1 - t) + c1[c] * t;
    }

  const int shapes = 2 + static_cast<int>(U(rng) * 4.0);
  for (int s = 0; s < shapes; ++s) {
    const bool circle = U(rng) < 0.5;
    const double cx = U(rng) * S, cy = U(rng) * S;
    const double rx = (0.08 + 0.25 * U(rng)) * S, ry = circle ? rx : (0.08 + 0.25 * U(rng)) * S;
    const double alpha = 0.5 + 0.5 * U(rng);
    double col[3];
    for (double& c : col) c = U(rng);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double ex = (x + 0.5 - cx) / rx, ey = (y + 0.5 - cy) / ry;
        const double d = circle ? std::sqrt(ex * ex + ey * ey) : std::max(std::abs(ex), std::abs(ey));
        const double cover = std::clamp((1.0 - d) * 4.0, 0.0, 1.0) * alpha;
        if (cover <= 0.0) continue;
        for (int c = 0; c < 3; ++c) {
          double& p = img[(c * S + y) * S + x];
          p = p * (1 - cover) + col[c] * cover;
        }
      }
  }

  const std::size_t G = 9;
  std::vector<double> grid(G * G);
  for (auto& g : grid) g = N(rng);
  const double amp = 0.03 + 0.05 * U(rng), grain = 0.01 + 0.015 * U(rng);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const double gy = static_cast<double>(y) / S * (G - 1), gx = static_cast<double>(x) / S * (G - 1);
      const auto y0 = static_cast<std::size_t>(gy), x0 = static_cast<std::size_t>(gx);
      const double wy = gy - y0, wx = gx - x0;
      const double n = grid[y0 * G + x0] * (1 - wy) * (1 - wx) + grid[y0 * G + x0 + 1] * (1 - wy) * wx +
                       grid[(y0 + 1) * G + x0] * wy * (1 - wx) + grid[(y0 + 1) * G + x0 + 1] * wy * wx;
      for (int c = 0; c < 3; ++c) img[(c * S + y) * S + x] += amp * n + grain * N(rng);
    }

  std::vector<float> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = quantize8(static_cast<float>(img[i]));
  return Image(Shape{3, S, S}, std::move(out));
}

struct SyntheticDataset {
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
  std::vector<SyntheticStyle> styles;
  PairedDataset train, val, test;

  const PairedDataset& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw Error("unknown split '" + name + "'");
  }
};

/// n base images split 80/10/10 by base image (train gets the rounding
/// remainder); each split carries one styled target per style.
inline SyntheticDataset make_synthetic_dataset(std::size_t n, const std::vector<SyntheticStyle>& styles,
                                               std::uint64_t seed, std::size_t size = 64) {
  if (n == 0) throw Error("synthetic dataset needs at least one image");
  if (styles.empty()) throw Error("synthetic dataset needs at least one style");
  for (const auto& s : styles) s.validate();
  SyntheticDataset ds;
  ds.seed = seed;
  ds.image_size = size;
  ds.styles = styles;

  std::vector<Image> bases;
  bases.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = derive_rng(seed, {stream::synthetic, i});
    bases.push_back(make_base_image(rng, size));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto split_rng = derive_rng(seed, {stream::synthetic, 0xFFFFFFFFull});
  std::shuffle(order.begin(), order.end(), split_rng);
  const std::size_t n_val = n / 10, n_test = n / 10, n_train = n - n_val - n_test;

  auto fill = [&](PairedDataset& d, std::size_t begin, std::size_t count) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                 order.begin() + static_cast<std::ptrdiff_t>(begin + count));
    std::sort(idx.begin(), idx.end());
    for (const auto& s : styles) d.task_names.push_back(s.name);
    d.targets.resize(styles.size());
    for (std::size_t i : idx) {
      char id[16];
      std::snprintf(id, sizeof id, "%05zu", i);
      d.ids.emplace_back(id);
      d.sources.push_back(bases[i]);
      for (std::size_t t = 0; t < styles.size(); ++t) d.targets[t].push_back(quantize(apply_style(bases[i], styles[t])));
    }
  };
  fill(ds.train, 0, n_train);
  fill(ds.val, n_train, n_val);
  fill(ds.test, n_train + n_val, n_test);
  return ds;
}

inline void write_split_dir(const std::filesystem::path& dir, const PairedDataset& d) {
  d.validate();
  for (std::size_t i = 0; i < d.image_count(); ++i) {
    write_png(dir / "source" / (d.ids[i] + ".png"), d.sources[i]);
    for (std::size_t t = 0; t < d.task_count(); ++t)
      write_png(dir / d.task_names[t] / (d.ids[i] + ".png"), d.targets[t][i]);
  }
}

inline nlohmann::json manifest(const SyntheticDataset& ds) {
  nlohmann::json splits;
  for (const char* name : {"train", "val", "test"}) splits[name] = ds.split(name).ids;
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& s : ds.styles) tasks.push_back(s.name);
  return {{"format", "gsgn-dataset"}, {"seed", ds.seed},     {"image_size", ds.image_size},
          {"tasks", tasks},           {"styles", ds.styles}, {"splits", splits}};
}

inline void write_synthetic_dataset(const std::filesystem::path& root, const SyntheticDataset& ds) {
  for (const char* name : {"train", "val", "test"}) {
    const auto& d = ds.split(name);
    if (d.image_count()) write_split_dir(root / name, d);
  }
  write_file(root / "manifest.json", manifest(ds).dump(2) + "\n");
}

/// Task names from <root>/manifest.json, or else every subdirectory of
/// <root>/<split> other than source/ (sorted).
inline std::vector<std::string> discover_tasks(const std::filesystem::path& root, const std::string& split = "train") {
  namespace fs = std::filesystem;
  if (fs::exists(root / "manifest.json")) {
    auto j = nlohmann::json::parse(read_file(root / "manifest.json"));
    return j.at("tasks").get<std::vector<std::string>>();
  }
  std::vector<std::string> tasks;
  const fs::path dir = root / split;
  if (!fs::is_directory(dir)) throw Error("split directory " + dir.string() + " not found");
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && e.path().filename() != "source") tasks.push_back(e.path().filename().string());
  std::sort(tasks.begin(), tasks.end());
  return tasks;
}

/// Loads <dir>/source/*.png with the same-named file from each <dir>/<task>/.
/// A missing counterpart or a dimension mismatch is an error naming the file.
inline PairedDataset load_paired_dir(const std::filesystem::path& dir, const std::vector<std::string>& tasks) {
  namespace fs = std::filesystem;
  if (tasks.empty()) throw Error("load_paired_dir: no task names given");
  const fs::path src = dir / "source";
  if (!fs::is_directory(src)) throw Error("missing source directory " + src.string());
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(src))
    if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw Error("empty dataset: no PNG files in " + src.string());

  PairedDataset d;
  d.task_names = tasks;
  d.targets.resize(tasks.size());
  for (const auto& name : names) {
    for (const auto& t : tasks)
      if (!fs::exists(dir / t / name)) throw Error("missing target file " + (dir / t / name).string());
  }
  for (const auto& name : names) {
    d.ids.push_back(fs::path(name).stem().string());
    d.sources.push_back(read_png(src / name));
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      auto img = read_png(dir / tasks[t] / name);
      if (img.shape() != d.sources.back().shape())
        throw ShapeError("dimension mismatch: " + (dir / tasks[t] / name).string() + " is " + to_string(img.shape()) +
                         ", source is " + to_string(d.sources.back().shape()));
      d.targets[t].push_back(std::move(img));
    }
  }
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Sampling

/// Seeded epoch-wise shuffling over n items. Batch b of the stream is a pure
/// function of (n, batch, seed, stream, b); the last batch of an epoch may be
/// short, so an epoch has ceil(n / batch) batches.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed, std::uint64_t stream_tag = stream::paired)
      : n_(n), batch_(batch), seed_(seed), stream_(stream_tag) {
    if (n == 0) throw Error("sampler over an empty dataset");
    if (batch == 0) throw Error("batch size must be positive");
    if (batch > n) throw Error("batch size " + std::to_string(batch) + " exceeds dataset size " + std::to_string(n));
  }

  std::size_t batches_per_epoch() const { return (n_ + batch_ - 1) / batch_; }

  std::vector<std::size_t> batch(std::uint64_t b) const {
    const std::uint64_t epoch = b / batches_per_epoch();
    const std::size_t pos = static_cast<std::size_t>(b % batches_per_epoch()) * batch_;
    const auto& perm = permutation(epoch);
    const std::size_t end = std::min(n_, pos + batch_);
    return {perm.begin() + static_cast<std::ptrdiff_t>(pos), perm.begin() + static_cast<std::ptrdiff_t>(end)};
  }

 private:
  const std::vector<std::size_t>& permutation(std::uint64_t epoch) const {
    if (cached_epoch_ != epoch || perm_.empty()) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      auto rng = derive_rng(seed_, {stream_, epoch});
      std::shuffle(perm_.begin(), perm_.end(), rng);
      cached_epoch_ = epoch;
    }
    return perm_;
  }

  std::size_t n_, batch_;
  std::uint64_t seed_, stream_;
  mutable std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  mutable std::vector<std::size_t> perm_;
};

/// Independent source and target index streams (no alignment between them).
class UnpairedSampler {
 public:
  UnpairedSampler(std::size_t n_source, std::size_t n_target, std::size_t batch, std::uint64_t seed)
      : source_(n_source, batch, seed, stream::unpaired_source), target_(n_target, batch, seed, stream::unpaired_target) {}

  std::vector<std::size_t> source_batch(std::uint64_t b) const { return source_.batch(b); }
  std::vector<std::size_t> target_batch(std::uint64_t b) const { return target_.batch(b); }
  const BatchSampler& source() const { return source_; }
  const BatchSampler& target() const { return target_; }

 private:
  BatchSampler source_, target_;
};

}  // namespace gsgn
