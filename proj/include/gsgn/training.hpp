#pragma once

// Supervised (one-to-one, single-model-for-all, multitask) and unpaired
// two-cycle adversarial training with seeded, resumable state.
//
// Every random draw is derived from (seed, stream, iteration, ...), so a run
// resumed from a checkpoint at iteration k continues exactly like an
// uninterrupted run.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>

#include "gsgn/checkpoint.hpp"
#include "gsgn/data.hpp"
#include "gsgn/losses.hpp"
#include "gsgn/metrics.hpp"

namespace gsgn {

enum class TrainMode { supervised_single, supervised_all, supervised_multitask, unpaired_single, unpaired_multitask };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::supervised_single: return "supervised-single";
    case TrainMode::supervised_all: return "supervised-all";
    case TrainMode::supervised_multitask: return "supervised-multitask";
    case TrainMode::unpaired_single: return "unpaired-single";
    case TrainMode::unpaired_multitask: return "unpaired-multitask";
  }
  return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
  for (auto m : {TrainMode::supervised_single, TrainMode::supervised_all, TrainMode::supervised_multitask,
                 TrainMode::unpaired_single, TrainMode::unpaired_multitask})
    if (to_string(m) == s) return m;
  throw Error("unknown training mode '" + s + "'");
}

inline bool is_unpaired(TrainMode m) { return m == TrainMode::unpaired_single || m == TrainMode::unpaired_multitask; }
inline bool is_multitask(TrainMode m) {
  return m == TrainMode::supervised_multitask || m == TrainMode::unpaired_multitask;
}

struct TrainConfig {
  TrainMode mode = TrainMode::supervised_single;
  std::string task;  // single-task modes; empty selects the first task
  std::size_t iterations = 1000;
  std::size_t batch_size = 4;
  double learning_rate = 1e-4;
  double beta1_supervised = 0.9;
  double beta1_adversarial = 0.5;
  double beta2 = 0.999;
  std::size_t critic_ratio = 30;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;
  std::size_t checkpoint_every = 0;
  std::size_t crop = 0;  // square random training crops; 0 trains on full images
  ModelConfig model = ModelConfig::desk();
  CriticConfig critic = CriticConfig::desk();
  std::string output_dir;  // empty: nothing written to disk

  void validate() const {
    if (iterations == 0) throw Error("iterations must be positive");
    if (batch_size == 0) throw Error("batch_size must be positive");
    if (critic_ratio == 0) throw Error("critic_ratio must be at least 1");
    if (!(learning_rate >= 0.0)) throw Error("learning_rate must be non-negative");
    weights.validate();
    model.validate();
    if (crop && crop % model.spatial_multiple() != 0) throw Error("crop must be divisible by 2^levels");
    if (crop && is_unpaired(mode) && crop % critic.spatial_multiple() != 0)
      throw Error("crop must be divisible by the critic's downsampling factor");
  }
};

namespace detail {
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& what) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw Error("unknown " + what + " field '" + key + "'");
  }
}
}  // namespace detail

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)},
                     {"task", c.task},
                     {"iterations", c.iterations},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"beta1_supervised", c.beta1_supervised},
                     {"beta1_adversarial", c.beta1_adversarial},
                     {"beta2", c.beta2},
                     {"critic_ratio", c.critic_ratio},
                     {"weights", c.weights},
                     {"seed", c.seed},
                     {"eval_every", c.eval_every},
                     {"checkpoint_every", c.checkpoint_every},
                     {"crop", c.crop},
                     {"model", c.model},
                     {"critic", c.critic},
                     {"output_dir", c.output_dir}};
}

/// Field-for-field; unknown keys are errors, missing keys keep defaults.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  detail::reject_unknown_keys(j,
                              {"mode", "task", "iterations", "batch_size", "learning_rate", "beta1_supervised",
                               "beta1_adversarial", "beta2", "critic_ratio", "weights", "seed", "eval_every",
                               "checkpoint_every", "crop", "model", "critic", "output_dir"},
                              "training config");
  TrainConfig d;
  c.mode = parse_train_mode(j.value("mode", to_string(d.mode)));
  c.task = j.value("task", d.task);
  c.iterations = j.value("iterations", d.iterations);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.beta1_supervised = j.value("beta1_supervised", d.beta1_supervised);
  c.beta1_adversarial = j.value("beta1_adversarial", d.beta1_adversarial);
  c.beta2 = j.value("beta2", d.beta2);
  c.critic_ratio = j.value("critic_ratio", d.critic_ratio);
  if (j.contains("weights")) {
    detail::reject_unknown_keys(j["weights"],
                                {"cycle", "identity", "adversarial", "conditional", "gradient_penalty", "penalty_form"},
                                "loss weight");
    c.weights = j["weights"].get<LossWeights>();
  }
  c.seed = j.value("seed", d.seed);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.crop = j.value("crop", d.crop);
  if (j.contains("model")) {
    detail::reject_unknown_keys(j["model"],
                                {"levels", "base_channels", "level_channel_factor", "blocks_per_level",
                                 "use_global_features", "norm_mode", "task_count", "latent_w_dim", "mapping_depth",
                                 "global_residual", "gate_reduction", "zero_init_output"},
                                "model config");
    nlohmann::json merged = d.model;
    merged.update(j["model"]);
    c.model = merged.get<ModelConfig>();
  } else {
    c.model = d.model;
  }
  if (j.contains("critic")) {
    detail::reject_unknown_keys(j["critic"], {"widths"}, "critic config");
    nlohmann::json merged = d.critic;
    merged.update(j["critic"]);
    c.critic = merged.get<CriticConfig>();
  } else {
    c.critic = d.critic;
  }
  c.output_dir = j.value("output_dir", d.output_dir);
}

// ---------------------------------------------------------------------------
// RunLog

/// Line-delimited JSON records (iteration, losses, metrics). Wall-clock
/// timings go to a separate stream so reruns produce identical records.
class RunLog {
 public:
  void open(const std::filesystem::path& records, const std::filesystem::path& timings, bool append) {
    if (records.has_parent_path()) std::filesystem::create_directories(records.parent_path());
    const auto mode = append ? std::ios::app : std::ios::trunc;
    records_file_ = std::make_unique<std::ofstream>(records, mode);
    timings_file_ = std::make_unique<std::ofstream>(timings, mode);
    if (!*records_file_ || !*timings_file_) throw Error("cannot open run log " + records.string());
  }

  void record(const nlohmann::json& r) {
    records_.push_back(r);
    if (records_file_) (*records_file_) << r.dump() << '\n' << std::flush;
  }

  void timing(const nlohmann::json& r) {
    if (timings_file_) (*timings_file_) << r.dump() << '\n';
  }

  const std::vector<nlohmann::json>& records() const { return records_; }

  std::string text() const {
    std::string out;
    for (const auto& r : records_) out += r.dump() + "\n";
    return out;
  }

 private:
  std::vector<nlohmann::json> records_;
  std::unique_ptr<std::ofstream> records_file_, timings_file_;
};

// ---------------------------------------------------------------------------
// Steps

inline Tensor<float> one_hot(const std::vector<std::size_t>& tasks, std::size_t K) {
  std::vector<float> v(tasks.size() * K, 0.0f);
  for (std::size_t n = 0; n < tasks.size(); ++n) {
    if (tasks[n] >= K) throw Error("task index out of range");
    v[n * K + tasks[n]] = 1.0f;
  }
  return Tensor<float>(Shape{tasks.size(), K}, std::move(v));
}

/// One Adam step on log10(max(MSE, 1e-10)). Returns the objective value.
/// `z` is required for adaptive models (one row per sample).
template <class T>
double supervised_step(Gsgn<T>& model, Adam<T>& opt, const Tensor<T>& x, const Tensor<T>& y,
                       const Tensor<T>& z = Tensor<T>()) {
  opt.zero_grad();
  auto out = model.forward(x, z);
  auto loss = supervised_objective(out, y);
  const double value = loss.item();
  if (!std::isfinite(value)) throw NumericError("non-finite supervised loss");
  backward(loss);
  opt.step();
  opt.zero_grad();
  return value;
}

struct CycleStepStats {
  std::size_t critic_updates = 0;
  std::vector<double> grad_norms;  // mean ||dD/dy|| per critic update (both critics)
  double critic_loss = 0.0;        // mean over updates, summed over both critics
  double cycle = 0.0, identity = 0.0, adversarial_literal = 0.0, conditional = 0.0;
  double generator_total = 0.0;
  double classifier = 0.0;
  bool classifier_updated = false;
};

/// Networks and optimizers of the two-cycle setup. G_st maps source to target
/// (conditioned on z in multitask mode); G_ts maps target to source.
struct CycleNetworks {
  Gsgn<float> g_st;
  Gsgn<float> g_ts;
  Critic<float> d_s;
  Critic<float> d_t;
  std::optional<Classifier<float>> classifier;
};

/// Unpaired image pools: each entry is an image and, for targets, its task.
struct UnpairedPools {
  std::vector<const Image*> sources;
  std::vector<const Image*> targets;
  std::vector<std::size_t> target_tasks;
  std::size_t task_count = 1;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Runs `g` over CHW images in batches (padding to the model's multiple and
/// cropping back). `tasks` gives each image's one-hot task for adaptive models.
inline std::vector<Image> predict_images(const Gsgn<float>& g, const std::vector<const Image*>& images,
                                         const std::vector<std::size_t>& tasks, std::size_t batch = 16) {
  std::vector<Image> out;
  out.reserve(images.size());
  const std::size_t m = g.config().spatial_multiple();
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t end = std::min(images.size(), start + batch);
    std::vector<Image> chunk;
    std::vector<std::size_t> chunk_tasks;
    std::size_t h = images[start]->size(1), w = images[start]->size(2);
    bool uniform = true;
    for (std::size_t i = start; i < end; ++i) uniform = uniform && images[i]->size(1) == h && images[i]->size(2) == w;
    if (!uniform) {
      for (std::size_t i = start; i < end; ++i) {
        auto one = predict_images(g, {images[i]}, {tasks.empty() ? 0 : tasks[i]}, 1);
        out.push_back(std::move(one[0]));
      }
      continue;
    }
    for (std::size_t i = start; i < end; ++i) {
      chunk.push_back(pad_to_multiple(*images[i], m).image);
      if (!tasks.empty()) chunk_tasks.push_back(tasks[i]);
    }
    Tensor<float> z;
    if (g.conditional()) {
      if (chunk_tasks.size() != chunk.size()) throw Error("adaptive model needs a task per image");
      z = one_hot(chunk_tasks, g.config().task_count);
    }
    auto y = g.enhance(stack(chunk), z);
    for (std::size_t n = 0; n < chunk.size(); ++n) out.push_back(crop(unstack(y, n), h, w));
  }
  return out;
}

/// Scores every (image, task) pair of `data` whose task is selected. For an
/// adaptive model `task_to_z` maps dataset task t to the model's z index.
inline MetricReport evaluate_generator(const Gsgn<float>& g, const PairedDataset& data,
                                       const std::vector<std::size_t>& selected_tasks,
                                       const std::vector<std::size_t>& task_to_z = {}) {
  MetricReport report;
  std::vector<const Image*> srcs;
  for (const auto& s : data.sources) srcs.push_back(&s);
  std::optional<std::vector<Image>> shared;
  for (std::size_t t : selected_tasks) {
    std::vector<Image> preds;
    if (g.conditional()) {
      const std::size_t zi = task_to_z.empty() ? t : task_to_z.at(t);
      preds = predict_images(g, srcs, std::vector<std::size_t>(srcs.size(), zi));
    } else {
      if (!shared) shared = predict_images(g, srcs, {});
      preds = *shared;
    }
    for (std::size_t i = 0; i < srcs.size(); ++i)
      report.add({data.ids[i], data.task_names[t], psnr(preds[i], data.targets[t][i]), ssim(preds[i], data.targets[t][i])});
  }
  return report;
}

/// Do-nothing baseline: the source image scored against each selected target.
inline MetricReport evaluate_identity_baseline(const PairedDataset& data, const std::vector<std::size_t>& tasks) {
  MetricReport report;
  for (std::size_t t : tasks)
    for (std::size_t i = 0; i < data.image_count(); ++i)
      report.add({data.ids[i], data.task_names[t], psnr(data.sources[i], data.targets[t][i]),
                  ssim(data.sources[i], data.targets[t][i])});
  return report;
}

inline std::vector<std::size_t> all_tasks(const PairedDataset& d) {
  std::vector<std::size_t> t(d.task_count());
  std::iota(t.begin(), t.end(), std::size_t{0});
  return t;
}

/// Mean PSNR(x, G_ts(G_st(x, z))) over sources and the given z indices.
inline double cycle_reconstruction_psnr(const Gsgn<float>& g_st, const Gsgn<float>& g_ts,
                                        const std::vector<const Image*>& sources, std::size_t task_count) {
  double total = 0.0;
  std::size_t count = 0;
  const std::size_t passes = g_st.conditional() ? task_count : 1;
  for (std::size_t t = 0; t < passes; ++t) {
    auto fake = predict_images(g_st, sources, std::vector<std::size_t>(sources.size(), t));
    std::vector<const Image*> fp;
    for (const auto& f : fake) fp.push_back(&f);
    auto back = predict_images(g_ts, fp, {});
    for (std::size_t i = 0; i < sources.size(); ++i, ++count) total += psnr(back[i], *sources[i]);
  }
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Trainer

class Trainer {
 public:
  /// Fresh run. `val` is used when eval_every > 0.
  Trainer(TrainConfig config, PairedDataset train, std::optional<PairedDataset> val = std::nullopt)
      : config_(std::move(config)), train_(std::move(train)), val_(std::move(val)) {
    setup();
    open_log(false);
  }

  /// Resumes from a checkpoint written by checkpoint(); the training config is
  /// read from the checkpoint.
  Trainer(const Checkpoint& ck, PairedDataset train, std::optional<PairedDataset> val = std::nullopt)
      : config_(ck.metadata.at("train_config").get<TrainConfig>()), train_(std::move(train)), val_(std::move(val)) {
    setup();
    restore(ck);
    open_log(true);
  }

  const TrainConfig& config() const { return config_; }
  std::size_t iteration() const { return iteration_; }
  RunLog& log() { return log_; }
  const std::vector<std::string>& task_names() const { return model_tasks_; }
  Gsgn<float>& generator() { return cycle_ ? cycle_->g_st : *model_; }
  CycleNetworks* cycle_networks() { return cycle_ ? cycle_.get() : nullptr; }
  const UnpairedPools& unpaired_pools() const { return pools_; }
  const std::vector<double>& critic_grad_norms() const { return grad_norms_; }
  std::size_t critic_updates() const { return critic_updates_; }
  std::optional<double> best_val_psnr() const { return best_val_; }
  const std::optional<Checkpoint>& best_checkpoint() const { return best_; }

  /// Moves the end of the run; resuming past the original budget continues
  /// the same sample and crop streams.
  void set_iterations(std::size_t total) {
    if (total < iteration_) throw Error("cannot end a run before its current iteration");
    config_.iterations = total;
  }

  /// Runs to config().iterations.
  void run() { run_until(config_.iterations); }

  void run_until(std::size_t target) {
    target = std::min(target, config_.iterations);
    while (iteration_ < target) {
      const auto t0 = std::chrono::steady_clock::now();
      nlohmann::json rec{{"iteration", iteration_ + 1}};
      if (cycle_) {
        auto s = cycle_step_at(iteration_);
        rec["critic_updates"] = s.critic_updates;
        rec["critic_loss"] = s.critic_loss;
        rec["gp_grad_norms"] = s.grad_norms;
        rec["cycle"] = s.cycle;
        rec["identity"] = s.identity;
        rec["adversarial"] = s.adversarial_literal;
        rec["generator_total"] = s.generator_total;
        if (cycle_->classifier) {
          rec["conditional"] = s.conditional;
          rec["classifier"] = s.classifier;
        }
      } else {
        const double loss = supervised_step_at(iteration_);
        rec["loss"] = loss;
        rec["train_psnr"] = -10.0 * loss;
      }
      ++iteration_;
      log_.record(rec);
      if (config_.eval_every && iteration_ % config_.eval_every == 0) validate_now();
      if (config_.checkpoint_every && iteration_ % config_.checkpoint_every == 0) save_latest();
      log_.timing({{"iteration", iteration_},
                   {"ms", std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()}});
    }
    if (iteration_ == config_.iterations && !config_.output_dir.empty()) save_latest();
  }

  /// Full training state: every network, optimizer moments, iteration.
  Checkpoint checkpoint() {
    Checkpoint ck;
    ck.config = generator().config();
    ck.task_names = model_tasks_;
    ck.metadata = {{"mode", to_string(config_.mode)}, {"train_config", config_}, {"critic_config", config_.critic}};
    nlohmann::json opt_steps;
    store_module(ck, kGeneratorPrefix, generator());
    if (cycle_) {
      store_module(ck, "generator_inverse.", cycle_->g_ts);
      store_module(ck, "critic_s.", cycle_->d_s);
      store_module(ck, "critic_t.", cycle_->d_t);
      if (cycle_->classifier) store_module(ck, "classifier.", *cycle_->classifier);
      ck.metadata["generator_inverse_config"] = cycle_->g_ts.config();
    }
    for (auto& [name, opt] : optimizers()) {
      store_adam(ck, "adam." + name + ".", *opt);
      opt_steps[name] = opt->step_count();
    }
    ck.training = {{"iteration", iteration_},
                   {"optimizer_steps", opt_steps},
                   {"critic_updates", critic_updates_},
                   {"best_val_psnr", best_val_ ? nlohmann::json(*best_val_) : nlohmann::json()}};
    return ck;
  }

  /// Inference checkpoint holding only the (source-to-target) generator.
  Checkpoint generator_checkpoint() {
    auto ck = make_generator_checkpoint(generator(), model_tasks_);
    ck.metadata = {{"mode", to_string(config_.mode)}, {"iteration", iteration_}};
    return ck;
  }

  /// Validation report on `data` (targets of the trained task(s)).
  MetricReport evaluate(const PairedDataset& data) {
    return evaluate_generator(generator(), data, eval_tasks(data), eval_z_map(data));
  }

  /// Exposed for tests: the generator update and critic updates for one
  /// iteration index without advancing the counter.
  CycleStepStats cycle_step_at(std::size_t it) {
    if (!cycle_) throw Error("cycle_step in a supervised mode");
    auto& net = *cycle_;
    CycleStepStats stats;
    const std::size_t B = config_.batch_size, K = pools_.task_count;
    const auto& W = config_.weights;
    const bool conditional = net.g_st.conditional();

    auto random_tasks = [&](std::uint64_t a, std::uint64_t b) {
      std::vector<std::size_t> t(B);
      auto rng = derive_rng(config_.seed, {stream::task, it, a, b});
      std::uniform_int_distribution<std::size_t> pick(0, K - 1);
      for (auto& x : t) x = pick(rng);
      return t;
    };
    auto z_of = [&](const std::vector<std::size_t>& tasks) {
      return conditional ? one_hot(tasks, K) : Tensor<float>();
    };

    // Critic updates: fresh batches, fresh fakes, fresh interpolation coefficients.
    auto d_params = d_opt_->parameter_list();
    for (std::size_t r = 0; r < config_.critic_ratio; ++r) {
      const std::uint64_t draw = static_cast<std::uint64_t>(it) * (config_.critic_ratio + 1) + r;
      auto [xs, xt, xt_tasks] = unpaired_batch(draw);
      Tensor<float> fake_t, fake_s;
      {
        NoGradGuard ng;
        fake_t = net.g_st.forward(xs, z_of(random_tasks(r, 0)));
        fake_s = net.g_ts.forward(xt);
      }
      auto u_rng = derive_rng(config_.seed, {stream::penalty, it, r});
      auto u_t = Tensor<float>::uniform(Shape{B}, u_rng);
      auto u_s = Tensor<float>::uniform(Shape{B}, u_rng);
      auto pen_t = gradient_penalty(net.d_t, xt, fake_t, u_t);
      auto pen_s = gradient_penalty(net.d_s, xs, fake_s, u_s);
      auto loss_t = critic_loss(mean(net.d_t(xt)), mean(net.d_t(fake_t)), pen_t.lambda, W);
      auto loss_s = critic_loss(mean(net.d_s(xs)), mean(net.d_s(fake_s)), pen_s.lambda, W);
      auto loss = add(loss_t, loss_s);
      auto grads = grad(loss, d_params);
      d_opt_->step(grads);
      double norm_sum = 0.0;
      for (float v : pen_t.grad_norm.values()) norm_sum += v;
      for (float v : pen_s.grad_norm.values()) norm_sum += v;
      const double mean_norm = norm_sum / static_cast<double>(2 * B);
      stats.grad_norms.push_back(mean_norm);
      grad_norms_.push_back(mean_norm);
      stats.critic_loss += loss.item();
      ++stats.critic_updates;
      ++critic_updates_;
    }
    stats.critic_loss /= static_cast<double>(stats.critic_updates);

    // Generator update over both cycles.
    const std::uint64_t draw = static_cast<std::uint64_t>(it) * (config_.critic_ratio + 1) + config_.critic_ratio;
    auto [xs, xt, xt_tasks] = unpaired_batch(draw);
    {
      auto z = z_of(random_tasks(config_.critic_ratio, 1));
      auto fake_t = net.g_st.forward(xs, z);
      auto cyc_s = net.g_ts.forward(fake_t);
      auto fake_s = net.g_ts.forward(xt);
      auto cyc_t = net.g_st.forward(fake_s, z_of(xt_tasks));
      GeneratorLosses<float> parts;
      parts.cycle = cycle_loss(xs, cyc_s, xt, cyc_t);
      parts.identity = identity_loss(xs, fake_t, xt, fake_s);
      auto d_fake_t = net.d_t(fake_t);
      auto d_fake_s = net.d_s(fake_s);
      parts.adversarial = add(adversarial_loss(d_fake_t), adversarial_loss(d_fake_s));
      stats.adversarial_literal = adversarial_loss_literal(d_fake_t).item() + adversarial_loss_literal(d_fake_s).item();
      LossWeights w = W;
      if (net.classifier && W.conditional > 0.0) {
        parts.conditional = conditional_loss(z, (*net.classifier)(fake_t));
        stats.conditional = parts.conditional.item();
      } else {
        w.conditional = 0.0;
      }
      auto total = total_generator_loss(parts, w);
      stats.cycle = parts.cycle.item();
      stats.identity = parts.identity.item();
      stats.generator_total = total.item();
      // All generator weights zero: the objective is a constant.
      if (total.requires_grad()) g_opt_->step(grad(total, g_opt_->parameter_list()));
    }

    // Classifier update on real targets with their task labels.
    if (net.classifier && W.conditional > 0.0) {
      auto loss = conditional_loss(one_hot(xt_tasks, K), (*net.classifier)(xt));
      auto grads = grad(loss, c_opt_->parameter_list());
      c_opt_->step(grads);
      stats.classifier = loss.item();
      stats.classifier_updated = true;
    }
    return stats;
  }

  /// Supervised batch for iteration `it`: (x, y, z). z is undefined for
  /// unconditioned models.
  std::tuple<Tensor<float>, Tensor<float>, Tensor<float>> supervised_batch(std::size_t it) const {
    auto idx = sampler_->batch(it);
    std::vector<Image> xs, ys;
    std::vector<std::size_t> tasks;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      PairedSample s = pair_view_.sample(idx[k]);
      auto [top, left] = crop_origin(*s.source, it, k, 0);
      xs.push_back(maybe_crop(*s.source, top, left));
      ys.push_back(maybe_crop(*s.target, top, left));
      tasks.push_back(s.task);
    }
    Tensor<float> z;
    if (generator_const().conditional()) z = one_hot(tasks, pair_view_.task_count());
    return {stack(xs), stack(ys), z};
  }

 private:
  using OptList = std::vector<std::pair<std::string, Adam<float>*>>;

  const Gsgn<float>& generator_const() const { return cycle_ ? cycle_->g_st : *model_; }

  void setup() {
    config_.validate();
    train_.validate();
    const std::size_t K = train_.task_count();
    ModelConfig mc = config_.model;
    if (is_multitask(config_.mode)) {
      mc.norm_mode = NormMode::adaptive;
      mc.task_count = K;
      model_tasks_ = train_.task_names;
    } else {
      if (mc.norm_mode == NormMode::adaptive)
        throw Error("adaptive normalization requires a multitask training mode");
      mc.task_count = 1;
    }
    std::optional<std::size_t> single;
    if (config_.mode == TrainMode::supervised_single || config_.mode == TrainMode::unpaired_single) {
      single = config_.task.empty() ? 0 : train_.task_index(config_.task);
      model_tasks_ = {train_.task_names[*single]};
    }
    if (config_.mode == TrainMode::supervised_all) model_tasks_ = {"all"};
    const std::uint64_t init_seed = derive_seed(config_.seed, {stream::init});

    if (!is_unpaired(config_.mode)) {
      model_ = std::make_unique<Gsgn<float>>(mc, init_seed);
      pair_view_ = single ? train_.only_task(*single) : train_;
      sampler_ = std::make_unique<BatchSampler>(pair_view_.size(), config_.batch_size, config_.seed);
      g_opt_ = std::make_unique<Adam<float>>(named_parameters(*model_),
                                             AdamConfig{config_.learning_rate, config_.beta1_supervised, config_.beta2});
      g_opt_->set_requires_grad(true);
      return;
    }

    // Unpaired: even-indexed images supply sources, odd-indexed images supply
    // targets, so no source has its own styled counterpart in the target pool.
    pools_ = UnpairedPools{};
    pools_.task_count = single ? 1 : K;
    for (std::size_t i = 0; i < train_.image_count(); ++i) {
      if (i % 2 == 0) {
        pools_.sources.push_back(&train_.sources[i]);
      } else if (single) {
        pools_.targets.push_back(&train_.targets[*single][i]);
        pools_.target_tasks.push_back(0);
      } else {
        for (std::size_t t = 0; t < K; ++t) {
          pools_.targets.push_back(&train_.targets[t][i]);
          pools_.target_tasks.push_back(t);
        }
      }
    }
    if (pools_.sources.empty() || pools_.targets.empty()) throw Error("unpaired training needs at least two images");
    unpaired_ = std::make_unique<UnpairedSampler>(pools_.sources.size(), pools_.targets.size(), config_.batch_size,
                                                  config_.seed);
    ModelConfig inverse = mc;
    if (inverse.norm_mode == NormMode::adaptive) inverse.norm_mode = NormMode::instance;
    inverse.task_count = 1;
    cycle_ = std::unique_ptr<CycleNetworks>(new CycleNetworks{
        Gsgn<float>(mc, derive_seed(init_seed, {1})), Gsgn<float>(inverse, derive_seed(init_seed, {2})),
        Critic<float>(config_.critic, derive_seed(init_seed, {3})),
        Critic<float>(config_.critic, derive_seed(init_seed, {4})), std::nullopt});
    if (!single && config_.weights.conditional > 0.0)
      cycle_->classifier.emplace(K, config_.critic, derive_seed(init_seed, {5}));

    const AdamConfig adv{config_.learning_rate, config_.beta1_adversarial, config_.beta2};
    NamedTensors<float> gp, dp;
    for (auto& [n, t] : named_parameters(cycle_->g_st)) gp.emplace_back("st." + n, t);
    for (auto& [n, t] : named_parameters(cycle_->g_ts)) gp.emplace_back("ts." + n, t);
    for (auto& [n, t] : named_parameters(cycle_->d_s)) dp.emplace_back("s." + n, t);
    for (auto& [n, t] : named_parameters(cycle_->d_t)) dp.emplace_back("t." + n, t);
    g_opt_ = std::make_unique<Adam<float>>(gp, adv);
    d_opt_ = std::make_unique<Adam<float>>(dp, adv);
    g_opt_->set_requires_grad(true);
    d_opt_->set_requires_grad(true);
    if (cycle_->classifier) {
      c_opt_ = std::make_unique<Adam<float>>(named_parameters(*cycle_->classifier), adv);
      c_opt_->set_requires_grad(true);
    }
  }

  OptList optimizers() {
    OptList l{{"generator", g_opt_.get()}};
    if (d_opt_) l.emplace_back("critic", d_opt_.get());
    if (c_opt_) l.emplace_back("classifier", c_opt_.get());
    return l;
  }

  void restore(const Checkpoint& ck) {
    load_module(ck, kGeneratorPrefix, generator());
    if (cycle_) {
      load_module(ck, "generator_inverse.", cycle_->g_ts);
      load_module(ck, "critic_s.", cycle_->d_s);
      load_module(ck, "critic_t.", cycle_->d_t);
      if (cycle_->classifier) load_module(ck, "classifier.", *cycle_->classifier);
    }
    const auto& tr = ck.training;
    for (auto& [name, opt] : optimizers())
      load_adam(ck, "adam." + name + ".", *opt, tr.at("optimizer_steps").at(name).get<std::uint64_t>());
    iteration_ = tr.at("iteration").get<std::size_t>();
    critic_updates_ = tr.value("critic_updates", std::size_t{0});
    if (!tr.at("best_val_psnr").is_null()) best_val_ = tr.at("best_val_psnr").get<double>();
  }

  void open_log(bool append) {
    if (config_.output_dir.empty()) return;
    const std::filesystem::path dir(config_.output_dir);
    log_.open(dir / "runlog.jsonl", dir / "timings.jsonl", append);
  }

  std::pair<std::size_t, std::size_t> crop_origin(const Image& img, std::uint64_t it, std::uint64_t k,
                                                  std::uint64_t which) const {
    if (!config_.crop) return {0, 0};
    const std::size_t H = img.size(1), W = img.size(2), c = config_.crop;
    if (c > H || c > W) throw Error("crop size exceeds image size");
    auto rng = derive_rng(config_.seed, {stream::crop, it, k, which});
    std::uniform_int_distribution<std::size_t> ty(0, H - c), tx(0, W - c);
    const std::size_t top = ty(rng);
    return {top, tx(rng)};
  }

  Image maybe_crop(const Image& img, std::size_t top, std::size_t left) const {
    if (!config_.crop) return img;
    return crop(img, config_.crop, config_.crop, top, left);
  }

  std::tuple<Tensor<float>, Tensor<float>, std::vector<std::size_t>> unpaired_batch(std::uint64_t draw) const {
    auto si = unpaired_->source_batch(draw);
    auto ti = unpaired_->target_batch(draw);
    // Fixed batch size keeps per-sample penalties and z rows aligned.
    for (std::size_t j = 0; si.size() < config_.batch_size; ++j) si.push_back(si[j]);
    for (std::size_t j = 0; ti.size() < config_.batch_size; ++j) ti.push_back(ti[j]);
    std::vector<Image> xs, xt;
    std::vector<std::size_t> tasks;
    for (std::size_t k = 0; k < si.size(); ++k) {
      const Image& s = *pools_.sources[si[k]];
      auto [top, left] = crop_origin(s, draw, k, 1);
      xs.push_back(maybe_crop(s, top, left));
    }
    for (std::size_t k = 0; k < ti.size(); ++k) {
      const Image& t = *pools_.targets[ti[k]];
      auto [top, left] = crop_origin(t, draw, k, 2);
      xt.push_back(maybe_crop(t, top, left));
      tasks.push_back(pools_.target_tasks[ti[k]]);
    }
    return {stack(xs), stack(xt), tasks};
  }

  double supervised_step_at(std::size_t it) {
    auto [x, y, z] = supervised_batch(it);
    return supervised_step(*model_, *g_opt_, x, y, z);
  }

  std::vector<std::size_t> eval_tasks(const PairedDataset& data) const {
    if (config_.mode == TrainMode::supervised_single || config_.mode == TrainMode::unpaired_single)
      return {data.task_index(model_tasks_.front())};
    return all_tasks(data);
  }

  std::vector<std::size_t> eval_z_map(const PairedDataset& data) const {
    if (!generator_const().conditional()) return {};
    std::vector<std::size_t> map;
    for (const auto& name : data.task_names) {
      auto it = std::find(model_tasks_.begin(), model_tasks_.end(), name);
      if (it == model_tasks_.end()) throw Error("dataset task '" + name + "' unknown to the model");
      map.push_back(static_cast<std::size_t>(it - model_tasks_.begin()));
    }
    return map;
  }

  void validate_now() {
    if (!val_) return;
    auto report = evaluate(*val_);
    nlohmann::json rec{{"iteration", iteration_}, {"val_psnr", report.average().psnr_db},
                       {"val_ssim", report.average().ssim}};
    if (cycle_) {
      std::vector<const Image*> srcs;
      for (const auto& s : val_->sources) srcs.push_back(&s);
      rec["val_cycle_psnr"] = cycle_reconstruction_psnr(cycle_->g_st, cycle_->g_ts, srcs, pools_.task_count);
    }
    log_.record(rec);
    const double score = report.average().psnr_db;
    if (!best_val_ || score > *best_val_) {
      best_val_ = score;
      best_ = generator_checkpoint();
      if (!config_.output_dir.empty()) best_->save(std::filesystem::path(config_.output_dir) / "best.gsgn");
    }
  }

  void save_latest() {
    if (config_.output_dir.empty()) return;
    const std::filesystem::path dir(config_.output_dir);
    checkpoint().save(dir / "latest.gsgn");
    generator_checkpoint().save(dir / "generator.gsgn");
  }

  TrainConfig config_;
  PairedDataset train_;
  std::optional<PairedDataset> val_;
  PairedDataset pair_view_;
  std::vector<std::string> model_tasks_;
  std::unique_ptr<Gsgn<float>> model_;
  std::unique_ptr<CycleNetworks> cycle_;
  std::unique_ptr<BatchSampler> sampler_;
  std::unique_ptr<UnpairedSampler> unpaired_;
  UnpairedPools pools_;
  std::unique_ptr<Adam<float>> g_opt_, d_opt_, c_opt_;
  std::size_t iteration_ = 0;
  std::size_t critic_updates_ = 0;
  std::vector<double> grad_norms_;
  std::optional<double> best_val_;
  std::optional<Checkpoint> best_;
  RunLog log_;
};

/// Runs a mode end to end and returns the inference checkpoint of the final
/// generator.
inline Checkpoint run_training(const TrainConfig& config, const PairedDataset& train,
                               std::optional<PairedDataset> val = std::nullopt, RunLog* log_out = nullptr) {
  Trainer t(config, train, std::move(val));
  t.run();
  if (log_out) *log_out = std::move(t.log());
  return t.generator_checkpoint();
}

}  // namespace gsgn
