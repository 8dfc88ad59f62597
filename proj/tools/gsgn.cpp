// gsgn: dataset synthesis, training, evaluation, enhancement, style
// interpolation and checkpoint inspection.

#include <CLI11.hpp>

#include <iostream>

#include "gsgn/gsgn.hpp"

namespace fs = std::filesystem;
using namespace gsgn;

namespace {

std::vector<float> parse_weights(const std::string& text) {
  std::vector<float> w;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw Error("style weight '" + item + "' is not a number");
    }
    if (used != item.size() || !std::isfinite(v)) throw Error("style weight '" + item + "' is not a number");
    w.push_back(static_cast<float>(v));
  }
  return w;
}

/// Named task -> one-hot; comma-separated weights -> raw z (not clamped).
Tensor<float> resolve_style(const Checkpoint& ck, const std::string& style) {
  const std::size_t K = ck.task_names.size();
  std::vector<float> z(K, 0.0f);
  auto it = std::find(ck.task_names.begin(), ck.task_names.end(), style);
  if (style.empty()) {
    z[0] = 1.0f;
  } else if (it != ck.task_names.end()) {
    z[static_cast<std::size_t>(it - ck.task_names.begin())] = 1.0f;
  } else if (style.find_first_not_of("0123456789.,-+eE ") == std::string::npos) {
    z = parse_weights(style);
    if (z.size() != K)
      throw Error("style vector has " + std::to_string(z.size()) + " weights, checkpoint has " + std::to_string(K) +
                  " styles");
  } else {
    throw Error("unknown style '" + style + "'");
  }
  return Tensor<float>(Shape{K}, std::move(z));
}

PaddedImage prepare_input(const Image& img, std::size_t edge, const ModelConfig& cfg) {
  auto p = resize_pad(img, edge);
  if (edge % cfg.spatial_multiple() != 0)
    throw Error("edge " + std::to_string(edge) + " is not divisible by 2^levels = " +
                std::to_string(cfg.spatial_multiple()));
  return p;
}

Image run_model(const Gsgn<float>& g, const PaddedImage& in, const Tensor<float>& z) {
  auto y = g.enhance(as_batch(in.image), g.conditional() ? z : Tensor<float>());
  return crop(unstack(y, 0), in.content_h, in.content_w);
}

Image contact_sheet(const std::vector<Image>& frames) {
  const std::size_t H = frames.front().size(1), W = frames.front().size(2), n = frames.size();
  std::vector<float> v(3 * H * W * n);
  for (std::size_t f = 0; f < n; ++f)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < H; ++y)
        std::copy_n(frames[f].values().data() + (c * H + y) * W, W, v.data() + (c * H + y) * (W * n) + f * W);
  return Image(Shape{3, H, W * n}, std::move(v));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GSGN / MT-GSGN image enhancement"};
  app.require_subcommand(1);

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Generate the synthetic multi-style dataset");
  std::string synth_out;
  std::size_t synth_n = 500, synth_size = 64;
  std::uint64_t synth_seed = 0;
  std::string styles_file;
  synth->add_option("--out", synth_out, "Dataset root directory")->required();
  synth->add_option("--images", synth_n, "Number of base images")->capture_default_str();
  synth->add_option("--size", synth_size, "Image side length")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--styles", styles_file, "JSON file with a list of styles (default: expertA/B/C)");

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_data, train_config, train_out, train_mode, train_task, train_resume, train_preset;
  std::size_t train_iters = 0, train_batch = 0, train_eval = 0, train_ckpt = 0, train_crop = 0, train_ratio = 0;
  std::uint64_t train_seed = 0;
  double train_lr = -1.0;
  train->add_option("--data", train_data, "Dataset root (train/ and val/ splits)")->required();
  train->add_option("--config", train_config, "Training config (.json or .toml)");
  train->add_option("--out", train_out, "Output directory for checkpoints and run log");
  train->add_option("--mode", train_mode,
                    "supervised-single | supervised-all | supervised-multitask | unpaired-single | unpaired-multitask");
  train->add_option("--task", train_task, "Task for single-task modes");
  train->add_option("--preset", train_preset, "Model preset: desk | gsgn | gsgn-no-in | gsgn-no-global-no-in | sgn2");
  train->add_option("--iterations", train_iters, "Generator iterations");
  train->add_option("--batch", train_batch, "Batch size");
  train->add_option("--lr", train_lr, "Learning rate");
  train->add_option("--critic-ratio", train_ratio, "Critic updates per generator update");
  train->add_option("--eval-every", train_eval, "Validation period (0 disables)");
  train->add_option("--checkpoint-every", train_ckpt, "Checkpoint period (0: final only)");
  train->add_option("--crop", train_crop, "Random square training crop size");
  auto* seed_opt = train->add_option("--seed", train_seed, "Seed (default 0)");
  train->add_option("--resume", train_resume, "Resume from a training checkpoint (latest.gsgn)");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  std::string eval_ckpt, eval_data, eval_split = "test", eval_out, eval_predictor = "model", eval_task;
  eval->add_option("--checkpoint", eval_ckpt, "Generator checkpoint");
  eval->add_option("--data", eval_data, "Dataset root")->required();
  eval->add_option("--split", eval_split, "Split name")->capture_default_str();
  eval->add_option("--out", eval_out, "Directory for report.csv, summary.csv, report.json")->required();
  eval->add_option("--predictor", eval_predictor, "model | source | target")
      ->check(CLI::IsMember({"model", "source", "target"}))
      ->capture_default_str();
  eval->add_option("--task", eval_task, "Restrict to one task");

  // enhance
  auto* enh = app.add_subcommand("enhance", "Enhance one image");
  std::string enh_ckpt, enh_in, enh_style, enh_out, enh_ref;
  std::size_t enh_edge = 512;
  enh->add_option("--checkpoint", enh_ckpt, "Generator checkpoint")->required();
  enh->add_option("--input", enh_in, "Input PNG")->required();
  enh->add_option("--style", enh_style, "Style name or comma-separated weights");
  enh->add_option("--output", enh_out, "Output PNG")->required();
  enh->add_option("--reference", enh_ref, "Reference PNG; prints PSNR/SSIM against it");
  enh->add_option("--edge", enh_edge, "Longer edge after resizing")->capture_default_str();

  // interpolate
  auto* interp = app.add_subcommand("interpolate", "Sweep z between two styles");
  std::string int_ckpt, int_in, int_from, int_to, int_out;
  std::size_t int_steps = 5, int_edge = 512;
  interp->add_option("--checkpoint", int_ckpt, "Generator checkpoint")->required();
  interp->add_option("--input", int_in, "Input PNG")->required();
  interp->add_option("--from", int_from, "Start style")->required();
  interp->add_option("--to", int_to, "End style")->required();
  interp->add_option("--steps", int_steps, "Number of frames (>= 2)")->capture_default_str();
  interp->add_option("--out", int_out, "Output directory")->required();
  interp->add_option("--edge", int_edge, "Longer edge after resizing")->capture_default_str();

  // inspect-checkpoint
  auto* inspect = app.add_subcommand("inspect-checkpoint", "Print checkpoint header and tensor directory");
  std::string insp_ckpt;
  inspect->add_option("checkpoint", insp_ckpt, "Checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      auto styles = default_styles();
      if (!styles_file.empty()) styles = load_config_file(styles_file).get<std::vector<SyntheticStyle>>();
      std::cerr << "seed " << synth_seed << "\n";
      auto ds = make_synthetic_dataset(synth_n, styles, synth_seed, synth_size);
      write_synthetic_dataset(synth_out, ds);
      auto base = evaluate_identity_baseline(ds.test, all_tasks(ds.test));
      std::cout << "wrote " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size()
                << " paired samples to " << synth_out << "\n";
      for (const auto& r : base.per_task())
        std::cout << "do-nothing test PSNR " << r.task << ": " << r.psnr_db << " dB\n";
      return 0;
    }

    if (train->parsed()) {
      TrainConfig cfg;
      if (!train_config.empty()) cfg = load_config_file(train_config).get<TrainConfig>();
      if (!train_preset.empty()) {
        if (train_preset == "desk") cfg.model = ModelConfig::desk();
        else if (train_preset == "gsgn") cfg.model = ModelConfig::gsgn();
        else if (train_preset == "gsgn-no-in") cfg.model = ModelConfig::gsgn_without_instance_norm();
        else if (train_preset == "gsgn-no-global-no-in") cfg.model = ModelConfig::gsgn_without_global_features_and_instance_norm();
        else if (train_preset == "sgn2") cfg.model = ModelConfig::sgn2();
        else throw Error("unknown preset '" + train_preset + "'");
      }
      if (!train_mode.empty()) cfg.mode = parse_train_mode(train_mode);
      if (!train_task.empty()) cfg.task = train_task;
      if (train_iters) cfg.iterations = train_iters;
      if (train_batch) cfg.batch_size = train_batch;
      if (train_lr >= 0.0) cfg.learning_rate = train_lr;
      if (train_ratio) cfg.critic_ratio = train_ratio;
      if (train->count("--eval-every")) cfg.eval_every = train_eval;
      if (train->count("--checkpoint-every")) cfg.checkpoint_every = train_ckpt;
      if (train->count("--crop")) cfg.crop = train_crop;
      if (seed_opt->count()) cfg.seed = train_seed;
      if (!train_out.empty()) cfg.output_dir = train_out;
      const auto tasks = discover_tasks(train_data);
      auto train_set = load_paired_dir(fs::path(train_data) / "train", tasks);
      std::optional<PairedDataset> val;
      if (fs::is_directory(fs::path(train_data) / "val")) val = load_paired_dir(fs::path(train_data) / "val", tasks);
      std::unique_ptr<Trainer> trainer;
      if (!train_resume.empty()) {
        trainer = std::make_unique<Trainer>(Checkpoint::load(train_resume), std::move(train_set), std::move(val));
        if (train_iters) trainer->set_iterations(train_iters);
        std::cerr << "resuming " << to_string(trainer->config().mode) << " at iteration " << trainer->iteration()
                  << "\n";
      } else {
        std::cerr << "mode " << to_string(cfg.mode) << ", seed " << cfg.seed << "\n";
        trainer = std::make_unique<Trainer>(cfg, std::move(train_set), std::move(val));
      }
      const std::size_t total = trainer->config().iterations;
      const std::size_t report = std::max<std::size_t>(1, total / 20);
      while (trainer->iteration() < total) {
        trainer->run_until(std::min(total, trainer->iteration() + report));
        const auto& last = trainer->log().records().back();
        std::cerr << "iteration " << trainer->iteration() << "/" << total << " " << last.dump() << "\n";
      }
      if (trainer->config().output_dir.empty())
        std::cerr << "no --out given; trained model not saved\n";
      else
        std::cout << "wrote " << (fs::path(trainer->config().output_dir) / "generator.gsgn").string() << "\n";
      return 0;
    }

    if (eval->parsed()) {
      const auto tasks = discover_tasks(eval_data, eval_split);
      const fs::path split_dir = fs::path(eval_data) / eval_split;
      if (!fs::is_directory(split_dir)) throw Error("split '" + eval_split + "' not found under " + eval_data);
      auto data = load_paired_dir(split_dir, tasks);
      std::vector<std::size_t> selected = eval_task.empty() ? all_tasks(data) : std::vector<std::size_t>{data.task_index(eval_task)};
      MetricReport report;
      if (eval_predictor == "source") {
        report = evaluate_identity_baseline(data, selected);
      } else if (eval_predictor == "target") {
        for (std::size_t t : selected)
          for (std::size_t i = 0; i < data.image_count(); ++i)
            report.add({data.ids[i], data.task_names[t], psnr(data.targets[t][i], data.targets[t][i]),
                        ssim(data.targets[t][i], data.targets[t][i])});
      } else {
        if (eval_ckpt.empty()) throw Error("--checkpoint is required with --predictor model");
        auto ck = Checkpoint::load(eval_ckpt);
        auto g = load_generator(ck);
        std::vector<std::size_t> z_map;
        if (g.conditional())
          for (const auto& name : data.task_names) {
            auto it = std::find(ck.task_names.begin(), ck.task_names.end(), name);
            if (it == ck.task_names.end()) throw Error("dataset task '" + name + "' is not in the checkpoint");
            z_map.push_back(static_cast<std::size_t>(it - ck.task_names.begin()));
          }
        report = evaluate_generator(g, data, selected, z_map);
      }
      write_file(fs::path(eval_out) / "report.csv", report.to_csv());
      write_file(fs::path(eval_out) / "summary.csv", report.summary_csv());
      write_file(fs::path(eval_out) / "report.json", report.to_json().dump(2) + "\n");
      std::cout << report.summary_csv();
      return 0;
    }

    if (enh->parsed()) {
      auto ck = Checkpoint::load(enh_ckpt);
      auto g = load_generator(ck);
      auto z = resolve_style(ck, enh_style);
      auto in = prepare_input(read_png(enh_in), enh_edge, g.config());
      auto out = run_model(g, in, z);
      write_png(enh_out, out);
      if (!enh_ref.empty()) {
        auto ref = crop(resize_pad(read_png(enh_ref), enh_edge));
        if (ref.shape() != out.shape()) throw Error("reference does not match the input's aspect ratio");
        const auto q = quantize(out);
        std::cout << "psnr_db " << psnr(q, ref) << "\nssim " << ssim(q, ref) << "\n";
      }
      return 0;
    }

    if (interp->parsed()) {
      if (int_steps < 2) throw Error("--steps must be at least 2");
      auto ck = Checkpoint::load(int_ckpt);
      auto g = load_generator(ck);
      auto za = resolve_style(ck, int_from), zb = resolve_style(ck, int_to);
      auto in = prepare_input(read_png(int_in), int_edge, g.config());
      std::vector<Image> frames;
      nlohmann::json index = nlohmann::json::array();
      for (std::size_t i = 0; i < int_steps; ++i) {
        const float a = static_cast<float>(i) / static_cast<float>(int_steps - 1);
        std::vector<float> z(za.numel());
        for (std::size_t k = 0; k < z.size(); ++k) z[k] = (1.0f - a) * za[k] + a * zb[k];
        frames.push_back(run_model(g, in, Tensor<float>(za.shape(), z)));
        char name[32];
        std::snprintf(name, sizeof name, "frame_%03zu.png", i);
        write_png(fs::path(int_out) / name, frames.back());
        index.push_back({{"file", name}, {"alpha", a}, {"z", z}});
      }
      write_png(fs::path(int_out) / "contact_sheet.png", contact_sheet(frames));
      write_file(fs::path(int_out) / "frames.json", index.dump(2) + "\n");
      for (std::size_t i = 1; i < frames.size(); ++i) {
        double d = 0.0;
        for (std::size_t k = 0; k < frames[i].numel(); ++k) d += std::abs(frames[i][k] - frames[i - 1][k]);
        std::cout << "mean_abs_diff " << i - 1 << "->" << i << " " << d / static_cast<double>(frames[i].numel()) << "\n";
      }
      return 0;
    }

    if (inspect->parsed()) {
      auto ck = Checkpoint::load(insp_ckpt);
      auto h = ck.header();
      h["content_hash"] = hex64(ck.content_hash());
      std::size_t params = 0;
      for (const auto& t : ck.names_with_prefix(kGeneratorPrefix)) params += ck.get(t).values.size();
      h["generator_parameters"] = params;
      std::cout << h.dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
