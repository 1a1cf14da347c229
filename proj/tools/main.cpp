// Command-line front end: training scenarios, evaluation, prediction,
// gradient verification, parameter counting and manifest preparation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "druseg/checkpoint.hpp"
#include "druseg/config.hpp"
#include "druseg/dataset.hpp"
#include "druseg/gradcheck.hpp"
#include "druseg/image_io.hpp"
#include "druseg/metrics.hpp"
#include "druseg/model.hpp"
#include "druseg/train.hpp"

namespace {

namespace fs = std::filesystem;
using namespace druseg;

constexpr std::uint64_t kInitTag = 0x696E6974;  // weight-init child stream

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string checkpoint;
  std::string manifest;
  std::string out_dir;
  std::int64_t workers = 0;
};

void attach_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "key=value config file");
  cmd->add_option("--set", f.sets, "override one config key (repeatable)")
      ->type_name("KEY=VALUE");
  cmd->add_option("--seed", f.seed, "training seed (train.seed)")
      ->each([&f](const std::string&) { f.seed_given = true; });
  cmd->add_option("--checkpoint", f.checkpoint,
                  "checkpoint path (data.checkpoint)");
  cmd->add_option("--manifest", f.manifest, "dataset manifest (data.manifest)");
  cmd->add_option("--out", f.out_dir, "output directory (data.out_dir)");
  cmd->add_option("--workers", f.workers, "worker count (data.workers)")
      ->check(CLI::PositiveNumber);
}

// Precedence: config file, then --set overrides in order, then the explicit
// convenience flags.
RunConfig resolve_config(const CommonFlags& f) {
  RunConfig rc;
  if (!f.config_path.empty()) rc.load_file(f.config_path);
  for (const std::string& pair : f.sets) rc.set_pair(pair);
  if (f.seed_given) rc.set("train.seed", std::to_string(f.seed));
  if (!f.checkpoint.empty()) rc.set("data.checkpoint", f.checkpoint);
  if (!f.manifest.empty()) rc.set("data.manifest", f.manifest);
  if (!f.out_dir.empty()) rc.set("data.out_dir", f.out_dir);
  if (f.workers > 0) rc.set("data.workers", std::to_string(f.workers));
  return rc;
}

// The resolved configuration goes to stdout and, when the command writes
// artifacts, to <out>/run.log. Re-running the command with these lines as a
// config file reproduces the run.
void echo_effective(const RunConfig& rc, const ModelConfig* mc,
                    const std::string& log_dir) {
  const std::vector<std::string> lines = rc.effective_lines(mc);
  std::cout << "# effective configuration\n";
  for (const std::string& line : lines) std::cout << line << "\n";
  std::cout << "# end configuration\n";
  if (!log_dir.empty()) {
    fs::create_directories(log_dir);
    const std::string path = log_dir + "/run.log";
    std::ofstream log(path);
    if (!log) throw IoError("cannot write run log: " + path);
    for (const std::string& line : lines) log << line << "\n";
  }
}

std::string require_manifest(const RunConfig& rc) {
  const std::string path = rc.manifest_path();
  if (path.empty()) {
    throw ConfigError("data.manifest is required (use --manifest)");
  }
  return path;
}

std::string require_checkpoint(const RunConfig& rc) {
  const std::string path = rc.checkpoint_path();
  if (path.empty()) {
    throw ConfigError("data.checkpoint is required (use --checkpoint)");
  }
  return path;
}

Network build_network(const ModelConfig& cfg) {
  return cfg.variant == Variant::kDenseResidualUnet
             ? build_dense_residual_unet(cfg)
             : build_unet(cfg);
}

// Manifest rows resolve relative to the manifest file, so stored paths must
// be relative to where the manifest is written (absolute as a fallback).
std::string portable_path(const fs::path& p, const fs::path& manifest_dir) {
  std::error_code ec;
  const fs::path rel = fs::relative(fs::absolute(p), manifest_dir, ec);
  return (ec || rel.empty()) ? fs::absolute(p).string() : rel.string();
}

// Resolve the output manifest location, creating its directory.
fs::path prepare_manifest_out(const std::string& requested,
                              const RunConfig& rc, std::string* out_path) {
  *out_path = requested.empty() ? rc.out_dir() + "/manifest.tsv" : requested;
  const fs::path parent = fs::path(*out_path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  return parent.empty() ? fs::current_path() : fs::absolute(parent);
}

void print_eval(const EvalReport& report) {
  std::cout << "images: " << report.per_image.size() << "\n";
  std::cout << "J (D) mean:      "
            << format_score_pair(report.mean_jaccard, report.mean_dice)
            << "\n";
  std::cout << "J (D) aggregate: "
            << format_score_pair(report.aggregate_jaccard,
                                 report.aggregate_dice)
            << "\n";
}

// pretrain and train pin direct_training; finetune pins fine_tuning.
int cmd_train_like(const CommonFlags& flags, const std::string& scenario) {
  RunConfig rc = resolve_config(flags);
  rc.set("train.scenario", scenario);
  const TrainConfig tc = rc.train();
  tc.validate();
  const std::string manifest_path = require_manifest(rc);
  const DatasetManifest manifest = load_manifest(manifest_path);

  const bool from_checkpoint = !rc.checkpoint_path().empty();
  if (scenario == "fine_tuning" && !from_checkpoint) {
    throw ConfigError(
        "fine_tuning requires a checkpoint to start from (use --checkpoint)");
  }
  Network net = [&]() -> Network {
    if (from_checkpoint) {
      return std::move(load_checkpoint_network(rc.checkpoint_path()).network);
    }
    ModelConfig fresh = rc.model();
    fresh.validate();
    Network built = build_network(fresh);
    Rng root(tc.seed);
    Rng init_rng = root.derive({kInitTag});
    built.init_params(init_rng);
    return built;
  }();
  const ModelConfig mc = net.config();
  echo_effective(rc, &mc, rc.out_dir());

  const EpochCallback logger = [](const EpochStats& s, Network&) {
    std::cout << "epoch " << s.epoch << "  train_loss=" << std::fixed
              << std::setprecision(6) << s.train_loss
              << "  val_loss=" << s.val_loss
              << (s.improved ? "  *" : "") << "\n";
    std::cout.unsetf(std::ios::fixed);
    return false;
  };
  const ScenarioResult result =
      run_scenario(net, manifest, tc, from_checkpoint, logger);

  std::cout << "stopped: " << stop_reason_name(result.train_result.stop_reason)
            << " after " << result.train_result.epochs_run << " epochs\n";
  std::cout << "best epoch " << result.train_result.best_epoch
            << "  best_val_loss=" << std::fixed << std::setprecision(6)
            << result.train_result.best_val_loss << "\n";
  std::cout.unsetf(std::ios::fixed);

  CheckpointMeta meta;
  meta.epochs_completed = result.train_result.epochs_run;
  meta.best_val_loss = result.train_result.best_val_loss;
  meta.rng_state = result.train_result.final_rng_state;
  meta.has_rng_state = true;
  const std::string ckpt_out = rc.out_dir() + "/model.ckpt";
  save_checkpoint(ckpt_out, net, meta);
  std::cout << "checkpoint: " << ckpt_out << "\n";

  if (result.has_eval) {
    print_eval(result.eval);
    const std::string report_path = rc.out_dir() + "/eval_report.tsv";
    write_report_tsv(result.eval, report_path);
    std::cout << "report: " << report_path << "\n";
  }
  return 0;
}

// Saved weights scored on the manifest's eval split, untouched.
int cmd_eval(const CommonFlags& flags) {
  RunConfig rc = resolve_config(flags);
  rc.set("train.scenario", "direct_transfer");
  const TrainConfig tc = rc.train();
  tc.validate();
  const std::string manifest_path = require_manifest(rc);
  const DatasetManifest manifest = load_manifest(manifest_path);
  LoadedNetwork loaded = load_checkpoint_network(require_checkpoint(rc));
  const ModelConfig mc = loaded.network.config();
  echo_effective(rc, &mc, rc.out_dir());

  const ScenarioResult result =
      run_scenario(loaded.network, manifest, tc, true);
  if (!result.has_eval) {
    throw ConfigError("eval: manifest has no eval rows");
  }
  print_eval(result.eval);
  const std::string report_path = rc.out_dir() + "/eval_report.tsv";
  write_report_tsv(result.eval, report_path);
  std::cout << "report: " << report_path << "\n";
  return 0;
}

// Confidence maps and binary masks, at network resolution and scaled back
// to each image's own resolution.
int cmd_predict(const CommonFlags& flags,
                const std::vector<std::string>& images) {
  RunConfig rc = resolve_config(flags);
  LoadedNetwork loaded = load_checkpoint_network(require_checkpoint(rc));
  Network& net = loaded.network;
  const ModelConfig mc = net.config();
  if (mc.input_channels != 6) {
    throw ConfigError("predict: checkpoint expects " +
                      std::to_string(mc.input_channels) +
                      " input channels, the image pipeline produces 6");
  }
  echo_effective(rc, &mc, rc.out_dir());
  const std::string out = rc.out_dir();
  const std::int64_t size = mc.input_size;

  int failures = 0;
  for (const std::string& path : images) {
    try {
      Tensor rgb = decode_image(path);
      const std::int64_t src_h = rgb.extent(1);
      const std::int64_t src_w = rgb.extent(2);
      if (src_h != size || src_w != size) {
        rgb = resize_bilinear(rgb, size, size);
      }
      const Tensor input = make_input(rgb);
      Tensor batch = Tensor::zeros({1, 6, size, size});
      std::copy(input.data(), input.data() + input.numel(), batch.data());
      const Tensor y = net.forward(batch, Mode::kEval, nullptr);
      Tensor conf = Tensor::zeros({size, size});
      std::copy(y.data(), y.data() + conf.numel(), conf.data());
      const Tensor mask = binarize(conf);

      const std::string stem = fs::path(path).stem().string();
      const std::string base = out + "/" + stem;
      write_confidence_png(base + "_confidence_net.png", conf);
      write_mask_png(base + "_mask_net.png", mask);
      const Tensor conf_src = (src_h == size && src_w == size)
                                  ? conf
                                  : resize_bilinear(conf, src_h, src_w);
      const Tensor mask_src = (src_h == size && src_w == size)
                                  ? mask
                                  : resize_nearest(mask, src_h, src_w);
      write_confidence_png(base + "_confidence.png", conf_src);
      write_mask_png(base + "_mask.png", mask_src);
      std::cout << path << " -> " << base
                << "_{confidence,mask}[_net].png\n";
    } catch (const std::exception& e) {
      std::cerr << "predict: " << path << ": " << e.what() << "\n";
      ++failures;
    }
  }
  return failures == 0 ? 0 : 1;
}

// Finite-difference verification: every layer type, then each whole network
// variant at reduced scale.
int cmd_gradcheck(const CommonFlags& flags) {
  RunConfig rc = resolve_config(flags);
  const std::uint64_t seed = rc.train().seed;
  echo_effective(rc, nullptr, "");

  bool all_pass = true;
  std::cout << std::left << std::setw(28) << "layer" << std::setw(14)
            << "max_rel_err" << std::setw(12) << "threshold"
            << "result\n";
  for (const GradCheckCase& c : run_layer_gradient_checks(seed)) {
    std::cout << std::left << std::setw(28) << c.name << std::setw(14)
              << std::scientific << std::setprecision(3) << c.max_err
              << std::setw(12) << c.threshold
              << (c.pass ? "PASS" : "FAIL") << "\n";
    std::cout.unsetf(std::ios::scientific);
    all_pass = all_pass && c.pass;
  }

  Rng root(seed);
  const Variant variants[] = {Variant::kUnet, Variant::kUnetLarge,
                              Variant::kDenseResidualUnet};
  for (std::size_t i = 0; i < 3; ++i) {
    const ModelConfig mc = ModelConfig::make(variants[i], ScalePreset::kToy);
    Network net = build_network(mc);
    Rng init_rng = root.derive({kInitTag, i});
    net.init_params(init_rng);
    const NetworkGradCheckResult res = network_gradient_check(net);
    const bool pass = res.max_rel_err < 1e-3;
    std::cout << std::left << std::setw(28)
              << (std::string("network ") + variant_name(mc.variant))
              << std::setw(14) << std::scientific << std::setprecision(3)
              << res.max_rel_err << std::setw(12) << 1e-3
              << (pass ? "PASS" : "FAIL") << "\n";
    std::cout.unsetf(std::ios::scientific);
    all_pass = all_pass && pass;
  }
  std::cout << (all_pass ? "all gradient checks passed\n"
                         : "gradient check FAILED\n");
  return all_pass ? 0 : 1;
}

int cmd_params(const CommonFlags& flags) {
  RunConfig rc = resolve_config(flags);
  ModelConfig mc = rc.model();
  mc.validate();
  echo_effective(rc, &mc, "");
  const std::int64_t count = planned_param_count(mc);
  std::cout << "variant: " << variant_name(mc.variant) << " ("
            << scale_name(mc.scale) << " scale)\n";
  std::cout << "parameters: " << count << "\n";
  std::cout << "approx: "
            << std::llround(static_cast<double>(count) / 1e6) << "M\n";
  return 0;
}

// import scan: pair images with their "<stem><suffix>.png" masks under a
// directory, optionally keep a digest-ordered subset.
int cmd_import_scan(const CommonFlags& flags, const std::string& images_dir,
                    const std::string& mask_suffix, const std::string& split,
                    std::int64_t select, const std::string& manifest_out) {
  RunConfig rc = resolve_config(flags);
  if (!is_valid_split(split)) {
    throw ConfigError("import: unknown split '" + split +
                      "' (expected train, finetune or eval)");
  }
  if (!fs::is_directory(images_dir)) {
    throw IoError("import: not a directory: " + images_dir);
  }

  const auto is_image_ext = [](std::string ext) {
    for (char& c : ext) c = static_cast<char>(std::tolower(c));
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
  };
  std::vector<std::string> image_paths;
  for (const auto& entry : fs::directory_iterator(images_dir)) {
    if (!entry.is_regular_file()) continue;
    const fs::path p = entry.path();
    if (!is_image_ext(p.extension().string())) continue;
    const std::string stem = p.stem().string();
    if (stem.size() >= mask_suffix.size() &&
        stem.compare(stem.size() - mask_suffix.size(), mask_suffix.size(),
                     mask_suffix) == 0) {
      continue;  // a mask, not an image
    }
    image_paths.push_back(p.string());
  }
  std::sort(image_paths.begin(), image_paths.end());
  if (image_paths.empty()) {
    throw ConfigError("import: no images found under " + images_dir);
  }
  if (select >= 0) {
    image_paths =
        select_subset_md5(image_paths, static_cast<std::size_t>(select));
  }

  std::string out_path;
  const fs::path manifest_dir =
      prepare_manifest_out(manifest_out, rc, &out_path);

  DatasetManifest manifest;
  for (const std::string& image : image_paths) {
    const fs::path p(image);
    const fs::path mask =
        p.parent_path() / (p.stem().string() + mask_suffix + ".png");
    if (!fs::exists(mask)) {
      throw IoError("import: missing mask " + mask.string() + " for " +
                    image);
    }
    manifest.entries.push_back({portable_path(p, manifest_dir),
                                portable_path(mask, manifest_dir), split});
  }
  save_manifest(manifest, out_path);
  std::cout << "wrote " << manifest.entries.size() << " entries: " << out_path
            << "\n";
  return 0;
}

// import balance: seeded without-replacement draws from several manifests.
int cmd_import_balance(const CommonFlags& flags,
                       const std::vector<std::string>& inputs,
                       const std::vector<std::int64_t>& counts,
                       const std::string& manifest_out) {
  RunConfig rc = resolve_config(flags);
  std::vector<DatasetManifest> sources;
  for (const std::string& path : inputs) {
    sources.push_back(load_manifest(path));
  }
  std::vector<std::size_t> targets;
  for (const std::int64_t n : counts) {
    if (n < 0) throw ConfigError("import: counts must be non-negative");
    targets.push_back(static_cast<std::size_t>(n));
  }
  DatasetManifest merged = balance_sources(sources, targets, rc.train().seed);
  std::string out_path;
  const fs::path manifest_dir =
      prepare_manifest_out(manifest_out, rc, &out_path);
  for (ManifestEntry& e : merged.entries) {
    e.image_path = portable_path(e.image_path, manifest_dir);
    e.mask_path = portable_path(e.mask_path, manifest_dir);
  }
  save_manifest(merged, out_path);
  std::cout << "wrote " << merged.entries.size() << " entries: " << out_path
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skin segmentation: training, evaluation and prediction"};
  app.require_subcommand(1);

  CommonFlags flags;

  CLI::App* pretrain = app.add_subcommand(
      "pretrain", "train from fresh weights on the source-domain manifest");
  attach_common(pretrain, flags);

  CLI::App* train_cmd =
      app.add_subcommand("train", "train from fresh weights");
  attach_common(train_cmd, flags);

  CLI::App* finetune = app.add_subcommand(
      "finetune", "continue training from a checkpoint at a reduced rate");
  attach_common(finetune, flags);

  CLI::App* eval_cmd = app.add_subcommand(
      "eval", "score a checkpoint on the manifest's eval split");
  attach_common(eval_cmd, flags);

  CLI::App* predict = app.add_subcommand(
      "predict", "write confidence maps and masks for images");
  attach_common(predict, flags);
  std::vector<std::string> predict_images;
  predict->add_option("images", predict_images, "input image paths")
      ->required();

  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference verification of every gradient");
  attach_common(gradcheck, flags);

  CLI::App* params = app.add_subcommand(
      "params", "parameter count for the configured model");
  attach_common(params, flags);

  CLI::App* import_cmd =
      app.add_subcommand("import", "build dataset manifests");
  import_cmd->require_subcommand(1);
  CLI::App* scan = import_cmd->add_subcommand(
      "scan", "pair images with masks under a directory");
  attach_common(scan, flags);
  std::string scan_dir, scan_suffix = "_mask", scan_split = "train";
  std::string scan_out;
  std::int64_t scan_select = -1;
  scan->add_option("--images", scan_dir, "directory to scan")->required();
  scan->add_option("--mask-suffix", scan_suffix,
                   "mask filename suffix (default _mask)");
  scan->add_option("--split", scan_split, "split tag for all entries");
  scan->add_option("--select", scan_select,
                   "keep the first N files in MD5-digest order");
  scan->add_option("--manifest-out", scan_out, "output manifest path");
  CLI::App* balance = import_cmd->add_subcommand(
      "balance", "merge manifests with seeded per-source draws");
  attach_common(balance, flags);
  std::vector<std::string> balance_inputs;
  std::vector<std::int64_t> balance_counts;
  std::string balance_out;
  balance->add_option("--inputs", balance_inputs, "source manifests")
      ->required()
      ->delimiter(',');
  balance->add_option("--counts", balance_counts, "entries to draw per source")
      ->required()
      ->delimiter(',');
  balance->add_option("--manifest-out", balance_out, "output manifest path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pretrain->parsed() || train_cmd->parsed()) {
      return cmd_train_like(flags, "direct_training");
    }
    if (finetune->parsed()) return cmd_train_like(flags, "fine_tuning");
    if (eval_cmd->parsed()) return cmd_eval(flags);
    if (predict->parsed()) return cmd_predict(flags, predict_images);
    if (gradcheck->parsed()) return cmd_gradcheck(flags);
    if (params->parsed()) return cmd_params(flags);
    if (import_cmd->parsed()) {
      if (scan->parsed()) {
        return cmd_import_scan(flags, scan_dir, scan_suffix, scan_split,
                               scan_select, scan_out);
      }
      return cmd_import_balance(flags, balance_inputs, balance_counts,
                                balance_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no command\n";
  return 1;
}
