// Command-line front end: synth, train, finetune, infer, eval, inspect.
// Exit codes: 0 success, 1 usage/configuration error, 2 data error,
// 3 numerical failure.
#pragma once

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsirr/metrics.hpp"
#include "lsirr/trainer.hpp"

#ifndef LSIRR_VERSION
#define LSIRR_VERSION "0.0.0"
#endif

namespace lsirr::cli {

namespace fs = std::filesystem;
using lsirr::Image;

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

inline constexpr const char* kDataEnv = "LAR_SIRR_DATA_DIR";
inline constexpr const char* kRunManifest = "run_manifest.json";

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> ablations;
  std::vector<std::string> drop_losses;
  bool emit_trace = false;
  std::vector<std::string> data;
  std::string real;
  std::string source;
  std::size_t procedural = 0;
  std::size_t count = 4;
  std::size_t size = 0;
  std::optional<std::size_t> steps;
  std::string checkpoint;
  std::string input;
  std::string baseline;
  std::size_t crop_border = 0;
  bool save_outputs = false;
};

inline std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string version_string() { return std::string("lsirr-") + LSIRR_VERSION; }

inline nlohmann::json run_manifest(const std::string& command, const Options& o, const std::vector<std::string>& argv) {
  nlohmann::json m{{"command", command},
                   {"argv", argv},
                   {"config_paths", o.config_path.empty() ? nlohmann::json::array() : nlohmann::json::array({o.config_path})},
                   {"seed", o.seed ? nlohmann::json(*o.seed) : nlohmann::json(nullptr)},
                   {"version", version_string()},
                   {"started_at", timestamp()},
                   {"out_dir", o.out}};
  if (!o.checkpoint.empty()) m["checkpoint"] = o.checkpoint;
  if (!o.ablations.empty()) m["ablations"] = o.ablations;
  if (!o.drop_losses.empty()) m["drop_losses"] = o.drop_losses;
  return m;
}

inline void finish_manifest(const fs::path& path, nlohmann::json m, int status) {
  m["finished_at"] = timestamp();
  m["status"] = status;
  dataset::write_text(path, m.dump(2) + "\n");
}

// Config file (if any) with command-line overrides applied.
inline config::RunConfig resolve_config(const Options& o) {
  auto cfg = o.config_path.empty() ? config::RunConfig{} : config::load(o.config_path);
  for (const auto& a : o.ablations) config::apply_ablation(cfg.model, a);
  for (const auto& d : o.drop_losses) cfg.loss.drop(d);
  if (o.seed) {
    cfg.train.seed = *o.seed;
    cfg.model.init_seed = *o.seed;
    cfg.discriminator.init_seed = derive_seed(*o.seed, 1);
  }
  cfg.validate();
  return cfg;
}

inline std::vector<fs::path> data_dirs(const Options& o) {
  std::vector<fs::path> dirs(o.data.begin(), o.data.end());
  if (dirs.empty()) {
    if (const char* env = std::getenv(kDataEnv); env && *env) dirs.emplace_back(env);
  }
  return dirs;
}

inline model::Network<float> network_from_archive(const checkpoint::Archive& a) {
  const auto cfg = a.header.at("config").get<config::RunConfig>();
  if (a.header.value("config_hash", std::string()) != cfg.architecture_hash())
    throw ConfigError("checkpoint config hash does not match its stored configuration");
  model::Network<float> net(cfg.model);
  for (auto& [p, v] : net.params().entries()) {
    auto it = a.arrays.find("model/" + p);
    if (it == a.arrays.end() || it->second.shape() != v.shape())
      throw DataError("checkpoint is missing or mis-shapes parameter " + p);
    v.mutable_value() = it->second;
  }
  return net;
}

// Pads to a multiple of 8 (reflect), runs the network and crops every output back.
struct Restoration {
  Image transmission;
  std::vector<Image> transmissions, reflections, confidences;
};

inline Restoration restore_image(const model::Network<float>& net, const Image& img) {
  ad::NoGradGuard guard;
  const auto padded = imagecore::pad_to_multiple(img, model::kSpatialMultiple);
  const auto trace = net.forward(padded);
  auto back = [&](const Tensor<float>& t) { return imagecore::crop(t, 0, 0, img.height(), img.width()); };
  Restoration r;
  for (const auto& it : trace) {
    r.transmissions.push_back(back(it.transmission.value()));
    r.reflections.push_back(back(it.reflection.value()));
    r.confidences.push_back(back(it.confidence.value()));
  }
  r.transmission = r.transmissions.back();
  return r;
}

inline std::vector<fs::path> png_inputs(const fs::path& p) {
  std::vector<fs::path> files;
  if (fs::is_directory(p)) {
    for (const auto& e : fs::directory_iterator(p))
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(p);
  }
  return files;
}

// ---- commands -----------------------------------------------------------------

inline int cmd_synth(const Options& o, nlohmann::json manifest) {
  const auto cfg = resolve_config(o);
  const fs::path out = o.out;
  const std::uint64_t seed = o.seed.value_or(cfg.train.seed);
  const std::size_t size = o.size ? o.size : cfg.augment.crop_size;
  auto pool = !o.source.empty() ? dataset::SourcePool::from_directory(o.source, cfg.augment.gamma)
              : o.procedural   ? dataset::SourcePool::procedural(o.procedural, size, size, derive_seed(seed, 7), cfg.augment.gamma)
                               : throw DataError("synth needs --source DIR or --procedural N");
  fs::create_directories(out);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < o.count; ++i) ids.push_back(dataset::sample_id(i));
  manifest["ids"] = ids;
  manifest["root_seed"] = seed;
  manifest["augment"] = cfg.augment;
  manifest["size"] = size;
  manifest["source"] = o.source.empty() ? "procedural:" + std::to_string(o.procedural) : o.source;
  dataset::write_text(out / "manifest.json", manifest.dump(2) + "\n");
  for (std::size_t i = 0; i < o.count; ++i) dataset::write_triple(out, ids[i], pool.make_triple(seed, i, cfg.augment, size));
  finish_manifest(out / "manifest.json", manifest, kOk);
  return kOk;
}

inline trainer::DataSources gather_sources(const Options& o, const config::RunConfig& cfg) {
  trainer::DataSources src;
  for (const auto& d : data_dirs(o)) {
    for (auto& s : dataset::load_dataset(d).samples) (s.synthetic() ? src.synthetic : src.real).push_back(std::move(s));
  }
  if (!o.real.empty())
    for (auto& s : dataset::load_dataset(o.real).samples) {
      s.reflection.reset();
      s.alpha.reset();
      src.real.push_back(std::move(s));
    }
  if (!o.source.empty()) src.pool = dataset::SourcePool::from_directory(o.source, cfg.augment.gamma);
  else if (o.procedural)
    src.pool = dataset::SourcePool::procedural(o.procedural, cfg.train.crop_size, cfg.train.crop_size,
                                               derive_seed(cfg.train.seed, 7), cfg.augment.gamma);
  if (!src.has_synthetic() && src.real.empty())
    throw DataError(std::string("no training data: pass --data DIR, --source DIR or --procedural N, or set ") + kDataEnv);
  return src;
}

inline int cmd_train(const Options& o) {
  const auto cfg = resolve_config(o);
  trainer::Trainer t(cfg, gather_sources(o, cfg), o.out);
  dataset::write_text(fs::path(o.out) / "config.json", nlohmann::json(cfg).dump(2) + "\n");
  const auto summary = t.run(o.steps);
  std::cout << "trained " << summary.steps << " steps; checkpoint " << (fs::path(o.out) / trainer::kCheckpointName).string() << "\n";
  return kOk;
}

inline int cmd_finetune(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("finetune requires --checkpoint");
  const auto archive = checkpoint::load(o.checkpoint);
  const auto stored = archive.header.at("config").get<config::RunConfig>();
  if (!o.config_path.empty() || !o.ablations.empty()) {
    const auto requested = resolve_config(o);
    if (requested.architecture_hash() != archive.header.value("config_hash", std::string()))
      throw ConfigError("config hash " + requested.architecture_hash() + " does not match checkpoint hash " +
                        archive.header.value("config_hash", std::string()) + "; refusing to load");
  }
  auto t = trainer::Trainer::from_checkpoint(archive, gather_sources(o, stored), o.out, trainer::Trainer::Phase::finetune);
  const auto summary = t.run(o.steps);
  std::cout << "fine-tuned " << summary.steps << " steps\n";
  return kOk;
}

inline int cmd_infer(const Options& o) {
  if (o.checkpoint.empty() || o.input.empty()) throw ConfigError("infer requires --checkpoint and --input");
  const auto net = network_from_archive(checkpoint::load(o.checkpoint));
  const fs::path out = o.out;
  std::size_t ok = 0, failed = 0;
  for (const auto& f : png_inputs(o.input)) {
    Image img;
    try {
      img = read_png(f);
    } catch (const ImageIoError& e) {
      std::cerr << "warning: skipping " << f.string() << ": " << e.what() << "\n";
      ++failed;
      continue;
    }
    const auto r = restore_image(net, img);
    const auto stem = f.stem().string();
    write_png(out / (stem + "_T.png"), r.transmission);
    if (o.emit_trace) {
      for (std::size_t i = 0; i < r.transmissions.size(); ++i) {
        const auto tag = "_iter" + std::to_string(i + 1) + ".png";
        write_png(out / (stem + "_T" + tag), r.transmissions[i]);
        write_png(out / (stem + "_R" + tag), r.reflections[i]);
        write_png(out / (stem + "_C" + tag), r.confidences[i]);
      }
    }
    ++ok;
  }
  if (ok == 0) {
    std::cerr << "error: no input could be processed\n";
    return kData;
  }
  if (failed) std::cerr << failed << " input(s) skipped\n";
  return kOk;
}

inline int cmd_eval(const Options& o) {
  const auto dirs = data_dirs(o);
  if (dirs.empty()) throw ConfigError(std::string("eval needs --data DIR or ") + kDataEnv);
  metrics::Restorer restorer;
  std::optional<model::Network<float>> net;
  if (o.baseline == "identity") {
    restorer = metrics::identity_restorer();
  } else if (o.baseline == "oracle") {
    restorer = metrics::oracle_restorer();
  } else if (!o.baseline.empty()) {
    throw ConfigError("unknown baseline '" + o.baseline + "'; valid: identity, oracle");
  } else {
    if (o.checkpoint.empty()) throw ConfigError("eval requires --checkpoint or --baseline");
    net.emplace(network_from_archive(checkpoint::load(o.checkpoint)));
    restorer = [&net](const dataset::Sample& s, Image* conf) {
      auto r = restore_image(*net, s.input);
      if (conf) *conf = r.confidences.back();
      return r.transmission;
    };
  }
  metrics::EvalOptions opt;
  opt.crop_border = o.crop_border;
  if (o.save_outputs) opt.output_dir = fs::path(o.out) / "outputs";
  std::vector<metrics::EvalRecord> recs;
  for (const auto& d : dirs) {
    auto rec = metrics::evaluate_dataset(d, restorer, opt);
    if (!rec.skipped.empty()) std::cerr << rec.skipped.size() << " sample(s) skipped in " << d.string() << "\n";
    recs.push_back(std::move(rec));
  }
  const metrics::Report report(std::move(recs));
  const fs::path out = o.out;
  dataset::write_text(out / "report.json", report.to_json().dump(2) + "\n");
  dataset::write_text(out / "report.txt", report.to_text());
  std::cout << report.to_text();
  return kOk;
}

inline int cmd_inspect(const Options& o) {
  if (o.input.empty()) throw ConfigError("inspect requires --input");
  const fs::path out = o.out;
  for (const auto& f : png_inputs(o.input)) {
    const auto img = read_png(f);
    const auto stem = f.stem().string();
    write_png(out / (stem + "_inv_edge.png"), imagecore::inverse_map(imagecore::edge_map(img)));
    write_png(out / (stem + "_inv_laplacian.png"), imagecore::inverse_map(imagecore::laplacian_map(img)));
  }
  return kOk;
}

// ---- entry point ------------------------------------------------------------------

inline int run(const std::vector<std::string>& args, std::ostream& err = std::cerr) {
  CLI::App app{"Location-aware single image reflection removal", "lsirr"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());
  Options o;

  auto common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config", o.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Root seed for every stochastic choice");
    auto* out = sub->add_option("--out", o.out, "Output directory");
    if (needs_out) out->required();
  };
  auto model_flags = [&](CLI::App* sub) {
    sub->add_option("--ablation", o.ablations, "Architecture ablation")
        ->check(CLI::IsMember(config::ablation_names()))
        ->take_all();
    sub->add_option("--drop-loss", o.drop_losses, "Remove a loss term")
        ->check(CLI::IsMember(losses::LossWeights::drop_names()))
        ->take_all();
  };
  auto data_flags = [&](CLI::App* sub) {
    sub->add_option("--data", o.data, std::string("Dataset directory (default $") + kDataEnv + ")");
    sub->add_option("--real", o.real, "Directory of real (I, T) pairs");
    sub->add_option("--source", o.source, "Directory of source images for on-the-fly synthesis");
    sub->add_option("--procedural", o.procedural, "Use N procedural source images");
    sub->add_option("--steps", o.steps, "Number of optimisation steps");
  };

  auto* synth = app.add_subcommand("synth", "Generate synthetic (I, T, R) triples");
  common(synth, true);
  synth->add_option("--source", o.source, "Directory of natural source images");
  synth->add_option("--procedural", o.procedural, "Use N procedural source images instead of --source");
  synth->add_option("--count", o.count, "Number of triples")->check(CLI::PositiveNumber);
  synth->add_option("--size", o.size, "Crop size (default augment.crop_size)");

  auto* train = app.add_subcommand("train", "Train from scratch");
  common(train, true);
  model_flags(train);
  data_flags(train);

  auto* finetune = app.add_subcommand("finetune", "Fine-tune a checkpoint with the sharper blur schedule");
  common(finetune, true);
  model_flags(finetune);
  data_flags(finetune);
  finetune->add_option("--checkpoint", o.checkpoint, "Checkpoint to resume")->required();

  auto* infer = app.add_subcommand("infer", "Remove reflections from images");
  common(infer, true);
  infer->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required();
  infer->add_option("--input", o.input, "PNG file or directory")->required();
  infer->add_flag("--emit-trace", o.emit_trace, "Also write per-iteration T, R and RCMap images");

  auto* eval = app.add_subcommand("eval", "PSNR/SSIM evaluation over datasets");
  common(eval, true);
  eval->add_option("--checkpoint", o.checkpoint, "Trained checkpoint");
  eval->add_option("--data", o.data, std::string("Dataset directory, repeatable (default $") + kDataEnv + ")");
  eval->add_option("--baseline", o.baseline, "identity or oracle instead of a checkpoint");
  eval->add_option("--crop-border", o.crop_border, "Border pixels excluded from scoring");
  eval->add_flag("--save-outputs", o.save_outputs, "Write predictions and RCMaps");

  auto* inspect = app.add_subcommand("inspect", "Write inverse edge and Laplacian maps");
  common(inspect, true);
  inspect->add_option("--input", o.input, "PNG file or directory")->required();

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, std::cout, err);
      return kOk;
    }
    app.exit(e, std::cout, err);
    return kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    auto manifest = run_manifest(command, o, args);
    const fs::path out = o.out;
    if (command == "synth") return cmd_synth(o, manifest);
    dataset::write_text(out / kRunManifest, manifest.dump(2) + "\n");
    int code = kUsage;
    if (command == "train") code = cmd_train(o);
    else if (command == "finetune") code = cmd_finetune(o);
    else if (command == "infer") code = cmd_infer(o);
    else if (command == "eval") code = cmd_eval(o);
    else if (command == "inspect") code = cmd_inspect(o);
    finish_manifest(out / kRunManifest, manifest, code);
    return code;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  }
}

inline int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}

}  // namespace lsirr::cli
