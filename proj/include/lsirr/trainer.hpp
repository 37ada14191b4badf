// Optimisation loop: per batch a generator update (total loss, MLSM gradient
// clipping, Adam) followed by one discriminator update with its own Adam state.
// Epoch plans are seeded shuffles of synthetic and real sample slots.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsirr/checkpoint.hpp"
#include "lsirr/config.hpp"
#include "lsirr/dataset.hpp"
#include "lsirr/optim.hpp"

namespace lsirr::trainer {

namespace fs = std::filesystem;
using config::RunConfig;
using dataset::Sample;

// Where samples come from. Synthetic slots draw from `pool` (fresh triples with
// the epoch's blur range) when present, otherwise cycle through `synthetic`.
struct DataSources {
  std::vector<Sample> synthetic;
  std::optional<dataset::SourcePool> pool;
  std::vector<Sample> real;

  bool has_synthetic() const { return pool.has_value() || !synthetic.empty(); }
};

struct Slot {
  enum Kind { fixed, generated, real } kind;
  std::size_t index;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  losses::LossReport loss;
  double d_loss = 0;
  double mlsm_grad_max = 0;
  double lr = 0;
  std::vector<std::string> ids;
};

inline nlohmann::json to_log_json(const StepRecord& r) {
  return {{"step", r.step}, {"epoch", r.epoch}, {"loss", r.loss}, {"d_loss", r.d_loss},
          {"mlsm_grad_max", r.mlsm_grad_max}, {"lr", r.lr}, {"ids", r.ids}};
}

struct Summary {
  std::size_t steps = 0;
  std::vector<StepRecord> records;
  double max_mlsm_grad = 0;
};

inline constexpr const char* kCheckpointName = "checkpoint.ckpt";
inline constexpr const char* kLastGoodName = "checkpoint_last_good.ckpt";
inline constexpr const char* kLogName = "loss_log.jsonl";

class Trainer {
 public:
  enum class Phase { train, finetune };

  Trainer(RunConfig cfg, DataSources data, fs::path out_dir)
      : cfg_(std::move(cfg)),
        data_(std::move(data)),
        out_(std::move(out_dir)),
        net_(cfg_.model),
        disc_(cfg_.discriminator),
        opt_g_(adam_config(cfg_.train.lr)),
        opt_d_(adam_config(cfg_.train.lr)),
        rng_(cfg_.train.seed) {
    cfg_.validate();
    init_common();
  }

  // Resumes from an archive; `phase` selects the schedule that continues.
  static Trainer from_checkpoint(const checkpoint::Archive& a, DataSources data, fs::path out_dir, Phase phase) {
    RunConfig cfg;
    try {
      cfg = a.header.at("config").get<RunConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("checkpoint header has no usable config: ") + e.what());
    }
    if (a.header.value("config_hash", std::string()) != cfg.architecture_hash())
      throw ConfigError("checkpoint config hash does not match its stored configuration");
    Trainer t(std::move(cfg), std::move(data), std::move(out_dir));
    t.restore(a);
    if (phase == Phase::finetune) t.enter_finetune();
    return t;
  }

  const RunConfig& config() const { return cfg_; }
  model::Network<float>& network() { return net_; }
  losses::Discriminator<float>& discriminator() { return disc_; }
  const optim::Adam<float>& generator_optimizer() const { return opt_g_; }
  std::size_t step() const { return step_; }
  std::size_t epoch() const { return epoch_; }
  Phase phase() const { return phase_; }

  // Runs until the step budget or the epoch count is exhausted. `max_steps`
  // counts steps of this call (default: the configured budget, where 0 means
  // unlimited). The final checkpoint is written even when no step runs.
  Summary run(std::optional<std::size_t> max_steps = std::nullopt,
              std::function<void(const StepRecord&)> on_step = {}) {
    const bool unlimited = !max_steps && phase_budget() == 0;
    const std::size_t budget = max_steps ? *max_steps : phase_budget();
    const std::size_t epochs = phase_ == Phase::train ? cfg_.train.epochs : cfg_.train.finetune.epochs;
    fs::create_directories(out_);
    std::ofstream log(out_ / kLogName, step_ == 0 || phase_start_step_ == step_ ? std::ios::trunc : std::ios::app);
    if (!log) throw DataError("cannot open loss log in " + out_.string());
    Summary summary;
    while (unlimited || summary.steps < budget) {
      if (position_ >= plan_.size()) {
        if (epoch_ + 1 >= epochs) break;
        ++epoch_;
        new_epoch();
      }
      const std::size_t end = std::min(plan_.size(), position_ + cfg_.train.batch_size);
      std::vector<Slot> batch(plan_.begin() + static_cast<long>(position_), plan_.begin() + static_cast<long>(end));
      auto rec = train_step(batch);
      position_ = end;
      log << to_log_json(rec).dump() << "\n";
      log.flush();
      summary.max_mlsm_grad = std::max(summary.max_mlsm_grad, rec.mlsm_grad_max);
      summary.records.push_back(rec);
      ++summary.steps;
      if (on_step) on_step(rec);
      if (cfg_.train.checkpoint_every && step_ % cfg_.train.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "step_%06zu.ckpt", step_);
        checkpoint::save(out_ / "checkpoints" / name, archive());
      }
    }
    checkpoint::save(out_ / kCheckpointName, archive());
    return summary;
  }

  checkpoint::Archive archive() const {
    checkpoint::Archive a;
    a.header = {{"format", 1},
                {"config", cfg_},
                {"config_hash", cfg_.architecture_hash()},
                {"phase", phase_ == Phase::train ? "train" : "finetune"},
                {"epoch", epoch_},
                {"step", step_},
                {"position", position_},
                {"phase_start_step", phase_start_step_},
                {"rng_state", rng_.state()},
                {"epoch_rng_state", epoch_rng_state_},
                {"adam_g", {{"t", opt_g_.steps()}, {"lr", opt_g_.config().lr}}},
                {"adam_d", {{"t", opt_d_.steps()}, {"lr", opt_d_.config().lr}}}};
    for (const auto& [p, v] : net_.params().entries()) a.arrays.emplace("model/" + p, v.value());
    for (const auto& [p, v] : disc_.params().entries()) a.arrays.emplace("disc/" + p, v.value());
    for (const auto& [p, m] : opt_g_.first_moments()) a.arrays.emplace("adam_g/m/" + p, m);
    for (const auto& [p, m] : opt_g_.second_moments()) a.arrays.emplace("adam_g/v/" + p, m);
    for (const auto& [p, m] : opt_d_.first_moments()) a.arrays.emplace("adam_d/m/" + p, m);
    for (const auto& [p, m] : opt_d_.second_moments()) a.arrays.emplace("adam_d/v/" + p, m);
    return a;
  }

  // Blur sigma range used for generated samples in the current epoch.
  std::array<double, 2> blur_range() const {
    if (phase_ == Phase::finetune) return cfg_.train.finetune.blur_sigma;
    return synth::blur_range_for_epoch(epoch_, cfg_.train.epochs, cfg_.train.blur_start, cfg_.train.blur_end);
  }

  const std::vector<Slot>& plan() const { return plan_; }

 private:
  static optim::AdamConfig adam_config(double lr) { return {lr, 0.5, 0.99, 1e-8}; }

  void init_common() {
    for (auto* opt : {&opt_g_, &opt_d_}) {
      opt->config().beta1 = cfg_.train.betas[0];
      opt->config().beta2 = cfg_.train.betas[1];
      opt->config().eps = cfg_.train.eps;
    }
    if (cfg_.loss.use_perceptual) extractor_ = config::make_extractor(cfg_.perceptual);
    if (!data_.has_synthetic() && data_.real.empty()) throw DataError("no training data supplied");
    new_epoch();
  }

  std::size_t phase_budget() const {
    return phase_ == Phase::train ? cfg_.train.max_steps : cfg_.train.finetune.max_steps;
  }

  void enter_finetune() {
    phase_ = Phase::finetune;
    opt_g_.config().lr = cfg_.train.finetune.lr;
    opt_d_.config().lr = cfg_.train.finetune.lr;
    epoch_ = 0;
    phase_start_step_ = step_;
    new_epoch();
  }

  void new_epoch() {
    epoch_rng_state_ = rng_.state();
    build_plan();
  }

  void build_plan() {
    const std::size_t n = cfg_.train.samples_per_epoch;
    std::size_t n_real = data_.real.empty() ? 0 : static_cast<std::size_t>(std::llround(n * cfg_.train.real_fraction));
    if (!data_.has_synthetic()) n_real = n;
    plan_.clear();
    for (std::size_t k = 0; k < n - n_real; ++k)
      plan_.push_back(data_.pool ? Slot{Slot::generated, k} : Slot{Slot::fixed, k % data_.synthetic.size()});
    for (std::size_t k = 0; k < n_real; ++k) plan_.push_back({Slot::real, k % data_.real.size()});
    for (std::size_t i = plan_.size(); i > 1; --i)
      std::swap(plan_[i - 1], plan_[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<long>(i) - 1))]);
    position_ = 0;
  }

  Sample materialise(const Slot& s) const {
    switch (s.kind) {
      case Slot::fixed: return data_.synthetic[s.index];
      case Slot::real: return data_.real[s.index];
      case Slot::generated: {
        auto aug = cfg_.augment;
        aug.blur_sigma_range = blur_range();
        const std::uint64_t root = derive_seed(cfg_.train.seed, (phase_ == Phase::train ? 0x1000000ull : 0x2000000ull) + epoch_);
        auto triple = data_.pool->make_triple(root, s.index, aug, cfg_.train.crop_size);
        char id[48];
        std::snprintf(id, sizeof id, "gen_e%zu_%06zu", epoch_, s.index);
        return Sample::from_triple(id, triple);
      }
    }
    throw std::logic_error("unknown slot kind");
  }

  StepRecord train_step(const std::vector<Slot>& batch) {
    StepRecord rec;
    rec.epoch = epoch_;
    rec.lr = opt_g_.config().lr;
    const float inv_b = 1.0f / static_cast<float>(batch.size());
    std::vector<Sample> samples;
    for (const auto& s : batch) samples.push_back(materialise(s));

    net_.params().zero_grad();
    disc_.params().zero_grad();
    const bool use_adv = cfg_.loss.use_adv;
    set_trainable(disc_.params(), false);
    std::vector<Tensor<float>> fakes;
    for (const auto& s : samples) {
      rec.ids.push_back(s.id);
      auto trace = net_.forward(ad::constant(s.input));
      auto res = losses::compute_losses(trace, s.targets(), cfg_.loss, extractor_.get(), use_adv ? &disc_ : nullptr);
      res.report *= static_cast<double>(inv_b);
      rec.loss += res.report;
      if (std::isfinite(res.report.total)) ad::scale(res.total, inv_b).backward();
      fakes.push_back(trace.back().transmission.value());
    }
    set_trainable(disc_.params(), true);
    if (!std::isfinite(rec.loss.total) || !gradients_finite(net_.params())) abort_numerical(samples, rec);

    rec.mlsm_grad_max =
        static_cast<double>(model::clip_mlsm_gradients(net_.params(), static_cast<float>(cfg_.train.clip), cfg_.train.global_clip));
    if (rec.mlsm_grad_max > cfg_.train.clip) throw std::logic_error("MLSM gradient exceeds the clip threshold after clipping");
    opt_g_.step(net_.params());

    if (use_adv && cfg_.train.train_discriminator) {
      disc_.params().zero_grad();
      for (std::size_t i = 0; i < samples.size(); ++i) {
        auto d = losses::adversarial_discriminator(disc_, samples[i].transmission, fakes[i]);
        rec.d_loss += static_cast<double>(d.value().item()) * inv_b;
        ad::scale(d, inv_b).backward();
      }
      if (!std::isfinite(rec.d_loss) || !gradients_finite(disc_.params())) abort_numerical(samples, rec);
      opt_d_.step(disc_.params());
    }
    rec.step = ++step_;
    return rec;
  }

  static void set_trainable(nn::ParamStore<float>& ps, bool on) {
    for (auto& [_, v] : ps.entries()) v.set_requires_grad(on);
  }

  static bool gradients_finite(nn::ParamStore<float>& ps) {
    for (auto& [_, v] : ps.entries())
      if (v.has_grad() && !all_finite(v.grad_buffer())) return false;
    return true;
  }

  [[noreturn]] void abort_numerical(const std::vector<Sample>& samples, const StepRecord& rec) {
    // Parameters have not been updated yet, so the current state is the last good one.
    checkpoint::save(out_ / kLastGoodName, archive());
    const auto dir = out_ / "diagnostics" / ("step_" + std::to_string(step_ + 1));
    fs::create_directories(dir);
    for (const auto& s : samples) {
      write_png(dir / (s.id + "_I.png"), s.input);
      write_png(dir / (s.id + "_T.png"), s.transmission);
    }
    nlohmann::json diag = to_log_json(rec);
    diag["input_finite"] = nlohmann::json::array();
    for (const auto& s : samples) diag["input_finite"].push_back(all_finite(s.input) && all_finite(s.transmission));
    dataset::write_text(dir / "report.json", diag.dump(2) + "\n");
    throw NumericalError("non-finite loss or gradient at step " + std::to_string(step_ + 1) + "; diagnostics in " +
                         dir.string());
  }

  void restore(const checkpoint::Archive& a) {
    auto load_into = [&](nn::ParamStore<float>& ps, const std::string& prefix) {
      for (auto& [p, v] : ps.entries()) {
        auto it = a.arrays.find(prefix + p);
        if (it == a.arrays.end()) throw DataError("checkpoint is missing array " + prefix + p);
        if (it->second.shape() != v.shape()) throw DataError("checkpoint array " + prefix + p + " has the wrong shape");
        v.mutable_value() = it->second;
      }
    };
    load_into(net_.params(), "model/");
    load_into(disc_.params(), "disc/");
    auto load_moments = [&](optim::Adam<float>& opt, const std::string& prefix, const nlohmann::json& meta) {
      opt.first_moments() = checkpoint::with_prefix(a, prefix + "m/");
      opt.second_moments() = checkpoint::with_prefix(a, prefix + "v/");
      opt.set_steps(meta.at("t").get<std::uint64_t>());
      opt.config().lr = meta.at("lr").get<double>();
    };
    load_moments(opt_g_, "adam_g/", a.header.at("adam_g"));
    load_moments(opt_d_, "adam_d/", a.header.at("adam_d"));
    phase_ = a.header.value("phase", std::string("train")) == "finetune" ? Phase::finetune : Phase::train;
    step_ = a.header.at("step").get<std::size_t>();
    epoch_ = a.header.at("epoch").get<std::size_t>();
    phase_start_step_ = a.header.value("phase_start_step", std::size_t{0});
    rng_.set_state(a.header.at("epoch_rng_state").get<std::string>());
    epoch_rng_state_ = rng_.state();
    build_plan();
    position_ = a.header.at("position").get<std::size_t>();
    if (rng_.state() != a.header.at("rng_state").get<std::string>())
      throw DataError("checkpoint RNG state is inconsistent with its epoch plan");
  }

  RunConfig cfg_;
  DataSources data_;
  fs::path out_;
  model::Network<float> net_;
  losses::Discriminator<float> disc_;
  optim::Adam<float> opt_g_, opt_d_;
  std::unique_ptr<losses::FeatureExtractor<float>> extractor_;
  Rng rng_;
  std::string epoch_rng_state_;
  std::vector<Slot> plan_;
  std::size_t position_ = 0;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
  std::size_t phase_start_step_ = 0;
  Phase phase_ = Phase::train;
};

}  // namespace lsirr::trainer
