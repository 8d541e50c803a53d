#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sinf/eval.hpp"
#include "sinf/layers.hpp"
#include "sinf/model.hpp"
#include "sinf/synth.hpp"

namespace sinet::train {

struct TrainConfig {
  double base_lr = 0.01;
  double lr_embedding = 100.0;  // multiplier on base_lr
  double lr_fusion = 2.0;       // multiplier on base_lr
  double momentum = 0.9;
  double poly_power = 0.9;
  int warmup_epochs = 20;
  int epochs = 20;
  int batch_size = 4;
  int grad_accum_steps = 1;
  double target_rate = 0.6;
  double loss_weight = 1.0;
  int early_stop_patience = 3;  // 0 disables
  std::string early_stop_metric = "miou";
  std::uint64_t seed = 1;
  side::DiffusionInit diffusion_scalar_init = side::DiffusionInit::kFirstOneRestZero;
  bool flips = true;
  int val_patch = 128;
  int val_stride = 64;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Warmup factor min(epoch / warmup_epochs, 1) for 1-based epochs, times
/// (1 - iter / max_iter)^poly_power, times each group's multiplier.
nn::GroupRates lr_at(const TrainConfig& config, int epoch, long iter, long max_iter);

struct LossParts {
  double total = 0.0;
  double cross_entropy = 0.0;
  double rate = 0.0;
};

/// Mean over samples of per-sample cross entropy, plus loss_weight times the
/// target-rate loss over the batch traces.
LossParts composite_loss(const std::vector<nn::Tensor>& logits, const std::vector<nn::LabelMap>& labels,
                         const std::vector<net::GateTrace>& traces, double t, double lambda, bool per_gate = false);
LossParts composite_loss(const nn::Tensor& logits, const nn::LabelMap& labels, const net::GateTrace& trace, double t,
                         double lambda, bool per_gate = false);

struct Dataset {
  std::vector<synth::Patch> train;  // side may be empty
  std::vector<eval::EvalScene> val;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double cross_entropy = 0.0;
  double rate_loss = 0.0;
  double lr = 0.0;
  double train_gate_rate = 0.0;
  double val_miou = 0.0;
  double val_accuracy = 0.0;
  double val_gate_rate = 0.0;

  nlohmann::json to_json() const;
  static EpochRecord from_json(const nlohmann::json& j);
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(int epoch, long iter, const std::string& what)
      : NumericError(what), epoch_(epoch), iter_(iter) {}
  int epoch() const { return epoch_; }
  long iter() const { return iter_; }

 private:
  int epoch_;
  long iter_;
};

struct FitOptions {
  std::optional<std::filesystem::path> checkpoint;  // written after every epoch
  std::optional<std::filesystem::path> history;     // one JSON line per epoch
  std::optional<std::filesystem::path> resume;      // training checkpoint to continue from
  int stop_after_epoch = -1;                        // stop early without early-stopping semantics
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;  // steps run in this call
  int best_epoch = 0;
  double best_metric = -1.0;
  bool early_stopped = false;
};

long iters_per_epoch(const TrainConfig& config, std::size_t patches);

/// Momentum SGD over shuffled patches. Every optimizer step consumes
/// batch_size * grad_accum_steps patches; the rate loss is taken per
/// micro-batch. When validation improves the weights are remembered and
/// restored at the end. Throws DivergenceError on a non-finite loss.
FitResult fit(net::Model& model, const Dataset& data, const TrainConfig& config, const FitOptions& options = {});

std::string rng_state(const std::mt19937_64& rng);
void set_rng_state(std::mt19937_64& rng, const std::string& state);

}  // namespace sinet::train
