#include "sinf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "sinf/checkpoint.hpp"

namespace sinet::train {

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(fmt::format("train.{}: must be > 0", name));
  };
  positive(base_lr, "base_lr");
  positive(lr_embedding, "lr_embedding");
  positive(lr_fusion, "lr_fusion");
  positive(poly_power, "poly_power");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum: must be in [0, 1)");
  if (epochs < 0) throw ConfigError("train.epochs: must be >= 0");
  if (warmup_epochs < 0) throw ConfigError("train.warmup_epochs: must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (grad_accum_steps < 1) throw ConfigError("train.grad_accum_steps: must be >= 1");
  if (!(target_rate >= 0.0 && target_rate <= 1.0)) throw ConfigError("train.target_rate: must be in [0, 1]");
  if (!(loss_weight >= 0.0)) throw ConfigError("train.loss_weight: must be >= 0");
  if (early_stop_patience < 0) throw ConfigError("train.early_stop_patience: must be >= 0");
  if (early_stop_metric != "miou" && early_stop_metric != "accuracy") {
    throw ConfigError(fmt::format("train.early_stop_metric: '{}' is not miou or accuracy", early_stop_metric));
  }
  if (val_patch < 4 || val_stride < 1) throw ConfigError("train.val_patch/val_stride: must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"base_lr", c.base_lr},
          {"lr_embedding", c.lr_embedding},
          {"lr_fusion", c.lr_fusion},
          {"momentum", c.momentum},
          {"poly_power", c.poly_power},
          {"warmup_epochs", c.warmup_epochs},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"grad_accum_steps", c.grad_accum_steps},
          {"target_rate", c.target_rate},
          {"loss_weight", c.loss_weight},
          {"early_stop_patience", c.early_stop_patience},
          {"early_stop_metric", c.early_stop_metric},
          {"seed", c.seed},
          {"diffusion_scalar_init", net::diffusion_init_name(c.diffusion_scalar_init)},
          {"flips", c.flips},
          {"val_patch", c.val_patch},
          {"val_stride", c.val_stride}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  TrainConfig c;
  const nlohmann::json defaults = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError(fmt::format("unknown key 'train.{}'", key));
    try {
      if (key == "base_lr") c.base_lr = value.get<double>();
      else if (key == "lr_embedding") c.lr_embedding = value.get<double>();
      else if (key == "lr_fusion") c.lr_fusion = value.get<double>();
      else if (key == "momentum") c.momentum = value.get<double>();
      else if (key == "poly_power") c.poly_power = value.get<double>();
      else if (key == "warmup_epochs") c.warmup_epochs = value.get<int>();
      else if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "grad_accum_steps") c.grad_accum_steps = value.get<int>();
      else if (key == "target_rate") c.target_rate = value.get<double>();
      else if (key == "loss_weight") c.loss_weight = value.get<double>();
      else if (key == "early_stop_patience") c.early_stop_patience = value.get<int>();
      else if (key == "early_stop_metric") c.early_stop_metric = value.get<std::string>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "diffusion_scalar_init") c.diffusion_scalar_init = net::parse_diffusion_init(value.get<std::string>());
      else if (key == "flips") c.flips = value.get<bool>();
      else if (key == "val_patch") c.val_patch = value.get<int>();
      else if (key == "val_stride") c.val_stride = value.get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("train.{}: {}", key, e.what()));
    }
  }
  c.validate();
  return c;
}

nn::GroupRates lr_at(const TrainConfig& c, int epoch, long iter, long max_iter) {
  if (max_iter <= 0 || iter < 0 || iter > max_iter) {
    throw ConfigError(fmt::format("lr_at: iter {} outside [0, {}]", iter, max_iter));
  }
  const double warm = c.warmup_epochs == 0 ? 1.0 : std::min(static_cast<double>(epoch) / c.warmup_epochs, 1.0);
  const double decay = std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), c.poly_power);
  const double r = c.base_lr * warm * decay;
  return {r, r * c.lr_embedding, r * c.lr_fusion};
}

LossParts composite_loss(const std::vector<nn::Tensor>& logits, const std::vector<nn::LabelMap>& labels,
                         const std::vector<net::GateTrace>& traces, double t, double lambda, bool per_gate) {
  if (logits.size() != labels.size() || logits.empty()) throw ConfigError("composite_loss: batch size mismatch");
  LossParts p;
  for (std::size_t i = 0; i < logits.size(); ++i) p.cross_entropy += nn::softmax_cross_entropy(logits[i], labels[i]).loss;
  p.cross_entropy /= static_cast<double>(logits.size());
  const bool any_soft = std::any_of(traces.begin(), traces.end(), [](const auto& tr) { return !tr.soft.empty(); });
  p.rate = any_soft ? net::target_rate_loss(traces, t, per_gate) : 0.0;
  p.total = p.cross_entropy + lambda * p.rate;
  return p;
}

LossParts composite_loss(const nn::Tensor& logits, const nn::LabelMap& labels, const net::GateTrace& trace, double t,
                         double lambda, bool per_gate) {
  return composite_loss(std::vector<nn::Tensor>{logits}, std::vector<nn::LabelMap>{labels},
                        std::vector<net::GateTrace>{trace}, t, lambda, per_gate);
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch},
          {"loss", loss},
          {"cross_entropy", cross_entropy},
          {"rate_loss", rate_loss},
          {"lr", lr},
          {"train_gate_rate", train_gate_rate},
          {"val_miou", val_miou},
          {"val_accuracy", val_accuracy},
          {"val_gate_rate", val_gate_rate}};
}

EpochRecord EpochRecord::from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.loss = j.at("loss").get<double>();
  r.cross_entropy = j.at("cross_entropy").get<double>();
  r.rate_loss = j.at("rate_loss").get<double>();
  r.lr = j.at("lr").get<double>();
  r.train_gate_rate = j.at("train_gate_rate").get<double>();
  r.val_miou = j.at("val_miou").get<double>();
  r.val_accuracy = j.at("val_accuracy").get<double>();
  r.val_gate_rate = j.at("val_gate_rate").get<double>();
  return r;
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

void set_rng_state(std::mt19937_64& rng, const std::string& state) {
  std::istringstream in(state);
  in >> rng;
  if (!in) throw ConfigError("corrupt RNG state in checkpoint");
}

long iters_per_epoch(const TrainConfig& c, std::size_t patches) {
  const long per_step = static_cast<long>(c.batch_size) * c.grad_accum_steps;
  return std::max(1L, static_cast<long>(patches) / per_step);
}

namespace {

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(unit(rng) * static_cast<double>(n)));
}

struct Snapshot {
  std::vector<nn::Tensor> params;
  std::vector<nn::Tensor> buffers;
};

Snapshot take(net::Model& m) {
  Snapshot s;
  for (auto* p : m.params()) s.params.push_back(p->value);
  for (auto& [name, t] : m.buffers()) s.buffers.push_back(*t);
  return s;
}

void put(net::Model& m, const Snapshot& s) {
  auto ps = m.params();
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = s.params[i];
  auto bs = m.buffers();
  for (std::size_t i = 0; i < bs.size(); ++i) *bs[i].second = s.buffers[i];
}

constexpr const char* kBestPrefix = "best/";

nlohmann::json checkpoint_config(const net::Model& m, const TrainConfig& c) {
  return {{"model", net::to_json(m.config())}, {"train", to_json(c)}};
}

}  // namespace

FitResult fit(net::Model& model, const Dataset& data, const TrainConfig& config, const FitOptions& options) {
  config.validate();
  FitResult result;
  if (config.epochs == 0) return result;
  if (data.train.empty()) throw ConfigError("training set is empty");
  if (data.val.empty()) throw ConfigError("validation split is empty");

  std::mt19937_64 rng(config.seed);
  int start_epoch = 1;
  long global_iter = 0;
  int bad_epochs = 0;
  std::optional<Snapshot> best;

  if (options.resume) {
    const ckpt::Checkpoint c = ckpt::read(*options.resume);
    if (c.kind != ckpt::Kind::kTraining) {
      throw ckpt::CheckpointError(ckpt::Errc::kKindMismatch, "resume needs a training checkpoint");
    }
    if (ckpt::canonical(c.config) != ckpt::canonical(checkpoint_config(model, config))) {
      throw ckpt::CheckpointError(ckpt::Errc::kConfigHashMismatch, "checkpoint was written for a different config");
    }
    ckpt::restore(model, c, true);
    const auto& st = c.state;
    start_epoch = st.at("epoch").get<int>() + 1;
    global_iter = st.at("iter").get<long>();
    bad_epochs = st.at("bad_epochs").get<int>();
    result.best_epoch = st.at("best_epoch").get<int>();
    result.best_metric = st.at("best_metric").get<double>();
    set_rng_state(rng, st.at("rng").get<std::string>());
    for (const auto& h : st.at("history")) result.history.push_back(EpochRecord::from_json(h));
    if (result.best_epoch > 0) {
      Snapshot s;
      auto lookup = [&](const std::string& name, ckpt::Role role) -> const nn::Tensor& {
        for (const auto& r : c.records)
          if (r.role == role && r.name == kBestPrefix + name) return r.value;
        throw ckpt::CheckpointError(ckpt::Errc::kShapeMismatch, fmt::format("checkpoint lacks best/{}", name));
      };
      for (auto* p : model.params()) s.params.push_back(lookup(p->name, ckpt::Role::kParam));
      for (auto& [name, t] : model.buffers()) s.buffers.push_back(lookup(name, ckpt::Role::kBuffer));
      best = std::move(s);
    }
  } else {
    model.diffusion.reset(config.diffusion_scalar_init);
    for (auto* p : model.params()) p->momentum.zero();
  }
  model.zero_grad();

  const auto params = model.params();
  const std::size_t n = data.train.size();
  const long per_epoch = iters_per_epoch(config, n);
  const long max_iter = per_epoch * config.epochs;
  const std::size_t b = static_cast<std::size_t>(config.batch_size);
  const std::size_t s = static_cast<std::size_t>(config.grad_accum_steps);
  const double sample_scale = 1.0 / static_cast<double>(b * s);
  const bool per_gate = model.config().per_gate_rate;

  std::optional<std::ofstream> history_out;
  if (options.history) {
    if (options.history->has_parent_path()) std::filesystem::create_directories(options.history->parent_path());
    history_out.emplace(*options.history, options.resume ? std::ios::app : std::ios::trunc);
    if (!*history_out) throw ConfigError(fmt::format("cannot write {}", options.history->string()));
  }

  for (int epoch = start_epoch; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);

    EpochRecord rec;
    rec.epoch = epoch;
    double gate_sum = 0.0;
    std::size_t gate_count = 0;
    for (long it = 0; it < per_epoch; ++it) {
      double step_loss = 0.0;
      double step_ce = 0.0;
      double step_rate = 0.0;
      for (std::size_t micro = 0; micro < s; ++micro) {
        std::vector<net::ForwardCache<float>> caches(b);
        std::vector<net::GateTrace> traces;
        std::vector<nn::Tensor> grads;
        double ce = 0.0;
        for (std::size_t j = 0; j < b; ++j) {
          const std::size_t slot = (static_cast<std::size_t>(it) * s + micro) * b + j;
          const synth::Patch& src = data.train[order[slot % n]];
          const synth::Patch* sample = &src;
          synth::Patch flipped;
          if (config.flips) {
            const bool fh = (rng() >> 63) != 0;
            const bool fv = (rng() >> 63) != 0;
            if (fh || fv) {
              flipped = src;
              flipped.annotations = side::AnnotationSet();
              if (fh) flipped = synth::flip_horizontal(flipped);
              if (fv) flipped = synth::flip_vertical(flipped);
              sample = &flipped;
            }
          }
          auto out = model.forward(sample->image, sample->side, net::Mode::kTrain, &rng, &caches[j]);
          auto loss = nn::softmax_cross_entropy(out.logits, sample->labels);
          ce += loss.loss;
          loss.grad *= static_cast<float>(sample_scale);
          grads.push_back(std::move(loss.grad));
          gate_sum += out.trace.executed_fraction;
          ++gate_count;
          traces.push_back(std::move(out.trace));
        }
        ce /= static_cast<double>(b);
        const bool any_soft = !traces.front().soft.empty();
        const double rate = any_soft ? net::target_rate_loss(traces, config.target_rate, per_gate) : 0.0;
        std::vector<std::vector<double>> rate_grad;
        if (any_soft && config.loss_weight > 0.0) {
          rate_grad = net::target_rate_loss_grad(traces, config.target_rate, per_gate);
          for (auto& row : rate_grad)
            for (double& g : row) g *= config.loss_weight / static_cast<double>(s);
        }
        for (std::size_t j = 0; j < b; ++j) {
          model.backward(caches[j], grads[j], rate_grad.empty() ? std::vector<double>{} : rate_grad[j]);
        }
        step_ce += ce / static_cast<double>(s);
        step_rate += rate / static_cast<double>(s);
        step_loss += (ce + config.loss_weight * rate) / static_cast<double>(s);
      }
      if (!std::isfinite(step_loss)) {
        throw DivergenceError(epoch, global_iter,
                              fmt::format("loss became {} at epoch {}, iteration {}", step_loss, epoch, global_iter));
      }
      const nn::GroupRates rates = lr_at(config, epoch, global_iter, max_iter);
      try {
        nn::sgd_step<float>(params, rates, config.momentum);
      } catch (const NumericError& e) {
        throw DivergenceError(epoch, global_iter,
                              fmt::format("epoch {}, iteration {}: {}", epoch, global_iter, e.what()));
      }
      model.zero_grad();
      ++global_iter;
      result.step_losses.push_back(step_loss);
      rec.loss += step_loss / static_cast<double>(per_epoch);
      rec.cross_entropy += step_ce / static_cast<double>(per_epoch);
      rec.rate_loss += step_rate / static_cast<double>(per_epoch);
      rec.lr = rates.base;
    }
    rec.train_gate_rate = gate_count ? gate_sum / static_cast<double>(gate_count) : 0.0;

    const eval::EvalSummary val = eval::evaluate(model, data.val, config.val_patch, config.val_stride);
    rec.val_miou = val.total.miou;
    rec.val_accuracy = val.total.pixel_accuracy;
    rec.val_gate_rate = val.gate_rate;
    result.history.push_back(rec);
    if (history_out) {
      *history_out << rec.to_json().dump() << '\n';
      history_out->flush();
    }
    if (options.on_epoch) options.on_epoch(rec);

    const double metric = config.early_stop_metric == "accuracy" ? rec.val_accuracy : rec.val_miou;
    if (metric > result.best_metric) {
      result.best_metric = metric;
      result.best_epoch = epoch;
      best = take(model);
      bad_epochs = 0;
    } else {
      ++bad_epochs;
    }

    if (options.checkpoint) {
      ckpt::Checkpoint c = ckpt::snapshot(model, true);
      c.kind = ckpt::Kind::kTraining;
      c.config = checkpoint_config(model, config);
      if (best) {
        auto ps = model.params();
        for (std::size_t i = 0; i < ps.size(); ++i)
          c.records.push_back({kBestPrefix + ps[i]->name, ckpt::Role::kParam, best->params[i]});
        auto bs = model.buffers();
        for (std::size_t i = 0; i < bs.size(); ++i)
          c.records.push_back({kBestPrefix + bs[i].first, ckpt::Role::kBuffer, best->buffers[i]});
      }
      nlohmann::json hist = nlohmann::json::array();
      for (const auto& h : result.history) hist.push_back(h.to_json());
      c.state = {{"epoch", epoch},
                 {"iter", global_iter},
                 {"bad_epochs", bad_epochs},
                 {"best_epoch", result.best_epoch},
                 {"best_metric", result.best_metric},
                 {"rng", rng_state(rng)},
                 {"history", hist}};
      ckpt::write(*options.checkpoint, c);
    }

    if (config.early_stop_patience > 0 && bad_epochs >= config.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
    if (options.stop_after_epoch > 0 && epoch >= options.stop_after_epoch) return result;
  }
  if (best) put(model, *best);
  return result;
}

}  // namespace sinet::train
