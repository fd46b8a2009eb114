#include "lpmii/trainer.hpp"

#include "lpmii/checkpoint.hpp"
#include "lpmii/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace lpmii::train {

namespace {

constexpr std::size_t kEvalChunk = 256;

const data::Sample& sample_at(const DomainRefs& domains, const data::SampleRef& ref) {
  return domains.at(ref.domain)->samples.at(ref.index);
}

// Bilinear resampling (half-pixel centres) of one 8-bit image into `out`.
void resample(const data::GrayImage& img, std::size_t size, double* out) {
  const double sy = static_cast<double>(img.height) / static_cast<double>(size);
  const double sx = static_cast<double>(img.width) / static_cast<double>(size);
  const auto px = [&](std::size_t r, std::size_t c) { return img.pixels[r * img.width + c] / 255.0; };
  for (std::size_t r = 0; r < size; ++r) {
    const double fy = std::clamp((static_cast<double>(r) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const auto y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t c = 0; c < size; ++c) {
      const double fx = std::clamp((static_cast<double>(c) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const auto x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      out[r * size + c] = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                          wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
    }
  }
}

// Zero mean, unit variance per image; a constant image becomes all zeros.
void standardize(double* x, std::size_t n) {
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  const double scale = sd > 1e-12 ? 1.0 / sd : 0.0;
  for (std::size_t i = 0; i < n; ++i) x[i] = (x[i] - mean) * scale;
}

// [n, 1, size, size] input tensor; images of another size are resampled,
// then each image is standardized.
tensor::Tensor images(const DomainRefs& domains, std::span<const data::SampleRef> refs, std::size_t size) {
  std::vector<double> values(refs.size() * size * size);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& img = sample_at(domains, refs[i]).image;
    double* out = values.data() + i * size * size;
    if (img.height == size && img.width == size) {
      for (std::size_t p = 0; p < size * size; ++p) out[p] = img.pixels[p] / 255.0;
    } else {
      resample(img, size, out);
    }
    standardize(out, size * size);
  }
  return tensor::Tensor({refs.size(), 1, size, size}, std::move(values));
}

}  // namespace

std::string to_string(Objective objective) {
  switch (objective) {
    case Objective::erm: return "erm";
    case Objective::lpmii_severity: return "lpmii-severity";
    case Objective::lpmii_mass: return "lpmii-mass";
  }
  return "unknown";
}

Objective parse_objective(const std::string& text) {
  if (text == "erm") return Objective::erm;
  if (text == "lpmii-severity") return Objective::lpmii_severity;
  if (text == "lpmii-mass") return Objective::lpmii_mass;
  throw RangeError("unknown objective '" + text + "' (expected erm, lpmii-severity or lpmii-mass)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd-momentum"; }

OptimizerKind parse_optimizer(const std::string& text) {
  if (text == "adam") return OptimizerKind::adam;
  if (text == "sgd-momentum" || text == "sgd") return OptimizerKind::sgd_momentum;
  throw RangeError("unknown optimizer '" + text + "' (expected adam or sgd-momentum)");
}

model::ModelConfig TrainConfig::model_config() const {
  model::ModelConfig cfg;
  cfg.input_size = input_size;
  cfg.channels = channels;
  cfg.latent_dim = latent_dim;
  cfg.hidden = hidden;
  cfg.n_sc = n_sc;
  cfg.sigma_bias_init = sigma_bias_init;
  switch (objective) {
    case Objective::erm:
      cfg.stochastic = false;
      cfg.privileged.reset();
      break;
    case Objective::lpmii_severity:
      cfg.stochastic = true;
      cfg.privileged = privileged::PrivilegedKind::severity;
      break;
    case Objective::lpmii_mass:
      cfg.stochastic = true;
      cfg.privileged = privileged::PrivilegedKind::mass;
      break;
  }
  return cfg;
}

void TrainConfig::validate() const {
  if (!std::isfinite(alpha) || alpha < 0.0) throw RangeError("train config: alpha must be >= 0");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw RangeError("train config: validation fraction must lie in (0, 1)");
  if (!(optimizer.lr >= 0.0) || !std::isfinite(optimizer.lr)) throw RangeError("train config: learning rate must be >= 0");
  if (epochs < 1) throw RangeError("train config: epochs must be >= 1");
  if (batch_size == 0) throw RangeError("train config: batch size must be >= 1");
  if (eps_draws < 1) throw RangeError("train config: eps draws must be >= 1");
  if (fluid_class < 1) throw RangeError("train config: fluid class must be >= 1");
  model_config().validate();
}

// ---------------------------------------------------------------------------
// Optimizers

void optimizer_step(std::span<double> param, std::span<const double> grad, ParamState& state,
                    const OptimizerConfig& config, std::uint64_t step) {
  if (param.size() != grad.size()) throw ShapeError("optimizer: parameter and gradient sizes differ");
  for (const double g : grad) {
    if (!std::isfinite(g)) throw DivergenceError("optimizer: non-finite gradient");
  }
  if (state.m.size() != param.size()) state.m.assign(param.size(), 0.0);
  const double wd = config.weight_decay;
  if (config.kind == OptimizerKind::sgd_momentum) {
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double g = grad[i] + wd * param[i];
      state.m[i] = config.momentum * state.m[i] + g;
      param[i] -= config.lr * state.m[i];
    }
    return;
  }
  if (state.v.size() != param.size()) state.v.assign(param.size(), 0.0);
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i] + wd * param[i];
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    param[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
  }
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<model::NamedTensor> params)
    : config_(config), params_(std::move(params)), state_(params_.size()) {}

void Optimizer::step() {
  ++steps_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].second;
    try {
      optimizer_step(t.data(), t.grad(), state_[i], config_, steps_);
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(e.what()) + " in " + params_[i].first);
    }
  }
}

// ---------------------------------------------------------------------------
// History and selection

void TrainHistory::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,train_task_ce,train_priv_loss,mi_bound,val_accuracy,wall_seconds\n";
  char line[256];
  for (const auto& r : epochs) {
    std::snprintf(line, sizeof line, "%d,%.10f,%.10f,%.10f,%.10f,%.3f\n", r.epoch, r.train_task_ce,
                  r.train_priv_loss, r.mi_bound, r.val_accuracy, r.wall_seconds);
    out << line;
  }
}

std::size_t select_epoch(const TrainHistory& history) {
  if (history.epochs.empty()) throw Error("select_model: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.epochs.size(); ++i)
    if (history.epochs[i].val_accuracy > history.epochs[best].val_accuracy) best = i;
  return best;
}

const Checkpoint& select_model(const TrainHistory& history, std::span<const Checkpoint> checkpoints) {
  const std::size_t best = select_epoch(history);
  if (checkpoints.size() != history.epochs.size()) {
    throw Error("select_model: " + std::to_string(checkpoints.size()) + " checkpoints for " +
                std::to_string(history.epochs.size()) + " epochs");
  }
  return checkpoints[best];
}

// ---------------------------------------------------------------------------
// Data plumbing

Split split_domains(const DomainRefs& domains, double val_fraction, int fluid_class, std::uint64_t seed) {
  Split split;
  for (std::size_t d = 0; d < domains.size(); ++d) {
    std::vector<std::size_t> strata[2];
    const auto& samples = domains[d]->samples;
    for (std::size_t i = 0; i < samples.size(); ++i) strata[samples[i].y(fluid_class)].push_back(i);
    std::vector<bool> is_val(samples.size(), false);
    for (int label = 0; label < 2; ++label) {
      auto& idx = strata[label];
      Rng rng(derive_seed(seed, "split", d * 2 + static_cast<std::size_t>(label)));
      std::shuffle(idx.begin(), idx.end(), rng);
      const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(idx.size())));
      for (std::size_t k = 0; k < n_val; ++k) is_val[idx[k]] = true;
    }
    for (std::size_t i = 0; i < samples.size(); ++i) (is_val[i] ? split.validation : split.train).push_back({d, i});
  }
  return split;
}

model::Batch make_batch(const DomainRefs& domains, std::span<const data::SampleRef> refs,
                        const TrainConfig& config) {
  if (refs.empty()) throw ShapeError("make_batch: empty batch");
  model::Batch batch;
  batch.x = images(domains, refs, config.input_size);
  const int l = config.fluid_class;
  for (const auto& ref : refs) {
    const auto& s = sample_at(domains, ref);
    batch.y.push_back(s.y(l));
    if (config.objective == Objective::lpmii_severity) {
      batch.severity.push_back(s.labels.severity.at(static_cast<std::size_t>(l - 1)));
    } else if (config.objective == Objective::lpmii_mass) {
      double mass = static_cast<double>(s.labels.mass.at(static_cast<std::size_t>(l - 1)));
      if (config.normalize_mass) mass /= static_cast<double>(s.mask.area());
      batch.mass.push_back(mass);
    }
  }
  return batch;
}

std::vector<int> predict(const model::Model& model, const DomainRefs& domains,
                         std::span<const data::SampleRef> refs) {
  std::vector<int> out;
  out.reserve(refs.size());
  for (std::size_t start = 0; start < refs.size(); start += kEvalChunk) {
    const auto chunk = refs.subspan(start, std::min(kEvalChunk, refs.size() - start));
    const auto preds = model.predict(images(domains, chunk, model.config().input_size));
    out.insert(out.end(), preds.begin(), preds.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

DomainRefs checked_domains(DomainRefs domains, const TrainConfig& config) {
  if (domains.empty()) throw Error("train: at least one training domain is required");
  for (const auto* d : domains) {
    if (d->samples.empty()) throw DataError("train: domain " + d->domain_id + " has no samples");
    if (config.fluid_class > d->fluid_classes) throw RangeError("train: fluid class out of range for " + d->domain_id);
    if (d->n_sc != config.n_sc) {
      throw DataError("train: domain " + d->domain_id + " was labelled with N_sc = " + std::to_string(d->n_sc) +
                      ", config uses " + std::to_string(config.n_sc));
    }
  }
  return domains;
}

}  // namespace

Trainer::Trainer(TrainConfig config, DomainRefs train_domains)
    : config_((config.validate(), std::move(config))),
      domains_(checked_domains(std::move(train_domains), config_)),
      split_(split_domains(domains_, config_.val_fraction, config_.fluid_class, config_.seed)),
      model_(config_.model_config(), derive_seed(config_.seed, "init")),
      optimizer_(config_.optimizer, model_.named_parameters()),
      eps_rng_(derive_seed(config_.seed, "eps")) {
  if (split_.train.empty()) throw Error("train: training split is empty");
}

StepResult Trainer::step(std::span<const data::SampleRef> refs) {
  const auto batch = make_batch(domains_, refs, config_);
  std::vector<tensor::Tensor> draws;
  if (config_.objective != Objective::erm) {
    for (int d = 0; d < config_.eps_draws; ++d) {
      draws.push_back(config_.zero_noise ? tensor::Tensor({batch.size(), config_.latent_dim}, 0.0)
                                         : model::sample_eps(eps_rng_, batch.size(), config_.latent_dim));
    }
  }
  const double alpha = config_.objective == Objective::erm ? 0.0 : config_.alpha;

  model_.zero_grad();
  tensor::Graph graph;
  const auto loss = model::lpmii_loss(graph, model_, batch, alpha, draws);
  StepResult result{loss.total.item(), loss.task_ce, loss.priv_loss};
  const auto where = [&] {
    return "epoch " + std::to_string(epoch_) + " step " + std::to_string(step_in_epoch_);
  };
  if (!std::isfinite(result.total)) throw DivergenceError("train: non-finite loss at " + where());
  graph.backward(loss.total);
  try {
    optimizer_.step();
  } catch (const DivergenceError& e) {
    throw DivergenceError(std::string(e.what()) + " at " + where());
  }
  ++step_in_epoch_;
  return result;
}

EpochRecord Trainer::run_epoch(int epoch) {
  const auto start = std::chrono::steady_clock::now();
  epoch_ = epoch;
  step_in_epoch_ = 0;
  const auto plan = data::make_batches(split_.train, config_.batch_size,
                                       derive_seed(config_.seed, "epoch", static_cast<std::uint64_t>(epoch)), true);
  double task = 0.0, priv = 0.0;
  std::size_t seen = 0;
  for (const auto& refs : plan) {
    const auto r = step(refs);
    task += r.task_ce * static_cast<double>(refs.size());
    priv += r.priv_loss * static_cast<double>(refs.size());
    seen += refs.size();
  }
  EpochRecord rec;
  rec.epoch = epoch;
  rec.train_task_ce = task / static_cast<double>(seen);
  rec.train_priv_loss = priv / static_cast<double>(seen);
  rec.mi_bound = config_.objective == Objective::lpmii_severity ? -rec.train_priv_loss
                                                                : std::numeric_limits<double>::quiet_NaN();
  rec.val_accuracy = validation_accuracy();
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

double Trainer::validation_accuracy() const {
  if (split_.validation.empty()) return 0.0;
  const auto preds = predict(model_, domains_, split_.validation);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == sample_at(domains_, split_.validation[i]).y(config_.fluid_class)) ++correct;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

TrainResult train(const TrainConfig& config, const DomainRefs& train_domains) {
  Trainer trainer(config, train_domains);
  TrainHistory history;
  std::vector<Checkpoint> checkpoints;
  for (int e = 1; e <= config.epochs; ++e) {
    history.epochs.push_back(trainer.run_epoch(e));
    checkpoints.push_back(model::serialize_checkpoint(trainer.model()));
  }
  const std::size_t best = select_epoch(history);
  TrainResult result{model::deserialize_checkpoint(select_model(history, checkpoints)), std::move(history),
                     best + 1, trainer.split(), std::move(checkpoints)};
  return result;
}

}  // namespace lpmii::train
