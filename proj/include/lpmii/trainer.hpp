#pragma once
//
// Minibatch training of the ERM and LPMII objectives with training-domain
// validation for model selection.
//

#include "lpmii/data.hpp"
#include "lpmii/model.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace lpmii::train {

using DomainRefs = std::vector<const data::DomainDataset*>;
using Checkpoint = std::vector<std::uint8_t>;

enum class Objective { erm, lpmii_severity, lpmii_mass };

std::string to_string(Objective objective);
Objective parse_objective(const std::string& text);

enum class OptimizerKind { sgd_momentum, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& text);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct TrainConfig {
  Objective objective = Objective::lpmii_severity;
  double alpha = 1.0;
  int n_sc = privileged::kDefaultSeverityScale;
  OptimizerConfig optimizer;
  int epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
  int fluid_class = 1;
  std::size_t latent_dim = 32;
  std::size_t input_size = 64;
  std::size_t hidden = 32;
  std::vector<std::size_t> channels{8, 16, 32};
  double sigma_bias_init = 0.0;
  /// Monte-Carlo draws of eps per sample per step.
  int eps_draws = 1;
  /// Train the stochastic encoder with eps fixed to zero.
  bool zero_noise = false;
  /// Regress mass / (H * W) instead of the raw pixel count.
  bool normalize_mass = false;

  model::ModelConfig model_config() const;
  void validate() const;
};

/// Per-parameter optimizer state.
struct ParamState {
  std::vector<double> m;  // momentum buffer / Adam first moment
  std::vector<double> v;  // Adam second moment
};

/// One update of a single tensor. `step` is 1-based (Adam bias correction).
/// Throws DivergenceError on a non-finite gradient.
void optimizer_step(std::span<double> param, std::span<const double> grad, ParamState& state,
                    const OptimizerConfig& config, std::uint64_t step);

class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<model::NamedTensor> params);
  /// Applies one update from the gradients currently held by the parameters.
  void step();
  std::uint64_t steps() const { return steps_; }

 private:
  OptimizerConfig config_;
  std::vector<model::NamedTensor> params_;
  std::vector<ParamState> state_;
  std::uint64_t steps_ = 0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_task_ce = 0.0;
  double train_priv_loss = 0.0;
  double mi_bound = 0.0;  // NaN unless the objective is lpmii-severity
  double val_accuracy = 0.0;
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  void write_csv(const std::filesystem::path& path) const;
};

struct Split {
  std::vector<data::SampleRef> train;
  std::vector<data::SampleRef> validation;
};

/// Per-domain split stratified by the presence label of `fluid_class`.
/// Both halves are in manifest order.
Split split_domains(const DomainRefs& domains, double val_fraction, int fluid_class, std::uint64_t seed);

/// Assembles a model batch; privileged targets follow the objective.
model::Batch make_batch(const DomainRefs& domains, std::span<const data::SampleRef> refs,
                        const TrainConfig& config);

/// Deterministic predictions (classifier on mu) for the given samples.
std::vector<int> predict(const model::Model& model, const DomainRefs& domains,
                         std::span<const data::SampleRef> refs);

struct StepResult {
  double total = 0.0;
  double task_ce = 0.0;
  double priv_loss = 0.0;
};

/// Owns the model, optimizer and random streams of one training run.
class Trainer {
 public:
  Trainer(TrainConfig config, DomainRefs train_domains);

  const TrainConfig& config() const { return config_; }
  const Split& split() const { return split_; }
  model::Model& model() { return model_; }
  const model::Model& model() const { return model_; }

  /// One optimizer step on the given training samples.
  StepResult step(std::span<const data::SampleRef> batch);
  /// One pass over the training split in a seeded order.
  EpochRecord run_epoch(int epoch);
  double validation_accuracy() const;

 private:
  TrainConfig config_;
  DomainRefs domains_;
  Split split_;
  model::Model model_;
  Optimizer optimizer_;
  Rng eps_rng_;
  int epoch_ = 0;
  std::size_t step_in_epoch_ = 0;
};

struct TrainResult {
  model::Model best;
  TrainHistory history;
  std::size_t best_epoch = 0;  // 1-based
  Split split;
  std::vector<Checkpoint> checkpoints;  // one per epoch
};

/// Index (0-based) of the epoch with the highest validation accuracy;
/// ties go to the earliest epoch.
std::size_t select_epoch(const TrainHistory& history);
const Checkpoint& select_model(const TrainHistory& history, std::span<const Checkpoint> checkpoints);

TrainResult train(const TrainConfig& config, const DomainRefs& train_domains);

}  // namespace lpmii::train
