#pragma once
//
// Leave-one-domain-out driver, accuracy metrics and result tables.
//

#include "lpmii/data.hpp"
#include "lpmii/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace lpmii::harness {

struct FoldSpec {
  std::string test_domain;
  std::vector<std::string> train_domains;
};

/// One fold per domain, in the given order; fewer than two domains is an error.
std::vector<FoldSpec> make_folds(const std::vector<std::string>& domains);

struct AccuracyMetrics {
  double top1 = 0.0;
  double class_weighted = 0.0;  // mean per-class recall over classes present in truth
  std::size_t count = 0;
};

AccuracyMetrics accuracy_metrics(std::span<const int> predicted, std::span<const int> truth);

/// Deterministic forward on mu over every sample of `domain`.
AccuracyMetrics evaluate(const model::Model& model, const data::DomainDataset& domain, int fluid_class);

/// "erm", "lpmii-severity", "lpmii-mass", optionally suffixed "@alpha".
struct MethodSpec {
  std::string name;
  train::Objective objective = train::Objective::erm;
  double alpha = 0.0;
};

MethodSpec parse_method(const std::string& text, double default_alpha);
std::vector<MethodSpec> parse_methods(const std::string& comma_list, double default_alpha);

/// Raises Error when any two of train, validation and test share a sample or
/// the test domain is among the training domains. Sample ids are compared
/// across domains.
void audit_fold(const FoldSpec& fold, const train::DomainRefs& train_domains, const train::Split& split,
                const data::DomainDataset& test_domain);

struct RunRecord {
  std::string method;
  int fluid_class = 1;
  std::string test_domain;
  std::size_t seed_index = 0;
  std::uint64_t seed = 0;
  double top1 = 0.0;
  double class_weighted = 0.0;
  std::size_t best_epoch = 0;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t count = 0;
};

Summary summarize(std::span<const double> values);

struct RunResult {
  std::string method;
  std::vector<RunRecord> runs;
  Summary top1;
  Summary class_weighted;
};

/// Groups records by method in first-appearance order.
std::vector<RunResult> aggregate(std::span<const RunRecord> records);

struct LodoConfig {
  std::vector<MethodSpec> methods;
  std::size_t seeds = 5;
  std::uint64_t master_seed = 0;
  std::vector<int> fluid_classes{1};
  train::TrainConfig base;
  std::size_t jobs = 1;
};

/// Seed of replicate i, shared by every method and fold.
std::uint64_t replicate_seed(std::uint64_t master_seed, std::size_t index);

/// Training seed of one run. Every method gets the same value for a given
/// replicate, fold and fluid class, hence the same split, batch order and noise.
std::uint64_t run_seed(std::uint64_t master_seed, std::size_t seed_index, const std::string& test_domain,
                       int fluid_class);

using Progress = std::function<void(const RunRecord&, std::size_t done, std::size_t total)>;

/// Every method x fluid class x fold x seed. Records come back in that
/// nesting order regardless of `jobs`.
std::vector<RunRecord> run_lodo(const LodoConfig& config, std::span<const data::DomainDataset> domains,
                                const Progress& progress = {});

/// Writes results.csv (one row per run) and results.md (mean +- std per method,
/// baseline first) into `dir`.
void emit_results(std::span<const RunRecord> records, const LodoConfig& config, const std::filesystem::path& dir);

/// Header bullets of results.md: conventions and the resolved configuration.
std::vector<std::string> describe(const LodoConfig& config);

std::string results_csv(std::span<const RunRecord> records);
std::string results_markdown(std::span<const RunRecord> records, const std::vector<std::string>& notes);
std::vector<RunRecord> read_results_csv(const std::filesystem::path& path);

}  // namespace lpmii::harness
