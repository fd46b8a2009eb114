// Command-line front end: data generation, label derivation, training and
// leave-one-domain-out experiments.

#include "lpmii/checkpoint.hpp"
#include "lpmii/config.hpp"
#include "lpmii/data.hpp"
#include "lpmii/error.hpp"
#include "lpmii/harness.hpp"
#include "lpmii/trainer.hpp"

#include <CLI11.hpp>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace lpmii;

namespace {

struct DataOptions {
  std::string dir;
  std::string domains;  // comma list; empty = every domain under dir
  int n_sc = privileged::kDefaultSeverityScale;
  int fluid_classes = privileged::kDefaultFluidClasses;
};

void add_data_options(CLI::App* cmd, DataOptions& opt) {
  cmd->add_option("--data", opt.dir, "Dataset root (one subdirectory per domain) or a single domain")
      ->required()
      ->check(CLI::ExistingDirectory);
  cmd->add_option("--fluid-classes", opt.fluid_classes, "Number of fluid classes in the manifests")
      ->capture_default_str();
}

// A directory holding manifest.csv is one domain; otherwise every domain below it.
std::vector<data::DomainDataset> load_domains(const DataOptions& opt) {
  const fs::path root(opt.dir);
  std::vector<data::DomainDataset> out;
  if (fs::exists(root / "manifest.csv")) {
    out.push_back(data::load_dataset(root, opt.n_sc, opt.fluid_classes));
    return out;
  }
  auto names = data::list_domains(root);
  if (!opt.domains.empty()) {
    std::vector<std::string> wanted;
    std::string item;
    std::istringstream in(opt.domains);
    while (std::getline(in, item, ',')) {
      if (std::find(names.begin(), names.end(), item) == names.end()) {
        throw DataError("domain '" + item + "' not found under " + root.string());
      }
      wanted.push_back(item);
    }
    names = wanted;
  }
  if (names.empty()) throw DataError("missing manifest: no domain directories under " + root.string());
  for (const auto& name : names) out.push_back(data::load_dataset(root / name, opt.n_sc, opt.fluid_classes));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

struct TrainOverrides {
  std::optional<int> epochs;
  std::optional<double> alpha;
  std::optional<double> lr;
  std::optional<std::size_t> batch;

  void add(CLI::App* cmd) {
    cmd->add_option("--epochs", epochs, "Override the number of epochs");
    cmd->add_option("--alpha", alpha, "Override the privileged-loss weight");
    cmd->add_option("--lr", lr, "Override the learning rate");
    cmd->add_option("--batch", batch, "Override the batch size");
  }

  void apply(train::TrainConfig& cfg) const {
    if (epochs) cfg.epochs = *epochs;
    if (alpha) cfg.alpha = *alpha;
    if (lr) cfg.optimizer.lr = *lr;
    if (batch) cfg.batch_size = *batch;
  }
};

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Training reuses multi-megabyte buffers every step; keep them on the heap
  // instead of mapping and unmapping pages each time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Privileged-information domain generalization toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic multi-domain dataset");
  std::string spec_path, gen_out;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--spec", spec_path, "Generator spec (TOML); defaults apply when omitted")
      ->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output root")->required();
  gen->add_option("--seed", gen_seed, "Override the master seed");

  // derive-labels
  auto* labels = app.add_subcommand("derive-labels", "Recompute mass, severity and presence from the masks");
  DataOptions label_data;
  std::string labels_out;
  add_data_options(labels, label_data);
  labels->add_option("--out", labels_out, "Output CSV")->required();
  labels->add_option("--nsc", label_data.n_sc, "Severity scale N_sc")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "Train one model on the given domains");
  DataOptions train_data;
  std::string train_cfg_path, train_out;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::string> objective;
  TrainOverrides train_over;
  add_data_options(tr, train_data);
  tr->add_option("--config", train_cfg_path, "Training config (TOML)")->check(CLI::ExistingFile);
  tr->add_option("--out", train_out, "Run directory")->required();
  tr->add_option("--domains", train_data.domains, "Comma-separated training domains (default: all)");
  tr->add_option("--objective", objective, "erm | lpmii-severity | lpmii-mass");
  tr->add_option("--seed", train_seed, "Override the seed");
  train_over.add(tr);

  // lodo
  auto* lodo = app.add_subcommand("lodo", "Leave-one-domain-out comparison of several methods");
  DataOptions lodo_data;
  std::string lodo_cfg_path, lodo_out, methods_text;
  std::optional<std::size_t> seeds, jobs;
  std::optional<std::uint64_t> master_seed;
  std::vector<int> fluid_classes;
  TrainOverrides lodo_over;
  add_data_options(lodo, lodo_data);
  lodo->add_option("--config", lodo_cfg_path, "Training config with an optional [lodo] table")
      ->check(CLI::ExistingFile);
  lodo->add_option("--out", lodo_out, "Output directory")->required();
  lodo->add_option("--methods", methods_text, "Comma list, e.g. erm,lpmii-severity,lpmii-mass@0.1");
  lodo->add_option("--seeds", seeds, "Number of seed replicates");
  lodo->add_option("--seed", master_seed, "Master seed");
  lodo->add_option("--fluid-class", fluid_classes, "Fluid classes to run (repeatable)");
  lodo->add_option("--jobs", jobs, "Concurrent training runs");
  lodo->add_option("--domains", lodo_data.domains, "Comma-separated domains (default: all)");
  lodo_over.add(lodo);

  // report
  auto* report = app.add_subcommand("report", "Re-render the results table from results.csv");
  std::string report_in, report_out;
  report->add_option("results", report_in, "results.csv or the directory holding it")->required();
  report->add_option("--out", report_out, "Write markdown here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto spec = spec_path.empty() ? data::SynthSpec{} : config::load_synth_spec(spec_path);
      if (gen_seed) spec.seed = *gen_seed;
      spec.validate();
      const auto dirs = data::generate_synthetic(spec, gen_out);
      write_text(fs::path(gen_out) / "spec.toml", config::to_toml(spec));
      for (const auto& d : dirs) std::cout << d.string() << '\n';
    } else if (*labels) {
      const auto domains = load_domains(label_data);
      const bool qualify = domains.size() > 1 || !fs::exists(fs::path(label_data.dir) / "manifest.csv");
      std::ofstream out(labels_out);
      if (!out) throw DataError("cannot write " + labels_out);
      out << "sample_id,fluid_class,mass,severity,presence\n";
      for (const auto& d : domains) {
        for (const auto& s : d.samples) {
          for (int l = 1; l <= d.fluid_classes; ++l) {
            const auto i = static_cast<std::size_t>(l - 1);
            out << (qualify ? d.domain_id + "/" : "") << s.id << ',' << l << ',' << s.labels.mass[i] << ','
                << s.labels.severity[i] << ',' << s.labels.presence[i] << '\n';
          }
        }
      }
    } else if (*tr) {
      auto cfg = train_cfg_path.empty() ? train::TrainConfig{} : config::load_train_config(train_cfg_path);
      if (objective) cfg.objective = train::parse_objective(*objective);
      if (train_seed) cfg.seed = *train_seed;
      train_over.apply(cfg);
      train_data.n_sc = cfg.n_sc;
      cfg.validate();
      const auto domains = load_domains(train_data);
      train::DomainRefs refs;
      for (const auto& d : domains) refs.push_back(&d);
      const auto result = train::train(cfg, refs);
      fs::create_directories(train_out);
      model::save_checkpoint(result.best, fs::path(train_out) / "checkpoint.bin");
      result.history.write_csv(fs::path(train_out) / "history.csv");
      write_text(fs::path(train_out) / "config.toml", config::to_toml(cfg));
      const auto& best = result.history.epochs[result.best_epoch - 1];
      std::printf("best epoch %zu, validation accuracy %.4f\n", result.best_epoch, best.val_accuracy);
    } else if (*lodo) {
      auto cfg = lodo_cfg_path.empty() ? harness::LodoConfig{} : config::load_lodo_config(lodo_cfg_path);
      lodo_over.apply(cfg.base);
      if (!methods_text.empty()) cfg.methods = harness::parse_methods(methods_text, cfg.base.alpha);
      if (cfg.methods.empty()) cfg.methods = harness::parse_methods("erm,lpmii-severity,lpmii-mass", cfg.base.alpha);
      if (seeds) cfg.seeds = *seeds;
      if (master_seed) cfg.master_seed = *master_seed;
      if (!fluid_classes.empty()) cfg.fluid_classes = fluid_classes;
      if (jobs) cfg.jobs = *jobs;
      lodo_data.n_sc = cfg.base.n_sc;
      cfg.base.validate();
      const auto domains = load_domains(lodo_data);
      const auto records = harness::run_lodo(cfg, domains, [](const harness::RunRecord& r, std::size_t done,
                                                             std::size_t total) {
        std::fprintf(stderr, "[%zu/%zu] %s class %d test %s seed %zu: top-1 %.4f, class-weighted %.4f\n", done,
                     total, r.method.c_str(), r.fluid_class, r.test_domain.c_str(), r.seed_index, r.top1,
                     r.class_weighted);
      });
      harness::emit_results(records, cfg, lodo_out);
      write_text(fs::path(lodo_out) / "config.toml", config::to_toml(cfg));
      std::cout << harness::results_markdown(records, {});
    } else if (*report) {
      fs::path in(report_in);
      if (fs::is_directory(in)) in /= "results.csv";
      const auto records = harness::read_results_csv(in);
      const auto text = harness::results_markdown(records, {});
      if (report_out.empty()) {
        std::cout << text;
      } else {
        write_text(report_out, text);
      }
    }
  } catch (const lpmii::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
