#include "lpmii/harness.hpp"

#include "lpmii/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace lpmii::harness {

namespace {

std::string fmt(const char* pattern, double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, value);
  return buf;
}

std::string pm(const Summary& s) { return fmt("%.3f", s.mean) + " ± " + fmt("%.3f", s.std); }

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(text);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!text.empty() && text.back() == sep) out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  return s.substr(first, s.find_last_not_of(" \t\r\n") - first + 1);
}

// Baseline first, the rest in first-appearance order.
std::vector<RunResult> ordered(std::span<const RunRecord> records) {
  auto results = aggregate(records);
  std::stable_partition(results.begin(), results.end(), [](const RunResult& r) { return r.method == "erm"; });
  return results;
}

std::string table(const std::vector<RunResult>& results) {
  std::string out = "| method | runs | top-1 accuracy | class-weighted accuracy |\n|---|---:|---:|---:|\n";
  for (const auto& r : results) {
    out += "| " + r.method + " | " + std::to_string(r.runs.size()) + " | " + pm(r.top1) + " | " +
           pm(r.class_weighted) + " |\n";
  }
  return out;
}

}  // namespace

std::vector<FoldSpec> make_folds(const std::vector<std::string>& domains) {
  if (domains.size() < 2) {
    throw RangeError("make_folds: leave-one-domain-out needs at least 2 domains, got " +
                     std::to_string(domains.size()));
  }
  if (std::set<std::string>(domains.begin(), domains.end()).size() != domains.size()) {
    throw RangeError("make_folds: duplicate domain id");
  }
  std::vector<FoldSpec> folds;
  for (const auto& test : domains) {
    FoldSpec f{test, {}};
    for (const auto& d : domains)
      if (d != test) f.train_domains.push_back(d);
    folds.push_back(std::move(f));
  }
  return folds;
}

AccuracyMetrics accuracy_metrics(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("accuracy: prediction and label counts differ");
  AccuracyMetrics m;
  m.count = truth.size();
  if (truth.empty()) return m;
  std::map<int, std::pair<std::size_t, std::size_t>> per_class;  // class -> (hits, total)
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    auto& [h, n] = per_class[truth[i]];
    ++n;
    if (predicted[i] == truth[i]) {
      ++h;
      ++hits;
    }
  }
  m.top1 = static_cast<double>(hits) / static_cast<double>(truth.size());
  double recall = 0.0;
  for (const auto& [cls, hn] : per_class) recall += static_cast<double>(hn.first) / static_cast<double>(hn.second);
  m.class_weighted = recall / static_cast<double>(per_class.size());
  return m;
}

AccuracyMetrics evaluate(const model::Model& model, const data::DomainDataset& domain, int fluid_class) {
  if (domain.samples.empty()) throw DataError("evaluate: domain " + domain.domain_id + " is empty");
  const train::DomainRefs refs{&domain};
  std::vector<data::SampleRef> samples;
  std::vector<int> truth;
  for (std::size_t i = 0; i < domain.samples.size(); ++i) {
    samples.push_back({0, i});
    truth.push_back(domain.samples[i].y(fluid_class));
  }
  const auto predicted = train::predict(model, refs, samples);
  return accuracy_metrics(predicted, truth);
}

MethodSpec parse_method(const std::string& text, double default_alpha) {
  const std::string t = trim(text);
  const auto at = t.find('@');
  MethodSpec m;
  m.objective = train::parse_objective(t.substr(0, at));
  m.name = t;
  m.alpha = m.objective == train::Objective::erm ? 0.0 : default_alpha;
  if (at != std::string::npos) {
    if (m.objective == train::Objective::erm) throw RangeError("method '" + t + "': erm takes no alpha");
    std::size_t used = 0;
    try {
      m.alpha = std::stod(t.substr(at + 1), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != t.size() - at - 1 || !std::isfinite(m.alpha) || m.alpha < 0.0) {
      throw RangeError("method '" + t + "': alpha must be a number >= 0");
    }
  }
  return m;
}

std::vector<MethodSpec> parse_methods(const std::string& comma_list, double default_alpha) {
  std::vector<MethodSpec> methods;
  std::set<std::string> seen;
  for (const auto& item : split(comma_list, ',')) {
    auto m = parse_method(item, default_alpha);
    if (!seen.insert(m.name).second) throw RangeError("method '" + m.name + "' listed twice");
    methods.push_back(std::move(m));
  }
  if (methods.empty()) throw RangeError("no methods given");
  return methods;
}

void audit_fold(const FoldSpec& fold, const train::DomainRefs& train_domains, const train::Split& split,
                const data::DomainDataset& test_domain) {
  if (test_domain.domain_id != fold.test_domain) {
    throw Error("audit: test data is " + test_domain.domain_id + ", fold expects " + fold.test_domain);
  }
  // Sample ids are treated as global identifiers, so a slice filed under two
  // domain names is still caught.
  const auto id_of = [&](const data::SampleRef& r) { return train_domains.at(r.domain)->samples.at(r.index).id; };
  for (const auto* d : train_domains) {
    if (d->domain_id == fold.test_domain) throw Error("audit: test domain " + fold.test_domain + " used for training");
  }
  std::set<std::string> train_ids, val_ids;
  for (const auto& r : split.train) {
    if (!train_ids.insert(id_of(r)).second) throw Error("audit: " + id_of(r) + " appears twice in training");
  }
  for (const auto& r : split.validation) {
    const auto id = id_of(r);
    if (train_ids.count(id)) throw Error("audit: " + id + " is in both training and validation");
    if (!val_ids.insert(id).second) throw Error("audit: " + id + " appears twice in validation");
  }
  for (const auto& s : test_domain.samples) {
    if (train_ids.count(s.id) || val_ids.count(s.id)) {
      throw Error("audit: test sample " + s.id + " leaked into training or validation");
    }
  }
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (const double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(values.size()));
  return s;
}

std::vector<RunResult> aggregate(std::span<const RunRecord> records) {
  std::vector<RunResult> results;
  for (const auto& r : records) {
    auto it = std::find_if(results.begin(), results.end(), [&](const RunResult& x) { return x.method == r.method; });
    if (it == results.end()) {
      results.push_back({r.method, {}, {}, {}});
      it = results.end() - 1;
    }
    it->runs.push_back(r);
  }
  for (auto& res : results) {
    std::vector<double> top1, cw;
    for (const auto& r : res.runs) {
      top1.push_back(r.top1);
      cw.push_back(r.class_weighted);
    }
    res.top1 = summarize(top1);
    res.class_weighted = summarize(cw);
  }
  return results;
}

std::uint64_t replicate_seed(std::uint64_t master_seed, std::size_t index) {
  return derive_seed(master_seed, "seed", index);
}

std::uint64_t run_seed(std::uint64_t master_seed, std::size_t seed_index, const std::string& test_domain,
                       int fluid_class) {
  return derive_seed(replicate_seed(master_seed, seed_index), "fold/" + test_domain,
                     static_cast<std::uint64_t>(fluid_class));
}

std::vector<RunRecord> run_lodo(const LodoConfig& config, std::span<const data::DomainDataset> domains,
                                const Progress& progress) {
  if (config.methods.empty()) throw RangeError("lodo: no methods");
  if (config.seeds == 0) throw RangeError("lodo: at least one seed is required");
  if (config.fluid_classes.empty()) throw RangeError("lodo: no fluid classes");
  std::vector<std::string> ids;
  for (const auto& d : domains) ids.push_back(d.domain_id);
  const auto folds = make_folds(ids);

  struct Task {
    const MethodSpec* method;
    int fluid_class;
    std::size_t fold;
    std::size_t seed_index;
  };
  std::vector<Task> tasks;
  for (const auto& m : config.methods)
    for (const int l : config.fluid_classes)
      for (std::size_t f = 0; f < folds.size(); ++f)
        for (std::size_t s = 0; s < config.seeds; ++s) tasks.push_back({&m, l, f, s});

  std::vector<RunRecord> records(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());
  std::atomic<std::size_t> next{0};
  std::size_t done = 0;
  std::mutex progress_mutex;

  const auto run_one = [&](std::size_t t) {
    const auto& task = tasks[t];
    const auto& fold = folds[task.fold];
    const std::uint64_t seed = replicate_seed(config.master_seed, task.seed_index);
    train::DomainRefs train_refs;
    const data::DomainDataset* test = nullptr;
    for (const auto& d : domains) {
      if (d.domain_id == fold.test_domain) {
        test = &d;
      } else {
        train_refs.push_back(&d);
      }
    }
    auto cfg = config.base;
    cfg.objective = task.method->objective;
    cfg.alpha = task.method->alpha;
    cfg.fluid_class = task.fluid_class;
    cfg.seed = run_seed(config.master_seed, task.seed_index, fold.test_domain, task.fluid_class);
    try {
      audit_fold(fold, train_refs, train::split_domains(train_refs, cfg.val_fraction, cfg.fluid_class, cfg.seed),
                 *test);
      const auto result = train::train(cfg, train_refs);
      const auto metrics = evaluate(result.best, *test, task.fluid_class);
      records[t] = {task.method->name, task.fluid_class, fold.test_domain, task.seed_index, seed,
                    metrics.top1,      metrics.class_weighted, result.best_epoch};
    } catch (const std::exception& e) {
      errors[t] = std::make_exception_ptr(Error("method " + task.method->name + ", fluid class " +
                                                std::to_string(task.fluid_class) + ", test domain " +
                                                fold.test_domain + ", seed " + std::to_string(task.seed_index) +
                                                ": " + e.what()));
      return;
    }
    if (progress) {
      const std::lock_guard lock(progress_mutex);
      progress(records[t], ++done, tasks.size());
    }
  };

  const auto worker = [&] {
    for (std::size_t t = next++; t < tasks.size(); t = next++) {
      run_one(t);
      if (errors[t]) next = tasks.size();
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min(config.jobs, tasks.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return records;
}

std::vector<std::string> describe(const LodoConfig& config) {
  const auto& b = config.base;
  std::string methods, classes;
  for (const auto& m : config.methods) {
    methods += (methods.empty() ? "" : ", ") + m.name + (m.objective == train::Objective::erm ? "" : fmt(" (alpha %g)", m.alpha));
  }
  for (const int l : config.fluid_classes) classes += (classes.empty() ? "" : ", ") + std::to_string(l);
  std::string channels;
  for (const auto c : b.channels) channels += (channels.empty() ? "" : ",") + std::to_string(c);
  return {
      "accuracy: held-out domain, classifier applied to the deterministic latent mu",
      "class-weighted accuracy: mean of per-class recalls",
      "dispersion: population standard deviation over all fold x seed runs",
      "model selection: best epoch by pooled training-domain validation accuracy, ties to the earliest",
      "methods: " + methods,
      "fluid classes: " + classes,
      "seeds: " + std::to_string(config.seeds) + " replicates from master seed " + std::to_string(config.master_seed),
      "optimizer: " + train::to_string(b.optimizer.kind) + fmt(", lr %g", b.optimizer.lr) +
          fmt(", weight decay %g", b.optimizer.weight_decay),
      "epochs: " + std::to_string(b.epochs) + ", batch size: " + std::to_string(b.batch_size) +
          fmt(", validation fraction: %g", b.val_fraction),
      "model: input " + std::to_string(b.input_size) + ", channels [" + channels + "], latent " +
          std::to_string(b.latent_dim) + ", hidden " + std::to_string(b.hidden) + ", N_sc " + std::to_string(b.n_sc),
  };
}

std::string results_csv(std::span<const RunRecord> records) {
  std::string out = "method,fluid_class,test_domain,seed_index,seed,top1,class_weighted,best_epoch\n";
  for (const auto& r : records) {
    out += r.method + "," + std::to_string(r.fluid_class) + "," + r.test_domain + "," + std::to_string(r.seed_index) +
           "," + std::to_string(r.seed) + "," + fmt("%.6f", r.top1) + "," + fmt("%.6f", r.class_weighted) + "," +
           std::to_string(r.best_epoch) + "\n";
  }
  return out;
}

std::string results_markdown(std::span<const RunRecord> records, const std::vector<std::string>& notes) {
  if (records.empty()) throw Error("emit_results: no results");
  std::string out = "# Leave-one-domain-out results\n\n";
  for (const auto& n : notes) out += "- " + n + "\n";
  if (!notes.empty()) out += "\n";
  out += table(ordered(records));

  std::set<int> classes;
  for (const auto& r : records) classes.insert(r.fluid_class);
  if (classes.size() > 1) {
    out += "\nThe table above pools every fluid class; per-class results follow.\n";
    for (const int l : classes) {
      std::vector<RunRecord> subset;
      for (const auto& r : records)
        if (r.fluid_class == l) subset.push_back(r);
      out += "\n## Fluid class " + std::to_string(l) + "\n\n" + table(ordered(subset));
    }
  }
  return out;
}

void emit_results(std::span<const RunRecord> records, const LodoConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary);
    out << text;
    if (!out) throw DataError("cannot write " + (dir / name).string());
  };
  write("results.csv", results_csv(records));
  write("results.md", results_markdown(records, describe(config)));
}

std::vector<RunRecord> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (split(trim(line), ',').size() != 8) throw DataError(path.string() + ": unexpected header");
  std::vector<RunRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 8) throw DataError(path.string() + ":" + std::to_string(line_no) + ": wrong column count");
    try {
      records.push_back({f[0], std::stoi(f[1]), f[2], std::stoul(f[3]), std::stoull(f[4]), std::stod(f[5]),
                         std::stod(f[6]), std::stoul(f[7])});
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed row");
    }
  }
  return records;
}

}  // namespace lpmii::harness
