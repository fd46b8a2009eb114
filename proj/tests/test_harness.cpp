#include "support.hpp"

#include "lpmii/error.hpp"
#include "lpmii/harness.hpp"

#include <doctest.h>

#include <fstream>
#include <iterator>
#include <set>

using namespace lpmii;
using namespace lpmii::harness;
using lpmii::testing::scratch_dir;
using lpmii::testing::small_spec;

namespace {

LodoConfig tiny_lodo(std::size_t seeds) {
  LodoConfig c;
  c.methods = parse_methods("erm,lpmii-severity", 1.0);
  c.seeds = seeds;
  c.master_seed = 17;
  c.base.input_size = 16;
  c.base.channels = {4, 8};
  c.base.latent_dim = 8;
  c.base.hidden = 8;
  c.base.epochs = 1;
  c.base.batch_size = 32;
  return c;
}

RunRecord record(const std::string& method, double top1, double cw = 0.5) {
  RunRecord r;
  r.method = method;
  r.test_domain = "d";
  r.top1 = top1;
  r.class_weighted = cw;
  return r;
}

std::size_t count_rows(const std::string& markdown) {
  std::size_t rows = 0;
  std::size_t pos = 0;
  while ((pos = markdown.find("\n| ", pos)) != std::string::npos) {
    ++rows;
    ++pos;
  }
  return rows;
}

}  // namespace

TEST_CASE("make_folds") {
  const auto folds = make_folds({"Cirrus", "Spectralis", "Topcon"});
  REQUIRE(folds.size() == 3);
  std::multiset<std::string> tested;
  for (const auto& f : folds) {
    tested.insert(f.test_domain);
    CHECK(f.train_domains.size() == 2);
    CHECK(std::find(f.train_domains.begin(), f.train_domains.end(), f.test_domain) == f.train_domains.end());
    std::set<std::string> all(f.train_domains.begin(), f.train_domains.end());
    all.insert(f.test_domain);
    CHECK(all == std::set<std::string>{"Cirrus", "Spectralis", "Topcon"});
  }
  CHECK(tested == std::multiset<std::string>{"Cirrus", "Spectralis", "Topcon"});
  CHECK(make_folds({"a", "b"}).size() == 2);
  CHECK_THROWS_AS(make_folds({"a"}), RangeError);
  CHECK_THROWS_AS(make_folds({}), RangeError);
  CHECK_THROWS(make_folds({"a", "a"}));
}

TEST_CASE("accuracy metrics") {
  const std::vector<int> truth{1, 0, 1, 1, 0};
  const auto perfect = accuracy_metrics(truth, truth);
  CHECK(perfect.top1 == 1.0);
  CHECK(perfect.class_weighted == 1.0);
  CHECK(perfect.count == 5);

  std::vector<int> imbalanced(100, 0);
  for (int i = 0; i < 10; ++i) imbalanced[static_cast<std::size_t>(i)] = 1;
  const std::vector<int> constant(100, 0);
  const auto m = accuracy_metrics(constant, imbalanced);
  CHECK(m.top1 == doctest::Approx(0.9));
  CHECK(m.class_weighted == doctest::Approx(0.5));

  CHECK_THROWS_AS(accuracy_metrics(std::vector<int>{1}, std::vector<int>{1, 0}), ShapeError);
  CHECK(accuracy_metrics(std::vector<int>{}, std::vector<int>{}).count == 0);
}

TEST_CASE("accuracy equals a brute-force recount") {
  Rng rng(31);
  std::uniform_int_distribution<int> bit(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    std::vector<int> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = bit(rng);
      t[i] = bit(rng);
    }
    std::size_t hit = 0, pos = 0, neg = 0, pos_hit = 0, neg_hit = 0;
    for (std::size_t i = 0; i < n; ++i) {
      hit += p[i] == t[i];
      (t[i] ? pos : neg) += 1;
      (t[i] ? pos_hit : neg_hit) += p[i] == t[i];
    }
    const auto m = accuracy_metrics(p, t);
    CHECK(m.top1 == doctest::Approx(static_cast<double>(hit) / static_cast<double>(n)));
    double recall_sum = 0.0;
    int classes = 0;
    if (pos) recall_sum += static_cast<double>(pos_hit) / static_cast<double>(pos), ++classes;
    if (neg) recall_sum += static_cast<double>(neg_hit) / static_cast<double>(neg), ++classes;
    CHECK(m.class_weighted == doctest::Approx(recall_sum / classes));
  }
}

TEST_CASE("evaluate recounts model predictions") {
  const auto domains = data::generate_domains(small_spec(40, 32));
  auto cfg = tiny_lodo(1).base.model_config();
  const model::Model m(cfg, 3);
  const auto metrics = evaluate(m, domains[0], 1);
  train::DomainRefs refs{&domains[0]};
  std::vector<data::SampleRef> all;
  for (std::size_t i = 0; i < 40; ++i) all.push_back({0, i});
  const auto preds = train::predict(m, refs, all);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < 40; ++i) hit += preds[i] == domains[0].samples[i].y(1);
  CHECK(metrics.top1 == doctest::Approx(static_cast<double>(hit) / 40.0));
  CHECK(metrics.count == 40);
}

TEST_CASE("summaries") {
  const std::vector<double> same{0.9, 0.9, 0.9};
  const auto a = summarize(same);
  CHECK(a.mean == doctest::Approx(0.9));
  CHECK(a.std == 0.0);
  const std::vector<double> two{0.8, 1.0};
  const auto b = summarize(two);
  CHECK(b.mean == doctest::Approx(0.9));
  CHECK(b.std == doctest::Approx(0.1));

  const std::vector<RunRecord> recs{record("erm", 0.9), record("erm", 0.9), record("erm", 0.9)};
  const auto md = results_markdown(recs, {});
  CHECK(md.find("0.900 ± 0.000") != std::string::npos);
  const std::vector<RunRecord> recs2{record("lpmii-severity", 0.8), record("lpmii-severity", 1.0)};
  CHECK(results_markdown(recs2, {}).find("0.900 ± 0.100") != std::string::npos);
}

TEST_CASE("markdown: one row per method, baseline first, notes in the header") {
  const std::vector<RunRecord> recs{record("lpmii-mass", 0.7), record("lpmii-severity", 0.8), record("erm", 0.75),
                                    record("lpmii-mass", 0.9)};
  const auto md = results_markdown(recs, {"note one"});
  CHECK(count_rows(md) == 3 + 1);
  CHECK(md.find("- note one") != std::string::npos);
  CHECK(md.find("| erm") < md.find("| lpmii-mass"));
  CHECK(md.find("| lpmii-mass") < md.find("| lpmii-severity"));
  const auto agg = aggregate(recs);
  REQUIRE(agg.size() == 3);
  CHECK(agg[0].method == "lpmii-mass");
  CHECK(agg[0].runs.size() == 2);
  CHECK(agg[0].top1.mean == doctest::Approx(0.8));
}

TEST_CASE("method parsing") {
  const auto m = parse_method("lpmii-severity@0.1", 1.0);
  CHECK(m.name == "lpmii-severity@0.1");
  CHECK(m.objective == train::Objective::lpmii_severity);
  CHECK(m.alpha == 0.1);
  CHECK(parse_method("lpmii-mass", 2.0).alpha == 2.0);
  CHECK(parse_method("erm", 2.0).objective == train::Objective::erm);
  CHECK_THROWS(parse_method("erm@1", 1.0));
  CHECK_THROWS(parse_method("lpmii-severity@-1", 1.0));
  CHECK_THROWS(parse_method("lpmii-severity@x", 1.0));
  CHECK_THROWS(parse_method("vrex", 1.0));
  const auto sweep = parse_methods("erm,lpmii-severity@0.1,lpmii-severity@1,lpmii-severity@10", 1.0);
  CHECK(sweep.size() == 4);
  CHECK(sweep[3].alpha == 10.0);
  CHECK_THROWS(parse_methods("erm,erm", 1.0));
}

TEST_CASE("audit detects leakage") {
  const auto domains = data::generate_domains(small_spec(30, 33));
  const train::DomainRefs train_refs{&domains[0], &domains[1]};
  const FoldSpec fold{domains[2].domain_id, {domains[0].domain_id, domains[1].domain_id}};
  const auto split = train::split_domains(train_refs, 0.2, 1, 1);
  CHECK_NOTHROW(audit_fold(fold, train_refs, split, domains[2]));

  auto overlap = split;
  overlap.validation.push_back(split.train.front());
  CHECK_THROWS_AS(audit_fold(fold, train_refs, overlap, domains[2]), Error);

  auto dup = split;
  dup.train.push_back(split.train.front());
  CHECK_THROWS_AS(audit_fold(fold, train_refs, dup, domains[2]), Error);

  // A training slice filed under the test domain's name.
  auto leaky = domains[2];
  leaky.samples.push_back(domains[0].samples[split.train.front().index]);
  CHECK_THROWS_AS(audit_fold(fold, train_refs, split, leaky), Error);

  const train::DomainRefs with_test{&domains[0], &domains[2]};
  const auto split2 = train::split_domains(with_test, 0.2, 1, 1);
  CHECK_THROWS_AS(audit_fold(fold, with_test, split2, domains[2]), Error);
  CHECK_THROWS_AS(audit_fold(fold, train_refs, split, domains[1]), Error);
}

TEST_CASE("run_lodo: counting contract, ordering and determinism") {
  const auto domains = data::generate_domains(small_spec(40, 34));
  auto cfg = tiny_lodo(5);
  std::size_t calls = 0;
  const auto records = run_lodo(cfg, domains, [&](const RunRecord&, std::size_t done, std::size_t total) {
    ++calls;
    CHECK(done == calls);
    CHECK(total == 30);
  });
  REQUIRE(records.size() == 30);
  CHECK(calls == 30);
  CHECK(count_rows(results_markdown(records, {})) == 2 + 1);
  // Nesting: method, fold, seed.
  CHECK(records[0].method == "erm");
  CHECK(records[0].test_domain == "cirrus");
  CHECK(records[4].seed_index == 4);
  CHECK(records[5].test_domain == "spectralis");
  CHECK(records[15].method == "lpmii-severity");
  // Methods share seeds within a fold and replicate.
  for (std::size_t i = 0; i < 15; ++i) {
    CHECK(records[i].seed == records[i + 15].seed);
    CHECK(records[i].top1 >= 0.0);
    CHECK(records[i].top1 <= 1.0);
  }
  CHECK(records[0].seed != records[1].seed);

  const auto again = run_lodo(cfg, domains);
  CHECK(results_csv(again) == results_csv(records));
  cfg.jobs = 3;
  CHECK(results_csv(run_lodo(cfg, domains)) == results_csv(records));
}

TEST_CASE("run_lodo tags errors with the run") {
  const auto domains = data::generate_domains(small_spec(20, 35));
  auto cfg = tiny_lodo(1);
  cfg.methods = parse_methods("lpmii-mass", 1.0);
  cfg.base.optimizer.kind = train::OptimizerKind::sgd_momentum;
  cfg.base.optimizer.lr = 1e6;
  cfg.base.epochs = 5;
  cfg.base.batch_size = 4;
  std::string msg;
  try {
    run_lodo(cfg, domains);
  } catch (const Error& e) {
    msg = e.what();
  }
  CHECK(msg.find("method lpmii-mass") != std::string::npos);
  CHECK(msg.find("test domain cirrus") != std::string::npos);
  CHECK(msg.find("seed 0") != std::string::npos);
}

TEST_CASE("results files: csv round-trip and recomputable summaries") {
  const auto domains = data::generate_domains(small_spec(30, 36));
  auto cfg = tiny_lodo(2);
  cfg.fluid_classes = {1, 2};
  const auto records = run_lodo(cfg, domains);
  CHECK(records.size() == 2 * 2 * 3 * 2);
  const auto dir = scratch_dir("results");
  emit_results(records, cfg, dir);
  const auto back = read_results_csv(dir / "results.csv");
  REQUIRE(back.size() == records.size());
  CHECK(results_csv(back) == results_csv(records));
  for (const auto& r : aggregate(back)) {
    std::vector<double> values;
    for (const auto& run : r.runs) values.push_back(run.top1);
    const auto s = summarize(values);
    CHECK(std::abs(s.mean - r.top1.mean) < 1e-6);
  }
  std::ifstream md(dir / "results.md");
  const std::string text{std::istreambuf_iterator<char>(md), std::istreambuf_iterator<char>()};
  CHECK(text.find("population") != std::string::npos);
  CHECK(text.find("Fluid class 2") != std::string::npos);
  CHECK_THROWS(read_results_csv(dir / "missing.csv"));
}
