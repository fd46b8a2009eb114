#include "support.hpp"

#include "lpmii/checkpoint.hpp"
#include "lpmii/error.hpp"
#include "lpmii/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

using namespace lpmii;
using namespace lpmii::train;
using lpmii::testing::small_spec;

namespace {

TrainConfig small_config(Objective objective) {
  TrainConfig c;
  c.objective = objective;
  c.input_size = 16;
  c.channels = {4, 8};
  c.latent_dim = 8;
  c.hidden = 8;
  c.epochs = 3;
  c.batch_size = 16;
  c.seed = 5;
  return c;
}

struct Fixture {
  std::vector<data::DomainDataset> domains = data::generate_domains(small_spec(60, 21));
  DomainRefs refs() const {
    DomainRefs r;
    for (const auto& d : domains) r.push_back(&d);
    return r;
  }
};

std::vector<double> flat_params(const model::Model& m, bool shared_only) {
  std::vector<double> out;
  for (const auto& [name, t] : m.named_parameters()) {
    if (shared_only && (name.rfind("sigma_head", 0) == 0 || name.rfind("priv_head", 0) == 0)) continue;
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return out;
}

TrainHistory history_of(std::vector<double> accuracies) {
  TrainHistory h;
  for (std::size_t i = 0; i < accuracies.size(); ++i) {
    EpochRecord r;
    r.epoch = static_cast<int>(i + 1);
    r.val_accuracy = accuracies[i];
    h.epochs.push_back(r);
  }
  return h;
}

}  // namespace

TEST_CASE("sgd updates") {
  OptimizerConfig c;
  c.kind = OptimizerKind::sgd_momentum;
  c.lr = 0.1;
  c.momentum = 0.0;
  std::vector<double> p{1.0, -2.0};
  const std::vector<double> g{0.5, 3.0};
  ParamState s;
  optimizer_step(p, g, s, c, 1);
  CHECK(p[0] == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(-2.3).epsilon(1e-15));

  // Momentum 0.9 over two steps of the same gradient: v1 = g, v2 = 1.9 g.
  c.momentum = 0.9;
  std::vector<double> q{0.0};
  ParamState sm;
  optimizer_step(q, std::vector<double>{1.0}, sm, c, 1);
  optimizer_step(q, std::vector<double>{1.0}, sm, c, 2);
  CHECK(q[0] == doctest::Approx(-0.1 - 0.19).epsilon(1e-15));

  // Weight decay adds wd * p to the gradient.
  c.momentum = 0.0;
  c.weight_decay = 0.5;
  std::vector<double> w{2.0};
  ParamState sw;
  optimizer_step(w, std::vector<double>{0.0}, sw, c, 1);
  CHECK(w[0] == doctest::Approx(2.0 - 0.1 * 1.0).epsilon(1e-15));
}

TEST_CASE("adam first step by hand") {
  OptimizerConfig c;  // adam, lr 1e-3, betas 0.9 / 0.999, eps 1e-8
  std::vector<double> p{0.0, 1.0};
  const std::vector<double> g{1.0, -0.25};
  ParamState s;
  optimizer_step(p, g, s, c, 1);
  // m = (1 - b1) g, v = (1 - b2) g^2; bias correction divides by (1 - b1), (1 - b2).
  const double m0 = 0.1 * 1.0 / 0.1, v0 = 0.001 * 1.0 / 0.001;
  CHECK(p[0] == doctest::Approx(-1e-3 * m0 / (std::sqrt(v0) + 1e-8)).epsilon(1e-12));
  CHECK(p[0] == doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(1.0 + 1e-3 * 0.25 / (0.25 + 1e-8)).epsilon(1e-12));

  // Second step with the same gradient, evaluated directly.
  optimizer_step(p, g, s, c, 2);
  const double m2 = 0.9 * 0.1 + 0.1, v2 = 0.999 * 0.001 + 0.001;
  const double step2 = 1e-3 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.998001)) + 1e-8);
  CHECK(p[0] == doctest::Approx(-1e-3 / (1.0 + 1e-8) - step2).epsilon(1e-12));
}

TEST_CASE("zero gradients leave parameters unchanged") {
  for (auto kind : {OptimizerKind::sgd_momentum, OptimizerKind::adam}) {
    OptimizerConfig c;
    c.kind = kind;
    std::vector<double> p{0.3, -0.7, 5.0};
    const auto before = p;
    ParamState s;
    for (std::uint64_t t = 1; t <= 5; ++t) optimizer_step(p, std::vector<double>(3, 0.0), s, c, t);
    CHECK(p == before);
  }
}

TEST_CASE("non-finite gradients are rejected") {
  OptimizerConfig c;
  std::vector<double> p{1.0};
  ParamState s;
  CHECK_THROWS_AS(optimizer_step(p, std::vector<double>{std::nan("")}, s, c, 1), DivergenceError);
  CHECK_THROWS_AS(optimizer_step(p, std::vector<double>{INFINITY}, s, c, 1), DivergenceError);
  CHECK_THROWS_AS(optimizer_step(p, std::vector<double>{1.0, 2.0}, s, c, 1), ShapeError);
  CHECK(p[0] == 1.0);
}

TEST_CASE("config validation and parsing") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.alpha = -1.0;
  CHECK_THROWS_AS(c.validate(), RangeError);
  c = TrainConfig{};
  c.val_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), RangeError);
  c.val_fraction = 0.0;
  CHECK_THROWS_AS(c.validate(), RangeError);
  c = TrainConfig{};
  c.optimizer.lr = -0.1;
  CHECK_THROWS_AS(c.validate(), RangeError);
  CHECK(parse_objective("lpmii-mass") == Objective::lpmii_mass);
  CHECK(to_string(Objective::erm) == "erm");
  CHECK_THROWS_AS(parse_objective("dro"), RangeError);
  CHECK(parse_optimizer("sgd-momentum") == OptimizerKind::sgd_momentum);
  CHECK_FALSE(TrainConfig{}.model_config().privileged == std::nullopt);
  c.objective = Objective::erm;
  CHECK(c.model_config().privileged == std::nullopt);
  CHECK_FALSE(c.model_config().stochastic);
}

TEST_CASE("select_model") {
  CHECK(select_epoch(history_of({0.5, 0.6, 0.7})) == 2);
  CHECK(select_epoch(history_of({0.8, 0.8, 0.8})) == 0);
  CHECK(select_epoch(history_of({0.7, 0.9, 0.8})) == 1);
  CHECK(select_epoch(history_of({0.7, 0.9, 0.9})) == 1);
  CHECK_THROWS_AS(select_epoch(TrainHistory{}), Error);
  const std::vector<Checkpoint> cps{{1}, {2}, {3}};
  CHECK(select_model(history_of({0.7, 0.9, 0.8}), cps) == Checkpoint{2});
  CHECK_THROWS_AS(select_model(history_of({0.7, 0.9}), cps), Error);
}

TEST_CASE("validation split: stratified, disjoint, seeded") {
  Fixture f;
  const auto refs = f.refs();
  const auto a = split_domains(refs, 0.25, 1, 3);
  const auto again = split_domains(refs, 0.25, 1, 3);
  CHECK(a.train == again.train);
  CHECK(a.validation == again.validation);
  CHECK_FALSE(a.validation == split_domains(refs, 0.25, 1, 4).validation);
  std::set<data::SampleRef> train(a.train.begin(), a.train.end()), val(a.validation.begin(), a.validation.end());
  CHECK(train.size() == a.train.size());
  for (const auto& r : val) CHECK(train.count(r) == 0);
  CHECK(train.size() + val.size() == 3 * 60);
  CHECK(std::is_sorted(a.train.begin(), a.train.end()));
  CHECK(std::is_sorted(a.validation.begin(), a.validation.end()));
  for (std::size_t d = 0; d < 3; ++d) {
    for (int y = 0; y < 2; ++y) {
      std::size_t total = 0, in_val = 0;
      for (std::size_t i = 0; i < 60; ++i) {
        if (f.domains[d].samples[i].y(1) != y) continue;
        ++total;
        in_val += val.count({d, i});
      }
      CHECK(in_val == static_cast<std::size_t>(std::lround(0.25 * static_cast<double>(total))));
    }
  }
}

TEST_CASE("make_batch picks targets by objective") {
  Fixture f;
  const auto refs = f.refs();
  const std::vector<data::SampleRef> some{{0, 0}, {1, 3}, {2, 7}};
  const auto sev = make_batch(refs, some, small_config(Objective::lpmii_severity));
  CHECK(sev.x.shape() == tensor::Shape{3, 1, 16, 16});
  CHECK(sev.severity.size() == 3);
  CHECK(sev.mass.empty());
  CHECK(sev.severity[1] == f.domains[1].samples[3].labels.severity[0]);
  auto mc = small_config(Objective::lpmii_mass);
  const auto mass = make_batch(refs, some, mc);
  CHECK(mass.mass[2] == static_cast<double>(f.domains[2].samples[7].labels.mass[0]));
  mc.normalize_mass = true;
  CHECK(make_batch(refs, some, mc).mass[2] == doctest::Approx(mass.mass[2] / 256.0));
  const auto erm = make_batch(refs, some, small_config(Objective::erm));
  CHECK(erm.severity.empty());
  CHECK(erm.mass.empty());
  // Inputs are standardized per image.
  double mean = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < 256; ++i) {
    mean += sev.x[i];
    sq += sev.x[i] * sev.x[i];
  }
  CHECK(mean / 256.0 == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
  CHECK(sq / 256.0 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(make_batch(refs, {}, small_config(Objective::erm)), ShapeError);
}

TEST_CASE("resizing to another input size") {
  Fixture f;
  auto c = small_config(Objective::erm);
  c.input_size = 24;
  const std::vector<data::SampleRef> some{{0, 1}};
  const auto b = make_batch(f.refs(), some, c);
  CHECK(b.x.shape() == tensor::Shape{1, 1, 24, 24});
  CHECK_NOTHROW(train::train(c, f.refs()));
}

TEST_CASE("lr 0 leaves parameters unchanged") {
  Fixture f;
  for (auto kind : {OptimizerKind::adam, OptimizerKind::sgd_momentum}) {
    auto c = small_config(Objective::lpmii_severity);
    c.optimizer.kind = kind;
    c.optimizer.lr = 0.0;
    const auto result = train::train(c, f.refs());
    const model::Model init(c.model_config(), derive_seed(c.seed, "init"));
    for (const auto& cp : result.checkpoints) CHECK(cp == model::serialize_checkpoint(init));
  }
}

TEST_CASE("single-batch overfit") {
  Fixture f;
  auto c = small_config(Objective::erm);
  c.optimizer.lr = 1e-2;
  Trainer t(c, f.refs());
  const std::vector<data::SampleRef> batch(t.split().train.begin(), t.split().train.begin() + 32);
  double ce = 1.0;
  for (int i = 0; i < 400 && ce >= 0.01; ++i) ce = t.step(batch).task_ce;
  // Recompute on the final parameters.
  tensor::Graph g(false);
  const auto final_ce = model::lpmii_loss(g, t.model(), make_batch(f.refs(), batch, c), 0.0, {}).task_ce;
  CHECK(final_ce < 0.01);
}

TEST_CASE("training is deterministic") {
  Fixture f;
  for (auto obj : {Objective::erm, Objective::lpmii_severity, Objective::lpmii_mass}) {
    const auto c = small_config(obj);
    const auto a = train::train(c, f.refs());
    const auto b = train::train(c, f.refs());
    REQUIRE(a.history.epochs.size() == 3);
    for (std::size_t e = 0; e < 3; ++e) {
      CHECK(a.history.epochs[e].epoch == static_cast<int>(e + 1));
      CHECK(a.history.epochs[e].train_task_ce == b.history.epochs[e].train_task_ce);
      CHECK(a.history.epochs[e].val_accuracy == b.history.epochs[e].val_accuracy);
    }
    CHECK(a.checkpoints == b.checkpoints);
    CHECK(model::serialize_checkpoint(a.best) == model::serialize_checkpoint(b.best));
    CHECK(a.best_epoch == select_epoch(a.history) + 1);
    CHECK(model::serialize_checkpoint(a.best) == a.checkpoints[a.best_epoch - 1]);
  }
}

TEST_CASE("history columns") {
  Fixture f;
  const auto r = train::train(small_config(Objective::lpmii_severity), f.refs());
  for (const auto& e : r.history.epochs) {
    CHECK(e.mi_bound == -e.train_priv_loss);
    CHECK(e.mi_bound <= 0.0);
  }
  CHECK(std::isnan(train::train(small_config(Objective::erm), f.refs()).history.epochs[0].mi_bound));
  const auto dir = lpmii::testing::scratch_dir("history");
  r.history.write_csv(dir / "h.csv");
  std::ifstream in(dir / "h.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "epoch,train_task_ce,train_priv_loss,mi_bound,val_accuracy,wall_seconds");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 3);
}

TEST_CASE("validation samples never contribute gradients") {
  Fixture f;
  const auto c = small_config(Objective::lpmii_severity);
  const auto a = train::train(c, f.refs());
  // Scramble every validation image; the training trajectory must not move.
  Fixture g;
  for (const auto& ref : a.split.validation) {
    for (auto& px : g.domains[ref.domain].samples[ref.index].image.pixels) px = static_cast<std::uint8_t>(255 - px);
  }
  const auto b = train::train(c, g.refs());
  for (std::size_t e = 0; e < a.history.epochs.size(); ++e) {
    CHECK(a.history.epochs[e].train_task_ce == b.history.epochs[e].train_task_ce);
    CHECK(a.history.epochs[e].train_priv_loss == b.history.epochs[e].train_priv_loss);
    CHECK(a.checkpoints[e] == b.checkpoints[e]);
  }
}

TEST_CASE("ERM equivalence: erm vs severity with alpha 0 and zero noise") {
  Fixture f;
  auto erm_cfg = small_config(Objective::erm);
  auto sev_cfg = small_config(Objective::lpmii_severity);
  sev_cfg.alpha = 0.0;
  sev_cfg.zero_noise = true;
  Trainer erm(erm_cfg, f.refs());
  Trainer sev(sev_cfg, f.refs());
  CHECK(flat_params(erm.model(), true) == flat_params(sev.model(), true));
  for (int e = 1; e <= 2; ++e) {
    const auto ra = erm.run_epoch(e);
    const auto rb = sev.run_epoch(e);
    CHECK(ra.train_task_ce == rb.train_task_ce);
    CHECK(ra.val_accuracy == rb.val_accuracy);
    CHECK(flat_params(erm.model(), true) == flat_params(sev.model(), true));
  }
}

TEST_CASE("trainer input errors") {
  Fixture f;
  auto c = small_config(Objective::erm);
  CHECK_THROWS_AS(Trainer(c, DomainRefs{}), Error);
  c.fluid_class = 4;
  CHECK_THROWS_AS(Trainer(c, f.refs()), RangeError);
  c = small_config(Objective::erm);
  c.n_sc = 4;
  CHECK_THROWS_AS(Trainer(c, f.refs()), DataError);
}

TEST_CASE("divergence names the epoch and step") {
  Fixture f;
  auto c = small_config(Objective::lpmii_mass);
  c.optimizer.kind = OptimizerKind::sgd_momentum;
  c.optimizer.lr = 1e6;
  std::string msg;
  try {
    train::train(c, f.refs());
  } catch (const DivergenceError& e) {
    msg = e.what();
  }
  CHECK(msg.find("epoch 1 step") != std::string::npos);
}
