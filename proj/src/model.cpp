#include "lpmii/model.hpp"

#include "lpmii/error.hpp"

#include <json.hpp>

#include <cmath>
#include <map>

namespace lpmii::model {

namespace {

using tensor::Shape;

Tensor he_normal(std::uint64_t seed, const std::string& name, Shape shape,
                 std::size_t fan_in) {
  Rng rng(derive_seed(seed, name));
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> values(tensor::numel(shape));
  for (double& v : values) v = normal(rng);
  return Tensor::parameter(std::move(shape), std::move(values));
}

Tensor constant(Shape shape, double value) {
  return Tensor::parameter(shape, std::vector<double>(tensor::numel(shape), value));
}

LinearLayer make_linear(std::uint64_t seed, const std::string& name,
                        std::size_t in, std::size_t out, double bias = 0.0) {
  return {he_normal(seed, name + ".weight", {out, in}, in), constant({out}, bias)};
}

Mlp make_mlp(std::uint64_t seed, const std::string& name, std::size_t in,
             std::size_t hidden, std::size_t out) {
  return {make_linear(seed, name + ".0", in, hidden),
          make_linear(seed, name + ".1", hidden, out)};
}

Tensor run_mlp(Graph& graph, const Mlp& mlp, const Tensor& input) {
  const Tensor h = graph.relu(graph.linear(input, mlp.hidden.weight, mlp.hidden.bias));
  return graph.linear(h, mlp.output.weight, mlp.output.bias);
}

void append(std::vector<NamedTensor>& out, const std::string& name, const LinearLayer& layer) {
  out.emplace_back(name + ".weight", layer.weight);
  out.emplace_back(name + ".bias", layer.bias);
}

void check_latent(const ModelConfig& cfg, const Tensor& z, const char* op) {
  if (z.rank() != 2 || z.dim(1) != cfg.latent_dim) {
    throw ShapeError(std::string(op) + ": latent must be [n, " + std::to_string(cfg.latent_dim) +
                     "], got " + tensor::to_string(z.shape()));
  }
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig

std::size_t ModelConfig::privileged_outputs() const {
  if (!privileged) return 0;
  return *privileged == PrivilegedKind::severity ? static_cast<std::size_t>(n_sc) + 1 : 1;
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["input_size"] = input_size;
  j["channels"] = channels;
  j["kernel"] = kernel;
  j["stride"] = stride;
  j["latent_dim"] = latent_dim;
  j["hidden"] = hidden;
  j["stochastic"] = stochastic;
  j["privileged"] = privileged ? privileged::to_string(*privileged) : "none";
  j["n_sc"] = n_sc;
  j["sigma_bias_init"] = sigma_bias_init;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig cfg;
  cfg.input_size = j.at("input_size").get<std::size_t>();
  cfg.channels = j.at("channels").get<std::vector<std::size_t>>();
  cfg.kernel = j.at("kernel").get<std::size_t>();
  cfg.stride = j.at("stride").get<std::size_t>();
  cfg.latent_dim = j.at("latent_dim").get<std::size_t>();
  cfg.hidden = j.at("hidden").get<std::size_t>();
  cfg.stochastic = j.at("stochastic").get<bool>();
  const auto priv = j.at("privileged").get<std::string>();
  cfg.privileged = priv == "none" ? std::nullopt
                                  : std::optional<PrivilegedKind>(privileged::parse_privileged_kind(priv));
  cfg.n_sc = j.at("n_sc").get<int>();
  cfg.sigma_bias_init = j.at("sigma_bias_init").get<double>();
  cfg.validate();
  return cfg;
}

std::uint64_t ModelConfig::digest() const { return fnv1a(to_json()); }

void ModelConfig::validate() const {
  if (input_size == 0) throw RangeError("model: input size must be positive");
  if (channels.empty()) throw RangeError("model: trunk needs at least one conv block");
  if (kernel == 0 || stride == 0) throw RangeError("model: kernel and stride must be positive");
  if (latent_dim == 0 || hidden == 0) throw RangeError("model: latent and hidden sizes must be positive");
  if (n_sc < 1) throw RangeError("model: N_sc must be >= 1");
  std::size_t side = input_size;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const std::size_t padded = side + 2 * (kernel / 2);
    if (padded < kernel) throw RangeError("model: input too small for the conv trunk");
    side = (padded - kernel) / stride + 1;
  }
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const std::size_t k = config_.kernel;
  std::size_t in = 1;
  for (std::size_t i = 0; i < config_.channels.size(); ++i) {
    const std::size_t out = config_.channels[i];
    const std::string name = "trunk." + std::to_string(i);
    params_.trunk.push_back({he_normal(seed, name + ".weight", {out, in, k, k}, in * k * k),
                             constant({out}, 0.0)});
    in = out;
  }
  params_.mu_head = make_linear(seed, "mu_head", in, config_.latent_dim);
  if (config_.stochastic) {
    params_.sigma_head =
        make_linear(seed, "sigma_head", in, config_.latent_dim, config_.sigma_bias_init);
  }
  params_.classifier = make_mlp(seed, "classifier", config_.latent_dim, config_.hidden, 2);
  if (config_.privileged) {
    params_.priv_head = make_mlp(seed, "priv_head", config_.latent_dim, config_.hidden,
                                 config_.privileged_outputs());
  }
}

Model::Model(ModelConfig config, const std::vector<NamedTensor>& tensors) : Model(config, 0) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  for (auto& [name, target] : named_parameters()) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("model: missing tensor '" + name + "'");
    if (it->second->shape() != target.shape()) {
      throw ShapeError("model: tensor '" + name + "' has shape " + tensor::to_string(it->second->shape()) +
                       ", expected " + tensor::to_string(target.shape()));
    }
    const auto src = it->second->data();
    std::copy(src.begin(), src.end(), target.data().begin());
    by_name.erase(it);
  }
  if (!by_name.empty()) throw DataError("model: unexpected tensor '" + by_name.begin()->first + "'");
}

Model Model::clone() const { return Model(config_, named_parameters()); }

std::vector<NamedTensor> Model::named_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params_.trunk.size(); ++i) {
    const std::string name = "trunk." + std::to_string(i);
    out.emplace_back(name + ".weight", params_.trunk[i].weight);
    out.emplace_back(name + ".bias", params_.trunk[i].bias);
  }
  append(out, "mu_head", params_.mu_head);
  if (params_.sigma_head) append(out, "sigma_head", *params_.sigma_head);
  append(out, "classifier.0", params_.classifier.hidden);
  append(out, "classifier.1", params_.classifier.output);
  if (params_.priv_head) {
    append(out, "priv_head.0", params_.priv_head->hidden);
    append(out, "priv_head.1", params_.priv_head->output);
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.size();
  return n;
}

void Model::zero_grad() {
  for (auto& [name, t] : named_parameters()) t.zero_grad();
}

Tensor Model::features(Graph& graph, const Tensor& x) const {
  const std::size_t s = config_.input_size;
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != s || x.dim(3) != s) {
    throw ShapeError("encode: expected input [n, 1, " + std::to_string(s) + ", " + std::to_string(s) +
                     "], got " + tensor::to_string(x.shape()));
  }
  const tensor::Conv2dOptions opts{config_.stride, config_.kernel / 2};
  Tensor h = x;
  for (const auto& layer : params_.trunk) h = graph.relu(graph.conv2d(h, layer.weight, layer.bias, opts));
  return graph.global_avg_pool(h);
}

LatentSample Model::encode(Graph& graph, const Tensor& x, const Tensor* eps) const {
  const Tensor f = features(graph, x);
  LatentSample out;
  out.mu = graph.linear(f, params_.mu_head.weight, params_.mu_head.bias);
  if (params_.sigma_head) {
    out.sigma = graph.softplus(graph.linear(f, params_.sigma_head->weight, params_.sigma_head->bias));
  }
  if (eps == nullptr) {
    out.z = out.mu;
    return out;
  }
  if (!params_.sigma_head) throw ShapeError("encode: noise supplied to a deterministic encoder");
  if (eps->shape() != out.mu.shape()) {
    throw ShapeError("encode: noise shape " + tensor::to_string(eps->shape()) + " does not match latent " +
                     tensor::to_string(out.mu.shape()));
  }
  out.eps = *eps;
  out.z = graph.add(out.mu, graph.mul(*eps, out.sigma));
  return out;
}

Tensor Model::classify(Graph& graph, const Tensor& z) const {
  check_latent(config_, z, "classify");
  return run_mlp(graph, params_.classifier, z);
}

Tensor Model::predict_privileged(Graph& graph, const Tensor& z, PrivilegedKind kind) const {
  check_latent(config_, z, "predict_privileged");
  if (!params_.priv_head || config_.privileged != kind) {
    throw ShapeError("predict_privileged: model has no " + privileged::to_string(kind) + " head");
  }
  return run_mlp(graph, *params_.priv_head, z);
}

std::vector<int> Model::predict(const Tensor& x) const {
  Graph graph(false);
  const auto latent = encode(graph, x);
  return tensor::argmax_rows(classify(graph, latent.mu));
}

// ---------------------------------------------------------------------------
// Objectives

Tensor sample_eps(Rng& rng, std::size_t rows, std::size_t latent_dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> values(rows * latent_dim);
  for (double& v : values) v = normal(rng);
  return Tensor({rows, latent_dim}, std::move(values));
}

namespace {

struct DrawTerms {
  Tensor task;
  Tensor priv;  // undefined when no privileged term is evaluated
};

DrawTerms evaluate_draw(Graph& graph, const Model& model, const Batch& batch, const Tensor* eps,
                        bool with_priv) {
  const auto latent = model.encode(graph, batch.x, eps);
  DrawTerms terms;
  terms.task = graph.softmax_cross_entropy(model.classify(graph, latent.z), batch.y);
  if (!with_priv) return terms;
  const auto kind = *model.config().privileged;
  const Tensor out = model.predict_privileged(graph, latent.z, kind);
  if (kind == PrivilegedKind::severity) {
    terms.priv = graph.softmax_cross_entropy(out, batch.severity);
  } else {
    const Tensor target({batch.size(), 1}, batch.mass);
    terms.priv = graph.mse(out, target);
  }
  return terms;
}

void check_batch(const Model& model, const Batch& batch, double alpha, bool with_priv) {
  if (!std::isfinite(alpha) || alpha < 0.0) throw RangeError("lpmii_loss: alpha must be finite and >= 0");
  if (batch.size() == 0) throw ShapeError("lpmii_loss: empty batch");
  if (batch.x.rank() != 4 || batch.x.dim(0) != batch.size()) {
    throw ShapeError("lpmii_loss: images " + tensor::to_string(batch.x.shape()) + " do not match " +
                     std::to_string(batch.size()) + " labels");
  }
  if (!with_priv) return;
  const auto kind = *model.config().privileged;
  const std::size_t have = kind == PrivilegedKind::severity ? batch.severity.size() : batch.mass.size();
  if (have != batch.size()) {
    throw DataError("lpmii_loss: batch is missing " + privileged::to_string(kind) + " labels");
  }
}

}  // namespace

LossBreakdown lpmii_loss(Graph& graph, const Model& model, const Batch& batch, double alpha,
                         std::span<const Tensor> eps_draws) {
  const bool has_head = model.config().privileged.has_value();
  if (alpha > 0.0 && !has_head) throw DataError("lpmii_loss: alpha > 0 but the model has no privileged head");
  const auto kind = model.config().privileged;
  const bool labels_present =
      has_head && (*kind == PrivilegedKind::severity ? batch.severity.size() : batch.mass.size()) == batch.size();
  // With alpha == 0 the head is still evaluated (for logging) when labels exist.
  const bool with_priv = has_head && (alpha > 0.0 || labels_present);
  check_batch(model, batch, alpha, with_priv);

  std::vector<DrawTerms> draws;
  if (eps_draws.empty()) {
    draws.push_back(evaluate_draw(graph, model, batch, nullptr, with_priv));
  } else {
    for (const Tensor& eps : eps_draws) draws.push_back(evaluate_draw(graph, model, batch, &eps, with_priv));
  }

  Tensor task = draws.front().task;
  Tensor priv = draws.front().priv;
  for (std::size_t i = 1; i < draws.size(); ++i) {
    task = graph.add(task, draws[i].task);
    if (with_priv) priv = graph.add(priv, draws[i].priv);
  }
  if (draws.size() > 1) {
    const double inv = 1.0 / static_cast<double>(draws.size());
    task = graph.scale(task, inv);
    if (with_priv) priv = graph.scale(priv, inv);
  }

  LossBreakdown out;
  out.task_ce = task.item();
  out.priv_loss = with_priv ? priv.item() : 0.0;
  out.total = with_priv ? graph.add(task, graph.scale(priv, alpha)) : task;
  return out;
}

double mi_lower_bound_estimate(const Model& model, const Batch& batch, std::span<const Tensor> eps_draws) {
  if (model.config().privileged != PrivilegedKind::severity) {
    throw DataError("mi_lower_bound_estimate: requires a severity head");
  }
  Graph graph(false);
  return -lpmii_loss(graph, model, batch, 0.0, eps_draws).priv_loss;
}

}  // namespace lpmii::model
