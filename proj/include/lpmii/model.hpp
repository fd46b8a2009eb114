#pragma once
//
// Stochastic-encoder classifier with an auxiliary privileged-information head.
//
//   trunk:      conv blocks (relu, strided) + global mean pool     -> features
//   mu_head:    linear features -> latent                          -> mu
//   sigma_head: linear features -> latent, softplus                -> sigma
//   latent:     z = mu + eps * sigma,  eps ~ N(0, I)
//   classifier: MLP latent -> 2 presence logits
//   priv_head:  MLP latent -> N_sc + 1 severity logits | 1 mass value
//
// The privileged head only exists at training time; prediction uses the
// classifier on mu. A model with stochastic == false and no privileged head
// is the plain ERM network.
//

#include "lpmii/privileged.hpp"
#include "lpmii/random.hpp"
#include "lpmii/tensor.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace lpmii::model {

using privileged::PrivilegedKind;
using tensor::Graph;
using tensor::Tensor;

struct ModelConfig {
  std::size_t input_size = 64;
  std::vector<std::size_t> channels{8, 16, 32};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t latent_dim = 32;
  std::size_t hidden = 32;
  bool stochastic = true;
  std::optional<PrivilegedKind> privileged = PrivilegedKind::severity;
  int n_sc = privileged::kDefaultSeverityScale;
  double sigma_bias_init = 0.0;

  std::size_t privileged_outputs() const;
  /// Canonical JSON text; also the input of digest().
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  std::uint64_t digest() const;
  void validate() const;
};

struct LinearLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

struct ConvLayer {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
};

struct Mlp {
  LinearLayer hidden;
  LinearLayer output;
};

struct ModelParams {
  std::vector<ConvLayer> trunk;
  LinearLayer mu_head;
  std::optional<LinearLayer> sigma_head;
  Mlp classifier;
  std::optional<Mlp> priv_head;
};

struct LatentSample {
  Tensor mu;
  Tensor sigma;  // undefined for deterministic (ERM) encoders
  Tensor eps;    // undefined when encoding deterministically
  Tensor z;
};

using NamedTensor = std::pair<std::string, Tensor>;

class Model {
 public:
  /// He-normal weights, zero biases; every tensor draws from its own stream
  /// derived from (seed, name), so optional heads never perturb the others.
  explicit Model(ModelConfig config, std::uint64_t seed = 0);
  /// Adopts existing tensors, e.g. from a checkpoint. Shapes are checked.
  Model(ModelConfig config, const std::vector<NamedTensor>& tensors);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  /// Independent deep copy.
  Model clone() const;

  const ModelConfig& config() const { return config_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  /// Stable order: trunk, mu, sigma, classifier, privileged head.
  std::vector<NamedTensor> named_parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

  /// Shared trunk: [n, 1, H, W] -> [n, channels.back()].
  Tensor features(Graph& graph, const Tensor& x) const;
  /// eps == nullptr encodes deterministically (z = mu).
  LatentSample encode(Graph& graph, const Tensor& x, const Tensor* eps = nullptr) const;
  Tensor classify(Graph& graph, const Tensor& z) const;
  Tensor predict_privileged(Graph& graph, const Tensor& z, PrivilegedKind kind) const;

  /// Deterministic presence prediction (argmax of classify(mu)).
  std::vector<int> predict(const Tensor& x) const;

 private:
  ModelConfig config_;
  ModelParams params_;
};

/// Training batch. severity/mass are empty when the label is unavailable.
struct Batch {
  Tensor x;  // [n, 1, H, W], one standardized image per row
  std::vector<int> y;
  std::vector<int> severity;
  std::vector<double> mass;

  std::size_t size() const { return y.size(); }
};

struct LossBreakdown {
  Tensor total;            // scalar on the graph
  double task_ce = 0.0;    // averaged over draws
  double priv_loss = 0.0;  // CE (severity) or MSE (mass); 0 without a head
};

/// One standard-normal [n, latent] draw.
Tensor sample_eps(Rng& rng, std::size_t rows, std::size_t latent_dim);

/// task CE + alpha * privileged loss, both evaluated on z = mu + eps * sigma
/// and averaged over the supplied draws. An empty draw list encodes
/// deterministically.
LossBreakdown lpmii_loss(Graph& graph, const Model& model, const Batch& batch, double alpha,
                         std::span<const Tensor> eps_draws);

/// -mean CE(q, r(z)): the variational lower bound on I(Z;Q) minus H(Q).
/// Requires a severity head. Never positive.
double mi_lower_bound_estimate(const Model& model, const Batch& batch,
                               std::span<const Tensor> eps_draws);

}  // namespace lpmii::model
