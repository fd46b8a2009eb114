#pragma once
// Helpers shared by the unit tests and the acceptance runner.

#include "lpmii/data.hpp"
#include "lpmii/model.hpp"
#include "lpmii/random.hpp"
#include "lpmii/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace lpmii::testing {

using tensor::Graph;
using tensor::Tensor;

inline Tensor random_tensor(Rng& rng, tensor::Shape shape, double scale = 1.0, bool parameter = true) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(tensor::numel(shape));
  for (double& x : v) x = nd(rng);
  return parameter ? Tensor::parameter(std::move(shape), std::move(v)) : Tensor(std::move(shape), std::move(v));
}

/// |a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from
/// turning round-off into huge ratios.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares autodiff gradients of `loss` with central differences of step h
/// for every element of every leaf.
inline GradCheck gradcheck(std::vector<Tensor> leaves, const std::function<Tensor(Graph&)>& loss,
                           double h = 1e-5) {
  for (auto& t : leaves) t.zero_grad();
  {
    Graph g;
    g.backward(loss(g));
  }
  GradCheck out;
  for (auto& t : leaves) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto values = t.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      Graph gp(false);
      const double up = loss(gp).item();
      values[i] = saved - h;
      Graph gm(false);
      const double down = loss(gm).item();
      values[i] = saved;
      out.max_rel_error = std::max(out.max_rel_error, relative_error(analytic[i], (up - down) / (2.0 * h)));
      ++out.checked;
    }
  }
  return out;
}

/// Brute-force severity: per-pixel loop, the real-valued formula, ceiling, clamp.
inline int severity_oracle(const privileged::SegMask& mask, int fluid_class, int n_sc) {
  long count = 0;
  for (std::size_t r = 0; r < mask.height(); ++r)
    for (std::size_t c = 0; c < mask.width(); ++c)
      if (mask.at(r, c) == fluid_class) ++count;
  // Exact rational ceiling of 5 * n_sc * count / (H * W).
  const long num = 5L * n_sc * count;
  const long den = static_cast<long>(mask.height() * mask.width());
  const long raw = num / den + (num % den != 0 ? 1 : 0);
  return static_cast<int>(std::min<long>(raw, n_sc));
}

/// Random mask: each pixel is background with probability `background`,
/// otherwise a uniform class in 1..max_label. Sizes are uniform in [1, max_side].
inline privileged::SegMask random_mask(Rng& rng, std::size_t max_side, int max_label = 3) {
  std::uniform_int_distribution<std::size_t> side(1, max_side);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> cls(1, max_label);
  const std::size_t h = side(rng), w = side(rng);
  const double background = unit(rng);
  privileged::SegMask m(h, w, max_label);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      if (unit(rng) >= background) m.set(r, c, static_cast<std::uint8_t>(cls(rng)));
  return m;
}

/// Small model for gradient checks: 8x8 input, two conv blocks.
inline model::ModelConfig tiny_model_config(std::optional<privileged::PrivilegedKind> head) {
  model::ModelConfig cfg;
  cfg.input_size = 8;
  cfg.channels = {3, 4};
  cfg.latent_dim = 4;
  cfg.hidden = 5;
  cfg.privileged = head;
  cfg.stochastic = true;
  return cfg;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("lpmii-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// A few hundred slices of the synthetic generator for fast tests.
inline data::SynthSpec small_spec(std::size_t slices = 60, std::uint64_t seed = 3) {
  data::SynthSpec spec;
  spec.slices_per_domain = slices;
  spec.height = 16;
  spec.width = 16;
  spec.seed = seed;
  spec.blobs.min_radius = 1.0;
  spec.blobs.max_radius = 4.0;
  return spec;
}

}  // namespace lpmii::testing
