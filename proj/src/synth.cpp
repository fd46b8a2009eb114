#include "lpmii/data.hpp"

#include "lpmii/error.hpp"
#include "lpmii/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace lpmii::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Retinal layers below the inner limiting membrane: thickness as a fraction
// of image height and mean reflectivity.
struct Layer {
  double thickness;
  double intensity;
};

constexpr Layer kLayers[] = {
    {0.05, 0.72},   // nerve fibre layer
    {0.09, 0.45},   // ganglion cell / inner plexiform
    {0.05, 0.28},   // inner nuclear
    {0.04, 0.50},   // outer plexiform
    {0.11, 0.22},   // outer nuclear
    {0.025, 0.78},  // photoreceptor junction
    {0.035, 0.92},  // retinal pigment epithelium
};
constexpr double kVitreous = 0.04;
constexpr double kChoroid = 0.42;

struct Anatomy {
  double top, amplitude, frequency, phase, tilt, scale;
  double width;

  double boundary(double col) const {
    return top + amplitude * std::sin(kTwoPi * frequency * col / width + phase) + tilt * (col - width / 2.0);
  }
  // Depth (rows below the boundary) where layer `index` begins.
  double layer_start(std::size_t index) const {
    double depth = 0.0;
    for (std::size_t i = 0; i < index; ++i) depth += kLayers[i].thickness * scale;
    return depth;
  }
};

double reflectivity(const Anatomy& a, double depth, double height) {
  if (depth < 0.0) return kVitreous;
  double start = 0.0;
  for (const auto& layer : kLayers) {
    const double end = start + layer.thickness * a.scale * height;
    if (depth < end) return layer.intensity;
    start = end;
  }
  // Choroid fades with depth.
  return kChoroid * std::exp(-(depth - start) / (0.25 * height));
}

struct Ellipse {
  double cx, cy, rx, ry;
};

void draw_ellipse(const Ellipse& e, int label, privileged::SegMask& mask, std::vector<double>& image,
                  double fluid_level) {
  const auto h = static_cast<long>(mask.height());
  const auto w = static_cast<long>(mask.width());
  const long r0 = std::max(0L, static_cast<long>(std::floor(e.cy - e.ry)));
  const long r1 = std::min(h - 1, static_cast<long>(std::ceil(e.cy + e.ry)));
  const long c0 = std::max(0L, static_cast<long>(std::floor(e.cx - e.rx)));
  const long c1 = std::min(w - 1, static_cast<long>(std::ceil(e.cx + e.rx)));
  const auto paint = [&](long r, long c) {
    mask.set(static_cast<std::size_t>(r), static_cast<std::size_t>(c), static_cast<std::uint8_t>(label));
    image[static_cast<std::size_t>(r * w + c)] = fluid_level;
  };
  for (long r = r0; r <= r1; ++r) {
    for (long c = c0; c <= c1; ++c) {
      const double dx = (static_cast<double>(c) - e.cx) / e.rx;
      const double dy = (static_cast<double>(r) - e.cy) / e.ry;
      if (dx * dx + dy * dy <= 1.0) paint(r, c);
    }
  }
  // The centre pixel always belongs to the blob, so a drawn blob is never empty.
  paint(std::clamp(std::lround(e.cy), 0L, h - 1), std::clamp(std::lround(e.cx), 0L, w - 1));
}

Sample generate_sample(const SynthSpec& spec, std::size_t domain, std::size_t index, Rng& rng) {
  const std::size_t H = spec.height, W = spec.width;
  const auto Hd = static_cast<double>(H), Wd = static_cast<double>(W);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  // Shared anatomy.
  Anatomy anatomy{uniform(0.18, 0.28) * Hd, uniform(0.0, 0.05) * Hd, uniform(0.5, 1.5),
                  uniform(0.0, kTwoPi),     uniform(-0.08, 0.08),    uniform(0.85, 1.15), Wd};
  std::vector<double> image(H * W);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      image[r * W + c] = reflectivity(anatomy, static_cast<double>(r) - anatomy.boundary(static_cast<double>(c)), Hd);

  // Fluid blobs. Deeper classes are drawn first so class 1 is never overwritten.
  privileged::SegMask mask(H, W, spec.fluid_classes);
  const auto& blobs = spec.blobs;
  for (int l = spec.fluid_classes; l >= 1; --l) {
    if (unit(rng) >= spec.presence_rate) continue;
    std::uniform_int_distribution<int> count_dist(1, blobs.max_count);
    const int count = count_dist(rng);
    for (int b = 0; b < count; ++b) {
      Ellipse e{};
      e.rx = uniform(blobs.min_radius, blobs.max_radius);
      e.ry = std::max(1.0, e.rx * uniform(blobs.min_aspect, blobs.max_aspect));
      e.cx = uniform(0.0, Wd - 1.0);
      double depth = 0.0;
      switch (l) {
        case 1: depth = uniform(anatomy.layer_start(2), anatomy.layer_start(5)) * Hd; break;
        case 2: depth = anatomy.layer_start(5) * Hd - 0.5 * e.ry; break;
        case 3: depth = anatomy.layer_start(6) * Hd + 0.5 * e.ry; break;
        default: depth = uniform(0.0, anatomy.layer_start(7)) * Hd; break;
      }
      e.cy = std::clamp(anatomy.boundary(e.cx) + depth, 0.0, Hd - 1.0);
      draw_ellipse(e, l, mask, image, blobs.fluid_levels[static_cast<std::size_t>(l - 1)]);
    }
  }

  Sample s;
  char id[64];
  std::snprintf(id, sizeof id, "%s-%05zu", spec.domains[domain].name.c_str(), index);
  s.id = id;
  s.labels = derive_class_labels(mask, spec.n_sc);

  const DomainStyle& style = spec.domains[domain];

  // Multiplicative speckle with the vendor's grain size.
  const std::size_t grain = std::max<std::size_t>(1, style.speckle_grain);
  const std::size_t gh = (H + grain - 1) / grain, gw = (W + grain - 1) / grain;
  std::vector<double> field(gh * gw);
  for (double& v : field) v = normal(rng);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      double& v = image[r * W + c];
      v = std::max(0.0, v * (1.0 + style.speckle_sigma * field[(r / grain) * gw + c / grain]));
    }

  // Contrast curve, offset and banding.
  const double band_phase = uniform(0.0, kTwoPi);
  for (std::size_t r = 0; r < H; ++r) {
    const double band = style.banding_amplitude *
                        std::sin(kTwoPi * static_cast<double>(r) / style.banding_period + band_phase);
    for (std::size_t c = 0; c < W; ++c) {
      double& v = image[r * W + c];
      v = std::pow(std::clamp(v, 0.0, 1.0), style.gamma) + style.brightness + band;
    }
  }

  // Label-correlated cues.
  if (spec.spurious.enabled) {
    const int target = s.labels.presence[static_cast<std::size_t>(spec.spurious.cue_class - 1)];
    for (std::size_t j = 0; j < spec.domains.size(); ++j) {
      const bool agree = unit(rng) < spec.spurious.strength;
      const bool coin = unit(rng) < 0.5;
      const double phase = uniform(0.0, kTwoPi);
      const bool on = j == domain ? (agree ? target == 1 : target == 0) : coin;
      if (!on) continue;
      const double period = spec.spurious.periods[j];
      for (std::size_t r = 0; r < H; ++r) {
        const double delta = spec.spurious.amplitude * std::sin(kTwoPi * static_cast<double>(r) / period + phase);
        for (std::size_t c = 0; c < W; ++c) image[r * W + c] += delta;
      }
    }
  }

  s.image.height = H;
  s.image.width = W;
  s.image.pixels.resize(H * W);
  for (std::size_t i = 0; i < H * W; ++i) {
    s.image.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
  }
  s.mask = std::move(mask);
  return s;
}

}  // namespace

std::vector<DomainStyle> SynthSpec::default_domains() {
  return {
      {"cirrus", 0.30, 1, 1.00, 0.00, 0.02, 11.0},
      {"spectralis", 0.15, 2, 0.75, 0.06, 0.00, 11.0},
      {"topcon", 0.30, 2, 1.20, -0.03, 0.04, 17.0},
  };
}

void SynthSpec::validate() const {
  if (domains.size() < 2) throw RangeError("synth spec: need at least 2 domains, got " + std::to_string(domains.size()));
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].name.empty()) throw RangeError("synth spec: domain " + std::to_string(i) + " has no name");
    for (std::size_t j = 0; j < i; ++j)
      if (domains[j].name == domains[i].name) throw RangeError("synth spec: duplicate domain " + domains[i].name);
    if (domains[i].banding_period <= 0.0) throw RangeError("synth spec: banding period must be positive");
    if (domains[i].gamma <= 0.0) throw RangeError("synth spec: gamma must be positive");
  }
  if (slices_per_domain == 0) throw RangeError("synth spec: slices per domain must be >= 1");
  if (height == 0 || width == 0) throw RangeError("synth spec: image size must be positive");
  if (!(presence_rate >= 0.0 && presence_rate < 1.0)) {
    // 0 is accepted for the degenerate all-negative dataset.
    throw RangeError("synth spec: presence rate must lie in [0, 1)");
  }
  if (fluid_classes < 1 || fluid_classes > 3) throw RangeError("synth spec: fluid classes must be in [1, 3]");
  if (n_sc < 1) throw RangeError("synth spec: N_sc must be >= 1");
  if (blobs.max_count < 1 || blobs.min_radius <= 0.0 || blobs.max_radius < blobs.min_radius ||
      blobs.min_aspect <= 0.0 || blobs.max_aspect < blobs.min_aspect) {
    throw RangeError("synth spec: invalid blob parameters");
  }
  if (blobs.fluid_levels.size() < static_cast<std::size_t>(fluid_classes)) {
    throw RangeError("synth spec: need one fluid level per fluid class");
  }
  if (spurious.enabled) {
    if (spurious.periods.size() < domains.size()) {
      throw RangeError("synth spec: need one spurious cue period per domain");
    }
    if (spurious.cue_class < 1 || spurious.cue_class > fluid_classes) {
      throw RangeError("synth spec: spurious cue class out of range");
    }
    if (spurious.strength < 0.0 || spurious.strength > 1.0) {
      throw RangeError("synth spec: spurious strength must be in [0, 1]");
    }
  }
}

DomainDataset generate_domain(const SynthSpec& spec, std::size_t k) {
  spec.validate();
  if (k >= spec.domains.size()) throw RangeError("generate_domain: domain index out of range");
  Rng rng(derive_seed(spec.seed, "domain", k));
  DomainDataset ds;
  ds.domain_id = spec.domains[k].name;
  ds.fluid_classes = spec.fluid_classes;
  ds.n_sc = spec.n_sc;
  ds.samples.reserve(spec.slices_per_domain);
  for (std::size_t i = 0; i < spec.slices_per_domain; ++i) {
    Sample s = generate_sample(spec, k, i, rng);
    ds.manifest.push_back({s.id, "images/" + s.id + ".pgm", "masks/" + s.id + ".pgm", spec.height,
                           spec.width, s.labels});
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::vector<DomainDataset> generate_domains(const SynthSpec& spec) {
  spec.validate();
  std::vector<DomainDataset> out;
  for (std::size_t k = 0; k < spec.domains.size(); ++k) out.push_back(generate_domain(spec, k));
  return out;
}

std::vector<fs::path> generate_synthetic(const SynthSpec& spec, const fs::path& root) {
  spec.validate();
  std::vector<fs::path> dirs;
  for (std::size_t k = 0; k < spec.domains.size(); ++k) {
    const auto dir = root / spec.domains[k].name;
    write_dataset(generate_domain(spec, k), dir);
    dirs.push_back(dir);
  }
  return dirs;
}

}  // namespace lpmii::data
