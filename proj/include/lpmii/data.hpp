#pragma once
//
// Dataset layout, loading, batching and the synthetic multi-vendor generator.
//
// On disk, one directory per domain:
//
//   <root>/<domain>/manifest.csv
//   <root>/<domain>/images/<id>.pgm   binary P5, 8-bit grayscale
//   <root>/<domain>/masks/<id>.pgm    binary P5, pixel value = class index
//
// manifest.csv columns: id, image_path, mask_path, H, W, then for every
// fluid class l = 1..L: mass_l, severity_l, presence_l. Paths are relative
// to the domain directory.
//

#include "lpmii/privileged.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace lpmii::data {

namespace fs = std::filesystem;

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};

GrayImage read_pgm(const fs::path& path);
void write_pgm(const fs::path& path, const GrayImage& image);

/// Per-class labels, index l - 1 for fluid class l.
struct ClassLabels {
  std::vector<std::uint64_t> mass;
  std::vector<int> severity;
  std::vector<int> presence;
};

ClassLabels derive_class_labels(const privileged::SegMask& mask, int n_sc);

struct Sample {
  std::string id;
  GrayImage image;  // x = pixel / 255
  privileged::SegMask mask;
  ClassLabels labels;

  double x(std::size_t i) const { return image.pixels[i] / 255.0; }
  int y(int fluid_class) const { return labels.presence.at(static_cast<std::size_t>(fluid_class - 1)); }
  privileged::PrivilegedLabel q(int fluid_class, privileged::PrivilegedKind kind) const;
};

struct ManifestEntry {
  std::string id;
  std::string image_path;
  std::string mask_path;
  std::size_t height = 0;
  std::size_t width = 0;
  ClassLabels labels;
};

struct DomainDataset {
  std::string domain_id;
  int fluid_classes = privileged::kDefaultFluidClasses;
  int n_sc = privileged::kDefaultSeverityScale;
  std::vector<Sample> samples;
  std::vector<ManifestEntry> manifest;
};

std::vector<ManifestEntry> read_manifest(const fs::path& csv_path, int fluid_classes);
void write_manifest(const fs::path& csv_path, std::span<const ManifestEntry> entries, int fluid_classes);

/// Writes the layout above into `dir` (created if needed).
void write_dataset(const DomainDataset& dataset, const fs::path& dir);

/// Loads one domain directory and re-derives every label from the masks;
/// any disagreement with the manifest is a DataError naming the sample.
DomainDataset load_dataset(const fs::path& dir, int n_sc = privileged::kDefaultSeverityScale,
                           int fluid_classes = privileged::kDefaultFluidClasses);

/// Sorted names of the subdirectories of `root` that hold a manifest.csv.
std::vector<std::string> list_domains(const fs::path& root);

// ---------------------------------------------------------------------------
// Batching

struct SampleRef {
  std::size_t domain = 0;
  std::size_t index = 0;

  friend bool operator==(const SampleRef&, const SampleRef&) = default;
  friend auto operator<=>(const SampleRef&, const SampleRef&) = default;
};

using BatchPlan = std::vector<std::vector<SampleRef>>;

/// All samples of all datasets in manifest order (domain-major).
std::vector<SampleRef> all_refs(std::span<const DomainDataset> datasets);

/// Seeded permutation (or manifest order when !shuffle) cut into batches of
/// `batch_size`; the last batch may be short.
BatchPlan make_batches(std::vector<SampleRef> refs, std::size_t batch_size, std::uint64_t seed, bool shuffle);
BatchPlan make_batches(std::span<const DomainDataset> datasets, std::size_t batch_size, std::uint64_t seed,
                       bool shuffle);

// ---------------------------------------------------------------------------
// Synthetic generator

/// Acquisition style of one simulated vendor.
struct DomainStyle {
  std::string name;
  double speckle_sigma = 0.2;      // multiplicative noise strength
  std::size_t speckle_grain = 1;   // noise correlation length in pixels
  double gamma = 1.0;              // contrast curve exponent
  double brightness = 0.0;         // additive offset
  double banding_amplitude = 0.0;  // horizontal banding
  double banding_period = 8.0;     // rows per banding cycle
};

struct BlobSpec {
  int max_count = 3;
  double min_radius = 3.0;
  double max_radius = 12.0;
  double min_aspect = 0.4;  // vertical / horizontal radius
  double max_aspect = 0.8;
  // Intensity of each fluid class before vendor noise; entry l-1 is class l.
  std::vector<double> fluid_levels{0.0, 0.14, 0.3};
};

/// Label-correlated acquisition artefact. Domain k owns cue k: in domain k
/// the cue is switched on iff the sample is positive (with probability
/// `strength`); in every other domain it is a fair coin. A model that leans
/// on the cues of its training domains therefore meets uninformative cues in
/// the held-out domain.
struct SpuriousSpec {
  bool enabled = false;
  double strength = 0.9;
  double amplitude = 0.12;
  int cue_class = 1;  // fluid class whose presence the cues track
  std::vector<double> periods{3.0, 5.0, 8.0};
};

struct SynthSpec {
  std::vector<DomainStyle> domains = default_domains();
  std::size_t slices_per_domain = 2000;
  std::size_t height = 64;
  std::size_t width = 64;
  double presence_rate = 0.5;
  int fluid_classes = privileged::kDefaultFluidClasses;
  int n_sc = privileged::kDefaultSeverityScale;
  BlobSpec blobs;
  SpuriousSpec spurious;
  std::uint64_t seed = 0;

  /// Three vendor styles loosely modelled on Cirrus, Spectralis and Topcon.
  static std::vector<DomainStyle> default_domains();
  void validate() const;
};

/// Generates every domain in memory. Domain k draws from its own stream
/// derived from (seed, k), so the result is a pure function of the SynthSpec.
std::vector<DomainDataset> generate_domains(const SynthSpec& spec);

/// One domain only; identical to generate_domains(spec)[k].
DomainDataset generate_domain(const SynthSpec& spec, std::size_t k);

/// Generates and writes <root>/<domain>/...; returns the domain directories.
std::vector<fs::path> generate_synthetic(const SynthSpec& spec, const fs::path& root);

}  // namespace lpmii::data
