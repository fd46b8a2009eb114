#pragma once
//
// Privileged labels derived from segmentation masks: per-class fluid mass
// (pixel count), a resolution-normalized severity score on 0..N_sc, and the
// binary presence label that the classifier is trained to predict.
//

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace lpmii::privileged {

/// Number of fluid classes in the Retouch-style masks (IRF, SRF, PED).
inline constexpr int kDefaultFluidClasses = 3;
/// Default number of severity categories.
inline constexpr int kDefaultSeverityScale = 5;

/// Per-pixel class map: 0 is background, 1..max_label index fluid types.
class SegMask {
 public:
  SegMask() = default;
  SegMask(std::size_t height, std::size_t width, int max_label = kDefaultFluidClasses);
  SegMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> labels,
          int max_label = kDefaultFluidClasses);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t area() const { return height_ * width_; }
  int max_label() const { return max_label_; }

  std::uint8_t at(std::size_t row, std::size_t col) const { return labels_[row * width_ + col]; }
  void set(std::size_t row, std::size_t col, std::uint8_t label);
  std::span<const std::uint8_t> labels() const { return labels_; }

  /// Nearest-neighbour upscaling by an integer factor along both axes.
  SegMask upscaled(std::size_t factor) const;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  int max_label_ = kDefaultFluidClasses;
  std::vector<std::uint8_t> labels_;
};

enum class PrivilegedKind { mass, severity };

std::string to_string(PrivilegedKind kind);
PrivilegedKind parse_privileged_kind(const std::string& text);

struct PrivilegedLabel {
  PrivilegedKind kind = PrivilegedKind::severity;
  std::uint64_t mass = 0;
  int severity = 0;
};

/// Number of pixels labelled `fluid_class`.
std::uint64_t fluid_mass(const SegMask& mask, int fluid_class);

/// ceil(5 * n_sc * mass / (H * W)) clamped to n_sc. The factor 5 stretches
/// the observed maximum fluid proportion (about 0.2) to 1.
int severity(const SegMask& mask, int fluid_class, int n_sc = kDefaultSeverityScale);

/// Same score from precomputed counts.
int severity_from_mass(std::uint64_t mass, std::uint64_t area, int n_sc = kDefaultSeverityScale);

/// 1 iff the class occupies at least one pixel.
int presence_label(const SegMask& mask, int fluid_class);

PrivilegedLabel derive_label(const SegMask& mask, int fluid_class, PrivilegedKind kind,
                             int n_sc = kDefaultSeverityScale);

}  // namespace lpmii::privileged
