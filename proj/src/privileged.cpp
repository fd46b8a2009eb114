#include "lpmii/privileged.hpp"

#include "lpmii/error.hpp"

#include <algorithm>

namespace lpmii::privileged {

namespace {

void check_class(const SegMask& mask, int fluid_class, const char* op) {
  if (fluid_class < 1 || fluid_class > mask.max_label()) {
    throw RangeError(std::string(op) + ": fluid class " + std::to_string(fluid_class) +
                     " outside [1, " + std::to_string(mask.max_label()) + "]");
  }
}

void check_scale(int n_sc, const char* op) {
  if (n_sc < 1) throw RangeError(std::string(op) + ": N_sc must be >= 1, got " + std::to_string(n_sc));
}

}  // namespace

SegMask::SegMask(std::size_t height, std::size_t width, int max_label)
    : SegMask(height, width, std::vector<std::uint8_t>(height * width, 0), max_label) {}

SegMask::SegMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> labels,
                 int max_label)
    : height_(height), width_(width), max_label_(max_label), labels_(std::move(labels)) {
  if (height_ == 0 || width_ == 0) throw RangeError("mask: height and width must be >= 1");
  if (max_label_ < 1 || max_label_ > 255) throw RangeError("mask: max label must be in [1, 255]");
  if (labels_.size() != height_ * width_) {
    throw RangeError("mask: " + std::to_string(labels_.size()) + " labels for " +
                     std::to_string(height_) + "x" + std::to_string(width_) + " pixels");
  }
  const auto worst = std::max_element(labels_.begin(), labels_.end());
  if (*worst > max_label_) {
    throw RangeError("mask: pixel label " + std::to_string(*worst) + " exceeds max label " +
                     std::to_string(max_label_));
  }
}

void SegMask::set(std::size_t row, std::size_t col, std::uint8_t label) {
  if (label > max_label_) {
    throw RangeError("mask: label " + std::to_string(label) + " exceeds max label " +
                     std::to_string(max_label_));
  }
  if (row >= height_ || col >= width_) {
    throw RangeError("mask: pixel (" + std::to_string(row) + ", " + std::to_string(col) + ") outside " +
                     std::to_string(height_) + "x" + std::to_string(width_));
  }
  labels_[row * width_ + col] = label;
}

SegMask SegMask::upscaled(std::size_t factor) const {
  if (factor == 0) throw RangeError("mask: upscale factor must be >= 1");
  std::vector<std::uint8_t> big(height_ * factor * width_ * factor);
  const std::size_t big_w = width_ * factor;
  for (std::size_t r = 0; r < height_ * factor; ++r)
    for (std::size_t c = 0; c < big_w; ++c) big[r * big_w + c] = at(r / factor, c / factor);
  return SegMask(height_ * factor, big_w, std::move(big), max_label_);
}

std::string to_string(PrivilegedKind kind) {
  return kind == PrivilegedKind::mass ? "mass" : "severity";
}

PrivilegedKind parse_privileged_kind(const std::string& text) {
  if (text == "mass") return PrivilegedKind::mass;
  if (text == "severity") return PrivilegedKind::severity;
  throw RangeError("unknown privileged kind '" + text + "' (expected mass or severity)");
}

std::uint64_t fluid_mass(const SegMask& mask, int fluid_class) {
  check_class(mask, fluid_class, "fluid_mass");
  const auto target = static_cast<std::uint8_t>(fluid_class);
  const auto labels = mask.labels();
  return static_cast<std::uint64_t>(std::count(labels.begin(), labels.end(), target));
}

int severity_from_mass(std::uint64_t mass, std::uint64_t area, int n_sc) {
  check_scale(n_sc, "severity");
  if (area == 0) throw RangeError("severity: mask area must be positive");
  if (mass > area) throw RangeError("severity: mass exceeds mask area");
  // Exact integer ceiling of 5 * n_sc * mass / area.
  const std::uint64_t numerator = 5ULL * static_cast<std::uint64_t>(n_sc) * mass;
  const std::uint64_t raw = (numerator + area - 1) / area;
  return static_cast<int>(std::min<std::uint64_t>(raw, static_cast<std::uint64_t>(n_sc)));
}

int severity(const SegMask& mask, int fluid_class, int n_sc) {
  check_scale(n_sc, "severity");
  return severity_from_mass(fluid_mass(mask, fluid_class), mask.area(), n_sc);
}

int presence_label(const SegMask& mask, int fluid_class) {
  return fluid_mass(mask, fluid_class) > 0 ? 1 : 0;
}

PrivilegedLabel derive_label(const SegMask& mask, int fluid_class, PrivilegedKind kind, int n_sc) {
  PrivilegedLabel label;
  label.kind = kind;
  label.mass = fluid_mass(mask, fluid_class);
  label.severity = severity_from_mass(label.mass, mask.area(), n_sc);
  return label;
}

}  // namespace lpmii::privileged
