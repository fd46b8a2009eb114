#include "lpmii/data.hpp"

#include "lpmii/error.hpp"
#include "lpmii/random.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace lpmii::data {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

template <typename T>
T parse_number(const std::string& text, const std::string& context) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, value);
  if (res.ec != std::errc{} || res.ptr != end) {
    throw DataError(context + ": cannot parse '" + text + "' as a number");
  }
  return value;
}

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(std::istream& in, const fs::path& path) {
  std::string token;
  char c = 0;
  while (in.get(c)) {
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!token.empty()) return token;
      continue;
    }
    token.push_back(c);
  }
  if (token.empty()) throw DataError(path.string() + ": truncated PGM header");
  return token;
}

}  // namespace

// ---------------------------------------------------------------------------
// PGM

GrayImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing image file " + path.string());
  if (pgm_token(in, path) != "P5") throw DataError(path.string() + ": not a binary PGM (P5)");
  const auto context = path.string();
  GrayImage img;
  img.width = parse_number<std::size_t>(pgm_token(in, path), context);
  img.height = parse_number<std::size_t>(pgm_token(in, path), context);
  const auto maxval = parse_number<int>(pgm_token(in, path), context);
  if (img.width == 0 || img.height == 0) throw DataError(context + ": empty image");
  if (maxval < 1 || maxval > 255) throw DataError(context + ": only 8-bit PGM is supported");
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw DataError(context + ": truncated pixel data");
  }
  return img;
}

void write_pgm(const fs::path& path, const GrayImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Labels and manifest

ClassLabels derive_class_labels(const privileged::SegMask& mask, int n_sc) {
  ClassLabels labels;
  for (int l = 1; l <= mask.max_label(); ++l) {
    const auto mass = privileged::fluid_mass(mask, l);
    labels.mass.push_back(mass);
    labels.severity.push_back(privileged::severity_from_mass(mass, mask.area(), n_sc));
    labels.presence.push_back(mass > 0 ? 1 : 0);
  }
  return labels;
}

privileged::PrivilegedLabel Sample::q(int fluid_class, privileged::PrivilegedKind kind) const {
  const auto i = static_cast<std::size_t>(fluid_class - 1);
  return {kind, labels.mass.at(i), labels.severity.at(i)};
}

std::vector<ManifestEntry> read_manifest(const fs::path& csv_path, int fluid_classes) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("missing manifest " + csv_path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(csv_path.string() + ": empty manifest");
  const auto header = split_csv_line(line);
  const std::size_t expected = 5 + 3 * static_cast<std::size_t>(fluid_classes);
  if (header.size() != expected || header[0] != "id") {
    throw DataError(csv_path.string() + ": expected " + std::to_string(expected) + " columns starting with id");
  }
  std::vector<ManifestEntry> entries;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string context = csv_path.string() + ":" + std::to_string(line_no);
    if (f.size() != expected) throw DataError(context + ": wrong column count");
    ManifestEntry e;
    e.id = f[0];
    e.image_path = f[1];
    e.mask_path = f[2];
    e.height = parse_number<std::size_t>(f[3], context);
    e.width = parse_number<std::size_t>(f[4], context);
    for (int l = 0; l < fluid_classes; ++l) {
      const auto base = 5 + 3 * static_cast<std::size_t>(l);
      e.labels.mass.push_back(parse_number<std::uint64_t>(f[base], context));
      e.labels.severity.push_back(parse_number<int>(f[base + 1], context));
      e.labels.presence.push_back(parse_number<int>(f[base + 2], context));
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const fs::path& csv_path, std::span<const ManifestEntry> entries, int fluid_classes) {
  std::ofstream out(csv_path);
  if (!out) throw DataError("cannot write " + csv_path.string());
  out << "id,image_path,mask_path,H,W";
  for (int l = 1; l <= fluid_classes; ++l) out << ",mass_" << l << ",severity_" << l << ",presence_" << l;
  out << '\n';
  for (const auto& e : entries) {
    out << e.id << ',' << e.image_path << ',' << e.mask_path << ',' << e.height << ',' << e.width;
    for (int l = 0; l < fluid_classes; ++l) {
      const auto i = static_cast<std::size_t>(l);
      out << ',' << e.labels.mass[i] << ',' << e.labels.severity[i] << ',' << e.labels.presence[i];
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed for " + csv_path.string());
}

void write_dataset(const DomainDataset& dataset, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  for (const auto& s : dataset.samples) {
    write_pgm(dir / "images" / (s.id + ".pgm"), s.image);
    const auto labels = s.mask.labels();
    write_pgm(dir / "masks" / (s.id + ".pgm"),
              GrayImage{s.mask.height(), s.mask.width(), {labels.begin(), labels.end()}});
  }
  write_manifest(dir / "manifest.csv", dataset.manifest, dataset.fluid_classes);
}

DomainDataset load_dataset(const fs::path& dir, int n_sc, int fluid_classes) {
  if (!fs::exists(dir / "manifest.csv")) throw DataError("missing manifest in " + dir.string());
  DomainDataset ds;
  ds.domain_id = dir.filename().string();
  if (ds.domain_id.empty()) ds.domain_id = dir.parent_path().filename().string();
  ds.fluid_classes = fluid_classes;
  ds.n_sc = n_sc;
  ds.manifest = read_manifest(dir / "manifest.csv", fluid_classes);

  std::set<std::string> seen;
  std::size_t height = 0, width = 0;
  for (const auto& e : ds.manifest) {
    const std::string where = ds.domain_id + "/" + e.id;
    if (!seen.insert(e.id).second) throw DataError(where + ": duplicate sample id");
    Sample s;
    s.id = e.id;
    s.image = read_pgm(dir / e.image_path);
    const auto mask_img = read_pgm(dir / e.mask_path);
    if (s.image.height != e.height || s.image.width != e.width || mask_img.height != e.height ||
        mask_img.width != e.width) {
      throw DataError(where + ": image or mask size disagrees with manifest H, W");
    }
    if (height == 0) {
      height = e.height;
      width = e.width;
    } else if (height != e.height || width != e.width) {
      throw DataError(where + ": sample size differs from the rest of the domain");
    }
    try {
      s.mask = privileged::SegMask(e.height, e.width, mask_img.pixels, fluid_classes);
    } catch (const RangeError& err) {
      throw DataError(where + ": " + err.what());
    }
    s.labels = derive_class_labels(s.mask, n_sc);
    for (int l = 0; l < fluid_classes; ++l) {
      const auto i = static_cast<std::size_t>(l);
      const auto field = [&](const char* name) {
        return DataError(where + ": label inconsistency, manifest " + name + "_" + std::to_string(l + 1) +
                         " disagrees with the mask");
      };
      if (s.labels.mass[i] != e.labels.mass[i]) throw field("mass");
      if (s.labels.severity[i] != e.labels.severity[i]) throw field("severity");
      if (s.labels.presence[i] != e.labels.presence[i]) throw field("presence");
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::vector<std::string> list_domains(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("data root " + root.string() + " is not a directory");
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.csv")) {
      names.push_back(entry.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  return names;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<SampleRef> all_refs(std::span<const DomainDataset> datasets) {
  std::vector<SampleRef> refs;
  for (std::size_t d = 0; d < datasets.size(); ++d)
    for (std::size_t i = 0; i < datasets[d].samples.size(); ++i) refs.push_back({d, i});
  return refs;
}

BatchPlan make_batches(std::vector<SampleRef> refs, std::size_t batch_size, std::uint64_t seed, bool shuffle) {
  if (batch_size == 0) throw RangeError("make_batches: batch size must be >= 1");
  if (shuffle) {
    Rng rng(derive_seed(seed, "batches"));
    std::shuffle(refs.begin(), refs.end(), rng);
  }
  BatchPlan plan;
  for (std::size_t start = 0; start < refs.size(); start += batch_size) {
    const auto stop = std::min(refs.size(), start + batch_size);
    plan.emplace_back(refs.begin() + static_cast<std::ptrdiff_t>(start), refs.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return plan;
}

BatchPlan make_batches(std::span<const DomainDataset> datasets, std::size_t batch_size, std::uint64_t seed,
                       bool shuffle) {
  return make_batches(all_refs(datasets), batch_size, seed, shuffle);
}

}  // namespace lpmii::data
