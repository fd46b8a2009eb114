#include "lpmii/checkpoint.hpp"

#include "lpmii/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace lpmii::model {

namespace {

class Writer {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    bytes_.insert(bytes_.end(), raw, raw + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void expect_bytes(const void* data, std::size_t n, const char* what) {
    need(n);
    if (std::memcmp(bytes_.data() + pos_, data, n) != 0) throw DataError(std::string("checkpoint: bad ") + what);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError("checkpoint: truncated");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model& model) {
  Writer w;
  w.put_bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.put(kCheckpointVersion);
  w.put(model.config().digest());
  w.put_string(model.config().to_json());
  const auto params = model.named_parameters();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.put_string(name);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (const std::size_t d : t.shape()) w.put(static_cast<std::uint64_t>(d));
    for (const double v : t.data()) w.put(v);
  }
  return w.take();
}

Model deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.expect_bytes(kCheckpointMagic.data(), kCheckpointMagic.size(), "magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto digest = r.get<std::uint64_t>();
  const auto config = ModelConfig::from_json(r.get_string());
  if (config.digest() != digest) throw DataError("checkpoint: config digest mismatch");

  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    tensor::Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    std::vector<double> values(tensor::numel(shape));
    for (double& v : values) v = r.get<double>();
    tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes");
  return Model(config, tensors);
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("checkpoint: write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace lpmii::model
