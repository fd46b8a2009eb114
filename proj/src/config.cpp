#include "lpmii/config.hpp"

#include "lpmii/error.hpp"

#include <toml.hpp>

#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <type_traits>

namespace lpmii::config {

namespace {

// Reads typed values out of one table and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const toml::table& table, std::string where) : table_(table), where_(std::move(where)) {}

  template <typename T>
  void get(std::string_view key, T& out) {
    used_.insert(std::string(key));
    const toml::node* node = table_.get(key);
    if (node != nullptr) out = convert<T>(*node, name(key));
  }

  const toml::table* table(std::string_view key) {
    used_.insert(std::string(key));
    const toml::node* node = table_.get(key);
    if (node == nullptr) return nullptr;
    if (!node->is_table()) throw Error(name(key) + ": expected a table");
    return node->as_table();
  }

  const toml::array* array(std::string_view key) {
    used_.insert(std::string(key));
    const toml::node* node = table_.get(key);
    if (node == nullptr) return nullptr;
    if (!node->is_array()) throw Error(name(key) + ": expected an array");
    return node->as_array();
  }

  void finish() const {
    for (const auto& [key, value] : table_) {
      if (!used_.count(std::string(key.str()))) throw Error(name(key.str()) + ": unknown key");
    }
  }

  std::string name(std::string_view key) const { return where_ + (where_.empty() ? "" : ".") + std::string(key); }

  template <typename T>
  static T convert(const toml::node& node, const std::string& what) {
    if constexpr (std::is_same_v<T, bool>) {
      if (auto v = node.value_exact<bool>()) return *v;
      throw Error(what + ": expected a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = node.value_exact<std::string>()) return *v;
      throw Error(what + ": expected a string");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (node.is_integer() || node.is_floating_point()) return static_cast<T>(*node.value<double>());
      throw Error(what + ": expected a number");
    } else if constexpr (std::is_integral_v<T>) {
      const auto v = node.value_exact<std::int64_t>();
      if (!v) throw Error(what + ": expected an integer");
      if (*v < 0 && std::is_unsigned_v<T>) throw Error(what + ": must not be negative");
      if (static_cast<std::uint64_t>(*v) > static_cast<std::uint64_t>(std::numeric_limits<T>::max()) && *v > 0) {
        throw Error(what + ": out of range");
      }
      return static_cast<T>(*v);
    } else {
      using Elem = typename T::value_type;
      const auto* arr = node.as_array();
      if (arr == nullptr) throw Error(what + ": expected an array");
      T out;
      std::size_t i = 0;
      for (const auto& el : *arr) out.push_back(convert<Elem>(el, what + "[" + std::to_string(i++) + "]"));
      return out;
    }
  }

 private:
  const toml::table& table_;
  std::string where_;
  std::set<std::string> used_;
};

toml::table parse_text(const std::string& text, const std::string& source) {
  try {
    return toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << source << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
    throw Error(msg.str());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::int64_t as_toml_int(std::uint64_t v, const char* what) {
  if (v > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) {
    throw Error(std::string(what) + " does not fit a TOML integer");
  }
  return static_cast<std::int64_t>(v);
}

template <typename T>
toml::array to_array(const std::vector<T>& values) {
  toml::array arr;
  for (const auto& v : values) {
    if constexpr (std::is_integral_v<T>) {
      arr.push_back(static_cast<std::int64_t>(v));
    } else {
      arr.push_back(v);
    }
  }
  return arr;
}

std::string render(const toml::table& table) {
  std::ostringstream out;
  out << table << '\n';
  return out.str();
}

void read_train(Fields& f, train::TrainConfig& c) {
  std::string objective = train::to_string(c.objective);
  f.get("objective", objective);
  c.objective = train::parse_objective(objective);
  f.get("alpha", c.alpha);
  f.get("n_sc", c.n_sc);
  f.get("epochs", c.epochs);
  f.get("batch_size", c.batch_size);
  f.get("seed", c.seed);
  f.get("val_fraction", c.val_fraction);
  f.get("fluid_class", c.fluid_class);
  f.get("latent_dim", c.latent_dim);
  f.get("input_size", c.input_size);
  f.get("hidden", c.hidden);
  f.get("channels", c.channels);
  f.get("sigma_bias_init", c.sigma_bias_init);
  f.get("eps_draws", c.eps_draws);
  f.get("zero_noise", c.zero_noise);
  f.get("normalize_mass", c.normalize_mass);
  if (const auto* opt = f.table("optimizer")) {
    Fields o(*opt, f.name("optimizer"));
    std::string kind = train::to_string(c.optimizer.kind);
    o.get("kind", kind);
    c.optimizer.kind = train::parse_optimizer(kind);
    o.get("lr", c.optimizer.lr);
    o.get("momentum", c.optimizer.momentum);
    o.get("beta1", c.optimizer.beta1);
    o.get("beta2", c.optimizer.beta2);
    o.get("eps", c.optimizer.eps);
    o.get("weight_decay", c.optimizer.weight_decay);
    o.finish();
  }
}

toml::table train_table(const train::TrainConfig& c) {
  toml::table t;
  t.insert("objective", train::to_string(c.objective));
  t.insert("alpha", c.alpha);
  t.insert("n_sc", c.n_sc);
  t.insert("epochs", c.epochs);
  t.insert("batch_size", static_cast<std::int64_t>(c.batch_size));
  t.insert("seed", as_toml_int(c.seed, "seed"));
  t.insert("val_fraction", c.val_fraction);
  t.insert("fluid_class", c.fluid_class);
  t.insert("latent_dim", static_cast<std::int64_t>(c.latent_dim));
  t.insert("input_size", static_cast<std::int64_t>(c.input_size));
  t.insert("hidden", static_cast<std::int64_t>(c.hidden));
  t.insert("channels", to_array(c.channels));
  t.insert("sigma_bias_init", c.sigma_bias_init);
  t.insert("eps_draws", c.eps_draws);
  t.insert("zero_noise", c.zero_noise);
  t.insert("normalize_mass", c.normalize_mass);
  toml::table o;
  o.insert("kind", train::to_string(c.optimizer.kind));
  o.insert("lr", c.optimizer.lr);
  o.insert("momentum", c.optimizer.momentum);
  o.insert("beta1", c.optimizer.beta1);
  o.insert("beta2", c.optimizer.beta2);
  o.insert("eps", c.optimizer.eps);
  o.insert("weight_decay", c.optimizer.weight_decay);
  t.insert("optimizer", std::move(o));
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Generator spec

data::SynthSpec parse_synth_spec(const std::string& toml_text, const std::string& source) {
  const auto root = parse_text(toml_text, source);
  data::SynthSpec s;
  Fields f(root, "");
  f.get("slices_per_domain", s.slices_per_domain);
  f.get("height", s.height);
  f.get("width", s.width);
  f.get("presence_rate", s.presence_rate);
  f.get("fluid_classes", s.fluid_classes);
  f.get("n_sc", s.n_sc);
  f.get("seed", s.seed);
  if (const auto* b = f.table("blobs")) {
    Fields bf(*b, "blobs");
    bf.get("max_count", s.blobs.max_count);
    bf.get("min_radius", s.blobs.min_radius);
    bf.get("max_radius", s.blobs.max_radius);
    bf.get("min_aspect", s.blobs.min_aspect);
    bf.get("max_aspect", s.blobs.max_aspect);
    bf.get("fluid_levels", s.blobs.fluid_levels);
    bf.finish();
  }
  if (const auto* sp = f.table("spurious")) {
    Fields sf(*sp, "spurious");
    sf.get("enabled", s.spurious.enabled);
    sf.get("strength", s.spurious.strength);
    sf.get("amplitude", s.spurious.amplitude);
    sf.get("cue_class", s.spurious.cue_class);
    sf.get("periods", s.spurious.periods);
    sf.finish();
  }
  if (const auto* domains = f.array("domains")) {
    s.domains.clear();
    std::size_t i = 0;
    for (const auto& node : *domains) {
      const std::string where = "domains[" + std::to_string(i++) + "]";
      if (!node.is_table()) throw Error(where + ": expected a table");
      Fields df(*node.as_table(), where);
      data::DomainStyle d;
      df.get("name", d.name);
      df.get("speckle_sigma", d.speckle_sigma);
      df.get("speckle_grain", d.speckle_grain);
      df.get("gamma", d.gamma);
      df.get("brightness", d.brightness);
      df.get("banding_amplitude", d.banding_amplitude);
      df.get("banding_period", d.banding_period);
      df.finish();
      if (d.name.empty()) throw Error(where + ": name is required");
      s.domains.push_back(std::move(d));
    }
  }
  f.finish();
  s.validate();
  return s;
}

data::SynthSpec load_synth_spec(const std::filesystem::path& path) {
  return parse_synth_spec(read_file(path), path.string());
}

std::string to_toml(const data::SynthSpec& s) {
  toml::table t;
  t.insert("slices_per_domain", static_cast<std::int64_t>(s.slices_per_domain));
  t.insert("height", static_cast<std::int64_t>(s.height));
  t.insert("width", static_cast<std::int64_t>(s.width));
  t.insert("presence_rate", s.presence_rate);
  t.insert("fluid_classes", s.fluid_classes);
  t.insert("n_sc", s.n_sc);
  t.insert("seed", as_toml_int(s.seed, "seed"));
  toml::table b;
  b.insert("max_count", s.blobs.max_count);
  b.insert("min_radius", s.blobs.min_radius);
  b.insert("max_radius", s.blobs.max_radius);
  b.insert("min_aspect", s.blobs.min_aspect);
  b.insert("max_aspect", s.blobs.max_aspect);
  b.insert("fluid_levels", to_array(s.blobs.fluid_levels));
  t.insert("blobs", std::move(b));
  toml::table sp;
  sp.insert("enabled", s.spurious.enabled);
  sp.insert("strength", s.spurious.strength);
  sp.insert("amplitude", s.spurious.amplitude);
  sp.insert("cue_class", s.spurious.cue_class);
  sp.insert("periods", to_array(s.spurious.periods));
  t.insert("spurious", std::move(sp));
  toml::array domains;
  for (const auto& d : s.domains) {
    toml::table dt;
    dt.insert("name", d.name);
    dt.insert("speckle_sigma", d.speckle_sigma);
    dt.insert("speckle_grain", static_cast<std::int64_t>(d.speckle_grain));
    dt.insert("gamma", d.gamma);
    dt.insert("brightness", d.brightness);
    dt.insert("banding_amplitude", d.banding_amplitude);
    dt.insert("banding_period", d.banding_period);
    domains.push_back(std::move(dt));
  }
  t.insert("domains", std::move(domains));
  return render(t);
}

// ---------------------------------------------------------------------------
// Training and LODO

train::TrainConfig parse_train_config(const std::string& toml_text, const std::string& source) {
  const auto root = parse_text(toml_text, source);
  train::TrainConfig c;
  Fields f(root, "");
  read_train(f, c);
  f.finish();
  c.validate();
  return c;
}

train::TrainConfig load_train_config(const std::filesystem::path& path) {
  return parse_train_config(read_file(path), path.string());
}

std::string to_toml(const train::TrainConfig& config) { return render(train_table(config)); }

harness::LodoConfig parse_lodo_config(const std::string& toml_text, const std::string& source) {
  const auto root = parse_text(toml_text, source);
  harness::LodoConfig c;
  Fields f(root, "");
  read_train(f, c.base);
  c.master_seed = c.base.seed;
  if (const auto* l = f.table("lodo")) {
    Fields lf(*l, "lodo");
    std::vector<std::string> methods;
    lf.get("methods", methods);
    lf.get("seeds", c.seeds);
    lf.get("fluid_classes", c.fluid_classes);
    lf.get("jobs", c.jobs);
    lf.finish();
    for (const auto& m : methods) c.methods.push_back(harness::parse_method(m, c.base.alpha));
  }
  f.finish();
  c.base.validate();
  return c;
}

harness::LodoConfig load_lodo_config(const std::filesystem::path& path) {
  return parse_lodo_config(read_file(path), path.string());
}

std::string to_toml(const harness::LodoConfig& config) {
  auto base = config.base;
  base.seed = config.master_seed;
  auto t = train_table(base);
  toml::table l;
  toml::array methods;
  for (const auto& m : config.methods) methods.push_back(m.name);
  l.insert("methods", std::move(methods));
  l.insert("seeds", static_cast<std::int64_t>(config.seeds));
  l.insert("fluid_classes", to_array(config.fluid_classes));
  l.insert("jobs", static_cast<std::int64_t>(config.jobs));
  t.insert("lodo", std::move(l));
  return render(t);
}

}  // namespace lpmii::config
