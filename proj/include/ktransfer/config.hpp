#pragma once

// Flat `key = value` run configuration shared by every CLI command.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ktransfer/data.hpp"
#include "ktransfer/training.hpp"

namespace ktransfer {

struct RunConfig {
  // data
  std::string dataset = "synth";  // synth | cifar10 | mnist
  std::string data_path;
  std::size_t train_subset = 0;  // 0 = everything
  std::size_t test_subset = 0;
  std::size_t synth_per_class = 200;
  std::size_t synth_test_per_class = 50;
  std::size_t synth_classes = 10;
  std::size_t synth_size = 16;
  double synth_noise = 0.1;
  bool synth_phase_jitter = false;
  double synth_contrast_jitter = 0;
  std::uint64_t synth_seed = 0;

  ResnetSpec teacher{3, 16};
  ResnetSpec student{1, 16};

  // Shared by all stages; para_* override the stage-1 run.
  TrainConfig train;
  std::size_t para_epochs = 10;
  double para_lr = 1e-3;
  std::size_t para_steps = 0;
  std::size_t para_batch_size = 64;

  bool normalize = true;
  std::string out_dir = ".";
  std::string teacher_ckpt;
  std::string paraphraser_ckpt;

  // compare
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<Method> methods{kAllMethods.begin(), kAllMethods.end()};
  std::vector<double> k_sweep;

  RunConfig() {
    train.augment_flip = false;  // flipping a grating maps it onto another class
    train.augment_pad = 2;
  }

  TrainConfig paraphraser_config() const {
    TrainConfig c = train;
    c.epochs = para_epochs;
    c.lr = para_lr;
    c.max_steps = para_steps;
    c.batch_size = para_batch_size;
    c.lr_drop_epochs = std::vector<std::size_t>{};
    return c;
  }

  void validate() const {
    if (dataset != "synth" && dataset != "cifar10" && dataset != "mnist") {
      throw ConfigError("unknown dataset '" + dataset + "' (expected synth, cifar10, mnist)");
    }
    if (seeds.empty()) throw ConfigError("seeds must name at least one seed");
    if (methods.empty()) throw ConfigError("methods must name at least one method");
    for (double k : k_sweep)
      if (!(k > 0)) throw ConfigError("k_sweep values must be positive");
    if (para_batch_size == 0) throw ConfigError("para_batch_size must be >= 1");
    train.validate();
    paraphraser_config().validate();
  }
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) throw ConfigError("invalid value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("invalid boolean '" + v + "' for " + key);
}

// Shortest text that parses back to the same double.
inline std::string show(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <class T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Key number_key(std::string name, T RunConfig::*member) {
  return {name, [name, member](RunConfig& c, const std::string& v) { c.*member = parse_number<T>(name, v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return show(c.*member);
            else return std::to_string(c.*member);
          }};
}

template <class T, class Field>
Key nested_number_key(std::string name, Field field) {
  return {name, [name, field](RunConfig& c, const std::string& v) { field(c) = parse_number<T>(name, v); },
          [field](const RunConfig& c) {
            const T value = field(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>) return show(value);
            else return std::to_string(value);
          }};
}

inline Key string_key(std::string name, std::string RunConfig::*member) {
  return {name, [member](RunConfig& c, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return c.*member; }};
}

inline Key bool_key(std::string name, std::function<bool&(RunConfig&)> field) {
  return {name, [name, field](RunConfig& c, const std::string& v) { field(c) = parse_bool(name, v); },
          [field](const RunConfig& c) { return std::string(field(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

inline const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    k.push_back(string_key("dataset", &RunConfig::dataset));
    k.push_back(string_key("data_path", &RunConfig::data_path));
    k.push_back(number_key("train_subset", &RunConfig::train_subset));
    k.push_back(number_key("test_subset", &RunConfig::test_subset));
    k.push_back(number_key("synth_per_class", &RunConfig::synth_per_class));
    k.push_back(number_key("synth_test_per_class", &RunConfig::synth_test_per_class));
    k.push_back(number_key("synth_classes", &RunConfig::synth_classes));
    k.push_back(number_key("synth_size", &RunConfig::synth_size));
    k.push_back(number_key("synth_noise", &RunConfig::synth_noise));
    k.push_back(bool_key("synth_phase_jitter", [](RunConfig& c) -> bool& { return c.synth_phase_jitter; }));
    k.push_back(number_key("synth_contrast_jitter", &RunConfig::synth_contrast_jitter));
    k.push_back(number_key("synth_seed", &RunConfig::synth_seed));
    using Z = std::size_t;
    k.push_back(nested_number_key<Z>("teacher_depth", [](RunConfig& c) -> Z& { return c.teacher.depth; }));
    k.push_back(nested_number_key<Z>("teacher_width", [](RunConfig& c) -> Z& { return c.teacher.width; }));
    k.push_back(nested_number_key<Z>("student_depth", [](RunConfig& c) -> Z& { return c.student.depth; }));
    k.push_back(nested_number_key<Z>("student_width", [](RunConfig& c) -> Z& { return c.student.width; }));
    k.push_back(nested_number_key<Z>("epochs", [](RunConfig& c) -> Z& { return c.train.epochs; }));
    k.push_back(nested_number_key<Z>("batch_size", [](RunConfig& c) -> Z& { return c.train.batch_size; }));
    k.push_back(nested_number_key<double>("lr", [](RunConfig& c) -> double& { return c.train.lr; }));
    k.push_back(nested_number_key<double>("momentum", [](RunConfig& c) -> double& { return c.train.momentum; }));
    k.push_back(
        nested_number_key<double>("weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; }));
    k.push_back({"lr_drops",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "default") {
                     c.train.lr_drop_epochs.reset();
                     return;
                   }
                   std::vector<std::size_t> d;
                   if (v != "none")
                     for (const auto& s : split_list(v)) d.push_back(parse_number<std::size_t>("lr_drops", s));
                   c.train.lr_drop_epochs = d;
                 },
                 [](const RunConfig& c) {
                   if (!c.train.lr_drop_epochs) return std::string("default");
                   if (c.train.lr_drop_epochs->empty()) return std::string("none");
                   return join<std::size_t>(*c.train.lr_drop_epochs, [](const Z& e) { return std::to_string(e); });
                 }});
    k.push_back(
        nested_number_key<double>("lr_drop_factor", [](RunConfig& c) -> double& { return c.train.lr_drop_factor; }));
    k.push_back(nested_number_key<std::uint64_t>("seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));
    k.push_back(nested_number_key<Z>("augment_pad", [](RunConfig& c) -> Z& { return c.train.augment_pad; }));
    k.push_back(bool_key("augment_flip", [](RunConfig& c) -> bool& { return c.train.augment_flip; }));
    k.push_back(bool_key("normalize", [](RunConfig& c) -> bool& { return c.normalize; }));
    k.push_back({"method", [](RunConfig& c, const std::string& v) { c.train.method = parse_method(v); },
                 [](const RunConfig& c) { return std::string(method_tag(c.train.method)); }});
    k.push_back({"ablation", [](RunConfig& c, const std::string& v) { c.train.ablation = parse_ablation(v); },
                 [](const RunConfig& c) { return std::string(ablation_tag(c.train.ablation)); }});
    k.push_back(nested_number_key<double>("k", [](RunConfig& c) -> double& { return c.train.factor.k; }));
    k.push_back(nested_number_key<double>("beta", [](RunConfig& c) -> double& { return c.train.factor.beta; }));
    k.push_back(nested_number_key<int>("p", [](RunConfig& c) -> int& { return c.train.factor.p; }));
    k.push_back(nested_number_key<double>("T", [](RunConfig& c) -> double& { return c.train.factor.T; }));
    k.push_back(nested_number_key<double>("beta_at", [](RunConfig& c) -> double& { return c.train.factor.beta_at; }));
    k.push_back(number_key("para_epochs", &RunConfig::para_epochs));
    k.push_back(number_key("para_lr", &RunConfig::para_lr));
    k.push_back(number_key("para_steps", &RunConfig::para_steps));
    k.push_back(number_key("para_batch_size", &RunConfig::para_batch_size));
    k.push_back(string_key("out_dir", &RunConfig::out_dir));
    k.push_back(string_key("teacher_ckpt", &RunConfig::teacher_ckpt));
    k.push_back(string_key("paraphraser_ckpt", &RunConfig::paraphraser_ckpt));
    k.push_back({"seeds",
                 [](RunConfig& c, const std::string& v) {
                   c.seeds.clear();
                   for (const auto& s : split_list(v)) c.seeds.push_back(parse_number<std::uint64_t>("seeds", s));
                 },
                 [](const RunConfig& c) {
                   return join<std::uint64_t>(c.seeds, [](const std::uint64_t& s) { return std::to_string(s); });
                 }});
    k.push_back({"methods",
                 [](RunConfig& c, const std::string& v) {
                   c.methods.clear();
                   for (const auto& s : split_list(v)) c.methods.push_back(parse_method(s));
                 },
                 [](const RunConfig& c) {
                   return join<Method>(c.methods, [](const Method& m) { return std::string(method_tag(m)); });
                 }});
    k.push_back({"k_sweep",
                 [](RunConfig& c, const std::string& v) {
                   c.k_sweep.clear();
                   for (const auto& s : split_list(v)) c.k_sweep.push_back(parse_number<double>("k_sweep", s));
                 },
                 [](const RunConfig& c) { return join<double>(c.k_sweep, [](const double& k) { return show(k); }); }});
    return k;
  }();
  return table;
}

}  // namespace config_detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : config_detail::keys()) out.push_back(k.name);
  return out;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_detail::keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  for (const auto& k : config_detail::keys())
    if (k.name == key) return k.get(cfg);
  throw ConfigError("unknown config key '" + key + "'");
}

/// Applies `key = value` lines on top of `cfg`. `source` names the input in
/// error messages.
inline void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& source = "config") {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = config_detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = config_detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = config_detail::trim(std::string_view(body).substr(eq + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg;
  apply_config_text(cfg, ss.str(), path.string());
  return cfg;
}

/// Every key with its resolved value; loading this text reproduces `cfg`.
inline std::string resolved_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_detail::keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Data resolution

inline Dataset take_prefix(Dataset d, std::size_t n) {
  if (n == 0 || n >= d.size()) return d;
  d.labels.resize(n);
  d.pixels.resize(n * d.channels * d.height * d.width);
  return d;
}

/// (train, test) for the configured dataset.
inline std::pair<Dataset, Dataset> load_datasets(const RunConfig& cfg) {
  if (cfg.dataset == "synth") {
    SynthOptions o;
    o.n_per_class = cfg.synth_per_class;
    o.classes = cfg.synth_classes;
    o.size = cfg.synth_size;
    o.seed = cfg.synth_seed;
    o.noise = cfg.synth_noise;
    o.phase_jitter = cfg.synth_phase_jitter;
    o.contrast_jitter = cfg.synth_contrast_jitter;
    Dataset train = synth_dataset(o);
    o.split = "test";
    o.n_per_class = cfg.synth_test_per_class;
    Dataset test = synth_dataset(o);
    return {take_prefix(std::move(train), cfg.train_subset), take_prefix(std::move(test), cfg.test_subset)};
  }
  if (cfg.data_path.empty()) throw DataError("dataset " + cfg.dataset + " requires data_path");
  const std::filesystem::path root(cfg.data_path);
  if (!std::filesystem::exists(root)) throw DataError("dataset path '" + root.string() + "' does not exist");
  if (cfg.dataset == "cifar10") return load_cifar10_binary(root, cfg.train_subset, cfg.test_subset);
  Dataset train = load_mnist_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte", "train");
  Dataset test = load_mnist_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte", "test");
  return {take_prefix(std::move(train), cfg.train_subset), take_prefix(std::move(test), cfg.test_subset)};
}

}  // namespace ktransfer
