#pragma once

// Experiment configuration. Files are either JSON or a TOML subset
// (tables, dotted table headers, key = value with strings, numbers, booleans
// and flat arrays, # comments); both load into the same JSON tree, which is
// then validated into an ExperimentConfig.

#include "mdnadapt/adapt.hpp"
#include "mdnadapt/autoenc.hpp"
#include "mdnadapt/serialize.hpp"

#include <cctype>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mdnadapt::config {

using io::Json;

class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0;
  std::size_t b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

inline Json parse_scalar(const std::string& raw, int line) {
  const std::string v = trim(raw);
  if (v.empty()) throw ConfigError("toml line " + std::to_string(line) + ": missing value");
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') throw ConfigError("toml line " + std::to_string(line) + ": unterminated string");
    return Json::parse(v);
  }
  if (v == "true") return true;
  if (v == "false") return false;
  std::string num;
  for (char c : v)
    if (c != '_') num.push_back(c);
  try {
    std::size_t used = 0;
    if (num.find_first_of(".eE") == std::string::npos || num.find("inf") != std::string::npos) {
      const long long i = std::stoll(num, &used);
      if (used == num.size()) return i;
    }
    const double d = std::stod(num, &used);
    if (used == num.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("toml line " + std::to_string(line) + ": cannot parse value '" + v + "'");
}

inline Json parse_value(const std::string& raw, int line) {
  const std::string v = trim(raw);
  if (!v.empty() && v.front() == '[') {
    if (v.back() != ']') throw ConfigError("toml line " + std::to_string(line) + ": arrays must be on one line");
    Json arr = Json::array();
    const std::string body = v.substr(1, v.size() - 2);
    std::string cell;
    bool in_str = false;
    for (char c : body) {
      if (c == '"') in_str = !in_str;
      if (c == ',' && !in_str) {
        if (!trim(cell).empty()) arr.push_back(parse_scalar(cell, line));
        cell.clear();
      } else {
        cell.push_back(c);
      }
    }
    if (!trim(cell).empty()) arr.push_back(parse_scalar(cell, line));
    return arr;
  }
  return parse_scalar(v, line);
}

}  // namespace detail

inline Json parse_toml(const std::string& text) {
  Json root = Json::object();
  Json* table = &root;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = detail::trim(detail::strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) throw ConfigError("toml line " + std::to_string(line_no) + ": bad table header");
      table = &root;
      for (const auto& part : io::split(line.substr(1, line.size() - 2), '.')) {
        const std::string key = detail::trim(part);
        if (key.empty()) throw ConfigError("toml line " + std::to_string(line_no) + ": empty table name");
        Json& next = (*table)[key];
        if (next.is_null()) next = Json::object();
        if (!next.is_object()) throw ConfigError("toml line " + std::to_string(line_no) + ": '" + key + "' is not a table");
        table = &next;
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("toml line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("toml line " + std::to_string(line_no) + ": empty key");
    if (table->contains(key)) throw ConfigError("toml line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    (*table)[key] = detail::parse_value(line.substr(eq + 1), line_no);
  }
  return root;
}

/// How to build a channel for one domain.
struct ChannelConfig {
  /// awgn | uniform_fading | ricean | rayleigh | random_gmm | source (target only: same as source)
  std::string kind = "awgn";
  double snr_db = 14.0;
  double s_min_db = 10.0;
  std::optional<double> sigma0;
  int components = 3;  // random_gmm
  double phase_max = 0.0;
  double iq_imbalance = 0.0;
};

inline ChannelConfig make_channel_config(std::string kind, double snr_db) {
  ChannelConfig c;
  c.kind = std::move(kind);
  c.snr_db = snr_db;
  return c;
}

enum class Method { no_adapt, retrain_oracle, finetune, finetune_last, proposed };

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::no_adapt, Method::retrain_oracle, Method::finetune, Method::finetune_last,
                                     Method::proposed};
  return m;
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::no_adapt: return "no_adapt";
    case Method::retrain_oracle: return "retrain_oracle";
    case Method::finetune: return "finetune";
    case Method::finetune_last: return "finetune_last";
    case Method::proposed: return "proposed";
  }
  return "unknown";
}

inline Method method_from_string(const std::string& s) {
  for (auto m : all_methods())
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s + "'");
}

struct FinetuneConfig {
  int epochs = 200;
  double learning_rate = 1e-3;
  int decoder_epochs = 20;
  int decoder_samples = 20000;
  double decoder_learning_rate = 1e-3;
  int decoder_batch = 128;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  int trials = 5;
  int workers = 1;
  autoenc::SystemShape shape{};
  autoenc::TrainConfig training{};
  ChannelConfig source = make_channel_config("awgn", 14.0);
  ChannelConfig target = make_channel_config("uniform_fading", 20.0);
  std::vector<int> sizes{5, 10, 20, 30, 40, 50};
  int train_per_class = 1875;
  int test_per_class = 1875;
  bool full_scale = false;
  std::vector<Method> methods = all_methods();
  adapt::AdaptationConfig adaptation{};
  FinetuneConfig finetune{};
  /// Also report test SER for every lambda on the grid.
  bool evaluate_grid = false;
  std::string out_dir = "results";
  std::string source_checkpoint;

  /// 300,000 / 300,000 target split instead of the desk-scale default.
  void apply_full_scale() {
    full_scale = true;
    train_per_class = 300000 / shape.m;
    test_per_class = 300000 / shape.m;
  }

  bool has(Method m) const { return std::find(methods.begin(), methods.end(), m) != methods.end(); }

  void validate() const {
    auto check = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError("config: " + msg);
    };
    check(trials >= 1, "trials must be >= 1");
    check(workers >= 1, "workers must be >= 1");
    check(shape.m >= 2 && shape.d >= 1 && shape.k >= 1 && shape.hidden >= 1, "invalid system shape");
    check(!sizes.empty(), "sizes must not be empty");
    for (int s : sizes) check(s >= 1, "all sizes must be >= 1");
    for (int s : sizes) check(s <= train_per_class, "adaptation size exceeds the target train split");
    check(train_per_class >= 1 && test_per_class >= 1, "split sizes must be >= 1");
    check(!methods.empty(), "no methods enabled");
    check(training.n_ae >= 0 && training.n_ce >= 0 && training.mdn_samples >= 1 && training.ae_samples >= 0,
          "invalid training settings");
    check(source.kind != "source", "source channel cannot refer to itself");
    check(finetune.epochs >= 0 && finetune.decoder_epochs >= 0 && finetune.decoder_samples >= 1, "invalid finetune settings");
    try {
      adaptation.validate();
    } catch (const Error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    static const std::set<std::string> kinds{"awgn", "uniform_fading", "ricean", "rayleigh", "random_gmm", "source"};
    check(kinds.count(source.kind) == 1 && kinds.count(target.kind) == 1, "unknown channel kind");
    for (const auto* c : {&source, &target}) {
      check(c->phase_max >= 0.0 && c->phase_max <= std::numbers::pi, "phase_max must lie in [0, pi]");
      check(c->iq_imbalance >= 0.0 && c->iq_imbalance < 1.0, "iq_imbalance must lie in [0, 1)");
      check(c->components >= 1, "components must be >= 1");
    }
    if (shape.d % 2 != 0) {
      check(source.kind != "ricean" && source.kind != "rayleigh" && target.kind != "ricean" && target.kind != "rayleigh",
            "ricean channels need an even symbol dimension");
    }
  }
};

namespace detail {

template <class T>
void read(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

inline void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be a table");
  for (const auto& [k, v] : j.items()) {
    if (allowed.count(k) == 0) throw ConfigError("config: unknown key '" + k + "' in " + where);
  }
}

inline ChannelConfig channel_from(const Json& j, ChannelConfig c, const std::string& where) {
  check_keys(j, {"kind", "snr_db", "s_min_db", "sigma0", "components", "phase_max", "iq_imbalance"}, where);
  read(j, "kind", c.kind);
  read(j, "snr_db", c.snr_db);
  read(j, "s_min_db", c.s_min_db);
  if (j.contains("sigma0")) c.sigma0 = j.at("sigma0").get<double>();
  read(j, "components", c.components);
  read(j, "phase_max", c.phase_max);
  read(j, "iq_imbalance", c.iq_imbalance);
  return c;
}

}  // namespace detail

inline ExperimentConfig from_json(const Json& j) {
  using detail::read;
  ExperimentConfig c;
  detail::check_keys(j,
                     {"name", "seed", "trials", "workers", "system", "training", "source", "target", "sizes", "split",
                      "methods", "adaptation", "finetune", "output"},
                     "top level");
  read(j, "name", c.name);
  read(j, "seed", c.seed);
  read(j, "trials", c.trials);
  read(j, "workers", c.workers);
  if (j.contains("system")) {
    const auto& s = j.at("system");
    detail::check_keys(s, {"m", "d", "k", "n_h"}, "[system]");
    read(s, "m", c.shape.m);
    read(s, "d", c.shape.d);
    read(s, "k", c.shape.k);
    read(s, "n_h", c.shape.hidden);
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    detail::check_keys(t,
                       {"n_ae", "n_ce", "mdn_samples", "ae_samples", "batch", "lr_start", "lr_end", "momentum", "tau",
                        "mdn_lr", "mdn_batch"},
                       "[training]");
    read(t, "n_ae", c.training.n_ae);
    read(t, "n_ce", c.training.n_ce);
    read(t, "mdn_samples", c.training.mdn_samples);
    read(t, "ae_samples", c.training.ae_samples);
    read(t, "batch", c.training.batch_size);
    read(t, "lr_start", c.training.lr_start);
    read(t, "lr_end", c.training.lr_end);
    read(t, "momentum", c.training.momentum);
    read(t, "tau", c.training.tau);
    read(t, "mdn_lr", c.training.mdn_options.learning_rate);
    read(t, "mdn_batch", c.training.mdn_options.batch_size);
  }
  if (j.contains("source")) c.source = detail::channel_from(j.at("source"), c.source, "[source]");
  if (j.contains("target")) c.target = detail::channel_from(j.at("target"), c.target, "[target]");
  read(j, "sizes", c.sizes);
  if (j.contains("split")) {
    const auto& s = j.at("split");
    detail::check_keys(s, {"train_per_class", "test_per_class", "full_scale"}, "[split]");
    read(s, "train_per_class", c.train_per_class);
    read(s, "test_per_class", c.test_per_class);
    bool full = false;
    read(s, "full_scale", full);
    if (full) c.apply_full_scale();
  }
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& m : j.at("methods")) c.methods.push_back(method_from_string(m.get<std::string>()));
  }
  if (j.contains("adaptation")) {
    const auto& a = j.at("adaptation");
    detail::check_keys(a, {"lambda_grid", "bfgs_max_iters", "bfgs_grad_tol", "mode", "covariance_transform", "workers",
                           "evaluate_grid"},
                       "[adaptation]");
    read(a, "evaluate_grid", c.evaluate_grid);
    read(a, "lambda_grid", c.adaptation.lambda_grid);
    read(a, "bfgs_max_iters", c.adaptation.bfgs_max_iters);
    read(a, "bfgs_grad_tol", c.adaptation.bfgs_grad_tol);
    read(a, "workers", c.adaptation.workers);
    if (a.contains("mode")) {
      try {
        c.adaptation.mode = adapt::mode_from_string(a.at("mode").get<std::string>());
      } catch (const Error& e) {
        throw ConfigError(std::string("config: ") + e.what());
      }
    }
    if (a.contains("covariance_transform")) {
      try {
        c.adaptation.shape = io::transform_from_string(a.at("covariance_transform").get<std::string>());
      } catch (const Error& e) {
        throw ConfigError(std::string("config: ") + e.what());
      }
    }
  }
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    detail::check_keys(f, {"epochs", "lr", "decoder_epochs", "decoder_samples", "decoder_lr", "decoder_batch"}, "[finetune]");
    read(f, "epochs", c.finetune.epochs);
    read(f, "lr", c.finetune.learning_rate);
    read(f, "decoder_epochs", c.finetune.decoder_epochs);
    read(f, "decoder_samples", c.finetune.decoder_samples);
    read(f, "decoder_lr", c.finetune.decoder_learning_rate);
    read(f, "decoder_batch", c.finetune.decoder_batch);
  }
  if (j.contains("output")) {
    const auto& o = j.at("output");
    detail::check_keys(o, {"dir", "source_checkpoint"}, "[output]");
    read(o, "dir", c.out_dir);
    read(o, "source_checkpoint", c.source_checkpoint);
  }
  c.validate();
  return c;
}

inline Json to_json(const ExperimentConfig& c) {
  auto channel = [](const ChannelConfig& ch) {
    Json j = {{"kind", ch.kind},           {"snr_db", ch.snr_db},       {"s_min_db", ch.s_min_db},
              {"components", ch.components}, {"phase_max", ch.phase_max}, {"iq_imbalance", ch.iq_imbalance}};
    if (ch.sigma0) j["sigma0"] = *ch.sigma0;
    return j;
  };
  Json methods = Json::array();
  for (auto m : c.methods) methods.push_back(to_string(m));
  return {{"name", c.name},
          {"seed", c.seed},
          {"trials", c.trials},
          {"workers", c.workers},
          {"system", {{"m", c.shape.m}, {"d", c.shape.d}, {"k", c.shape.k}, {"n_h", c.shape.hidden}}},
          {"training",
           {{"n_ae", c.training.n_ae},
            {"n_ce", c.training.n_ce},
            {"mdn_samples", c.training.mdn_samples},
            {"ae_samples", c.training.ae_samples},
            {"batch", c.training.batch_size},
            {"lr_start", c.training.lr_start},
            {"lr_end", c.training.lr_end},
            {"momentum", c.training.momentum},
            {"tau", c.training.tau},
            {"mdn_lr", c.training.mdn_options.learning_rate},
            {"mdn_batch", c.training.mdn_options.batch_size}}},
          {"source", channel(c.source)},
          {"target", channel(c.target)},
          {"sizes", c.sizes},
          {"split", {{"train_per_class", c.train_per_class}, {"test_per_class", c.test_per_class}, {"full_scale", c.full_scale}}},
          {"methods", methods},
          {"adaptation",
           {{"lambda_grid", c.adaptation.lambda_grid},
            {"bfgs_max_iters", c.adaptation.bfgs_max_iters},
            {"bfgs_grad_tol", c.adaptation.bfgs_grad_tol},
            {"mode", adapt::to_string(c.adaptation.mode)},
            {"covariance_transform", io::to_string(c.adaptation.shape)},
            {"workers", c.adaptation.workers},
            {"evaluate_grid", c.evaluate_grid}}},
          {"finetune",
           {{"epochs", c.finetune.epochs},
            {"lr", c.finetune.learning_rate},
            {"decoder_epochs", c.finetune.decoder_epochs},
            {"decoder_samples", c.finetune.decoder_samples},
            {"decoder_lr", c.finetune.decoder_learning_rate},
            {"decoder_batch", c.finetune.decoder_batch}}},
          {"output", {{"dir", c.out_dir}, {"source_checkpoint", c.source_checkpoint}}}};
}

/// Loads .json as JSON and anything else as the TOML subset.
inline ExperimentConfig load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  Json j;
  if (path.extension() == ".json") {
    try {
      j = Json::parse(text);
    } catch (const Json::exception& e) {
      throw ConfigError("config: invalid JSON: " + std::string(e.what()));
    }
  } else {
    j = parse_toml(text);
  }
  return from_json(j);
}

}  // namespace mdnadapt::config
