#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "protoseg/episodes.hpp"
#include "protoseg/pipeline.hpp"

namespace protoseg {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::uint64_t seed = 1;
  std::size_t count = 100;
  std::size_t height = 64;
  std::size_t width = 64;
  int num_classes = 6;
  std::vector<int> test_classes = {1, 2};
  Setting setting = Setting::One;
  std::size_t folds = 5;
  std::size_t fold = 0;
};

struct TrainConfig {
  std::size_t iterations = 2000;
  double learning_rate = 0.01;
  double momentum = 0.0;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 500;
  Supervision supervision = Supervision::Labels;
  std::string out_dir = "run";
};

struct EvalConfig {
  std::size_t max_queries = 0;  // 0 = every other test slice of the class
};

struct RunConfig {
  EncoderConfig encoder;
  PipelineConfig pipeline;
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;

  PhantomConfig phantom() const {
    PhantomConfig p;
    p.height = data.height;
    p.width = data.width;
    p.num_classes = data.num_classes;
    return p;
  }
  SplitConfig split() const { return {data.setting, data.folds, data.fold, data.seed, data.test_classes}; }
};

// One entry per dotted config key; CLI flags are generated from this table.
struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const json&)> set;
  std::function<json(const RunConfig&)> get;
};

namespace detail {

template <class T, class F>
ConfigKey plain_key(std::string name, std::string help, F field) {
  return {std::move(name), std::move(help), [field](RunConfig& c, const json& v) { field(c) = v.get<T>(); },
          [field](const RunConfig& c) { return json(field(const_cast<RunConfig&>(c))); }};
}

inline std::string lower(std::string s) {
  for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

}  // namespace detail

inline const std::vector<ConfigKey>& config_keys() {
  using detail::plain_key;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(plain_key<std::size_t>("encoder.channels", "feature dimension D",
                                       [](RunConfig& c) -> auto& { return c.encoder.channels; }));
    k.push_back(plain_key<std::uint64_t>("encoder.seed", "encoder and bank init seed",
                                         [](RunConfig& c) -> auto& { return c.encoder.seed; }));
    k.push_back(plain_key<std::size_t>("fspa.num_clusters", "foreground cluster count",
                                       [](RunConfig& c) -> auto& { return c.pipeline.fspa.num_clusters; }));
    k.push_back(plain_key<std::size_t>("fspa.kmeans_max_iters", "k-means iteration cap",
                                       [](RunConfig& c) -> auto& { return c.pipeline.fspa.kmeans_max_iters; }));
    k.push_back(plain_key<std::uint64_t>("fspa.seed", "k-means seeding",
                                         [](RunConfig& c) -> auto& { return c.pipeline.fspa.seed; }));
    k.push_back(plain_key<double>("bcma.beta", "neighbour adjustment strength",
                                  [](RunConfig& c) -> auto& { return c.pipeline.bcma.pattern.beta; }));
    k.push_back({"bcma.w_band", "band weights [w1, w2, w3]",
                 [](RunConfig& c, const json& v) {
                   const auto w = v.get<std::vector<double>>();
                   if (w.size() != 3) throw ConfigError("bcma.w_band needs exactly three numbers");
                   c.pipeline.bcma.pattern.w1 = w[0];
                   c.pipeline.bcma.pattern.w2 = w[1];
                   c.pipeline.bcma.pattern.w3 = w[2];
                 },
                 [](const RunConfig& c) {
                   const auto& p = c.pipeline.bcma.pattern;
                   return json::array({p.w1, p.w2, p.w3});
                 }});
    k.push_back({"bcma.pool_window", "background grid cell [h, w] in feature pixels",
                 [](RunConfig& c, const json& v) {
                   const auto w = v.get<std::vector<std::size_t>>();
                   if (w.size() != 2) throw ConfigError("bcma.pool_window needs two integers");
                   c.pipeline.bcma.pool_window = {w[0], w[1]};
                 },
                 [](const RunConfig& c) {
                   return json::array({c.pipeline.bcma.pool_window[0], c.pipeline.bcma.pool_window[1]});
                 }});
    k.push_back(plain_key<double>("bcma.bg_threshold", "cells with pooled mask below this are background",
                                  [](RunConfig& c) -> auto& { return c.pipeline.bcma.bg_threshold; }));
    k.push_back(plain_key<bool>("bcma.freeze_a", "keep the attention bank fixed",
                                [](RunConfig& c) -> auto& { return c.pipeline.bcma.freeze_a; }));
    k.push_back(plain_key<bool>("bcma.no_adjust", "drop the neighbour adjustment",
                                [](RunConfig& c) -> auto& { return c.pipeline.bcma.no_adjust; }));
    k.push_back(plain_key<bool>("bcma.random_init", "random attention bank init",
                                [](RunConfig& c) -> auto& { return c.pipeline.bcma.random_init; }));
    k.push_back(plain_key<double>("seg.temperature", "cosine logit scale",
                                  [](RunConfig& c) -> auto& { return c.pipeline.seg.temperature; }));
    k.push_back({"seg.bg_aggregation", "\"max\" or \"mean\" over background prototypes",
                 [](RunConfig& c, const json& v) {
                   const std::string s = detail::lower(v.get<std::string>());
                   if (s == "max") c.pipeline.seg.aggregation = BackgroundAggregation::Max;
                   else if (s == "mean") c.pipeline.seg.aggregation = BackgroundAggregation::Mean;
                   else throw ConfigError("seg.bg_aggregation must be \"max\" or \"mean\", got \"" + s + "\"");
                 },
                 [](const RunConfig& c) {
                   return json(c.pipeline.seg.aggregation == BackgroundAggregation::Max ? "max" : "mean");
                 }});
    k.push_back({"pipeline.no_ran", "skip the resemblance fusion",
                 [](RunConfig& c, const json& v) { c.pipeline.use_ran = !v.get<bool>(); },
                 [](const RunConfig& c) { return json(!c.pipeline.use_ran); }});
    k.push_back({"pipeline.no_fspa", "plain masked average foreground prototype",
                 [](RunConfig& c, const json& v) { c.pipeline.use_fspa = !v.get<bool>(); },
                 [](const RunConfig& c) { return json(!c.pipeline.use_fspa); }});
    k.push_back({"pipeline.no_bcma", "raw grid background prototypes",
                 [](RunConfig& c, const json& v) { c.pipeline.use_bcma = !v.get<bool>(); },
                 [](const RunConfig& c) { return json(!c.pipeline.use_bcma); }});
    k.push_back(plain_key<std::uint64_t>("data.seed", "phantom and split seed",
                                         [](RunConfig& c) -> auto& { return c.data.seed; }));
    k.push_back(plain_key<std::size_t>("data.count", "number of phantom slices",
                                       [](RunConfig& c) -> auto& { return c.data.count; }));
    k.push_back(plain_key<std::size_t>("data.height", "slice height",
                                       [](RunConfig& c) -> auto& { return c.data.height; }));
    k.push_back(plain_key<std::size_t>("data.width", "slice width",
                                       [](RunConfig& c) -> auto& { return c.data.width; }));
    k.push_back(plain_key<int>("data.num_classes", "phantom class count",
                               [](RunConfig& c) -> auto& { return c.data.num_classes; }));
    k.push_back(plain_key<std::vector<int>>("data.test_classes", "classes held out for evaluation",
                                            [](RunConfig& c) -> auto& { return c.data.test_classes; }));
    k.push_back({"data.setting", "1 or 2; 2 removes training slices showing a test class",
                 [](RunConfig& c, const json& v) {
                   const int s = v.get<int>();
                   if (s != 1 && s != 2) throw ConfigError("data.setting must be 1 or 2");
                   c.data.setting = static_cast<Setting>(s);
                 },
                 [](const RunConfig& c) { return json(static_cast<int>(c.data.setting)); }});
    k.push_back(plain_key<std::size_t>("data.folds", "cross-validation folds",
                                       [](RunConfig& c) -> auto& { return c.data.folds; }));
    k.push_back(plain_key<std::size_t>("data.fold", "held-out fold",
                                       [](RunConfig& c) -> auto& { return c.data.fold; }));
    k.push_back(plain_key<std::size_t>("train.iterations", "SGD steps",
                                       [](RunConfig& c) -> auto& { return c.train.iterations; }));
    k.push_back(plain_key<double>("train.learning_rate", "SGD step size",
                                  [](RunConfig& c) -> auto& { return c.train.learning_rate; }));
    k.push_back(plain_key<double>("train.momentum", "SGD momentum",
                                  [](RunConfig& c) -> auto& { return c.train.momentum; }));
    k.push_back(plain_key<std::uint64_t>("train.seed", "episode sampling seed",
                                         [](RunConfig& c) -> auto& { return c.train.seed; }));
    k.push_back(plain_key<std::size_t>("train.checkpoint_every", "steps between checkpoints, 0 for end only",
                                       [](RunConfig& c) -> auto& { return c.train.checkpoint_every; }));
    k.push_back({"train.supervision", "\"pseudo\" (superpixels) or \"labels\"",
                 [](RunConfig& c, const json& v) {
                   const std::string s = detail::lower(v.get<std::string>());
                   if (s == "pseudo") c.train.supervision = Supervision::Pseudo;
                   else if (s == "labels") c.train.supervision = Supervision::Labels;
                   else throw ConfigError("train.supervision must be \"pseudo\" or \"labels\", got \"" + s + "\"");
                 },
                 [](const RunConfig& c) {
                   return json(c.train.supervision == Supervision::Pseudo ? "pseudo" : "labels");
                 }});
    k.push_back(plain_key<std::string>("train.out_dir", "directory for traces and checkpoints",
                                       [](RunConfig& c) -> auto& { return c.train.out_dir; }));
    k.push_back(plain_key<std::size_t>("eval.max_queries", "cap on queries per class, 0 for all",
                                       [](RunConfig& c) -> auto& { return c.eval.max_queries; }));
    return k;
  }();
  return keys;
}

inline const ConfigKey* find_config_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

inline void set_config_value(RunConfig& cfg, const std::string& name, const json& value) {
  const ConfigKey* key = find_config_key(name);
  if (!key) throw ConfigError("unknown config key '" + name + "'");
  try {
    key->set(cfg, value);
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + name + "': wrong type (" + value.dump() + ")");
  }
}

namespace detail {

inline void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string name = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) flatten(*it, name, out);
    else out.emplace_back(name, *it);
  }
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  try {
    validate_pattern(c.pipeline.bcma.pattern);
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (c.encoder.channels < 2) fail("encoder.channels must be at least 2");
  if (c.pipeline.fspa.num_clusters == 0) fail("fspa.num_clusters must be positive");
  if (c.pipeline.fspa.kmeans_max_iters == 0) fail("fspa.kmeans_max_iters must be positive");
  const auto& win = c.pipeline.bcma.pool_window;
  if (win[0] == 0 || win[1] == 0) fail("bcma.pool_window entries must be positive");
  if (!(c.pipeline.bcma.bg_threshold > 0.0 && c.pipeline.bcma.bg_threshold <= 1.0))
    fail("bcma.bg_threshold must lie in (0, 1]");
  if (!(c.pipeline.seg.temperature > 0.0)) fail("seg.temperature must be positive");
  if (c.data.height < 32 || c.data.width < 32) fail("data.height and data.width must be at least 32");
  if (c.data.height % (kEncoderStride * win[0]) || c.data.width % (kEncoderStride * win[1]))
    fail("data.height/width must be multiples of " + std::to_string(kEncoderStride) + " x bcma.pool_window");
  if (c.data.num_classes < 4) fail("data.num_classes must be at least 4");
  if (c.data.test_classes.empty()) fail("data.test_classes must not be empty");
  for (int t : c.data.test_classes)
    if (t < 1 || t > c.data.num_classes) fail("data.test_classes entry " + std::to_string(t) + " out of range");
  if (c.data.folds < 2) fail("data.folds must be at least 2");
  if (c.data.folds > c.data.count) fail("data.folds exceeds data.count");
  if (c.data.fold >= c.data.folds) fail("data.fold must be below data.folds");
  if (c.train.iterations == 0) fail("train.iterations must be positive");
  if (!(c.train.learning_rate > 0.0)) fail("train.learning_rate must be positive");
  if (!(c.train.momentum >= 0.0 && c.train.momentum < 1.0)) fail("train.momentum must lie in [0, 1)");
  if (c.train.out_dir.empty()) fail("train.out_dir must not be empty");
}

// Nested objects and dotted keys are both accepted: {"bcma": {"beta": 0.3}}
// and {"bcma.beta": 0.3} mean the same thing.
inline RunConfig config_from_json(const json& doc, RunConfig base = {}) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::pair<std::string, json>> flat;
  detail::flatten(doc, "", flat);
  for (const auto& [name, value] : flat) set_config_value(base, name, value);
  validate(base);
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(doc);
}

inline json config_to_json(const RunConfig& c) {
  json out = json::object();
  for (const auto& k : config_keys()) {
    const auto dot = k.name.find('.');
    out[k.name.substr(0, dot)][k.name.substr(dot + 1)] = k.get(c);
  }
  return out;
}

}  // namespace protoseg
