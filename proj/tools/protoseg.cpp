// protoseg command line: train, eval, segment, phantoms.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "protoseg/protoseg.hpp"

namespace fs = std::filesystem;
using namespace protoseg;

namespace {

// --<key> flags for every config key plus the short ablation aliases.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::pair<const ConfigKey*, CLI::Option*>> keys;
  bool no_ran = false, no_fspa = false, no_bcma = false;

  void attach(CLI::App* app, bool config_required) {
    auto* c = app->add_option("--config", config_path, "JSON run configuration");
    if (config_required) c->required();
    for (const auto& k : config_keys())
      keys.emplace_back(&k, app->add_option("--" + k.name, k.help)->expected(0, 1)->group("Config overrides"));
    app->add_flag("--no-ran", no_ran, "alias for --pipeline.no_ran")->group("Ablations");
    app->add_flag("--no-fspa", no_fspa, "alias for --pipeline.no_fspa")->group("Ablations");
    app->add_flag("--no-bcma", no_bcma, "alias for --pipeline.no_bcma")->group("Ablations");
  }

  RunConfig resolve() const {
    json doc = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot open config " + config_path);
      try {
        doc = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ConfigError(config_path + ": " + e.what());
      }
    }
    RunConfig cfg = config_from_json(doc);
    for (const auto& [key, opt] : keys) {
      if (!opt->count()) continue;
      const auto& res = opt->results();
      const std::string text = res.empty() || res.front().empty() ? "true" : res.front();
      json value;
      try {
        value = json::parse(text);
      } catch (const json::parse_error&) {
        value = text;
      }
      set_config_value(cfg, key->name, value);
    }
    if (no_ran) cfg.pipeline.use_ran = false;
    if (no_fspa) cfg.pipeline.use_fspa = false;
    if (no_bcma) cfg.pipeline.use_bcma = false;
    validate(cfg);
    return cfg;
  }
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

int run_train(const ConfigFlags& flags) {
  const RunConfig cfg = flags.resolve();
  const Benchmark bench = make_benchmark(cfg.data.seed, cfg.data.count, cfg.phantom());
  fs::create_directories(cfg.train.out_dir);
  write_json(fs::path(cfg.train.out_dir) / "config.json", config_to_json(cfg));
  TrainOptions opts;
  const std::size_t report = std::max<std::size_t>(1, cfg.train.iterations / 20);
  opts.on_step = [&](const StepRecord& r) {
    if (r.step % report == 0) std::fprintf(stderr, "step %zu/%zu loss %.6f\n", r.step, cfg.train.iterations, r.loss);
  };
  const TrainResult res = train(cfg, bench, initial_params(cfg), opts);
  const std::size_t n = res.trace.size();
  std::printf("trained %zu steps; smoothed loss %.6f -> %.6f\n", n, smoothed_loss(res.trace, std::min<std::size_t>(100, n)),
              smoothed_loss(res.trace, n));
  std::printf("loss trace %s\ncheckpoint %s\n", (fs::path(cfg.train.out_dir) / "loss.csv").c_str(),
              res.last_checkpoint.c_str());
  return 0;
}

int run_eval(const ConfigFlags& flags, const std::string& params_path, std::string out_csv) {
  const RunConfig cfg = flags.resolve();
  const Benchmark bench = make_benchmark(cfg.data.seed, cfg.data.count, cfg.phantom());
  const ParamStore params = params_path.empty() ? initial_params(cfg) : load_checkpoint(params_path);
  const EvalTable table = evaluate(params, cfg, bench);
  if (params_path.empty()) std::cout << "untrained parameters (no --params given)\n";
  print_eval_table(std::cout, table);
  if (out_csv.empty()) {
    fs::create_directories(cfg.train.out_dir);
    out_csv = (fs::path(cfg.train.out_dir) / "eval.csv").string();
  }
  write_eval_csv(out_csv, table);
  std::cout << "wrote " << out_csv << '\n';
  return 0;
}

struct SegmentArgs {
  std::string support, support_mask, query, features, support_features, params, out;
};

int run_segment(const ConfigFlags& flags, const SegmentArgs& a) {
  const RunConfig cfg = flags.resolve();
  const Image support = read_image(a.support);
  const Mask mask = read_mask(a.support_mask);
  const Image query = read_image(a.query);
  if (mask.height() != support.height() || mask.width() != support.width())
    throw std::invalid_argument("support mask does not match the support image size");
  const ParamStore params = a.params.empty() ? initial_params(cfg) : load_checkpoint(a.params);
  Tape tape;
  PredictionBundle pred;
  if (!a.features.empty()) {
    const Tensor fq = load_features(a.features);
    const Tensor fs_ = load_features(a.support_features);
    if (fq.dim(0) != fs_.dim(0)) throw std::invalid_argument("support and query features differ in channel count");
    if (fs_.dim(1) != fq.dim(1) || fs_.dim(2) != fq.dim(2))
      throw std::invalid_argument("support and query feature maps differ in size");
    ParamStore bank = params;
    if (bank.get(kAttentionParam).dim(0) != fq.dim(0)) {
      // Features from another backbone: start the bank from the sparse pattern.
      bank.set(kAttentionParam, init_attention_bank(cfg.pipeline.bcma.pattern, fq.dim(0)));
    }
    DirectionChoices choices;
    pred = predict_direction(feature_constant(tape, fs_), feature_constant(tape, fq), mask, query.height(),
                             query.width(), bank, cfg.pipeline, choices, false)
               .prediction;
  } else {
    pred = predict(tape, support, mask, query, params, cfg.pipeline);
  }
  write_mask(a.out, pred.mask);
  std::printf("foreground pixels %zu of %zu -> %s\n", pred.mask.count_positive(), pred.mask.size(), a.out.c_str());
  return 0;
}

int run_phantoms(std::uint64_t seed, std::size_t count, const std::string& dir, const PhantomConfig& pc) {
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.csv");
  manifest << "id,image,classes\n";
  for (std::size_t i = 0; i < count; ++i) {
    const Phantom ph = generate_phantom(seed, i, pc);
    char name[64];
    std::snprintf(name, sizeof name, "phantom_%04zu.pgm", i);
    write_image((fs::path(dir) / name).string(), ph.image);
    std::string classes;
    for (std::size_t b = 0; b < ph.classes.size(); ++b) {
      std::snprintf(name, sizeof name, "phantom_%04zu_class%d.pgm", i, ph.classes[b]);
      write_mask((fs::path(dir) / name).string(), ph.masks[b]);
      classes += (b ? " " : "") + std::to_string(ph.classes[b]);
    }
    std::snprintf(name, sizeof name, "phantom_%04zu.pgm", i);
    manifest << i << ',' << name << ',' << classes << '\n';
  }
  std::printf("wrote %zu phantoms to %s\n", count, dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot segmentation with dual semantic prototypes"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "episodic SGD training on the phantom benchmark");
  ConfigFlags train_flags;
  train_flags.attach(train_cmd, false);

  auto* eval_cmd = app.add_subcommand("eval", "Dice evaluation on the held-out fold");
  ConfigFlags eval_flags;
  eval_flags.attach(eval_cmd, false);
  std::string eval_params, eval_out;
  eval_cmd->add_option("--params", eval_params, "checkpoint; omitted means untrained parameters");
  eval_cmd->add_option("--out", eval_out, "CSV path (default <train.out_dir>/eval.csv)");

  auto* seg_cmd = app.add_subcommand("segment", "segment one query image from one annotated support");
  ConfigFlags seg_flags;
  seg_flags.attach(seg_cmd, false);
  SegmentArgs seg;
  seg_cmd->add_option("--support", seg.support, "support image (PGM)")->required()->check(CLI::ExistingFile);
  seg_cmd->add_option("--support-mask", seg.support_mask, "support mask (PGM)")->required()->check(CLI::ExistingFile);
  seg_cmd->add_option("--query", seg.query, "query image (PGM)")->required()->check(CLI::ExistingFile);
  auto* feat = seg_cmd->add_option("--features", seg.features, "query features (DSPF) instead of the encoder");
  auto* sfeat = seg_cmd->add_option("--support-features", seg.support_features, "support features (DSPF)");
  feat->needs(sfeat);
  sfeat->needs(feat);
  seg_cmd->add_option("--params", seg.params, "checkpoint; omitted means untrained parameters");
  seg_cmd->add_option("--out", seg.out, "predicted mask (PGM)")->required();

  auto* ph_cmd = app.add_subcommand("phantoms", "write synthetic phantom slices and masks");
  std::uint64_t ph_seed = 1;
  std::size_t ph_count = 10;
  std::string ph_out;
  PhantomConfig pc;
  ph_cmd->add_option("--seed", ph_seed, "generator seed")->required();
  ph_cmd->add_option("--count", ph_count, "number of slices")->required();
  ph_cmd->add_option("--out", ph_out, "output directory")->required();
  ph_cmd->add_option("--height", pc.height, "slice height")->capture_default_str();
  ph_cmd->add_option("--width", pc.width, "slice width")->capture_default_str();
  ph_cmd->add_option("--num-classes", pc.num_classes, "class count")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return run_train(train_flags);
    if (*eval_cmd) return run_eval(eval_flags, eval_params, eval_out);
    if (*seg_cmd) return run_segment(seg_flags, seg);
    if (*ph_cmd) return run_phantoms(ph_seed, ph_count, ph_out, pc);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
