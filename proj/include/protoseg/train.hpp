#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "protoseg/checkpoint.hpp"
#include "protoseg/config.hpp"

namespace protoseg {

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double seg = 0.0;
  double reg = 0.0;
  EpisodeSpec spec;
};

struct TrainResult {
  ParamStore params;
  std::vector<StepRecord> trace;
  std::string last_checkpoint;  // empty when nothing was written
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t step, std::string last_checkpoint, const std::string& why)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + why +
                           (last_checkpoint.empty() ? "; no checkpoint written yet"
                                                    : "; last good checkpoint " + last_checkpoint)),
        step_(step),
        last_checkpoint_(std::move(last_checkpoint)) {}
  std::size_t step() const { return step_; }
  const std::string& last_checkpoint() const { return last_checkpoint_; }

 private:
  std::size_t step_;
  std::string last_checkpoint_;
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_loss_trace(const std::string& path, const std::vector<StepRecord>& trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "step,loss,seg_loss,reg_loss,support_id,query_id,class_id\n";
  for (const auto& r : trace)
    out << r.step << ',' << format_double(r.loss) << ',' << format_double(r.seg) << ',' << format_double(r.reg) << ','
        << r.spec.support_id << ',' << r.spec.query_id << ',' << r.spec.class_id << '\n';
}

// Mean of the trace losses in (end - window, end], 1-based steps.
inline double smoothed_loss(const std::vector<StepRecord>& trace, std::size_t end, std::size_t window = 100) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : trace)
    if (r.step <= end && r.step + window > end) {
      s += r.loss;
      ++n;
    }
  if (n == 0) throw std::invalid_argument("smoothed_loss: empty window");
  return s / static_cast<double>(n);
}

struct TrainOptions {
  bool write_files = true;
  std::function<void(const StepRecord&)> on_step;
};

// SGD with heavy-ball momentum, one episode per step. Step t draws its
// episode from a stream derived from (train.seed, t), so the trace depends
// only on the config.
inline TrainResult train(const RunConfig& cfg, const Benchmark& bench, ParamStore params,
                         const TrainOptions& opts = {}) {
  validate(cfg);
  const TrainingPool pool = training_pool(bench, cfg.split());
  SuperpixelCache superpixels;
  std::map<std::string, Tensor> velocity;
  for (const auto& [name, t] : params.all()) velocity[name] = Tensor(t.shape(), 0.0);

  TrainResult result;
  const std::filesystem::path dir(cfg.train.out_dir);
  if (opts.write_files) std::filesystem::create_directories(dir);
  auto checkpoint = [&](const std::string& file) {
    if (!opts.write_files) return;
    const std::string path = (dir / file).string();
    save_checkpoint(path, params);
    write_loss_trace((dir / "loss.csv").string(), result.trace);
    result.last_checkpoint = path;
  };

  for (std::size_t step = 1; step <= cfg.train.iterations; ++step) {
    Rng rng = Rng::derive(cfg.train.seed, step);
    SampledEpisode sampled = sample_episode(bench, pool, cfg.train.supervision, rng, &superpixels);
    StepRecord rec;
    rec.step = step;
    rec.spec = sampled.spec;
    Gradients grads;
    try {
      Tape tape;
      EpisodeChoices choices;
      EpisodeLoss loss = run_episode(tape, sampled.episode, params, cfg.pipeline, choices);
      rec.loss = loss.total.value().item();
      rec.seg = loss.seg.value().item();
      rec.reg = loss.reg.value().item();
      grads = tape.backward(loss.total, params);
    } catch (const NumericError& e) {
      throw TrainingError(step, result.last_checkpoint, e.what());
    }
    for (const auto& [name, g] : grads.by_name)
      if (!g.all_finite()) throw TrainingError(step, result.last_checkpoint, "non-finite gradient for " + name);

    for (auto& [name, g] : grads.by_name) {
      Tensor& p = params.get(name);
      Tensor& v = velocity.at(name);
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = cfg.train.momentum * v[i] + g[i];
        p[i] -= cfg.train.learning_rate * v[i];
      }
    }
    result.trace.push_back(rec);
    if (opts.on_step) opts.on_step(rec);
    if (cfg.train.checkpoint_every && step % cfg.train.checkpoint_every == 0 && step != cfg.train.iterations)
      checkpoint("checkpoint_" + std::to_string(step) + ".bin");
  }
  checkpoint("final.bin");
  result.params = std::move(params);
  return result;
}

inline ParamStore initial_params(const RunConfig& cfg) {
  ParamStore store;
  init_params(store, cfg.encoder, cfg.pipeline.bcma);
  return store;
}

}  // namespace protoseg
