#pragma once

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "protoseg/config.hpp"
#include "protoseg/train.hpp"

namespace protoseg {

struct EvalRecord {
  std::size_t episode = 0;
  std::size_t fold = 0;
  int class_id = 0;
  std::size_t support_id = 0;
  std::size_t query_id = 0;
  double dice = 0.0;
  double loss = 0.0;
};

struct EvalTable {
  std::size_t fold = 0;
  std::vector<EvalRecord> records;  // in episode order
  std::map<int, double> per_class;  // mean Dice per evaluated class
  std::vector<int> skipped;         // test classes with fewer than two test slices
  double mean = 0.0;                // mean over per_class
};

// Worker count for evaluation: PROTOSEG_THREADS if set and positive, else
// the hardware concurrency.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("PROTOSEG_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
// written to slot i so the output order never depends on scheduling.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct EvalEpisode {
  int class_id;
  std::size_t support_id;
  std::size_t query_id;
};

// For each test class: the lowest-id test slice showing it is the support,
// every other test slice showing it is a query.
inline std::vector<EvalEpisode> evaluation_episodes(const Benchmark& bench, const TrainingPool& pool,
                                                    std::size_t max_queries, std::vector<int>* skipped = nullptr) {
  std::vector<EvalEpisode> out;
  for (int c : pool.test_classes) {
    std::vector<std::size_t> with;
    for (std::size_t id : pool.test_slices)
      if (bench.slices[id].has_class(c)) with.push_back(id);
    if (with.size() < 2) {
      if (skipped) skipped->push_back(c);
      continue;
    }
    std::size_t taken = 0;
    for (std::size_t i = 1; i < with.size() && (max_queries == 0 || taken < max_queries); ++i, ++taken)
      out.push_back({c, with[0], with[i]});
  }
  return out;
}

// Pure function of (params, config): Dice of every evaluation episode of the
// configured fold plus per-class and mean summaries.
inline EvalTable evaluate(const ParamStore& params, const RunConfig& cfg, const Benchmark& bench,
                          std::size_t workers = worker_count()) {
  validate(cfg);
  const TrainingPool pool = training_pool(bench, cfg.split());
  EvalTable table;
  table.fold = cfg.data.fold;
  const auto episodes = evaluation_episodes(bench, pool, cfg.eval.max_queries, &table.skipped);
  table.records.resize(episodes.size());
  parallel_for(episodes.size(), workers, [&](std::size_t i) {
    const EvalEpisode& e = episodes[i];
    const Phantom& s = bench.slices[e.support_id];
    const Phantom& q = bench.slices[e.query_id];
    Tape tape;
    PredictionBundle pred = predict(tape, s.image, s.mask_of(e.class_id), q.image, params, cfg.pipeline);
    const Mask& truth = q.mask_of(e.class_id);
    table.records[i] = {i, cfg.data.fold, e.class_id, e.support_id, e.query_id, dice(pred.mask, truth),
                        seg_loss(pred.image_probs, truth).value().item()};
  });
  std::map<int, std::pair<double, std::size_t>> acc;
  for (const auto& r : table.records) {
    acc[r.class_id].first += r.dice;
    ++acc[r.class_id].second;
  }
  for (const auto& [c, sn] : acc) table.per_class[c] = sn.first / static_cast<double>(sn.second);
  double s = 0.0;
  for (const auto& [c, d] : table.per_class) s += d;
  table.mean = table.per_class.empty() ? 0.0 : s / static_cast<double>(table.per_class.size());
  return table;
}

inline void write_eval_csv(const std::string& path, const EvalTable& t) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "episode,fold,class_id,support_id,query_id,dice,loss\n";
  for (const auto& r : t.records)
    out << r.episode << ',' << r.fold << ',' << r.class_id << ',' << r.support_id << ',' << r.query_id << ','
        << format_double(r.dice) << ',' << format_double(r.loss) << '\n';
  for (const auto& [c, d] : t.per_class) out << "class_mean," << t.fold << ',' << c << ",,," << format_double(d) << ",\n";
  out << "mean," << t.fold << ",,,," << format_double(t.mean) << ",\n";
}

inline void print_eval_table(std::ostream& os, const EvalTable& t) {
  char line[96];
  os << "fold " << t.fold << '\n';
  os << "  class   episodes   dice\n";
  for (const auto& [c, d] : t.per_class) {
    std::size_t n = 0;
    for (const auto& r : t.records) n += r.class_id == c;
    std::snprintf(line, sizeof line, "  %5d   %8zu   %6.2f\n", c, n, d);
    os << line;
  }
  for (int c : t.skipped) os << "  " << c << "   skipped (fewer than two test slices)\n";
  std::snprintf(line, sizeof line, "  mean               %6.2f\n", t.mean);
  os << line;
}

}  // namespace protoseg
