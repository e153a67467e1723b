#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/phantom.hpp"
#include "protoseg/pipeline.hpp"
#include "protoseg/rng.hpp"
#include "protoseg/slic.hpp"

namespace protoseg {

// Slices generated from one seed; slice i has id i.
struct Benchmark {
  std::uint64_t seed = 0;
  PhantomConfig config;
  std::vector<Phantom> slices;
};

inline Benchmark make_benchmark(std::uint64_t seed, std::size_t count, const PhantomConfig& cfg = {}) {
  Benchmark b{seed, cfg, {}};
  b.slices.reserve(count);
  for (std::size_t i = 0; i < count; ++i) b.slices.push_back(generate_phantom(seed, i, cfg));
  return b;
}

// Shuffle slice ids, then cut into k near-equal folds (the first n % k folds
// get one extra). Ids inside a fold are ascending.
inline std::vector<std::vector<std::size_t>> kfold_split(std::size_t slices, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw std::invalid_argument("kfold_split: k must be positive");
  if (k > slices)
    throw std::invalid_argument("kfold_split: " + std::to_string(k) + " folds requested for " + std::to_string(slices) +
                                " slices");
  std::vector<std::size_t> ids(slices);
  for (std::size_t i = 0; i < slices; ++i) ids[i] = i;
  Rng rng = Rng::derive(seed, 0xF01D);
  for (std::size_t i = slices; i > 1; --i) std::swap(ids[i - 1], ids[rng.index(i)]);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t at = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = slices / k + (f < slices % k ? 1 : 0);
    folds[f].assign(ids.begin() + static_cast<std::ptrdiff_t>(at), ids.begin() + static_cast<std::ptrdiff_t>(at + len));
    std::sort(folds[f].begin(), folds[f].end());
    at += len;
  }
  return folds;
}

enum class Setting { One = 1, Two = 2 };
enum class Supervision { Pseudo, Labels };

struct SplitConfig {
  Setting setting = Setting::One;
  std::size_t folds = 5;
  std::size_t fold = 0;
  std::uint64_t seed = 0;
  std::vector<int> test_classes = {1, 2};
};

// Slices available for training under a split. Setting-2 additionally drops
// every slice that shows any test class.
struct TrainingPool {
  std::vector<std::size_t> slices;
  std::vector<std::size_t> test_slices;
  std::vector<int> test_classes;
  Setting setting = Setting::One;
  std::size_t fold = 0;
};

inline TrainingPool training_pool(const Benchmark& bench, const SplitConfig& split) {
  const auto folds = kfold_split(bench.slices.size(), split.folds, split.seed);
  if (split.fold >= folds.size())
    throw std::invalid_argument("fold " + std::to_string(split.fold) + " out of range for " +
                                std::to_string(folds.size()) + " folds");
  TrainingPool pool;
  pool.test_slices = folds[split.fold];
  pool.test_classes = split.test_classes;
  pool.setting = split.setting;
  pool.fold = split.fold;
  const std::set<std::size_t> held(pool.test_slices.begin(), pool.test_slices.end());
  for (std::size_t i = 0; i < bench.slices.size(); ++i) {
    if (held.count(i)) continue;
    if (split.setting == Setting::Two) {
      const Phantom& ph = bench.slices[i];
      const bool shows_test = std::any_of(split.test_classes.begin(), split.test_classes.end(),
                                          [&](int c) { return ph.has_class(c); });
      if (shows_test) continue;
    }
    pool.slices.push_back(i);
  }
  return pool;
}

struct EpisodeSpec {
  std::size_t support_id = 0;
  std::size_t query_id = 0;
  int class_id = 0;  // 0 marks a superpixel pseudo-class
  Setting setting = Setting::One;
  std::size_t fold = 0;
};

struct SampledEpisode {
  EpisodeSpec spec;
  Episode episode;
};

namespace detail {

inline std::string class_list(const std::vector<int>& classes) {
  std::string s;
  for (int c : classes) s += (s.empty() ? "" : ",") + std::to_string(c);
  return s;
}

// Photometric jitter plus a translation with edge clamping, applied to the
// query copy of a pseudo-labelled slice.
inline void augment(Image& img, Mask& mask, Rng& rng) {
  const std::size_t h = img.height(), w = img.width();
  std::ptrdiff_t dy = 0, dx = 0;
  // Redraw shifts that would push the whole pseudo-foreground off the image.
  for (int attempt = 0; attempt < 16; ++attempt) {
    const auto ty = static_cast<std::ptrdiff_t>(rng.index(13)) - 6;
    const auto tx = static_cast<std::ptrdiff_t>(rng.index(13)) - 6;
    bool kept = false;
    for (std::size_t y = 0; y < h && !kept; ++y)
      for (std::size_t x = 0; x < w && !kept; ++x) {
        const auto ny = static_cast<std::ptrdiff_t>(y) + ty, nx = static_cast<std::ptrdiff_t>(x) + tx;
        kept = mask.at(y, x) > 0.0 && ny >= 0 && nx >= 0 && ny < static_cast<std::ptrdiff_t>(h) &&
               nx < static_cast<std::ptrdiff_t>(w);
      }
    if (kept) {
      dy = ty;
      dx = tx;
      break;
    }
  }
  const double gamma = rng.uniform(0.8, 1.25);
  const double gain = rng.uniform(0.9, 1.1);
  Image out(h, w);
  Mask m(h, w);
  auto clampi = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const auto sy = static_cast<std::ptrdiff_t>(y) - dy, sx = static_cast<std::ptrdiff_t>(x) - dx;
      const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx < static_cast<std::ptrdiff_t>(w);
      const double v = img.at(clampi(sy, h), clampi(sx, w));
      out.at(y, x) = std::clamp(gain * std::pow(v, gamma) + 0.02 * rng.normal(), 0.0, 1.0);
      m.at(y, x) = inside ? mask.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) : 0.0;
    }
  img = std::move(out);
  mask = std::move(m);
}

}  // namespace detail

// Pseudo-label masks depend only on (slice, draw); superpixels are computed
// once per slice.
class SuperpixelCache {
 public:
  explicit SuperpixelCache(SlicConfig cfg = {}) : cfg_(cfg) {}
  const Superpixels& get(const Benchmark& bench, std::size_t id) {
    auto it = cache_.find(id);
    if (it == cache_.end()) it = cache_.emplace(id, slic(bench.slices.at(id).image, cfg_)).first;
    return it->second;
  }

 private:
  SlicConfig cfg_;
  std::map<std::size_t, Superpixels> cache_;
};

// One 1-way 1-shot training episode. Labels mode pairs two distinct slices
// of a shared class; pseudo mode pairs a slice with an augmented copy of
// itself, a random superpixel standing in for the class.
inline SampledEpisode sample_episode(const Benchmark& bench, const TrainingPool& pool, Supervision mode, Rng& rng,
                                     SuperpixelCache* superpixels = nullptr) {
  if (pool.slices.empty()) {
    throw std::runtime_error("empty training pool for fold " + std::to_string(pool.fold) +
                             (pool.setting == Setting::Two ? " after removing slices with test classes " +
                                                                 detail::class_list(pool.test_classes)
                                                           : std::string()));
  }
  SampledEpisode out;
  out.spec.setting = pool.setting;
  out.spec.fold = pool.fold;
  if (mode == Supervision::Pseudo) {
    const std::size_t id = pool.slices[rng.index(pool.slices.size())];
    SuperpixelCache local;
    const Superpixels& sp = superpixels ? superpixels->get(bench, id) : local.get(bench, id);
    Mask mask = pseudo_label(sp, rng.next());
    Image query = bench.slices[id].image;
    Mask query_mask = mask;
    detail::augment(query, query_mask, rng);
    out.spec.support_id = out.spec.query_id = id;
    out.episode = {bench.slices[id].image, std::move(mask), std::move(query), std::move(query_mask), 0};
    return out;
  }

  std::set<int> available;
  for (std::size_t id : pool.slices)
    for (int c : bench.slices[id].classes) available.insert(c);
  if (pool.setting == Setting::Two)
    for (int c : pool.test_classes) available.erase(c);
  if (available.empty()) throw std::runtime_error("training pool has no labelled class");
  std::vector<int> classes(available.begin(), available.end());
  const int c = classes[rng.index(classes.size())];
  std::vector<std::size_t> with;
  for (std::size_t id : pool.slices)
    if (bench.slices[id].has_class(c)) with.push_back(id);
  if (with.empty()) throw std::runtime_error("no training slice contains class " + std::to_string(c));
  const std::size_t s = rng.index(with.size());
  std::size_t q = s;
  if (with.size() > 1) {
    q = rng.index(with.size() - 1);
    if (q >= s) ++q;
  }
  const Phantom& sp = bench.slices[with[s]];
  const Phantom& qp = bench.slices[with[q]];
  out.spec.support_id = with[s];
  out.spec.query_id = with[q];
  out.spec.class_id = c;
  out.episode = {sp.image, sp.mask_of(c), qp.image, qp.mask_of(c), c};
  return out;
}

}  // namespace protoseg
