#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <queue>
#include <set>

#include "protoseg/protoseg.hpp"

namespace protoseg {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("protoseg_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(Phantom, DeterministicPerSeedAndId) {
  const Phantom a = generate_phantom(7, 3), b = generate_phantom(7, 3), c = generate_phantom(7, 4);
  EXPECT_EQ(a.image.pixels(), b.image.pixels());
  EXPECT_EQ(a.classes, b.classes);
  EXPECT_NE(a.image.pixels(), c.image.pixels());
}

TEST(Phantom, BlobsAreDisjointNonEmptyAndBounded) {
  const PhantomConfig cfg;
  const double total = static_cast<double>(cfg.height * cfg.width);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Phantom p = generate_phantom(seed, seed % 7, cfg);
    ASSERT_GE(p.classes.size(), 2u);
    ASSERT_LE(p.classes.size(), 4u);
    ASSERT_EQ(p.masks.size(), p.classes.size());
    EXPECT_TRUE(std::is_sorted(p.classes.begin(), p.classes.end()));
    EXPECT_EQ(std::set<int>(p.classes.begin(), p.classes.end()).size(), p.classes.size());
    std::vector<int> owner(cfg.height * cfg.width, 0);
    for (std::size_t k = 0; k < p.masks.size(); ++k) {
      EXPECT_GE(p.classes[k], 1);
      EXPECT_LE(p.classes[k], cfg.num_classes);
      double area = 0.0;
      for (std::size_t i = 0; i < owner.size(); ++i) {
        if (p.masks[k][i] <= 0.5) continue;
        area += 1.0;
        ++owner[i];
      }
      EXPECT_GE(area / total, cfg.min_area) << "seed " << seed;
      EXPECT_LE(area / total, cfg.max_area) << "seed " << seed;
    }
    for (int o : owner) ASSERT_LE(o, 1) << "overlapping blobs for seed " << seed;
    for (double v : p.image.pixels().values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Phantom, BadExtentsAreErrors) {
  PhantomConfig cfg;
  cfg.height = 30;
  EXPECT_THROW(generate_phantom(1, 0, cfg), std::invalid_argument);
  cfg.height = 64;
  cfg.width = 66;
  EXPECT_THROW(generate_phantom(1, 0, cfg), std::invalid_argument);
  cfg.width = 64;
  cfg.num_classes = 3;
  EXPECT_THROW(generate_phantom(1, 0, cfg), std::invalid_argument);
}

bool connected(const Superpixels& sp, std::size_t label) {
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < sp.labels.size(); ++i)
    if (sp.labels[i] == label) members.push_back(i);
  if (members.empty()) return false;
  std::vector<char> seen(sp.labels.size(), 0);
  std::queue<std::size_t> q;
  q.push(members[0]);
  seen[members[0]] = 1;
  std::size_t reached = 0;
  while (!q.empty()) {
    const std::size_t i = q.front();
    q.pop();
    ++reached;
    const std::size_t y = i / sp.width, x = i % sp.width;
    auto visit = [&](std::size_t j) {
      if (!seen[j] && sp.labels[j] == label) {
        seen[j] = 1;
        q.push(j);
      }
    };
    if (y > 0) visit(i - sp.width);
    if (y + 1 < sp.height) visit(i + sp.width);
    if (x > 0) visit(i - 1);
    if (x + 1 < sp.width) visit(i + 1);
  }
  return reached == members.size();
}

TEST(Slic, PartitionIntoConnectedSuperpixels) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Phantom p = generate_phantom(seed, 0);
    const Superpixels sp = slic(p.image);
    ASSERT_EQ(sp.labels.size(), p.image.height() * p.image.width());
    std::vector<std::size_t> used(sp.count, 0);
    for (std::size_t l : sp.labels) {
      ASSERT_LT(l, sp.count);
      ++used[l];
    }
    for (std::size_t l = 0; l < sp.count; ++l) {
      EXPECT_GT(used[l], 0u);
      EXPECT_TRUE(connected(sp, l)) << "superpixel " << l;
    }
  }
}

TEST(Slic, ConstantImageGivesGridCells) {
  const Superpixels sp = slic(Image(64, 64, 0.5));
  std::vector<std::size_t> area(sp.count, 0);
  for (std::size_t l : sp.labels) ++area[l];
  const double expected = 64.0 * 64.0 / 64.0;
  for (std::size_t a : area) EXPECT_NEAR(static_cast<double>(a), expected, 0.3 * expected);
}

TEST(Slic, PseudoLabelIsOneSuperpixel) {
  const Phantom p = generate_phantom(4, 1);
  const Superpixels sp = slic(p.image);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Mask m = pseudo_label(sp, seed);
    std::set<std::size_t> labels;
    std::size_t on = 0;
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i] > 0.5) {
        labels.insert(sp.labels[i]);
        ++on;
      }
    ASSERT_EQ(labels.size(), 1u);
    std::size_t full = 0;
    for (std::size_t l : sp.labels) full += l == *labels.begin();
    EXPECT_EQ(on, full);
    EXPECT_EQ(m, pseudo_label(sp, seed));
  }
}

TEST(Folds, Examples) {
  const auto folds = kfold_split(10, 5, 3);
  ASSERT_EQ(folds.size(), 5u);
  std::set<std::size_t> all;
  for (const auto& f : folds) {
    EXPECT_EQ(f.size(), 2u);
    EXPECT_TRUE(std::is_sorted(f.begin(), f.end()));
    all.insert(f.begin(), f.end());
  }
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(*all.rbegin(), 9u);
  EXPECT_EQ(folds, kfold_split(10, 5, 3));
  EXPECT_NE(folds, kfold_split(10, 5, 4));
  EXPECT_THROW(kfold_split(4, 5, 1), std::invalid_argument);
  EXPECT_THROW(kfold_split(4, 0, 1), std::invalid_argument);
}

TEST(Folds, NearEqualSizesForUnevenCounts) {
  const auto folds = kfold_split(13, 5, 9);
  std::size_t total = 0;
  for (std::size_t i = 0; i < folds.size(); ++i) {
    EXPECT_EQ(folds[i].size(), i < 3 ? 3u : 2u);
    total += folds[i].size();
  }
  EXPECT_EQ(total, 13u);
}

TEST(Episodes, SettingTwoNeverShowsTestClasses) {
  const Benchmark bench = make_benchmark(11, 60);
  SplitConfig split;
  split.setting = Setting::Two;
  split.seed = 11;
  const TrainingPool pool = training_pool(bench, split);
  ASSERT_FALSE(pool.slices.empty());
  const std::set<std::size_t> held(pool.test_slices.begin(), pool.test_slices.end());
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const SampledEpisode e = sample_episode(bench, pool, Supervision::Labels, rng);
    EXPECT_NE(e.spec.support_id, e.spec.query_id);
    for (std::size_t id : {e.spec.support_id, e.spec.query_id}) {
      EXPECT_EQ(held.count(id), 0u);
      for (int c : split.test_classes) ASSERT_FALSE(bench.slices[id].has_class(c)) << "slice " << id;
    }
    EXPECT_EQ(e.episode.support_mask, bench.slices[e.spec.support_id].mask_of(e.spec.class_id));
    EXPECT_EQ(e.episode.query_mask, bench.slices[e.spec.query_id].mask_of(e.spec.class_id));
  }
}

TEST(Episodes, SettingOneKeepsTestClassesButNotTestSlices) {
  const Benchmark bench = make_benchmark(12, 40);
  SplitConfig split;
  split.seed = 12;
  const TrainingPool pool = training_pool(bench, split);
  EXPECT_EQ(pool.slices.size() + pool.test_slices.size(), 40u);
  const std::set<std::size_t> held(pool.test_slices.begin(), pool.test_slices.end());
  Rng rng(6);
  bool saw_test_class = false;
  for (int i = 0; i < 300; ++i) {
    const SampledEpisode e = sample_episode(bench, pool, Supervision::Labels, rng);
    EXPECT_EQ(held.count(e.spec.support_id) + held.count(e.spec.query_id), 0u);
    saw_test_class = saw_test_class || e.spec.class_id == 1 || e.spec.class_id == 2;
  }
  EXPECT_TRUE(saw_test_class);
}

TEST(Episodes, PseudoEpisodesUseOneSliceAndKeepForeground) {
  const Benchmark bench = make_benchmark(13, 20);
  SplitConfig split;
  split.seed = 13;
  const TrainingPool pool = training_pool(bench, split);
  SuperpixelCache cache;
  Rng rng(7);
  for (int i = 0; i < 30; ++i) {
    const SampledEpisode e = sample_episode(bench, pool, Supervision::Pseudo, rng, &cache);
    EXPECT_EQ(e.spec.support_id, e.spec.query_id);
    EXPECT_EQ(e.spec.class_id, 0);
    EXPECT_GT(e.episode.support_mask.count_positive(), 0u);
    EXPECT_GT(e.episode.query_mask.count_positive(), 0u);
  }
}

TEST(Episodes, EmptyPoolErrorNamesTheClasses) {
  const Benchmark bench = make_benchmark(14, 20);
  SplitConfig split;
  split.setting = Setting::Two;
  split.test_classes = {1, 2, 3, 4, 5, 6};
  const TrainingPool pool = training_pool(bench, split);
  Rng rng(1);
  try {
    sample_episode(bench, pool, Supervision::Labels, rng);
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("fold 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("test classes 1,2,3,4,5,6"), std::string::npos) << msg;
  }
}

TEST(Config, DottedAndNestedKeysAgree) {
  const RunConfig a = config_from_json(json::parse(R"({"bcma": {"beta": 0.3}, "train": {"iterations": 7}})"));
  const RunConfig b = config_from_json(json::parse(R"({"bcma.beta": 0.3, "train.iterations": 7})"));
  EXPECT_EQ(a.pipeline.bcma.pattern.beta, 0.3);
  EXPECT_EQ(a.train.iterations, 7u);
  EXPECT_EQ(config_to_json(a), config_to_json(b));
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(a))), config_to_json(a));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_json(json::parse(R"({"bcma.gamma": 1})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"train": {"iterations": "many"}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"seg.temperature": -1})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"data.height": 40})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"data.test_classes": [9]})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"data.fold": 5})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse("[1, 2]")), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/protoseg.json"), ConfigError);
}

TEST(Checkpoint, RoundTripAndErrors) {
  const fs::path dir = temp_dir("ckpt");
  ParamStore p;
  init_params(p, {4, 3}, {});
  const std::string path = (dir / "a.bin").string();
  save_checkpoint(path, p);
  EXPECT_EQ(load_checkpoint(path), p);
  const std::string bytes = read_file(path);
  std::ofstream((dir / "short.bin").string(), std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  EXPECT_THROW(load_checkpoint((dir / "short.bin").string()), CheckpointError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::ofstream((dir / "magic.bin").string(), std::ios::binary) << bad;
  EXPECT_THROW(load_checkpoint((dir / "magic.bin").string()), CheckpointError);
  EXPECT_THROW(load_checkpoint((dir / "missing.bin").string()), CheckpointError);
  fs::remove_all(dir);
}

RunConfig tiny_run(const fs::path& out) {
  RunConfig c;
  c.encoder.channels = 8;
  c.data.count = 20;
  c.data.height = c.data.width = 32;
  c.train.iterations = 6;
  c.train.checkpoint_every = 2;
  c.train.out_dir = out.string();
  c.eval.max_queries = 2;
  return c;
}

TEST(Training, IdenticalConfigsGiveIdenticalArtifacts) {
  const fs::path a = temp_dir("train_a"), b = temp_dir("train_b");
  const RunConfig ca = tiny_run(a), cb = tiny_run(b);
  const Benchmark bench = make_benchmark(ca.data.seed, ca.data.count, ca.phantom());
  const TrainResult ra = train(ca, bench, initial_params(ca));
  const TrainResult rb = train(cb, bench, initial_params(cb));
  EXPECT_EQ(ra.params, rb.params);
  for (const char* f : {"loss.csv", "checkpoint_2.bin", "checkpoint_4.bin", "final.bin"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
  }
  EXPECT_FALSE(fs::exists(a / "checkpoint_6.bin"));
  EXPECT_EQ(load_checkpoint((a / "final.bin").string()), ra.params);
  ASSERT_EQ(ra.trace.size(), 6u);
  for (const auto& r : ra.trace) EXPECT_NEAR(r.loss, r.seg + r.reg, 1e-12);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Training, NonFiniteParametersAbortWithStep) {
  const fs::path dir = temp_dir("train_nan");
  const RunConfig c = tiny_run(dir);
  const Benchmark bench = make_benchmark(c.data.seed, c.data.count, c.phantom());
  ParamStore p = initial_params(c);
  p.get("encoder.conv2.weight")[3] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(c, bench, p);
    FAIL() << "expected divergence";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.step(), 1u);
    EXPECT_TRUE(e.last_checkpoint().empty());
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Training, DivergenceReportsLastCheckpoint) {
  const fs::path dir = temp_dir("train_div");
  RunConfig c = tiny_run(dir);
  c.train.learning_rate = 1e200;
  c.train.checkpoint_every = 1;
  const Benchmark bench = make_benchmark(c.data.seed, c.data.count, c.phantom());
  try {
    train(c, bench, initial_params(c));
    FAIL() << "expected divergence";
  } catch (const TrainingError& e) {
    EXPECT_GT(e.step(), 1u);
    EXPECT_EQ(e.last_checkpoint(), (dir / ("checkpoint_" + std::to_string(e.step() - 1) + ".bin")).string());
  }
  fs::remove_all(dir);
}

TEST(Evaluation, PureAndIndependentOfWorkerCount) {
  RunConfig c = tiny_run(fs::temp_directory_path());
  const Benchmark bench = make_benchmark(c.data.seed, c.data.count, c.phantom());
  const ParamStore p = initial_params(c);
  const ParamStore before = p;
  const EvalTable a = evaluate(p, c, bench, 1), b = evaluate(p, c, bench, 4);
  EXPECT_EQ(p, before);
  ASSERT_EQ(a.records.size(), b.records.size());
  ASSERT_FALSE(a.records.empty());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].episode, i);
    EXPECT_EQ(a.records[i].query_id, b.records[i].query_id);
    EXPECT_EQ(a.records[i].dice, b.records[i].dice);
    EXPECT_EQ(a.records[i].loss, b.records[i].loss);
  }
  EXPECT_EQ(a.mean, b.mean);
}

TEST(Evaluation, EpisodesUseLowestIdSupport) {
  const Benchmark bench = make_benchmark(15, 50);
  SplitConfig split;
  split.seed = 15;
  const TrainingPool pool = training_pool(bench, split);
  const auto eps = evaluation_episodes(bench, pool, 0);
  for (const auto& e : eps) {
    EXPECT_LT(e.support_id, e.query_id);
    for (std::size_t id : pool.test_slices)
      if (bench.slices[id].has_class(e.class_id)) {
        EXPECT_EQ(e.support_id, id);
        break;
      }
  }
  for (const auto& e : evaluation_episodes(bench, pool, 1)) EXPECT_TRUE(bench.slices[e.query_id].has_class(e.class_id));
}

// With every module ablated the prediction is plain masked-average
// prototypes against mean-pooled background cells.
TEST(Ablation, AllModulesOffMatchesHandBuiltBaseline) {
  RunConfig c = tiny_run(fs::temp_directory_path());
  c.pipeline.use_ran = c.pipeline.use_fspa = c.pipeline.use_bcma = false;
  const Benchmark bench = make_benchmark(c.data.seed, 6, c.phantom());
  const ParamStore p = initial_params(c);
  const Phantom& s = bench.slices[0];
  const Phantom& q = bench.slices[1];
  const Mask& sm = s.masks[0];
  Tape t1;
  const PredictionBundle got = predict(t1, s.image, sm, q.image, p, c.pipeline);
  Tape t2;
  FeatureMap fs = encode(t2, s.image, p, false), fq = encode(t2, q.image, p, false);
  const Mask fm = downsample_mask(sm, fs.height, fs.width);
  Var fg = foreground_prototype(fs, fm);
  Var bg = select_background(raw_background_prototypes(fs, c.pipeline.bcma.pool_window).q_n,
                             pooled_mask(fm, c.pipeline.bcma.pool_window), c.pipeline.bcma.bg_threshold);
  const PredictionBundle want = segment(fq, fg, bg, q.image.height(), q.image.width(), c.pipeline.seg);
  EXPECT_EQ(got.image_probs.value(), want.image_probs.value());
}

TEST(Ablation, EachFlagChangesOnlyItsModule) {
  RunConfig c = tiny_run(fs::temp_directory_path());
  const Benchmark bench = make_benchmark(c.data.seed, 6, c.phantom());
  const ParamStore p = initial_params(c);
  const Phantom& s = bench.slices[2];
  const Phantom& q = bench.slices[3];
  auto run = [&](const PipelineConfig& pc) {
    Tape t;
    return predict(t, s.image, s.masks[0], q.image, p, pc).image_probs.value();
  };
  const Tensor full = run(c.pipeline);
  for (int which = 0; which < 3; ++which) {
    PipelineConfig pc = c.pipeline;
    (which == 0 ? pc.use_ran : which == 1 ? pc.use_fspa : pc.use_bcma) = false;
    EXPECT_NE(run(pc), full) << "flag " << which;
  }
  // An identity bank with no adjustment is the same as switching BCMA off.
  PipelineConfig off = c.pipeline, ident = c.pipeline;
  off.use_bcma = false;
  ident.bcma.no_adjust = true;
  ParamStore pi = p;
  Tensor& a = pi.get(kAttentionParam);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) a.at(i, j) = i == j ? 1.0 : 0.0;
  Tape t1, t2;
  const Tensor x = predict(t1, s.image, s.masks[0], q.image, p, off).image_probs.value();
  const Tensor y = predict(t2, s.image, s.masks[0], q.image, pi, ident).image_probs.value();
  EXPECT_EQ(x, y);
}

TEST(Threads, WorkerCountReadsEnvironment) {
  ::setenv("PROTOSEG_THREADS", "3", 1);
  EXPECT_EQ(worker_count(), 3u);
  ::setenv("PROTOSEG_THREADS", "zero", 1);
  EXPECT_GE(worker_count(), 1u);
  ::unsetenv("PROTOSEG_THREADS");
}

TEST(Threads, ParallelForRethrows) {
  std::vector<int> out(50, 0);
  parallel_for(out.size(), 4, [&](std::size_t i) { out[i] = static_cast<int>(i); });
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], static_cast<int>(i));
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw std::runtime_error("x"); }),
               std::runtime_error);
}

}  // namespace
}  // namespace protoseg
