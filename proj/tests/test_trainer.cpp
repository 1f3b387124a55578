#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "amdim/eval.hpp"
#include "amdim/trainer.hpp"

namespace fs = std::filesystem;
using amdim::Checkpoint;
using amdim::ConfigError;
using amdim::IngestError;
using amdim::MetricsRecord;
using amdim::RunConfig;
using amdim::Tensor;
using amdim::TrainAbort;
using amdim::Trainer;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("amdim_trainer_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter_++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int counter_;
};
int TempDir::counter_ = 0;

RunConfig desk_config(const std::string& out_dir, std::uint64_t seed) {
  RunConfig cfg;
  cfg.dataset.path = "64x32@7";
  cfg.dataset.format = "synthetic";
  cfg.encoder.ndf = 8;
  cfg.encoder.nrkhs = 16;
  cfg.encoder.ndepth = 1;
  cfg.encoder.input_size = 32;
  cfg.encoder.use_batch_norm = false;
  cfg.encoder.seed = seed;
  cfg.augment.output_size = 32;
  cfg.nce.pairs = {{1, 7, 1.0}};
  cfg.optimizer.lr = 2e-3;
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.seed = seed;
  cfg.out_dir = out_dir;
  cfg.precision = "f64";
  return cfg;
}

}  // namespace

TEST_CASE("run config: defaults, JSON round trip, rejection") {
  RunConfig defaults = amdim::parse_run_config(R"({"dataset": {"path": "64x32@7"}})");
  CHECK(defaults.batch_size == 128);
  CHECK(defaults.nce.pairs.size() == 3);
  CHECK(defaults.encoder.ndf == 64);
  CHECK_FALSE(defaults.mixture_enabled);

  const std::string text = R"({
    "dataset": {"path": "256x32@3", "format": "synthetic", "limit": 100},
    "encoder": {"ndf": 16, "nrkhs": 32, "ndepth": 2, "input_size": 32, "batch_norm": false, "seed": 9},
    "augment": {"crop_lo": 0.5, "flip_prob": 0.0, "output_size": 32},
    "nce": {"lambda": 0.01, "pairs": [{"n": 1, "m": 7, "weight": 2.0}], "symmetrize": false},
    "mixture": {"enabled": true, "k": 3, "tau": 2.5},
    "optimizer": {"lr": 1e-3, "warmup_frac": 0.1},
    "batch_size": 16, "epochs": 4, "seed": 11, "out_dir": "runs/x", "precision": "f64"
  })";
  RunConfig cfg = amdim::parse_run_config(text);
  CHECK(cfg.dataset.limit == 100);
  CHECK(cfg.encoder.ndf == 16);
  CHECK(cfg.augment.crop_lo == 0.5);
  CHECK(cfg.nce.pairs.size() == 1);
  CHECK(cfg.nce.pairs[0].weight == 2.0);
  CHECK(cfg.mixture_enabled);
  CHECK(cfg.mixture.k == 3);
  CHECK(cfg.optimizer.warmup_frac == 0.1);
  CHECK(cfg.precision == "f64");

  // serialized echo parses back to the same config
  RunConfig back = amdim::parse_run_config(amdim::run_config_json(cfg));
  CHECK(amdim::run_config_json(back) == amdim::run_config_json(cfg));

  CHECK_THROWS_AS(amdim::parse_run_config("{nope"), ConfigError);
  CHECK_THROWS_AS(amdim::parse_run_config(R"({"dataset": {"path": "x", "formt": "synthetic"}})"),
                  ConfigError);
  CHECK_THROWS_AS(amdim::parse_run_config(R"({"dataset": {"path": "x"}, "batch_sizes": 4})"),
                  ConfigError);
  CHECK_THROWS_AS(amdim::parse_run_config(R"({"dataset": {"path": ""}})"), ConfigError);
  CHECK_THROWS_AS(amdim::load_run_config("/nonexistent/amdim.json"), ConfigError);
}

TEST_CASE("run config: n_a = 1 rejected at validation") {
  CHECK_THROWS_AS(amdim::parse_run_config(R"({"dataset": {"path": "64x32@7"}, "batch_size": 1})"),
                  ConfigError);
  RunConfig cfg;
  cfg.dataset.path = "64x32@7";
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("checkpoint container: bit-exact round trip and damage reporting") {
  TempDir dir;
  const std::string path = (dir.path / "test.amdc").string();

  Checkpoint ckpt;
  ckpt.config_json = "{\"hello\": 1}";
  std::vector<double> a = {1.0, -2.5, 3.25e-300, 0.1};
  std::vector<float> b = {0.5f, -0.25f};
  ckpt.add<double>("enc.w", {2, 2}, a);
  ckpt.add<float>("enc.b", {2}, b);
  amdim::save_checkpoint(path, ckpt);

  Checkpoint in = amdim::load_checkpoint(path);
  CHECK(in.version == amdim::kCheckpointVersion);
  CHECK(in.config_json == ckpt.config_json);
  CHECK(in.tensors.size() == 2);
  CHECK(in.find("enc.w")->shape == amdim::Shape{2, 2});
  CHECK(in.find("enc.w")->values<double>() == a);
  CHECK(in.find("enc.b")->values<float>() == b);
  CHECK(in.find("missing") == nullptr);
  CHECK_THROWS_AS(in.find("enc.w")->values<float>(), std::invalid_argument);

  // truncate mid-tensor: error must carry the byte offset
  const auto full_size = fs::file_size(path);
  fs::resize_file(path, full_size - 10);
  try {
    amdim::load_checkpoint(path);
    FAIL("expected IngestError");
  } catch (const IngestError& e) {
    CHECK(e.offset() > 0);
    CHECK(e.offset() <= static_cast<std::int64_t>(full_size));
  }

  std::ofstream(path, std::ios::binary) << "NOPE garbage";
  CHECK_THROWS_AS(amdim::load_checkpoint(path), IngestError);
}

TEST_CASE("training smoke: loss decreases over 50 steps, 3 seeds") {
  double first_acc = 0.0, last_acc = 0.0;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    TempDir dir;
    RunConfig cfg = desk_config(dir.path.string(), seed);
    cfg.epochs = 7;  // 8 steps per epoch -> 56 steps
    auto out = amdim::run_training<double>(cfg);
    REQUIRE(out.metrics.size() == 56);
    first_acc += out.metrics.front().total;
    last_acc += out.metrics[49].total;
    for (const auto& rec : out.metrics) {
      CHECK(std::isfinite(rec.total));
      CHECK(rec.pairs.size() == 1);
      CHECK(rec.pairs[0].mi_bound <= std::log(static_cast<double>(rec.pairs[0].k)) + 1e-12);
    }
    CHECK(fs::exists(out.checkpoint_path));
    // metrics stream on disk parses back to the in-memory records
    auto disk = amdim::read_metrics(out.metrics_path);
    REQUIRE(disk.size() == out.metrics.size());
    for (size_t i = 0; i < disk.size(); ++i) CHECK(disk[i].same_values(out.metrics[i]));
    const std::string summary = amdim::summarize_metrics(disk);
    CHECK(summary.find("1-to-7") != std::string::npos);
  }
  CHECK(last_acc / 3.0 < first_acc / 3.0);
}

TEST_CASE("linear warmup ramps the learning rate") {
  TempDir dir;
  RunConfig cfg = desk_config(dir.path.string(), 4);
  cfg.optimizer.warmup_frac = 0.5;  // 16 total steps -> 8 warmup steps
  cfg.epochs = 2;
  auto out = amdim::run_training<double>(cfg);
  REQUIRE(out.metrics.size() == 16);
  for (int t = 0; t < 8; ++t)
    CHECK(out.metrics[static_cast<size_t>(t)].lr ==
          doctest::Approx(cfg.optimizer.lr * (t + 1) / 8.0).epsilon(1e-12));
  for (int t = 8; t < 16; ++t) CHECK(out.metrics[static_cast<size_t>(t)].lr == cfg.optimizer.lr);
}

TEST_CASE("determinism: identical config and seed reproduce the stream exactly") {
  TempDir dir1, dir2;
  RunConfig cfg1 = desk_config(dir1.path.string(), 5);
  RunConfig cfg2 = desk_config(dir2.path.string(), 5);
  auto a = amdim::run_training<double>(cfg1);
  auto b = amdim::run_training<double>(cfg2);
  REQUIRE(a.metrics.size() == b.metrics.size());
  for (size_t i = 0; i < a.metrics.size(); ++i) CHECK(a.metrics[i].same_values(b.metrics[i]));
}

TEST_CASE("resume from checkpoint reproduces the uninterrupted run") {
  TempDir full_dir, part_dir;
  RunConfig full_cfg = desk_config(full_dir.path.string(), 6);
  auto full = amdim::run_training<double>(full_cfg);  // 2 epochs = 16 steps
  REQUIRE(full.metrics.size() == 16);

  RunConfig head_cfg = desk_config(part_dir.path.string(), 6);
  head_cfg.epochs = 1;
  auto head = amdim::run_training<double>(head_cfg);
  REQUIRE(head.metrics.size() == 8);
  for (size_t i = 0; i < 8; ++i) CHECK(head.metrics[i].same_values(full.metrics[i]));

  RunConfig tail_cfg = desk_config(part_dir.path.string(), 6);
  auto tail = amdim::run_training<double>(tail_cfg, head.checkpoint_path);
  REQUIRE(tail.metrics.size() == 8);
  for (size_t i = 0; i < 8; ++i) CHECK(tail.metrics[i].same_values(full.metrics[i + 8]));

  // the final parameters are bit-identical to the uninterrupted run's
  Checkpoint ca = amdim::load_checkpoint(full.checkpoint_path);
  Checkpoint cb = amdim::load_checkpoint(tail.checkpoint_path);
  REQUIRE(ca.tensors.size() == cb.tensors.size());
  for (const auto& t : ca.tensors) {
    const auto* o = cb.find(t.name);
    REQUIRE(o != nullptr);
    CHECK(o->bytes == t.bytes);
  }

  // on-disk stream accumulates across the resume into the same record set
  auto disk = amdim::read_metrics(tail.metrics_path);
  REQUIRE(disk.size() == 16);
  for (size_t i = 0; i < 16; ++i) CHECK(disk[i].same_values(full.metrics[i]));
}

TEST_CASE("checkpoint round trip preserves probe accuracy exactly") {
  TempDir dir;
  RunConfig cfg = desk_config(dir.path.string(), 7);
  auto out = amdim::run_training<double>(cfg);

  amdim::Dataset ds = amdim::load_dataset(cfg.dataset.path, cfg.dataset.format);
  Trainer<double> trained(cfg);
  trained.load(amdim::load_checkpoint(out.checkpoint_path));
  auto table = amdim::extract_features(trained.enc, ds);
  amdim::ProbeConfig pc;
  pc.epochs = 50;
  auto before = amdim::train_probe(table, ds.labels, ds.num_classes, pc);

  // save again, reload into a fresh trainer, re-extract: bit-identical
  const std::string second = (dir.path / "second.amdc").string();
  trained.save(second);
  Trainer<double> reloaded(cfg);
  reloaded.load(amdim::load_checkpoint(second));
  auto table2 = amdim::extract_features(reloaded.enc, ds);
  CHECK(table2.data == table.data);
  auto after = amdim::train_probe(table2, ds.labels, ds.num_classes, pc);
  CHECK(after.accuracy == before.accuracy);
  CHECK(after.train_accuracy == before.train_accuracy);
}

TEST_CASE("mixture training path emits entropy and usage diagnostics") {
  TempDir dir;
  RunConfig cfg = desk_config(dir.path.string(), 8);
  cfg.mixture_enabled = true;
  cfg.mixture.k = 2;
  cfg.epochs = 1;
  auto out = amdim::run_training<double>(cfg);
  REQUIRE(out.metrics.size() == 8);
  for (const auto& rec : out.metrics) {
    CHECK(rec.entropy >= 0.0);
    CHECK(rec.entropy <= std::log(2.0) + 1e-12);
  }
  // checkpoint carries the mixture head
  Checkpoint ckpt = amdim::load_checkpoint(out.checkpoint_path);
  CHECK(ckpt.find("mixture.w1") != nullptr);
}

TEST_CASE("non-finite loss aborts with batch ids and score statistics") {
  TempDir dir;
  RunConfig cfg = desk_config(dir.path.string(), 9);
  Trainer<double> trainer(cfg);
  trainer.params[0].data()[0] = std::numeric_limits<double>::quiet_NaN();
  auto views = trainer.views_for(0);
  try {
    trainer.train_step(views);
    FAIL("expected TrainAbort");
  } catch (const TrainAbort& e) {
    const std::string msg = e.what();
    CHECK(msg.find("batch ids") != std::string::npos);
    CHECK(msg.find("phi1") != std::string::npos);
    for (auto id : views.first.ids)
      CHECK(msg.find(" " + std::to_string(id)) != std::string::npos);
  }
}

TEST_CASE("trainer rejects datasets smaller than one batch") {
  TempDir dir;
  RunConfig cfg = desk_config(dir.path.string(), 10);
  cfg.dataset.path = "4x32@1";
  CHECK_THROWS_AS((void)Trainer<double>{cfg}, ConfigError);
}
