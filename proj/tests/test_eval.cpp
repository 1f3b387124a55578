#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "amdim/eval.hpp"

namespace fs = std::filesystem;
using amdim::CounterRng;
using amdim::Dataset;
using amdim::Encoder;
using amdim::EncoderConfig;
using amdim::FeatureTable;
using amdim::ImageBatch;
using amdim::MixtureConfig;
using amdim::MixtureHead;
using amdim::ProbeConfig;
using amdim::Tensor;

namespace {

EncoderConfig tiny_encoder_config() {
  EncoderConfig cfg;
  cfg.ndf = 8;
  cfg.nrkhs = 16;
  cfg.ndepth = 1;
  cfg.input_size = 32;
  cfg.use_batch_norm = false;
  cfg.seed = 5;
  return cfg;
}

// random features with a per-class mean offset of the given strength
FeatureTable<double> synthetic_table(std::int64_t n, std::int64_t dim, int classes,
                                     double strength, std::vector<int>* labels,
                                     std::uint64_t seed) {
  FeatureTable<double> table;
  table.dim = dim;
  CounterRng rng(seed, 0xfea7ULL);
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % classes);
    table.ids.push_back(i);
    labels->push_back(y);
    for (std::int64_t j = 0; j < dim; ++j) {
      double v = rng.uniform(-1.0, 1.0);
      if (j == y) v += strength;
      table.data.push_back(v);
    }
  }
  return table;
}

}  // namespace

TEST_CASE("extract_features: deterministic rows of dimension C1") {
  Dataset ds = amdim::make_synthetic(10, 32, 3);
  // duplicate image 0 at the end so two rows share pixels exactly
  std::vector<std::int64_t> idx = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0};
  ds.images = ds.batch(idx);
  ds.labels.push_back(ds.labels[0]);

  Encoder<double> enc(tiny_encoder_config());
  auto table = amdim::extract_features(enc, ds, 4);
  CHECK(table.size() == 11);
  CHECK(table.dim == 4 * 8);
  for (double v : table.data) CHECK(std::isfinite(v));
  for (std::int64_t j = 0; j < table.dim; ++j) CHECK(table.row(10)[j] == table.row(0)[j]);

  auto again = amdim::extract_features(enc, ds, 7);
  CHECK(again.data == table.data);
}

TEST_CASE("extract_features: resizes when dataset and encoder sizes differ") {
  Dataset ds = amdim::make_synthetic(6, 64, 4);
  Encoder<double> enc(tiny_encoder_config());
  auto table = amdim::extract_features(enc, ds);
  CHECK(table.size() == 6);
  for (double v : table.data) CHECK(std::isfinite(v));
}

TEST_CASE("train_probe: separable features reach accuracy 1.0") {
  std::vector<int> labels;
  auto table = synthetic_table(300, 8, 2, 6.0, &labels, 11);
  ProbeConfig cfg;
  cfg.epochs = 500;
  auto res = amdim::train_probe(table, labels, 2, cfg);
  CHECK(res.accuracy == 1.0);
  CHECK(res.train_accuracy == 1.0);

  cfg.kind = "mlp";
  cfg.hidden = 32;
  auto mlp = amdim::train_probe(table, labels, 2, cfg);
  CHECK(mlp.accuracy == 1.0);
}

TEST_CASE("train_probe: label-independent features score chance level") {
  std::vector<int> labels;
  auto table = synthetic_table(4000, 16, 2, 0.0, &labels, 12);
  // shuffle labels so any residual feature/label alignment is broken
  CounterRng rng(99);
  for (size_t i = labels.size(); i > 1; --i)
    std::swap(labels[i - 1], labels[rng.next_below(i)]);
  ProbeConfig cfg;
  auto res = amdim::train_probe(table, labels, 2, cfg);
  CHECK(res.accuracy > 0.5 - 0.06);
  CHECK(res.accuracy < 0.5 + 0.06);
}

TEST_CASE("train_probe: rejects single-class labels and bad inputs") {
  std::vector<int> labels;
  auto table = synthetic_table(100, 4, 2, 1.0, &labels, 13);
  std::vector<int> ones(labels.size(), 1);
  CHECK_THROWS_AS(amdim::train_probe(table, ones, 2, ProbeConfig{}), std::invalid_argument);
  ProbeConfig bad;
  bad.kind = "transformer";
  CHECK_THROWS_AS(amdim::train_probe(table, labels, 2, bad), amdim::ConfigError);
}

TEST_CASE("knn_retrieve: duplicate first, oracle ranking, invariances") {
  std::vector<int> labels;
  auto table = synthetic_table(40, 6, 2, 0.5, &labels, 21);
  // make row 7 a duplicate of row 0
  for (std::int64_t j = 0; j < table.dim; ++j)
    table.data[static_cast<size_t>(7 * table.dim + j)] = table.row(0)[j];

  auto res = amdim::knn_retrieve(table, 0, 5);
  CHECK(res.query_id == 0);
  CHECK(res.ids.size() == 5);
  CHECK(res.ids[0] == 7);
  CHECK(res.sims[0] == doctest::Approx(1.0).epsilon(1e-12));
  for (size_t i = 0; i + 1 < res.sims.size(); ++i) CHECK(res.sims[i] >= res.sims[i + 1]);
  for (double s : res.sims) CHECK((s >= -1.0 - 1e-12 && s <= 1.0 + 1e-12));

  // brute-force all-pairs cosine oracle
  auto cosine = [&](std::int64_t a, std::int64_t b) {
    double dot = 0, na = 0, nb = 0;
    for (std::int64_t j = 0; j < table.dim; ++j) {
      dot += table.row(a)[j] * table.row(b)[j];
      na += table.row(a)[j] * table.row(a)[j];
      nb += table.row(b)[j] * table.row(b)[j];
    }
    return dot / std::sqrt(na * nb);
  };
  std::vector<std::pair<double, std::int64_t>> oracle;
  for (std::int64_t i = 1; i < 40; ++i)
    if (i != 0) oracle.emplace_back(cosine(0, i), i);
  std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  auto full = amdim::knn_retrieve(table, 0, 39);
  for (size_t i = 0; i < full.ids.size(); ++i) {
    CHECK(full.ids[i] == oracle[i].second);
    CHECK(full.sims[i] == doctest::Approx(oracle[i].first).epsilon(1e-12));
  }

  // cosine ranking is invariant to positive rescaling of every vector
  auto scaled = table;
  for (auto& v : scaled.data) v *= 3.25;
  auto res2 = amdim::knn_retrieve(scaled, 0, 5);
  CHECK(res2.ids == res.ids);

  CHECK(amdim::knn_retrieve(table, 3, 0).ids.empty());
  CHECK_THROWS_AS(amdim::knn_retrieve(table, 777, 3), std::invalid_argument);
  CHECK_THROWS_AS(amdim::knn_retrieve(table, 0, 40), std::invalid_argument);
}

TEST_CASE("retrieval heatmaps match a direct phi1.phi7 recompute") {
  Dataset ds = amdim::make_synthetic(8, 32, 6);
  Encoder<double> enc(tiny_encoder_config());
  auto table = amdim::extract_features(enc, ds);
  auto res = amdim::knn_retrieve(enc, ds, table, 2, 3);
  CHECK(res.heatmaps.size() == 3);
  for (const auto& h : res.heatmaps) CHECK(h.size() == 49);

  // oracle: encode query and first neighbor separately, dot by hand
  auto fq = enc.encode(ds.batch({2}), false);
  auto fn = enc.encode(ds.batch({res.ids[0]}), false);
  const std::int64_t K = fq.phi1.dim(1);
  for (std::int64_t p = 0; p < 49; ++p) {
    double dot = 0;
    for (std::int64_t j = 0; j < K; ++j)
      dot += fq.phi1.data()[static_cast<size_t>(j)] *
             fn.phi7.data()[static_cast<size_t>(j * 49 + p)];
    CHECK(res.heatmaps[0][static_cast<size_t>(p)] == doctest::Approx(dot).epsilon(1e-9));
  }
}

TEST_CASE("mixture_segmentation_map: k=1 uniform, rows on the simplex") {
  Dataset ds = amdim::make_synthetic(2, 32, 9);
  Encoder<double> enc(tiny_encoder_config());
  ImageBatch x1 = ds.batch({0}), x2 = ds.batch({1});

  MixtureConfig mc1;
  mc1.k = 1;
  MixtureHead<double> head1(mc1, 16);
  auto q1 = amdim::mixture_segmentation_map(enc, head1, x1, x2);
  CHECK(q1.shape() == amdim::Shape{49, 1});
  for (double v : q1.data()) CHECK(v == 1.0);

  MixtureConfig mc3;
  mc3.k = 3;
  MixtureHead<double> head3(mc3, 16, /*zero_init=*/false);
  auto q3 = amdim::mixture_segmentation_map(enc, head3, x1, x2);
  CHECK(q3.shape() == amdim::Shape{49, 3});
  for (std::int64_t p = 0; p < 49; ++p) {
    double s = 0;
    for (std::int64_t j = 0; j < 3; ++j) s += q3.data()[static_cast<size_t>(p * 3 + j)];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("mixture segmentation: half-field image splits spatially") {
  // image 0: red left half, blue right half; image 1: uniform blend of both.
  // The blend supplies negatives near the sum direction, so one component
  // covering both halves scores worse than two spatial specialists.
  ImageBatch imgs = ImageBatch::blank(2, 32);
  const float left[3] = {0.9f, 0.15f, 0.1f}, right[3] = {0.1f, 0.2f, 0.9f};
  for (int ch = 0; ch < 3; ++ch)
    for (std::int64_t y = 0; y < 32; ++y)
      for (std::int64_t x = 0; x < 32; ++x) {
        imgs.data[static_cast<size_t>(((0 * 3 + ch) * 32 + y) * 32 + x)] =
            x < 16 ? left[ch] : right[ch];
        imgs.data[static_cast<size_t>(((1 * 3 + ch) * 32 + y) * 32 + x)] =
            0.5f * (left[ch] + right[ch]);
      }
  imgs.ids = {0, 1};

  Encoder<double> enc(tiny_encoder_config());
  auto fs = enc.encode(imgs, false);
  amdim::FeatureSet<double> frozen;
  frozen.phi1 = fs.phi1.detach();
  frozen.phi7 = fs.phi7.detach();

  amdim::NCEConfig ncfg;
  ncfg.pairs = {{1, 7, 1.0}};
  ncfg.symmetrize = false;
  ncfg.lambda = 1e-3;
  ncfg.clip = 50;
  MixtureConfig mc;
  mc.k = 2;
  mc.tau = 1.0;
  mc.seed = 2;
  MixtureHead<double> head(mc, 16, /*zero_init=*/false);
  std::vector<Tensor<double>> params = {head.w1, head.b1, head.w2, head.b2};
  for (auto& p : params) p.set_requires_grad();
  amdim::AdamState<double> st;
  st.init_for(params);
  const int steps = 600;
  for (int it = 0; it < steps; ++it) {
    head.tau = 1.0 + 29.0 * it / (steps - 1);
    auto loss = amdim::mixture_nce_objective(frozen, frozen, head, ncfg);
    for (auto& p : params) p.zero_grad();
    backward(loss.total);
    adam_step(params, st, amdim::AdamConfig{1e-2, 0.9, 0.999, 1e-8});
  }

  ImageBatch x0;
  x0.b = 1;
  x0.h = x0.w = 32;
  x0.data.assign(imgs.data.begin(), imgs.data.begin() + 3 * 32 * 32);
  x0.ids = {0};
  auto q = amdim::mixture_segmentation_map(enc, head, x0, x0);
  // columns 0..2 see only the left color (RF width 8, jump 4), columns 4..6
  // only the right; the center column straddles the boundary and is skipped
  int left_votes = 0, right_votes = 0;
  for (int p = 0; p < 49; ++p) {
    const int col = p % 7;
    const int comp = q.data()[static_cast<size_t>(2 * p)] >
                             q.data()[static_cast<size_t>(2 * p + 1)]
                         ? 0
                         : 1;
    if (col < 3) left_votes += comp == 0;
    if (col > 3) right_votes += comp == 0;
  }
  const int lmaj = left_votes >= 11 ? 0 : 1, rmaj = right_votes >= 11 ? 0 : 1;
  CHECK(lmaj != rmaj);
  const int match = (lmaj == 0 ? left_votes : 21 - left_votes) +
                    (rmaj == 0 ? right_votes : 21 - right_votes);
  CHECK(static_cast<double>(match) / 42.0 >= 0.8);
}

TEST_CASE("synthetic MI validation: analytic value, brackets, monotonicity") {
  CHECK(amdim::analytic_gaussian_mi(1, 0.9) == doctest::Approx(0.8304).epsilon(1e-3));
  CHECK_THROWS_AS(amdim::synthetic_mi_validation(1, 1.0, 128, 10), std::invalid_argument);
  CHECK_THROWS_AS(amdim::synthetic_mi_validation(0, 0.5, 128, 10), std::invalid_argument);

  auto strong = amdim::synthetic_mi_validation(1, 0.9, 128, 2000);
  CHECK(strong.analytic == doctest::Approx(0.8304).epsilon(1e-3));
  CHECK(strong.estimate >= 0.55);
  CHECK(strong.estimate <= strong.analytic + 0.05);
  CHECK(strong.estimate <= std::log(128.0));
  CHECK(strong.bound_ok);

  auto null = amdim::synthetic_mi_validation(1, 0.0, 128, 2000);
  CHECK(std::abs(null.estimate) <= 0.05);

  auto weak = amdim::synthetic_mi_validation(1, 0.3, 128, 2000);
  auto mid = amdim::synthetic_mi_validation(1, 0.6, 128, 2000);
  CHECK(weak.estimate < mid.estimate);
  CHECK(mid.estimate < strong.estimate);
}

TEST_CASE("heatmap image and grid files") {
  const fs::path dir =
      fs::temp_directory_path() / ("amdim_eval_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  std::vector<double> grid(49);
  for (size_t i = 0; i < grid.size(); ++i) grid[i] = static_cast<double>(i);
  amdim::write_pgm((dir / "h.pgm").string(), grid, 7, 7);
  amdim::write_grid_text((dir / "h.tsv").string(), grid, 7, 7);

  std::ifstream pgm(dir / "h.pgm", std::ios::binary);
  std::string magic, wh, maxv;
  pgm >> magic;
  CHECK(magic == "P5");
  int w, h, mx;
  pgm >> w >> h >> mx;
  CHECK(w == 7);
  CHECK(h == 7);
  CHECK(mx == 255);
  pgm.get();
  std::vector<unsigned char> px(49);
  pgm.read(reinterpret_cast<char*>(px.data()), 49);
  CHECK(pgm.gcount() == 49);
  CHECK(px[0] == 0);
  CHECK(px[48] == 255);

  std::ifstream tsv(dir / "h.tsv");
  std::vector<double> back;
  double v;
  while (tsv >> v) back.push_back(v);
  CHECK(back == grid);
  fs::remove_all(dir);
}
