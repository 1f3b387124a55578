#pragma once

// Frozen-feature evaluation: linear/MLP probes on f1, cosine-KNN retrieval
// with phi1.phi7 heatmaps, mixture segmentation maps, and the synthetic
// Gaussian MI validation harness.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "amdim/adam.hpp"
#include "amdim/augment.hpp"
#include "amdim/dataset.hpp"
#include "amdim/encoder.hpp"
#include "amdim/mixture.hpp"
#include "amdim/nce.hpp"

namespace amdim {

struct ProbeConfig {
  std::string kind = "linear";  // "linear" or "mlp"
  std::int64_t hidden = 1024;
  std::int64_t epochs = 100;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    AMDIM_CONFIG_CHECK(kind == "linear" || kind == "mlp",
                       "probe: kind must be 'linear' or 'mlp', got '" << kind << "'");
    AMDIM_CONFIG_CHECK(kind != "mlp" || hidden >= 1, "probe: mlp hidden width must be >= 1");
    AMDIM_CONFIG_CHECK(epochs >= 1, "probe: epochs must be >= 1");
    AMDIM_CONFIG_CHECK(lr > 0.0, "probe: lr must be > 0");
    AMDIM_CONFIG_CHECK(weight_decay >= 0.0, "probe: weight decay must be >= 0");
  }
};

template <typename T>
struct FeatureTable {
  std::vector<std::int64_t> ids;
  std::int64_t dim = 0;
  std::vector<T> data;  // row-major [size, dim]

  std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
  const T* row(std::int64_t i) const { return data.data() + i * dim; }
  std::int64_t index_of(std::int64_t id) const {
    for (std::int64_t i = 0; i < size(); ++i)
      if (ids[static_cast<size_t>(i)] == id) return i;
    return -1;
  }
};

// inference mode, deterministic resize only
template <typename T>
FeatureTable<T> extract_features(Encoder<T>& enc, const Dataset& ds,
                                 std::int64_t batch_size = 64) {
  AMDIM_CHECK(ds.size() > 0, "extract_features on an empty dataset");
  FeatureTable<T> table;
  for (std::int64_t start = 0; start < ds.size(); start += batch_size) {
    const std::int64_t n = std::min(batch_size, ds.size() - start);
    std::vector<std::int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), start);
    ImageBatch imgs = ds.batch(idx);
    if (imgs.w != enc.config().input_size) imgs = resize_bilinear(imgs, enc.config().input_size);
    FeatureSet<T> fs = enc.encode(imgs, /*training=*/false);
    if (table.dim == 0) {
      table.dim = fs.f1.dim(1);
      table.data.reserve(static_cast<size_t>(ds.size() * table.dim));
    }
    table.ids.insert(table.ids.end(), imgs.ids.begin(), imgs.ids.end());
    table.data.insert(table.data.end(), fs.f1.data().begin(), fs.f1.data().end());
  }
  return table;
}

// deterministic 90/10 train/test split by id hash
inline bool eval_holdout(std::int64_t id) {
  return CounterRng::mix(static_cast<std::uint64_t>(id) + 0x5811fULL) % 10 == 0;
}

template <typename T>
struct ProbeResult {
  double accuracy = 0.0;        // held-out top-1
  double train_accuracy = 0.0;
  std::vector<Tensor<T>> params;
};

namespace eval_detail {

template <typename T>
double top1_accuracy(const Tensor<T>& logits, const std::vector<int>& labels) {
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T* row = logits.data().data() + i * c;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    hits += best == labels[static_cast<size_t>(i)];
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace eval_detail

template <typename T>
ProbeResult<T> train_probe(const FeatureTable<T>& table, const std::vector<int>& labels,
                           int num_classes, const ProbeConfig& cfg) {
  cfg.validate();
  AMDIM_CHECK(static_cast<std::int64_t>(labels.size()) == table.size(),
              "train_probe: " << labels.size() << " labels for " << table.size() << " rows");
  AMDIM_CHECK(num_classes >= 2, "train_probe needs >= 2 classes");
  std::vector<std::int64_t> train_idx, test_idx;
  for (std::int64_t i = 0; i < table.size(); ++i) {
    AMDIM_CHECK(labels[static_cast<size_t>(i)] >= 0 && labels[static_cast<size_t>(i)] < num_classes,
                "train_probe: label out of range at row " << i);
    (eval_holdout(table.ids[static_cast<size_t>(i)]) ? test_idx : train_idx).push_back(i);
  }
  AMDIM_CHECK(!train_idx.empty() && !test_idx.empty(),
              "train_probe: the 90/10 id-hash split left a side empty");
  {
    const int first = labels[static_cast<size_t>(train_idx[0])];
    bool single = true;
    for (auto i : train_idx) single = single && labels[static_cast<size_t>(i)] == first;
    AMDIM_CHECK(!single, "train_probe: training labels are single-class");
  }

  auto gather_rows = [&](const std::vector<std::int64_t>& idx) {
    std::vector<T> rows;
    rows.reserve(idx.size() * static_cast<size_t>(table.dim));
    for (auto i : idx) rows.insert(rows.end(), table.row(i), table.row(i) + table.dim);
    return Tensor<T>::from_data({static_cast<std::int64_t>(idx.size()), table.dim},
                                std::move(rows));
  };
  auto gather_labels = [&](const std::vector<std::int64_t>& idx) {
    std::vector<int> out;
    for (auto i : idx) out.push_back(labels[static_cast<size_t>(i)]);
    return out;
  };
  Tensor<T> x_train = gather_rows(train_idx), x_test = gather_rows(test_idx);
  const std::vector<int> y_train = gather_labels(train_idx), y_test = gather_labels(test_idx);

  CounterRng rng(cfg.seed, 0x00be5eedULL);
  const std::int64_t d = table.dim, c = num_classes;
  ProbeResult<T> out;
  if (cfg.kind == "linear") {
    out.params = {Tensor<T>::he_uniform({d, c}, d, rng), Tensor<T>::zeros({c})};
  } else {
    out.params = {Tensor<T>::he_uniform({d, cfg.hidden}, d, rng), Tensor<T>::zeros({cfg.hidden}),
                  Tensor<T>::he_uniform({cfg.hidden, c}, cfg.hidden, rng), Tensor<T>::zeros({c})};
  }
  for (auto& p : out.params) p.set_requires_grad();
  auto forward = [&](const Tensor<T>& x) {
    if (cfg.kind == "linear") return add_bias(matmul(x, out.params[0]), out.params[1]);
    Tensor<T> h = relu(add_bias(matmul(x, out.params[0]), out.params[1]));
    return add_bias(matmul(h, out.params[2]), out.params[3]);
  };

  const std::int64_t n = static_cast<std::int64_t>(train_idx.size());
  std::vector<std::int64_t> pick(static_cast<size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    pick[static_cast<size_t>(i)] = i * c + y_train[static_cast<size_t>(i)];
  AdamState<T> state;
  state.init_for(out.params);
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tensor<T> lp = log_softmax(forward(x_train), 1);
    Tensor<T> loss = scale(mean(gather(lp, pick, {n})), -1.0);
    if (cfg.weight_decay > 0.0)
      for (size_t i = 0; i < out.params.size(); i += 2)
        loss = add(loss, scale(sum(mul(out.params[i], out.params[i])), cfg.weight_decay));
    for (auto& p : out.params) p.zero_grad();
    backward(loss);
    adam_step(out.params, state, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  }
  out.train_accuracy = eval_detail::top1_accuracy(forward(x_train).detach(), y_train);
  out.accuracy = eval_detail::top1_accuracy(forward(x_test).detach(), y_test);
  return out;
}

struct RetrievalResult {
  std::int64_t query_id = -1;
  std::vector<std::int64_t> ids;                 // ranked, best first
  std::vector<double> sims;                      // cosine, descending
  std::vector<std::vector<double>> heatmaps;     // per neighbor, 7x7 row-major
};

template <typename T>
RetrievalResult knn_retrieve(const FeatureTable<T>& table, std::int64_t query_id,
                             std::int64_t k) {
  AMDIM_CHECK(k >= 0 && k < table.size(), "knn_retrieve: k must be in [0, gallery size)");
  const std::int64_t q = table.index_of(query_id);
  AMDIM_CHECK(q >= 0, "knn_retrieve: unknown id " << query_id);
  auto norm = [&](const T* row) {
    double s = 0.0;
    for (std::int64_t j = 0; j < table.dim; ++j) s += static_cast<double>(row[j]) * row[j];
    return std::sqrt(s);
  };
  const double qn = norm(table.row(q));
  std::vector<std::pair<double, std::int64_t>> ranked;
  for (std::int64_t i = 0; i < table.size(); ++i) {
    if (i == q) continue;
    double dot = 0.0;
    for (std::int64_t j = 0; j < table.dim; ++j)
      dot += static_cast<double>(table.row(q)[j]) * table.row(i)[j];
    const double dn = norm(table.row(i));
    const double sim = (qn > 0.0 && dn > 0.0) ? dot / (qn * dn) : 0.0;
    ranked.emplace_back(sim, table.ids[static_cast<size_t>(i)]);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  RetrievalResult out;
  out.query_id = query_id;
  for (std::int64_t i = 0; i < k; ++i) {
    out.ids.push_back(ranked[static_cast<size_t>(i)].second);
    out.sims.push_back(ranked[static_cast<size_t>(i)].first);
  }
  return out;
}

// matching-score heatmap phi1(f1 of query) . phi7(f7 of other) per 7x7 position
template <typename T>
std::vector<double> retrieval_heatmap(Encoder<T>& enc, const Dataset& ds, std::int64_t query_id,
                                      std::int64_t other_id) {
  ImageBatch imgs = ds.batch({query_id, other_id});
  if (imgs.w != enc.config().input_size) imgs = resize_bilinear(imgs, enc.config().input_size);
  FeatureSet<T> fs = enc.encode(imgs, false);
  const std::int64_t K = fs.phi1.dim(1);
  std::vector<double> heat(49, 0.0);
  for (std::int64_t p = 0; p < 49; ++p) {
    double dot = 0.0;
    for (std::int64_t j = 0; j < K; ++j)
      dot += static_cast<double>(fs.phi1.data()[static_cast<size_t>(j)]) *
             fs.phi7.data()[static_cast<size_t>((K + j) * 49 + p)];  // sample 1, channel j, pos p
    heat[static_cast<size_t>(p)] = dot;
  }
  return heat;
}

template <typename T>
RetrievalResult knn_retrieve(Encoder<T>& enc, const Dataset& ds, const FeatureTable<T>& table,
                             std::int64_t query_id, std::int64_t k) {
  RetrievalResult out = knn_retrieve(table, query_id, k);
  for (auto id : out.ids) out.heatmaps.push_back(retrieval_heatmap(enc, ds, query_id, id));
  return out;
}

// Components inferred from x1, posteriors over them for every f7 position of
// x2 (Eq. 7 at the head's temperature). Returns [49, k]; rows sum to 1.
template <typename T>
Tensor<T> mixture_segmentation_map(Encoder<T>& enc, MixtureHead<T>& head, const ImageBatch& x1,
                                   const ImageBatch& x2) {
  AMDIM_CHECK(x1.b == 1 && x2.b == 1, "mixture_segmentation_map takes single-image batches");
  FeatureSet<T> fa = enc.encode(x1, false);
  FeatureSet<T> fb = enc.encode(x2, false);
  Tensor<T> mixed = reshape(mixture_features(fa.phi1, head), {head.k, head.c});
  const std::int64_t K = fb.phi7.dim(1);
  Tensor<T> scores = Tensor<T>::zeros({49, head.k});
  for (std::int64_t p = 0; p < 49; ++p)
    for (std::int64_t j = 0; j < head.k; ++j) {
      double dot = 0.0;
      for (std::int64_t ch = 0; ch < K; ++ch)
        dot += static_cast<double>(fb.phi7.data()[static_cast<size_t>(ch * 49 + p)]) *
               mixed.data()[static_cast<size_t>(j * head.c + ch)];
      scores.data()[static_cast<size_t>(p * head.k + j)] = static_cast<T>(dot);
    }
  return mixture_posterior(scores, head.tau);
}

struct MIValidation {
  double estimate = 0.0;  // mean NCE bound over the trailing window
  double analytic = 0.0;  // -(dim/2) ln(1 - rho^2)
  double ln_k = 0.0;
  bool bound_ok = true;   // estimate <= ln K held on every step
  std::vector<double> trace;
};

// Correlated-Gaussian pairs scored by linear embeddings of fixed quadratic
// features (x, x^2, 1) so the critic family can represent the optimal
// log-density ratio; trained with the module's own nce_loss.
inline double analytic_gaussian_mi(std::int64_t dim, double rho) {
  return -0.5 * static_cast<double>(dim) * std::log(1.0 - rho * rho);
}

inline MIValidation synthetic_mi_validation(std::int64_t dim, double rho, std::int64_t batch,
                                            std::int64_t steps, std::uint64_t seed = 1) {
  AMDIM_CHECK(dim >= 1, "mi validation: dim must be >= 1");
  AMDIM_CHECK(std::abs(rho) < 1.0, "mi validation: need |rho| < 1");
  AMDIM_CHECK(batch >= 2 && steps >= 1, "mi validation: batch >= 2 and steps >= 1");
  using T = double;
  const std::int64_t embed = 16, feat = 2 * dim + 1;
  CounterRng init_rng(seed, 0x141fa11ULL);
  Tensor<T> A = Tensor<T>::he_uniform({feat, embed}, feat, init_rng).set_requires_grad();
  Tensor<T> B = Tensor<T>::he_uniform({feat, embed}, feat, init_rng).set_requires_grad();
  std::vector<Tensor<T>> params = {A, B};
  AdamState<T> state;
  state.init_for(params);

  MIValidation out;
  out.analytic = analytic_gaussian_mi(dim, rho);
  out.ln_k = std::log(static_cast<double>(batch));
  const double mix = std::sqrt(1.0 - rho * rho);
  for (std::int64_t step = 0; step < steps; ++step) {
    CounterRng rng(seed, 0xda7aULL, static_cast<std::uint64_t>(step));
    auto normal = [&]() {
      const double u1 = rng.next_double(), u2 = rng.next_double();
      return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * M_PI * u2);
    };
    std::vector<T> xa(static_cast<size_t>(batch * feat)), xb(static_cast<size_t>(batch * feat));
    for (std::int64_t i = 0; i < batch; ++i) {
      for (std::int64_t d = 0; d < dim; ++d) {
        const double x = normal();
        const double y = rho * x + mix * normal();
        xa[static_cast<size_t>(i * feat + d)] = x;
        xa[static_cast<size_t>(i * feat + dim + d)] = x * x;
        xb[static_cast<size_t>(i * feat + d)] = y;
        xb[static_cast<size_t>(i * feat + dim + d)] = y * y;
      }
      xa[static_cast<size_t>(i * feat + feat - 1)] = 1.0;
      xb[static_cast<size_t>(i * feat + feat - 1)] = 1.0;
    }
    Tensor<T> ante = matmul(Tensor<T>::from_data({batch, feat}, std::move(xa)), A);
    Tensor<T> cons = reshape(matmul(Tensor<T>::from_data({batch, feat}, std::move(xb)), B),
                             {batch, 1, embed});
    auto block = matching_scores(ante, cons, {}, "mi");
    auto [clipped, penalty] = regularize_and_clip(block, 0.0, 20.0);
    auto [loss, terms] = nce_loss(clipped);
    const double bound = mi_bound_estimate(loss.item(), batch);
    out.bound_ok = out.bound_ok && bound <= out.ln_k + 1e-12;
    out.trace.push_back(bound);
    A.zero_grad();
    B.zero_grad();
    backward(loss);
    adam_step(params, state, AdamConfig{3e-3, 0.9, 0.999, 1e-8});
  }
  const size_t window = std::min<size_t>(100, out.trace.size());
  double acc = 0.0;
  for (size_t i = out.trace.size() - window; i < out.trace.size(); ++i) acc += out.trace[i];
  out.estimate = acc / static_cast<double>(window);
  return out;
}

// portable grayscale output, min..max scaled to 0..255
inline void write_pgm(const std::string& path, const std::vector<double>& grid, std::int64_t h,
                      std::int64_t w) {
  AMDIM_CHECK(static_cast<std::int64_t>(grid.size()) == h * w, "write_pgm: grid size mismatch");
  double lo = grid[0], hi = grid[0];
  for (double v : grid) lo = std::min(lo, v), hi = std::max(hi, v);
  const double span = hi > lo ? hi - lo : 1.0;
  std::ofstream out(path, std::ios::binary);
  AMDIM_CHECK(out.good(), "write_pgm: cannot open " << path);
  out << "P5\n" << w << " " << h << "\n255\n";
  for (double v : grid) out.put(static_cast<char>(std::lround((v - lo) / span * 255.0)));
}

inline void write_grid_text(const std::string& path, const std::vector<double>& grid,
                            std::int64_t h, std::int64_t w) {
  AMDIM_CHECK(static_cast<std::int64_t>(grid.size()) == h * w, "write_grid_text: size mismatch");
  std::ofstream out(path);
  AMDIM_CHECK(out.good(), "write_grid_text: cannot open " << path);
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j)
      out << (j ? "\t" : "") << grid[static_cast<size_t>(i * w + j)];
    out << "\n";
  }
}

}  // namespace amdim
