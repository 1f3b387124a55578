#pragma once

// Training orchestration: epoch shuffling, two-view augmentation, the AMDIM
// objective (plain or mixture), Adam with linear warmup, JSONL metrics, and
// resumable checkpoints. Counter-based RNG keys make runs bit-reproducible at
// 64-bit precision, including across a resume.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "amdim/adam.hpp"
#include "amdim/augment.hpp"
#include "amdim/checkpoint.hpp"
#include "amdim/config.hpp"
#include "amdim/dataset.hpp"
#include "amdim/encoder.hpp"
#include "amdim/mixture.hpp"
#include "amdim/nce.hpp"

namespace amdim {

class TrainAbort : public std::runtime_error {
 public:
  explicit TrainAbort(const std::string& msg) : std::runtime_error(msg) {}
};

struct PairMetric {
  std::string label;
  double loss = 0.0;
  double penalty = 0.0;
  double mi_bound = 0.0;
  std::int64_t k = 0;
};

struct MetricsRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double total = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;  // excluded from determinism comparisons
  double entropy = -1.0;  // mean H(q); -1 when mixtures inactive
  std::vector<PairMetric> pairs;

  std::string to_json_line() const {
    nlohmann::json ps = nlohmann::json::array();
    for (const auto& p : pairs)
      ps.push_back({{"label", p.label},
                    {"loss", p.loss},
                    {"penalty", p.penalty},
                    {"mi_bound", p.mi_bound},
                    {"k", p.k}});
    nlohmann::json j = {{"step", step},   {"epoch", epoch},     {"total", total}, {"lr", lr},
                        {"wall_ms", wall_ms}, {"entropy", entropy}, {"pairs", ps}};
    return j.dump();
  }

  static MetricsRecord from_json_line(const std::string& line) {
    nlohmann::json j = nlohmann::json::parse(line);
    MetricsRecord r;
    r.step = j.at("step");
    r.epoch = j.at("epoch");
    r.total = j.at("total");
    r.lr = j.at("lr");
    r.wall_ms = j.at("wall_ms");
    r.entropy = j.at("entropy");
    for (const auto& p : j.at("pairs"))
      r.pairs.push_back(
          {p.at("label"), p.at("loss"), p.at("penalty"), p.at("mi_bound"), p.at("k")});
    return r;
  }

  // everything except wall time
  bool same_values(const MetricsRecord& o) const {
    if (step != o.step || epoch != o.epoch || total != o.total || lr != o.lr ||
        entropy != o.entropy || pairs.size() != o.pairs.size())
      return false;
    for (size_t i = 0; i < pairs.size(); ++i) {
      const auto& a = pairs[i];
      const auto& b = o.pairs[i];
      if (a.label != b.label || a.loss != b.loss || a.penalty != b.penalty ||
          a.mi_bound != b.mi_bound || a.k != b.k)
        return false;
    }
    return true;
  }
};

inline std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  AMDIM_CHECK(in.good(), "cannot open metrics file " << path);
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(MetricsRecord::from_json_line(line));
  return out;
}

// per-pair summary over the stream: first/last loss and the final MI bound
inline std::string summarize_metrics(const std::vector<MetricsRecord>& records) {
  AMDIM_CHECK(!records.empty(), "summarize_metrics on an empty stream");
  std::ostringstream out;
  out << "pair\tfirst_loss\tlast_loss\tlast_mi_bound\tln_k\n";
  const auto& first = records.front();
  const auto& last = records.back();
  for (size_t i = 0; i < last.pairs.size(); ++i) {
    const auto& p = last.pairs[i];
    const double f = i < first.pairs.size() ? first.pairs[i].loss : 0.0;
    out << p.label << "\t" << f << "\t" << p.loss << "\t" << p.mi_bound << "\t"
        << std::log(static_cast<double>(p.k)) << "\n";
  }
  out << "total\t" << first.total << "\t" << last.total << "\t-\t-\n";
  return out.str();
}

template <typename T>
struct Trainer {
  RunConfig cfg;
  Dataset ds;
  Encoder<T> enc;
  std::optional<MixtureHead<T>> head;
  std::vector<Tensor<T>> params;
  AdamState<T> adam;
  std::int64_t step = 0;  // global, resumes from checkpoints

  explicit Trainer(const RunConfig& cfg_)
      : cfg(cfg_),
        ds(load_dataset(cfg_.dataset.path, cfg_.dataset.format,
                        cfg_.dataset.limit > 0 ? cfg_.dataset.limit : -1)),
        enc(cfg_.encoder) {
    cfg.validate();
    AMDIM_CONFIG_CHECK(ds.size() >= cfg.batch_size,
                       "trainer: dataset of " << ds.size() << " images cannot fill a batch of "
                                              << cfg.batch_size);
    if (cfg.mixture_enabled) head.emplace(cfg.mixture, cfg.encoder.nrkhs, /*zero_init=*/true);
    for (auto& [name, t] : enc.named_parameters()) params.push_back(t);
    if (head)
      for (auto* t : {&head->w1, &head->b1, &head->w2, &head->b2})
        params.push_back(t->set_requires_grad());
    adam.init_for(params);
  }

  std::int64_t steps_per_epoch() const { return ds.size() / cfg.batch_size; }
  std::int64_t total_steps() const { return steps_per_epoch() * cfg.epochs; }

  std::int64_t warmup_steps() const {
    return static_cast<std::int64_t>(
        std::ceil(cfg.optimizer.warmup_frac * static_cast<double>(total_steps())));
  }

  double lr_at(std::int64_t t) const {
    const std::int64_t w = warmup_steps();
    const double ramp =
        w > 0 ? std::min(1.0, static_cast<double>(t + 1) / static_cast<double>(w)) : 1.0;
    return cfg.optimizer.lr * ramp;
  }

  // epoch-keyed shuffle; identical regardless of how the run was split up
  std::vector<std::int64_t> epoch_order(std::int64_t epoch) const {
    std::vector<std::int64_t> order(static_cast<size_t>(ds.size()));
    std::iota(order.begin(), order.end(), 0);
    CounterRng rng(cfg.seed, 0x5077ULL, static_cast<std::uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.next_below(i)]);
    return order;
  }

  std::pair<ImageBatch, ImageBatch> views_for(std::int64_t global_step) const {
    const std::int64_t epoch = global_step / steps_per_epoch();
    const std::int64_t slot = global_step % steps_per_epoch();
    const auto order = epoch_order(epoch);
    std::vector<std::int64_t> idx(order.begin() + slot * cfg.batch_size,
                                  order.begin() + (slot + 1) * cfg.batch_size);
    ImageBatch imgs = ds.batch(idx);
    if (imgs.w != cfg.encoder.input_size) imgs = resize_bilinear(imgs, cfg.encoder.input_size);
    return make_views(imgs, cfg.augment, static_cast<std::uint64_t>(epoch));
  }

  MetricsRecord train_step(const std::pair<ImageBatch, ImageBatch>& views) {
    const auto t0 = std::chrono::steady_clock::now();
    FeatureSet<T> f1 = enc.encode(views.first, /*training=*/true);
    FeatureSet<T> f2 = enc.encode(views.second, /*training=*/true);

    MetricsRecord rec;
    rec.step = step;
    rec.epoch = step / steps_per_epoch();
    rec.lr = lr_at(step);
    Tensor<T> total;
    if (head) {
      MixtureLoss<T> loss = mixture_nce_objective(f1, f2, *head, cfg.nce,
                                                  static_cast<std::uint64_t>(step));
      total = loss.total;
      rec.entropy = loss.mean_entropy;
      for (const auto& p : loss.pairs)
        rec.pairs.push_back({p.label, p.loss, p.penalty, p.mi_bound, p.k});
    } else {
      MultiscaleLoss<T> loss = multiscale_amdim_loss(f1, f2, cfg.nce,
                                                     static_cast<std::uint64_t>(step));
      total = loss.total;
      for (const auto& p : loss.pairs)
        rec.pairs.push_back({p.label, p.loss, p.penalty, p.mi_bound, p.k});
    }
    rec.total = total.item();
    if (!std::isfinite(rec.total)) abort_with_diagnostics(views, f1, f2, rec);

    for (auto& p : params) p.zero_grad();
    backward(total);
    AdamConfig acfg{rec.lr, cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps};
    adam_step(params, adam, acfg);
    step += 1;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    return rec;
  }

  [[noreturn]] void abort_with_diagnostics(const std::pair<ImageBatch, ImageBatch>& views,
                                           const FeatureSet<T>& f1, const FeatureSet<T>& f2,
                                           const MetricsRecord& rec) const {
    std::ostringstream oss;
    oss << "non-finite loss at step " << step << "; batch ids:";
    for (auto id : views.first.ids) oss << " " << id;
    auto stats = [&](const char* name, const Tensor<T>& t) {
      double lo = INFINITY, hi = -INFINITY, acc = 0.0;
      bool finite = true;
      for (T v : t.data()) {
        const double d = static_cast<double>(v);
        finite = finite && std::isfinite(d);
        lo = std::min(lo, d);
        hi = std::max(hi, d);
        acc += d;
      }
      oss << "; " << name << " min " << lo << " max " << hi << " mean "
          << acc / static_cast<double>(t.numel()) << (finite ? "" : " (non-finite)");
    };
    stats("phi1(v1)", f1.phi1);
    stats("phi1(v2)", f2.phi1);
    for (const auto& p : rec.pairs)
      oss << "; " << p.label << " loss " << p.loss << " penalty " << p.penalty;
    throw TrainAbort(oss.str());
  }

  void save(const std::string& path) {
    Checkpoint ckpt;
    ckpt.config_json = run_config_json(cfg);
    store_named_tensors(ckpt, "encoder.", enc.named_parameters());
    store_named_buffers(ckpt, "encoder.buffer.", enc.named_buffers());
    if (head) {
      store_named_tensors<T>(ckpt, "mixture.",
                             {{"w1", head->w1}, {"b1", head->b1}, {"w2", head->w2},
                              {"b2", head->b2}});
    }
    for (size_t i = 0; i < adam.m.size(); ++i) {
      ckpt.add<T>("adam.m." + std::to_string(i),
                  {static_cast<std::int64_t>(adam.m[i].size())}, adam.m[i]);
      ckpt.add<T>("adam.v." + std::to_string(i),
                  {static_cast<std::int64_t>(adam.v[i].size())}, adam.v[i]);
    }
    ckpt.add<double>("trainer.counters", {2},
                     {static_cast<double>(step), static_cast<double>(adam.t)});
    save_checkpoint(path, ckpt);
  }

  void load(const Checkpoint& ckpt) {
    load_named_tensors(ckpt, "encoder.", enc.named_parameters());
    load_named_buffers(ckpt, "encoder.buffer.", enc.named_buffers());
    if (head) {
      load_named_tensors<T>(ckpt, "mixture.",
                            {{"w1", head->w1}, {"b1", head->b1}, {"w2", head->w2},
                             {"b2", head->b2}});
    }
    for (size_t i = 0; i < adam.m.size(); ++i) {
      std::vector<std::int64_t> mlen = {static_cast<std::int64_t>(adam.m[i].size())};
      Tensor<T> m = Tensor<T>::from_data(mlen, adam.m[i]);
      Tensor<T> v = Tensor<T>::from_data(mlen, adam.v[i]);
      load_named_tensors<T>(ckpt, "adam.",
                            {{"m." + std::to_string(i), m}, {"v." + std::to_string(i), v}});
      adam.m[i] = m.data();
      adam.v[i] = v.data();
    }
    const TensorRecord* counters = ckpt.find("trainer.counters");
    AMDIM_CONFIG_CHECK(counters, "checkpoint: missing trainer.counters");
    const auto c = counters->values<double>();
    AMDIM_CONFIG_CHECK(c.size() == 2, "checkpoint: malformed trainer.counters");
    step = static_cast<std::int64_t>(c[0]);
    adam.t = static_cast<std::int64_t>(c[1]);
  }
};

template <typename T>
struct TrainOutcome {
  std::vector<MetricsRecord> metrics;
  std::string checkpoint_path;
  std::string metrics_path;
};

// Runs (or resumes) the configured training. Augmentation for the next batch
// is prefetched on a second thread while the current step trains; view streams
// are keyed by (seed, epoch, image id), so the overlap cannot change results.
template <typename T>
TrainOutcome<T> run_training(const RunConfig& cfg, const std::string& resume_from = "",
                             std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  Trainer<T> trainer(cfg);
  if (!resume_from.empty()) trainer.load(load_checkpoint(resume_from));
  fs::create_directories(cfg.out_dir);

  TrainOutcome<T> out;
  out.metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
  std::ofstream metrics(out.metrics_path, trainer.step == 0 ? std::ios::trunc : std::ios::app);
  AMDIM_CHECK(metrics.good(), "cannot open metrics stream " << out.metrics_path);

  auto ckpt_name = [&](std::int64_t s) {
    std::ostringstream oss;
    oss << "checkpoint-" << s << ".amdc";
    return (fs::path(cfg.out_dir) / oss.str()).string();
  };

  const std::int64_t total = trainer.total_steps();
  const std::int64_t spe = trainer.steps_per_epoch();
  std::future<std::pair<ImageBatch, ImageBatch>> next;
  for (std::int64_t s = trainer.step; s < total; ++s) {
    std::pair<ImageBatch, ImageBatch> views =
        next.valid() ? next.get() : trainer.views_for(s);
    if (s + 1 < total)
      next = std::async(std::launch::async, [&trainer, s] { return trainer.views_for(s + 1); });
    MetricsRecord rec = trainer.train_step(views);
    metrics << rec.to_json_line() << "\n";
    metrics.flush();
    out.metrics.push_back(rec);
    if (log && (rec.step % 10 == 0 || rec.step + 1 == total))
      (*log) << "step " << rec.step << "/" << total << " loss " << rec.total << " lr " << rec.lr
             << "\n";
    const bool epoch_end = (s + 1) % spe == 0;
    const bool cadence = cfg.checkpoint_every > 0
                             ? (s + 1) % cfg.checkpoint_every == 0
                             : epoch_end;
    if (cadence || s + 1 == total) {
      out.checkpoint_path = ckpt_name(s + 1);
      trainer.save(out.checkpoint_path);
    }
  }
  return out;
}

}  // namespace amdim
