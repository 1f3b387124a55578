#pragma once

// Mixture antecedent features: k components per global embedding via a
// one-hidden-layer MLP with a residual connection, entropy-regularized soft
// assignment of consequents to components (posterior in closed form), and the
// mixture variant of the multiscale objective.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "amdim/nce.hpp"

namespace amdim {

struct MixtureConfig {
  std::int64_t k = 2;
  double tau = 5.0;
  std::uint64_t seed = 1;

  void validate() const {
    AMDIM_CONFIG_CHECK(k >= 1, "mixture: k must be >= 1, got " << k);
    AMDIM_CONFIG_CHECK(tau > 0.0, "mixture: tau must be > 0, got " << tau);
  }
};

// m_k: hidden width 2C, ReLU, output k*C; component j = f1 + MLP_j(f1).
// The output layer starts at zero, so the head opens as k copies of the
// identity (and k=1 stays the plain objective bit-for-bit).
template <typename T>
struct MixtureHead {
  std::int64_t k = 1;
  std::int64_t c = 0;
  double tau = 5.0;
  Tensor<T> w1, b1, w2, b2;

  MixtureHead(const MixtureConfig& cfg, std::int64_t dim, bool zero_init = true) {
    cfg.validate();
    AMDIM_CHECK(dim >= 1, "mixture head needs a positive feature dimension");
    k = cfg.k;
    c = dim;
    tau = cfg.tau;
    CounterRng rng(cfg.seed, 0x3137eadULL);
    w1 = Tensor<T>::he_uniform({c, 2 * c}, c, rng).set_requires_grad();
    b1 = Tensor<T>::zeros({2 * c}).set_requires_grad();
    if (zero_init) {
      w2 = Tensor<T>::zeros({2 * c, k * c}).set_requires_grad();
    } else {
      w2 = Tensor<T>::he_uniform({2 * c, k * c}, 2 * c, rng).set_requires_grad();
    }
    b2 = Tensor<T>::zeros({k * c}).set_requires_grad();
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    return {{"mixture.w1", w1}, {"mixture.b1", b1}, {"mixture.w2", w2}, {"mixture.b2", b2}};
  }

  std::vector<Tensor<T>> parameters() { return {w1, b1, w2, b2}; }
};

// [B,C] -> [B,k,C]; component j output = f1 + MLP_j(f1)
template <typename T>
Tensor<T> mixture_features(const Tensor<T>& f1, MixtureHead<T>& head) {
  AMDIM_CHECK(f1.ndim() == 2 && f1.dim(1) == head.c,
              "mixture_features expects [B," << head.c << "], got " << shape_str(f1.shape()));
  const std::int64_t B = f1.dim(0), k = head.k, C = head.c;
  Tensor<T> hid = relu(add_bias(matmul(f1, head.w1), head.b1));
  Tensor<T> delta = reshape(add_bias(matmul(hid, head.w2), head.b2), {B, k, C});
  // residual: tile f1 across the component axis
  std::vector<std::int64_t> idx(static_cast<size_t>(B * k * C));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t j = 0; j < k; ++j)
      for (std::int64_t cc = 0; cc < C; ++cc)
        idx[static_cast<size_t>((b * k + j) * C + cc)] = b * C + cc;
  Tensor<T> tiled = gather(f1, std::move(idx), {B, k, C});
  return add(tiled, delta);
}

// Eq-7-style posterior: q(j|i) = softmax_j(tau * s_ij), computed stably on a
// detached copy of the scores (no gradient flows through q)
template <typename T>
Tensor<T> mixture_posterior(const Tensor<T>& scores, double tau) {
  AMDIM_CHECK(scores.ndim() == 2, "mixture_posterior expects [n,k] scores");
  AMDIM_CHECK(tau > 0.0, "mixture_posterior needs tau > 0");
  for (T v : scores.data())
    AMDIM_CHECK(std::isfinite(static_cast<double>(v)), "mixture_posterior on non-finite scores");
  const std::int64_t n = scores.dim(0), k = scores.dim(1);
  Tensor<T> q = Tensor<T>::zeros({n, k});
  for (std::int64_t i = 0; i < n; ++i) {
    const T* row = scores.data().data() + i * k;
    T m = row[0];
    for (std::int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    T z = T(0);
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(static_cast<T>(tau) * (row[j] - m));
    for (std::int64_t j = 0; j < k; ++j)
      q.data()[static_cast<size_t>(i * k + j)] =
          std::exp(static_cast<T>(tau) * (row[j] - m)) / z;
  }
  return q;
}

// mean Shannon entropy of the posterior rows, in nats
template <typename T>
double posterior_entropy(const Tensor<T>& q) {
  AMDIM_CHECK(q.ndim() == 2, "posterior_entropy expects [n,k]");
  double acc = 0.0;
  for (std::int64_t i = 0; i < q.dim(0); ++i) {
    for (std::int64_t j = 0; j < q.dim(1); ++j) {
      const double p = static_cast<double>(q.data()[static_cast<size_t>(i * q.dim(1) + j)]);
      if (p > 0.0) acc -= p * std::log(p);
    }
  }
  return acc / static_cast<double>(q.dim(0));
}

template <typename T>
struct MixtureLoss {
  Tensor<T> total;
  std::vector<PairDiagnostics<T>> pairs;
  double mean_entropy = 0.0;         // mean H(q) over 1-to-7 posterior rows
  std::vector<double> usage;         // mean posterior mass per component
};

// Eq-6 mixture objective. Pairs with antecedent scale 1 and consequent scale 7
// use k mixture antecedents per image with posterior-weighted log-softmax
// terms; all other pairs fall back to the plain NCE path. q is a closed-form
// function of the detached terms, so gradients treat it as given.
template <typename T>
MixtureLoss<T> mixture_nce_objective(FeatureSet<T>& view1, FeatureSet<T>& view2,
                                     MixtureHead<T>& head, const NCEConfig& cfg,
                                     std::uint64_t step = 0) {
  cfg.validate();
  MixtureLoss<T> out;
  out.usage.assign(static_cast<size_t>(head.k), 0.0);
  double usage_rows = 0.0;
  double entropy_acc = 0.0;
  int entropy_terms = 0;
  for (const auto& pair : cfg.pairs) {
    if (pair.weight == 0.0) continue;
    const std::string label = std::to_string(pair.n) + "-to-" + std::to_string(pair.m);
    const bool mixture_pair = pair.n == 1 && pair.m == 7;
    Tensor<T> pair_obj;
    PairDiagnostics<T> diag;
    diag.label = label;
    const int dirs = cfg.symmetrize ? 2 : 1;
    for (int dir = 0; dir < dirs; ++dir) {
      FeatureSet<T>& fa = dir == 0 ? view1 : view2;
      FeatureSet<T>& fb = dir == 0 ? view2 : view1;
      Tensor<T> loss, penalty;
      std::int64_t k_cand = 0;
      if (mixture_pair) {
        const std::int64_t B = fa.phi1.dim(0);
        Tensor<T> mixed = reshape(mixture_features(fa.phi1, head), {B * head.k, head.c});
        std::vector<std::int64_t> owner(static_cast<size_t>(B * head.k));
        for (std::int64_t a = 0; a < B * head.k; ++a) owner[static_cast<size_t>(a)] = a / head.k;
        Tensor<T> cons = nce_detail::as_consequents(fb.phi7, 7);
        auto block = matching_scores(mixed, cons, std::move(owner), label);
        auto [clipped, pen] = regularize_and_clip(block, cfg.lambda, cfg.clip);
        Tensor<T> terms = nce_log_softmax_terms(clipped.raw, clipped.owner);
        const std::int64_t nC = terms.dim(1);
        // posterior over components per (image, consequent), from detached terms
        Tensor<T> s = reshape(terms.detach(), {B, head.k, nC});
        Tensor<T> s_rows = reshape(permute(s, {0, 2, 1}), {B * nC, head.k});
        Tensor<T> q_rows = mixture_posterior(s_rows, head.tau);
        entropy_acc += posterior_entropy(q_rows);
        ++entropy_terms;
        for (std::int64_t i = 0; i < q_rows.dim(0); ++i)
          for (std::int64_t j = 0; j < head.k; ++j)
            out.usage[static_cast<size_t>(j)] +=
                static_cast<double>(q_rows.data()[static_cast<size_t>(i * head.k + j)]);
        usage_rows += static_cast<double>(q_rows.dim(0));
        Tensor<T> q = reshape(permute(reshape(q_rows, {B, nC, head.k}), {0, 2, 1}),
                              {B * head.k, nC});
        loss = scale(mean(mul(q, terms)), -1.0);
        penalty = pen;
        k_cand = nce_candidate_count(block.raw.dim(1), block.raw.dim(2));
      } else {
        auto [ante, owner] = nce_detail::as_antecedents(nce_detail::pick_phi(fa, pair.n), pair.n,
                                                        cfg, step, static_cast<std::uint64_t>(dir));
        Tensor<T> cons = nce_detail::as_consequents(nce_detail::pick_phi(fb, pair.m), pair.m);
        auto block = matching_scores(ante, cons, std::move(owner), label);
        auto [clipped, pen] = regularize_and_clip(block, cfg.lambda, cfg.clip);
        auto [l, terms] = nce_loss(clipped);
        loss = l;
        penalty = pen;
        k_cand = nce_candidate_count(block.raw.dim(1), block.raw.dim(2));
      }
      diag.loss += loss.item() / dirs;
      diag.penalty += penalty.item() / dirs;
      diag.k = k_cand;
      Tensor<T> obj = add(loss, penalty);
      pair_obj = dir == 0 ? obj : scale(add(pair_obj, obj), 0.5);
    }
    diag.mi_bound = mi_bound_estimate(diag.loss, diag.k);
    out.pairs.push_back(diag);
    Tensor<T> weighted = pair.weight == 1.0 ? pair_obj : scale(pair_obj, pair.weight);
    out.total = out.total.defined() ? add(out.total, weighted) : weighted;
  }
  AMDIM_CONFIG_CHECK(out.total.defined(), "mixture objective: every scale pair has zero weight");
  if (entropy_terms > 0) out.mean_entropy = entropy_acc / entropy_terms;
  if (usage_rows > 0.0)
    for (auto& u : out.usage) u /= usage_rows;
  return out;
}

struct OptimalityReport {
  int trials = 0;
  int failures = 0;
  double worst_gap = 0.0;  // most negative (F(q*) - F(q_rand)); >= -1e-9 when optimal
  bool passed() const { return failures == 0; }
};

// Verifies that the Eq-7 posterior with alpha = 1/tau maximizes
// F(q) = sum q.s + alpha H(q) against random points on the simplex.
template <typename T>
OptimalityReport posterior_optimality_check(const Tensor<T>& scores, double tau, int trials,
                                            std::uint64_t seed = 1) {
  AMDIM_CHECK(trials >= 1, "posterior_optimality_check needs trials >= 1");
  const std::int64_t n = scores.dim(0), k = scores.dim(1);
  Tensor<T> q = mixture_posterior(scores, tau);
  const double alpha = 1.0 / tau;
  auto value = [&](const std::vector<double>& dist, const T* srow) {
    double v = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      v += dist[static_cast<size_t>(j)] * static_cast<double>(srow[j]);
      if (dist[static_cast<size_t>(j)] > 0.0)
        v -= alpha * dist[static_cast<size_t>(j)] * std::log(dist[static_cast<size_t>(j)]);
    }
    return v;
  };
  OptimalityReport report;
  CounterRng rng(seed, 0x0b71ULL);
  for (std::int64_t i = 0; i < n; ++i) {
    const T* srow = scores.data().data() + i * k;
    std::vector<double> best(static_cast<size_t>(k));
    for (std::int64_t j = 0; j < k; ++j)
      best[static_cast<size_t>(j)] = static_cast<double>(q.data()[static_cast<size_t>(i * k + j)]);
    const double fstar = value(best, srow);
    for (int t = 0; t < trials; ++t) {
      // random simplex point via normalized exponentials
      std::vector<double> cand(static_cast<size_t>(k));
      double z = 0.0;
      for (auto& c : cand) {
        c = -std::log(1.0 - rng.next_double());
        z += c;
      }
      for (auto& c : cand) c /= z;
      ++report.trials;
      const double gap = fstar - value(cand, srow);
      report.worst_gap = std::min(report.worst_gap, gap);
      if (gap < -1e-9) ++report.failures;
    }
  }
  return report;
}

}  // namespace amdim
