#pragma once

// The AMDIM objective: batched NCE over (antecedent, consequent) pairs across
// two views and multiple scale pairs, with squared-score regularization on raw
// positives and soft clipping before the log-softmax.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "amdim/encoder.hpp"
#include "amdim/tensor.hpp"

namespace amdim {

struct ScalePair {
  int n = 1, m = 7;
  double weight = 1.0;
};

struct NCEConfig {
  double lambda = 4e-2;
  double clip = 20.0;
  bool symmetrize = true;
  std::vector<ScalePair> pairs = {{1, 5, 1.0}, {1, 7, 1.0}, {5, 5, 1.0}};
  // 5-to-5 antecedents default to all 25 positions per image; sampling mode
  // draws `sample_count` positions per image instead
  bool sample_antecedents = false;
  std::int64_t sample_count = 4;
  std::uint64_t sample_seed = 1;

  void validate() const {
    AMDIM_CONFIG_CHECK(lambda >= 0.0, "nce: lambda must be >= 0");
    AMDIM_CONFIG_CHECK(clip > 0.0, "nce: clip bound must be > 0");
    AMDIM_CONFIG_CHECK(!pairs.empty(), "nce: scale pair list must be non-empty");
    for (const auto& p : pairs) {
      AMDIM_CONFIG_CHECK((p.n == 1 || p.n == 5 || p.n == 7) && (p.m == 1 || p.m == 5 || p.m == 7),
                         "nce: scale pair " << p.n << "-to-" << p.m << " not drawn from {1,5,7}");
      AMDIM_CONFIG_CHECK(p.weight >= 0.0, "nce: scale pair weights must be >= 0");
    }
    AMDIM_CONFIG_CHECK(!sample_antecedents || sample_count >= 1,
                       "nce: sample_count must be >= 1 in sampling mode");
  }
};

// raw scores (a, b, c) = phi(antecedent a) . phi(consequent c of image b);
// owner[a] names the image antecedent a came from, so positives are the
// entries with b == owner[a]
template <typename T>
struct ScoreBlock {
  Tensor<T> raw;  // [nA, nB, nC]
  std::vector<std::int64_t> owner;
  std::string label;
};

// one batched matrix product; never a per-pair loop
template <typename T>
ScoreBlock<T> matching_scores(const Tensor<T>& phi_ante, const Tensor<T>& phi_cons,
                              std::vector<std::int64_t> owner = {}, std::string label = "") {
  AMDIM_CHECK(phi_ante.ndim() == 2 && phi_cons.ndim() == 3,
              "matching_scores expects [nA,K] antecedents and [nB,nC,K] consequents, got "
                  << shape_str(phi_ante.shape()) << " and " << shape_str(phi_cons.shape()));
  const std::int64_t nA = phi_ante.dim(0), K = phi_ante.dim(1);
  const std::int64_t nB = phi_cons.dim(0), nC = phi_cons.dim(1);
  AMDIM_CHECK(phi_cons.dim(2) == K, "matching_scores embedding dim mismatch: " << K << " vs "
                                                                               << phi_cons.dim(2));
  if (owner.empty()) {
    AMDIM_CHECK(nA == nB, "matching_scores needs an owner list when nA != nB");
    owner.resize(static_cast<size_t>(nA));
    for (std::int64_t a = 0; a < nA; ++a) owner[static_cast<size_t>(a)] = a;
  }
  Tensor<T> cons2d = reshape(phi_cons, {nB * nC, K});
  Tensor<T> flat = matmul(phi_ante, transpose(cons2d));  // [nA, nB*nC]
  ScoreBlock<T> block;
  block.raw = reshape(flat, {nA, nB, nC});
  block.owner = std::move(owner);
  block.label = std::move(label);
  return block;
}

// penalty = lambda * mean over positives of raw s^2, computed BEFORE clipping;
// clip replaces every score by c * tanh(s / c)
template <typename T>
std::pair<ScoreBlock<T>, Tensor<T>> regularize_and_clip(const ScoreBlock<T>& block, double lambda,
                                                        double clip) {
  AMDIM_CHECK(lambda >= 0.0 && clip > 0.0, "regularize_and_clip: need lambda >= 0 and clip > 0");
  const std::int64_t nA = block.raw.dim(0), nB = block.raw.dim(1), nC = block.raw.dim(2);
  std::vector<std::int64_t> pos_idx(static_cast<size_t>(nA * nC));
  for (std::int64_t a = 0; a < nA; ++a)
    for (std::int64_t c = 0; c < nC; ++c)
      pos_idx[static_cast<size_t>(a * nC + c)] =
          (a * nB + block.owner[static_cast<size_t>(a)]) * nC + c;
  Tensor<T> pos = gather(block.raw, std::move(pos_idx), {nA, nC});
  Tensor<T> penalty = scale(mean(mul(pos, pos)), lambda);
  ScoreBlock<T> clipped;
  clipped.raw = scale(tanh(scale(block.raw, 1.0 / clip)), clip);
  clipped.owner = block.owner;
  clipped.label = block.label;
  return {std::move(clipped), std::move(penalty)};
}

// candidate count per positive: the positive plus every consequent of the
// other images
inline std::int64_t nce_candidate_count(std::int64_t n_b, std::int64_t n_c) {
  return (n_b - 1) * n_c + 1;
}

inline double mi_bound_estimate(double mean_loss, std::int64_t k) {
  return std::log(static_cast<double>(k)) - mean_loss;
}

// mean loss = -mean of log-softmax terms; `terms` holds the positive
// log-probabilities, shape [nA, nC] (per-pair loss = -term)
template <typename T>
std::pair<Tensor<T>, Tensor<T>> nce_loss(const ScoreBlock<T>& block) {
  Tensor<T> terms = nce_log_softmax_terms(block.raw, block.owner);
  Tensor<T> loss = scale(mean(terms), -1.0);
  return {std::move(loss), std::move(terms)};
}

template <typename T>
struct PairDiagnostics {
  std::string label;
  double loss = 0.0;     // symmetrized when enabled
  double penalty = 0.0;  // ditto
  double mi_bound = 0.0;
  std::int64_t k = 0;  // candidates per positive
};

template <typename T>
struct MultiscaleLoss {
  Tensor<T> total;
  std::vector<PairDiagnostics<T>> pairs;
};

namespace nce_detail {

// [B,K] or [B,K,d,d] embedding -> antecedent matrix [B*P, K] plus owner map
template <typename T>
std::pair<Tensor<T>, std::vector<std::int64_t>> as_antecedents(const Tensor<T>& phi, int scale,
                                                               const NCEConfig& cfg,
                                                               std::uint64_t step,
                                                               std::uint64_t direction) {
  const std::int64_t B = phi.dim(0);
  if (scale == 1) {
    std::vector<std::int64_t> owner(static_cast<size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) owner[static_cast<size_t>(b)] = b;
    return {phi, std::move(owner)};
  }
  const std::int64_t K = phi.dim(1), P = phi.dim(2) * phi.dim(3);
  Tensor<T> flat = reshape(permute(phi, {0, 2, 3, 1}), {B * P, K});
  if (!cfg.sample_antecedents || cfg.sample_count >= P) {
    std::vector<std::int64_t> owner(static_cast<size_t>(B * P));
    for (std::int64_t a = 0; a < B * P; ++a) owner[static_cast<size_t>(a)] = a / P;
    return {std::move(flat), std::move(owner)};
  }
  // sampling mode: draw sample_count distinct positions per image
  const std::int64_t S = cfg.sample_count;
  std::vector<std::int64_t> rows(static_cast<size_t>(B * S * K));
  std::vector<std::int64_t> idx;
  std::vector<std::int64_t> owner;
  idx.reserve(static_cast<size_t>(B * S * K));
  owner.reserve(static_cast<size_t>(B * S));
  for (std::int64_t b = 0; b < B; ++b) {
    CounterRng rng(cfg.sample_seed, step, static_cast<std::uint64_t>(b), direction);
    std::vector<std::int64_t> pos(static_cast<size_t>(P));
    for (std::int64_t p = 0; p < P; ++p) pos[static_cast<size_t>(p)] = p;
    for (std::int64_t s = 0; s < S; ++s) {
      const std::int64_t j =
          s + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(P - s)));
      std::swap(pos[static_cast<size_t>(s)], pos[static_cast<size_t>(j)]);
      const std::int64_t row = b * P + pos[static_cast<size_t>(s)];
      for (std::int64_t k = 0; k < K; ++k) idx.push_back(row * K + k);
      owner.push_back(b);
    }
  }
  return {gather(flat, std::move(idx), {B * S, K}), std::move(owner)};
}

// [B,K] or [B,K,d,d] embedding -> consequent tensor [B, P, K]
template <typename T>
Tensor<T> as_consequents(const Tensor<T>& phi, int scale) {
  const std::int64_t B = phi.dim(0), K = phi.dim(1);
  if (scale == 1) return reshape(phi, {B, 1, K});
  const std::int64_t P = phi.dim(2) * phi.dim(3);
  return reshape(permute(phi, {0, 2, 3, 1}), {B, P, K});
}

template <typename T>
const Tensor<T>& pick_phi(const FeatureSet<T>& f, int scale) {
  const Tensor<T>* t = scale == 1 ? &f.phi1 : (scale == 5 ? &f.phi5 : &f.phi7);
  AMDIM_CONFIG_CHECK(t->defined(), "nce: FeatureSet is missing scale " << scale);
  return *t;
}

}  // namespace nce_detail

// Eq-5-style family of n-to-m costs between two views of the same batch.
// Per pair: antecedents from view 1 at scale n, consequents from view 2 at
// scale m; the view-swapped direction is averaged in when symmetrize is on.
template <typename T>
MultiscaleLoss<T> multiscale_amdim_loss(FeatureSet<T>& view1, FeatureSet<T>& view2,
                                        const NCEConfig& cfg, std::uint64_t step = 0) {
  cfg.validate();
  MultiscaleLoss<T> out;
  for (const auto& pair : cfg.pairs) {
    if (pair.weight == 0.0) continue;
    const std::string label = std::to_string(pair.n) + "-to-" + std::to_string(pair.m);
    Tensor<T> pair_obj;  // loss + penalty for this pair (possibly symmetrized)
    PairDiagnostics<T> diag;
    diag.label = label;
    const int dirs = cfg.symmetrize ? 2 : 1;
    for (int dir = 0; dir < dirs; ++dir) {
      FeatureSet<T>& fa = dir == 0 ? view1 : view2;
      FeatureSet<T>& fb = dir == 0 ? view2 : view1;
      auto [ante, owner] = nce_detail::as_antecedents(nce_detail::pick_phi(fa, pair.n), pair.n,
                                                      cfg, step, static_cast<std::uint64_t>(dir));
      Tensor<T> cons = nce_detail::as_consequents(nce_detail::pick_phi(fb, pair.m), pair.m);
      auto block = matching_scores(ante, cons, std::move(owner), label);
      auto [clipped, penalty] = regularize_and_clip(block, cfg.lambda, cfg.clip);
      auto [loss, terms] = nce_loss(clipped);
      diag.loss += loss.item() / dirs;
      diag.penalty += penalty.item() / dirs;
      diag.k = nce_candidate_count(block.raw.dim(1), block.raw.dim(2));
      Tensor<T> obj = add(loss, penalty);
      pair_obj = dir == 0 ? obj : scale(add(pair_obj, obj), 0.5);
    }
    diag.mi_bound = mi_bound_estimate(diag.loss, diag.k);
    out.pairs.push_back(diag);
    Tensor<T> weighted = pair.weight == 1.0 ? pair_obj : scale(pair_obj, pair.weight);
    out.total = out.total.defined() ? add(out.total, weighted) : weighted;
  }
  AMDIM_CONFIG_CHECK(out.total.defined(), "nce: every scale pair has zero weight");
  return out;
}

}  // namespace amdim
