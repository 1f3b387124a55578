#pragma once

// Padding-free multiscale residual encoder. Each stage opens with a
// mean-pool base path plus a strided-conv residual branch, followed by
// ndepth-1 identity-shortcut 1x1 residual layers. Taps land exactly on
// spatial dims 7, 5 and 1; receptive fields are tracked analytically.

#include <string>
#include <utility>
#include <vector>

#include "amdim/image.hpp"
#include "amdim/tensor.hpp"

namespace amdim {

struct EncoderConfig {
  std::int64_t ndf = 64;
  std::int64_t nrkhs = 512;
  std::int64_t ndepth = 4;
  std::int64_t input_size = 32;
  bool use_batch_norm = true;
  std::uint64_t seed = 1;

  void validate() const {
    AMDIM_CONFIG_CHECK(ndf >= 8, "encoder: ndf must be >= 8, got " << ndf);
    AMDIM_CONFIG_CHECK(nrkhs >= ndf, "encoder: nrkhs must be >= ndf, got nrkhs=" << nrkhs
                                                                                << " ndf=" << ndf);
    AMDIM_CONFIG_CHECK(ndepth >= 1, "encoder: ndepth must be >= 1, got " << ndepth);
    AMDIM_CONFIG_CHECK(input_size == 32 || input_size == 64 || input_size == 128,
                       "encoder: input size must be one of 32, 64, 128; got " << input_size);
  }
};

// one spatial stage: kernel w, stride s, channel change cin -> cout, output side
struct StageGeom {
  std::int64_t w, s, cin, cout, out;
};

// Fixed layer tables per input size; each row is the spatial layer opening a
// stage (the 1x1 residual layers that follow leave geometry unchanged).
//   32:  (4,2)->15  (3,2)->7   (3,1)->5  (5,1)->1
//   64:  (6,2)->30  (4,2)->14  (2,2)->7  (3,1)->5  (5,1)->1
//   128: (6,2)->62  (4,2)->30  (4,2)->14 (2,2)->7  (3,1)->5  (5,1)->1
// Channel widths double on the way down and cap at 4*ndf, so the taps carry
// C7 = 2*ndf, C5 = C1 = 4*ndf for every input size.
inline std::vector<StageGeom> encoder_stage_table(std::int64_t input_size, std::int64_t ndf) {
  const std::int64_t d1 = ndf, d2 = 2 * ndf, d4 = 4 * ndf;
  switch (input_size) {
    case 32:
      return {{4, 2, 3, d1, 15}, {3, 2, d1, d2, 7}, {3, 1, d2, d4, 5}, {5, 1, d4, d4, 1}};
    case 64:
      return {{6, 2, 3, d1, 30},
              {4, 2, d1, d2, 14},
              {2, 2, d2, d2, 7},
              {3, 1, d2, d4, 5},
              {5, 1, d4, d4, 1}};
    case 128:
      return {{6, 2, 3, d1, 62},  {4, 2, d1, d1, 30}, {4, 2, d1, d2, 14},
              {2, 2, d2, d2, 7},  {3, 1, d2, d4, 5},  {5, 1, d4, d4, 1}};
    default:
      AMDIM_CONFIG_CHECK(false, "encoder: no layer table for input size " << input_size);
  }
  return {};
}

struct ReceptiveField {
  std::int64_t d = 0;  // tap spatial dim (7, 5 or 1)
  std::int64_t i = 0, j = 0;
  std::int64_t top = 0, left = 0, bottom = 0, right = 0;  // inclusive pixel rect
};

template <typename T>
struct ConvLayer {
  Tensor<T> w;  // [cout, cin, k, k]
  Tensor<T> b;  // [cout] when has_bias
  bool has_bias = false;
  std::int64_t stride = 1;
};

template <typename T>
struct BNLayer {
  Tensor<T> gamma, beta;
  BatchNormState<T> state;
};

// first layer of a stage: base = mean_pool(w,s) (projected 1x1 when channels
// change) plus residual conv(w,s) -> [BN] -> ReLU -> conv1x1
template <typename T>
struct StageOpen {
  bool has_proj = false;
  ConvLayer<T> proj;
  ConvLayer<T> conv_a;
  BNLayer<T> bn;
  ConvLayer<T> conv_b;
};

// identity-shortcut 1x1 residual layer: x + conv1x1 -> [BN] -> ReLU -> conv1x1
template <typename T>
struct ResLayer {
  ConvLayer<T> conv1;
  BNLayer<T> bn;
  ConvLayer<T> conv2;
};

template <typename T>
struct Stage {
  StageGeom geom;
  StageOpen<T> open;
  std::vector<ResLayer<T>> rest;
};

// phi head for spatial taps: conv1x1 -> ReLU -> conv1x1, plus a 1x1 skip
template <typename T>
struct PhiHead {
  ConvLayer<T> c1, c2, skip;
};

template <typename T>
struct FeatureSet {
  Tensor<T> f7, f5, f1;        // [B,C7,7,7], [B,C5,5,5], [B,C1]
  Tensor<T> phi7, phi5, phi1;  // [B,nrkhs,7,7], [B,nrkhs,5,5], [B,nrkhs]
};

template <typename T>
class Encoder {
 public:
  explicit Encoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    CounterRng rng(cfg.seed, 0xe2c0deULL);
    const auto table = encoder_stage_table(cfg.input_size, cfg.ndf);
    for (size_t si = 0; si < table.size(); ++si) {
      const StageGeom& g = table[si];
      Stage<T> st;
      st.geom = g;
      st.open.has_proj = g.cin != g.cout;
      if (st.open.has_proj) st.open.proj = make_conv(g.cout, g.cin, 1, 1, false, rng);
      st.open.conv_a = make_conv(g.cout, g.cin, g.w, g.s, !cfg.use_batch_norm, rng);
      if (cfg.use_batch_norm) st.open.bn = make_bn(g.cout);
      st.open.conv_b = make_conv(g.cout, g.cout, 1, 1, true, rng);
      for (std::int64_t r = 1; r < cfg.ndepth; ++r) {
        ResLayer<T> res;
        res.conv1 = make_conv(g.cout, g.cout, 1, 1, !cfg.use_batch_norm, rng);
        if (cfg.use_batch_norm) res.bn = make_bn(g.cout);
        res.conv2 = make_conv(g.cout, g.cout, 1, 1, true, rng);
        st.rest.push_back(std::move(res));
      }
      stages_.push_back(std::move(st));
      if (g.out == 7) tap7_ = static_cast<int>(si);
      if (g.out == 5) tap5_ = static_cast<int>(si);
      if (g.out == 1) tap1_ = static_cast<int>(si);
    }
    AMDIM_CHECK(tap7_ >= 0 && tap5_ >= 0 && tap1_ >= 0, "encoder table misses a 7/5/1 tap");
    const std::int64_t c7 = table[static_cast<size_t>(tap7_)].cout;
    const std::int64_t c5 = table[static_cast<size_t>(tap5_)].cout;
    const std::int64_t c1 = table[static_cast<size_t>(tap1_)].cout;
    head7_.c1 = make_conv(cfg.nrkhs, c7, 1, 1, true, rng);
    head7_.c2 = make_conv(cfg.nrkhs, cfg.nrkhs, 1, 1, true, rng);
    head7_.skip = make_conv(cfg.nrkhs, c7, 1, 1, false, rng);
    head5_.c1 = make_conv(cfg.nrkhs, c5, 1, 1, true, rng);
    head5_.c2 = make_conv(cfg.nrkhs, cfg.nrkhs, 1, 1, true, rng);
    head5_.skip = make_conv(cfg.nrkhs, c5, 1, 1, false, rng);
    // phi_1 is an FC MLP on f1; on a 1x1 spatial map 1x1 convs are exactly
    // that, and they keep the forward pass per-sample pure
    head1_.c1 = make_conv(cfg.nrkhs, c1, 1, 1, true, rng);
    head1_.c2 = make_conv(cfg.nrkhs, cfg.nrkhs, 1, 1, true, rng);
    head1_.skip = make_conv(cfg.nrkhs, c1, 1, 1, false, rng);
  }

  const EncoderConfig& config() const { return cfg_; }

  FeatureSet<T> encode(const Tensor<T>& x, bool training) {
    AMDIM_CHECK(x.ndim() == 4 && x.dim(1) == 3 && x.dim(2) == cfg_.input_size &&
                    x.dim(3) == cfg_.input_size,
                "encode expects [B,3," << cfg_.input_size << "," << cfg_.input_size << "], got "
                                       << shape_str(x.shape()));
    FeatureSet<T> out;
    Tensor<T> h = x;
    for (size_t si = 0; si < stages_.size(); ++si) {
      h = forward_stage(stages_[si], h, training);
      if (static_cast<int>(si) == tap7_) out.f7 = h;
      if (static_cast<int>(si) == tap5_) out.f5 = h;
      if (static_cast<int>(si) == tap1_) out.f1 = h;
    }
    out.phi7 = forward_head(head7_, out.f7);
    out.phi5 = forward_head(head5_, out.f5);
    out.phi1 = reshape(forward_head(head1_, out.f1), {out.f1.dim(0), cfg_.nrkhs});
    out.f1 = reshape(out.f1, {out.f1.dim(0), out.f1.dim(1)});
    return out;
  }

  FeatureSet<T> encode(const ImageBatch& batch, bool training) {
    batch.check();
    std::vector<T> data(batch.data.begin(), batch.data.end());
    Tensor<T> x = Tensor<T>::from_data({batch.b, 3, batch.h, batch.w}, std::move(data));
    return encode(x, training);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (size_t si = 0; si < stages_.size(); ++si) {
      const std::string p = "stage" + std::to_string(si) + ".";
      Stage<T>& st = stages_[si];
      if (st.open.has_proj) out.emplace_back(p + "proj.w", st.open.proj.w);
      add_conv(out, p + "conv_a", st.open.conv_a);
      add_bn(out, p + "bn_a", st.open.bn);
      add_conv(out, p + "conv_b", st.open.conv_b);
      for (size_t r = 0; r < st.rest.size(); ++r) {
        const std::string q = p + "res" + std::to_string(r + 1) + ".";
        add_conv(out, q + "conv1", st.rest[r].conv1);
        add_bn(out, q + "bn", st.rest[r].bn);
        add_conv(out, q + "conv2", st.rest[r].conv2);
      }
    }
    const std::pair<std::string, PhiHead<T>*> heads[] = {
        {"head7.", &head7_}, {"head5.", &head5_}, {"head1.", &head1_}};
    for (auto& [p, h] : heads) {
      add_conv(out, p + "c1", h->c1);
      add_conv(out, p + "c2", h->c2);
      add_conv(out, p + "skip", h->skip);
    }
    return out;
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // batch-norm running statistics (checkpointed alongside parameters)
  std::vector<std::pair<std::string, std::vector<T>*>> named_buffers() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    if (!cfg_.use_batch_norm) return out;
    for (size_t si = 0; si < stages_.size(); ++si) {
      const std::string p = "stage" + std::to_string(si) + ".";
      out.emplace_back(p + "bn_a.running_mean", &stages_[si].open.bn.state.running_mean);
      out.emplace_back(p + "bn_a.running_var", &stages_[si].open.bn.state.running_var);
      for (size_t r = 0; r < stages_[si].rest.size(); ++r) {
        const std::string q = p + "res" + std::to_string(r + 1) + ".bn.";
        out.emplace_back(q + "running_mean", &stages_[si].rest[r].bn.state.running_mean);
        out.emplace_back(q + "running_var", &stages_[si].rest[r].bn.state.running_var);
      }
    }
    return out;
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (auto& t : parameters()) n += t.numel();
    return n;
  }

  ReceptiveField receptive_field(std::int64_t d, std::int64_t i, std::int64_t j) const {
    AMDIM_CHECK(d == 1 || d == 5 || d == 7, "receptive_field: layer dim must be 1, 5 or 7, got "
                                                << d);
    AMDIM_CHECK(i >= 0 && i < d && j >= 0 && j < d,
                "receptive_field: position (" << i << "," << j << ") invalid for " << d << "x" << d);
    std::int64_t jump = 1, rf = 1;
    for (const auto& st : stages_) {
      rf += (st.geom.w - 1) * jump;
      jump *= st.geom.s;
      if (st.geom.out == d) break;
    }
    ReceptiveField out;
    out.d = d;
    out.i = i;
    out.j = j;
    out.top = i * jump;
    out.left = j * jump;
    out.bottom = out.top + rf - 1;
    out.right = out.left + rf - 1;
    AMDIM_CHECK(out.bottom < cfg_.input_size && out.right < cfg_.input_size,
                "receptive field escapes the image (geometry table bug)");
    return out;
  }

  double rf_overlap(std::int64_t d, std::pair<std::int64_t, std::int64_t> pos_a,
                    std::pair<std::int64_t, std::int64_t> pos_b) const {
    const auto a = receptive_field(d, pos_a.first, pos_a.second);
    const auto b = receptive_field(d, pos_b.first, pos_b.second);
    const std::int64_t ih = std::max<std::int64_t>(
        0, std::min(a.bottom, b.bottom) - std::max(a.top, b.top) + 1);
    const std::int64_t iw = std::max<std::int64_t>(
        0, std::min(a.right, b.right) - std::max(a.left, b.left) + 1);
    const std::int64_t inter = ih * iw;
    const std::int64_t area_a = (a.bottom - a.top + 1) * (a.right - a.left + 1);
    const std::int64_t area_b = (b.bottom - b.top + 1) * (b.right - b.left + 1);
    return static_cast<double>(inter) / static_cast<double>(area_a + area_b - inter);
  }

 private:
  static ConvLayer<T> make_conv(std::int64_t cout, std::int64_t cin, std::int64_t k,
                                std::int64_t stride, bool bias, CounterRng& rng) {
    ConvLayer<T> l;
    l.w = Tensor<T>::he_uniform({cout, cin, k, k}, cin * k * k, rng).set_requires_grad();
    l.has_bias = bias;
    if (bias) l.b = Tensor<T>::zeros({cout}).set_requires_grad();
    l.stride = stride;
    return l;
  }

  BNLayer<T> make_bn(std::int64_t c) {
    BNLayer<T> bn;
    bn.gamma = Tensor<T>::full({c}, T(1)).set_requires_grad();
    bn.beta = Tensor<T>::zeros({c}).set_requires_grad();
    bn.state.running_mean.assign(static_cast<size_t>(c), T(0));
    bn.state.running_var.assign(static_cast<size_t>(c), T(1));
    return bn;
  }

  static Tensor<T> apply(const ConvLayer<T>& l, const Tensor<T>& x) {
    Tensor<T> y = conv2d(x, l.w, l.stride);
    return l.has_bias ? add_channel_bias(y, l.b) : y;
  }

  Tensor<T> forward_stage(Stage<T>& st, const Tensor<T>& x, bool training) {
    Tensor<T> base = mean_pool(x, st.geom.w, st.geom.s);
    if (st.open.has_proj) base = apply(st.open.proj, base);
    Tensor<T> r = apply(st.open.conv_a, x);
    if (cfg_.use_batch_norm)
      r = batch_norm2d(r, st.open.bn.gamma, st.open.bn.beta, &st.open.bn.state, training);
    Tensor<T> h = add(base, apply(st.open.conv_b, relu(r)));
    for (auto& res : st.rest) {
      Tensor<T> rr = apply(res.conv1, h);
      if (cfg_.use_batch_norm)
        rr = batch_norm2d(rr, res.bn.gamma, res.bn.beta, &res.bn.state, training);
      h = add(h, apply(res.conv2, relu(rr)));
    }
    return h;
  }

  static Tensor<T> forward_head(const PhiHead<T>& head, const Tensor<T>& f) {
    return add(apply(head.c2, relu(apply(head.c1, f))), apply(head.skip, f));
  }

  static void add_conv(std::vector<std::pair<std::string, Tensor<T>>>& out, const std::string& name,
                       ConvLayer<T>& l) {
    out.emplace_back(name + ".w", l.w);
    if (l.has_bias) out.emplace_back(name + ".b", l.b);
  }

  void add_bn(std::vector<std::pair<std::string, Tensor<T>>>& out, const std::string& name,
              BNLayer<T>& bn) {
    if (!cfg_.use_batch_norm) return;
    out.emplace_back(name + ".gamma", bn.gamma);
    out.emplace_back(name + ".beta", bn.beta);
  }

  EncoderConfig cfg_;
  std::vector<Stage<T>> stages_;
  int tap7_ = -1, tap5_ = -1, tap1_ = -1;
  PhiHead<T> head7_, head5_, head1_;
};

template <typename T>
Encoder<T> build_encoder(const EncoderConfig& cfg) {
  return Encoder<T>(cfg);
}

}  // namespace amdim
