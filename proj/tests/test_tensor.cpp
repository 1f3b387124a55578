#include <cmath>
#include <vector>

#include "doctest.h"

#include "amdim/adam.hpp"
#include "amdim/tensor.hpp"
#include "oracles.hpp"

using amdim::CounterRng;
using amdim::Shape;
using Td = amdim::Tensor<double>;

namespace {

Td random_leaf(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  auto t = Td::from_data(shape, oracle::random_vec(static_cast<size_t>(amdim::shape_numel(shape)), rng, lo, hi));
  t.set_requires_grad();
  return t;
}

}  // namespace

TEST_CASE("conv2d forward basics") {
  // all-ones 3x3 input, all-ones 2x2 kernel -> 2x2 map of 4.0
  auto in = Td::full({1, 1, 3, 3}, 1.0);
  auto k = Td::full({1, 1, 2, 2}, 1.0);
  auto out = amdim::conv2d(in, k, 1);
  CHECK(out.shape() == Shape{1, 1, 2, 2});
  for (double v : out.data()) CHECK(v == doctest::Approx(4.0));

  // 1x1 identity kernel is the identity map
  CounterRng rng(7);
  auto x = random_leaf({2, 1, 4, 4}, rng);
  auto id = Td::full({1, 1, 1, 1}, 1.0);
  auto y = amdim::conv2d(x, id, 1);
  for (size_t i = 0; i < x.data().size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d matches nested-loop oracle") {
  CounterRng rng(11);
  auto in = oracle::random_vec(1 * 2 * 5 * 5, rng);
  auto kv = oracle::random_vec(3 * 2 * 3 * 3, rng);
  auto t = amdim::conv2d(Td::from_data({1, 2, 5, 5}, in), Td::from_data({3, 2, 3, 3}, kv), 2);
  auto ref = oracle::conv2d_ref(in, 1, 2, 5, 5, kv, 3, 3, 3, 2);
  REQUIRE(t.data().size() == ref.size());
  for (size_t i = 0; i < ref.size(); ++i) CHECK(t.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  // a few random instances
  for (int trial = 0; trial < 8; ++trial) {
    CounterRng r2(100 + trial);
    const std::int64_t B = 1 + r2.next_below(2), Cin = 1 + r2.next_below(3),
                       Cout = 1 + r2.next_below(3);
    const std::int64_t kh = 1 + r2.next_below(3), s = 1 + r2.next_below(2);
    const std::int64_t H = kh + s * (1 + static_cast<std::int64_t>(r2.next_below(3)));
    auto iv = oracle::random_vec(static_cast<size_t>(B * Cin * H * H), r2);
    auto kk = oracle::random_vec(static_cast<size_t>(Cout * Cin * kh * kh), r2);
    auto got = amdim::conv2d(Td::from_data({B, Cin, H, H}, iv), Td::from_data({Cout, Cin, kh, kh}, kk), s);
    auto want = oracle::conv2d_ref(iv, B, Cin, H, H, kk, Cout, kh, kh, s);
    for (size_t i = 0; i < want.size(); ++i)
      CHECK(std::abs(got.data()[i] - want[i]) < 1e-12);
  }
}

TEST_CASE("conv2d rejects bad geometry") {
  auto in = Td::full({1, 1, 5, 5}, 1.0);
  auto k = Td::full({1, 1, 2, 2}, 1.0);
  CHECK_THROWS_AS(amdim::conv2d(in, k, 2), std::invalid_argument);  // (5-2)/2 not integral
  auto k2 = Td::full({1, 2, 2, 2}, 1.0);
  CHECK_THROWS_AS(amdim::conv2d(in, k2, 1), std::invalid_argument);  // channel mismatch
  auto k3 = Td::full({1, 1, 6, 6}, 1.0);
  CHECK_THROWS_AS(amdim::conv2d(in, k3, 1), std::invalid_argument);  // kernel larger than input
}

TEST_CASE("mean_pool forward") {
  auto in = Td::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  auto out = amdim::mean_pool(in, 2, 2);
  CHECK(out.numel() == 1);
  CHECK(out.item() == doctest::Approx(2.5));

  auto c = Td::full({1, 2, 6, 6}, 0.37);
  auto pooled = amdim::mean_pool(c, 3, 3);
  for (double v : pooled.data()) CHECK(v == doctest::Approx(0.37));

  CounterRng rng(5);
  auto iv = oracle::random_vec(36, rng);
  auto got = amdim::mean_pool(Td::from_data({1, 1, 6, 6}, iv), 3, 3);
  auto want = oracle::mean_pool_ref(iv, 1, 1, 6, 6, 3, 3);
  for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got.data()[i] - want[i]) < 1e-12);

  CHECK_THROWS_AS(amdim::mean_pool(Td::full({1, 1, 5, 5}, 1.0), 2, 2), std::invalid_argument);
}

TEST_CASE("elementwise basics") {
  CHECK(amdim::relu(Td::scalar(-1.5)).item() == 0.0);
  CHECK(amdim::tanh(Td::scalar(0.0)).item() == 0.0);

  // d/ds [20*tanh(s/20)] at s = 0 is 1
  auto s = Td::scalar(0.0).set_requires_grad();
  auto clipped = amdim::scale(amdim::tanh(amdim::scale(s, 1.0 / 20.0)), 20.0);
  amdim::backward(clipped);
  CHECK(s.grad()[0] == doctest::Approx(1.0));

  CHECK_THROWS_AS(amdim::add(Td::full({2, 2}, 1.0), Td::full({3}, 1.0)), std::invalid_argument);
}

TEST_CASE("matmul") {
  auto eye = Td::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CounterRng rng(3);
  auto a = Td::from_data({3, 4}, oracle::random_vec(12, rng));
  auto out = amdim::matmul(eye, a);
  for (size_t i = 0; i < a.data().size(); ++i) CHECK(out.data()[i] == doctest::Approx(a.data()[i]));

  auto r = amdim::matmul(Td::from_data({1, 2}, {1, 2}), Td::from_data({2, 1}, {3, 4}));
  CHECK(r.item() == doctest::Approx(11.0));

  auto av = oracle::random_vec(24, rng);
  auto bv = oracle::random_vec(30, rng);
  auto got = amdim::matmul(Td::from_data({4, 6}, av), Td::from_data({6, 5}, bv));
  auto want = oracle::matmul_ref(av, bv, 4, 6, 5);
  for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got.data()[i] - want[i]) < 1e-12);

  CHECK_THROWS_AS(amdim::matmul(Td::full({2, 3}, 1.0), Td::full({4, 2}, 1.0)),
                  std::invalid_argument);
}

TEST_CASE("log_softmax values and stability") {
  auto u = amdim::log_softmax(Td::from_data({2}, {0.0, 0.0}));
  CHECK(u.data()[0] == doctest::Approx(-std::log(2.0)));
  CHECK(u.data()[1] == doctest::Approx(-std::log(2.0)));

  auto single = amdim::log_softmax(Td::from_data({1}, {123.0}));
  CHECK(single.item() == 0.0);

  auto big = amdim::log_softmax(Td::from_data({2}, {1000.0, 1000.0}));
  CHECK(big.data()[0] == doctest::Approx(-std::log(2.0)));

  // exp(log_softmax) sums to 1 along the axis
  for (int trial = 0; trial < 10; ++trial) {
    CounterRng rng(40 + trial);
    auto x = Td::from_data({3, 7}, oracle::random_vec(21, rng, -30.0, 30.0));
    auto y = amdim::log_softmax(x, 1);
    for (int row = 0; row < 3; ++row) {
      double z = 0.0;
      for (int c = 0; c < 7; ++c) z += std::exp(y.data()[static_cast<size_t>(row * 7 + c)]);
      CHECK(std::abs(z - 1.0) < 1e-12);
    }
  }

  CHECK_THROWS_AS(amdim::log_softmax(Td::from_data({2}, {1.0, std::nan("")})),
                  std::invalid_argument);
}

TEST_CASE("backward basics") {
  CounterRng rng(9);
  auto x = random_leaf({2, 3}, rng);
  auto loss = amdim::sum(x);
  amdim::backward(loss);
  for (double g : x.grad()) CHECK(g == 1.0);

  auto y = Td::scalar(3.0).set_requires_grad();
  auto sq = amdim::mul(y, y);
  amdim::backward(sq);
  CHECK(y.grad()[0] == doctest::Approx(6.0));

  // repeated backward accumulates
  amdim::backward(sq);
  CHECK(y.grad()[0] == doctest::Approx(12.0));

  CHECK_THROWS_AS(amdim::backward(x), std::invalid_argument);  // non-scalar
}

TEST_CASE("finite-difference checks for every primitive") {
  int shapes_checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    CounterRng rng(1000 + trial);
    const std::int64_t m = 2 + rng.next_below(3), k = 2 + rng.next_below(3),
                       p = 2 + rng.next_below(3);

    {
      auto a = random_leaf({m, k}, rng);
      auto b = random_leaf({m, k}, rng);
      std::vector<Td> leaves{a, b};
      CHECK(oracle::fd_check(leaves, [&] {
              return amdim::sum(amdim::mul(amdim::add(a, b), b));
            }) < 1e-4);
    }
    {
      auto a = random_leaf({m, k}, rng);
      auto s = random_leaf({1}, rng);
      std::vector<Td> leaves{a, s};
      CHECK(oracle::fd_check(leaves, [&] {
              return amdim::mean(amdim::add(amdim::mul(a, s), amdim::scale(a, 0.5)));
            }) < 1e-4);
    }
    {
      // keep relu inputs away from the kink
      auto a = random_leaf({m, k}, rng);
      for (auto& v : a.data())
        if (std::abs(v) < 1e-3) v = 0.5;
      std::vector<Td> leaves{a};
      CHECK(oracle::fd_check(leaves, [&] { return amdim::sum(amdim::relu(a)); }) < 1e-4);
      CHECK(oracle::fd_check(leaves, [&] { return amdim::sum(amdim::tanh(a)); }) < 1e-4);
    }
    {
      auto a = random_leaf({m, k}, rng);
      auto b = random_leaf({k, p}, rng);
      std::vector<Td> leaves{a, b};
      CHECK(oracle::fd_check(leaves, [&] {
              return amdim::sum(amdim::tanh(amdim::matmul(a, b)));
            }) < 1e-4);
    }
    {
      auto x = random_leaf({2, 2, 5, 5}, rng);
      auto kk = random_leaf({3, 2, 3, 3}, rng);
      std::vector<Td> leaves{x, kk};
      CHECK(oracle::fd_check(leaves, [&] {
              return amdim::sum(amdim::tanh(amdim::conv2d(x, kk, 2)));
            }) < 1e-4);
    }
    {
      auto x = random_leaf({1, 2, 6, 6}, rng);
      std::vector<Td> leaves{x};
      CHECK(oracle::fd_check(leaves, [&] {
              return amdim::sum(amdim::tanh(amdim::mean_pool(x, 3, 3)));
            }) < 1e-4);
    }
    {
      auto x = random_leaf({m, 5}, rng, -3.0, 3.0);
      auto w = Td::from_data({m, 5}, oracle::random_vec(static_cast<size_t>(m * 5), rng));
      std::vector<Td> leaves{x};
      CHECK(oracle::fd_check(leaves, [&] {
              return amdim::sum(amdim::mul(amdim::log_softmax(x, 1), w));
            }) < 1e-4);
    }
    {
      auto x = random_leaf({m, k}, rng);
      auto b = random_leaf({k}, rng);
      std::vector<Td> leaves{x, b};
      CHECK(oracle::fd_check(leaves, [&] {
              return amdim::sum(amdim::tanh(amdim::add_bias(x, b)));
            }) < 1e-4);
    }
    {
      auto x = random_leaf({2, 3, 2, 2}, rng);
      auto b = random_leaf({3}, rng);
      std::vector<Td> leaves{x, b};
      CHECK(oracle::fd_check(leaves, [&] {
              return amdim::sum(amdim::tanh(amdim::add_channel_bias(x, b)));
            }) < 1e-4);
    }
    {
      auto x = random_leaf({3, 2, 2, 2}, rng);
      auto g = random_leaf({2}, rng, 0.5, 1.5);
      auto bt = random_leaf({2}, rng);
      std::vector<Td> leaves{x, g, bt};
      CHECK(oracle::fd_check(leaves, [&] {
              amdim::BatchNormState<double> st{{0.0, 0.0}, {1.0, 1.0}};
              return amdim::sum(
                  amdim::tanh(amdim::batch_norm2d(x, g, bt, &st, true)));
            }, 1e-6) < 1e-4);
      CHECK(oracle::fd_check(leaves, [&] {
              amdim::BatchNormState<double> st{{0.1, -0.2}, {1.2, 0.8}};
              return amdim::sum(
                  amdim::tanh(amdim::batch_norm2d(x, g, bt, &st, false)));
            }) < 1e-4);
    }
    {
      auto x = random_leaf({2, 3, 2, 2}, rng);
      std::vector<Td> leaves{x};
      CHECK(oracle::fd_check(leaves, [&] {
              auto perm = amdim::permute(x, {0, 2, 3, 1});
              auto flat = amdim::reshape(perm, {8, 3});
              return amdim::sum(amdim::tanh(amdim::transpose(flat)));
            }) < 1e-4);
    }
    {
      auto x = random_leaf({6}, rng);
      std::vector<Td> leaves{x};
      CHECK(oracle::fd_check(leaves, [&] {
              return amdim::sum(amdim::tanh(amdim::gather(x, {5, 0, 0, 3}, {4})));
            }) < 1e-4);
    }
    {
      auto a = random_leaf({2, 3}, rng);
      auto b = random_leaf({1, 3}, rng);
      std::vector<Td> leaves{a, b};
      CHECK(oracle::fd_check(leaves, [&] {
              return amdim::sum(amdim::tanh(amdim::concat_rows<double>({a, b})));
            }) < 1e-4);
    }
    {
      const std::int64_t nA = 3, nB = 3, nC = 2;
      auto s = random_leaf({nA, nB, nC}, rng, -2.0, 2.0);
      std::vector<std::int64_t> owner{0, 1, 2};
      std::vector<Td> leaves{s};
      CHECK(oracle::fd_check(leaves, [&] {
              return amdim::mean(amdim::nce_log_softmax_terms(s, owner));
            }) < 1e-4);
    }
    ++shapes_checked;
  }
  CHECK(shapes_checked == 20);
}

TEST_CASE("gradients are deterministic across identical rebuilds") {
  auto run = [] {
    CounterRng rng(77);
    auto x = Td::from_data({2, 2, 5, 5}, oracle::random_vec(100, rng));
    x.set_requires_grad();
    auto k = Td::from_data({2, 2, 3, 3}, oracle::random_vec(36, rng));
    k.set_requires_grad();
    auto h = amdim::relu(amdim::conv2d(x, k, 1));
    auto flat = amdim::reshape(h, {2, 2 * 3 * 3});
    auto loss = amdim::mean(amdim::log_softmax(flat, 1));
    amdim::backward(loss);
    std::vector<double> out = x.grad();
    out.insert(out.end(), k.grad().begin(), k.grad().end());
    return out;
  };
  auto g1 = run();
  auto g2 = run();
  REQUIRE(g1.size() == g2.size());
  for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("adam") {
  using amdim::AdamConfig;
  using amdim::AdamState;

  // zero gradient leaves parameters unchanged
  {
    auto p = Td::from_data({3}, {1.0, -2.0, 0.5}).set_requires_grad();
    std::vector<Td> params{p};
    AdamState<double> st;
    st.init_for(params);
    p.zero_grad();
    amdim::adam_step(params, st, AdamConfig{});
    CHECK(p.data()[0] == 1.0);
    CHECK(p.data()[1] == -2.0);
    CHECK(p.data()[2] == 0.5);
  }

  // first step moves by -lr * sign(g) up to eps effects
  {
    auto p = Td::from_data({2}, {0.0, 0.0}).set_requires_grad();
    std::vector<Td> params{p};
    AdamState<double> st;
    st.init_for(params);
    p.grad() = {0.3, -4.0};
    AdamConfig cfg;
    cfg.lr = 1e-2;
    amdim::adam_step(params, st, cfg);
    CHECK(p.data()[0] == doctest::Approx(-1e-2).epsilon(1e-6));
    CHECK(p.data()[1] == doctest::Approx(1e-2).epsilon(1e-6));
  }

  // two steps against a hand-rolled scalar oracle
  {
    const double lr = 2e-4, b1 = 0.8, b2 = 0.999, eps = 1e-8;
    double w = 0.7, m = 0.0, v = 0.0;
    const double g1 = 0.33, g2 = -0.12;
    auto p = Td::from_data({1}, {w}).set_requires_grad();
    std::vector<Td> params{p};
    AdamState<double> st;
    st.init_for(params);
    AdamConfig cfg;
    int t = 0;
    for (double g : {g1, g2}) {
      ++t;
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g * g;
      const double mh = m / (1 - std::pow(b1, t));
      const double vh = v / (1 - std::pow(b2, t));
      w -= lr * mh / (std::sqrt(vh) + eps);
      p.zero_grad();
      p.grad()[0] = g;
      amdim::adam_step(params, st, cfg);
    }
    CHECK(std::abs(p.data()[0] - w) < 1e-12);
  }
}
