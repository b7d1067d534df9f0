#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "xdecomp/autodiff.hpp"
#include "xdecomp/parallel.hpp"
#include "xdecomp/rng.hpp"

using namespace xdecomp;

namespace {

using G = GraphT<double>;
using Td = TensorT<double>;

Td randn(std::vector<int> shape, std::uint64_t seed, double scale = 1.0) {
  Rng r(seed);
  Td t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = scale * r.normal();
  return t;
}

// values bounded away from zero so relu/abs difference windows stay smooth
Td randn_offzero(std::vector<int> shape, std::uint64_t seed, double margin = 0.25) {
  Td t = randn(std::move(shape), seed);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double s = t[i] < 0.0 ? -1.0 : 1.0;
    t[i] = s * (margin + std::abs(t[i]));
  }
  return t;
}

// elementwise grad check of loss = mean((op(inputs))^2)
double check_op(std::vector<Td*> inputs,
                const std::function<G::Value(G&, const std::vector<G::Value>&)>& op,
                std::uint64_t graph_seed = 0) {
  auto eval = [&](std::vector<Td>* grads) -> double {
    G g(graph_seed);
    std::vector<G::Value> leaves;
    for (auto* t : inputs) leaves.push_back(g.leaf(*t, grads != nullptr));
    auto loss = g.mean_all(g.square(op(g, leaves)));
    const double v = g.value(loss)[0];
    if (grads) {
      g.backward(loss);
      for (auto l : leaves) grads->push_back(g.grad(l));
    }
    return v;
  };
  const auto rep = grad_check<double>(
      std::span<Td* const>(inputs.data(), inputs.size()), eval, 1e-6, 1e-5);
  INFO("worst param " << rep.worst_param << " elem " << rep.worst_elem);
  CHECK(rep.pass);
  return double(rep.max_rel_err);
}

}  // namespace

TEST_CASE("conv2d forward matches a hand-computed example") {
  G g;
  Td x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Td w = Td::full({1, 1, 3, 3}, 1.0);
  Td b({1}, {0.5});
  auto y = g.conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 1, Pad::same);
  const Td& out = g.value(y);
  REQUIRE(out.shape() == std::vector<int>{1, 1, 3, 3});
  CHECK(out.at4(0, 0, 0, 0) == doctest::Approx(12.5));
  CHECK(out.at4(0, 0, 1, 1) == doctest::Approx(45.5));
  CHECK(out.at4(0, 0, 2, 2) == doctest::Approx(28.5));

  auto yv = g.conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 1, Pad::valid);
  REQUIRE(g.value(yv).shape() == std::vector<int>{1, 1, 1, 1});
  CHECK(g.value(yv)[0] == doctest::Approx(45.5));

  auto ys = g.conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 2, Pad::same);
  const Td& s = g.value(ys);
  REQUIRE(s.shape() == std::vector<int>{1, 1, 2, 2});
  CHECK(s.at4(0, 0, 0, 0) == doctest::Approx(12.5));
  CHECK(s.at4(0, 0, 0, 1) == doctest::Approx(16.5));
  CHECK(s.at4(0, 0, 1, 0) == doctest::Approx(24.5));
  CHECK(s.at4(0, 0, 1, 1) == doctest::Approx(28.5));
}

TEST_CASE("conv2d validates shapes") {
  G g;
  auto x = g.leaf(randn({1, 2, 4, 4}, 1));
  auto w = g.leaf(randn({3, 5, 3, 3}, 2));  // in_ch mismatch
  auto b = g.leaf(randn({3}, 3));
  CHECK_THROWS(g.conv2d(x, w, b));
  auto w2 = g.leaf(randn({3, 2, 3, 3}, 2));
  auto bad_b = g.leaf(randn({4}, 3));
  CHECK_THROWS(g.conv2d(x, w2, bad_b));
  CHECK_NOTHROW(g.conv2d(x, w2, b));
}

TEST_CASE("maxpool2 picks the max and routes gradient to the first tie") {
  G g;
  Td x({1, 1, 2, 2}, {5.0, 5.0, 3.0, 1.0});
  auto xv = g.leaf(x, true);
  auto y = g.maxpool2(xv);
  CHECK(g.value(y).numel() == 1);
  CHECK(g.value(y)[0] == 5.0);
  auto loss = g.sum_all(y);
  g.backward(loss);
  const Td& gx = g.grad(xv);
  CHECK(gx[0] == 1.0);  // row-major first occurrence wins
  CHECK(gx[1] == 0.0);
  CHECK(gx[2] == 0.0);

  G g2;
  CHECK_THROWS(g2.maxpool2(g2.leaf(randn({1, 1, 3, 3}, 4))));  // odd dims
}

TEST_CASE("upsample2 replicates 2x2 blocks") {
  G g;
  Td x({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = g.upsample2(g.leaf(x));
  const Td& out = g.value(y);
  REQUIRE(out.shape() == std::vector<int>{1, 1, 4, 4});
  CHECK(out.at4(0, 0, 0, 0) == 1.0);
  CHECK(out.at4(0, 0, 0, 1) == 1.0);
  CHECK(out.at4(0, 0, 1, 1) == 1.0);
  CHECK(out.at4(0, 0, 0, 2) == 2.0);
  CHECK(out.at4(0, 0, 3, 3) == 4.0);
}

TEST_CASE("relu clamps forward values") {
  G g;
  Td x({1, 1, 1, 4}, {-2.0, -0.0, 0.5, 3.0});
  const Td& y = g.value(g.relu(g.leaf(x)));
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 0.5);
  CHECK(y[3] == 3.0);
}

TEST_CASE("concat_channels stacks a before b") {
  G g;
  Td a = randn({2, 1, 2, 2}, 5);
  Td b = randn({2, 2, 2, 2}, 6);
  const Td& y = g.value(g.concat_channels(g.leaf(a), g.leaf(b)));
  REQUIRE(y.shape() == std::vector<int>{2, 3, 2, 2});
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        CHECK(y.at4(n, 0, i, j) == a.at4(n, 0, i, j));
        CHECK(y.at4(n, 1, i, j) == b.at4(n, 0, i, j));
        CHECK(y.at4(n, 2, i, j) == b.at4(n, 1, i, j));
      }
}

TEST_CASE("sum_channels collapses the channel axis") {
  G g;
  Td x = randn({2, 3, 2, 2}, 7);
  const Td& y = g.value(g.sum_channels(g.leaf(x)));
  REQUIRE(y.shape() == std::vector<int>{2, 1, 2, 2});
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        CHECK(y.at4(n, 0, i, j) ==
              doctest::Approx(x.at4(n, 0, i, j) + x.at4(n, 1, i, j) +
                              x.at4(n, 2, i, j)));
}

TEST_CASE("scalar reductions and arithmetic") {
  G g;
  Td x({1, 1, 2, 2}, {1.0, -2.0, 3.0, -4.0});
  CHECK(g.value(g.sum_all(g.leaf(x)))[0] == doctest::Approx(-2.0));
  CHECK(g.value(g.mean_all(g.leaf(x)))[0] == doctest::Approx(-0.5));
  CHECK(g.value(g.sum_all(g.abs(g.leaf(x))))[0] == doctest::Approx(10.0));
  CHECK(g.value(g.sum_all(g.square(g.leaf(x))))[0] == doctest::Approx(30.0));
  CHECK(g.value(g.sqrt_scalar(g.sum_all(g.square(g.leaf(x)))))[0] ==
        doctest::Approx(std::sqrt(30.0)));
  auto a = g.leaf(Td({1}, {3.0}));
  auto b = g.leaf(Td({1}, {5.0}));
  CHECK(g.value(g.add(a, b))[0] == 8.0);
  CHECK(g.value(g.sub(a, b))[0] == -2.0);
  CHECK(g.value(g.add_scaled(a, 2.0, b, -0.5))[0] == doctest::Approx(3.5));
  CHECK(g.value(g.scale(a, -4.0))[0] == -12.0);
}

TEST_CASE("dropout eval mode and p=0 are identity; train mode is a seeded mask") {
  Td x = randn({1, 4, 8, 8}, 11);
  {
    G g(99);
    auto y = g.dropout(g.leaf(x), 0.5, RunMode::eval);
    CHECK(g.value(y).raw() == x.raw());
    auto z = g.dropout(g.leaf(x), 0.0, RunMode::train);
    CHECK(g.value(z).raw() == x.raw());
  }
  auto masked = [&](std::uint64_t seed) {
    G g(seed);
    return g.value(g.dropout(g.leaf(x), 0.5, RunMode::train)).raw();
  };
  const auto m1 = masked(99), m2 = masked(99), m3 = masked(100);
  CHECK(m1 == m2);
  CHECK(m1 != m3);
  int dropped = 0;
  for (std::size_t i = 0; i < m1.size(); ++i) {
    if (m1[i] == 0.0) {
      ++dropped;
    } else {
      CHECK(m1[i] == doctest::Approx(x[std::int64_t(i)] / 0.5));
    }
  }
  CHECK(dropped > 40);  // ~128 of 256 expected
  CHECK(dropped < 216);

  G g;
  CHECK_THROWS(g.dropout(g.leaf(x), 1.0, RunMode::train));
  CHECK_THROWS(g.dropout(g.leaf(x), -0.1, RunMode::train));
}

TEST_CASE("backward requires a scalar root and respects requires_grad") {
  G g;
  Td x = randn({1, 1, 2, 2}, 1);
  auto xv = g.leaf(x, true);
  auto yv = g.leaf(randn({1, 1, 2, 2}, 2), false);
  CHECK_THROWS(g.backward(xv));  // not a scalar
  auto loss = g.sum_all(g.square(g.add(xv, yv)));
  g.backward(loss);
  bool any = false;
  for (std::int64_t i = 0; i < 4; ++i) any = any || g.grad(xv)[i] != 0.0;
  CHECK(any);
  for (std::int64_t i = 0; i < 4; ++i) CHECK(g.grad(yv)[i] == 0.0);
}

TEST_CASE("per-op gradients agree with central differences") {
  constexpr std::uint64_t kSeeds = 20;
  SUBCASE("conv2d same") {
    for (std::uint64_t s = 1; s <= kSeeds; ++s) {
      Td x = randn({2, 3, 6, 6}, s * 10 + 1, 0.7);
      Td w = randn({4, 3, 3, 3}, s * 10 + 2, 0.4);
      Td b = randn({4}, s * 10 + 3, 0.3);
      check_op({&x, &w, &b}, [](G& g, const std::vector<G::Value>& v) {
        return g.conv2d(v[0], v[1], v[2], 1, Pad::same);
      });
    }
  }
  SUBCASE("conv2d valid stride 2") {
    for (std::uint64_t s = 1; s <= kSeeds; ++s) {
      Td x = randn({2, 3, 6, 6}, s * 10 + 1, 0.7);
      Td w = randn({4, 3, 3, 3}, s * 10 + 2, 0.4);
      Td b = randn({4}, s * 10 + 3, 0.3);
      check_op({&x, &w, &b}, [](G& g, const std::vector<G::Value>& v) {
        return g.conv2d(v[0], v[1], v[2], 2, Pad::valid);
      });
    }
  }
  SUBCASE("maxpool2") {
    for (std::uint64_t s = 1; s <= kSeeds; ++s) {
      Td x = randn({2, 3, 6, 6}, s * 10 + 1, 0.7);
      check_op({&x}, [](G& g, const std::vector<G::Value>& v) {
        return g.maxpool2(v[0]);
      });
    }
  }
  SUBCASE("upsample2") {
    for (std::uint64_t s = 1; s <= kSeeds; ++s) {
      Td x = randn({2, 3, 6, 6}, s * 10 + 1, 0.7);
      check_op({&x}, [](G& g, const std::vector<G::Value>& v) {
        return g.upsample2(v[0]);
      });
    }
  }
  SUBCASE("relu off-zero") {
    for (std::uint64_t s = 1; s <= kSeeds; ++s) {
      Td xo = randn_offzero({2, 3, 6, 6}, s * 10 + 4);
      check_op({&xo}, [](G& g, const std::vector<G::Value>& v) {
        return g.relu(v[0]);
      });
    }
  }
  SUBCASE("abs off-zero") {
    for (std::uint64_t s = 1; s <= kSeeds; ++s) {
      Td xo = randn_offzero({2, 3, 6, 6}, s * 10 + 5);
      check_op({&xo}, [](G& g, const std::vector<G::Value>& v) {
        return g.abs(v[0]);
      });
    }
  }
  SUBCASE("concat + sum_channels") {
    for (std::uint64_t s = 1; s <= kSeeds; ++s) {
      Td x = randn({2, 3, 6, 6}, s * 10 + 1, 0.7);
      Td y = randn({2, 2, 6, 6}, s * 10 + 6);
      check_op({&x, &y}, [](G& g, const std::vector<G::Value>& v) {
        return g.sum_channels(g.concat_channels(v[0], v[1]));
      });
    }
  }
  SUBCASE("dropout train") {
    for (std::uint64_t s = 1; s <= kSeeds; ++s) {
      Td x = randn({2, 3, 6, 6}, s * 10 + 1, 0.7);
      check_op({&x},
               [](G& g, const std::vector<G::Value>& v) {
                 return g.dropout(v[0], 0.4, RunMode::train);
               },
               s);
    }
  }
  SUBCASE("add_scaled + scale") {
    for (std::uint64_t s = 1; s <= kSeeds; ++s) {
      Td x = randn({2, 3, 6, 6}, s * 10 + 1, 0.7);
      Td y = randn({2, 3, 6, 6}, s * 10 + 7);
      check_op({&x, &y}, [](G& g, const std::vector<G::Value>& v) {
        return g.add_scaled(g.scale(v[0], 1.5), 2.0, v[1], -0.75);
      });
    }
  }
  SUBCASE("sqrt of sum of squares") {
    for (std::uint64_t s = 1; s <= kSeeds; ++s) {
      Td x = randn({2, 3, 6, 6}, s * 10 + 1, 0.7);
      check_op({&x}, [](G& g, const std::vector<G::Value>& v) {
        return g.sqrt_scalar(g.sum_all(g.square(v[0])));
      });
    }
  }
  SUBCASE("fan-out reuse") {
    // the same node feeds two consumers; gradients must accumulate
    for (std::uint64_t s = 1; s <= kSeeds; ++s) {
      Td x = randn({2, 3, 6, 6}, s * 10 + 1, 0.7);
      check_op({&x}, [](G& g, const std::vector<G::Value>& v) {
        auto sq = g.square(v[0]);
        return g.add(g.sum_all(sq), g.mean_all(sq));
      });
    }
  }
}

TEST_CASE("composite network gradient via directional projections") {
  for (std::uint64_t seed : {3ull, 14ull, 26ull}) {
    Td x = randn({1, 1, 8, 8}, seed);
    Td w1 = randn({2, 1, 3, 3}, seed + 100, 0.5);
    Td b1 = randn({2}, seed + 101, 0.3);
    Td w2 = randn({2, 2, 3, 3}, seed + 102, 0.5);
    Td b2 = randn({2}, seed + 103, 0.3);
    Td w3 = randn({1, 4, 3, 3}, seed + 104, 0.5);
    Td b3 = randn({1}, seed + 105, 0.3);
    std::vector<Td*> params{&w1, &b1, &w2, &b2, &w3, &b3};
    auto eval = [&](std::vector<Td>* grads) -> double {
      G g(seed);
      auto xv = g.leaf(x);
      std::vector<G::Value> leaves;
      for (auto* p : params) leaves.push_back(g.leaf(*p, grads != nullptr));
      auto h1 = g.relu(g.conv2d(xv, leaves[0], leaves[1]));
      auto h2 = g.maxpool2(g.relu(g.conv2d(h1, leaves[2], leaves[3])));
      auto up = g.concat_channels(g.upsample2(h2), h1);  // skip with fan-out
      auto out = g.conv2d(up, leaves[4], leaves[5]);
      auto loss = g.mean_all(g.square(out));
      const double v = g.value(loss)[0];
      if (grads) {
        g.backward(loss);
        for (auto l : leaves) grads->push_back(g.grad(l));
      }
      return v;
    };
    const auto rep = grad_check_directional<double>(
        std::span<Td* const>(params.data(), params.size()), eval, 6, 1e-5, 1e-5,
        seed);
    INFO("seed " << seed << " max rel " << double(rep.max_rel_err));
    CHECK(rep.pass);
  }
}

TEST_CASE("fault injection flips the relu backward and the checker notices") {
  Td x = randn_offzero({2, 2, 4, 4}, 31);
  auto run = [&] {
    auto eval = [&](std::vector<Td>* grads) -> double {
      G g;
      auto xv = g.leaf(x, grads != nullptr);
      auto loss = g.mean_all(g.square(g.relu(xv)));
      const double v = g.value(loss)[0];
      if (grads) {
        g.backward(loss);
        grads->push_back(g.grad(xv));
      }
      return v;
    };
    std::vector<Td*> params{&x};
    return grad_check<double>(std::span<Td* const>(params.data(), 1), eval, 1e-6,
                              1e-5);
  };
  CHECK(run().pass);
  set_fault_flip_relu_backward(true);
  const auto faulted = run();
  set_fault_flip_relu_backward(false);
  CHECK_FALSE(faulted.pass);
  CHECK(faulted.max_rel_err > 0.5);  // sign flip reads as an O(1) error
  CHECK(run().pass);  // and the switch really resets
}

TEST_CASE("float and double graphs agree on the forward pass") {
  TensorT<float> xf({1, 2, 4, 4});
  Rng r(8);
  for (std::int64_t i = 0; i < xf.numel(); ++i) xf[i] = float(r.normal());
  TensorT<float> wf({3, 2, 3, 3}), bf({3});
  for (std::int64_t i = 0; i < wf.numel(); ++i) wf[i] = float(0.3 * r.normal());
  for (std::int64_t i = 0; i < bf.numel(); ++i) bf[i] = float(0.1 * r.normal());

  GraphT<float> gf;
  const float yf =
      gf.value(gf.mean_all(gf.relu(gf.conv2d(gf.leaf(xf), gf.leaf(wf), gf.leaf(bf)))))[0];
  GraphT<double> gd;
  const double yd = gd.value(gd.mean_all(gd.relu(gd.conv2d(
      gd.leaf(xf.cast<double>()), gd.leaf(wf.cast<double>()), gd.leaf(bf.cast<double>())))))[0];
  CHECK(double(yf) == doctest::Approx(yd).epsilon(1e-5));
}

TEST_CASE("conv2d is bitwise invariant to the worker count") {
  Rng r(17);
  TensorT<float> x({2, 3, 12, 12}), w({4, 3, 3, 3}), b({4});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = float(r.normal());
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = float(r.normal());
  for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = float(r.normal());
  auto run = [&](int threads) {
    set_max_threads(threads);
    GraphT<float> g;
    auto xv = g.leaf(x, true);
    auto wv = g.leaf(w, true);
    auto bv = g.leaf(b, true);
    auto y = g.mean_all(g.square(g.conv2d(xv, wv, bv)));
    g.backward(y);
    std::vector<float> out = g.value(y).raw();
    for (auto v : {xv, wv, bv}) {
      const auto& t = g.grad(v);
      out.insert(out.end(), t.raw().begin(), t.raw().end());
    }
    return out;
  };
  const auto a = run(1);
  const auto b4 = run(4);
  set_max_threads(1);
  CHECK(a == b4);
}
