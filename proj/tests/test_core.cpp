#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <set>
#include <sstream>
#include <vector>

#include "xdecomp/io.hpp"
#include "xdecomp/parallel.hpp"
#include "xdecomp/rng.hpp"
#include "xdecomp/tensor.hpp"

using namespace xdecomp;

TEST_CASE("rng streams are reproducible and independent of history") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  // A different seed produces a different stream.
  Rng c(43);
  int same = 0;
  Rng a2(42);
  for (int i = 0; i < 64; ++i) same += a2.next_u64() == c.next_u64();
  CHECK(same == 0);
}

TEST_CASE("uniform stays in [0,1) and below() stays under its bound") {
  Rng r(7);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  for (std::uint64_t n : {1ull, 2ull, 3ull, 17ull, 1000ull}) {
    for (int i = 0; i < 1000; ++i) CHECK(r.below(n) < n);
  }
  // below(1) can only ever produce 0.
  for (int i = 0; i < 10; ++i) CHECK(r.below(1) == 0);
}

TEST_CASE("uniform(lo,hi) respects its range") {
  Rng r(9);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform(-3.0, 5.0);
    CHECK(u >= -3.0);
    CHECK(u < 5.0);
  }
}

TEST_CASE("normal() has sane first moments") {
  Rng r(11);
  double sum = 0.0, sq = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.02);
  CHECK(std::abs(sq / n - 1.0) < 0.03);
  // Shifted/scaled form.
  double s2 = 0.0;
  for (int i = 0; i < n; ++i) s2 += r.normal(3.0, 0.5);
  CHECK(std::abs(s2 / n - 3.0) < 0.02);
}

TEST_CASE("shuffle is a permutation and seed-stable") {
  std::vector<std::int64_t> v(100);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::int64_t(i);
  auto w = v;
  Rng r1(5), r2(5);
  r1.shuffle(std::span<std::int64_t>(v));
  r2.shuffle(std::span<std::int64_t>(w));
  CHECK(v == w);
  std::set<std::int64_t> seen(v.begin(), v.end());
  CHECK(seen.size() == 100);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 99);
}

TEST_CASE("derive_seed separates streams") {
  const std::uint64_t base = 42;
  std::set<std::uint64_t> seeds;
  for (std::uint64_t a = 0; a < 16; ++a)
    for (std::uint64_t b = 0; b < 16; ++b) seeds.insert(derive_seed(base, a, b));
  CHECK(seeds.size() == 256);
  CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
  CHECK(derive_seed(1, 2, 3) != derive_seed(2, 2, 3));
}

TEST_CASE("tensor shape bookkeeping") {
  Tensor t({2, 3, 4, 5});
  CHECK(t.rank() == 4);
  CHECK(t.numel() == 120);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(3) == 5);
  t.at4(1, 2, 3, 4) = 9.5f;
  CHECK(t[t.numel() - 1] == 9.5f);

  Tensor m({3, 4});
  m.at2(2, 3) = 1.5f;
  CHECK(m[11] == 1.5f);

  CHECK(Tensor::full({2, 2}, 3.0f)[3] == 3.0f);
  CHECK(Tensor::zeros({2, 2})[0] == 0.0f);
  CHECK(t.same_shape(Tensor({2, 3, 4, 5})));
  CHECK_FALSE(t.same_shape(m));
}

TEST_CASE("tensor cast round-trips exactly for representable values") {
  Tensor t({3}, {1.5f, -2.25f, 100.0f});
  auto d = t.cast<double>();
  CHECK(d[1] == -2.25);
  auto back = d.cast<float>();
  CHECK(back.raw() == t.raw());
}

TEST_CASE("xdt1 stream round-trip is bit-exact") {
  Rng r(3);
  Tensor t({2, 3, 5, 7});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = float(r.normal());
  std::stringstream ss;
  write_xdt1(ss, t);
  const Tensor back = read_xdt1(ss);
  CHECK(back.shape() == t.shape());
  CHECK(back.raw() == t.raw());
}

TEST_CASE("xdt1 header layout is stable") {
  Tensor t({1, 2}, {0.0f, 1.0f});
  std::stringstream ss;
  write_xdt1(ss, t);
  const std::string bytes = ss.str();
  // magic, u32 rank, u32 per dim, f32 per element, little-endian throughout
  REQUIRE(bytes.size() == 4 + 4 + 8 + 8);
  CHECK(bytes.substr(0, 4) == "XDT1");
  CHECK(bytes[4] == 2);   // rank
  CHECK(bytes[8] == 1);   // dim 0
  CHECK(bytes[12] == 2);  // dim 1
  // 1.0f little-endian = 00 00 80 3f
  CHECK(static_cast<unsigned char>(bytes[23]) == 0x3f);
}

TEST_CASE("xdt1 rejects a bad magic") {
  std::stringstream ss;
  ss << "NOPE";
  CHECK_THROWS(read_xdt1(ss));
}

TEST_CASE("fnv1a matches the published test vectors") {
  // Classic 64-bit FNV-1a reference values.
  CHECK(io::fnv1a("", 0) == 0xcbf29ce484222325ull);
  CHECK(io::fnv1a("a", 1) == 0xaf63dc4c8601ec8cull);
  CHECK(io::fnv1a("foobar", 6) == 0x85944171f73967e8ull);
}

TEST_CASE("little-endian helpers are host-order independent") {
  std::stringstream ss;
  io::write_u32_le(ss, 0x01020304u);
  const std::string b = ss.str();
  CHECK(static_cast<unsigned char>(b[0]) == 0x04);
  CHECK(static_cast<unsigned char>(b[3]) == 0x01);
  std::stringstream in(b);
  CHECK(io::read_u32_le(in) == 0x01020304u);

  std::stringstream fs;
  io::write_f32_le(fs, -2.5f);
  std::stringstream fin(fs.str());
  CHECK(io::read_f32_le(fin) == -2.5f);
}

TEST_CASE("parallel_for covers every index exactly once at any width") {
  for (int threads : {1, 2, 4}) {
    set_max_threads(threads);
    std::vector<int> hits(1000, 0);
    parallel_for(std::int64_t(hits.size()), [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t i = lo; i < hi; ++i) hits[std::size_t(i)] += 1;
    });
    for (int h : hits) CHECK(h == 1);
  }
  set_max_threads(1);
}
