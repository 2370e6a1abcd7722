#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <random>
#include <string>
#include <vector>

#include "mstd/kernels.hpp"

using mstd::kernels::KernelTable;

namespace {

std::vector<float> randv(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (float& x : v) x = d(rng);
  return v;
}

// Dense reference: c[i][j] (+)= sum_p A(i,p) B(p,j) in double.
template <class A, class B>
std::vector<double> ref_gemm(std::size_t m, std::size_t n, std::size_t k, A a, B b) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += static_cast<double>(a(i, p)) * b(p, j);
    }
  }
  return c;
}

void check_gemm(const KernelTable& t, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dim(1, 37);
  for (int rep = 0; rep < 40; ++rep) {
    const std::size_t m = dim(rng), n = dim(rng), k = dim(rng);
    const bool acc = rep % 2 == 1;
    const auto x = randv(m * k, rng), y = randv(k * n, rng), yt = randv(n * k, rng), xt = randv(k * m, rng);
    const auto c0 = randv(m * n, rng);
    struct Case {
      const char* name;
      std::vector<double> ref;
      std::vector<float> got;
    };
    std::vector<Case> cases;
    {
      auto c = c0;
      t.gemm_nn(m, n, k, x.data(), k, y.data(), n, c.data(), n, acc);
      cases.push_back({"nn", ref_gemm(m, n, k, [&](auto i, auto p) { return x[i * k + p]; }, [&](auto p, auto j) { return y[p * n + j]; }), c});
    }
    {
      auto c = c0;
      t.gemm_nt(m, n, k, x.data(), k, yt.data(), k, c.data(), n, acc);
      cases.push_back({"nt", ref_gemm(m, n, k, [&](auto i, auto p) { return x[i * k + p]; }, [&](auto p, auto j) { return yt[j * k + p]; }), c});
    }
    {
      auto c = c0;
      t.gemm_tn(m, n, k, xt.data(), m, y.data(), n, c.data(), n, acc);
      cases.push_back({"tn", ref_gemm(m, n, k, [&](auto i, auto p) { return xt[p * m + i]; }, [&](auto p, auto j) { return y[p * n + j]; }), c});
    }
    for (auto& cs : cases) {
      CAPTURE(cs.name);
      CAPTURE(m);
      CAPTURE(n);
      CAPTURE(k);
      for (std::size_t i = 0; i < m * n; ++i) {
        const double want = cs.ref[i] + (acc ? c0[i] : 0.0);
        REQUIRE(std::fabs(cs.got[i] - want) <= 1e-5 * (static_cast<double>(k) + 1.0) * 4.0);
      }
    }
  }
}

}  // namespace

TEST_CASE("scalar gemm matches a double reference") {
  std::mt19937_64 rng(11);
  check_gemm(mstd::kernels::scalar_table(), rng);
}

TEST_CASE("avx2 gemm matches a double reference") {
  const KernelTable* simd = mstd::kernels::avx2_table();
  if (simd == nullptr) return;
  std::mt19937_64 rng(12);
  check_gemm(*simd, rng);
}

TEST_CASE("avx2 elementwise kernels are bit-identical to scalar") {
  const KernelTable* simd = mstd::kernels::avx2_table();
  if (simd == nullptr) return;
  const KernelTable& s = mstd::kernels::scalar_table();
  std::mt19937_64 rng(13);
  for (std::size_t n : {1u, 7u, 8u, 9u, 31u, 64u, 1001u}) {
    CAPTURE(n);
    const auto x = randv(n, rng), y0 = randv(n, rng);
    auto ya = y0, yb = y0;
    s.axpy(n, 0.37f, x.data(), ya.data());
    simd->axpy(n, 0.37f, x.data(), yb.data());
    CHECK(ya == yb);

    std::vector<float> ma(n), mb(n);
    s.mul(n, x.data(), y0.data(), ma.data());
    simd->mul(n, x.data(), y0.data(), mb.data());
    CHECK(ma == mb);

    auto pa = y0, pb = y0;
    std::vector<float> m1(n, 0.1f), v1(n, 0.2f), m2 = m1, v2 = v1;
    for (int step = 1; step <= 3; ++step) {
      const float bc1 = 1.0f - std::pow(0.9f, static_cast<float>(step));
      const float bc2 = 1.0f - std::pow(0.999f, static_cast<float>(step));
      s.adam(n, pa.data(), x.data(), m1.data(), v1.data(), 1e-3f, 0.9f, 0.999f, 1e-8f, bc1, bc2);
      simd->adam(n, pb.data(), x.data(), m2.data(), v2.data(), 1e-3f, 0.9f, 0.999f, 1e-8f, bc1, bc2);
    }
    CHECK(pa == pb);
    CHECK(m1 == m2);
    CHECK(v1 == v2);
  }
}

TEST_CASE("avx2 gemm stays within rounding of scalar") {
  const KernelTable* simd = mstd::kernels::avx2_table();
  if (simd == nullptr) return;
  const KernelTable& s = mstd::kernels::scalar_table();
  std::mt19937_64 rng(14);
  const std::size_t m = 19, n = 23, k = 45;
  const auto a = randv(m * k, rng), b = randv(k * n, rng);
  std::vector<float> c1(m * n), c2(m * n);
  s.gemm_nn(m, n, k, a.data(), k, b.data(), n, c1.data(), n, false);
  simd->gemm_nn(m, n, k, a.data(), k, b.data(), n, c2.data(), n, false);
  for (std::size_t i = 0; i < c1.size(); ++i) CHECK(c1[i] == doctest::Approx(c2[i]).epsilon(1e-4).scale(1.0));
}

TEST_CASE("dispatch honours MSTD_KERNELS") {
  const KernelTable& t = mstd::kernels::active();
  const char* env = std::getenv("MSTD_KERNELS");
  if (env != nullptr && std::string(env) == "scalar") {
    CHECK(std::string(t.name) == "scalar");
  } else if (mstd::kernels::avx2_table() != nullptr) {
    CHECK(std::string(t.name) == "avx2");
  }
}
