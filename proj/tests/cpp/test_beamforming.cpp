#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nnbf/beamforming.hpp"
#include "nnbf/channel.hpp"
#include "nnbf/rng.hpp"

using namespace nnbf;
using namespace nnbf::beamform;

namespace {

CTensor random_grid(Shape s, std::uint64_t seed) {
  RngStream rng(seed);
  CTensor t(std::move(s));
  for (auto& z : t.v) z = cplx(rng.normal(), rng.normal()) * std::sqrt(0.5);
  return t;
}

channel::ChannelRealization as_channel(const CTensor& h) {
  channel::ChannelRealization H;
  H.h = h;
  return H;
}

CombinerWeights wrap_weights(CTensor w) {
  CombinerWeights W;
  W.w = std::move(w);
  return W;
}

}  // namespace

TEST_CASE("apply_combiner with identity rows picks out each antenna") {
  const std::int64_t M = 3;
  CTensor w({1, 1, M, M});
  for (std::int64_t u = 0; u < M; ++u) w.at4(0, 0, u, u) = 1.0;
  CTensor y({1, 1, M});
  y[1] = cplx(0.0, 2.0);
  CTensor out = apply_combiner(wrap_weights(w), y);
  CHECK(out[0] == cplx(0.0, 0.0));
  CHECK(out[1] == cplx(0.0, 2.0));
  CHECK(out[2] == cplx(0.0, 0.0));
}

TEST_CASE("apply_combiner is a plain transpose product") {
  // w = [1, j], y = [1, 1] -> 1 + j (no conjugation)
  CTensor w({1, 1, 1, 2});
  w.at4(0, 0, 0, 0) = cplx(1.0, 0.0);
  w.at4(0, 0, 0, 1) = cplx(0.0, 1.0);
  CTensor y({1, 1, 2});
  y[0] = cplx(1.0, 0.0);
  y[1] = cplx(1.0, 0.0);
  CTensor out = apply_combiner(wrap_weights(w), y);
  CHECK(out[0] == cplx(1.0, 1.0));
}

TEST_CASE("apply_combiner matches a scalar loop oracle") {
  const std::int64_t L = 2, K = 3, M = 4, N = 2;
  CTensor w = random_grid({L, K, N, M}, 5);
  CTensor yg = random_grid({L, K, M}, 6);
  CTensor out = apply_combiner(wrap_weights(w), yg);
  for (std::int64_t l = 0; l < L; ++l)
    for (std::int64_t k = 0; k < K; ++k)
      for (std::int64_t u = 0; u < N; ++u) {
        cplx s(0.0, 0.0);
        for (std::int64_t m = 0; m < M; ++m)
          s += w.at4(l, k, u, m) * yg[(l * K + k) * M + m];
        CHECK(out[(l * K + k) * N + u] == s);
      }
}

TEST_CASE("matched filter SINR is ||h||^2 over noise for one UE") {
  const std::int64_t M = 4;
  CTensor h = random_grid({1, 1, M, 1}, 9);
  auto W = matched_filter(h);
  double sigma2 = 0.3;
  SinrReport rep = compute_sinr(W, as_channel(h), sigma2);
  double hn = 0.0;
  for (std::int64_t m = 0; m < M; ++m) hn += std::norm(h.at4(0, 0, m, 0));
  CHECK(rep.gamma[0] == doctest::Approx(hn / sigma2).epsilon(1e-12));
  CHECK(rep.interference_power[0] == 0.0);
}

TEST_CASE("orthogonal channels leave no interference under matched filtering") {
  CTensor h({1, 1, 2, 2});
  h.at4(0, 0, 0, 0) = cplx(1.0, 0.5);   // UE 0 on antenna 0
  h.at4(0, 0, 1, 1) = cplx(-0.3, 2.0);  // UE 1 on antenna 1
  auto W = matched_filter(h);
  SinrReport rep = compute_sinr(W, as_channel(h), 0.1);
  CHECK(rep.interference_power[0] == doctest::Approx(0.0));
  CHECK(rep.interference_power[1] == doctest::Approx(0.0));
}

TEST_CASE("compute_sinr matches a brute-force evaluation") {
  const std::int64_t L = 2, K = 2, M = 4, N = 2;
  CTensor h = random_grid({L, K, M, N}, 13);
  CTensor w = random_grid({L, K, N, M}, 14);
  double sigma2 = 0.5;
  SinrReport rep = compute_sinr(wrap_weights(w), as_channel(h), sigma2);
  for (std::int64_t l = 0; l < L; ++l)
    for (std::int64_t k = 0; k < K; ++k)
      for (std::int64_t u = 0; u < N; ++u) {
        cplx des(0.0, 0.0);
        double interf = 0.0, wn = 0.0;
        for (std::int64_t i = 0; i < N; ++i) {
          cplx d(0.0, 0.0);
          for (std::int64_t m = 0; m < M; ++m)
            d += w.at4(l, k, u, m) * h.at4(l, k, m, i);
          if (i == u)
            des = d;
          else
            interf += std::norm(d);
        }
        for (std::int64_t m = 0; m < M; ++m) wn += std::norm(w.at4(l, k, u, m));
        double expect = std::norm(des) / (interf + sigma2 * wn);
        CHECK(std::abs(rep.gamma[static_cast<size_t>(rep.idx(l, k, u))] - expect) <= 1e-12 * expect);
      }
}

TEST_CASE("SINR is invariant under per-row complex scaling") {
  const std::int64_t M = 4, N = 2;
  CTensor h = random_grid({1, 1, M, N}, 21);
  CTensor w = random_grid({1, 1, N, M}, 22);
  SinrReport base = compute_sinr(wrap_weights(w), as_channel(h), 0.2);
  RngStream rng(100);
  for (int rep = 0; rep < 10; ++rep) {
    cplx c(rng.normal(), rng.normal());
    CTensor ws = w;
    for (std::int64_t m = 0; m < M; ++m) ws.at4(0, 0, 0, m) *= c;
    SinrReport scaled = compute_sinr(wrap_weights(ws), as_channel(h), 0.2);
    for (std::int64_t u = 0; u < N; ++u) {
      double a = base.gamma[static_cast<size_t>(u)];
      double b = scaled.gamma[static_cast<size_t>(u)];
      CHECK(std::abs(a - b) <= 1e-10 * std::max(a, b));
    }
  }
}

TEST_CASE("zero combiner with zero noise is an undefined SINR") {
  CTensor h = random_grid({1, 1, 2, 1}, 31);
  CTensor w({1, 1, 1, 2});
  CHECK_THROWS_AS(compute_sinr(wrap_weights(w), as_channel(h), 0.0), UndefinedSinrError);
}

TEST_CASE("sum_rate closed cases and oracle") {
  SinrReport rep;
  rep.shape = {1, 1, 1};
  rep.gamma = {1.0};
  rep.desired_power = {1.0};
  rep.interference_power = {0.0};
  rep.noise_power = {1.0};
  CHECK(sum_rate(rep, RateWeights::uniform(1)).mean == doctest::Approx(1.0));

  SinrReport rep2;
  rep2.shape = {1, 1, 2};
  rep2.gamma = {3.0, 3.0};
  rep2.desired_power = {3.0, 3.0};
  rep2.interference_power = {0.0, 0.0};
  rep2.noise_power = {1.0, 1.0};
  CHECK(sum_rate(rep2, RateWeights::uniform(2)).mean == doctest::Approx(2.0));

  RngStream rng(7);
  SinrReport rep3;
  rep3.shape = {2, 3, 2};
  for (int i = 0; i < 12; ++i) rep3.gamma.push_back(rng.uniform(0.0, 5.0));
  RateWeights alpha;
  alpha.alpha = {0.25, 0.75};
  SumRate sr = sum_rate(rep3, alpha);
  double acc = 0.0;
  for (int lk = 0; lk < 6; ++lk) {
    double r = 0.25 * std::log2(1.0 + rep3.gamma[static_cast<size_t>(2 * lk)]) +
               0.75 * std::log2(1.0 + rep3.gamma[static_cast<size_t>(2 * lk + 1)]);
    CHECK(std::abs(sr.per_re[static_cast<size_t>(lk)] - r) <= 1e-12);
    acc += r;
  }
  CHECK(std::abs(sr.mean - acc / 6.0) <= 1e-12);
}

TEST_CASE("zfbf on identity and scaled identity") {
  CTensor h({1, 1, 2, 2});
  h.at4(0, 0, 0, 0) = 1.0;
  h.at4(0, 0, 1, 1) = 1.0;
  auto W = zfbf(h);
  CHECK(std::abs(W.w.at4(0, 0, 0, 0) - cplx(1.0, 0.0)) < 1e-12);
  CHECK(std::abs(W.w.at4(0, 0, 1, 1) - cplx(1.0, 0.0)) < 1e-12);
  CHECK(std::abs(W.w.at4(0, 0, 0, 1)) < 1e-12);

  for (auto& z : h.v) z *= 2.0;
  auto W2 = zfbf(h);
  CHECK(std::abs(W2.w.at4(0, 0, 0, 0) - cplx(0.5, 0.0)) < 1e-12);
}

TEST_CASE("zfbf inverts well-conditioned channels: W H = I") {
  const std::int64_t M = 8, N = 2;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    CTensor h = random_grid({1, 1, M, N}, seed);
    auto W = zfbf(h);
    for (std::int64_t u = 0; u < N; ++u)
      for (std::int64_t n = 0; n < N; ++n) {
        cplx dot(0.0, 0.0);
        for (std::int64_t m = 0; m < M; ++m)
          dot += W.w.at4(0, 0, u, m) * h.at4(0, 0, m, n);
        cplx expect = (u == n) ? cplx(1.0, 0.0) : cplx(0.0, 0.0);
        CHECK(std::abs(dot - expect) < 1e-10);
      }
  }
}

TEST_CASE("zfbf interference is nulled with perfect CSI") {
  const std::int64_t M = 8, N = 3;
  CTensor h = random_grid({2, 2, M, N}, 55);
  auto W = zfbf(h);
  SinrReport rep = compute_sinr(W, as_channel(h), 0.1);
  for (double ip : rep.interference_power) CHECK(ip < 1e-18);
}

TEST_CASE("zfbf rejects rank-deficient channels naming the resource element") {
  CTensor h({1, 2, 4, 2});
  // subcarrier 0 fine, subcarrier 1 has identical columns
  RngStream rng(77);
  for (std::int64_t m = 0; m < 4; ++m) {
    h.at4(0, 0, m, 0) = cplx(rng.normal(), rng.normal());
    h.at4(0, 0, m, 1) = cplx(rng.normal(), rng.normal());
    cplx v(rng.normal(), rng.normal());
    h.at4(0, 1, m, 0) = v;
    h.at4(0, 1, m, 1) = v;
  }
  try {
    zfbf(h);
    FAIL("expected SingularChannelError");
  } catch (const SingularChannelError& e) {
    CHECK(e.symbol == 0);
    CHECK(e.subcarrier == 1);
  }
}

TEST_CASE("mmse with zero regularizer equals zfbf") {
  CTensor h = random_grid({2, 2, 6, 2}, 91);
  auto Wz = zfbf(h);
  auto Wm = mmse(h, 0.0);
  for (std::int64_t i = 0; i < Wz.w.numel(); ++i)
    CHECK(std::abs(Wz.w[i] - Wm.w[i]) < 1e-10);
}

TEST_CASE("mmse on identity channel with unit noise halves the weights") {
  CTensor h({1, 1, 2, 2});
  h.at4(0, 0, 0, 0) = 1.0;
  h.at4(0, 0, 1, 1) = 1.0;
  auto W = mmse(h, 1.0);
  CHECK(std::abs(W.w.at4(0, 0, 0, 0) - cplx(0.5, 0.0)) < 1e-12);
  CHECK(std::abs(W.w.at4(0, 0, 1, 1) - cplx(0.5, 0.0)) < 1e-12);
  CHECK(std::abs(W.w.at4(0, 0, 0, 1)) < 1e-12);
}

TEST_CASE("mmse large-noise limit approaches the scaled matched filter") {
  const double big = 1e3;
  CTensor h = random_grid({1, 1, 6, 2}, 17);
  auto W = mmse(h, big);
  // sigma^2 (H^H H + sigma^2 I)^-1 H^H -> H^H as sigma^2 grows
  for (std::int64_t u = 0; u < 2; ++u)
    for (std::int64_t m = 0; m < 6; ++m) {
      cplx got = W.w.at4(0, 0, u, m) * big;
      cplx expect = std::conj(h.at4(0, 0, m, u));
      CHECK(std::abs(got - expect) < 0.01 * std::abs(expect));
    }
}

TEST_CASE("mmse is continuous in the noise variance") {
  CTensor h = random_grid({1, 1, 6, 2}, 18);
  double s2 = 0.37;
  auto Wa = mmse(h, s2);
  auto Wb = mmse(h, s2 + 1e-8);
  double diff = 0.0;
  for (std::int64_t i = 0; i < Wa.w.numel(); ++i)
    diff = std::max(diff, std::abs(Wa.w[i] - Wb.w[i]));
  CHECK(diff < 1e-7);
}

TEST_CASE("mmse sum-rate dominates zfbf under perfect CSI") {
  const std::int64_t M = 8, N = 2;
  double sigma2 = 0.8;
  for (std::uint64_t seed = 200; seed < 240; ++seed) {
    CTensor h = random_grid({1, 2, M, N}, seed);
    auto Wz = zfbf(h);
    auto Wm = mmse(h, sigma2);
    auto H = as_channel(h);
    double rz = sum_rate(compute_sinr(Wz, H, sigma2), RateWeights::uniform(N)).mean;
    double rm = sum_rate(compute_sinr(Wm, H, sigma2), RateWeights::uniform(N)).mean;
    CHECK(rm >= rz - 1e-9);
  }
}

TEST_CASE("power projection") {
  CTensor w({1, 1, 2, 2});
  w.at4(0, 0, 0, 0) = cplx(0.3, 0.0);   // row norm 0.5
  w.at4(0, 0, 0, 1) = cplx(0.0, 0.4);
  w.at4(0, 0, 1, 0) = cplx(4.0, 0.0);   // row norm 4
  auto P = project_power(wrap_weights(w));
  CHECK(P.w.at4(0, 0, 0, 0) == cplx(0.3, 0.0));
  CHECK(P.w.at4(0, 0, 0, 1) == cplx(0.0, 0.4));
  CHECK(std::abs(P.w.at4(0, 0, 1, 0) - cplx(1.0, 0.0)) < 1e-12);

  // random batch: every row norm <= 1, total power <= N at each (l,k)
  CTensor wr = random_grid({3, 4, 2, 5}, 33);
  for (auto& z : wr.v) z *= 3.0;
  auto Pr = project_power(wrap_weights(wr));
  for (std::int64_t l = 0; l < 3; ++l)
    for (std::int64_t k = 0; k < 4; ++k) {
      double tr = 0.0;
      for (std::int64_t u = 0; u < 2; ++u) {
        double n2 = 0.0;
        for (std::int64_t m = 0; m < 5; ++m) n2 += std::norm(Pr.w.at4(l, k, u, m));
        CHECK(n2 <= 1.0 + 1e-9);
        tr += n2;
      }
      CHECK(tr <= 2.0 + 1e-9);
    }
}
