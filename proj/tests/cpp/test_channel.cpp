#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "nnbf/channel.hpp"

using namespace nnbf;
using namespace nnbf::channel;

TEST_CASE("doppler_max matches the f_c v / c form") {
  CHECK(doppler_max(2.6e9, 30.0) == doctest::Approx(260.0).epsilon(1e-3));
  CHECK(std::abs(doppler_max(2.6e9, 30.0) - 260.18) < 0.1);
  CHECK(doppler_max(2.6e9, 0.0) == 0.0);
  CHECK(doppler_max(2.6e9, 15.0) == doctest::Approx(2.6e9 * 15.0 / 2.99792458e8));
}

TEST_CASE("snr to noise variance") {
  CHECK(snr_to_noise_var(0.0) == 1.0);
  CHECK(snr_to_noise_var(20.0) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(snr_to_noise_var(-10.0) == doctest::Approx(10.0).epsilon(1e-12));
}

namespace {
ScenarioConfig small_cfg() {
  ScenarioConfig cfg;
  cfg.L = 4;
  cfg.K = 8;
  cfg.M = 2;
  cfg.N = 2;
  return cfg;
}
}  // namespace

TEST_CASE("single static boresight path gives an all-ones channel") {
  ScenarioConfig cfg = small_cfg();
  cfg.paths = 1;
  PathSet ps;
  ps.per_ue.resize(2);
  for (auto& ue : ps.per_ue)
    ue.push_back({cplx(1.0, 0.0), 0.0, 0.0, 0.0});
  ChannelRealization H = channel_from_paths(cfg, ps);
  for (const auto& z : H.h.v) {
    CHECK(z.real() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(std::abs(z.imag()) < 1e-14);
  }
}

TEST_CASE("pure Doppler path rotates phase by 2 pi f_d T_sym per symbol") {
  ScenarioConfig cfg = small_cfg();
  cfg.paths = 1;
  double fd = 200.0;
  PathSet ps;
  ps.per_ue.resize(2);
  for (auto& ue : ps.per_ue) ue.push_back({cplx(1.0, 0.0), 0.0, fd, 0.0});
  ChannelRealization H = channel_from_paths(cfg, ps);
  double step = 2.0 * 3.14159265358979323846 * fd * cfg.symbol_duration_s;
  for (std::int64_t l = 0; l < cfg.L; ++l) {
    cplx z = H.h.at4(l, 3, 1, 0);
    CHECK(std::abs(z) == doctest::Approx(1.0).epsilon(1e-12));
    double expect = step * static_cast<double>(l);
    double got = std::arg(z);
    CHECK(std::abs(std::remainder(got - expect, 2.0 * 3.14159265358979323846)) < 1e-10);
  }
}

TEST_CASE("default urban profile has unit mean square channel gain") {
  ScenarioConfig cfg = small_cfg();
  cfg.max_speed_mps = 30.0;
  RngStream rng(derive_seed(7, "chan-norm"));
  double acc = 0.0;
  std::int64_t count = 0;
  for (int r = 0; r < 2000; ++r) {  // 2000 * 4*8*2*2 = 256k entries
    ChannelRealization H = generate_channel(cfg, rng);
    for (const auto& z : H.h.v) acc += std::norm(z);
    count += H.h.numel();
  }
  double mean = acc / static_cast<double>(count);
  CHECK(std::abs(mean - 1.0) < 0.02);
}

TEST_CASE("zero Doppler freezes the channel across OFDM symbols") {
  ScenarioConfig cfg = small_cfg();
  cfg.max_speed_mps = 0.0;
  RngStream rng(derive_seed(3, "chan-static"));
  ChannelRealization H = generate_channel(cfg, rng);
  for (std::int64_t l = 1; l < cfg.L; ++l)
    for (std::int64_t k = 0; k < cfg.K; ++k)
      for (std::int64_t m = 0; m < cfg.M; ++m)
        for (std::int64_t n = 0; n < cfg.N; ++n)
          CHECK(H.h.at4(l, k, m, n) == H.h.at4(0, k, m, n));
}

TEST_CASE("wide-sense stationarity across subcarriers") {
  // autocorrelation in k depends only on the lag for the default profile
  ScenarioConfig cfg = small_cfg();
  cfg.K = 16;
  RngStream rng(derive_seed(11, "chan-wss"));
  const int lag = 3;
  // E[ H(k) conj(H(k+lag)) ] estimated at two different anchor subcarriers
  cplx acc_a(0.0, 0.0), acc_b(0.0, 0.0);
  double pw = 0.0;
  const int reps = 4000;
  for (int r = 0; r < reps; ++r) {
    ChannelRealization H = generate_channel(cfg, rng);
    acc_a += H.h.at4(0, 2, 0, 0) * std::conj(H.h.at4(0, 2 + lag, 0, 0));
    acc_b += H.h.at4(0, 9, 0, 0) * std::conj(H.h.at4(0, 9 + lag, 0, 0));
    pw += std::norm(H.h.at4(0, 2, 0, 0));
  }
  acc_a /= static_cast<double>(reps);
  acc_b /= static_cast<double>(reps);
  pw /= static_cast<double>(reps);
  CHECK(std::abs(acc_a - acc_b) / pw < 0.05);
}

TEST_CASE("seeded determinism of channel generation") {
  ScenarioConfig cfg = small_cfg();
  cfg.max_speed_mps = 30.0;
  RngStream a(derive_seed(42, "chan", 0));
  RngStream b(derive_seed(42, "chan", 0));
  ChannelRealization Ha = generate_channel(cfg, a);
  ChannelRealization Hb = generate_channel(cfg, b);
  for (std::int64_t i = 0; i < Ha.h.numel(); ++i) CHECK(Ha.h[i] == Hb.h[i]);
}

TEST_CASE("noiseless pilots reproduce the channel exactly") {
  ScenarioConfig cfg = small_cfg();
  RngStream rng(derive_seed(1, "est"));
  ChannelRealization H = generate_channel(cfg, rng);
  ChannelEstimate e = estimate_channel(H, 16, 0.0, rng);
  for (std::int64_t i = 0; i < H.h.numel(); ++i) CHECK(e.h[i] == H.h[i]);
  CHECK(e.est_noise_var == 0.0);
}

TEST_CASE("estimation error variance equals noise_var over pilot length") {
  ScenarioConfig cfg = small_cfg();
  cfg.L = 8;
  cfg.K = 16;
  cfg.M = 4;
  RngStream rng(derive_seed(5, "est-var"));
  double err = 0.0;
  std::int64_t count = 0;
  for (int r = 0; r < 120; ++r) {  // 120 * 8*16*4*2 = 122k entries
    ChannelRealization H = generate_channel(cfg, rng);
    ChannelEstimate e = estimate_channel(H, 16, 0.1, rng);
    CHECK(e.est_noise_var == doctest::Approx(0.00625));
    for (std::int64_t i = 0; i < H.h.numel(); ++i) err += std::norm(e.h[i] - H.h[i]);
    count += H.h.numel();
  }
  double mean = err / static_cast<double>(count);
  CHECK(std::abs(mean - 0.00625) / 0.00625 < 0.05);
}

TEST_CASE("quadrupling pilot length quarters the error variance") {
  ScenarioConfig cfg = small_cfg();
  cfg.L = 8;
  cfg.K = 16;
  cfg.M = 4;
  RngStream rng(derive_seed(6, "est-ratio"));
  double err4 = 0.0, err16 = 0.0;
  std::int64_t count = 0;
  for (int r = 0; r < 120; ++r) {
    ChannelRealization H = generate_channel(cfg, rng);
    ChannelEstimate a = estimate_channel(H, 4, 0.5, rng);
    ChannelEstimate b = estimate_channel(H, 16, 0.5, rng);
    for (std::int64_t i = 0; i < H.h.numel(); ++i) {
      err4 += std::norm(a.h[i] - H.h[i]);
      err16 += std::norm(b.h[i] - H.h[i]);
    }
    count += H.h.numel();
  }
  double ratio = err4 / err16;
  CHECK(std::abs(ratio - 4.0) / 4.0 < 0.05);
}

TEST_CASE("estimation error is uncorrelated with the channel") {
  ScenarioConfig cfg = small_cfg();
  cfg.L = 8;
  cfg.K = 16;
  cfg.M = 4;
  RngStream rng(derive_seed(9, "est-indep"));
  cplx corr(0.0, 0.0);
  double ph = 0.0, pe = 0.0;
  std::int64_t count = 0;
  for (int r = 0; r < 120; ++r) {
    ChannelRealization H = generate_channel(cfg, rng);
    ChannelEstimate e = estimate_channel(H, 4, 1.0, rng);
    for (std::int64_t i = 0; i < H.h.numel(); ++i) {
      cplx err = e.h[i] - H.h[i];
      corr += H.h[i] * std::conj(err);
      ph += std::norm(H.h[i]);
      pe += std::norm(err);
    }
    count += H.h.numel();
  }
  double rho = std::abs(corr) / std::sqrt(ph * pe);
  CHECK(rho < 0.01);
}

TEST_CASE("pilot length below UE count is rejected") {
  ScenarioConfig cfg = small_cfg();
  RngStream rng(1);
  ChannelRealization H = generate_channel(cfg, rng);
  CHECK_THROWS_AS(estimate_channel(H, 1, 0.1, rng), ConfigError);
}

TEST_CASE("awgn statistics") {
  RngStream rng(derive_seed(2, "awgn"));
  CTensor z = awgn({1000000}, 0.0, rng);
  for (int i = 0; i < 100; ++i) CHECK(z[i] == cplx(0.0, 0.0));

  CTensor n = awgn({1000000}, 1.0, rng);
  double p = 0.0, sr = 0.0, si = 0.0, cross = 0.0;
  for (const auto& v : n.v) {
    p += std::norm(v);
    sr += v.real();
    si += v.imag();
    cross += v.real() * v.imag();
  }
  double cnt = static_cast<double>(n.numel());
  CHECK(std::abs(p / cnt - 1.0) < 0.02);
  CHECK(std::abs(sr / cnt) < 0.005);
  CHECK(std::abs(si / cnt) < 0.005);
  // correlation of re/im parts, each with variance 1/2
  CHECK(std::abs(cross / cnt / 0.5) < 0.01);
}

TEST_CASE("channel binary roundtrip is exact") {
  ScenarioConfig cfg = small_cfg();
  cfg.max_speed_mps = 30.0;
  RngStream rng(derive_seed(4, "io"));
  ChannelRealization H = generate_channel(cfg, rng);
  std::stringstream ss;
  write_channel(ss, H);
  ChannelRealization R = read_channel(ss);
  CHECK(R.h.shape == H.h.shape);
  for (std::int64_t i = 0; i < H.h.numel(); ++i) CHECK(R.h[i] == H.h[i]);
}

TEST_CASE("non-positive dimensions rejected") {
  ScenarioConfig cfg = small_cfg();
  cfg.M = 0;
  RngStream rng(1);
  CHECK_THROWS_AS(generate_channel(cfg, rng), ConfigError);
}
