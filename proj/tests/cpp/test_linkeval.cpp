#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nnbf/linkeval.hpp"
#include "nnbf/rng.hpp"

using namespace nnbf;
using namespace nnbf::linkeval;

TEST_CASE("4QAM corner and unit energy for all orders") {
  std::vector<std::uint8_t> b00 = {0, 0};
  auto s = qam_modulate(b00, 4);
  CHECK(s.size() == 1);
  CHECK(s[0].real() == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(s[0].imag() == doctest::Approx(1.0 / std::sqrt(2.0)));

  for (int order : {4, 16, 64, 256}) {
    int q = bits_per_symbol(order);
    // enumerate every constellation point through the bit labels
    double energy = 0.0;
    for (int v = 0; v < order; ++v) {
      std::vector<std::uint8_t> bits(static_cast<size_t>(q));
      for (int t = 0; t < q; ++t) bits[static_cast<size_t>(t)] = (v >> (q - 1 - t)) & 1;
      auto sym = qam_modulate(bits, order);
      energy += std::norm(sym[0]);
    }
    CHECK(energy / order == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("modulate then hard-demodulate is exact without noise") {
  RngStream rng(7);
  for (int order : {4, 16, 64, 256}) {
    int q = bits_per_symbol(order);
    std::vector<std::uint8_t> bits(static_cast<size_t>(q * 100));
    for (auto& b : bits) b = rng.bit() ? 1 : 0;
    auto sym = qam_modulate(bits, order);
    auto dem = qam_demodulate(sym, order, 1e-6);
    REQUIRE(dem.hard.size() == bits.size());
    for (size_t i = 0; i < bits.size(); ++i) CHECK(dem.hard[i] == bits[i]);
  }
}

TEST_CASE("LLR sign flips across a decision boundary") {
  // 4QAM: the I-axis boundary is Re = 0
  auto right = qam_demodulate({cplx(0.05, 0.5)}, 4, 0.1);
  auto left = qam_demodulate({cplx(-0.05, 0.5)}, 4, 0.1);
  CHECK(right.llr[0] > 0.0);
  CHECK(left.llr[0] < 0.0);
  CHECK(right.llr[0] == doctest::Approx(-left.llr[0]).epsilon(1e-12));
}

TEST_CASE("4QAM LLR matches the exhaustive max-log oracle") {
  cplx y(0.9 / std::sqrt(2.0), 0.9 / std::sqrt(2.0));
  double nv = 0.1;
  auto dem = qam_demodulate({y}, 4, nv);
  // brute force over all four points and both bit positions
  for (int bitpos = 0; bitpos < 2; ++bitpos) {
    double best0 = 1e300, best1 = 1e300;
    for (int v = 0; v < 4; ++v) {
      std::vector<std::uint8_t> bits = {static_cast<std::uint8_t>((v >> 1) & 1),
                                        static_cast<std::uint8_t>(v & 1)};
      auto s = qam_modulate(bits, 4);
      double d = std::norm(y - s[0]);
      if (bits[static_cast<size_t>(bitpos)])
        best1 = std::min(best1, d);
      else
        best0 = std::min(best0, d);
    }
    CHECK(dem.llr[static_cast<size_t>(bitpos)] ==
          doctest::Approx((best1 - best0) / nv).epsilon(1e-12));
  }
}

TEST_CASE("convolutional encoder basics") {
  std::vector<std::uint8_t> zeros(100, 0);
  auto c = conv_encode(zeros, CodeRate::Half);
  CHECK(c.size() == 2 * (100 + 6));
  for (auto b : c) CHECK(b == 0);

  // linearity over GF(2)
  RngStream rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<std::uint8_t> a(64), b(64), x(64);
    for (size_t i = 0; i < 64; ++i) {
      a[i] = rng.bit();
      b[i] = rng.bit();
      x[i] = a[i] ^ b[i];
    }
    auto ca = conv_encode(a, CodeRate::Half);
    auto cb = conv_encode(b, CodeRate::Half);
    auto cx = conv_encode(x, CodeRate::Half);
    for (size_t i = 0; i < cx.size(); ++i) CHECK(cx[i] == (ca[i] ^ cb[i]));
  }

  // punctured length arithmetic
  CHECK(coded_length(1002, CodeRate::ThreeQuarter) == 1344);
  CHECK(info_length_for_capacity(1344, CodeRate::ThreeQuarter) == 1002);
  CHECK(info_length_for_capacity(1344, CodeRate::Half) == 666);
}

namespace {
std::vector<double> bits_to_llrs(const std::vector<std::uint8_t>& coded, double mag) {
  std::vector<double> llr(coded.size());
  for (size_t i = 0; i < coded.size(); ++i) llr[i] = coded[i] ? -mag : mag;
  return llr;
}
}  // namespace

TEST_CASE("viterbi noiseless roundtrip at both rates") {
  RngStream rng(9);
  for (CodeRate rate : {CodeRate::Half, CodeRate::ThreeQuarter}) {
    for (int rep = 0; rep < 50; ++rep) {
      std::vector<std::uint8_t> info(120);
      for (auto& b : info) b = rng.bit();
      auto coded = conv_encode(info, rate);
      auto dec = viterbi_decode(bits_to_llrs(coded, 4.0), rate, 120);
      CHECK(dec == info);
    }
  }
}

TEST_CASE("viterbi corrects a single flipped bit at rate 1/2") {
  RngStream rng(11);
  std::vector<std::uint8_t> info(20);
  for (auto& b : info) b = rng.bit();
  auto coded = conv_encode(info, CodeRate::Half);
  for (size_t flip = 0; flip < coded.size(); ++flip) {
    auto bad = coded;
    bad[flip] ^= 1;
    auto dec = viterbi_decode(bits_to_llrs(bad, 2.0), CodeRate::Half, 20);
    CHECK(dec == info);
  }
}

TEST_CASE("viterbi equals brute-force ML on short messages") {
  // all 2^10 messages, soft noisy observations, both rates
  const int len = 10;
  RngStream rng(13);
  for (CodeRate rate : {CodeRate::Half, CodeRate::ThreeQuarter}) {
    for (int rep = 0; rep < 6; ++rep) {
      std::vector<std::uint8_t> info(len);
      for (auto& b : info) b = rng.bit();
      auto coded = conv_encode(info, rate);
      std::vector<double> llr(coded.size());
      double noise = 0.9;
      for (size_t i = 0; i < coded.size(); ++i)
        llr[i] = (coded[i] ? -1.0 : 1.0) * 1.8 + rng.normal() * noise;
      auto dec = viterbi_decode(llr, rate, len);

      double best = -1e300;
      std::vector<std::uint8_t> ml;
      for (int v = 0; v < (1 << len); ++v) {
        std::vector<std::uint8_t> cand(len);
        for (int t = 0; t < len; ++t) cand[static_cast<size_t>(t)] = (v >> t) & 1;
        auto cc = conv_encode(cand, rate);
        double score = 0.0;
        for (size_t i = 0; i < cc.size(); ++i)
          score += cc[i] ? -0.5 * llr[i] : 0.5 * llr[i];
        if (score > best) {
          best = score;
          ml = cand;
        }
      }
      CHECK(dec == ml);
    }
  }
}

namespace {
LinkConfig small_link(int order, bool coded) {
  LinkConfig cfg;
  cfg.scenario.L = 4;
  cfg.scenario.K = 12;
  cfg.scenario.M = 4;
  cfg.scenario.N = 2;
  cfg.modulation_order = order;
  cfg.coded = coded;
  cfg.rate = CodeRate::Half;
  cfg.pilot_len = 8;
  return cfg;
}
}  // namespace

TEST_CASE("noise-free zero-forcing TTI has no block errors") {
  LinkConfig cfg = small_link(4, true);
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    auto o = simulate_tti(cfg, BeamformerKind::Zf, nullptr, 400.0, 5, trial);
    REQUIRE_FALSE(o.skipped);
    CHECK(o.bit_errors == 0);
    for (bool e : o.block_error) CHECK_FALSE(e);
  }
}

TEST_CASE("block error flag is exactly the info-bit mismatch indicator") {
  LinkConfig cfg = small_link(4, true);
  // at very low SNR errors are common; flag must equal (bit_errors on that UE)
  int flagged = 0, trials = 30;
  for (std::uint64_t trial = 0; trial < static_cast<std::uint64_t>(trials); ++trial) {
    auto o = simulate_tti(cfg, BeamformerKind::Mmse, nullptr, -8.0, 7, trial);
    if (o.skipped) continue;
    bool any = o.block_error[0] || o.block_error[1];
    if (any) ++flagged;
    if (o.bit_errors == 0) CHECK_FALSE(any);
    if (o.bit_errors > 0) CHECK(any);
  }
  CHECK(flagged > 0);  // low SNR actually produced errors
}

TEST_CASE("single-UE matched filter uncoded BER tracks the Gaussian tail") {
  LinkConfig cfg;
  cfg.scenario.L = 4;
  cfg.scenario.K = 12;
  cfg.scenario.M = 2;
  cfg.scenario.N = 1;
  cfg.modulation_order = 4;
  cfg.coded = false;
  cfg.pilot_len = 1024;  // essentially perfect CSI
  double snr_db = 4.0;
  std::int64_t bits = 0, errs = 0;
  double q_acc = 0.0;
  std::int64_t q_cnt = 0;
  double noise_var = channel::snr_to_noise_var(snr_db);
  for (std::uint64_t trial = 0; trial < 400; ++trial) {
    auto o = simulate_tti(cfg, BeamformerKind::MatchedFilter, nullptr, snr_db, 21, trial);
    REQUIRE_FALSE(o.skipped);
    errs += o.bit_errors;
    bits += o.total_bits;
    // analytic per-bit error for QPSK over the realized post-combining SNR
    RngStream chan_rng = derive_stream(21, "tti-chan", trial);
    auto H = channel::generate_channel(cfg.scenario, chan_rng);
    for (std::int64_t l = 0; l < cfg.scenario.L; ++l)
      for (std::int64_t k = 0; k < cfg.scenario.K; ++k) {
        double hn = 0.0;
        for (std::int64_t m = 0; m < cfg.scenario.M; ++m)
          hn += std::norm(H.h.at4(l, k, m, 0));
        double gamma = hn / noise_var;
        q_acc += 0.5 * std::erfc(std::sqrt(gamma) / std::sqrt(2.0) / std::sqrt(1.0));
        ++q_cnt;
      }
  }
  double ber = static_cast<double>(errs) / static_cast<double>(bits);
  double expect = q_acc / static_cast<double>(q_cnt);
  double sigma3 = 3.0 * std::sqrt(expect * (1.0 - expect) / static_cast<double>(bits));
  CHECK(std::abs(ber - expect) < sigma3 + 1e-12);
}

TEST_CASE("sweep aggregates, determinism, single-trial extremes") {
  LinkConfig cfg = small_link(4, true);
  std::vector<BeamformerKind> bfs = {BeamformerKind::Zf, BeamformerKind::Mmse};
  auto rows = sweep(cfg, bfs, nullptr, {0.0, 10.0}, 25, 99, 2);
  REQUIRE(rows.size() == 4);
  for (const auto& r : rows) {
    CHECK(r.bler >= 0.0);
    CHECK(r.bler <= 1.0);
    CHECK(r.trials == 25);
  }
  auto rows2 = sweep(cfg, bfs, nullptr, {0.0, 10.0}, 25, 99, 1);
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].bler == rows2[i].bler);  // jobs must not affect results
    CHECK(rows[i].sum_rate_mean == rows2[i].sum_rate_mean);
  }

  auto one = sweep(cfg, {BeamformerKind::Mmse}, nullptr, {0.0}, 1, 7, 1);
  CHECK((one[0].bler == 0.0 || one[0].bler == 0.5 || one[0].bler == 1.0));
}

TEST_CASE("metrics serialization carries one row per cell") {
  LinkConfig cfg = small_link(4, true);
  auto rows = sweep(cfg, {BeamformerKind::Zf}, nullptr, {0.0, 5.0, 10.0}, 5, 3, 1);
  std::string csv = metrics_csv(rows);
  size_t lines = std::count(csv.begin(), csv.end(), '\n');
  CHECK(lines == 4);  // header + 3 rows
  std::string js = metrics_json(rows);
  CHECK(js.find("\"beamformer\": \"zf\"") != std::string::npos);
}
