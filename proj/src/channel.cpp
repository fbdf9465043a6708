#include "nnbf/channel.hpp"

#include <cmath>
#include <istream>
#include <ostream>

#include "nnbf/serialize.hpp"

namespace nnbf::channel {

namespace {
constexpr double kTwoPi = 6.283185307179586476925287;
}

double doppler_shift(double carrier_hz, double speed_mps, double angle_rad) {
  if (carrier_hz <= 0.0) throw ConfigError("carrier frequency must be positive");
  if (speed_mps < 0.0) throw ConfigError("UE speed must be nonnegative");
  return carrier_hz * speed_mps * std::cos(angle_rad) / kSpeedOfLight;
}

double doppler_max(double carrier_hz, double speed_mps) {
  return doppler_shift(carrier_hz, speed_mps, 0.0);
}

double snr_to_noise_var(double snr_db) { return std::pow(10.0, -snr_db / 10.0); }

void ScenarioConfig::validate() const {
  if (L < 1 || K < 1 || M < 1 || N < 1)
    throw ConfigError("scenario dimensions must be positive (L=" + std::to_string(L) +
                      ", K=" + std::to_string(K) + ", M=" + std::to_string(M) +
                      ", N=" + std::to_string(N) + ")");
  if (paths < 1) throw ConfigError("need at least one multipath component");
  if (subcarrier_spacing_hz <= 0.0 || symbol_duration_s <= 0.0)
    throw ConfigError("subcarrier spacing and symbol duration must be positive");
}

PathSet draw_paths(const ScenarioConfig& cfg, RngStream& rng) {
  cfg.validate();
  double fd = cfg.max_doppler_hz();
  double amp = 1.0 / std::sqrt(static_cast<double>(cfg.paths));
  PathSet ps;
  ps.per_ue.resize(static_cast<size_t>(cfg.N));
  for (std::int64_t n = 0; n < cfg.N; ++n) {
    auto& paths = ps.per_ue[static_cast<size_t>(n)];
    paths.resize(static_cast<size_t>(cfg.paths));
    for (int p = 0; p < cfg.paths; ++p) {
      Path& pp = paths[static_cast<size_t>(p)];
      double gr = rng.normal() * std::sqrt(0.5);
      double gi = rng.normal() * std::sqrt(0.5);
      pp.gain = cplx(gr, gi) * amp;
      // exponential delay profile clipped at the cyclic-prefix budget
      double tau = -cfg.delay_spread_s * std::log(1.0 - rng.uniform());
      pp.delay_s = std::min(tau, cfg.max_delay_s);
      pp.aoa_rad = rng.uniform(-cfg.aoa_half_width_rad, cfg.aoa_half_width_rad);
      // Jakes-style per-path Doppler
      pp.doppler_hz = fd * std::cos(rng.uniform(0.0, kTwoPi));
    }
  }
  return ps;
}

ChannelRealization channel_from_paths(const ScenarioConfig& cfg, const PathSet& ps) {
  cfg.validate();
  ChannelRealization out;
  out.h = CTensor({cfg.L, cfg.K, cfg.M, cfg.N});
  for (std::int64_t n = 0; n < cfg.N; ++n) {
    const auto& paths = ps.per_ue[static_cast<size_t>(n)];
    for (const Path& p : paths) {
      // steering phase per antenna of the half-wavelength ULA
      double spatial = 3.141592653589793238462643 * std::sin(p.aoa_rad);
      for (std::int64_t l = 0; l < cfg.L; ++l) {
        double time_phase = kTwoPi * p.doppler_hz * static_cast<double>(l) *
                            cfg.symbol_duration_s;
        for (std::int64_t k = 0; k < cfg.K; ++k) {
          double freq_phase = -kTwoPi * p.delay_s * static_cast<double>(k) *
                              cfg.subcarrier_spacing_hz;
          cplx base = p.gain * std::polar(1.0, time_phase + freq_phase);
          for (std::int64_t m = 0; m < cfg.M; ++m)
            out.h.at4(l, k, m, n) += base * std::polar(1.0, spatial * static_cast<double>(m));
        }
      }
    }
  }
  return out;
}

ChannelRealization generate_channel(const ScenarioConfig& cfg, RngStream& rng) {
  PathSet ps = draw_paths(cfg, rng);
  return channel_from_paths(cfg, ps);
}

ChannelEstimate estimate_channel(const ChannelRealization& H, std::int64_t pilot_len,
                                 double noise_var, RngStream& rng) {
  std::int64_t n_ues = H.N();
  if (pilot_len < n_ues)
    throw ConfigError("pilot length " + std::to_string(pilot_len) +
                      " shorter than UE count " + std::to_string(n_ues) +
                      "; orthogonal pilots impossible");
  ChannelEstimate est;
  est.h = H.h;
  est.est_noise_var = noise_var / static_cast<double>(pilot_len);
  if (est.est_noise_var > 0.0) {
    double s = std::sqrt(est.est_noise_var * 0.5);
    for (auto& z : est.h.v)
      z += cplx(rng.normal() * s, rng.normal() * s);
  }
  return est;
}

CTensor awgn(const Shape& shape, double noise_var, RngStream& rng) {
  if (noise_var < 0.0) throw ConfigError("noise variance must be nonnegative");
  CTensor out(shape);
  if (noise_var == 0.0) return out;
  double s = std::sqrt(noise_var * 0.5);
  for (auto& z : out.v) z = cplx(rng.normal() * s, rng.normal() * s);
  return out;
}

void write_channel(std::ostream& os, const ChannelRealization& H) {
  io::write_u32(os, 0x484e4243u);  // "CBNH" tag
  for (int i = 0; i < 4; ++i)
    io::write_i32(os, static_cast<std::int32_t>(H.h.dim(i)));
  for (const auto& z : H.h.v) {
    io::write_f64(os, z.real());
    io::write_f64(os, z.imag());
  }
}

ChannelRealization read_channel(std::istream& is) {
  if (io::read_u32(is) != 0x484e4243u) throw IoError("bad channel file magic");
  Shape s(4);
  for (int i = 0; i < 4; ++i) s[static_cast<size_t>(i)] = io::read_i32(is);
  ChannelRealization H;
  H.h = CTensor(s);
  for (auto& z : H.h.v) {
    double re = io::read_f64(is);
    double im = io::read_f64(is);
    z = cplx(re, im);
  }
  return H;
}

}  // namespace nnbf::channel
