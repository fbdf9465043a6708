#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "nnbf/complex_tensor.hpp"
#include "nnbf/rng.hpp"

namespace nnbf::channel {

inline constexpr double kSpeedOfLight = 2.99792458e8;  // m/s

// Maximum Doppler shift f_d = f_c * v / c (boresight worst case, phi = 0).
double doppler_max(double carrier_hz, double speed_mps);

// General form f_d = f_c * v * cos(phi) / c.
double doppler_shift(double carrier_hz, double speed_mps, double angle_rad);

// Per-receive-antenna symbol SNR reference: sigma^2 = 10^(-snr_db/10) under
// unit symbol energy and unit-normalized channel gain.
double snr_to_noise_var(double snr_db);

// One propagation path of the clustered multipath profile.
struct Path {
  cplx gain;          // complex amplitude a_p
  double delay_s;     // tau_p
  double doppler_hz;  // f_p
  double aoa_rad;     // theta_p at the array
};

// Per-UE path sets; power-normalized so sum_p E|a_p|^2 = 1 per UE.
struct PathSet {
  std::vector<std::vector<Path>> per_ue;
};

struct ScenarioConfig {
  std::int64_t L = 14;              // OFDM symbols per TTI
  std::int64_t K = 48;              // subcarriers
  std::int64_t M = 8;               // BS antennas
  std::int64_t N = 2;               // single-antenna UEs
  int paths = 12;                   // multipath components per UE
  double subcarrier_spacing_hz = 30e3;
  double symbol_duration_s = 500e-6 / 14.0;
  double carrier_hz = 2.6e9;
  double max_speed_mps = 0.0;       // 0 -> stationary UEs
  double delay_spread_s = 300e-9;   // rms of the exponential delay profile
  double max_delay_s = 2.3e-6;      // cyclic-prefix budget
  double aoa_half_width_rad = 1.0471975511965976;  // 60 degrees

  double max_doppler_hz() const { return doppler_max(carrier_hz, max_speed_mps); }
  void validate() const;
};

// True frequency-domain channel over one TTI, indexed (l, k, m, n).
struct ChannelRealization {
  CTensor h;  // shape (L, K, M, N)
  std::int64_t L() const { return h.dim(0); }
  std::int64_t K() const { return h.dim(1); }
  std::int64_t M() const { return h.dim(2); }
  std::int64_t N() const { return h.dim(3); }
};

// Imperfect CSI from pilot-based least-squares estimation.
struct ChannelEstimate {
  CTensor h;             // same shape as the paired realization
  double est_noise_var;  // error variance per entry, sigma^2 / N_p
};

PathSet draw_paths(const ScenarioConfig& cfg, RngStream& rng);

// H[l,k,m,n] = sum_p a_p exp(j pi m sin(theta_p))
//                     exp(j 2 pi (f_p l T_sym - tau_p k df))
// over a half-wavelength uniform linear array.
ChannelRealization generate_channel(const ScenarioConfig& cfg, RngStream& rng);
ChannelRealization channel_from_paths(const ScenarioConfig& cfg, const PathSet& paths);

// LS estimation with unit-power orthogonal pilots of length pilot_len reduces
// to H + E, E iid circular Gaussian with variance noise_var / pilot_len.
ChannelEstimate estimate_channel(const ChannelRealization& H, std::int64_t pilot_len,
                                 double noise_var, RngStream& rng);

// Entries ~ CN(0, noise_var): real/imag independent N(0, noise_var/2).
CTensor awgn(const Shape& shape, double noise_var, RngStream& rng);

// Binary caching layout: header of 32-bit counts then interleaved re/im
// float64 payload, row-major, little endian.
void write_channel(std::ostream& os, const ChannelRealization& H);
ChannelRealization read_channel(std::istream& is);

}  // namespace nnbf::channel
