#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nnbf/beamforming.hpp"
#include "nnbf/channel.hpp"
#include "nnbf/model.hpp"

namespace nnbf::linkeval {

// ---- modulation -------------------------------------------------------------

bool valid_qam_order(int order);  // {4, 16, 64, 256}
int bits_per_symbol(int order);

// Gray-mapped square QAM, unit average constellation energy. Per axis the
// all-zero label sits at the most positive level; adjacent levels differ in
// one bit. First half of a symbol's bits select I, second half Q.
std::vector<cplx> qam_modulate(const std::vector<std::uint8_t>& bits, int order);

struct DemodResult {
  std::vector<std::uint8_t> hard;  // hard bit = (llr < 0)
  std::vector<double> llr;         // max-log, positive favors bit 0
};
// Max-log LLRs against the unit-energy constellation with the effective
// post-combining noise-plus-interference variance.
DemodResult qam_demodulate(const std::vector<cplx>& symbols, int order,
                           double noise_var_eff);

// ---- convolutional code ----------------------------------------------------

enum class CodeRate { Half, ThreeQuarter };

// Constraint-length-7 feed-forward code, generators 133/171 octal, zero
// terminated. Rate 3/4 through the period-3 puncturing pattern
// [c1: 1 1 0 / c2: 1 0 1].
std::vector<std::uint8_t> conv_encode(const std::vector<std::uint8_t>& info,
                                      CodeRate rate);
std::int64_t coded_length(std::int64_t info_len, CodeRate rate);
// Largest message length whose punctured codeword fits exactly in `capacity`.
std::int64_t info_length_for_capacity(std::int64_t capacity, CodeRate rate);

// Soft-input maximum-likelihood sequence decoding over the 64-state trellis;
// punctured positions are zero-LLR erasures.
std::vector<std::uint8_t> viterbi_decode(const std::vector<double>& llrs,
                                         CodeRate rate, std::int64_t info_len);

// ---- link simulation ---------------------------------------------------------

enum class BeamformerKind { Zf, Mmse, Nnbf, MatchedFilter };
std::string beamformer_name(BeamformerKind k);

struct LinkConfig {
  channel::ScenarioConfig scenario;
  int modulation_order = 4;
  bool coded = true;
  CodeRate rate = CodeRate::Half;
  std::int64_t pilot_len = 8;
};

struct TtiOutcome {
  std::vector<bool> block_error;  // per UE
  double sum_rate;                // uniform-alpha log2, vs the true channel
  double sum_rate_capped;         // min(rate, log2 order) variant per UE
  std::int64_t bit_errors;
  std::int64_t total_bits;
  bool skipped = false;           // singular channel under ZF
};

// One TTI: generate H, estimate, combine, transmit random blocks per Eq.-(1)
// style mixing, demodulate with the SINR-derived effective noise, decode.
TtiOutcome simulate_tti(const LinkConfig& cfg, BeamformerKind kind,
                        model::Model* nnbf_model, double snr_db,
                        std::uint64_t root_seed, std::uint64_t trial);

struct MetricRow {
  std::string beamformer;
  double snr_db;
  double sum_rate_mean;
  double sum_rate_ci;   // 1.96-sigma normal half width
  double bler;
  double bler_ci;       // binomial normal-approximation half width (1.96 sigma)
  std::int64_t trials;
  std::int64_t skipped;
};

// Independent trials per (beamformer, SNR); per-trial rng streams derived
// from (root seed, beamformer, snr index, trial index).
std::vector<MetricRow> sweep(const LinkConfig& cfg,
                             const std::vector<BeamformerKind>& beamformers,
                             model::Model* nnbf_model,
                             const std::vector<double>& snr_db,
                             std::int64_t trials, std::uint64_t root_seed,
                             int jobs = 1);

// Sum-rate-only ensemble evaluation (no coding chain): mean uniform-alpha
// log2 sum-rate over `n_channels` held-out realizations at one SNR.
double mean_sum_rate(const channel::ScenarioConfig& scenario, BeamformerKind kind,
                     model::Model* nnbf_model, double snr_db,
                     std::int64_t pilot_len, std::int64_t n_channels,
                     std::uint64_t root_seed);

std::string metrics_csv(const std::vector<MetricRow>& rows);
std::string metrics_json(const std::vector<MetricRow>& rows);

}  // namespace nnbf::linkeval
