#pragma once

#include <vector>

#include "nnbf/channel.hpp"
#include "nnbf/complex_tensor.hpp"

namespace nnbf::beamform {

// Per-resource-element linear receive combiners, indexed (l, k, u, m):
// row u at (l, k) is w_u^T, so the combiner output is the plain (not
// conjugated) product w_u^T y. Stored as the N x M row-stack that makes the
// closed forms and the SINR expression mutually consistent.
struct CombinerWeights {
  CTensor w;  // shape (L, K, N, M)
  std::int64_t L() const { return w.dim(0); }
  std::int64_t K() const { return w.dim(1); }
  std::int64_t N() const { return w.dim(2); }
  std::int64_t M() const { return w.dim(3); }
};

struct SinrReport {
  Shape shape;                          // (L, K, N)
  std::vector<double> gamma;            // desired / (interference + noise)
  std::vector<double> desired_power;
  std::vector<double> interference_power;
  std::vector<double> noise_power;
  std::int64_t idx(std::int64_t l, std::int64_t k, std::int64_t u) const {
    return (l * shape[1] + k) * shape[2] + u;
  }
};

// Nonnegative per-UE rate weights on the unit simplex.
struct RateWeights {
  std::vector<double> alpha;
  static RateWeights uniform(std::int64_t n);
  void validate() const;
};

// y indexed (l, k, m) -> symbol estimates (l, k, u) via w_u^T y.
CTensor apply_combiner(const CombinerWeights& W, const CTensor& y);

// gamma_u[l,k] = |w_u^T h_u|^2 / (sum_{i != u} |w_u^T h_i|^2 + sigma^2 ||w_u||^2)
SinrReport compute_sinr(const CombinerWeights& W, const channel::ChannelRealization& H,
                        double noise_var);

// Weighted sum-rate sum_u alpha_u log2(1 + gamma_u) per resource element.
struct SumRate {
  std::vector<double> per_re;  // (L*K)
  double mean;                 // aggregate over (l, k)
};
SumRate sum_rate(const SinrReport& report, const RateWeights& alpha);

// Rows of (H^H H)^-1 H^H per (l, k); fails on ill-conditioned channels.
CombinerWeights zfbf(const CTensor& h_est);

// Rows of (H^H H + sigma^2 I)^-1 H^H per (l, k).
CombinerWeights mmse(const CTensor& h_est, double noise_var);

// Matched filter w_u = conj(h_u)/||h_u|| (used for single-UE link sanity).
CombinerWeights matched_filter(const CTensor& h_est);

// Rescale any row with ||w_u|| > 1 back to the unit sphere; feasible rows are
// untouched. The total-power constraint tr(W^H W) <= N then holds.
CombinerWeights project_power(const CombinerWeights& raw);

inline constexpr double kConditionLimit = 1e8;

}  // namespace nnbf::beamform
