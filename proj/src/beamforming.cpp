#include "nnbf/beamforming.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace nnbf::beamform {

namespace {
using CMat = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapCMat = Eigen::Map<const CMat>;

void check_grid(const CTensor& t, const char* what) {
  if (t.rank() != 4)
    throw DimensionError(std::string(what) + ": need a rank-4 tensor, got " +
                         shape_str(t.shape));
}
}  // namespace

RateWeights RateWeights::uniform(std::int64_t n) {
  RateWeights w;
  w.alpha.assign(static_cast<size_t>(n), 1.0 / static_cast<double>(n));
  return w;
}

void RateWeights::validate() const {
  double s = 0.0;
  for (double a : alpha) {
    if (a < 0.0) throw ConfigError("rate weights must be nonnegative");
    s += a;
  }
  if (std::abs(s - 1.0) > 1e-12)
    throw ConfigError("rate weights must sum to 1, got " + std::to_string(s));
}

CTensor apply_combiner(const CombinerWeights& W, const CTensor& y) {
  check_grid(W.w, "apply_combiner weights");
  if (y.rank() != 3)
    throw DimensionError("apply_combiner: received tensor must be (L,K,M), got " +
                         shape_str(y.shape));
  std::int64_t L = W.L(), K = W.K(), N = W.N(), M = W.M();
  if (y.dim(0) != L || y.dim(1) != K || y.dim(2) != M)
    throw DimensionError("apply_combiner: weights " + shape_str(W.w.shape) +
                         " incompatible with received " + shape_str(y.shape));
  CTensor out({L, K, N});
  for (std::int64_t l = 0; l < L; ++l)
    for (std::int64_t k = 0; k < K; ++k)
      for (std::int64_t u = 0; u < N; ++u) {
        cplx s(0.0, 0.0);
        for (std::int64_t m = 0; m < M; ++m)
          s += W.w.at4(l, k, u, m) * y[(l * K + k) * M + m];
        out[(l * K + k) * N + u] = s;
      }
  return out;
}

SinrReport compute_sinr(const CombinerWeights& W, const channel::ChannelRealization& H,
                        double noise_var) {
  check_grid(W.w, "compute_sinr weights");
  check_grid(H.h, "compute_sinr channel");
  std::int64_t L = W.L(), K = W.K(), N = W.N(), M = W.M();
  if (H.L() != L || H.K() != K || H.M() != M || H.N() != N)
    throw DimensionError("compute_sinr: weights " + shape_str(W.w.shape) +
                         " incompatible with channel " + shape_str(H.h.shape));
  SinrReport rep;
  rep.shape = {L, K, N};
  std::int64_t total = L * K * N;
  rep.gamma.resize(static_cast<size_t>(total));
  rep.desired_power.resize(static_cast<size_t>(total));
  rep.interference_power.resize(static_cast<size_t>(total));
  rep.noise_power.resize(static_cast<size_t>(total));
  for (std::int64_t l = 0; l < L; ++l)
    for (std::int64_t k = 0; k < K; ++k)
      for (std::int64_t u = 0; u < N; ++u) {
        double desired = 0.0, interf = 0.0, wnorm2 = 0.0;
        for (std::int64_t i = 0; i < N; ++i) {
          cplx dot(0.0, 0.0);
          for (std::int64_t m = 0; m < M; ++m)
            dot += W.w.at4(l, k, u, m) * H.h.at4(l, k, m, i);
          if (i == u)
            desired = std::norm(dot);
          else
            interf += std::norm(dot);
        }
        for (std::int64_t m = 0; m < M; ++m) wnorm2 += std::norm(W.w.at4(l, k, u, m));
        double noise = noise_var * wnorm2;
        double denom = interf + noise;
        if (denom == 0.0 && desired == 0.0)
          throw UndefinedSinrError(
              "SINR undefined: zero combiner row with zero noise at (l=" +
              std::to_string(l) + ", k=" + std::to_string(k) + ", u=" +
              std::to_string(u) + ")");
        std::int64_t idx = rep.idx(l, k, u);
        rep.desired_power[static_cast<size_t>(idx)] = desired;
        rep.interference_power[static_cast<size_t>(idx)] = interf;
        rep.noise_power[static_cast<size_t>(idx)] = noise;
        rep.gamma[static_cast<size_t>(idx)] = desired / denom;
      }
  return rep;
}

SumRate sum_rate(const SinrReport& report, const RateWeights& alpha) {
  alpha.validate();
  std::int64_t L = report.shape[0], K = report.shape[1], N = report.shape[2];
  if (static_cast<std::int64_t>(alpha.alpha.size()) != N)
    throw DimensionError("sum_rate: weight count does not match UE count");
  SumRate out;
  out.per_re.resize(static_cast<size_t>(L * K));
  double acc = 0.0;
  for (std::int64_t lk = 0; lk < L * K; ++lk) {
    double r = 0.0;
    for (std::int64_t u = 0; u < N; ++u)
      r += alpha.alpha[static_cast<size_t>(u)] *
           std::log2(1.0 + report.gamma[static_cast<size_t>(lk * N + u)]);
    out.per_re[static_cast<size_t>(lk)] = r;
    acc += r;
  }
  out.mean = acc / static_cast<double>(L * K);
  return out;
}

namespace {

// Shared solver for the Gram-based closed forms: rows of
// (H^H H + reg I)^-1 H^H at each (l, k). With reg == 0 this is the
// zero-forcing pseudo-inverse and conditioning is checked first.
CombinerWeights gram_solve(const CTensor& h_est, double reg, bool check_cond) {
  check_grid(h_est, "combiner input");
  std::int64_t L = h_est.dim(0), K = h_est.dim(1), M = h_est.dim(2), N = h_est.dim(3);
  if (M < N)
    throw ConfigError("combiner: need at least as many antennas as UEs");
  CombinerWeights W;
  W.w = CTensor({L, K, N, M});
  CMat H(M, N);
  for (std::int64_t l = 0; l < L; ++l)
    for (std::int64_t k = 0; k < K; ++k) {
      for (std::int64_t m = 0; m < M; ++m)
        for (std::int64_t n = 0; n < N; ++n) H(m, n) = h_est.at4(l, k, m, n);
      CMat gram = H.adjoint() * H;
      if (check_cond) {
        Eigen::SelfAdjointEigenSolver<CMat> eig(gram);
        double lo = eig.eigenvalues().minCoeff();
        double hi = eig.eigenvalues().maxCoeff();
        // cond(H) = sqrt of the Gram eigenvalue spread
        if (lo <= 0.0 || std::sqrt(hi / lo) > kConditionLimit)
          throw SingularChannelError(
              "channel estimate rank deficient or ill conditioned at (l=" +
                  std::to_string(l) + ", k=" + std::to_string(k) + ")",
              static_cast<int>(l), static_cast<int>(k));
      }
      for (std::int64_t n = 0; n < N; ++n) gram(n, n) += reg;
      // W_lk = (H^H H + reg I)^-1 H^H, an N x M row stack
      CMat sol = gram.llt().solve(H.adjoint());
      for (std::int64_t u = 0; u < N; ++u)
        for (std::int64_t m = 0; m < M; ++m) W.w.at4(l, k, u, m) = sol(u, m);
    }
  return W;
}

}  // namespace

CombinerWeights zfbf(const CTensor& h_est) { return gram_solve(h_est, 0.0, true); }

CombinerWeights mmse(const CTensor& h_est, double noise_var) {
  if (noise_var < 0.0) throw ConfigError("mmse: noise variance must be nonnegative");
  return gram_solve(h_est, noise_var, noise_var == 0.0);
}

CombinerWeights matched_filter(const CTensor& h_est) {
  check_grid(h_est, "matched_filter input");
  std::int64_t L = h_est.dim(0), K = h_est.dim(1), M = h_est.dim(2), N = h_est.dim(3);
  CombinerWeights W;
  W.w = CTensor({L, K, N, M});
  for (std::int64_t l = 0; l < L; ++l)
    for (std::int64_t k = 0; k < K; ++k)
      for (std::int64_t u = 0; u < N; ++u) {
        double nrm = 0.0;
        for (std::int64_t m = 0; m < M; ++m) nrm += std::norm(h_est.at4(l, k, m, u));
        nrm = std::sqrt(nrm);
        if (nrm == 0.0)
          throw SingularChannelError("matched filter on a zero channel at (l=" +
                                         std::to_string(l) + ", k=" + std::to_string(k) + ")",
                                     static_cast<int>(l), static_cast<int>(k));
        for (std::int64_t m = 0; m < M; ++m)
          W.w.at4(l, k, u, m) = std::conj(h_est.at4(l, k, m, u)) / nrm;
      }
  return W;
}

CombinerWeights project_power(const CombinerWeights& raw) {
  CombinerWeights out = raw;
  std::int64_t L = raw.L(), K = raw.K(), N = raw.N(), M = raw.M();
  for (std::int64_t l = 0; l < L; ++l)
    for (std::int64_t k = 0; k < K; ++k)
      for (std::int64_t u = 0; u < N; ++u) {
        double nrm2 = 0.0;
        for (std::int64_t m = 0; m < M; ++m) nrm2 += std::norm(raw.w.at4(l, k, u, m));
        if (nrm2 > 1.0) {
          double inv = 1.0 / std::sqrt(nrm2);
          for (std::int64_t m = 0; m < M; ++m) out.w.at4(l, k, u, m) *= inv;
        }
      }
  return out;
}

}  // namespace nnbf::beamform
