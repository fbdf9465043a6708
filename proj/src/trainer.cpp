#include "nnbf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace nnbf::train {

// ---- schedule ----------------------------------------------------------------

CurriculumSchedule CurriculumSchedule::standard(std::int64_t steps_per_stage) {
  CurriculumSchedule s;
  for (double lo : {15.0, 10.0, 5.0, 0.0, -10.0})
    s.stages.push_back({lo, 20.0, steps_per_stage});
  return s;
}

std::int64_t CurriculumSchedule::total_steps() const {
  std::int64_t t = 0;
  for (const auto& st : stages) t += st.steps;
  return t;
}

int CurriculumSchedule::stage_at(std::int64_t step) const {
  std::int64_t acc = 0;
  for (size_t i = 0; i < stages.size(); ++i) {
    acc += stages[i].steps;
    if (step < acc) return static_cast<int>(i);
  }
  return static_cast<int>(stages.size()) - 1;
}

void CurriculumSchedule::validate() const {
  if (stages.empty()) throw ConfigError("curriculum needs at least one stage");
  for (size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    if (st.steps < 1) throw ConfigError("curriculum stage needs a positive step count");
    if (st.max_snr_db != 20.0)
      throw ConfigError("curriculum maximum SNR is fixed at 20 dB");
    if (st.min_snr_db > st.max_snr_db)
      throw ConfigError("curriculum stage minimum exceeds the 20 dB ceiling");
    if (i > 0 && st.min_snr_db >= stages[i - 1].min_snr_db)
      throw ConfigError("curriculum stage minima must be strictly decreasing");
  }
}

void TrainConfig::validate() const {
  if (batch < 2)
    throw ConfigError("training batch must be at least 2 for batch normalization");
  if (lr < 1e-5 || lr > 1e-2)
    throw ConfigError("learning rate " + std::to_string(lr) +
                      " outside the supported range [1e-5, 1e-2]");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ConfigError("moment decays must lie in [0, 1)");
  if (eps <= 0.0) throw ConfigError("optimizer epsilon must be positive");
  if (lookahead_k < 1) throw ConfigError("lookahead interval must be positive");
  if (lookahead_alpha < 0.0 || lookahead_alpha > 1.0)
    throw ConfigError("lookahead coefficient must lie in [0, 1]");
  if (pilot_len < 1) throw ConfigError("pilot length must be positive");
}

double sample_snr(const CurriculumSchedule& schedule, std::int64_t step,
                  RngStream& rng) {
  const auto& st = schedule.stages.at(static_cast<size_t>(schedule.stage_at(step)));
  return rng.uniform(st.min_snr_db, st.max_snr_db);
}

// ---- loss ----------------------------------------------------------------------

Tensor rate_weights(GradTape* tape, const Tensor& alpha_logits) {
  return softmax(tape, alpha_logits, alpha_logits.rank() - 1);
}

LossResult sum_rate_loss(GradTape* tape, const Tensor& w_split,
                         const std::vector<CTensor>& h_loss, double noise_var,
                         const Tensor& alpha) {
  if (w_split.rank() != 6)
    throw DimensionError("sum_rate_loss: combiner tensor must be (B,N,M,2,L,K)");
  std::int64_t B = w_split.dim(0), N = w_split.dim(1), M = w_split.dim(2);
  std::int64_t L = w_split.dim(4), K = w_split.dim(5);
  if (static_cast<std::int64_t>(h_loss.size()) != B)
    throw DimensionError("sum_rate_loss: channel batch size mismatch");
  std::int64_t R = B * L * K;

  // combiner rows as batched (R, N, M) real/imag matrices
  auto rows = [&](std::int64_t ri) {
    Tensor s = slice(tape, w_split, 3, ri, 1);  // (B,N,M,1,L,K)
    s = reshape(tape, s, {B, N, M, L, K});
    s = permute(tape, s, {0, 3, 4, 1, 2});      // (B,L,K,N,M)
    return reshape(tape, s, {R, N, M});
  };
  Tensor Wre = rows(0);
  Tensor Wim = rows(1);

  // channel columns as constant (R, M, N) matrices
  Tensor Hre = Tensor::zeros({R, M, N});
  Tensor Him = Tensor::zeros({R, M, N});
  double* hre = Hre.mutable_data();
  double* him = Him.mutable_data();
  for (std::int64_t b = 0; b < B; ++b) {
    const CTensor& g = h_loss[static_cast<size_t>(b)];
    if (g.dim(0) != L || g.dim(1) != K || g.dim(2) != M || g.dim(3) != N)
      throw DimensionError("sum_rate_loss: channel grid " + shape_str(g.shape) +
                           " incompatible with combiners");
    for (std::int64_t l = 0; l < L; ++l)
      for (std::int64_t k = 0; k < K; ++k) {
        std::int64_t r = (b * L + l) * K + k;
        for (std::int64_t m = 0; m < M; ++m)
          for (std::int64_t n = 0; n < N; ++n) {
            cplx z = g.at4(l, k, m, n);
            hre[(r * M + m) * N + n] = z.real();
            him[(r * M + m) * N + n] = z.imag();
          }
      }
  }

  // P[u,i] = w_u^T h_i, squared magnitudes split into desired and interference
  Tensor Pre = sub(tape, bmm(tape, Wre, Hre), bmm(tape, Wim, Him));
  Tensor Pim = add(tape, bmm(tape, Wre, Him), bmm(tape, Wim, Hre));
  Tensor P2 = add(tape, mul(tape, Pre, Pre), mul(tape, Pim, Pim));  // (R,N,N)

  Tensor eye = Tensor::zeros({1, N, N});
  Tensor off = Tensor::zeros({1, N, N});
  for (std::int64_t u = 0; u < N; ++u)
    for (std::int64_t i = 0; i < N; ++i) {
      if (u == i)
        eye.mutable_data()[u * N + i] = 1.0;
      else
        off.mutable_data()[u * N + i] = 1.0;
    }
  Tensor desired = sum_axis(tape, mul(tape, P2, eye), 2, false);  // (R,N)
  Tensor interf = sum_axis(tape, mul(tape, P2, off), 2, false);

  Tensor wnorm2 = add(tape, sum_axis(tape, mul(tape, Wre, Wre), 2, false),
                      sum_axis(tape, mul(tape, Wim, Wim), 2, false));  // (R,N)
  Tensor denom = add(tape, interf, mul_scalar(tape, wnorm2, noise_var));
  Tensor gamma = div(tape, desired, denom);
  Tensor rates = log1p(tape, gamma);  // natural log per the training objective

  if (alpha.numel() != N)
    throw DimensionError("sum_rate_loss: rate weight count mismatch");
  Tensor weighted = mul(tape, rates, reshape(tape, alpha, {1, N}));
  Tensor loss =
      mul_scalar(tape, sum_all(tape, weighted), -1.0 / static_cast<double>(R));

  // uniform-weight log2 sum-rate of the batch for logging and evaluation
  double acc = 0.0;
  const double* gp = gamma.data();
  for (std::int64_t r = 0; r < R; ++r)
    for (std::int64_t u = 0; u < N; ++u) acc += std::log2(1.0 + gp[r * N + u]);
  LossResult out;
  out.loss = loss;
  out.mean_sum_rate_bits = acc / (static_cast<double>(R) * static_cast<double>(N));
  return out;
}

// ---- optimizers -----------------------------------------------------------------

AdamOptimizer::AdamOptimizer(double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamOptimizer::step(std::vector<model::NamedParam>& params, GradTape& tape) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(static_cast<size_t>(params[i].t.numel()), 0.0);
      v_[i].assign(static_cast<size_t>(params[i].t.numel()), 0.0);
    }
  }
  ++t_;
  double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor g = tape.grad(params[i].t);
    const double* gp = g.data();
    double* th = params[i].t.mutable_data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    std::int64_t n = params[i].t.numel();
    for (std::int64_t j = 0; j < n; ++j) {
      if (!std::isfinite(gp[j]))
        throw TrainingDivergenceError("non-finite gradient in parameter " +
                                      params[i].name);
      m[j] = b1_ * m[j] + (1.0 - b1_) * gp[j];
      v[j] = b2_ * v[j] + (1.0 - b2_) * gp[j] * gp[j];
      double mh = m[j] / bc1;
      double vh = v[j] / bc2;
      th[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

Lookahead::Lookahead(std::int64_t k, double alpha,
                     const std::vector<model::NamedParam>& params)
    : k_(k), alpha_(alpha) {
  if (k < 1) throw ConfigError("lookahead interval must be positive");
  if (alpha < 0.0 || alpha > 1.0)
    throw ConfigError("lookahead coefficient must lie in [0, 1]");
  slow_.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i)
    slow_[i].assign(params[i].t.data(), params[i].t.data() + params[i].t.numel());
}

void Lookahead::sync(std::vector<model::NamedParam>& params, std::int64_t step_count) {
  if (step_count % k_ != 0)
    throw ContractError("lookahead sync called off schedule at step " +
                        std::to_string(step_count) + " with k " + std::to_string(k_));
  for (size_t i = 0; i < params.size(); ++i) {
    double* fast = params[i].t.mutable_data();
    double* slow = slow_[i].data();
    std::int64_t n = params[i].t.numel();
    for (std::int64_t j = 0; j < n; ++j) {
      slow[j] += alpha_ * (fast[j] - slow[j]);
      fast[j] = slow[j];
    }
  }
}

void Lookahead::maybe_sync(std::vector<model::NamedParam>& params,
                           std::int64_t step_count) {
  if (step_count % k_ == 0) sync(params, step_count);
}

// ---- training loop ----------------------------------------------------------------

namespace {
std::vector<std::vector<double>> snapshot(const std::vector<model::NamedParam>& params) {
  std::vector<std::vector<double>> s(params.size());
  for (size_t i = 0; i < params.size(); ++i)
    s[i].assign(params[i].t.data(), params[i].t.data() + params[i].t.numel());
  return s;
}

void restore(std::vector<model::NamedParam>& params,
             const std::vector<std::vector<double>>& snap) {
  for (size_t i = 0; i < params.size(); ++i)
    std::copy(snap[i].begin(), snap[i].end(), params[i].t.mutable_data());
}
}  // namespace

TrainResult train(model::Model& m, const TrainConfig& cfg,
                  const CurriculumSchedule& schedule,
                  const channel::ScenarioConfig& scenario,
                  const std::function<void(const TrainLogRow&)>& on_step) {
  cfg.validate();
  schedule.validate();
  if (scenario.L != m.config().L || scenario.K != m.config().K ||
      scenario.M != m.config().M || scenario.N != m.config().N)
    throw ConfigError("scenario dimensions do not match the model configuration");

  AdamOptimizer adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
  Lookahead la(cfg.lookahead_k, cfg.lookahead_alpha, m.params());
  RngStream snr_rng = derive_stream(cfg.seed, "train-snr");

  TrainResult result;
  std::int64_t total = schedule.total_steps();
  auto last_good = snapshot(m.params());
  for (std::int64_t step = 0; step < total; ++step) {
    double snr_db = sample_snr(schedule, step, snr_rng);
    double noise_var = channel::snr_to_noise_var(snr_db);

    std::vector<CTensor> h_true, h_est;
    h_true.reserve(static_cast<size_t>(cfg.batch));
    h_est.reserve(static_cast<size_t>(cfg.batch));
    for (std::int64_t b = 0; b < cfg.batch; ++b) {
      RngStream chan = derive_stream(cfg.seed, "train-channel",
                                     static_cast<std::uint64_t>(step * cfg.batch + b));
      channel::ChannelRealization H = channel::generate_channel(scenario, chan);
      channel::ChannelEstimate est =
          channel::estimate_channel(H, cfg.pilot_len, noise_var, chan);
      h_true.push_back(std::move(H.h));
      h_est.push_back(std::move(est.h));
    }

    GradTape tape;
    Tensor w = m.forward(&tape, h_est, true);
    Tensor alpha = rate_weights(&tape, m.alpha_logits());
    LossResult lr =
        sum_rate_loss(&tape, w, cfg.genie_loss ? h_true : h_est, noise_var, alpha);
    double loss_val = lr.loss.scalar();
    if (!std::isfinite(loss_val)) {
      restore(m.params(), last_good);
      result.diverged = true;
      break;
    }
    last_good = snapshot(m.params());
    backward(tape, lr.loss);
    try {
      adam.step(m.params(), tape);
    } catch (const TrainingDivergenceError&) {
      restore(m.params(), last_good);
      result.diverged = true;
      break;
    }
    la.maybe_sync(m.params(), adam.step_count());

    TrainLogRow row;
    row.step = step;
    row.stage = schedule.stage_at(step);
    row.snr_db = snr_db;
    row.loss = loss_val;
    row.sum_rate = lr.mean_sum_rate_bits;
    row.alpha.assign(alpha.data(), alpha.data() + alpha.numel());
    result.log.push_back(row);
    result.steps_done = step + 1;
    if (on_step) on_step(row);
  }
  return result;
}

std::string train_log_csv(const TrainResult& r, std::int64_t n_ues) {
  std::ostringstream os;
  os << "step,stage,snr_db,loss,sum_rate";
  for (std::int64_t u = 0; u < n_ues; ++u) os << ",alpha_" << u;
  os << "\n";
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << buf;
  };
  for (const auto& row : r.log) {
    os << row.step << "," << row.stage << ",";
    put(row.snr_db);
    os << ",";
    put(row.loss);
    os << ",";
    put(row.sum_rate);
    for (double a : row.alpha) {
      os << ",";
      put(a);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace nnbf::train
