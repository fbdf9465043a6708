#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nnbf/channel.hpp"
#include "nnbf/model.hpp"
#include "nnbf/rng.hpp"
#include "nnbf/tensor.hpp"

namespace nnbf::train {

struct CurriculumStage {
  double min_snr_db;
  double max_snr_db;  // fixed at 20 dB
  std::int64_t steps;
};

struct CurriculumSchedule {
  std::vector<CurriculumStage> stages;

  // Stage minima 15, 10, 5, 0, -10 dB with the 20 dB ceiling.
  static CurriculumSchedule standard(std::int64_t steps_per_stage);
  std::int64_t total_steps() const;
  int stage_at(std::int64_t step) const;
  void validate() const;
};

struct TrainConfig {
  std::int64_t batch = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t lookahead_k = 13;
  double lookahead_alpha = 0.5;
  std::uint64_t seed = 1;
  bool genie_loss = true;     // SINR in the loss uses the true channel
  std::int64_t pilot_len = 8;
  void validate() const;      // learning rate must sit in [1e-5, 1e-2]
};

// alpha = softmax(logits), strictly positive, sums to one. Differentiable.
Tensor rate_weights(GradTape* tape, const Tensor& alpha_logits);

// Negative weighted sum-rate, Monte-Carlo averaged over batch and resource
// elements: -(1/(B L K)) sum_{b,l,k,u} alpha_u ln(1 + gamma_u). The combiner
// tensor is the (B, N, M, 2, L, K) projection output; the channel used for
// gamma is the true one in genie mode, the estimate otherwise.
struct LossResult {
  Tensor loss;                 // scalar, on tape
  double mean_sum_rate_bits;   // uniform-weight log2 sum-rate of the batch
};
LossResult sum_rate_loss(GradTape* tape, const Tensor& w_split,
                         const std::vector<CTensor>& h_loss, double noise_var,
                         const Tensor& alpha);

// Adaptive-moment base optimizer with bias correction.
class AdamOptimizer {
 public:
  AdamOptimizer(double lr, double beta1, double beta2, double eps);
  // Applies one update in place from the tape's gradients. Throws
  // TrainingDivergenceError naming the parameter on non-finite gradients.
  void step(std::vector<model::NamedParam>& params, GradTape& tape);
  std::int64_t step_count() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Slow/fast weight interpolation every k steps:
// theta_slow <- theta_slow + alpha (theta_fast - theta_slow); fast <- slow.
class Lookahead {
 public:
  Lookahead(std::int64_t k, double alpha, const std::vector<model::NamedParam>& params);
  std::int64_t k() const { return k_; }
  // Call after each base step with the base optimizer's step count.
  // Performs the sync exactly when step_count % k == 0.
  void maybe_sync(std::vector<model::NamedParam>& params, std::int64_t step_count);
  // Direct sync; throws ContractError off schedule.
  void sync(std::vector<model::NamedParam>& params, std::int64_t step_count);

 private:
  std::int64_t k_;
  double alpha_;
  std::vector<std::vector<double>> slow_;
};

// Uniform draw from [stage minimum, 20] dB for the stage active at `step`.
double sample_snr(const CurriculumSchedule& schedule, std::int64_t step,
                  RngStream& rng);

struct TrainLogRow {
  std::int64_t step;
  int stage;
  double snr_db;
  double loss;
  double sum_rate;
  std::vector<double> alpha;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  bool diverged = false;
  std::int64_t steps_done = 0;
};

// Full unsupervised loop: sample SNR -> channel batch -> estimate -> forward
// -> loss -> backward -> base step -> lookahead sync. Deterministic given
// (config, schedule, scenario, model seed). On divergence the model is left
// at the last finite-loss parameters.
TrainResult train(model::Model& m, const TrainConfig& cfg,
                  const CurriculumSchedule& schedule,
                  const channel::ScenarioConfig& scenario,
                  const std::function<void(const TrainLogRow&)>& on_step = {});

std::string train_log_csv(const TrainResult& r, std::int64_t n_ues);

}  // namespace nnbf::train
