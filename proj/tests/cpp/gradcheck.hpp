#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "nnbf/rng.hpp"
#include "nnbf/tensor.hpp"

namespace testutil {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline nnbf::Tensor random_tensor(nnbf::Shape shape, nnbf::RngStream& rng,
                                  double scale = 1.0, bool requires_grad = false) {
  std::vector<double> v(static_cast<size_t>(nnbf::shape_numel(shape)));
  for (auto& x : v) x = rng.normal() * scale;
  return nnbf::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Central finite differences (step h, float64) against reverse-mode gradients
// for a scalar-valued function of the given leaves. Returns the worst
// relative error across all leaf elements.
inline double grad_check(
    const std::function<nnbf::Tensor(nnbf::GradTape*, std::vector<nnbf::Tensor>&)>& f,
    std::vector<nnbf::Tensor>& leaves, double h = 1e-5) {
  using namespace nnbf;
  for (auto& l : leaves) l.set_requires_grad(true);
  GradTape tape;
  Tensor loss = f(&tape, leaves);
  backward(tape, loss);
  double worst = 0.0;
  for (auto& leaf : leaves) {
    Tensor g = tape.grad(leaf);
    double* data = leaf.mutable_data();
    for (std::int64_t i = 0; i < leaf.numel(); ++i) {
      double keep = data[i];
      data[i] = keep + h;
      double lp = f(nullptr, leaves).scalar();
      data[i] = keep - h;
      double lm = f(nullptr, leaves).scalar();
      data[i] = keep;
      double fd = (lp - lm) / (2.0 * h);
      worst = std::max(worst, rel_err(g.data()[i], fd));
    }
  }
  return worst;
}

// Weighted-sum head so the scalarization is structure-sensitive.
inline nnbf::Tensor weighted_sum(nnbf::GradTape* tape, const nnbf::Tensor& t,
                                 std::uint64_t seed) {
  nnbf::RngStream rng(seed);
  std::vector<double> w(static_cast<size_t>(t.numel()));
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  nnbf::Tensor wt = nnbf::Tensor::from_data(t.shape(), std::move(w));
  return nnbf::sum_all(tape, nnbf::mul(tape, t, wt));
}

}  // namespace testutil
