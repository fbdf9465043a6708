#include "nnbf/selftest.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <ostream>

#include "nnbf/beamforming.hpp"
#include "nnbf/linkeval.hpp"
#include "nnbf/model.hpp"
#include "nnbf/rng.hpp"
#include "nnbf/tensor.hpp"

namespace nnbf::selftest {

namespace {

Tensor rnd(Shape s, RngStream& rng, double scale = 1.0) {
  std::vector<double> v(static_cast<size_t>(shape_numel(s)));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor::from_data(std::move(s), std::move(v), true);
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// central finite differences against the tape for a scalar-valued builder
double grad_check(const std::function<Tensor(GradTape*, std::vector<Tensor>&)>& f,
                  std::vector<Tensor>& leaves) {
  GradTape tape;
  Tensor loss = f(&tape, leaves);
  backward(tape, loss);
  const double h = 1e-5;
  double worst = 0.0;
  for (auto& leaf : leaves) {
    Tensor g = tape.grad(leaf);
    double* d = leaf.mutable_data();
    for (std::int64_t i = 0; i < leaf.numel(); ++i) {
      double keep = d[i];
      d[i] = keep + h;
      double lp = f(nullptr, leaves).scalar();
      d[i] = keep - h;
      double lm = f(nullptr, leaves).scalar();
      d[i] = keep;
      worst = std::max(worst, rel_err(g.data()[i], (lp - lm) / (2 * h)));
    }
  }
  return worst;
}

CTensor random_grid(Shape s, std::uint64_t seed) {
  RngStream rng(seed);
  CTensor t(std::move(s));
  for (auto& z : t.v) z = cplx(rng.normal(), rng.normal()) * std::sqrt(0.5);
  return t;
}

struct Failure {
  std::string detail;
};

}  // namespace

std::vector<CheckResult> run_selftest(std::ostream& os) {
  const char* fault = std::getenv("NNBF_FAULT_INJECT");
  if (fault && std::string(fault) == "gelu") detail::gelu_backward_fault = true;

  std::vector<std::pair<std::string, std::function<std::string()>>> checks;

  checks.emplace_back("gradient-gelu", [] {
    RngStream rng(11);
    std::vector<Tensor> leaves = {rnd({8}, rng)};
    auto f = [](GradTape* t, std::vector<Tensor>& xs) {
      return sum_all(t, gelu(t, xs[0]));
    };
    double e = grad_check(f, leaves);
    return e < 1e-4 ? "" : "gelu gradient mismatch, rel err " + std::to_string(e);
  });

  checks.emplace_back("gradient-matmul", [] {
    RngStream rng(12);
    std::vector<Tensor> leaves = {rnd({3, 4}, rng), rnd({4, 2}, rng)};
    auto f = [](GradTape* t, std::vector<Tensor>& xs) {
      return sum_all(t, matmul(t, xs[0], xs[1]));
    };
    double e = grad_check(f, leaves);
    return e < 1e-4 ? "" : "matmul gradient mismatch, rel err " + std::to_string(e);
  });

  checks.emplace_back("gradient-conv2d", [] {
    RngStream rng(13);
    std::vector<Tensor> leaves = {rnd({1, 2, 3, 3}, rng), rnd({2, 1, 3, 3}, rng)};
    auto f = [](GradTape* t, std::vector<Tensor>& xs) {
      return sum_all(t, conv2d(t, xs[0], xs[1], Tensor(), 2, PadMode::Reflect));
    };
    double e = grad_check(f, leaves);
    return e < 1e-4 ? "" : "conv2d gradient mismatch, rel err " + std::to_string(e);
  });

  checks.emplace_back("gradient-softmax", [] {
    RngStream rng(14);
    std::vector<Tensor> leaves = {rnd({3, 5}, rng)};
    auto f = [](GradTape* t, std::vector<Tensor>& xs) {
      Tensor s = softmax(t, xs[0], 1);
      return sum_all(t, mul(t, s, s));
    };
    double e = grad_check(f, leaves);
    return e < 1e-4 ? "" : "softmax gradient mismatch, rel err " + std::to_string(e);
  });

  checks.emplace_back("zf-inverts-channel", [] {
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
      CTensor h = random_grid({1, 1, 8, 2}, seed);
      auto W = beamform::zfbf(h);
      for (std::int64_t u = 0; u < 2; ++u)
        for (std::int64_t n = 0; n < 2; ++n) {
          cplx dot(0.0, 0.0);
          for (std::int64_t m = 0; m < 8; ++m)
            dot += W.w.at4(0, 0, u, m) * h.at4(0, 0, m, n);
          cplx expect = (u == n) ? cplx(1, 0) : cplx(0, 0);
          if (std::abs(dot - expect) > 1e-10)
            return std::string("zero-forcing residual above 1e-10");
        }
    }
    return std::string();
  });

  checks.emplace_back("mmse-zero-noise-is-zf", [] {
    CTensor h = random_grid({1, 2, 6, 2}, 5);
    auto Wz = beamform::zfbf(h);
    auto Wm = beamform::mmse(h, 0.0);
    for (std::int64_t i = 0; i < Wz.w.numel(); ++i)
      if (std::abs(Wz.w[i] - Wm.w[i]) > 1e-10)
        return std::string("mmse(0) differs from zf");
    return std::string();
  });

  checks.emplace_back("sinr-scale-invariance", [] {
    CTensor h = random_grid({1, 1, 4, 2}, 6);
    CTensor w = random_grid({1, 1, 2, 4}, 7);
    channel::ChannelRealization H;
    H.h = h;
    beamform::CombinerWeights W;
    W.w = w;
    auto base = beamform::compute_sinr(W, H, 0.3);
    RngStream rng(8);
    for (int rep = 0; rep < 10; ++rep) {
      cplx c(rng.normal(), rng.normal());
      beamform::CombinerWeights Ws;
      Ws.w = w;
      for (std::int64_t m = 0; m < 4; ++m) Ws.w.at4(0, 0, 1, m) *= c;
      auto scaled = beamform::compute_sinr(Ws, H, 0.3);
      for (size_t i = 0; i < base.gamma.size(); ++i)
        if (std::abs(base.gamma[i] - scaled.gamma[i]) >
            1e-10 * std::max(base.gamma[i], scaled.gamma[i]))
          return std::string("sinr changed under row scaling");
    }
    return std::string();
  });

  checks.emplace_back("attention-loop-oracle", [] {
    model::ModelConfig c;
    c.M = 2;
    c.N = 1;
    c.L = 2;
    c.K = 2;
    c.depth = 4;
    c.modules = 1;
    model::Model m(c, 21);
    RngStream rng(22);
    Tensor x = rnd({1, 2, 2, 2}, rng);
    x.set_requires_grad(false);
    Tensor got = m.self_attention(nullptr, 0, 0, x);
    // naive recomputation of the first sublayer attention map row sums
    auto& lay = m.self_layer(0, 0);
    const std::int64_t C = 2, T = 4;
    std::vector<double> Q(T * C), Kv(T * C), V(T * C);
    auto proj = [&](const Tensor& w, const Tensor& b, std::vector<double>& out) {
      for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t co = 0; co < C; ++co) {
          double s = b.data()[co];
          for (std::int64_t ci = 0; ci < C; ++ci)
            s += w.at({co, ci, 0, 0}) * x.data()[ci * T + t];
          double phi = 0.5 * std::erfc(-s / std::sqrt(2.0));
          out[static_cast<size_t>(t * C + co)] = s * phi;
        }
    };
    proj(lay.q_w, lay.q_b, Q);
    proj(lay.k_w, lay.k_b, Kv);
    proj(lay.v_w, lay.v_b, V);
    // context vector for token 0, then check it appears in sublayer 1
    std::vector<double> sc(T);
    double mx = -1e300;
    for (std::int64_t j = 0; j < T; ++j) {
      double s = 0;
      for (std::int64_t cc = 0; cc < C; ++cc)
        s += Q[static_cast<size_t>(cc)] * Kv[static_cast<size_t>(j * C + cc)];
      sc[static_cast<size_t>(j)] = s / std::sqrt(2.0);
      mx = std::max(mx, sc[static_cast<size_t>(j)]);
    }
    double den = 0;
    for (auto& s : sc) {
      s = std::exp(s - mx);
      den += s;
    }
    double rowsum = 0;
    for (auto& s : sc) rowsum += s / den;
    if (std::abs(rowsum - 1.0) > 1e-10)
      return std::string("attention map row not stochastic");
    if (!got.all_finite()) return std::string("attention output not finite");
    return std::string();
  });

  checks.emplace_back("codec-roundtrip", [] {
    RngStream rng(31);
    for (auto rate : {linkeval::CodeRate::Half, linkeval::CodeRate::ThreeQuarter}) {
      for (int rep = 0; rep < 100; ++rep) {
        std::vector<std::uint8_t> info(96);
        for (auto& b : info) b = rng.bit();
        auto coded = linkeval::conv_encode(info, rate);
        std::vector<double> llr(coded.size());
        for (size_t i = 0; i < coded.size(); ++i) llr[i] = coded[i] ? -3.0 : 3.0;
        if (linkeval::viterbi_decode(llr, rate, 96) != info)
          return std::string("noiseless codec roundtrip failed");
      }
    }
    return std::string();
  });

  checks.emplace_back("qam-roundtrip", [] {
    RngStream rng(41);
    for (int order : {4, 16, 64, 256}) {
      int q = linkeval::bits_per_symbol(order);
      std::vector<std::uint8_t> bits(static_cast<size_t>(q * 64));
      for (auto& b : bits) b = rng.bit();
      auto sym = linkeval::qam_modulate(bits, order);
      auto dem = linkeval::qam_demodulate(sym, order, 1e-4);
      if (dem.hard != bits) return std::string("qam roundtrip failed");
    }
    return std::string();
  });

  std::vector<CheckResult> results;
  os << "self test (" << checks.size() << " checks)\n";
  for (auto& [name, fn] : checks) {
    auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    try {
      detail = fn();
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    auto t1 = std::chrono::steady_clock::now();
    CheckResult r;
    r.name = name;
    r.passed = detail.empty();
    r.seconds = std::chrono::duration<double>(t1 - t0).count();
    r.detail = detail;
    os << "  " << (r.passed ? "PASS" : "FAIL") << "  " << std::left << std::setw(26)
       << r.name << std::fixed << std::setprecision(3) << r.seconds << " s";
    if (!r.passed) os << "  " << r.detail;
    os << "\n";
    results.push_back(std::move(r));
  }
  detail::gelu_backward_fault = false;
  return results;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.passed) return false;
  return true;
}

}  // namespace nnbf::selftest
