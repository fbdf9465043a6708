#include "nnbf/linkeval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace nnbf::linkeval {

// ---- modulation -----------------------------------------------------------------

bool valid_qam_order(int order) {
  return order == 4 || order == 16 || order == 64 || order == 256;
}

int bits_per_symbol(int order) {
  switch (order) {
    case 4: return 2;
    case 16: return 4;
    case 64: return 6;
    case 256: return 8;
    default: throw ConfigError("unsupported QAM order " + std::to_string(order));
  }
}

namespace {

// Per-axis Gray table: level index i (descending from the most positive
// level) carries label gray(i) = i ^ (i >> 1), so label 0 sits at +max and
// adjacent levels differ in exactly one bit.
struct AxisMap {
  int bits;
  std::vector<double> level_of;  // label -> unnormalized odd-integer level
  double scale;                  // unit-energy normalization
};

AxisMap axis_map(int order) {
  int q = bits_per_symbol(order);
  int b = q / 2;
  int n = 1 << b;
  AxisMap m;
  m.bits = b;
  m.level_of.assign(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    int label = i ^ (i >> 1);
    m.level_of[static_cast<size_t>(label)] = static_cast<double>(n - 1 - 2 * i);
  }
  m.scale = std::sqrt(3.0 / (2.0 * (static_cast<double>(order) - 1.0)));
  return m;
}

}  // namespace

std::vector<cplx> qam_modulate(const std::vector<std::uint8_t>& bits, int order) {
  int q = bits_per_symbol(order);
  if (bits.size() % static_cast<size_t>(q) != 0)
    throw FramingError("bit count " + std::to_string(bits.size()) +
                       " not divisible by " + std::to_string(q) + " bits per symbol");
  AxisMap m = axis_map(order);
  int b = m.bits;
  std::vector<cplx> out;
  out.reserve(bits.size() / static_cast<size_t>(q));
  for (size_t s = 0; s < bits.size(); s += static_cast<size_t>(q)) {
    int li = 0, lq = 0;
    for (int t = 0; t < b; ++t) li = (li << 1) | bits[s + static_cast<size_t>(t)];
    for (int t = 0; t < b; ++t) lq = (lq << 1) | bits[s + static_cast<size_t>(b + t)];
    out.emplace_back(m.level_of[static_cast<size_t>(li)] * m.scale,
                     m.level_of[static_cast<size_t>(lq)] * m.scale);
  }
  return out;
}

DemodResult qam_demodulate(const std::vector<cplx>& symbols, int order,
                           double noise_var_eff) {
  AxisMap m = axis_map(order);
  int b = m.bits;
  int n = 1 << b;
  double nv = std::max(noise_var_eff, 1e-300);
  DemodResult res;
  res.llr.reserve(symbols.size() * static_cast<size_t>(2 * b));
  res.hard.reserve(symbols.size() * static_cast<size_t>(2 * b));
  std::vector<double> d(static_cast<size_t>(n));
  // max-log per axis (exact for square Gray QAM under circular noise)
  auto axis = [&](double x) {
    for (int label = 0; label < n; ++label) {
      double diff = x - m.level_of[static_cast<size_t>(label)] * m.scale;
      d[static_cast<size_t>(label)] = diff * diff;
    }
    for (int t = 0; t < b; ++t) {
      int mask = 1 << (b - 1 - t);
      double best0 = std::numeric_limits<double>::infinity();
      double best1 = best0;
      for (int label = 0; label < n; ++label) {
        if (label & mask)
          best1 = std::min(best1, d[static_cast<size_t>(label)]);
        else
          best0 = std::min(best0, d[static_cast<size_t>(label)]);
      }
      double llr = (best1 - best0) / nv;
      // bounded so that downstream path metrics stay finite
      llr = std::clamp(llr, -1e9, 1e9);
      res.llr.push_back(llr);
      res.hard.push_back(llr < 0.0 ? 1 : 0);
    }
  };
  for (const cplx& z : symbols) {
    axis(z.real());
    axis(z.imag());
  }
  return res;
}

// ---- convolutional code -----------------------------------------------------------

namespace {
constexpr int kConstraint = 7;
constexpr int kStates = 64;     // 2^(K-1)
constexpr unsigned kG1 = 0x5B;  // 133 octal
constexpr unsigned kG2 = 0x79;  // 171 octal
constexpr int kTail = kConstraint - 1;

inline int parity(unsigned v) { return __builtin_popcount(v) & 1; }

// puncturing pattern, period 3 input pairs -> 4 kept bits
constexpr bool kKeepC1[3] = {true, true, false};
constexpr bool kKeepC2[3] = {true, false, true};
}  // namespace

std::vector<std::uint8_t> conv_encode(const std::vector<std::uint8_t>& info,
                                      CodeRate rate) {
  if (rate != CodeRate::Half && rate != CodeRate::ThreeQuarter)
    throw ConfigError("unsupported coding rate");
  std::vector<std::uint8_t> out;
  unsigned reg = 0;  // K-1 bits of history
  std::int64_t t = 0;
  auto push = [&](std::uint8_t u) {
    unsigned full = (static_cast<unsigned>(u) << kTail) | reg;
    std::uint8_t c1 = static_cast<std::uint8_t>(parity(full & kG1));
    std::uint8_t c2 = static_cast<std::uint8_t>(parity(full & kG2));
    if (rate == CodeRate::Half) {
      out.push_back(c1);
      out.push_back(c2);
    } else {
      if (kKeepC1[t % 3]) out.push_back(c1);
      if (kKeepC2[t % 3]) out.push_back(c2);
    }
    reg = full >> 1;
    ++t;
  };
  for (std::uint8_t u : info) push(u & 1u);
  for (int i = 0; i < kTail; ++i) push(0);
  return out;
}

std::int64_t coded_length(std::int64_t info_len, CodeRate rate) {
  std::int64_t pairs = info_len + kTail;
  if (rate == CodeRate::Half) return 2 * pairs;
  std::int64_t full = (pairs / 3) * 4;
  std::int64_t rem = pairs % 3;
  if (rem == 1) full += 2;  // phase 0 keeps both bits
  if (rem == 2) full += 3;  // phases 0 and 1 keep three bits
  return full;
}

std::int64_t info_length_for_capacity(std::int64_t capacity, CodeRate rate) {
  if (coded_length(1, rate) > capacity)
    throw FramingError("capacity " + std::to_string(capacity) +
                       " too small for any message");
  std::int64_t lo = 1;
  while (coded_length(lo + 1, rate) <= capacity) ++lo;
  return lo;
}

std::vector<std::uint8_t> viterbi_decode(const std::vector<double>& llrs,
                                         CodeRate rate, std::int64_t info_len) {
  std::int64_t steps = info_len + kTail;
  if (static_cast<std::int64_t>(llrs.size()) != coded_length(info_len, rate))
    throw FramingError("LLR count " + std::to_string(llrs.size()) +
                       " does not match codeword length " +
                       std::to_string(coded_length(info_len, rate)) +
                       " for message length " + std::to_string(info_len));

  // depuncture into (c1, c2) soft pairs; erased positions carry zero
  std::vector<double> l1(static_cast<size_t>(steps), 0.0);
  std::vector<double> l2(static_cast<size_t>(steps), 0.0);
  size_t pos = 0;
  for (std::int64_t t = 0; t < steps; ++t) {
    bool k1 = rate == CodeRate::Half || kKeepC1[t % 3];
    bool k2 = rate == CodeRate::Half || kKeepC2[t % 3];
    if (k1) l1[static_cast<size_t>(t)] = llrs[pos++];
    if (k2) l2[static_cast<size_t>(t)] = llrs[pos++];
  }

  constexpr double kNeg = -std::numeric_limits<double>::infinity();
  std::vector<double> metric(kStates, kNeg), next(kStates, kNeg);
  metric[0] = 0.0;  // encoder starts in the all-zero state
  std::vector<std::uint8_t> pred(static_cast<size_t>(steps) * kStates);

  for (std::int64_t t = 0; t < steps; ++t) {
    std::fill(next.begin(), next.end(), kNeg);
    double a = 0.5 * l1[static_cast<size_t>(t)];
    double b = 0.5 * l2[static_cast<size_t>(t)];
    std::uint8_t* pr = pred.data() + t * kStates;
    int max_u = (t < info_len) ? 1 : 0;  // zero termination
    for (int s = 0; s < kStates; ++s) {
      double base = metric[static_cast<size_t>(s)];
      if (base == kNeg) continue;
      for (int u = 0; u <= max_u; ++u) {
        unsigned full = (static_cast<unsigned>(u) << kTail) | static_cast<unsigned>(s);
        // positive LLR favors bit 0: add +l/2 for 0, -l/2 for 1
        double bm = (parity(full & kG1) ? -a : a) + (parity(full & kG2) ? -b : b);
        int ns = static_cast<int>(full >> 1);
        double cand = base + bm;
        if (cand > next[static_cast<size_t>(ns)]) {
          next[static_cast<size_t>(ns)] = cand;
          pr[ns] = static_cast<std::uint8_t>(((s & 1) << 1) | u);
        }
      }
    }
    metric.swap(next);
  }

  // traceback from the all-zero terminal state
  std::vector<std::uint8_t> decoded(static_cast<size_t>(steps));
  int state = 0;
  for (std::int64_t t = steps - 1; t >= 0; --t) {
    std::uint8_t pu = pred[static_cast<size_t>(t * kStates + state)];
    decoded[static_cast<size_t>(t)] = pu & 1u;
    state = ((state << 1) | (pu >> 1)) & (kStates - 1);
  }
  decoded.resize(static_cast<size_t>(info_len));
  return decoded;
}

// ---- link simulation -----------------------------------------------------------

std::string beamformer_name(BeamformerKind k) {
  switch (k) {
    case BeamformerKind::Zf: return "zf";
    case BeamformerKind::Mmse: return "mmse";
    case BeamformerKind::Nnbf: return "nnbf";
    case BeamformerKind::MatchedFilter: return "mf";
  }
  return "?";
}

TtiOutcome simulate_tti(const LinkConfig& cfg, BeamformerKind kind,
                        model::Model* nnbf_model, double snr_db,
                        std::uint64_t root_seed, std::uint64_t trial) {
  if (!valid_qam_order(cfg.modulation_order))
    throw ConfigError("unsupported modulation order " +
                      std::to_string(cfg.modulation_order));
  const auto& sc = cfg.scenario;
  double noise_var = channel::snr_to_noise_var(snr_db);
  RngStream chan_rng = derive_stream(root_seed, "tti-chan", trial);
  RngStream est_rng = derive_stream(root_seed, "tti-est", trial);
  RngStream bit_rng = derive_stream(root_seed, "tti-bits", trial);
  RngStream noise_rng = derive_stream(root_seed, "tti-noise", trial);

  channel::ChannelRealization H = channel::generate_channel(sc, chan_rng);
  channel::ChannelEstimate est =
      channel::estimate_channel(H, cfg.pilot_len, noise_var, est_rng);

  TtiOutcome out;
  beamform::CombinerWeights W;
  try {
    switch (kind) {
      case BeamformerKind::Zf: W = beamform::zfbf(est.h); break;
      case BeamformerKind::Mmse: W = beamform::mmse(est.h, noise_var); break;
      case BeamformerKind::MatchedFilter: W = beamform::matched_filter(est.h); break;
      case BeamformerKind::Nnbf: {
        if (!nnbf_model)
          throw ConfigError("nnbf beamformer requested without a model");
        W = nnbf_model->infer({est.h})[0];
        break;
      }
    }
  } catch (const SingularChannelError&) {
    out.skipped = true;
    return out;
  }

  auto report = beamform::compute_sinr(W, H, noise_var);
  auto rate = beamform::sum_rate(report, beamform::RateWeights::uniform(sc.N));
  out.sum_rate = rate.mean;
  // modulation-capped variant: each UE rate term saturates at log2(order)
  double cap = static_cast<double>(bits_per_symbol(cfg.modulation_order));
  double capped = 0.0;
  for (std::int64_t lk = 0; lk < sc.L * sc.K; ++lk)
    for (std::int64_t u = 0; u < sc.N; ++u)
      capped +=
          std::min(std::log2(1.0 + report.gamma[static_cast<size_t>(lk * sc.N + u)]),
                   cap) /
          static_cast<double>(sc.N);
  out.sum_rate_capped = capped / static_cast<double>(sc.L * sc.K);

  // transport blocks: one per UE per TTI spanning the full data grid
  int q = bits_per_symbol(cfg.modulation_order);
  std::int64_t capacity = sc.L * sc.K * q;
  std::int64_t info_len =
      cfg.coded ? info_length_for_capacity(capacity, cfg.rate) : capacity;
  std::vector<std::vector<std::uint8_t>> tx_info(static_cast<size_t>(sc.N));
  std::vector<std::vector<cplx>> tx_sym(static_cast<size_t>(sc.N));
  for (std::int64_t u = 0; u < sc.N; ++u) {
    auto& info = tx_info[static_cast<size_t>(u)];
    info.resize(static_cast<size_t>(info_len));
    for (auto& b : info) b = bit_rng.bit() ? 1 : 0;
    std::vector<std::uint8_t> coded = cfg.coded ? conv_encode(info, cfg.rate) : info;
    coded.resize(static_cast<size_t>(capacity), 0);  // zero padding fills the grid
    tx_sym[static_cast<size_t>(u)] = qam_modulate(coded, cfg.modulation_order);
  }

  // received grid per the linear mixing model with white receiver noise
  CTensor y({sc.L, sc.K, sc.M});
  for (std::int64_t l = 0; l < sc.L; ++l)
    for (std::int64_t k = 0; k < sc.K; ++k)
      for (std::int64_t m = 0; m < sc.M; ++m) {
        cplx acc(0.0, 0.0);
        for (std::int64_t u = 0; u < sc.N; ++u)
          acc += H.h.at4(l, k, m, u) *
                 tx_sym[static_cast<size_t>(u)][static_cast<size_t>(l * sc.K + k)];
        y[(l * sc.K + k) * sc.M + m] = acc;
      }
  if (noise_var > 0.0) {
    double ns = std::sqrt(noise_var * 0.5);
    for (auto& z : y.v) z += cplx(noise_rng.normal() * ns, noise_rng.normal() * ns);
  }

  CTensor yhat = beamform::apply_combiner(W, y);

  out.block_error.assign(static_cast<size_t>(sc.N), false);
  out.bit_errors = 0;
  out.total_bits = 0;
  for (std::int64_t u = 0; u < sc.N; ++u) {
    // equalize by the combined gain; the demodulator's effective noise is the
    // interference-plus-noise term of the shared SINR decomposition
    std::vector<double> llr;
    llr.reserve(static_cast<size_t>(capacity));
    for (std::int64_t l = 0; l < sc.L; ++l)
      for (std::int64_t k = 0; k < sc.K; ++k) {
        std::int64_t lk = l * sc.K + k;
        std::int64_t idx = report.idx(l, k, u);
        cplx g(0.0, 0.0);
        for (std::int64_t m = 0; m < sc.M; ++m)
          g += W.w.at4(l, k, u, m) * H.h.at4(l, k, m, u);
        double eff = report.interference_power[static_cast<size_t>(idx)] +
                     report.noise_power[static_cast<size_t>(idx)];
        cplx zz = yhat[lk * sc.N + u] / g;
        double vz = eff / std::norm(g);
        auto d = qam_demodulate({zz}, cfg.modulation_order, vz);
        for (double v : d.llr) llr.push_back(v);
      }
    const auto& info = tx_info[static_cast<size_t>(u)];
    std::vector<std::uint8_t> rx_info;
    if (cfg.coded) {
      llr.resize(static_cast<size_t>(coded_length(info_len, cfg.rate)));
      rx_info = viterbi_decode(llr, cfg.rate, info_len);
    } else {
      rx_info.resize(static_cast<size_t>(info_len));
      for (std::int64_t i = 0; i < info_len; ++i)
        rx_info[static_cast<size_t>(i)] = llr[static_cast<size_t>(i)] < 0.0 ? 1 : 0;
    }
    bool err = false;
    for (std::int64_t i = 0; i < info_len; ++i) {
      if (rx_info[static_cast<size_t>(i)] != info[static_cast<size_t>(i)]) {
        ++out.bit_errors;
        err = true;
      }
    }
    out.total_bits += info_len;
    out.block_error[static_cast<size_t>(u)] = err;
  }
  return out;
}

std::vector<MetricRow> sweep(const LinkConfig& cfg,
                             const std::vector<BeamformerKind>& beamformers,
                             model::Model* nnbf_model,
                             const std::vector<double>& snr_db, std::int64_t trials,
                             std::uint64_t root_seed, int jobs) {
  if (trials < 1) throw ConfigError("sweep needs at least one trial");
  std::vector<MetricRow> rows;
  for (size_t bi = 0; bi < beamformers.size(); ++bi) {
    for (size_t si = 0; si < snr_db.size(); ++si) {
      std::vector<double> rates(static_cast<size_t>(trials), 0.0);
      std::vector<std::int64_t> blocks(static_cast<size_t>(trials), 0);
      std::vector<std::int64_t> errors(static_cast<size_t>(trials), 0);
      std::vector<std::uint8_t> skipped(static_cast<size_t>(trials), 0);
      std::uint64_t base = (static_cast<std::uint64_t>(bi) * snr_db.size() + si) *
                           static_cast<std::uint64_t>(trials);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 4) num_threads(jobs) if (jobs > 1)
#endif
      for (std::int64_t t = 0; t < trials; ++t) {
        TtiOutcome o = simulate_tti(cfg, beamformers[bi], nnbf_model, snr_db[si],
                                    root_seed, base + static_cast<std::uint64_t>(t));
        if (o.skipped) {
          skipped[static_cast<size_t>(t)] = 1;
          continue;
        }
        rates[static_cast<size_t>(t)] = o.sum_rate;
        blocks[static_cast<size_t>(t)] =
            static_cast<std::int64_t>(o.block_error.size());
        for (bool e : o.block_error) errors[static_cast<size_t>(t)] += e ? 1 : 0;
      }
      MetricRow row;
      row.beamformer = beamformer_name(beamformers[bi]);
      row.snr_db = snr_db[si];
      row.trials = trials;
      std::int64_t ok = 0, blk = 0, err = 0;
      double sum = 0.0, sum2 = 0.0;
      for (std::int64_t t = 0; t < trials; ++t) {
        if (skipped[static_cast<size_t>(t)]) continue;
        ++ok;
        sum += rates[static_cast<size_t>(t)];
        sum2 += rates[static_cast<size_t>(t)] * rates[static_cast<size_t>(t)];
        blk += blocks[static_cast<size_t>(t)];
        err += errors[static_cast<size_t>(t)];
      }
      row.skipped = trials - ok;
      row.sum_rate_mean = ok ? sum / static_cast<double>(ok) : 0.0;
      double var = ok > 1 ? (sum2 - sum * sum / static_cast<double>(ok)) /
                                static_cast<double>(ok - 1)
                          : 0.0;
      row.sum_rate_ci =
          ok ? 1.96 * std::sqrt(std::max(var, 0.0) / static_cast<double>(ok)) : 0.0;
      double p = blk ? static_cast<double>(err) / static_cast<double>(blk) : 0.0;
      row.bler = p;
      row.bler_ci =
          blk ? 1.96 * std::sqrt(p * (1.0 - p) / static_cast<double>(blk)) : 0.0;
      rows.push_back(row);
    }
  }
  return rows;
}

double mean_sum_rate(const channel::ScenarioConfig& scenario, BeamformerKind kind,
                     model::Model* nnbf_model, double snr_db, std::int64_t pilot_len,
                     std::int64_t n_channels, std::uint64_t root_seed) {
  double noise_var = channel::snr_to_noise_var(snr_db);
  double acc = 0.0;
  std::int64_t counted = 0;
  const std::int64_t chunk = 8;
  for (std::int64_t i = 0; i < n_channels; i += chunk) {
    std::int64_t nb = std::min(chunk, n_channels - i);
    std::vector<CTensor> h_true, h_est;
    for (std::int64_t b = 0; b < nb; ++b) {
      RngStream rng =
          derive_stream(root_seed, "heldout", static_cast<std::uint64_t>(i + b));
      channel::ChannelRealization H = channel::generate_channel(scenario, rng);
      channel::ChannelEstimate est =
          channel::estimate_channel(H, pilot_len, noise_var, rng);
      h_true.push_back(std::move(H.h));
      h_est.push_back(std::move(est.h));
    }
    std::vector<beamform::CombinerWeights> ws;
    if (kind == BeamformerKind::Nnbf) {
      if (!nnbf_model) throw ConfigError("nnbf evaluation requested without a model");
      ws = nnbf_model->infer(h_est);
    } else {
      for (std::int64_t b = 0; b < nb; ++b) {
        try {
          switch (kind) {
            case BeamformerKind::Zf:
              ws.push_back(beamform::zfbf(h_est[static_cast<size_t>(b)]));
              break;
            case BeamformerKind::Mmse:
              ws.push_back(beamform::mmse(h_est[static_cast<size_t>(b)], noise_var));
              break;
            default:
              ws.push_back(beamform::matched_filter(h_est[static_cast<size_t>(b)]));
          }
        } catch (const SingularChannelError&) {
          ws.push_back(beamform::CombinerWeights{});
        }
      }
    }
    for (std::int64_t b = 0; b < nb; ++b) {
      if (!ws[static_cast<size_t>(b)].w.numel()) continue;  // skipped singular draw
      channel::ChannelRealization H;
      H.h = h_true[static_cast<size_t>(b)];
      acc += beamform::sum_rate(
                 beamform::compute_sinr(ws[static_cast<size_t>(b)], H, noise_var),
                 beamform::RateWeights::uniform(scenario.N))
                 .mean;
      ++counted;
    }
  }
  return counted ? acc / static_cast<double>(counted) : 0.0;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "beamformer,snr_db,sum_rate_mean,sum_rate_ci,bler,bler_ci,trials\n";
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << buf;
  };
  for (const auto& r : rows) {
    os << r.beamformer << ",";
    put(r.snr_db);
    os << ",";
    put(r.sum_rate_mean);
    os << ",";
    put(r.sum_rate_ci);
    os << ",";
    put(r.bler);
    os << ",";
    put(r.bler_ci);
    os << "," << r.trials << "\n";
  }
  return os.str();
}

std::string metrics_json(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  os << "[\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    os << "  {\"beamformer\": \"" << r.beamformer
       << "\", \"snr_db\": " << num(r.snr_db)
       << ", \"sum_rate_mean\": " << num(r.sum_rate_mean)
       << ", \"sum_rate_ci\": " << num(r.sum_rate_ci)
       << ", \"bler\": " << num(r.bler) << ", \"bler_ci\": " << num(r.bler_ci)
       << ", \"trials\": " << r.trials << ", \"skipped\": " << r.skipped << "}"
       << (i + 1 < rows.size() ? "," : "") << "\n";
  }
  os << "]\n";
  return os.str();
}

}  // namespace nnbf::linkeval
