#include "nnbf/model.hpp"

#include <cmath>
#include <fstream>

#include "nnbf/rng.hpp"
#include "nnbf/serialize.hpp"

namespace nnbf::model {

void ModelConfig::validate() const {
  if (M < 2)
    throw ConfigError("model needs M >= 2 antennas; cross attention is undefined "
                      "with a single chunk");
  if (N < 1 || L < 1 || K < 1) throw ConfigError("model dimensions must be positive");
  if (depth % M != 0)
    throw ConfigError("depth " + std::to_string(depth) + " not divisible by M " +
                      std::to_string(M));
  if (modules < 1) throw ConfigError("need at least one attention module");
  if (ffn_expand < 1) throw ConfigError("ffn_expand must be positive");
  if (kernel < 1 || kernel % 2 == 0)
    throw ConfigError("kernel extent must be odd, got " + std::to_string(kernel));
}

// ---- layout conversions ------------------------------------------------------

Tensor interleave_input(const std::vector<CTensor>& grids) {
  if (grids.empty()) throw DimensionError("interleave_input: empty batch");
  const Shape& s = grids[0].shape;
  if (s.size() != 4) throw DimensionError("interleave_input: need (L,K,M,N) grids");
  std::int64_t L = s[0], K = s[1], M = s[2], N = s[3];
  std::int64_t B = static_cast<std::int64_t>(grids.size());
  std::int64_t C = 2 * M * N;
  Tensor out = Tensor::zeros({B, C, L, K});
  double* o = out.mutable_data();
  for (std::int64_t b = 0; b < B; ++b) {
    const CTensor& g = grids[static_cast<size_t>(b)];
    if (g.shape != s) throw DimensionError("interleave_input: ragged batch");
    for (std::int64_t m = 0; m < M; ++m)
      for (std::int64_t n = 0; n < N; ++n) {
        std::int64_t c_re = 2 * (m * N + n);
        double* dst_re = o + ((b * C + c_re) * L) * K;
        double* dst_im = o + ((b * C + c_re + 1) * L) * K;
        for (std::int64_t l = 0; l < L; ++l)
          for (std::int64_t k = 0; k < K; ++k) {
            cplx z = g.at4(l, k, m, n);
            dst_re[l * K + k] = z.real();
            dst_im[l * K + k] = z.imag();
          }
      }
  }
  return out;
}

Tensor split_output_channels(GradTape* tape, const Tensor& w_raw, std::int64_t M,
                             std::int64_t N) {
  if (w_raw.rank() != 4 || w_raw.dim(1) != 2 * M * N)
    throw DimensionError("split_output_channels: expected channel extent " +
                         std::to_string(2 * M * N) + ", got " +
                         shape_str(w_raw.shape()));
  std::int64_t B = w_raw.dim(0), L = w_raw.dim(2), K = w_raw.dim(3);
  return reshape(tape, w_raw, {B, N, M, 2, L, K});
}

Tensor project_rows(GradTape* tape, const Tensor& w_split) {
  if (w_split.rank() != 6)
    throw DimensionError("project_rows: expected (B,N,M,2,L,K), got " +
                         shape_str(w_split.shape()));
  Tensor sq = mul(tape, w_split, w_split);
  Tensor s_ri = sum_axis(tape, sq, 3, true);   // (B,N,M,1,L,K)
  Tensor s_m = sum_axis(tape, s_ri, 2, true);  // (B,N,1,1,L,K)
  Tensor norm = sqrt(tape, s_m);
  Tensor denom = clamp_min(tape, norm, 1.0);
  return div(tape, w_split, denom);
}

std::vector<beamform::CombinerWeights> Model::to_combiners(const Tensor& w_split) {
  if (w_split.rank() != 6)
    throw DimensionError("to_combiners: expected (B,N,M,2,L,K)");
  std::int64_t B = w_split.dim(0), N = w_split.dim(1), M = w_split.dim(2);
  std::int64_t L = w_split.dim(4), K = w_split.dim(5);
  const double* p = w_split.data();
  auto at = [&](std::int64_t b, std::int64_t u, std::int64_t m, std::int64_t ri,
                std::int64_t l, std::int64_t k) {
    return p[((((b * N + u) * M + m) * 2 + ri) * L + l) * K + k];
  };
  std::vector<beamform::CombinerWeights> out(static_cast<size_t>(B));
  for (std::int64_t b = 0; b < B; ++b) {
    auto& W = out[static_cast<size_t>(b)];
    W.w = CTensor({L, K, N, M});
    for (std::int64_t l = 0; l < L; ++l)
      for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t u = 0; u < N; ++u)
          for (std::int64_t m = 0; m < M; ++m)
            W.w.at4(l, k, u, m) = cplx(at(b, u, m, 0, l, k), at(b, u, m, 1, l, k));
  }
  return out;
}

Tensor Model::positional_encoding(std::int64_t dim, std::int64_t L, std::int64_t K) {
  Tensor pe = Tensor::zeros({1, dim, L, K});
  double* p = pe.mutable_data();
  std::int64_t d_l = dim - dim / 2;  // l gets the extra channel when dim is odd
  auto fill = [&](std::int64_t c0, std::int64_t half, bool use_l) {
    for (std::int64_t c = 0; c < half; ++c) {
      double expo = static_cast<double>(2 * (c / 2)) / static_cast<double>(half);
      double freq = std::pow(10000.0, -expo);
      for (std::int64_t l = 0; l < L; ++l)
        for (std::int64_t k = 0; k < K; ++k) {
          double pos = static_cast<double>(use_l ? l : k);
          double a = pos * freq;
          p[((c0 + c) * L + l) * K + k] = (c % 2 == 0) ? std::sin(a) : std::cos(a);
        }
    }
  };
  fill(0, d_l, true);
  fill(d_l, dim / 2, false);
  return pe;
}

// ---- construction ------------------------------------------------------------

Tensor Model::reg(const std::string& name, Tensor t) {
  for (const auto& p : params_)
    if (p.name == name) throw ContractError("parameter registered twice: " + name);
  t.set_requires_grad(true);
  params_.push_back({name, t});
  return t;
}

void Model::register_bn(const std::string& name, BatchNormState* st, std::int64_t C) {
  st->running_mean.assign(static_cast<size_t>(C), 0.0);
  st->running_var.assign(static_cast<size_t>(C), 1.0);
  bn_states_.emplace_back(name, st);
}

namespace {
Tensor init_normal(Shape shape, double stddev, RngStream& rng) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.normal() * stddev;
  return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor conv_init(std::int64_t cout, std::int64_t cin_g, std::int64_t kh,
                 std::int64_t kw, RngStream& rng) {
  double fan_in = static_cast<double>(cin_g * kh * kw);
  return init_normal({cout, cin_g, kh, kw}, std::sqrt(2.0 / fan_in), rng);
}

// Identity-biased convolution: center tap carries channel c -> c (modulo the
// smaller extent) on top of small noise. Keeps the signal path near-identity
// at the start of training, which the post-norm residual stack needs to
// converge at desk scale.
Tensor conv_init_identity(std::int64_t cout, std::int64_t cin, std::int64_t kh,
                          std::int64_t kw, RngStream& rng) {
  double fan_in = static_cast<double>(cin * kh * kw);
  Tensor t = init_normal({cout, cin, kh, kw}, 0.1 * std::sqrt(2.0 / fan_in), rng);
  double* d = t.mutable_data();
  for (std::int64_t co = 0; co < cout; ++co) {
    std::int64_t ci = co % cin;
    d[((co * cin + ci) * kh + kh / 2) * kw + kw / 2] += 1.0;
  }
  return t;
}
}  // namespace

AttentionLayer Model::make_attention_layer(const std::string& prefix,
                                           std::int64_t width, RngStream& rng) {
  AttentionLayer a;
  std::int64_t hidden = width * cfg_.ffn_expand;
  // value and second feed-forward projections start small so each residual
  // sublayer is close to an identity under the post-layer normalization
  a.q_w = reg(prefix + ".q.w", conv_init(width, width, 1, 1, rng));
  a.q_b = reg(prefix + ".q.b", Tensor::zeros({width}));
  a.k_w = reg(prefix + ".k.w", conv_init(width, width, 1, 1, rng));
  a.k_b = reg(prefix + ".k.b", Tensor::zeros({width}));
  a.v_w = reg(prefix + ".v.w",
              init_normal({width, width, 1, 1},
                          0.1 * std::sqrt(2.0 / static_cast<double>(width)), rng));
  a.v_b = reg(prefix + ".v.b", Tensor::zeros({width}));
  a.ln1_g = reg(prefix + ".ln1.g", Tensor::full({width}, 1.0));
  a.ln1_b = reg(prefix + ".ln1.b", Tensor::zeros({width}));
  a.ffn_w1 = reg(prefix + ".ffn.w1",
                 init_normal({width, hidden},
                             std::sqrt(2.0 / static_cast<double>(width)), rng));
  a.ffn_b1 = reg(prefix + ".ffn.b1", Tensor::zeros({hidden}));
  a.ffn_w2 = reg(prefix + ".ffn.w2",
                 init_normal({hidden, width},
                             0.1 * std::sqrt(2.0 / static_cast<double>(hidden)), rng));
  a.ffn_b2 = reg(prefix + ".ffn.b2", Tensor::zeros({width}));
  a.ln2_g = reg(prefix + ".ln2.g", Tensor::full({width}, 1.0));
  a.ln2_b = reg(prefix + ".ln2.b", Tensor::zeros({width}));
  return a;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  RngStream rng = derive_stream(seed, "model-init");
  std::int64_t C = cfg_.io_channels();
  std::int64_t depth = cfg_.depth;
  std::int64_t dim = cfg_.dim();
  std::int64_t kk = cfg_.kernel;

  conv1_.w = reg("front.conv1.w", conv_init_identity(depth, C, kk, kk, rng));
  conv1_.b = reg("front.conv1.b", Tensor::zeros({depth}));
  conv1_.bn_gamma = reg("front.conv1.bn.g", Tensor::full({depth}, 1.0));
  conv1_.bn_beta = reg("front.conv1.bn.b", Tensor::zeros({depth}));
  register_bn("front.conv1.bn", &conv1_.bn, depth);

  // depthwise pair: groups = min(in, out) = depth
  gconv1_.w = reg("front.gconv1.w", conv_init(depth, 1, kk, kk, rng));
  gconv1_.b = reg("front.gconv1.b", Tensor::zeros({depth}));
  gconv1_.bn_gamma = reg("front.gconv1.bn.g", Tensor::full({depth}, 1.0));
  gconv1_.bn_beta = reg("front.gconv1.bn.b", Tensor::zeros({depth}));
  register_bn("front.gconv1.bn", &gconv1_.bn, depth);

  gconv2_.w = reg("front.gconv2.w", conv_init(depth, 1, kk, kk, rng));
  gconv2_.b = reg("front.gconv2.b", Tensor::zeros({depth}));
  gconv2_.bn_gamma = reg("front.gconv2.bn.g", Tensor::full({depth}, 1.0));
  gconv2_.bn_beta = reg("front.gconv2.bn.b", Tensor::zeros({depth}));
  register_bn("front.gconv2.bn", &gconv2_.bn, depth);

  pw_w_ = reg("front.pointwise.w", conv_init_identity(depth, depth, 1, 1, rng));
  pw_b_ = reg("front.pointwise.b", Tensor::zeros({depth}));

  embed_.resize(static_cast<size_t>(cfg_.M));
  for (std::int64_t i = 0; i < cfg_.M; ++i) {
    auto& e = embed_[static_cast<size_t>(i)];
    std::string p = "embed." + std::to_string(i);
    e.w = reg(p + ".w", conv_init_identity(dim, dim, 1, 1, rng));
    e.bn_gamma = reg(p + ".bn.g", Tensor::full({dim}, 1.0));
    e.bn_beta = reg(p + ".bn.b", Tensor::zeros({dim}));
    register_bn(p + ".bn", &e.bn, dim);
  }
  pos_enc_ = positional_encoding(dim, cfg_.L, cfg_.K);

  mca_.resize(static_cast<size_t>(cfg_.modules));
  double beta_init = 1.0 / static_cast<double>(cfg_.M - 1);
  for (std::int64_t d = 0; d < cfg_.modules; ++d) {
    auto& mod = mca_[static_cast<size_t>(d)];
    for (std::int64_t i = 0; i < cfg_.M; ++i) {
      std::string p = "mca." + std::to_string(d) + ".chunk" + std::to_string(i);
      mod.self_attn.push_back(make_attention_layer(p + ".sa", dim, rng));
      mod.cross_attn.push_back(make_attention_layer(p + ".ca", dim, rng));
      mod.beta.push_back(reg("mca." + std::to_string(d) + ".beta" + std::to_string(i),
                             Tensor::full({1}, beta_init)));
    }
  }

  reduce_w_ = reg("reduce.w", conv_init_identity(C, depth, 1, 1, rng));
  reduce_b_ = reg("reduce.b", Tensor::zeros({C}));
  pair_attn_ = make_attention_layer("pair", C, rng);
  head_w1_ = reg("head.conv1.w", conv_init_identity(C, C, kk, kk, rng));
  head_b1_ = reg("head.conv1.b", Tensor::zeros({C}));
  // The last convolution starts as the conjugate-transpose wiring: output
  // channel 2(u M + m) + ri reads input channel 2(m N + u) + ri with the
  // imaginary part negated, so the untrained network already behaves like a
  // matched filter and training refines from there.
  {
    Tensor hw2 = init_normal({C, C, kk, kk},
                             0.1 * std::sqrt(2.0 / static_cast<double>(C * kk * kk)), rng);
    double* d = hw2.mutable_data();
    for (std::int64_t u = 0; u < cfg_.N; ++u)
      for (std::int64_t mm = 0; mm < cfg_.M; ++mm)
        for (std::int64_t ri = 0; ri < 2; ++ri) {
          std::int64_t co = 2 * (u * cfg_.M + mm) + ri;
          std::int64_t ci = 2 * (mm * cfg_.N + u) + ri;
          d[((co * C + ci) * kk + kk / 2) * kk + kk / 2] += (ri == 0) ? 1.0 : -1.0;
        }
    head_w2_ = reg("head.conv2.w", hw2);
  }
  head_b2_ = reg("head.conv2.b", Tensor::zeros({C}));
  alpha_logits_ = reg("alpha_logits", Tensor::zeros({cfg_.N}));
}

std::int64_t Model::param_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.t.numel();
  return n;
}

AttentionLayer& Model::self_layer(int module, int chunk) {
  return mca_.at(static_cast<size_t>(module)).self_attn.at(static_cast<size_t>(chunk));
}
AttentionLayer& Model::cross_layer(int module, int chunk) {
  return mca_.at(static_cast<size_t>(module)).cross_attn.at(static_cast<size_t>(chunk));
}
Tensor& Model::mixing_beta(int module, int chunk) {
  return mca_.at(static_cast<size_t>(module)).beta.at(static_cast<size_t>(chunk));
}
ChunkEmbed& Model::chunk_embed(int chunk) {
  return embed_.at(static_cast<size_t>(chunk));
}

// ---- pipeline ----------------------------------------------------------------

Tensor Model::front_end(GradTape* tape, const Tensor& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != cfg_.io_channels())
    throw ConfigError("front_end: expected channel extent " +
                      std::to_string(cfg_.io_channels()) + ", got " +
                      shape_str(x.shape()));
  Tensor c1 = conv2d(tape, x, conv1_.w, conv1_.b, 1, PadMode::Reflect);
  c1 = gelu(tape, batch_norm(tape, c1, conv1_.bn_gamma, conv1_.bn_beta, conv1_.bn,
                             training));
  Tensor g = conv2d(tape, c1, gconv1_.w, gconv1_.b, static_cast<int>(cfg_.depth),
                    PadMode::Reflect);
  g = gelu(tape, batch_norm(tape, g, gconv1_.bn_gamma, gconv1_.bn_beta, gconv1_.bn,
                            training));
  g = conv2d(tape, g, gconv2_.w, gconv2_.b, static_cast<int>(cfg_.depth),
             PadMode::Reflect);
  g = gelu(tape, batch_norm(tape, g, gconv2_.bn_gamma, gconv2_.bn_beta, gconv2_.bn,
                            training));
  Tensor res = add(tape, c1, g);
  return conv2d(tape, res, pw_w_, pw_b_, 1, PadMode::None);
}

std::vector<Tensor> Model::split_and_embed(GradTape* tape, const Tensor& features,
                                           bool training) {
  if (features.rank() != 4 || features.dim(1) != cfg_.depth)
    throw ConfigError("split_and_embed: expected depth " + std::to_string(cfg_.depth) +
                      " channels, got " + shape_str(features.shape()));
  std::int64_t dim = cfg_.dim();
  std::vector<Tensor> chunks;
  chunks.reserve(static_cast<size_t>(cfg_.M));
  for (std::int64_t i = 0; i < cfg_.M; ++i) {
    auto& e = embed_[static_cast<size_t>(i)];
    Tensor c = slice(tape, features, 1, i * dim, dim);
    c = conv2d(tape, c, e.w, Tensor(), 1, PadMode::None);
    c = batch_norm(tape, c, e.bn_gamma, e.bn_beta, e.bn, training);
    chunks.push_back(add(tape, c, pos_enc_));
  }
  return chunks;
}

Tensor Model::spatial_attention(GradTape* tape, AttentionLayer& layer,
                                const Tensor& q_src, const Tensor& kv_src) {
  std::int64_t B = q_src.dim(0), C = q_src.dim(1), L = q_src.dim(2), Kd = q_src.dim(3);
  std::int64_t T = L * Kd;
  auto tokens = [&](const Tensor& t) {
    return reshape(tape, permute(tape, t, {0, 2, 3, 1}), {B, T, C});
  };
  Tensor Q = tokens(gelu(tape, conv2d(tape, q_src, layer.q_w, layer.q_b, 1, PadMode::None)));
  Tensor Kt = tokens(gelu(tape, conv2d(tape, kv_src, layer.k_w, layer.k_b, 1, PadMode::None)));
  Tensor V = tokens(gelu(tape, conv2d(tape, kv_src, layer.v_w, layer.v_b, 1, PadMode::None)));
  Tensor scores = mul_scalar(tape, bmm(tape, Q, permute(tape, Kt, {0, 2, 1})),
                             1.0 / std::sqrt(static_cast<double>(C)));
  Tensor attn = softmax(tape, scores, 2);
  Tensor ctx = bmm(tape, attn, V);
  Tensor base = tokens(q_src);
  Tensor s1 = layer_norm(tape, add(tape, base, ctx), layer.ln1_g, layer.ln1_b);
  Tensor rows = reshape(tape, s1, {B * T, C});
  Tensor ff = linear(tape, gelu(tape, linear(tape, rows, layer.ffn_w1, layer.ffn_b1)),
                     layer.ffn_w2, layer.ffn_b2);
  Tensor s2 = layer_norm(tape, add(tape, s1, reshape(tape, ff, {B, T, C})),
                         layer.ln2_g, layer.ln2_b);
  return permute(tape, reshape(tape, s2, {B, L, Kd, C}), {0, 3, 1, 2});
}

Tensor Model::channel_attention(GradTape* tape, AttentionLayer& layer, const Tensor& x) {
  std::int64_t B = x.dim(0), C = x.dim(1), L = x.dim(2), Kd = x.dim(3);
  std::int64_t P = B * L * Kd;  // positions act as batch, channels as tokens
  auto col = [&](const Tensor& t) {
    return reshape(tape, permute(tape, t, {0, 2, 3, 1}), {P, C, 1});
  };
  Tensor Q = col(gelu(tape, conv2d(tape, x, layer.q_w, layer.q_b, 1, PadMode::None)));
  Tensor Kt = col(gelu(tape, conv2d(tape, x, layer.k_w, layer.k_b, 1, PadMode::None)));
  Tensor V = col(gelu(tape, conv2d(tape, x, layer.v_w, layer.v_b, 1, PadMode::None)));
  // per position the score matrix is the outer product of the q and k
  // vectors; the per-token feature length is 1, so no scale is applied
  Tensor scores = bmm(tape, Q, permute(tape, Kt, {0, 2, 1}));
  Tensor attn = softmax(tape, scores, 2);
  Tensor ctx = reshape(tape, bmm(tape, attn, V), {P, C});
  Tensor base = reshape(tape, permute(tape, x, {0, 2, 3, 1}), {P, C});
  Tensor s1 = layer_norm(tape, add(tape, base, ctx), layer.ln1_g, layer.ln1_b);
  Tensor ff = linear(tape, gelu(tape, linear(tape, s1, layer.ffn_w1, layer.ffn_b1)),
                     layer.ffn_w2, layer.ffn_b2);
  Tensor s2 = layer_norm(tape, add(tape, s1, ff), layer.ln2_g, layer.ln2_b);
  return permute(tape, reshape(tape, s2, {B, L, Kd, C}), {0, 3, 1, 2});
}

Tensor Model::self_attention(GradTape* tape, int module, int chunk, const Tensor& x) {
  return spatial_attention(tape, self_layer(module, chunk), x, x);
}

Tensor Model::cross_attention(GradTape* tape, int module, int chunk,
                              const Tensor& z_own, const std::vector<Tensor>& z_all) {
  if (cfg_.M < 2) throw ConfigError("cross attention needs at least two chunks");
  if (static_cast<std::int64_t>(z_all.size()) != cfg_.M)
    throw DimensionError("cross_attention: need all M self-attention outputs");
  auto& mod = mca_.at(static_cast<size_t>(module));
  Tensor mixed;
  Shape bshape(static_cast<size_t>(z_own.rank()), 1);
  for (std::int64_t j = 0; j < cfg_.M; ++j) {
    if (j == chunk) continue;
    Tensor bj = reshape(tape, mod.beta[static_cast<size_t>(j)], bshape);
    Tensor term = mul(tape, z_all[static_cast<size_t>(j)], bj);
    mixed = mixed.defined() ? add(tape, mixed, term) : term;
  }
  return spatial_attention(tape, cross_layer(module, chunk), z_own, mixed);
}

Tensor Model::antenna_pair_attention(GradTape* tape, const Tensor& features) {
  if (features.dim(1) != cfg_.io_channels())
    throw ConfigError("antenna_pair_attention: expected channel extent " +
                      std::to_string(cfg_.io_channels()) + ", got " +
                      shape_str(features.shape()));
  return channel_attention(tape, pair_attn_, features);
}

Tensor Model::head(GradTape* tape, const Tensor& features) {
  Tensor h = conv2d(tape, features, head_w1_, head_b1_, 1, PadMode::Reflect);
  h = gelu(tape, h);
  return conv2d(tape, h, head_w2_, head_b2_, 1, PadMode::Reflect);
}

Tensor Model::forward(GradTape* tape, const std::vector<CTensor>& h_est, bool training) {
  for (const auto& g : h_est)
    if (g.rank() != 4 || g.dim(0) != cfg_.L || g.dim(1) != cfg_.K ||
        g.dim(2) != cfg_.M || g.dim(3) != cfg_.N)
      throw ConfigError("forward: channel grid " + shape_str(g.shape) +
                        " does not match model scenario");
  Tensor x = interleave_input(h_est);
  Tensor f = front_end(tape, x, training);
  std::vector<Tensor> chunks = split_and_embed(tape, f, training);
  for (std::int64_t d = 0; d < cfg_.modules; ++d) {
    std::vector<Tensor> z;
    z.reserve(chunks.size());
    for (std::int64_t i = 0; i < cfg_.M; ++i)
      z.push_back(self_attention(tape, static_cast<int>(d), static_cast<int>(i),
                                 chunks[static_cast<size_t>(i)]));
    std::vector<Tensor> next;
    next.reserve(chunks.size());
    for (std::int64_t i = 0; i < cfg_.M; ++i) {
      Tensor c = cross_attention(tape, static_cast<int>(d), static_cast<int>(i),
                                 z[static_cast<size_t>(i)], z);
      next.push_back(add(tape, chunks[static_cast<size_t>(i)], c));
    }
    chunks = std::move(next);
  }
  Tensor cat = concat(tape, chunks, 1);
  Tensor red = conv2d(tape, cat, reduce_w_, reduce_b_, 1, PadMode::None);
  Tensor pa = antenna_pair_attention(tape, red);
  Tensor raw = head(tape, pa);
  Tensor split = split_output_channels(tape, raw, cfg_.M, cfg_.N);
  return project_rows(tape, split);
}

std::vector<beamform::CombinerWeights> Model::infer(const std::vector<CTensor>& h_est) {
  return to_combiners(forward(nullptr, h_est, false));
}

// ---- checkpoint io -----------------------------------------------------------

namespace {
constexpr std::uint32_t kCheckpointMagic = 0x4642344eu;
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

struct ModelIo {
  static void save(const Model& m, std::ostream& os) {
    io::write_u32(os, kCheckpointMagic);
    io::write_u32(os, kCheckpointVersion);
    const ModelConfig& c = m.cfg_;
    for (std::int64_t v : {c.M, c.N, c.L, c.K, c.depth, c.modules, c.ffn_expand, c.kernel})
      io::write_i32(os, static_cast<std::int32_t>(v));
    io::write_u32(os, static_cast<std::uint32_t>(m.params_.size()));
    for (const auto& p : m.params_) {
      io::write_string(os, p.name);
      io::write_u32(os, static_cast<std::uint32_t>(p.t.rank()));
      for (int i = 0; i < p.t.rank(); ++i)
        io::write_i32(os, static_cast<std::int32_t>(p.t.dim(i)));
      for (std::int64_t i = 0; i < p.t.numel(); ++i) io::write_f64(os, p.t.data()[i]);
    }
    io::write_u32(os, static_cast<std::uint32_t>(m.bn_states_.size()));
    for (const auto& [name, st] : m.bn_states_) {
      io::write_string(os, name);
      io::write_u32(os, static_cast<std::uint32_t>(st->running_mean.size()));
      io::write_f64(os, st->momentum);
      io::write_f64(os, st->eps);
      for (double v : st->running_mean) io::write_f64(os, v);
      for (double v : st->running_var) io::write_f64(os, v);
    }
  }

  static Model load(std::istream& is) {
    if (io::read_u32(is) != kCheckpointMagic) throw IoError("bad checkpoint magic");
    if (io::read_u32(is) != kCheckpointVersion)
      throw IoError("unsupported checkpoint version");
    ModelConfig c;
    c.M = io::read_i32(is);
    c.N = io::read_i32(is);
    c.L = io::read_i32(is);
    c.K = io::read_i32(is);
    c.depth = io::read_i32(is);
    c.modules = io::read_i32(is);
    c.ffn_expand = io::read_i32(is);
    c.kernel = io::read_i32(is);
    Model m(c, 0);
    std::uint32_t np = io::read_u32(is);
    if (np != m.params_.size())
      throw IoError("checkpoint parameter count mismatch: file has " +
                    std::to_string(np) + ", model expects " +
                    std::to_string(m.params_.size()));
    for (auto& p : m.params_) {
      std::string name = io::read_string(is);
      if (name != p.name)
        throw IoError("checkpoint parameter order mismatch at " + name);
      std::uint32_t r = io::read_u32(is);
      Shape s(r);
      for (std::uint32_t i = 0; i < r; ++i) s[i] = io::read_i32(is);
      if (s != p.t.shape()) throw IoError("checkpoint shape mismatch for " + name);
      double* dst = p.t.mutable_data();
      for (std::int64_t i = 0; i < p.t.numel(); ++i) dst[i] = io::read_f64(is);
    }
    std::uint32_t nb = io::read_u32(is);
    if (nb != m.bn_states_.size()) throw IoError("checkpoint norm-state count mismatch");
    for (auto& [name, st] : m.bn_states_) {
      std::string fname = io::read_string(is);
      if (fname != name)
        throw IoError("checkpoint norm-state order mismatch at " + fname);
      std::uint32_t cch = io::read_u32(is);
      if (cch != st->running_mean.size()) throw IoError("norm-state extent mismatch");
      st->momentum = io::read_f64(is);
      st->eps = io::read_f64(is);
      for (auto& v : st->running_mean) v = io::read_f64(is);
      for (auto& v : st->running_var) v = io::read_f64(is);
    }
    return m;
  }
};

void Model::save_checkpoint(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path);
  ModelIo::save(*this, f);
  if (!f) throw IoError("checkpoint write failed: " + path);
}

Model Model::load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  return ModelIo::load(f);
}

}  // namespace nnbf::model
