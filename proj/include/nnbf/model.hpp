#pragma once

#include <string>
#include <vector>

#include "nnbf/beamforming.hpp"
#include "nnbf/complex_tensor.hpp"
#include "nnbf/tensor.hpp"

namespace nnbf::model {

struct ModelConfig {
  std::int64_t M = 8;    // BS antennas == chunk count
  std::int64_t N = 2;    // UEs
  std::int64_t L = 14;   // OFDM symbols
  std::int64_t K = 48;   // subcarriers
  std::int64_t depth = 64;      // feature channels after the front end
  std::int64_t modules = 2;     // stacked multi-channel attention modules
  std::int64_t ffn_expand = 2;  // feed-forward width multiplier
  std::int64_t kernel = 3;      // spatial kernel extent

  std::int64_t dim() const { return depth / M; }
  std::int64_t io_channels() const { return 2 * M * N; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Trainable tensors registered by name, exactly once each. Tensor copies
// share the underlying buffer, so optimizer updates through the registry are
// visible to the member tensors used in forward.
struct NamedParam {
  std::string name;
  Tensor t;
};

struct ConvBn {
  Tensor w, b;
  Tensor bn_gamma, bn_beta;
  BatchNormState bn;
};

struct AttentionLayer {
  Tensor q_w, q_b, k_w, k_b, v_w, v_b;  // 1x1 projection filters
  Tensor ln1_g, ln1_b;                  // sublayer-1 normalization
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor ln2_g, ln2_b;                  // sublayer-2 normalization
};

struct ChunkEmbed {
  Tensor w;  // unbiased 1x1 convolution
  Tensor bn_gamma, bn_beta;
  BatchNormState bn;
};

struct McaModule {
  std::vector<AttentionLayer> self_attn;   // one per chunk
  std::vector<AttentionLayer> cross_attn;  // one per chunk
  std::vector<Tensor> beta;                // mixing weights, one per source chunk
};

// Interleave a batch of complex (L,K,M,N) grids into the (B, 2MN, L, K)
// network layout; channel 2*(m*N + n) is the real part of entry (m, n) and
// the next channel its imaginary part.
Tensor interleave_input(const std::vector<CTensor>& grids);

// Output layout: channel 2*(u*M + m) + ri carries combiner row u, antenna m.
// The reshape to (B, N, M, 2, L, K) makes that decomposition explicit.
Tensor split_output_channels(GradTape* tape, const Tensor& w_raw, std::int64_t M,
                             std::int64_t N);
// Differentiable per-row power projection on the (B, N, M, 2, L, K) layout.
Tensor project_rows(GradTape* tape, const Tensor& w_split);

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<NamedParam>& params() { return params_; }
  const Tensor& alpha_logits() const { return alpha_logits_; }
  std::int64_t param_count() const;

  // Pipeline pieces, exposed for verification. `training` switches the batch
  // normalizations between batch statistics and running statistics.
  Tensor front_end(GradTape* tape, const Tensor& x, bool training);
  std::vector<Tensor> split_and_embed(GradTape* tape, const Tensor& features,
                                      bool training);
  Tensor self_attention(GradTape* tape, int module, int chunk, const Tensor& x);
  Tensor cross_attention(GradTape* tape, int module, int chunk, const Tensor& z_own,
                         const std::vector<Tensor>& z_all);
  Tensor antenna_pair_attention(GradTape* tape, const Tensor& features);
  // Two spatial convolutions with GELU in between; raw (B, 2MN, L, K) output.
  Tensor head(GradTape* tape, const Tensor& features);

  // Full pipeline: interleave -> front end -> split/embed -> D stacked
  // attention modules with inter-module residuals -> concat -> channel
  // reduction -> antenna-pair attention -> head -> power projection.
  // Returns the projected (B, N, M, 2, L, K) tensor (on tape when recording).
  Tensor forward(GradTape* tape, const std::vector<CTensor>& h_est, bool training);

  // Inference helper: forward + conversion to per-item combiner weights.
  std::vector<beamform::CombinerWeights> infer(const std::vector<CTensor>& h_est);

  static std::vector<beamform::CombinerWeights> to_combiners(const Tensor& w_split);

  // Fixed 2-D sinusoidal positional encoding (1, dim, L, K). The leading
  // ceil(dim/2) channels encode l, the rest k; within each half channel pair
  // 2i/2i+1 holds sin/cos of pos / 10000^(2i/half_width).
  static Tensor positional_encoding(std::int64_t dim, std::int64_t L, std::int64_t K);

  void save_checkpoint(const std::string& path) const;
  static Model load_checkpoint(const std::string& path);

  // parameter access for verification oracles
  AttentionLayer& self_layer(int module, int chunk);
  AttentionLayer& cross_layer(int module, int chunk);
  Tensor& mixing_beta(int module, int chunk);
  AttentionLayer& pair_layer() { return pair_attn_; }
  ChunkEmbed& chunk_embed(int chunk);
  ConvBn& conv1() { return conv1_; }
  const Tensor& positional_table() const { return pos_enc_; }

 private:
  ModelConfig cfg_;
  ConvBn conv1_, gconv1_, gconv2_;
  Tensor pw_w_, pw_b_;
  std::vector<ChunkEmbed> embed_;
  Tensor pos_enc_;
  std::vector<McaModule> mca_;
  Tensor reduce_w_, reduce_b_;
  AttentionLayer pair_attn_;
  Tensor head_w1_, head_b1_, head_w2_, head_b2_;
  Tensor alpha_logits_;
  std::vector<NamedParam> params_;
  std::vector<std::pair<std::string, BatchNormState*>> bn_states_;

  Tensor reg(const std::string& name, Tensor t);
  void register_bn(const std::string& name, BatchNormState* st, std::int64_t C);
  AttentionLayer make_attention_layer(const std::string& prefix, std::int64_t width,
                                      RngStream& rng);
  // Scaled dot-product attention over the flattened (L,K) token axis with
  // channels as features, plus the FFN sublayer; residuals and layer norm
  // around both sublayers.
  Tensor spatial_attention(GradTape* tape, AttentionLayer& layer, const Tensor& q_src,
                           const Tensor& kv_src);
  // Same structure with the channel axis as tokens and (B,L,K) as batch.
  Tensor channel_attention(GradTape* tape, AttentionLayer& layer, const Tensor& x);

  friend struct ModelIo;
};

}  // namespace nnbf::model
