#pragma once

// Three-branch attention fusion of purified reference features into target
// features, combined by learnable scalars:
//
//   A_stru = Attn(F_t -> F_t)                 structural self-attention
//   A_syn  = Attn(F_cat -> F_cat)[:L]         self-attention over [F_t ; F_r']
//   A_app  = Attn(F_t -> F_cat)               target queries, joint keys/values
//   F_out  = beta * A_stru + gamma * A_syn + lambda * A_app
//
// F_cat is the length-2L sequence concatenation of the flattened target and
// reference maps. Only the first L rows of A_syn (the target positions) enter
// the weighted sum so all three terms share F_t's shape. Each branch owns its
// own projections. beta starts at 1 and gamma, lambda at 0: a fresh block is
// pure structural refinement.

#include <string>
#include <vector>

#include "genie/nn.hpp"
#include "genie/tensor.hpp"

namespace genie {

struct AttentionParams {
  Tensor wq;  // [Dq, D]
  Tensor wk;  // [Dkv, D]
  Tensor wv;  // [Dkv, D]
  Tensor wo;  // [D, Dq]
  std::size_t head_count = 1;

  std::size_t model_dim() const { return wq.dim(1); }
  std::size_t head_dim() const { return model_dim() / head_count; }
};

AttentionParams make_attention(ParamStore& store, const std::string& prefix, std::size_t query_dim,
                               std::size_t kv_dim, std::size_t model_dim, std::size_t head_count, Rng& rng,
                               double out_gain = 1.0);

/// Attention probabilities captured for inspection, one [N, heads, Lq, Lkv]
/// entry per attn() call, detached from the graph.
struct AttentionTrace {
  std::vector<NamedTensor> weights;
};

/// Multi-head scaled dot-product attention on sequences:
/// q_src [N, Lq, Dq], kv_src [N, Lkv, Dkv] -> [N, Lq, Dq].
Tensor attn(const Tensor& q_src, const Tensor& kv_src, const AttentionParams& params,
            AttentionTrace* trace = nullptr, const std::string& label = "attn");

struct FusionWeights {
  Tensor beta;
  Tensor gamma;
  Tensor lambda;
};

struct AttentionSummary {
  std::string branch;
  double row_sum_min = 0;
  double row_sum_max = 0;
  double mean_entropy = 0;
};

std::vector<AttentionSummary> summarize(const AttentionTrace& trace);

class AttentionFusion {
 public:
  static constexpr std::size_t kDefaultHeads = 4;

  AttentionFusion(ParamStore& store, const std::string& prefix, std::size_t channels, std::size_t head_count,
                  Rng& rng);

  // Sequence-level branches; inputs are [N, L, D].
  Tensor structural(const Tensor& target_seq, AttentionTrace* trace = nullptr) const;
  Tensor synergistic(const Tensor& target_seq, const Tensor& ref_seq, AttentionTrace* trace = nullptr) const;
  Tensor appearance(const Tensor& target_seq, const Tensor& joint_seq, AttentionTrace* trace = nullptr) const;

  /// Full fusion on feature maps [N, C, H, W] -> [N, C, H, W].
  Tensor fuse(const Tensor& target, const Tensor& ref, AttentionTrace* trace = nullptr) const;
  /// What the host block computes when fusion is switched off: structural branch only.
  Tensor structural_only(const Tensor& target, AttentionTrace* trace = nullptr) const;

  const FusionWeights& weights() const { return weights_; }
  FusionWeights& weights() { return weights_; }
  const AttentionParams& structural_params() const { return stru_; }
  const AttentionParams& synergistic_params() const { return syn_; }
  const AttentionParams& appearance_params() const { return app_; }

 private:
  std::size_t channels_;
  AttentionParams stru_;
  AttentionParams syn_;
  AttentionParams app_;
  FusionWeights weights_;
};

}  // namespace genie
