#include "genie/attention_fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace genie {

AttentionParams make_attention(ParamStore& store, const std::string& prefix, std::size_t query_dim,
                               std::size_t kv_dim, std::size_t model_dim, std::size_t head_count, Rng& rng,
                               double out_gain) {
  if (head_count == 0 || model_dim % head_count != 0) {
    throw_invalid("attention width " + std::to_string(model_dim) + " not divisible into " +
                  std::to_string(head_count) + " heads");
  }
  AttentionParams p;
  p.wq = make_linear(store, prefix + "q", query_dim, model_dim, rng, false).weight;
  p.wk = make_linear(store, prefix + "k", kv_dim, model_dim, rng, false).weight;
  p.wv = make_linear(store, prefix + "v", kv_dim, model_dim, rng, false).weight;
  p.wo = make_linear(store, prefix + "o", model_dim, query_dim, rng, false, out_gain).weight;
  p.head_count = head_count;
  return p;
}

namespace {

// [N, L, D] -> [N, heads, L, D/heads]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t n = x.dim(0), l = x.dim(1), d = x.dim(2);
  return permute(reshape(x, {n, l, heads, d / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t n = x.dim(0), h = x.dim(1), l = x.dim(2), dh = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {n, l, h * dh});
}

void require_seq(const Tensor& x, const char* what) {
  if (x.rank() != 3) throw_shape(std::string(what) + " must be a [N, L, D] sequence, got " + shape_str(x.shape()));
}

}  // namespace

Tensor attn(const Tensor& q_src, const Tensor& kv_src, const AttentionParams& params, AttentionTrace* trace,
            const std::string& label) {
  require_seq(q_src, "attention query source");
  require_seq(kv_src, "attention key/value source");
  if (q_src.dim(0) != kv_src.dim(0)) {
    throw_shape("attention batch mismatch: " + shape_str(q_src.shape()) + " vs " + shape_str(kv_src.shape()));
  }
  if (q_src.dim(2) != params.wq.dim(0) || kv_src.dim(2) != params.wk.dim(0)) {
    throw_shape("attention width mismatch: queries " + shape_str(q_src.shape()) + ", keys " +
                shape_str(kv_src.shape()) + ", projections expect " + std::to_string(params.wq.dim(0)) + "/" +
                std::to_string(params.wk.dim(0)));
  }
  const std::size_t heads = params.head_count;
  const Tensor q = split_heads(matmul(q_src, params.wq), heads);
  const Tensor k = split_heads(matmul(kv_src, params.wk), heads);
  const Tensor v = split_heads(matmul(kv_src, params.wv), heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(params.head_dim()));
  const Tensor probs = softmax_last_axis(scale(matmul(q, transpose_last2(k)), inv_sqrt));
  if (trace) trace->weights.push_back({label, probs.detach()});
  return matmul(merge_heads(matmul(probs, v)), params.wo);
}

std::vector<AttentionSummary> summarize(const AttentionTrace& trace) {
  std::vector<AttentionSummary> out;
  for (const auto& [label, w] : trace.weights) {
    AttentionSummary s;
    s.branch = label;
    s.row_sum_min = std::numeric_limits<double>::infinity();
    s.row_sum_max = -std::numeric_limits<double>::infinity();
    const std::size_t len = w.shape().back();
    const std::size_t rows = w.numel() / len;
    const auto d = w.data();
    double entropy = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0, h = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double p = d[r * len + j];
        total += p;
        if (p > 0) h -= p * std::log(p);
      }
      s.row_sum_min = std::min(s.row_sum_min, total);
      s.row_sum_max = std::max(s.row_sum_max, total);
      entropy += h;
    }
    s.mean_entropy = rows ? entropy / static_cast<double>(rows) : 0.0;
    out.push_back(s);
  }
  return out;
}

AttentionFusion::AttentionFusion(ParamStore& store, const std::string& prefix, std::size_t channels,
                                 std::size_t head_count, Rng& rng)
    : channels_(channels),
      stru_(make_attention(store, prefix + "stru.", channels, channels, channels, head_count, rng)),
      syn_(make_attention(store, prefix + "syn.", channels, channels, channels, head_count, rng)),
      app_(make_attention(store, prefix + "app.", channels, channels, channels, head_count, rng)) {
  weights_.beta = store.add(prefix + "beta", Tensor::scalar(1.0));
  weights_.gamma = store.add(prefix + "gamma", Tensor::scalar(0.0));
  weights_.lambda = store.add(prefix + "lambda", Tensor::scalar(0.0));
}

Tensor AttentionFusion::structural(const Tensor& target_seq, AttentionTrace* trace) const {
  return attn(target_seq, target_seq, stru_, trace, "structural");
}

Tensor AttentionFusion::synergistic(const Tensor& target_seq, const Tensor& ref_seq, AttentionTrace* trace) const {
  require_seq(target_seq, "target sequence");
  require_seq(ref_seq, "reference sequence");
  if (target_seq.shape() != ref_seq.shape()) {
    throw_shape("synergistic attention needs equal target/reference sequences, got " +
                shape_str(target_seq.shape()) + " and " + shape_str(ref_seq.shape()));
  }
  const Tensor joint = concat({target_seq, ref_seq}, 1);
  return slice(attn(joint, joint, syn_, trace, "synergistic"), 1, 0, target_seq.dim(1));
}

Tensor AttentionFusion::appearance(const Tensor& target_seq, const Tensor& joint_seq, AttentionTrace* trace) const {
  return attn(target_seq, joint_seq, app_, trace, "appearance");
}

Tensor AttentionFusion::fuse(const Tensor& target, const Tensor& ref, AttentionTrace* trace) const {
  if (target.rank() != 4 || target.shape() != ref.shape() || target.dim(1) != channels_) {
    throw_shape("attention fusion expects matching [N, " + std::to_string(channels_) + ", H, W] maps, got " +
                shape_str(target.shape()) + " and " + shape_str(ref.shape()));
  }
  const std::size_t h = target.dim(2), w = target.dim(3);
  const Tensor t_seq = to_sequence(target);
  const Tensor r_seq = to_sequence(ref);
  const Tensor joint = concat({t_seq, r_seq}, 1);
  const Tensor a_stru = structural(t_seq, trace);
  const Tensor a_syn = slice(attn(joint, joint, syn_, trace, "synergistic"), 1, 0, t_seq.dim(1));
  const Tensor a_app = appearance(t_seq, joint, trace);
  const Tensor fused = add(add(mul(weights_.beta, a_stru), mul(weights_.gamma, a_syn)), mul(weights_.lambda, a_app));
  return from_sequence(fused, h, w);
}

Tensor AttentionFusion::structural_only(const Tensor& target, AttentionTrace* trace) const {
  if (target.rank() != 4 || target.dim(1) != channels_) {
    throw_shape("structural attention expects [N, " + std::to_string(channels_) + ", H, W], got " +
                shape_str(target.shape()));
  }
  return from_sequence(structural(to_sequence(target), trace), target.dim(2), target.dim(3));
}

}  // namespace genie
