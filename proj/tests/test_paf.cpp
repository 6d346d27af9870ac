#include <gtest/gtest.h>

#include <cmath>

#include "genie/attention_fusion.hpp"
#include "test_util.hpp"

using namespace genie;

namespace {

// softmax(q k^T / sqrt(dh)) v per head with scalar loops; q_src [Lq, D], kv_src [Lk, D], one batch item.
std::vector<double> naive_attention(const Tensor& q_src, const Tensor& kv_src, const AttentionParams& p,
                                    std::size_t item) {
  const std::size_t lq = q_src.dim(1), lk = kv_src.dim(1), dq = q_src.dim(2), dk = kv_src.dim(2);
  const std::size_t d = p.model_dim(), heads = p.head_count, dh = d / heads;
  auto proj = [&](const Tensor& src, std::size_t rows, std::size_t in, const Tensor& w) {
    std::vector<double> out(rows * d, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < d; ++o)
        for (std::size_t i = 0; i < in; ++i) out[r * d + o] += src.at((item * rows + r) * in + i) * w.at(i * d + o);
    return out;
  };
  const auto q = proj(q_src, lq, dq, p.wq);
  const auto k = proj(kv_src, lk, dk, p.wk);
  const auto v = proj(kv_src, lk, dk, p.wv);
  std::vector<double> mixed(lq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < lq; ++i) {
      std::vector<double> logits(lk);
      double top = -1e300;
      for (std::size_t j = 0; j < lk; ++j) {
        double s = 0;
        for (std::size_t e = 0; e < dh; ++e) s += q[i * d + h * dh + e] * k[j * d + h * dh + e];
        logits[j] = s / std::sqrt(static_cast<double>(dh));
        top = std::max(top, logits[j]);
      }
      double z = 0;
      for (double& l : logits) z += (l = std::exp(l - top));
      for (std::size_t j = 0; j < lk; ++j)
        for (std::size_t e = 0; e < dh; ++e) mixed[i * d + h * dh + e] += logits[j] / z * v[j * d + h * dh + e];
    }
  std::vector<double> out(lq * dq, 0.0);
  for (std::size_t i = 0; i < lq; ++i)
    for (std::size_t o = 0; o < dq; ++o)
      for (std::size_t e = 0; e < d; ++e) out[i * dq + o] += mixed[i * d + e] * p.wo.at(e * dq + o);
  return out;
}

AttentionParams eye_params(std::size_t d) {
  std::vector<double> v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  const Tensor eye = Tensor::from({d, d}, v);
  return {eye, eye, eye, eye, 1};
}

struct Fixture {
  ParamStore store;
  Rng rng{42};
  AttentionFusion paf{store, "paf.0.", 8, 2, rng};
  Tensor target = rng.normal_tensor({2, 8, 3, 3});
  Tensor ref = rng.normal_tensor({2, 8, 3, 3});

  void set_weights(double b, double g, double l) {
    paf.weights().beta.mutable_data()[0] = b;
    paf.weights().gamma.mutable_data()[0] = g;
    paf.weights().lambda.mutable_data()[0] = l;
  }
};

}  // namespace

TEST(Attn, SingleKeyReturnsProjectedValue) {
  ParamStore store;
  Rng rng(1);
  const AttentionParams p = make_attention(store, "a.", 6, 4, 6, 3, rng);
  const Tensor q = rng.normal_tensor({2, 5, 6});
  const Tensor kv = rng.normal_tensor({2, 1, 4});
  const Tensor out = attn(q, kv, p);
  ASSERT_EQ(out.shape(), (Shape{2, 5, 6}));
  const Tensor projected = matmul(matmul(kv, p.wv), p.wo);  // [2, 1, 6]
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t o = 0; o < 6; ++o) EXPECT_EQ(out.at((b * 5 + i) * 6 + o), projected.at(b * 6 + o));
}

TEST(Attn, TwoIdenticalKeysAverageValues) {
  AttentionParams p = eye_params(2);
  p.wk = Tensor::from({2, 2}, {1, 0, 0, 0});  // keys ignore the second coordinate
  const Tensor q = Tensor::from({1, 1, 2}, {0.3, -0.7});
  const Tensor kv = Tensor::from({1, 2, 2}, {1.0, 2.0, 1.0, -4.0});
  const Tensor out = attn(q, kv, p);
  EXPECT_NEAR(out.at(0), 1.0, 1e-15);
  EXPECT_NEAR(out.at(1), -1.0, 1e-15);
}

TEST(Attn, MatchesNaiveOracle) {
  for (std::size_t heads : {1u, 2u, 4u}) {
    ParamStore store;
    Rng rng(heads);
    const AttentionParams p = make_attention(store, "a.", 8, 8, 8, heads, rng);
    const Tensor q = rng.uniform_tensor({2, 4, 8}, -1, 1);
    const Tensor kv = rng.uniform_tensor({2, 6, 8}, -1, 1);
    const Tensor out = attn(q, kv, p);
    for (std::size_t b = 0; b < 2; ++b) {
      const auto want = naive_attention(q, kv, p, b);
      for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(out.at(b * want.size() + i), want[i], 1e-10);
    }
  }
}

TEST(Attn, PermutingKeysLeavesOutputUnchanged) {
  ParamStore store;
  Rng rng(3);
  const AttentionParams p = make_attention(store, "a.", 4, 4, 4, 2, rng);
  const Tensor q = rng.normal_tensor({1, 3, 4});
  const Tensor kv = rng.normal_tensor({1, 5, 4});
  const std::vector<std::size_t> order{3, 0, 4, 1, 2};
  std::vector<Tensor> rows;
  for (std::size_t j : order) rows.push_back(slice(kv, 1, j, 1));
  const Tensor shuffled = concat(rows, 1);
  EXPECT_LT(testutil::max_abs_diff(attn(q, kv, p), attn(q, shuffled, p)), 1e-12);
}

TEST(Attn, WidthMismatchAndBadHeadCount) {
  ParamStore store;
  Rng rng(4);
  const AttentionParams p = make_attention(store, "a.", 4, 4, 4, 2, rng);
  EXPECT_THROW(attn(Tensor::zeros({1, 2, 5}), Tensor::zeros({1, 2, 4}), p), Error);
  EXPECT_THROW(attn(Tensor::zeros({1, 2, 4}), Tensor::zeros({1, 2, 3}), p), Error);
  EXPECT_THROW(make_attention(store, "b.", 6, 6, 6, 4, rng), Error);
}

TEST(Structural, ShapeAndIndependenceFromReference) {
  Fixture f;
  const Tensor t_seq = to_sequence(f.target);
  const Tensor a = f.paf.structural(t_seq);
  EXPECT_EQ(a.shape(), t_seq.shape());

  AttentionTrace first, second;
  f.paf.fuse(f.target, f.ref, &first);
  f.paf.fuse(f.target, f.rng.normal_tensor({2, 8, 3, 3}), &second);
  ASSERT_EQ(first.weights[0].name, "structural");
  EXPECT_TRUE(testutil::bitwise_equal(first.weights[0].value, second.weights[0].value));
  EXPECT_FALSE(testutil::bitwise_equal(first.weights[1].value, second.weights[1].value));
  EXPECT_FALSE(testutil::bitwise_equal(first.weights[2].value, second.weights[2].value));
}

TEST(Structural, GradientMatchesFiniteDifferences) {
  Fixture f;
  const Tensor t = f.rng.uniform_tensor({1, 4, 8}, -1, 1);
  const Tensor w = f.rng.uniform_tensor({1, 4, 8}, -1, 1);
  auto loss = [&](const Tensor& x) { return sum(mul(f.paf.structural(x), w)); };
  Tensor tv = t.clone().set_requires_grad(true);
  loss(tv).backward();
  const auto num = testutil::numeric_grad([&](const Tensor& x) { return loss(x).item(); }, t);
  for (std::size_t i = 0; i < num.size(); ++i) {
    EXPECT_TRUE(std::abs(num[i] - tv.grad()[i]) < 1e-8 || testutil::rel_err(num[i], tv.grad()[i]) < 1e-4) << i;
  }
}

TEST(Synergistic, EqualInputsMatchDuplicatedSequenceOracle) {
  Fixture f;
  const Tensor t = to_sequence(f.target);  // [2, 9, 8]
  const Tensor out = f.paf.synergistic(t, t);
  ASSERT_EQ(out.shape(), t.shape());
  const Tensor doubled = concat({t, t}, 1);
  for (std::size_t b = 0; b < 2; ++b) {
    const auto full = naive_attention(doubled, doubled, f.paf.synergistic_params(), b);  // 18 rows
    for (std::size_t i = 0; i < 9 * 8; ++i) EXPECT_NEAR(out.at(b * 72 + i), full[i], 1e-10);
  }
}

TEST(Synergistic, GradientsReachBothInputs) {
  Fixture f;
  Tensor t = to_sequence(f.target).detach().set_requires_grad(true);
  Tensor r = to_sequence(f.ref).detach().set_requires_grad(true);
  sum(mul(f.paf.synergistic(t, r), f.rng.normal_tensor({2, 9, 8}))).backward();
  double gt = 0, gr = 0;
  for (double g : t.grad()) gt += std::abs(g);
  for (double g : r.grad()) gr += std::abs(g);
  EXPECT_GT(gt, 1e-6);
  EXPECT_GT(gr, 1e-6);
}

TEST(Synergistic, RejectsLengthMismatch) {
  Fixture f;
  EXPECT_THROW(f.paf.synergistic(Tensor::zeros({1, 4, 8}), Tensor::zeros({1, 5, 8})), Error);
}

TEST(Appearance, DuplicatedJointEqualsSelfAttention) {
  Fixture f;
  const Tensor t = to_sequence(f.target);
  const Tensor out = f.paf.appearance(t, concat({t, t}, 1));
  ASSERT_EQ(out.shape(), t.shape());
  EXPECT_LT(testutil::max_abs_diff(out, attn(t, t, f.paf.appearance_params())), 1e-12);
}

TEST(Appearance, GradientMatchesFiniteDifferences) {
  Fixture f;
  const Tensor t = f.rng.uniform_tensor({1, 3, 8}, -1, 1);
  const Tensor joint = f.rng.uniform_tensor({1, 6, 8}, -1, 1);
  const Tensor w = f.rng.uniform_tensor({1, 3, 8}, -1, 1);
  Tensor tv = t.clone().set_requires_grad(true);
  Tensor jv = joint.clone().set_requires_grad(true);
  sum(mul(f.paf.appearance(tv, jv), w)).backward();
  const auto nt = testutil::numeric_grad([&](const Tensor& x) { return sum(mul(f.paf.appearance(x, joint), w)).item(); }, t);
  const auto nj = testutil::numeric_grad([&](const Tensor& x) { return sum(mul(f.paf.appearance(t, x), w)).item(); }, joint);
  for (std::size_t i = 0; i < nt.size(); ++i)
    EXPECT_TRUE(std::abs(nt[i] - tv.grad()[i]) < 1e-8 || testutil::rel_err(nt[i], tv.grad()[i]) < 1e-4) << i;
  for (std::size_t i = 0; i < nj.size(); ++i)
    EXPECT_TRUE(std::abs(nj[i] - jv.grad()[i]) < 1e-8 || testutil::rel_err(nj[i], jv.grad()[i]) < 1e-4) << i;
}

TEST(Fuse, InitialWeights) {
  Fixture f;
  EXPECT_EQ(f.paf.weights().beta.item(), 1.0);
  EXPECT_EQ(f.paf.weights().gamma.item(), 0.0);
  EXPECT_EQ(f.paf.weights().lambda.item(), 0.0);
}

TEST(Fuse, SelectorZeroAndHomogeneity) {
  Fixture f;
  f.set_weights(1, 0, 0);
  const Tensor out = f.paf.fuse(f.target, f.ref);
  EXPECT_EQ(out.shape(), f.target.shape());
  EXPECT_TRUE(testutil::bitwise_equal(out, f.paf.structural_only(f.target)));

  f.set_weights(0, 0, 0);
  const Tensor zero = f.paf.fuse(f.target, f.ref);
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);

  f.set_weights(0.7, -0.4, 1.3);
  const Tensor base = f.paf.fuse(f.target, f.ref);
  f.set_weights(1.4, -0.8, 2.6);
  const Tensor doubled = f.paf.fuse(f.target, f.ref);
  for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(doubled.at(i), 2 * base.at(i), 1e-12);

  const double c = -3.7;
  f.set_weights(0.7 * c, -0.4 * c, 1.3 * c);
  const Tensor scaled = f.paf.fuse(f.target, f.ref);
  for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(scaled.at(i), c * base.at(i), 1e-12);
}

TEST(Fuse, WeightedSumOfBranches) {
  Fixture f;
  f.set_weights(0.5, 2.0, -1.5);
  const Tensor t = to_sequence(f.target), r = to_sequence(f.ref);
  const Tensor joint = concat({t, r}, 1);
  const Tensor a = f.paf.structural(t), s = f.paf.synergistic(t, r), p = f.paf.appearance(t, joint);
  const Tensor out = to_sequence(f.paf.fuse(f.target, f.ref));
  for (std::size_t i = 0; i < out.numel(); ++i)
    EXPECT_NEAR(out.at(i), 0.5 * a.at(i) + 2.0 * s.at(i) - 1.5 * p.at(i), 1e-12);
}

TEST(Fuse, AttentionRowsSumToOne) {
  Fixture f;
  f.set_weights(0.3, 0.6, 0.9);
  AttentionTrace trace;
  f.paf.fuse(f.target, f.ref, &trace);
  ASSERT_EQ(trace.weights.size(), 3u);
  for (const auto& s : summarize(trace)) {
    EXPECT_NEAR(s.row_sum_min, 1.0, 1e-9) << s.branch;
    EXPECT_NEAR(s.row_sum_max, 1.0, 1e-9) << s.branch;
    EXPECT_GT(s.mean_entropy, 0.0);
  }
}

TEST(Fuse, RejectsMismatchedMaps) {
  Fixture f;
  EXPECT_THROW(f.paf.fuse(f.target, Tensor::zeros({2, 8, 3, 4})), Error);
}
