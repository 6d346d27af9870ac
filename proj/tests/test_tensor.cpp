#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include "genie/nn.hpp"
#include "genie/serialize.hpp"
#include "genie/tensor.hpp"
#include "test_util.hpp"

using namespace genie;
using testutil::numeric_grad;
using testutil::rel_err;

TEST(Matmul, IdentityAndPickOut) {
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor r = matmul(a, eye);
  EXPECT_EQ(r.shape(), (Shape{2, 2}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r.at(i), a.at(i));

  const Tensor p = matmul(Tensor::from({1, 2}, {1, 0}), Tensor::from({2, 1}, {0, 5}));
  EXPECT_EQ(p.shape(), (Shape{1, 1}));
  EXPECT_EQ(p.item(), 0.0);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  const Tensor a = rng.uniform_tensor({3, 4}, -1, 1);
  const Tensor b = rng.uniform_tensor({4, 2}, -1, 1);
  Tensor av = a.clone().set_requires_grad(true);
  sum(matmul(av, b)).backward();
  const auto num = numeric_grad([&](const Tensor& x) { return sum(matmul(x, b)).item(); }, a);
  for (std::size_t i = 0; i < num.size(); ++i) EXPECT_LT(rel_err(av.grad()[i], num[i]), 1e-4);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShape);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, BatchedBroadcastAgainstLoops) {
  Rng rng(5);
  const Tensor a = rng.uniform_tensor({2, 3, 4}, -1, 1);
  const Tensor b = rng.uniform_tensor({4, 5}, -1, 1);
  const Tensor r = matmul(a, b);
  ASSERT_EQ(r.shape(), (Shape{2, 3, 5}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a.at((n * 3 + i) * 4 + k) * b.at(k * 5 + j);
        EXPECT_NEAR(r.at((n * 3 + i) * 5 + j), s, 1e-14);
      }
}

TEST(Softmax, UniformAndStable) {
  const Tensor u = softmax_last_axis(Tensor::from({3}, {0, 0, 0}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(u.at(i), 1.0 / 3.0, 1e-15);

  const Tensor s = softmax_last_axis(Tensor::from({2}, {1000, 0}));
  EXPECT_TRUE(std::isfinite(s.at(0)) && std::isfinite(s.at(1)));
  EXPECT_NEAR(s.at(0), 1.0, 1e-12);
  EXPECT_NEAR(s.at(1), 0.0, 1e-12);
}

TEST(Softmax, MatchesScalarOracle) {
  const Tensor s = softmax_last_axis(Tensor::from({3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s.at(i), std::exp(i + 1.0) / z, 1e-15);
}

TEST(Softmax, RowsSumToOneForLargeLogits) {
  Rng rng(11);
  const Tensor x = rng.uniform_tensor({16, 9}, -1000, 1000);
  const Tensor s = softmax_last_axis(x);
  for (std::size_t r = 0; r < 16; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 9; ++c) {
      EXPECT_GE(s.at(r * 9 + c), 0.0);
      total += s.at(r * 9 + c);
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Tanh, ValuesAndGradient) {
  EXPECT_EQ(tanh_op(Tensor::scalar(0)).item(), 0.0);
  const double sat = tanh_op(Tensor::scalar(50)).item();
  EXPECT_LT(sat, 1.0);
  EXPECT_GT(sat, 0.9999);
  EXPECT_GT(tanh_op(Tensor::scalar(-50)).item(), -1.0);

  Tensor x = Tensor::scalar(0.3, true);
  tanh_op(x).backward();
  const double h = 1e-5;
  const double fd = (std::tanh(0.3 + h) - std::tanh(0.3 - h)) / (2 * h);
  EXPECT_LT(rel_err(x.grad()[0], fd), 1e-6);
}

TEST(ConcatChannels, ShapeOrderAndGradient) {
  Rng rng(2);
  Tensor a = rng.uniform_tensor({1, 2, 4, 4}, -1, 1).set_requires_grad(true);
  Tensor b = rng.uniform_tensor({1, 3, 4, 4}, -1, 1).set_requires_grad(true);
  const Tensor c = concat_channels(a, b);
  ASSERT_EQ(c.shape(), (Shape{1, 5, 4, 4}));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(c.at(i), a.at(i));
  for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_EQ(c.at(a.numel() + i), b.at(i));

  sum(c).backward();
  for (double g : a.grad()) EXPECT_EQ(g, 1.0);
  for (double g : b.grad()) EXPECT_EQ(g, 1.0);
}

TEST(ConcatChannels, EmptyChannelIsIdentity) {
  Rng rng(2);
  const Tensor x = rng.uniform_tensor({1, 2, 3, 3}, -1, 1);
  const Tensor c = concat_channels(x, Tensor::zeros({1, 0, 3, 3}));
  EXPECT_TRUE(testutil::bitwise_equal(c, x));
}

TEST(ConcatChannels, RejectsSpatialMismatch) {
  EXPECT_THROW(concat_channels(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 2, 4, 3})), Error);
}

// Six nested loops, straight from the definition.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * co * oh * ow);
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          double s = b.defined() ? b.at(o) : 0.0;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long sy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                const long sx = static_cast<long>(xo * stride + kx) - static_cast<long>(pad);
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(wd)) continue;
                s += x.at(((in * c + ci) * h + sy) * wd + sx) * w.at(((o * c + ci) * kh + ky) * kw + kx);
              }
          out[((in * co + o) * oh + y) * ow + xo] = s;
        }
  return Tensor::from({n, co, oh, ow}, out);
}

TEST(Conv2d, IdentityAndSum) {
  Rng rng(1);
  const Tensor x = rng.uniform_tensor({1, 1, 5, 5}, -1, 1);
  const Tensor id = conv2d(x, Tensor::full({1, 1, 1, 1}, 1.0), Tensor());
  EXPECT_TRUE(testutil::bitwise_equal(id, x));

  const Tensor nine = conv2d(Tensor::full({1, 1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), Tensor());
  ASSERT_EQ(nine.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(nine.item(), 9.0);
}

TEST(Conv2d, MatchesNaiveOracle) {
  Rng rng(7);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}}) {
    const Tensor x = rng.uniform_tensor({2, 2, 6, 5}, -1, 1);
    const Tensor w = rng.uniform_tensor({3, 2, 3, 3}, -1, 1);
    const Tensor b = rng.uniform_tensor({3}, -1, 1);
    const Tensor got = conv2d(x, w, b, {stride, pad});
    const Tensor want = naive_conv(x, w, b, stride, pad);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LT(testutil::max_abs_diff(got, want), 1e-14);
  }
}

TEST(Conv2d, KernelLargerThanInputFails) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor()), Error);
}

TEST(Elementwise, BasicsAndBroadcastGradient) {
  Rng rng(4);
  const Tensor x = rng.uniform_tensor({2, 3}, -1, 1);
  EXPECT_TRUE(testutil::bitwise_equal(mul(x, Tensor::full({2, 3}, 1.0)), x));
  EXPECT_EQ(mean(Tensor::from({4}, {1, 2, 3, 4})).item(), 2.5);

  const Tensor a = rng.uniform_tensor({2, 1}, -1, 1);
  const Tensor b = rng.uniform_tensor({1, 3}, -1, 1);
  const Tensor w = rng.uniform_tensor({2, 3}, -1, 1);
  Tensor av = a.clone().set_requires_grad(true);
  Tensor bv = b.clone().set_requires_grad(true);
  sum(mul(mul(av, bv), w)).backward();
  const auto na = numeric_grad([&](const Tensor& t) { return sum(mul(mul(t, b), w)).item(); }, a);
  const auto nb = numeric_grad([&](const Tensor& t) { return sum(mul(mul(a, t), w)).item(); }, b);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_LT(rel_err(av.grad()[i], na[i]), 1e-4);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(rel_err(bv.grad()[i], nb[i]), 1e-4);
}

TEST(Elementwise, IncompatibleBroadcastFails) {
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), Error);
}

TEST(Backward, SumAndSquare) {
  Tensor x = Tensor::zeros({2, 3, 4}, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  Tensor y = Tensor::from({2}, {1, -2}, true);
  sum(mul(y, y)).backward();
  EXPECT_EQ(y.grad()[0], 2.0);
  EXPECT_EQ(y.grad()[1], -4.0);
}

TEST(Backward, NonScalarLossFails) {
  Tensor x = Tensor::zeros({3}, true);
  EXPECT_THROW(scale(x, 2.0).backward(), Error);
}

TEST(Backward, AccumulatesAcrossUses) {
  Rng rng(9);
  const Tensor x0 = rng.uniform_tensor({4}, -1, 1);
  auto path1 = [](const Tensor& x) { return sum(square(x)); };
  auto path2 = [](const Tensor& x) { return sum(tanh_op(x)); };

  Tensor a = x0.clone().set_requires_grad(true);
  path1(a).backward();
  Tensor b = x0.clone().set_requires_grad(true);
  path2(b).backward();
  Tensor both = x0.clone().set_requires_grad(true);
  add(path1(both), path2(both)).backward();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(both.grad()[i], a.grad()[i] + b.grad()[i], 1e-15);
}

TEST(GradTape, ReplaysEachOperationOnceNewestFirst) {
  Tensor x = Tensor::from({3}, {0.1, 0.2, 0.3}, true);
  const Tensor y = mul(x, x);
  const Tensor z = add(y, x);  // x reached along two paths
  const Tensor loss = sum(add(z, y));
  const GradTape tape = GradTape::record_from(loss);
  const auto seq = tape.sequence();
  EXPECT_EQ(seq.size(), 4u);
  EXPECT_EQ(std::set<std::uint64_t>(seq.begin(), seq.end()).size(), seq.size());
  for (std::size_t i = 1; i < seq.size(); ++i) EXPECT_GT(seq[i - 1], seq[i]);
}

TEST(GradMode, NoGradGuardSkipsRecording) {
  Tensor x = Tensor::scalar(2.0, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    EXPECT_FALSE(square(x).requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_TRUE(square(x).requires_grad());
}

TEST(Layout, PermuteReshapeSliceRoundTrip) {
  Rng rng(8);
  const Tensor x = rng.uniform_tensor({2, 3, 4, 5}, -1, 1);
  const Tensor seq = to_sequence(x);
  ASSERT_EQ(seq.shape(), (Shape{2, 20, 3}));
  EXPECT_TRUE(testutil::bitwise_equal(from_sequence(seq, 4, 5), x));
  const Tensor back = permute(permute(x, {0, 2, 3, 1}), {0, 3, 1, 2});
  EXPECT_TRUE(testutil::bitwise_equal(back, x));
  const Tensor parts = concat({slice(x, 1, 0, 1), slice(x, 1, 1, 2)}, 1);
  EXPECT_TRUE(testutil::bitwise_equal(parts, x));
}

TEST(TensorDump, BitExactRoundTrip) {
  Rng rng(12);
  std::vector<NamedTensor> ts{{"a", rng.normal_tensor({2, 3})},
                              {"b.weird name", Tensor::from({1}, {-0.0})},
                              {"c", Tensor::from({2}, {1e-300, std::nextafter(1.0, 2.0)})}};
  std::stringstream buf;
  write_tensors(buf, ts);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 8), std::string(kTensorDumpMagic, 8));
  const auto back = read_tensors(buf);
  ASSERT_EQ(back.size(), ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_EQ(back[i].name, ts[i].name);
    ASSERT_EQ(back[i].value.shape(), ts[i].value.shape());
    EXPECT_EQ(std::memcmp(back[i].value.data().data(), ts[i].value.data().data(), 8 * ts[i].value.numel()), 0);
  }
  std::stringstream again;
  write_tensors(again, back);
  EXPECT_EQ(again.str(), bytes);
}

TEST(TensorDump, LayoutIsLittleEndianU64) {
  std::stringstream buf;
  write_tensors(buf, {{"xy", Tensor::from({1, 2}, {1.0, 2.0})}});
  const std::string s = buf.str();
  auto u64 = [&](std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[off + i]);
    return v;
  };
  EXPECT_EQ(u64(8), 1u);    // version
  EXPECT_EQ(u64(16), 1u);   // count
  EXPECT_EQ(u64(24), 2u);   // name length
  EXPECT_EQ(s.substr(32, 2), "xy");
  EXPECT_EQ(u64(34), 2u);   // rank
  EXPECT_EQ(u64(42), 1u);
  EXPECT_EQ(u64(50), 2u);
  double v = 0;
  std::memcpy(&v, s.data() + 58, 8);
  EXPECT_EQ(v, 1.0);
  EXPECT_EQ(s.size(), 58u + 16u);
}

TEST(TensorDump, RejectsBadMagic) {
  std::stringstream buf("NOTATDUMP.......");
  EXPECT_THROW(read_tensors(buf), Error);
}
