#include <gtest/gtest.h>

#include <cmath>

#include "genie/optim.hpp"
#include "genie/spatial_alignment.hpp"
#include "test_util.hpp"

using namespace genie;

namespace {

constexpr double kPi = 3.14159265358979323846;

Tensor grid_from(std::size_t h, std::size_t w, const std::vector<double>& xy) {
  return Tensor::from({1, h, w, 2}, xy);
}

// Gaussian blob centred at (cx, cy) pixels on an s x s canvas.
Tensor blob(std::size_t s, double cx, double cy, double sigma) {
  std::vector<double> v(s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      v[y * s + x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
    }
  return Tensor::from({1, 1, s, s}, v);
}

double mse(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
  return s / static_cast<double>(a.numel());
}

}  // namespace

TEST(PredictAffine, FreshModuleIsIdentity) {
  ParamStore store;
  Rng rng(1);
  SpatialAlignment sam(store, "sam.", 3, rng);
  const Tensor x = rng.normal_tensor({2, 3, 8, 8});
  const AffineParams p = sam.predict_affine(x);
  ASSERT_EQ(p.theta.shape(), (Shape{2, 6}));
  const double id[6] = {1, 0, 0, 0, 1, 0};
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(p.theta.at(b * 6 + k), id[k]);
}

TEST(PredictAffine, RejectsTinyInputs) {
  ParamStore store;
  Rng rng(1);
  SpatialAlignment sam(store, "sam.", 2, rng);
  EXPECT_THROW(sam.predict_affine(Tensor::zeros({1, 2, 3, 8})), Error);
  EXPECT_THROW(sam.predict_affine(Tensor::zeros({1, 3, 8, 8})), Error);
}

TEST(PredictAffine, ThetaGradientMatchesFiniteDifferences) {
  ParamStore store;
  Rng rng(2);
  SpatialAlignment sam(store, "sam.", 2, rng);
  // Nonzero head so the conv weights matter.
  for (auto& e : store.entries()) {
    if (e.name == "sam.loc.head.weight") {
      for (double& v : e.value.mutable_data()) v = 0.3 * rng.normal();
    }
  }
  const Tensor x = rng.normal_tensor({2, 2, 8, 8});
  const Tensor w = rng.uniform_tensor({2, 6}, -1, 1);
  auto loss = [&] { return sum(mul(sam.predict_affine(x).theta, w)); };

  for (auto& e : store.entries()) {
    store.zero_grad();
    loss().backward();
    const std::vector<double> analytic(e.value.grad().begin(), e.value.grad().end());
    for (std::size_t i = 0; i < e.value.numel(); i += std::max<std::size_t>(1, e.value.numel() / 12)) {
      double& slot = e.value.mutable_data()[i];
      const double keep = slot;
      slot = keep + 1e-5;
      const double up = loss().item();
      slot = keep - 1e-5;
      const double down = loss().item();
      slot = keep;
      const double fd = (up - down) / 2e-5;
      const double err = std::abs(fd - analytic[i]);
      EXPECT_TRUE(err < 1e-8 || testutil::rel_err(fd, analytic[i]) < 1e-4) << e.name << "[" << i << "]";
    }
  }
}

TEST(GenerateGrid, IdentityTwoByTwo) {
  const SamplingGrid g = generate_grid(AffineParams::identity(1), 2, 2);
  ASSERT_EQ(g.coords.shape(), (Shape{1, 2, 2, 2}));
  const double want[8] = {-0.5, -0.5, 0.5, -0.5, -0.5, 0.5, 0.5, 0.5};
  for (int i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(g.coords.at(i), want[i]);
}

TEST(GenerateGrid, TranslationAndScale) {
  const SamplingGrid base = generate_grid(AffineParams::identity(1), 3, 4);
  const SamplingGrid shifted = generate_grid({Tensor::from({1, 6}, {1, 0, 1, 0, 1, 0})}, 3, 4);
  const SamplingGrid scaled = generate_grid({Tensor::from({1, 6}, {0.5, 0, 0, 0, 0.5, 0})}, 3, 4);
  double lo = 1, hi = -1;
  for (std::size_t p = 0; p < 12; ++p) {
    EXPECT_DOUBLE_EQ(shifted.coords.at(2 * p), base.coords.at(2 * p) + 1.0);
    EXPECT_DOUBLE_EQ(shifted.coords.at(2 * p + 1), base.coords.at(2 * p + 1));
    for (int k = 0; k < 2; ++k) {
      lo = std::min(lo, scaled.coords.at(2 * p + k));
      hi = std::max(hi, scaled.coords.at(2 * p + k));
    }
  }
  EXPECT_GE(lo, -0.5);
  EXPECT_LE(hi, 0.5);
}

TEST(GenerateGrid, RejectsZeroSize) {
  EXPECT_THROW(generate_grid(AffineParams::identity(1), 0, 3), Error);
}

TEST(BilinearSample, IdentityGridReproducesSource) {
  Rng rng(3);
  const Tensor src = rng.normal_tensor({2, 3, 5, 7});
  const Tensor out = bilinear_sample(src, generate_grid(AffineParams::identity(2), 5, 7));
  EXPECT_LT(testutil::max_abs_diff(out, src), 1e-12);
}

TEST(BilinearSample, MidpointAndZeroPadding) {
  const Tensor src = Tensor::from({1, 1, 1, 2}, {0, 4});
  EXPECT_DOUBLE_EQ(bilinear_sample(src, {grid_from(1, 1, {0.0, 0.0})}).item(), 2.0);

  Rng rng(4);
  const Tensor img = rng.uniform_tensor({1, 2, 4, 4}, 0.5, 1.0);
  const Tensor far = bilinear_sample(img, {grid_from(1, 3, {3.0, 0.0, -2.5, 0.1, 0.0, 5.0})});
  for (double v : far.data()) EXPECT_EQ(v, 0.0);
}

TEST(BilinearSample, InverseWarpRecoversInterior) {
  const std::size_t s = 16;
  std::vector<double> v(s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) v[y * s + x] = 0.5 + 0.25 * std::sin(0.4 * x) * std::cos(0.3 * y);
  const Tensor img = Tensor::from({1, 1, s, s}, v);

  const double ang = 10.0 * kPi / 180.0, sc = 0.9, tx = 0.05, ty = -0.04;
  const double a = sc * std::cos(ang), b = -sc * std::sin(ang), c = sc * std::sin(ang), d = sc * std::cos(ang);
  const double det = a * d - b * c;
  const double ia = d / det, ib = -b / det, ic = -c / det, id = a / det;
  const double itx = -(ia * tx + ib * ty), ity = -(ic * tx + id * ty);

  const Tensor once = bilinear_sample(img, generate_grid({Tensor::from({1, 6}, {a, b, tx, c, d, ty})}, s, s));
  const Tensor back = bilinear_sample(once, generate_grid({Tensor::from({1, 6}, {ia, ib, itx, ic, id, ity})}, s, s));
  double err = 0;
  std::size_t count = 0;
  for (std::size_t y = 3; y < s - 3; ++y)
    for (std::size_t x = 3; x < s - 3; ++x) {
      const double e = back.at(y * s + x) - img.at(y * s + x);
      err += e * e;
      ++count;
    }
  EXPECT_LT(err / static_cast<double>(count), 5e-2);
}

TEST(BilinearSample, GridGradientNonzeroOnRamp) {
  const std::size_t s = 6;
  std::vector<double> v(s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) v[y * s + x] = static_cast<double>(x) / s;
  const Tensor img = Tensor::from({1, 1, s, s}, v);
  Tensor grid = generate_grid({Tensor::from({1, 6}, {0.7, 0.1, 0.05, -0.1, 0.7, 0.02})}, s, s).coords.detach();
  grid.set_requires_grad(true);
  sum(bilinear_sample(img, {grid})).backward();
  for (std::size_t p = 0; p < s * s; ++p) EXPECT_GT(std::abs(grid.grad()[2 * p]), 1e-3) << p;
}

TEST(BilinearSample, GradientsReachSourceAndGrid) {
  Rng rng(5);
  const Tensor src = rng.normal_tensor({1, 2, 4, 5});
  const Tensor grid = rng.uniform_tensor({1, 3, 3, 2}, -1.1, 1.1);
  const Tensor w = rng.normal_tensor({1, 2, 3, 3});
  auto f_src = [&](const Tensor& s) { return sum(mul(bilinear_sample(s, {grid}), w)).item(); };
  auto f_grid = [&](const Tensor& g) { return sum(mul(bilinear_sample(src, {g}), w)).item(); };
  Tensor sv = src.clone().set_requires_grad(true);
  Tensor gv = grid.clone().set_requires_grad(true);
  sum(mul(bilinear_sample(sv, {gv}), w)).backward();
  const auto ns = testutil::numeric_grad(f_src, src);
  const auto ng = testutil::numeric_grad(f_grid, grid);
  for (std::size_t i = 0; i < ns.size(); ++i) EXPECT_NEAR(sv.grad()[i], ns[i], 1e-8);
  for (std::size_t i = 0; i < ng.size(); ++i) EXPECT_NEAR(gv.grad()[i], ng[i], 1e-6);
}

TEST(SpatialAlignmentModule, FreshModuleIsIdentityMap) {
  ParamStore store;
  Rng rng(6);
  SpatialAlignment sam(store, "sam.", 4, rng);
  const Tensor x = rng.normal_tensor({3, 4, 8, 8});
  const Tensor y = sam.forward(x);
  ASSERT_EQ(y.shape(), x.shape());
  EXPECT_LT(testutil::max_abs_diff(y, x), 1e-12);
}

TEST(SpatialAlignmentModule, EndToEndGradcheck) {
  ParamStore store;
  Rng rng(7);
  SpatialAlignment sam(store, "sam.", 2, rng);
  for (auto& e : store.entries()) {
    if (e.name == "sam.loc.head.weight") {
      for (double& v : e.value.mutable_data()) v = 0.1 * rng.normal();
    }
  }
  const Tensor x = rng.normal_tensor({1, 2, 8, 8});
  const Tensor w = rng.normal_tensor({1, 2, 8, 8});
  auto loss = [&] { return sum(mul(sam.forward(x), w)); };
  for (auto& e : store.entries()) {
    store.zero_grad();
    loss().backward();
    const double analytic = e.value.grad()[0];
    double& slot = e.value.mutable_data()[0];
    const double keep = slot;
    slot = keep + 1e-5;
    const double up = loss().item();
    slot = keep - 1e-5;
    const double down = loss().item();
    slot = keep;
    const double fd = (up - down) / 2e-5;
    EXPECT_TRUE(std::abs(fd - analytic) < 1e-8 || testutil::rel_err(fd, analytic) < 1e-3) << e.name;
  }
}

// Shifted blobs; the module learns to move each back to the centre.
TEST(SpatialAlignmentModule, LearnsToUndoTranslation) {
  const std::size_t s = 8;
  const double centre = 3.5;
  const std::vector<double> shifts{-1.5, 1.5};
  std::vector<Tensor> inputs, targets;
  for (double dx : shifts) {
    inputs.push_back(blob(s, centre + dx, centre, 1.2));
    targets.push_back(blob(s, centre, centre, 1.2));
  }
  const Tensor x = concat(inputs, 0);
  const Tensor t = concat(targets, 0);

  ParamStore store;
  Rng rng(8);
  SpatialAlignment sam(store, "sam.", 1, rng);
  const double before = mse(sam.forward(x), t);
  AdamState opt = make_adam(store.entries(), {.learning_rate = 1e-2});
  const std::vector<bool> all(store.size(), true);
  for (int step = 0; step < 300; ++step) {
    store.zero_grad();
    mean(square(sub(sam.forward(x), t))).backward();
    adam_update(store.entries(), opt, all);
  }
  const double after = mse(sam.forward(x), t);
  EXPECT_LT(after * 10, before) << before << " -> " << after;

  const AffineParams p = sam.predict_affine(x);
  double gap = 0;
  for (std::size_t k = 0; k < 6; ++k) gap = std::max(gap, std::abs(p.theta.at(k) - p.theta.at(6 + k)));
  EXPECT_GT(gap, 1e-3);
}
