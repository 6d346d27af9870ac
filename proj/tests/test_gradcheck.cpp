#include <gtest/gtest.h>

#include <cmath>

#include "genie/gradcheck.hpp"

using namespace genie;

namespace {

// y = x^3 with the adjoint scaled by `fudge`; fudge = 1 is the correct op.
Tensor cube(const Tensor& x, double fudge) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(x.at(i), 3);
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [x, fudge](std::span<const double> g, std::span<std::vector<double>*> in) {
                           if (!in[0]) return;
                           for (std::size_t i = 0; i < g.size(); ++i)
                             (*in[0])[i] += fudge * 3 * x.at(i) * x.at(i) * g[i];
                         });
}

}  // namespace

TEST(CheckGradient, AcceptsACorrectCustomOp) {
  Rng rng(1);
  const Tensor x = rng.normal_tensor({3, 4});
  const GradcheckResult r = check_gradient("cube", [](const auto& in) { return cube(in[0], 1.0); }, {x});
  EXPECT_TRUE(r.passed());
  EXPECT_EQ(r.checked, 12u);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(CheckGradient, FlagsACorruptedAdjoint) {
  Rng rng(2);
  const Tensor x = rng.normal_tensor({3, 4});
  const GradcheckResult r = check_gradient("cube", [](const auto& in) { return cube(in[0], 1.001); }, {x});
  EXPECT_FALSE(r.passed());
  EXPECT_EQ(r.failures, r.checked);
  EXPECT_NEAR(r.max_rel_error, 1e-3, 2e-4);
}

TEST(CheckGradient, FlagsAMissingAdjoint) {
  const Tensor x = Tensor::from({2}, {0.5, -1.0});
  const GradcheckResult r = check_gradient(
      "dropped",
      [](const auto& in) {
        return Tensor::from_op(in[0].shape(), {in[0].at(0), in[0].at(1)}, {in[0]},
                               [](std::span<const double>, std::span<std::vector<double>*>) {});
      },
      {x});
  EXPECT_FALSE(r.passed());
}

TEST(CheckGradient, LeavesInputsUntouched) {
  const Tensor x = Tensor::from({2}, {0.5, -1.0});
  check_gradient("cube", [](const auto& in) { return cube(in[0], 1.0); }, {x});
  EXPECT_EQ(x.at(0), 0.5);
  EXPECT_EQ(x.at(1), -1.0);
  EXPECT_FALSE(x.requires_grad());
}

TEST(CheckParamGradient, ProbesNamedScalars) {
  ParamStore store;
  Rng rng(3);
  const Linear lin = make_linear(store, "lin", 3, 2, rng);
  const Tensor x = rng.normal_tensor({4, 3});
  const auto loss = [&] { return sum(square(tanh_op(lin(x)))); };
  const GradcheckResult r =
      check_param_gradient("linear", loss, store, {{"lin.weight", 0}, {"lin.weight", 5}, {"lin.bias", 1}});
  EXPECT_TRUE(r.passed());
  EXPECT_EQ(r.checked, 3u);
  EXPECT_THROW(check_param_gradient("bad", loss, store, {{"lin.nothing", 0}}), Error);
}

TEST(Suite, EveryCheckPasses) {
  const GradcheckReport rep = run_gradcheck_suite(0);
  EXPECT_TRUE(rep.all_passed()) << rep.to_text();
  std::size_t ops = 0, pipelines = 0;
  for (const auto& r : rep.results) {
    EXPECT_TRUE(r.passed()) << r.name << " rel " << r.max_rel_error;
    ops += r.kind == "op";
    pipelines += r.kind == "pipeline";
    EXPECT_LT(r.max_rel_error, r.tolerance) << r.name;
  }
  EXPECT_GE(ops, 20u);
  EXPECT_GE(pipelines, 1u);
  EXPECT_LT(rep.seconds, 120.0);
  const std::string text = rep.to_text();
  for (const char* name : {"matmul", "softmax", "conv2d", "tanh", "concat"})
    EXPECT_NE(text.find(name), std::string::npos) << name;
}
