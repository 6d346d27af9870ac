#include "genie/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include <json.hpp>

#include "genie/attention_fusion.hpp"
#include "genie/pipeline.hpp"
#include "genie/residual_scaling.hpp"
#include "genie/spatial_alignment.hpp"
#include "genie/synthetic.hpp"

namespace genie {

namespace {

struct Tally {
  GradcheckResult result;
  const GradcheckOptions& opts;

  void add(double analytic, double numeric) {
    const double abs_err = std::abs(analytic - numeric);
    const double denom = std::max(std::abs(analytic), std::abs(numeric));
    const double rel = denom > 0.0 ? abs_err / denom : 0.0;
    ++result.checked;
    result.max_abs_error = std::max(result.max_abs_error, abs_err);
    // reported over non-negligible gradients; tiny ones are judged by the floor alone
    if (denom >= opts.floor) result.max_rel_error = std::max(result.max_rel_error, rel);
    if (!(rel < result.tolerance) && !(abs_err < opts.floor)) ++result.failures;
  }
};

std::vector<std::size_t> pick_positions(std::size_t n, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> out;
  if (n <= limit) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(i);
  } else {
    for (std::size_t i = 0; i < limit; ++i) out.push_back(rng.index(n));
  }
  return out;
}

double central_difference(double& slot, double h, const std::function<double()>& eval) {
  const double orig = slot;
  slot = orig + h;
  const double plus = eval();
  slot = orig - h;
  const double minus = eval();
  slot = orig;
  return (plus - minus) / (2.0 * h);
}

}  // namespace

GradcheckResult check_gradient(const std::string& name, const GradFn& f, const std::vector<Tensor>& inputs,
                               const GradcheckOptions& opts) {
  Rng rng = Rng::derive(opts.seed, std::hash<std::string>{}(name));
  std::vector<Tensor> xs;
  for (const auto& in : inputs) {
    Tensor x = in.clone();
    x.set_requires_grad(true);
    xs.push_back(x);
  }
  const Tensor first = f(xs);
  const Tensor w = rng.uniform_tensor(first.shape(), -1.0, 1.0);
  sum(mul(first, w)).backward();

  const auto eval = [&] {
    NoGradGuard no_grad;
    return sum(mul(f(xs), w)).item();
  };
  Tally tally{{name, "op", 0, 0, 0, 0, opts.tolerance}, opts};
  for (auto& x : xs) {
    const std::vector<double> grad(x.grad().begin(), x.grad().end());
    for (std::size_t pos : pick_positions(x.numel(), opts.max_elements, rng)) {
      const double analytic = grad.empty() ? 0.0 : grad[pos];
      tally.add(analytic, central_difference(x.mutable_data()[pos], opts.step, eval));
    }
  }
  return tally.result;
}

GradcheckResult check_param_gradient(const std::string& name, const std::function<Tensor()>& loss,
                                     ParamStore& store, const std::vector<ParamProbe>& probes,
                                     const GradcheckOptions& opts) {
  store.zero_grad();
  loss().backward();
  const auto eval = [&] {
    NoGradGuard no_grad;
    return loss().item();
  };
  Tally tally{{name, "module", 0, 0, 0, 0, opts.tolerance}, opts};
  for (const auto& probe : probes) {
    Tensor p = store.get(probe.param);
    if (probe.index >= p.numel()) throw_invalid("probe index out of range for '" + probe.param + "'");
    const double analytic = p.has_grad() ? p.grad()[probe.index] : 0.0;
    tally.add(analytic, central_difference(p.mutable_data()[probe.index], opts.step, eval));
  }
  return tally.result;
}

bool GradcheckReport::all_passed() const {
  if (results.empty()) return false;
  for (const auto& r : results) {
    if (!r.passed()) return false;
  }
  return true;
}

std::string GradcheckReport::to_text() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-34s %-8s %7s %12s %12s %8s  %s\n", "check", "kind", "n", "max_rel",
                "max_abs", "tol", "status");
  os << line;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-34s %-8s %7zu %12.3e %12.3e %8.0e  %s\n", r.name.c_str(), r.kind.c_str(),
                  r.checked, r.max_rel_error, r.max_abs_error, r.tolerance, r.passed() ? "ok" : "FAIL");
    os << line;
  }
  std::size_t failed = 0;
  for (const auto& r : results) failed += r.passed() ? 0 : 1;
  std::snprintf(line, sizeof line, "%zu checks, %zu failed, %.2f s\n", results.size(), failed, seconds);
  os << line;
  return os.str();
}

std::string GradcheckReport::to_json() const {
  nlohmann::json j;
  j["passed"] = all_passed();
  j["seconds"] = seconds;
  auto& arr = j["checks"] = nlohmann::json::array();
  for (const auto& r : results) {
    arr.push_back({{"name", r.name},
                   {"kind", r.kind},
                   {"checked", r.checked},
                   {"failures", r.failures},
                   {"max_rel_error", r.max_rel_error},
                   {"max_abs_error", r.max_abs_error},
                   {"tolerance", r.tolerance},
                   {"passed", r.passed()}});
  }
  return j.dump(2) + "\n";
}

namespace {

void perturb(ParamStore& store, Rng& rng, double stddev) {
  for (auto& e : store.entries()) {
    for (auto& v : e.value.mutable_data()) v += stddev * rng.normal();
  }
}

std::vector<ParamProbe> probes_for(const ParamStore& store, std::size_t per_param, Rng& rng,
                                   const std::function<bool(const std::string&)>& keep = {}) {
  std::vector<ParamProbe> out;
  for (const auto& e : store.entries()) {
    if (keep && !keep(e.name)) continue;
    for (std::size_t i = 0; i < per_param; ++i) out.push_back({e.name, rng.index(e.value.numel())});
  }
  return out;
}

void op_checks(std::vector<GradcheckResult>& out, const GradcheckOptions& opts, Rng& rng) {
  const auto r = [&](Shape s) { return rng.uniform_tensor(std::move(s), -1.0, 1.0); };
  const auto check = [&](const std::string& name, const GradFn& f, const std::vector<Tensor>& in) {
    out.push_back(check_gradient(name, f, in, opts));
  };
  using V = std::vector<Tensor>;

  check("add_broadcast", [](const V& x) { return add(x[0], x[1]); }, {r({2, 3}), r({3})});
  check("sub_broadcast", [](const V& x) { return sub(x[0], x[1]); }, {r({2, 1}), r({1, 3})});
  check("mul_broadcast", [](const V& x) { return mul(x[0], x[1]); }, {r({2, 1}), r({1, 3})});
  check("mul_shared_input", [](const V& x) { return mul(x[0], x[0]); }, {r({4})});
  check("scale", [](const V& x) { return scale(x[0], -2.5); }, {r({3, 2})});
  check("add_scalar", [](const V& x) { return add_scalar(x[0], 0.7); }, {r({5})});
  check("square", [](const V& x) { return square(x[0]); }, {r({2, 3})});
  check("tanh", [](const V& x) { return tanh_op(x[0]); }, {r({2, 5})});
  check("sigmoid", [](const V& x) { return sigmoid(x[0]); }, {r({2, 5})});
  check("silu", [](const V& x) { return silu(x[0]); }, {r({2, 5})});
  check("sum", [](const V& x) { return sum(x[0]); }, {r({3, 4})});
  check("mean", [](const V& x) { return mean(x[0]); }, {r({3, 4})});
  check("matmul", [](const V& x) { return matmul(x[0], x[1]); }, {r({3, 4}), r({4, 2})});
  check("matmul_batched", [](const V& x) { return matmul(x[0], x[1]); }, {r({2, 1, 3, 4}), r({3, 4, 2})});
  check("softmax", [](const V& x) { return softmax_last_axis(x[0]); }, {r({3, 5})});
  check("softmax_wide", [](const V& x) { return softmax_last_axis(scale(x[0], 8.0)); }, {r({2, 6})});
  check("reshape", [](const V& x) { return reshape(x[0], {3, 4}); }, {r({2, 6})});
  check("permute", [](const V& x) { return permute(x[0], {2, 0, 1}); }, {r({2, 3, 4})});
  check("transpose_last2", [](const V& x) { return transpose_last2(x[0]); }, {r({2, 3, 4})});
  check("concat_axis0", [](const V& x) { return concat({x[0], x[1]}, 0); }, {r({1, 3}), r({2, 3})});
  check("concat_axis2", [](const V& x) { return concat({x[0], x[1], x[0]}, 2); }, {r({2, 2, 1}), r({2, 2, 3})});
  check("concat_channels", [](const V& x) { return concat_channels(x[0], x[1]); },
        {r({1, 2, 3, 3}), r({1, 3, 3, 3})});
  check("slice", [](const V& x) { return slice(x[0], 1, 1, 2); }, {r({2, 4, 3})});
  check("conv2d", [](const V& x) { return conv2d(x[0], x[1], x[2], {1, 1}); },
        {r({2, 2, 5, 5}), r({3, 2, 3, 3}), r({3})});
  check("conv2d_stride2", [](const V& x) { return conv2d(x[0], x[1], Tensor(), {2, 1}); },
        {r({1, 2, 6, 6}), r({2, 2, 3, 3})});
  check("upsample_nearest2x", [](const V& x) { return upsample_nearest2x(x[0]); }, {r({1, 2, 3, 3})});
  check("avg_pool2d", [](const V& x) { return avg_pool2d(x[0], 2); }, {r({2, 2, 4, 4})});
  check("global_avg_pool", [](const V& x) { return global_avg_pool(x[0]); }, {r({2, 3, 3, 3})});
  check("to_sequence", [](const V& x) { return to_sequence(x[0]); }, {r({2, 3, 2, 2})});
  check("from_sequence", [](const V& x) { return from_sequence(x[0], 2, 3); }, {r({2, 6, 4})});
  check("linear", [](const V& x) { return linear(x[0], x[1], x[2]); }, {r({2, 3, 4}), r({4, 5}), r({5})});

  check("generate_grid", [](const V& x) { return generate_grid(AffineParams{x[0]}, 3, 4).coords; }, {r({2, 6})});
  check("bilinear_sample", [](const V& x) { return bilinear_sample(x[0], SamplingGrid{scale(x[1], 1.2)}); },
        {r({2, 2, 4, 5}), r({2, 3, 4, 2})});
  check("affine_warp",
        [](const V& x) {
          const Tensor theta = add(scale(x[1], 0.3), AffineParams::identity(2).theta);
          return bilinear_sample(x[0], generate_grid(AffineParams{theta}, 4, 4));
        },
        {r({2, 2, 4, 4}), r({2, 6})});
  check("residual_scale", [](const V& x) { return residual_scale(x[0], ScaleMap{tanh_op(x[1])}); },
        {r({2, 3, 2, 2}), r({2, 3, 2, 2})});
  check("residual_scale_shared", [](const V& x) { return residual_scale(x[0], ScaleMap{tanh_op(x[1])}); },
        {r({2, 3, 2, 2}), r({2, 1, 2, 2})});
  check("attn",
        [](const V& x) {
          AttentionParams p{x[2], x[3], x[4], x[5], 2};
          return attn(x[0], x[1], p);
        },
        {r({2, 5, 6}), r({2, 4, 3}), r({6, 8}), r({3, 8}), r({3, 8}), r({8, 6})});
}

Tensor projected(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

void module_checks(std::vector<GradcheckResult>& out, const GradcheckOptions& opts, std::uint64_t seed) {
  const std::size_t first = out.size();
  const auto r = [](Rng& g, Shape s) { return g.uniform_tensor(std::move(s), -1.0, 1.0); };
  {
    Rng rng = Rng::derive(seed, 101);
    ParamStore store;
    SpatialAlignment sam(store, "sam.", 3, rng);
    perturb(store, rng, 0.1);
    const Tensor x = r(rng, {2, 3, 4, 4});
    const Tensor w = r(rng, {2, 3, 4, 4});
    out.push_back(check_gradient("sam.forward.input", [&](const std::vector<Tensor>& v) { return sam.forward(v[0]); },
                                 {x}, opts));
    out.push_back(check_param_gradient("sam.forward.params", [&] { return projected(sam.forward(x), w); }, store,
                                       probes_for(store, 3, rng), opts));
  }
  {
    Rng rng = Rng::derive(seed, 102);
    ParamStore store;
    ResidualScaling arsm(store, "arsm.", 4, 4, true, rng);
    perturb(store, rng, 0.1);
    const Tensor ref = r(rng, {2, 4, 3, 3}), tar = r(rng, {2, 4, 3, 3}), w = r(rng, {2, 4, 3, 3});
    out.push_back(check_gradient("arsm.forward.inputs",
                                 [&](const std::vector<Tensor>& v) { return arsm.forward(v[0], v[1]); }, {ref, tar},
                                 opts));
    out.push_back(check_param_gradient("arsm.forward.params", [&] { return projected(arsm.forward(ref, tar), w); },
                                       store, probes_for(store, 3, rng), opts));
  }
  {
    Rng rng = Rng::derive(seed, 103);
    ParamStore store;
    AttentionFusion paf(store, "paf.", 8, 2, rng);
    perturb(store, rng, 0.1);
    const Tensor tar = r(rng, {2, 8, 2, 3}), ref = r(rng, {2, 8, 2, 3}), w = r(rng, {2, 8, 2, 3});
    out.push_back(check_gradient("paf.fuse.inputs",
                                 [&](const std::vector<Tensor>& v) { return paf.fuse(v[0], v[1]); }, {tar, ref}, opts));
    out.push_back(check_param_gradient("paf.fuse.params", [&] { return projected(paf.fuse(tar, ref), w); }, store,
                                       probes_for(store, 2, rng), opts));
  }
  {
    Rng rng = Rng::derive(seed, 104);
    ParamStore store;
    Autoencoder ae(store, 2, rng);
    perturb(store, rng, 0.05);
    const Tensor img = rng.uniform_tensor({1, 3, 8, 8}, 0.0, 1.0);
    const Tensor lat = r(rng, {1, 2, 2, 2});
    out.push_back(
        check_gradient("encoder.input", [&](const std::vector<Tensor>& v) { return ae.encode(v[0]); }, {img}, opts));
    out.push_back(
        check_gradient("decoder.input", [&](const std::vector<Tensor>& v) { return ae.decode(v[0]); }, {lat}, opts));
    const Tensor we = r(rng, {1, 2, 2, 2}), wd = r(rng, {1, 3, 8, 8});
    out.push_back(check_param_gradient("autoencoder.params",
                                       [&] { return add(projected(ae.encode(img), we), projected(ae.decode(lat), wd)); },
                                       store, probes_for(store, 3, rng), opts));
  }
  for (std::size_t i = first; i < out.size(); ++i) out[i].kind = "module";
}

ModelConfig gradcheck_config(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.latent_channels = 2;
  cfg.base_width = 8;
  cfg.level_count = 2;
  cfg.head_count = 2;
  cfg.adapter_tokens = 2;
  cfg.timesteps = 10;
  cfg.image_size = 16;
  cfg.batch_size = 2;
  cfg.seed = seed;
  return cfg;
}

void pipeline_checks(std::vector<GradcheckResult>& out, const GradcheckOptions& base, std::uint64_t seed) {
  GradcheckOptions opts = base;
  opts.tolerance = 1e-3;
  GenieModel model(gradcheck_config(seed));
  Rng rng = Rng::derive(seed, 105);
  perturb(model.params(), rng, 0.05);
  const SyntheticDataset data = generate_synthetic("copy-patch", 2, 16, seed);
  const std::vector<std::size_t> idx{0, 1};
  const TrainingBatch batch = make_batch(data, idx);
  const std::vector<std::size_t> t{3, 7};
  const Tensor eps = rng.normal_tensor({2, 2, 4, 4});
  const auto loss = [&] { return compute_loss(model, batch, t, eps, false).total; };

  std::map<ParamGroup, std::vector<std::pair<std::string, std::size_t>>> pool;
  for (const auto& e : model.params().entries()) {
    for (std::size_t i = 0; i < e.value.numel(); ++i) pool[group_of(e.name)].push_back({e.name, i});
  }
  for (const auto& [group, candidates] : pool) {
    std::vector<ParamProbe> probes;
    for (int k = 0; k < 5; ++k) {
      const auto& c = candidates[rng.index(candidates.size())];
      probes.push_back({c.first, c.second});
    }
    GradcheckResult res = check_param_gradient("pipeline." + group_name(group), loss, model.params(), probes, opts);
    res.kind = "pipeline";
    out.push_back(res);
  }
}

}  // namespace

GradcheckReport run_gradcheck_suite(std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  GradcheckReport report;
  GradcheckOptions opts;
  opts.seed = seed;
  Rng rng = Rng::derive(seed, 100);
  op_checks(report.results, opts, rng);
  module_checks(report.results, opts, seed);
  pipeline_checks(report.results, opts, seed);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace genie
