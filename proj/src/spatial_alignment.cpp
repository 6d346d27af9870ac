#include "genie/spatial_alignment.hpp"

#include <cmath>

namespace genie {

AffineParams AffineParams::identity(std::size_t batch) {
  std::vector<double> v;
  v.reserve(batch * 6);
  for (std::size_t i = 0; i < batch; ++i) v.insert(v.end(), {1.0, 0.0, 0.0, 0.0, 1.0, 0.0});
  return {Tensor::from({batch, 6}, std::move(v))};
}

SamplingGrid generate_grid(const AffineParams& params, std::size_t out_h, std::size_t out_w) {
  const Tensor& theta = params.theta;
  if (theta.rank() != 2 || theta.dim(1) != 6) {
    throw_shape("affine parameters must be [N, 6], got " + shape_str(theta.shape()));
  }
  if (out_h == 0 || out_w == 0) throw_invalid("sampling grid needs positive output size");
  const std::size_t n = theta.dim(0);
  // Homogeneous pixel-centre lattice [H*W, 3] of (x, y, 1).
  std::vector<double> base;
  base.reserve(out_h * out_w * 3);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double yn = (2.0 * static_cast<double>(y) + 1.0) / static_cast<double>(out_h) - 1.0;
    for (std::size_t x = 0; x < out_w; ++x) {
      const double xn = (2.0 * static_cast<double>(x) + 1.0) / static_cast<double>(out_w) - 1.0;
      base.insert(base.end(), {xn, yn, 1.0});
    }
  }
  const Tensor lattice = Tensor::from({out_h * out_w, 3}, std::move(base));
  const Tensor mat_t = transpose_last2(reshape(theta, {n, 2, 3}));  // [N, 3, 2]
  return {reshape(matmul(lattice, mat_t), {n, out_h, out_w, 2})};
}

Tensor bilinear_sample(const Tensor& src, const SamplingGrid& grid) {
  const Tensor& g = grid.coords;
  if (src.rank() != 4) throw_shape("bilinear_sample source must be [N, C, H, W], got " + shape_str(src.shape()));
  if (g.rank() != 4 || g.dim(3) != 2 || g.dim(0) != src.dim(0)) {
    throw_shape("sampling grid " + shape_str(g.shape()) + " does not match source " + shape_str(src.shape()));
  }
  const std::size_t n = src.dim(0), c = src.dim(1), h = src.dim(2), w = src.dim(3);
  const std::size_t ho = g.dim(1), wo = g.dim(2), pix = ho * wo;

  // Per output pixel: integer corner and fractional weights, shared across channels.
  struct Tap {
    std::ptrdiff_t x0, y0;
    double fx, fy;
  };
  auto taps = std::make_shared<std::vector<Tap>>(n * pix);
  const auto gd = g.data();
  for (std::size_t i = 0; i < n * pix; ++i) {
    const double ix = ((gd[2 * i] + 1.0) * static_cast<double>(w) - 1.0) * 0.5;
    const double iy = ((gd[2 * i + 1] + 1.0) * static_cast<double>(h) - 1.0) * 0.5;
    const double fx0 = std::floor(ix), fy0 = std::floor(iy);
    (*taps)[i] = {static_cast<std::ptrdiff_t>(fx0), static_cast<std::ptrdiff_t>(fy0), ix - fx0, iy - fy0};
  }
  const auto sd = src.data();
  const auto at = [h, w](const double* plane, std::ptrdiff_t y, std::ptrdiff_t x) {
    if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(w) || y >= static_cast<std::ptrdiff_t>(h)) return 0.0;
    return plane[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  };

  std::vector<double> out(n * c * pix);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = sd.data() + (b * c + ch) * h * w;
      double* dst = out.data() + (b * c + ch) * pix;
      for (std::size_t p = 0; p < pix; ++p) {
        const Tap& t = (*taps)[b * pix + p];
        const double v00 = at(plane, t.y0, t.x0), v01 = at(plane, t.y0, t.x0 + 1);
        const double v10 = at(plane, t.y0 + 1, t.x0), v11 = at(plane, t.y0 + 1, t.x0 + 1);
        dst[p] = (1 - t.fy) * ((1 - t.fx) * v00 + t.fx * v01) + t.fy * ((1 - t.fx) * v10 + t.fx * v11);
      }
    }
  }

  return Tensor::from_op(
      {n, c, ho, wo}, std::move(out), {src, g},
      [src, taps, n, c, h, w, pix, at](std::span<const double> go, std::span<std::vector<double>*> in) {
        const auto sd = src.data();
        const double half_w = 0.5 * static_cast<double>(w), half_h = 0.5 * static_cast<double>(h);
        const auto scatter = [h, w](double* plane, std::ptrdiff_t y, std::ptrdiff_t x, double v) {
          if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(w) || y >= static_cast<std::ptrdiff_t>(h)) return;
          plane[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] += v;
        };
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double* plane = sd.data() + (b * c + ch) * h * w;
            const double* gp = go.data() + (b * c + ch) * pix;
            double* gsrc = in[0] ? in[0]->data() + (b * c + ch) * h * w : nullptr;
            for (std::size_t p = 0; p < pix; ++p) {
              const Tap& t = (*taps)[b * pix + p];
              const double gv = gp[p];
              if (gsrc) {
                scatter(gsrc, t.y0, t.x0, gv * (1 - t.fy) * (1 - t.fx));
                scatter(gsrc, t.y0, t.x0 + 1, gv * (1 - t.fy) * t.fx);
                scatter(gsrc, t.y0 + 1, t.x0, gv * t.fy * (1 - t.fx));
                scatter(gsrc, t.y0 + 1, t.x0 + 1, gv * t.fy * t.fx);
              }
              if (in[1]) {
                const double v00 = at(plane, t.y0, t.x0), v01 = at(plane, t.y0, t.x0 + 1);
                const double v10 = at(plane, t.y0 + 1, t.x0), v11 = at(plane, t.y0 + 1, t.x0 + 1);
                const double d_ix = (1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10);
                const double d_iy = (1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01);
                auto& gg = *in[1];
                gg[2 * (b * pix + p)] += gv * d_ix * half_w;
                gg[2 * (b * pix + p) + 1] += gv * d_iy * half_h;
              }
            }
          }
        }
      });
}

SpatialAlignment::SpatialAlignment(ParamStore& store, const std::string& prefix, std::size_t channels, Rng& rng)
    : channels_(channels),
      conv1_(make_conv(store, prefix + "loc.conv1", channels, kHiddenChannels, 3, {2, 1}, rng)),
      conv2_(make_conv(store, prefix + "loc.conv2", kHiddenChannels, kHiddenChannels, 3, {2, 1}, rng)) {
  head_.weight = store.add(prefix + "loc.head.weight", Tensor::zeros({kHiddenChannels, 6}));
  head_.bias = store.add(prefix + "loc.head.bias", Tensor::from({6}, {1.0, 0.0, 0.0, 0.0, 1.0, 0.0}));
}

AffineParams SpatialAlignment::predict_affine(const Tensor& features) const {
  if (features.rank() != 4 || features.dim(1) != channels_) {
    throw_shape("spatial alignment expects [N, " + std::to_string(channels_) + ", H, W], got " +
                shape_str(features.shape()));
  }
  if (features.dim(2) < kMinSpatial || features.dim(3) < kMinSpatial) {
    throw_shape("spatial alignment needs at least 4x4 features for its pooling stack, got " +
                shape_str(features.shape()));
  }
  Tensor h = silu(conv1_(features));
  h = silu(conv2_(h));
  return {head_(global_avg_pool(h))};
}

Tensor SpatialAlignment::forward(const Tensor& features) const {
  const AffineParams params = predict_affine(features);
  return bilinear_sample(features, generate_grid(params, features.dim(2), features.dim(3)));
}

}  // namespace genie
