#pragma once

// Learned affine canonicalisation of feature maps: a small localisation
// network predicts a 2x3 affine transform per batch item, the transform is
// turned into a sampling grid, and the input is bilinearly resampled through
// it. All three stages are differentiable.
//
// Coordinates are normalised to [-1, 1] with pixel centres at
// x_norm = (2x + 1) / W - 1 (the "align corners = false" convention). Samples
// falling outside the source read zeros.

#include <string>

#include "genie/nn.hpp"
#include "genie/tensor.hpp"

namespace genie {

/// theta: [N, 6] read row-major as [[a, b, tx], [c, d, ty]].
struct AffineParams {
  Tensor theta;

  static AffineParams identity(std::size_t batch);
  std::size_t batch() const { return theta.dim(0); }
};

/// coords: [N, H, W, 2] source positions (x, y) in normalised space.
struct SamplingGrid {
  Tensor coords;
};

SamplingGrid generate_grid(const AffineParams& params, std::size_t out_h, std::size_t out_w);

/// [N, C, H, W] x grid [N, H', W', 2] -> [N, C, H', W'].
Tensor bilinear_sample(const Tensor& src, const SamplingGrid& grid);

class SpatialAlignment {
 public:
  static constexpr std::size_t kHiddenChannels = 16;
  static constexpr std::size_t kMinSpatial = 4;

  /// Final layer starts at zero weight and identity bias, so a fresh module
  /// is the identity warp.
  SpatialAlignment(ParamStore& store, const std::string& prefix, std::size_t channels, Rng& rng);

  AffineParams predict_affine(const Tensor& features) const;
  /// predict_affine -> generate_grid -> bilinear_sample; output shape == input shape.
  Tensor forward(const Tensor& features) const;

  const Linear& head() const { return head_; }

 private:
  std::size_t channels_;
  Conv conv1_;
  Conv conv2_;
  Linear head_;
};

}  // namespace genie
