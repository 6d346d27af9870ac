#include "genie/residual_scaling.hpp"

namespace genie {

Tensor residual_scale(const Tensor& features, const ScaleMap& map) {
  return mul(map.factor(), features);
}

ResidualScaling::ResidualScaling(ParamStore& store, const std::string& prefix, std::size_t ref_channels,
                                 std::size_t target_channels, bool per_channel, Rng& rng)
    : ref_channels_(ref_channels),
      target_channels_(target_channels),
      hidden_(make_conv(store, prefix + "scale.conv1", ref_channels + target_channels, ref_channels, 3, {1, 1}, rng)) {
  const std::size_t out_ch = per_channel ? ref_channels : 1;
  out_.weight = store.add(prefix + "scale.conv2.weight", Tensor::zeros({out_ch, ref_channels, 3, 3}));
  out_.bias = store.add(prefix + "scale.conv2.bias", Tensor::zeros({out_ch}));
  out_.opts = {1, 1};
}

Tensor ResidualScaling::scale_logits(const Tensor& ref, const Tensor& target) const {
  if (ref.rank() != 4 || target.rank() != 4 || ref.dim(0) != target.dim(0) || ref.dim(2) != target.dim(2) ||
      ref.dim(3) != target.dim(3)) {
    throw_shape("residual scaling needs matching batch and spatial dims, got reference " + shape_str(ref.shape()) +
                " and target " + shape_str(target.shape()));
  }
  if (ref.dim(1) != ref_channels_ || target.dim(1) != target_channels_) {
    throw_shape("residual scaling built for " + std::to_string(ref_channels_) + "+" +
                std::to_string(target_channels_) + " channels, got " + shape_str(ref.shape()) + " and " +
                shape_str(target.shape()));
  }
  return out_(silu(hidden_(concat_channels(ref, target))));
}

ScaleMap ResidualScaling::compute_scale_map(const Tensor& ref, const Tensor& target) const {
  return {tanh_op(scale_logits(ref, target))};
}

Tensor ResidualScaling::forward(const Tensor& ref, const Tensor& target) const {
  return residual_scale(ref, compute_scale_map(ref, target));
}

}  // namespace genie
