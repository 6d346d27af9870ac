#pragma once

// Dual U-Net latent diffusion for reference-guided editing.
//
// Reference branch: encoder -> spatial alignment -> reference U-Net, whose
// mid and up-sampling features are purified by residual scaling against the
// target features of the same level and timestep.
// Target branch: the denoising U-Net over [z_t ; phi(M) ; z_masked]. At the
// mid block and each up block it first adds a cross-attention read of a
// global reference embedding (the adapter), then replaces its features with
// the attention fusion of target and purified reference features.
//
// The two U-Nets run level-synchronised ("lockstep") inside one
// predict_noise call: injection site 0 is the mid block, site k (k >= 1) is
// the k-th up block counted from the bottom.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "genie/attention_fusion.hpp"
#include "genie/config.hpp"
#include "genie/nn.hpp"
#include "genie/optim.hpp"
#include "genie/residual_scaling.hpp"
#include "genie/schedule.hpp"
#include "genie/spatial_alignment.hpp"

namespace genie {

/// Reference image, target image and edit mask. Images are [N, 3, H, W] in
/// [0, 1]; the mask is [N, 1, H, W] with entries exactly 0 or 1.
struct EditingInputs {
  Tensor reference;
  Tensor target;
  Tensor mask;

  void validate() const;
};

/// Inputs plus the edited image the model should produce.
struct TrainingBatch {
  EditingInputs inputs;
  Tensor truth;
};

/// Stand-in for a pretrained VAE: two stride-2 convs down, two upsample+conv up.
class Autoencoder {
 public:
  Autoencoder(ParamStore& store, std::size_t latent_channels, Rng& rng);

  Tensor encode(const Tensor& image) const;
  /// Sigmoid output in (0, 1).
  Tensor decode(const Tensor& latent) const;

 private:
  std::vector<Conv> enc_;
  std::vector<Conv> dec_;
};

struct ResBlock {
  Conv conv1;
  Conv conv2;
  Linear time_proj;  // undefined weight when the host has no time embedding
  Conv skip;         // undefined weight when in == out channels

  Tensor operator()(const Tensor& x, const Tensor& temb) const;
};

class UNet {
 public:
  /// `out_channels` == 0 omits the output head; `time_dim` == 0 omits time conditioning.
  UNet(ParamStore& store, const std::string& prefix, std::size_t in_channels, std::size_t out_channels,
       std::size_t base_width, std::size_t levels, std::size_t time_dim, Rng& rng);

  struct Encoded {
    Tensor hidden;
    std::vector<Tensor> skips;  // one per level, shallow first
  };

  Encoded down(const Tensor& x, const Tensor& temb) const;
  Tensor mid(const Tensor& h, const Tensor& temb) const;
  /// Up block for `level` (levels - 1 first, then down to 0).
  Tensor up(std::size_t level, const Tensor& h, const Tensor& skip, const Tensor& temb) const;
  Tensor head(const Tensor& h) const;

  std::size_t levels() const { return down_blocks_.size(); }
  std::size_t width(std::size_t level) const { return base_width_ << level; }
  /// Channel width at injection site k.
  std::size_t site_width(std::size_t site) const;

 private:
  std::size_t base_width_;
  Conv stem_;
  std::vector<ResBlock> down_blocks_;
  std::vector<Conv> downsamplers_;
  ResBlock mid_block_;
  std::vector<ResBlock> up_blocks_;  // indexed by level
  Conv head_;
  bool has_head_ = false;
};

/// Global reference embedding read by cross-attention at every injection site.
class ReferenceAdapter {
 public:
  ReferenceAdapter(ParamStore& store, std::size_t latent_channels, std::size_t token_count, std::size_t token_dim,
                   const std::vector<std::size_t>& site_widths, std::size_t head_count, Rng& rng);

  /// [N, latent_channels, h, w] -> tokens [N, token_count, token_dim]
  Tensor embed(const Tensor& ref_latent) const;
  /// h + CrossAttn(h -> tokens), on feature maps.
  Tensor apply(std::size_t site, const Tensor& h, const Tensor& tokens) const;

 private:
  std::size_t token_count_;
  std::size_t token_dim_;
  Linear embed_;
  std::vector<AttentionParams> sites_;
};

/// Parameter groups used for freezing and per-module diagnostics.
enum class ParamGroup { kAutoencoder, kAlignment, kRefUNet, kScaling, kTarUNet, kFusion, kAdapter };

ParamGroup group_of(const std::string& param_name);
std::string group_name(ParamGroup g);

class GenieModel {
 public:
  explicit GenieModel(const ModelConfig& config);
  GenieModel(const GenieModel&) = delete;
  GenieModel& operator=(const GenieModel&) = delete;

  const ModelConfig& config() const { return config_; }
  /// Flags (enable_*, freeze_*, learning_rate) may be changed in place; shape keys may not.
  ModelConfig& mutable_config() { return config_; }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const DiffusionSchedule& schedule() const { return schedule_; }

  const Autoencoder& autoencoder() const { return *autoencoder_; }
  const SpatialAlignment& alignment() const { return *alignment_; }
  const UNet& ref_unet() const { return *ref_unet_; }
  const UNet& tar_unet() const { return *tar_unet_; }
  const ReferenceAdapter& adapter() const { return *adapter_; }
  const ResidualScaling& scaling(std::size_t site) const { return scaling_.at(site); }
  const AttentionFusion& fusion(std::size_t site) const { return fusion_.at(site); }
  AttentionFusion& fusion(std::size_t site) { return fusion_.at(site); }
  std::size_t site_count() const { return fusion_.size(); }

  /// Sinusoidal embedding of per-item timesteps followed by a small MLP.
  Tensor time_embedding(std::span<const std::size_t> t) const;

  bool group_trainable(ParamGroup g) const;
  std::vector<bool> trainable_mask() const;

  std::vector<NamedTensor> state() const { return params_.snapshot(); }
  void load_state(const std::vector<NamedTensor>& values) { params_.load_values(values); }

 private:
  ModelConfig config_;
  ParamStore params_;
  DiffusionSchedule schedule_;
  std::unique_ptr<Autoencoder> autoencoder_;
  std::unique_ptr<SpatialAlignment> alignment_;
  std::unique_ptr<UNet> ref_unet_;
  std::unique_ptr<UNet> tar_unet_;
  std::unique_ptr<ReferenceAdapter> adapter_;
  std::vector<ResidualScaling> scaling_;
  std::vector<AttentionFusion> fusion_;
  Linear time1_;
  Linear time2_;
};

/// Reference-side tensors that stay fixed across denoising steps.
struct ReferenceContext {
  Tensor aligned_latent;  // encoder output, spatially aligned when enabled
  Tensor adapter_tokens;
};

ReferenceContext prepare_reference(const GenieModel& model, const Tensor& reference_image);
/// Same, starting from an already encoded reference.
ReferenceContext prepare_reference_latent(const GenieModel& model, const Tensor& reference_latent);

/// Area-average downsampling of the mask to latent resolution.
Tensor mask_representation(const Tensor& mask, std::size_t factor);

/// [z_t ; phi(M) ; z_masked] along channels.
Tensor assemble_target_input(const Tensor& z_t, const Tensor& mask, const Tensor& z_masked);

/// Latent of the unedited region, encode(I_tar * (1 - M)).
Tensor masked_target_latent(const GenieModel& model, const EditingInputs& inputs);

/// Runs the reference U-Net alone, purifying each injection site against the
/// supplied target features (required only when residual scaling is enabled).
/// Returns one feature map per injection site.
std::vector<Tensor> reference_forward(const GenieModel& model, const Tensor& reference_image,
                                      const std::vector<Tensor>& target_site_features);

/// Optional taps into a predict_noise call.
struct ForwardTrace {
  std::vector<Tensor> ref_features;     // purified reference features per site
  std::vector<Tensor> target_features;  // target features entering each site's fusion
  AttentionTrace* attention = nullptr;
};

/// epsilon_theta(z_t, F_t, F_r', t): output shaped like z_t.
Tensor predict_noise(const GenieModel& model, const Tensor& target_input, const ReferenceContext& reference,
                     std::span<const std::size_t> t, ForwardTrace* trace = nullptr);

/// mean((eps_hat - eps)^2)
Tensor noise_objective(const Tensor& eps_hat, const Tensor& eps);

struct LossTerms {
  Tensor noise;   // the noise-prediction objective
  Tensor recon;   // autoencoder reconstruction of the ground truth
  Tensor total;   // noise + recon_weight * recon
  Tensor eps_hat;
};

/// Deterministic loss for fixed timesteps and noise. Training detaches the
/// latents fed to the diffusion branch, so the autoencoder only sees the
/// reconstruction term; `detach_latents` = false keeps the whole graph (gradcheck).
LossTerms compute_loss(const GenieModel& model, const TrainingBatch& batch, std::span<const std::size_t> t,
                       const Tensor& eps, bool detach_latents = true);

struct StepResult {
  double noise_loss = 0;
  double recon_loss = 0;
  double total_loss = 0;
};

/// Draws t ~ U[0, T) and eps ~ N(0, 1), backpropagates, applies Adam to the
/// unfrozen groups. Throws Error(kNumeric) naming the first non-finite tensor.
StepResult training_step(GenieModel& model, AdamState& optimizer, const TrainingBatch& batch, Rng& rng);

AdamState make_optimizer(const GenieModel& model);

/// Ancestral DDPM sampling from z_T ~ N(0, 1), decoded and composited so
/// that pixels outside the mask are copied from the target unchanged.
Tensor sample(const GenieModel& model, const EditingInputs& inputs, std::uint64_t seed);

}  // namespace genie
