#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace genie {

/// Everything that shapes a model and its training run. Serialised as flat
/// `key = value` text; `#` starts a comment. Unknown keys are rejected.
struct ModelConfig {
  // architecture
  std::size_t latent_channels = 4;
  std::size_t base_width = 32;
  std::size_t level_count = 2;
  std::size_t head_count = 4;
  std::size_t adapter_tokens = 4;
  bool alpha_per_channel = true;

  // diffusion
  std::size_t timesteps = 50;
  double beta_start = 1e-4;
  double beta_end = 0.2;

  // component switches (ablation lattice)
  bool enable_sam = true;
  bool enable_paf = true;
  bool enable_arsm = true;

  // training strategy (freeze lattice)
  bool freeze_ref = false;
  bool freeze_tar = false;
  bool freeze_adapter = false;

  // optimisation
  double learning_rate = 1e-3;
  double recon_weight = 1.0;
  /// Learning-rate multiplier for the fusion weights beta, gamma, lambda.
  double fusion_lr_scale = 1.0;
  std::size_t batch_size = 8;
  std::size_t steps = 200;
  std::uint64_t seed = 0;

  // synthetic data
  std::string task = "copy-patch";
  std::size_t image_size = 32;
  std::size_t train_samples = 2048;
  std::size_t eval_samples = 16;
  std::size_t eval_every = 0;  // 0: evaluate only at the end

  /// Throws Error(kConfig) naming the first violated constraint.
  void validate() const;

  /// Canonical text form, one key per line in a fixed order.
  std::string to_text() const;

  static ModelConfig parse(const std::string& text);
  static ModelConfig load(const std::filesystem::path& path);

  /// Applies one `key = value` assignment. Throws on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);

  /// Spatial downsampling between image and latent.
  static constexpr std::size_t kLatentFactor = 4;
};

bool is_known_task(const std::string& task);

}  // namespace genie
