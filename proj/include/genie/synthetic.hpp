#pragma once

// Procedural editing tasks standing in for a real insertion dataset.
//
//   copy-patch  reference is a smooth two-colour ramp; the ground truth pastes
//               it into a rectangular hole of the target at the same place.
//   recolor     the masked object of the target takes the reference colour
//               while keeping the target's shading.
//   translate   the reference object sits at a random offset (up to a quarter
//               of the width each way); the ground truth shows it centred in
//               the mask.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include "genie/pipeline.hpp"

namespace genie {

struct SyntheticDataset {
  std::string task;
  Tensor reference;  // [N, 3, S, S]
  Tensor target;     // [N, 3, S, S]
  Tensor mask;       // [N, 1, S, S]
  Tensor truth;      // [N, 3, S, S]
  Tensor offset;     // [N, 2] (dx, dy) in pixels; translate only

  std::size_t size() const { return target.defined() ? target.dim(0) : 0; }
};

SyntheticDataset generate_synthetic(const std::string& task, std::size_t count, std::size_t image_size,
                                    std::uint64_t seed);

/// Items [first, first + count) as a training batch.
TrainingBatch make_batch(const SyntheticDataset& data, std::span<const std::size_t> indices);
SyntheticDataset slice_dataset(const SyntheticDataset& data, std::size_t first, std::size_t count);

/// dataset.gtd holds tensors reference/target/mask/truth (+ offset); with
/// `write_images` every item also gets <i>_ref.ppm, <i>_tar.ppm, <i>_mask.pgm
/// and <i>_gt.ppm.
void save_dataset(const std::filesystem::path& dir, const SyntheticDataset& data, bool write_images);
SyntheticDataset load_dataset(const std::filesystem::path& file);

}  // namespace genie
