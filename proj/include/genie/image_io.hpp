#pragma once

// 8-bit binary PNM (P5 grey, P6 colour). Values map to [0, 1] as v / 255.

#include <filesystem>

#include "genie/tensor.hpp"

namespace genie {

/// [C, H, W] with C = 1 (P5) or 3 (P6). Values are clamped to [0, 1] and rounded.
void write_pnm(const std::filesystem::path& path, const Tensor& image);
/// Returns [C, H, W].
Tensor read_pnm(const std::filesystem::path& path);

/// Item `index` of a batched [N, C, H, W] tensor as [C, H, W].
Tensor batch_item(const Tensor& batch, std::size_t index);
/// Stacks equally shaped [C, H, W] tensors into [N, C, H, W].
Tensor stack_items(const std::vector<Tensor>& items);

}  // namespace genie
