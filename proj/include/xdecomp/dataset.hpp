#pragma once

// On-disk layout for rendered decomposition samples. A dataset directory
// holds index.json plus one subdirectory per sample:
//   index.json                     {"d": ..., "samples": [{dir, phantom, view}]}
//   <phantom>_v<view>/input.xdt    rank-2 (H, W) tensor, the total projection
//   <phantom>_v<view>/input.pgm    16-bit preview (+ input.json sidecar)
//   <phantom>_v<view>/target_K.*   same trio per decomposition layer
// The .xdt tensors are authoritative; the PGM/JSON pairs are for inspection
// and carry the pose and value range.

#include <filesystem>
#include <vector>

#include "xdecomp/projection.hpp"

namespace xdecomp {

void save_dataset(const std::filesystem::path& dir,
                  const std::vector<DecompositionSample>& samples);

std::vector<DecompositionSample> load_dataset(const std::filesystem::path& dir);

// Loads and concatenates several dataset directories; component counts and
// image sizes must agree.
std::vector<DecompositionSample> load_datasets(
    const std::vector<std::filesystem::path>& dirs);

}  // namespace xdecomp
