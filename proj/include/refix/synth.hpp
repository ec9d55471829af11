#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "refix/dataset.hpp"

namespace refix {

/// Procedural scene: a textured plane facing the reference camera at depth
/// `plane_depth`, seen by cameras that translate, roll and zoom about the
/// reference frame. Every view pair is related by a known homography, and the
/// generator writes exact depth, poses and reference-to-frame flow.
struct SynthOptions {
  int frames = 5;
  int height = 80;
  int width = 80;
  double focal = 80.0;
  double plane_depth = 5.0;
  double max_shift_px = 4.0;     // lateral image shift per frame step
  double max_roll_deg = 1.5;     // per frame step
  double max_dolly = 0.1;        // forward motion per frame step, world units
  int supersample = 3;
};

Scene make_synthetic_scene(std::uint64_t seed, int index, const SynthOptions& options = {});

/// Writes `count` scenes as scene_000, scene_001, ... plus scenes.txt.
std::vector<std::filesystem::path> write_synthetic_dataset(const std::filesystem::path& root,
                                                           int count, std::uint64_t seed,
                                                           const SynthOptions& options = {});

}  // namespace refix
