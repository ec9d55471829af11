#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "refix/dataset.hpp"
#include "refix/fixer.hpp"
#include "refix/training.hpp"

namespace refix {

/// Plain-text `section.key = value` configuration. '#' starts a comment.
struct RunConfig {
  FixerConfig model;
  LossConfig loss;
  OptimConfig optim;
  WarpMode warp_mode = WarpMode::geometry;
  double warp_temperature = 1.0;
  std::string analyze_method = "tsne";
  double analyze_perplexity = 30.0;
  std::uint64_t analyze_seed = 0;
  int analyze_samples = 0;  // 0 = every image

  /// Applies one assignment; unknown keys and ill-typed values throw InvalidInput.
  void set(const std::string& key, const std::string& value);
  /// Routes a single seed to every sub-generator.
  void set_seed(std::uint64_t seed);
  void validate() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace refix
