#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "refix/image.hpp"

namespace refix {

/// Sequence-in, sequence-out image degrader. Same length and extents out as in.
struct Degrader {
  std::string name;
  std::function<std::vector<Image>(const std::vector<Image>&)> apply;

  std::vector<Image> operator()(const std::vector<Image>& frames) const;
};

/// Builds a named degrader. Names:
///   identity
///   blur_noise[:sigma[:noise_std]]    Gaussian blur plus seeded Gaussian noise
///   spatial:k                         area downsample by k, bicubic upsample
///   blocky[:step]                     8x8 DCT coefficient quantisation
///   structured_noise[:amplitude]      seeded low-frequency plus banded noise
///   temporal:k                        frame i rebuilt from frame i+k by flow warp
Degrader make_degrader(const std::string& spec, std::uint64_t seed = 0);

Image gaussian_blur(const Image& image, double sigma);
Image resample_down_up(const Image& image, int factor);
Image dct_quantize(const Image& image, double step);

}  // namespace refix
