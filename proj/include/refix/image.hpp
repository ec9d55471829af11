#pragma once

#include <optional>
#include <span>
#include <vector>

#include "refix/grid.hpp"

namespace refix {

/// H x W x C image with values in [0, 1] and an optional validity mask.
///
/// Every write path clamps into [0, 1]; non-finite values are rejected.
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels, double fill = 0.0);

  /// Takes ownership of row-major interleaved values, clamping them into [0, 1].
  static Image from_values(int height, int width, int channels, std::vector<double> values);

  int height() const noexcept { return pixels_.height(); }
  int width() const noexcept { return pixels_.width(); }
  int channels() const noexcept { return pixels_.channels(); }
  bool empty() const noexcept { return pixels_.empty(); }

  double operator()(int y, int x, int c = 0) const noexcept { return pixels_(y, x, c); }
  void set(int y, int x, int c, double value);

  std::span<const double> data() const noexcept { return pixels_.data(); }
  const Grid<double>& pixels() const noexcept { return pixels_; }

  bool has_mask() const noexcept { return valid_.has_value(); }
  const std::optional<Mask>& mask() const noexcept { return valid_; }
  void set_mask(Mask mask);
  void clear_mask() noexcept { valid_.reset(); }
  bool is_valid(int y, int x) const noexcept { return !valid_ || (*valid_)(y, x) != 0; }
  std::size_t valid_count() const noexcept;

  bool same_shape(const Image& other) const noexcept {
    return height() == other.height() && width() == other.width() &&
           channels() == other.channels();
  }

  /// Pixel values and mask equal (a missing mask equals an all-valid one).
  friend bool operator==(const Image& a, const Image& b);

 private:
  Grid<double> pixels_;
  std::optional<Mask> valid_;
};

/// Replicates a single channel to three, or returns the image unchanged.
Image to_rgb(const Image& image);

/// ITU-R BT.601 luma for RGB, identity for single-channel images.
Grid<double> luminance(const Image& image);

/// Copy with invalid pixels set to zero and the mask dropped.
Image zero_fill_invalid(const Image& image);

Image crop(const Image& image, int top, int left, int height, int width);

}  // namespace refix
