#include "refix/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace refix {

namespace {

double checked_clamp(double v) {
  if (!std::isfinite(v)) throw InvalidInput("Image: non-finite pixel value");
  return std::clamp(v, 0.0, 1.0);
}

}  // namespace

Image::Image(int height, int width, int channels, double fill)
    : pixels_(height, width, channels, checked_clamp(fill)) {
  if (channels != 1 && channels != 3) throw InvalidInput("Image: channels must be 1 or 3");
}

Image Image::from_values(int height, int width, int channels, std::vector<double> values) {
  if (channels != 1 && channels != 3) throw InvalidInput("Image: channels must be 1 or 3");
  for (double& v : values) v = checked_clamp(v);
  Image image;
  image.pixels_ = Grid<double>(height, width, channels, std::move(values));
  return image;
}

void Image::set(int y, int x, int c, double value) { pixels_(y, x, c) = checked_clamp(value); }

void Image::set_mask(Mask mask) {
  if (!mask.same_extent(pixels_) || mask.channels() != 1)
    throw InvalidInput("Image: mask extent differs from image");
  valid_ = std::move(mask);
}

std::size_t Image::valid_count() const noexcept {
  if (!valid_) return pixels_.pixels();
  return static_cast<std::size_t>(
      std::count_if(valid_->data().begin(), valid_->data().end(), [](auto v) { return v != 0; }));
}

bool operator==(const Image& a, const Image& b) {
  if (!a.same_shape(b) || !(a.pixels_ == b.pixels_)) return false;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x)
      if (a.is_valid(y, x) != b.is_valid(y, x)) return false;
  return true;
}

Image to_rgb(const Image& image) {
  if (image.channels() == 3) return image;
  Image out(image.height(), image.width(), 3);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < 3; ++c) out.set(y, x, c, image(y, x));
  if (image.has_mask()) out.set_mask(*image.mask());
  return out;
}

Grid<double> luminance(const Image& image) {
  Grid<double> out(image.height(), image.width(), 1);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      out(y, x) = image.channels() == 1
                      ? image(y, x)
                      : 0.299 * image(y, x, 0) + 0.587 * image(y, x, 1) + 0.114 * image(y, x, 2);
  return out;
}

Image zero_fill_invalid(const Image& image) {
  Image out(image.height(), image.width(), image.channels());
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      if (image.is_valid(y, x))
        for (int c = 0; c < image.channels(); ++c) out.set(y, x, c, image(y, x, c));
  return out;
}

Image crop(const Image& image, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > image.height() ||
      left + width > image.width())
    throw InvalidInput("crop: window exceeds image bounds");
  Image out(height, width, image.channels());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < image.channels(); ++c) out.set(y, x, c, image(top + y, left + x, c));
  if (image.has_mask()) {
    Mask m(height, width, 1);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) m(y, x) = (*image.mask())(top + y, left + x);
    out.set_mask(std::move(m));
  }
  return out;
}

}  // namespace refix
