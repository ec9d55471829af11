#include "refix/image_io.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

static_assert(std::endian::native == std::endian::little,
              "PFM/FLO readers assume a little-endian host");

namespace refix {

Image read_png(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw DataError("cannot read image: " + path.string());
  if (mat.depth() != CV_8U) throw DataError("only 8-bit images are supported: " + path.string());
  if (mat.channels() == 4) cv::cvtColor(mat, mat, cv::COLOR_BGRA2BGR);
  const int channels = mat.channels() == 1 ? 1 : 3;
  std::vector<double> values(static_cast<std::size_t>(mat.rows) * mat.cols * channels);
  std::size_t i = 0;
  for (int y = 0; y < mat.rows; ++y) {
    const std::uint8_t* row = mat.ptr<std::uint8_t>(y);
    for (int x = 0; x < mat.cols; ++x) {
      if (channels == 1) {
        values[i++] = row[x] / 255.0;
      } else {
        // OpenCV stores BGR.
        values[i++] = row[3 * x + 2] / 255.0;
        values[i++] = row[3 * x + 1] / 255.0;
        values[i++] = row[3 * x + 0] / 255.0;
      }
    }
  }
  return Image::from_values(mat.rows, mat.cols, channels, std::move(values));
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const int channels = image.channels();
  cv::Mat mat(image.height(), image.width(), channels == 1 ? CV_8UC1 : CV_8UC3);
  auto q = [](double v) { return static_cast<std::uint8_t>(std::lround(v * 255.0)); };
  for (int y = 0; y < image.height(); ++y) {
    std::uint8_t* row = mat.ptr<std::uint8_t>(y);
    for (int x = 0; x < image.width(); ++x) {
      if (channels == 1) {
        row[x] = q(image(y, x));
      } else {
        row[3 * x + 2] = q(image(y, x, 0));
        row[3 * x + 1] = q(image(y, x, 1));
        row[3 * x + 0] = q(image(y, x, 2));
      }
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat)) throw DataError("cannot write image: " + path.string());
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
  cv::Mat mat(mask.height(), mask.width(), CV_8UC1);
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) mat.at<std::uint8_t>(y, x) = mask(y, x) ? 255 : 0;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat)) throw DataError("cannot write mask: " + path.string());
}

Mask read_mask_png(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (mat.empty()) throw DataError("cannot read mask: " + path.string());
  Mask mask(mat.rows, mat.cols, 1);
  for (int y = 0; y < mat.rows; ++y)
    for (int x = 0; x < mat.cols; ++x) mask(y, x) = mat.at<std::uint8_t>(y, x) >= 128 ? 1 : 0;
  return mask;
}

Grid<double> read_pfm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open PFM: " + path.string());
  std::string magic;
  int width = 0, height = 0;
  double scale = 0.0;
  in >> magic >> width >> height >> scale;
  in.get();  // single whitespace before the raster
  if (!in || magic != "Pf") throw DataError("not a single-channel PFM: " + path.string());
  if (width <= 0 || height <= 0) throw DataError("invalid PFM extent: " + path.string());
  if (scale > 0) throw DataError("big-endian PFM is not supported: " + path.string());
  std::vector<float> raw(static_cast<std::size_t>(width) * height);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
  if (!in) throw DataError("truncated PFM: " + path.string());
  Grid<double> grid(height, width, 1);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      grid(y, x) = raw[static_cast<std::size_t>(height - 1 - y) * width + x];
  return grid;
}

void write_pfm(const std::filesystem::path& path, const Grid<double>& grid) {
  if (grid.channels() != 1) throw InvalidInput("write_pfm: single-channel grids only");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write PFM: " + path.string());
  out << "Pf\n" << grid.width() << ' ' << grid.height() << "\n-1\n";
  for (int y = grid.height() - 1; y >= 0; --y)
    for (int x = 0; x < grid.width(); ++x) {
      const float v = static_cast<float>(grid(y, x));
      out.write(reinterpret_cast<const char*>(&v), 4);
    }
}

namespace {
constexpr float kFloMagic = 202021.25f;
}

Grid<double> read_flo(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open flow file: " + path.string());
  float magic = 0;
  std::int32_t width = 0, height = 0;
  in.read(reinterpret_cast<char*>(&magic), 4);
  in.read(reinterpret_cast<char*>(&width), 4);
  in.read(reinterpret_cast<char*>(&height), 4);
  if (!in || magic != kFloMagic) throw DataError("bad .flo magic: " + path.string());
  if (width <= 0 || height <= 0) throw DataError("invalid .flo extent: " + path.string());
  std::vector<float> raw(static_cast<std::size_t>(width) * height * 2);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
  if (!in) throw DataError("truncated .flo: " + path.string());
  return Grid<double>(height, width, 2, std::vector<double>(raw.begin(), raw.end()));
}

void write_flo(const std::filesystem::path& path, const Grid<double>& flow) {
  if (flow.channels() != 2) throw InvalidInput("write_flo: flow must have 2 channels");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write flow file: " + path.string());
  const std::int32_t width = flow.width(), height = flow.height();
  out.write(reinterpret_cast<const char*>(&kFloMagic), 4);
  out.write(reinterpret_cast<const char*>(&width), 4);
  out.write(reinterpret_cast<const char*>(&height), 4);
  for (double v : flow.data()) {
    const float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), 4);
  }
}

}  // namespace refix
