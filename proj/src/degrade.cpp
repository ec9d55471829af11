#include "refix/degrade.hpp"

#include <cmath>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "refix/errors.hpp"
#include "refix/geometry_warp.hpp"
#include "refix/rng.hpp"

namespace refix {

std::vector<Image> Degrader::operator()(const std::vector<Image>& frames) const {
  std::vector<Image> out = apply(frames);
  if (out.size() != frames.size())
    throw InvalidInput("degrader '" + name + "' changed the sequence length");
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!out[i].same_shape(frames[i]))
      throw InvalidInput("degrader '" + name + "' changed a frame's extent");
  return out;
}

namespace {

cv::Mat to_mat(const Image& image) {
  cv::Mat m(image.height(), image.width(), CV_64FC(image.channels()));
  std::copy(image.data().begin(), image.data().end(), m.ptr<double>());
  return m;
}

Image from_mat(const cv::Mat& m) {
  std::vector<double> v(m.ptr<double>(), m.ptr<double>() + m.total() * m.channels());
  return Image::from_values(m.rows, m.cols, m.channels(), std::move(v));
}

std::vector<std::string> split(const std::string& spec) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  return parts;
}

double number(const std::vector<std::string>& parts, std::size_t i, double fallback,
              const std::string& spec) {
  if (parts.size() <= i) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(parts[i], &used);
    if (used != parts[i].size() || !std::isfinite(v)) throw std::invalid_argument(parts[i]);
    return v;
  } catch (const std::exception&) {
    throw InvalidInput("degrader '" + spec + "': bad parameter '" + parts[i] + "'");
  }
}

template <typename F>
Degrader per_frame(std::string name, F f) {
  return {std::move(name), [f](const std::vector<Image>& frames) {
            std::vector<Image> out;
            out.reserve(frames.size());
            for (std::size_t i = 0; i < frames.size(); ++i) out.push_back(f(frames[i], i));
            return out;
          }};
}

Image strip_mask(Image image) {
  image.clear_mask();
  return image;
}

}  // namespace

Image gaussian_blur(const Image& image, double sigma) {
  if (!(sigma > 0)) return strip_mask(image);
  cv::Mat out;
  cv::GaussianBlur(to_mat(image), out, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT_101);
  return from_mat(out);
}

Image resample_down_up(const Image& image, int factor) {
  if (factor < 1) throw InvalidInput("spatial degrader: factor must be >= 1");
  if (factor == 1) return strip_mask(image);
  const int h = std::max(1, image.height() / factor), w = std::max(1, image.width() / factor);
  cv::Mat small, big;
  cv::resize(to_mat(image), small, cv::Size(w, h), 0, 0, cv::INTER_AREA);
  cv::resize(small, big, cv::Size(image.width(), image.height()), 0, 0, cv::INTER_CUBIC);
  return from_mat(big);
}

Image dct_quantize(const Image& image, double step) {
  if (!(step > 0)) throw InvalidInput("blocky degrader: step must be positive");
  Image out(image.height(), image.width(), image.channels());
  cv::Mat block(8, 8, CV_64F), coeffs;
  for (int c = 0; c < image.channels(); ++c)
    for (int by = 0; by < image.height(); by += 8)
      for (int bx = 0; bx < image.width(); bx += 8) {
        // Partial edge blocks are padded by edge replication.
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x)
            block.at<double>(y, x) = image(std::min(by + y, image.height() - 1),
                                           std::min(bx + x, image.width() - 1), c);
        cv::dct(block, coeffs);
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) {
            // Coarser steps for higher frequencies, as in JPEG tables.
            const double q = step * (1.0 + 0.5 * (x + y));
            coeffs.at<double>(y, x) = q * std::round(coeffs.at<double>(y, x) / q);
          }
        cv::idct(coeffs, block);
        for (int y = 0; y < 8 && by + y < image.height(); ++y)
          for (int x = 0; x < 8 && bx + x < image.width(); ++x) out.set(by + y, bx + x, c, block.at<double>(y, x));
      }
  return out;
}

Degrader make_degrader(const std::string& spec, std::uint64_t seed) {
  const auto parts = split(spec);
  if (parts.empty()) throw InvalidInput("empty degrader name");
  const std::string& kind = parts[0];
  if (kind == "identity") return per_frame(spec, [](const Image& f, std::size_t) { return strip_mask(f); });
  if (kind == "blur_noise") {
    const double sigma = number(parts, 1, 1.2, spec), noise = number(parts, 2, 0.02, spec);
    return per_frame(spec, [=](const Image& f, std::size_t i) {
      Image b = gaussian_blur(f, sigma);
      Rng rng = make_rng(seed, "degrade.blur_noise", i);
      std::vector<double> v(b.data().begin(), b.data().end());
      for (double& x : v) x += noise * normal01(rng);
      return Image::from_values(b.height(), b.width(), b.channels(), std::move(v));
    });
  }
  if (kind == "spatial") {
    const int k = static_cast<int>(number(parts, 1, 2, spec));
    if (k < 1) throw InvalidInput("spatial degrader: factor must be >= 1");
    return per_frame(spec, [=](const Image& f, std::size_t) { return resample_down_up(f, k); });
  }
  if (kind == "blocky") {
    const double step = number(parts, 1, 0.15, spec);
    if (!(step > 0)) throw InvalidInput("blocky degrader: step must be positive");
    return per_frame(spec, [=](const Image& f, std::size_t) { return dct_quantize(f, step); });
  }
  if (kind == "structured_noise") {
    const double amp = number(parts, 1, 0.05, spec);
    return per_frame(spec, [=](const Image& f, std::size_t i) {
      Rng rng = make_rng(seed, "degrade.structured_noise", i);
      const double fx = 0.05 + 0.3 * uniform01(rng), fy = 0.05 + 0.3 * uniform01(rng);
      const double phase = 6.283185307179586 * uniform01(rng);
      std::vector<double> band(f.height());
      for (double& b : band) b = 0.5 * amp * normal01(rng);
      Image out(f.height(), f.width(), f.channels());
      for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x) {
          const double n = amp * std::sin(fx * x + fy * y + phase) + band[y];
          for (int c = 0; c < f.channels(); ++c) out.set(y, x, c, f(y, x, c) + n);
        }
      return out;
    });
  }
  if (kind == "temporal") {
    const int k = static_cast<int>(number(parts, 1, 1, spec));
    if (k < 0) throw InvalidInput("temporal degrader: stride must be >= 0");
    return {spec, [k](const std::vector<Image>& frames) {
              std::vector<Image> out;
              const int n = static_cast<int>(frames.size());
              for (int i = 0; i < n; ++i) {
                int j = i + k < n ? i + k : i - k;
                if (k == 0 || j < 0) {
                  out.push_back(strip_mask(frames[i]));
                  continue;
                }
                // Rebuild frame i from frame j: holes keep frame i's content.
                const FlowField flow = estimate_flow(frames[j], frames[i]);
                Grid<double> importance(flow.height(), flow.width(), 1, 0.0);
                const Image warped = softmax_splat(frames[j], flow, importance);
                Image filled(frames[i].height(), frames[i].width(), frames[i].channels());
                for (int y = 0; y < filled.height(); ++y)
                  for (int x = 0; x < filled.width(); ++x)
                    for (int c = 0; c < filled.channels(); ++c)
                      filled.set(y, x, c, warped.is_valid(y, x) ? warped(y, x, c) : frames[i](y, x, c));
                out.push_back(std::move(filled));
              }
              return out;
            }};
  }
  throw InvalidInput("unknown degrader '" + spec +
                     "' (expected identity, blur_noise, spatial:k, blocky, structured_noise, temporal:k)");
}

}  // namespace refix
