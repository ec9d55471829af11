#include "refix/geometry_warp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "refix/errors.hpp"

namespace refix {

void CameraIntrinsics::validate() const {
  if (!(std::isfinite(fx) && std::isfinite(fy) && fx > 0 && fy > 0))
    throw InvalidInput("intrinsics: focal lengths must be finite and positive");
  if (!std::isfinite(cx) || !std::isfinite(cy))
    throw InvalidInput("intrinsics: principal point must be finite");
}

void CameraPose::validate() const {
  if (!rotation.allFinite() || !translation.allFinite())
    throw InvalidInput("pose: non-finite entries");
  if ((rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6)
    throw InvalidInput("pose: rotation is not orthonormal");
  if (std::abs(rotation.determinant() - 1.0) > 1e-6)
    throw InvalidInput("pose: rotation determinant is not +1");
}

bool CameraPose::is_identity() const {
  return rotation == Eigen::Matrix3d::Identity() && translation == Eigen::Vector3d::Zero();
}

FlowField FlowField::uniform(int height, int width, double dx, double dy) {
  FlowField f = zeros(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      f.displacement(y, x, 0) = dx;
      f.displacement(y, x, 1) = dy;
    }
  return f;
}

FlowField project_points(const DepthMap& depth, const CameraIntrinsics& intrinsics,
                         const CameraPose& relative_pose) {
  intrinsics.validate();
  relative_pose.validate();
  const int h = depth.depth.height(), w = depth.depth.width();
  if (depth.valid && !depth.valid->same_extent(depth.depth))
    throw InvalidInput("project_points: depth mask extent mismatch");

  FlowField flow = FlowField::zeros(h, w);
  const bool identity = relative_pose.is_identity();
  const Eigen::Matrix3d world_to_target = relative_pose.rotation.transpose();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!depth.is_valid(y, x)) {
        flow.displacement(y, x, 0) = FlowField::kInvalid;
        flow.displacement(y, x, 1) = FlowField::kInvalid;
        continue;
      }
      const double z = depth.depth(y, x);
      if (!std::isfinite(z) || z <= 0.0)
        throw InvalidInput("project_points: non-positive depth at valid pixel (" +
                           std::to_string(x) + ", " + std::to_string(y) + ")");
      if (identity) continue;
      const Eigen::Vector3d source{z * (x - intrinsics.cx) / intrinsics.fx,
                                   z * (y - intrinsics.cy) / intrinsics.fy, z};
      const Eigen::Vector3d target = world_to_target * (source - relative_pose.translation);
      if (target.z() <= 0.0) {
        flow.displacement(y, x, 0) = FlowField::kInvalid;
        flow.displacement(y, x, 1) = FlowField::kInvalid;
        continue;
      }
      const double u = intrinsics.fx * target.x() / target.z() + intrinsics.cx;
      const double v = intrinsics.fy * target.y() / target.z() + intrinsics.cy;
      flow.displacement(y, x, 0) = u - x;
      flow.displacement(y, x, 1) = v - y;
    }
  }
  return flow;
}

FlowField disparity_to_flow(const DisparityMap& disparity) {
  const Grid<double>& d = disparity.disparity;
  FlowField flow = FlowField::zeros(d.height(), d.width());
  for (int y = 0; y < d.height(); ++y)
    for (int x = 0; x < d.width(); ++x) {
      if (!std::isfinite(d(y, x))) throw InvalidInput("disparity_to_flow: non-finite disparity");
      flow.displacement(y, x, 0) = -d(y, x);
    }
  return flow;
}

namespace {

void check_flow_finite(const FlowField& flow) {
  for (double v : flow.displacement.data())
    if (!std::isfinite(v)) throw InvalidInput("flow contains non-finite values");
}

struct Corner {
  int y, x;
  double weight;
};

// Bilinear footprint of a point; corners with exactly zero weight are dropped
// so integer positions touch a single pixel.
int bilinear_corners(double py, double px, Corner (&out)[4]) {
  const double fy0 = std::floor(py), fx0 = std::floor(px);
  const int y0 = static_cast<int>(fy0), x0 = static_cast<int>(fx0);
  const double ty = py - fy0, tx = px - fx0;
  const Corner all[4] = {{y0, x0, (1.0 - ty) * (1.0 - tx)},
                         {y0, x0 + 1, (1.0 - ty) * tx},
                         {y0 + 1, x0, ty * (1.0 - tx)},
                         {y0 + 1, x0 + 1, ty * tx}};
  int n = 0;
  for (const Corner& c : all)
    if (c.weight > 0.0) out[n++] = c;
  return n;
}

}  // namespace

SplatPlan SplatPlan::build(const FlowField& flow, const Grid<double>& importance,
                           double temperature, const Mask* source_valid) {
  const int h = flow.height(), w = flow.width();
  if (!importance.same_extent(flow.displacement) || importance.channels() != 1)
    throw InvalidInput("softmax_splat: importance extent differs from flow");
  if (source_valid && !source_valid->same_extent(flow.displacement))
    throw InvalidInput("softmax_splat: source mask extent differs from flow");
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw InvalidInput("softmax_splat: temperature must be positive");
  for (double v : importance.data())
    if (std::isnan(v)) throw InvalidInput("softmax_splat: NaN in importance");
  check_flow_finite(flow);

  struct Raw {
    std::uint32_t target, source;
    double bilinear, logit;
  };
  std::vector<Raw> raw;
  raw.reserve(static_cast<std::size_t>(h) * w * 4);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!flow.is_valid(y, x)) continue;
      if (source_valid && (*source_valid)(y, x) == 0) continue;
      Corner corners[4];
      const int n = bilinear_corners(y + flow.dy(y, x), x + flow.dx(y, x), corners);
      const double logit = importance(y, x) / temperature;
      for (int i = 0; i < n; ++i) {
        const Corner& c = corners[i];
        if (c.y < 0 || c.y >= h || c.x < 0 || c.x >= w) continue;
        raw.push_back({static_cast<std::uint32_t>(c.y * w + c.x),
                       static_cast<std::uint32_t>(y * w + x), c.weight, logit});
      }
    }
  }

  SplatPlan plan;
  plan.height_ = h;
  plan.width_ = w;
  plan.row_start_.assign(static_cast<std::size_t>(h) * w + 1, 0);
  for (const Raw& r : raw) ++plan.row_start_[r.target + 1];
  for (std::size_t i = 1; i < plan.row_start_.size(); ++i)
    plan.row_start_[i] += plan.row_start_[i - 1];
  plan.entries_.resize(raw.size());
  std::vector<double> logits(raw.size());
  {
    std::vector<std::uint32_t> cursor(plan.row_start_.begin(), plan.row_start_.end() - 1);
    for (const Raw& r : raw) {
      const std::uint32_t slot = cursor[r.target]++;
      plan.entries_[slot] = {r.source, r.bilinear};
      logits[slot] = r.logit;
    }
  }
  // Softmax per target pixel, shifted by the local maximum so no receiving
  // pixel underflows to zero mass.
  for (std::size_t t = 0; t + 1 < plan.row_start_.size(); ++t) {
    const std::uint32_t begin = plan.row_start_[t], end = plan.row_start_[t + 1];
    if (begin == end) continue;
    double peak = -std::numeric_limits<double>::infinity();
    for (std::uint32_t i = begin; i < end; ++i) peak = std::max(peak, logits[i]);
    double total = 0.0;
    for (std::uint32_t i = begin; i < end; ++i) {
      plan.entries_[i].weight *= std::exp(logits[i] - peak);
      total += plan.entries_[i].weight;
    }
    for (std::uint32_t i = begin; i < end; ++i) plan.entries_[i].weight /= total;
  }
  return plan;
}

std::span<const SplatPlan::Entry> SplatPlan::contributions(int y, int x) const noexcept {
  const std::size_t t = static_cast<std::size_t>(y) * width_ + x;
  return {entries_.data() + row_start_[t], entries_.data() + row_start_[t + 1]};
}

double SplatPlan::total_weight(int y, int x) const noexcept {
  double total = 0.0;
  for (const Entry& e : contributions(y, x)) total += e.weight;
  return total;
}

Image SplatPlan::apply(const Image& source) const {
  if (source.height() != height_ || source.width() != width_)
    throw InvalidInput("softmax_splat: source extent differs from flow");
  const int channels = source.channels();
  std::vector<double> values(static_cast<std::size_t>(height_) * width_ * channels, 0.0);
  Mask valid(height_, width_, 1, 0);
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) {
      const auto entries = contributions(y, x);
      if (entries.empty()) continue;
      valid(y, x) = 1;
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (const Entry& e : entries) acc += e.weight * source.data()[e.source * channels + c];
        values[(static_cast<std::size_t>(y) * width_ + x) * channels + c] = acc;
      }
    }
  }
  Image out = Image::from_values(height_, width_, channels, std::move(values));
  out.set_mask(std::move(valid));
  return out;
}

Grid<double> SplatPlan::apply_transpose(const Grid<double>& grad_output) const {
  if (!grad_output.same_extent(height_, width_))
    throw InvalidInput("softmax_splat: gradient extent mismatch");
  const int channels = grad_output.channels();
  Grid<double> grad(height_, width_, channels, 0.0);
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width_; ++x)
      for (const Entry& e : contributions(y, x))
        for (int c = 0; c < channels; ++c)
          grad.data()[e.source * channels + c] += e.weight * grad_output(y, x, c);
  return grad;
}

Image softmax_splat(const Image& source, const FlowField& flow, const Grid<double>& importance,
                    double temperature) {
  if (source.height() != flow.height() || source.width() != flow.width())
    throw InvalidInput("softmax_splat: source extent differs from flow");
  const Mask* mask = source.has_mask() ? &*source.mask() : nullptr;
  return SplatPlan::build(flow, importance, temperature, mask).apply(source);
}

GatherPlan GatherPlan::build(const FlowField& flow, int source_height, int source_width,
                             const Mask* source_valid) {
  check_flow_finite(flow);
  const int h = flow.height(), w = flow.width();
  GatherPlan plan;
  plan.source_height_ = source_height;
  plan.source_width_ = source_width;
  plan.valid_ = Mask(h, w, 1, 0);
  plan.row_start_.assign(static_cast<std::size_t>(h) * w + 1, 0);
  plan.entries_.reserve(static_cast<std::size_t>(h) * w * 4);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t t = static_cast<std::size_t>(y) * w + x;
      plan.row_start_[t + 1] = plan.row_start_[t];
      if (!flow.is_valid(y, x)) continue;
      const double py = y + flow.dy(y, x), px = x + flow.dx(y, x);
      if (py < 0.0 || px < 0.0 || py > source_height - 1 || px > source_width - 1) continue;
      Corner corners[4];
      const int n = bilinear_corners(py, px, corners);
      bool ok = true;
      for (int i = 0; i < n; ++i)
        if (source_valid && (*source_valid)(corners[i].y, corners[i].x) == 0) ok = false;
      if (!ok) continue;
      for (int i = 0; i < n; ++i)
        plan.entries_.push_back(
            {static_cast<std::uint32_t>(corners[i].y * source_width + corners[i].x),
             corners[i].weight});
      plan.row_start_[t + 1] = static_cast<std::uint32_t>(plan.entries_.size());
      plan.valid_(y, x) = 1;
    }
  }
  return plan;
}

std::span<const GatherPlan::Entry> GatherPlan::taps(int y, int x) const noexcept {
  const std::size_t t = static_cast<std::size_t>(y) * valid_.width() + x;
  return {entries_.data() + row_start_[t], entries_.data() + row_start_[t + 1]};
}

Image GatherPlan::apply(const Image& source) const {
  if (source.height() != source_height_ || source.width() != source_width_)
    throw InvalidInput("backward_warp: source extent mismatch");
  const int h = valid_.height(), w = valid_.width(), channels = source.channels();
  std::vector<double> values(static_cast<std::size_t>(h) * w * channels, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (const Entry& e : taps(y, x)) acc += e.weight * source.data()[e.source * channels + c];
        values[(static_cast<std::size_t>(y) * w + x) * channels + c] = acc;
      }
  Image out = Image::from_values(h, w, channels, std::move(values));
  out.set_mask(valid_);
  return out;
}

Grid<double> GatherPlan::apply_transpose(const Grid<double>& grad_output) const {
  if (!grad_output.same_extent(valid_)) throw InvalidInput("backward_warp: gradient extent mismatch");
  const int channels = grad_output.channels();
  Grid<double> grad(source_height_, source_width_, channels, 0.0);
  for (int y = 0; y < valid_.height(); ++y)
    for (int x = 0; x < valid_.width(); ++x)
      for (const Entry& e : taps(y, x))
        for (int c = 0; c < channels; ++c)
          grad.data()[e.source * channels + c] += e.weight * grad_output(y, x, c);
  return grad;
}

Image backward_warp(const Image& source, const FlowField& flow) {
  if (source.height() != flow.height() || source.width() != flow.width())
    throw InvalidInput("backward_warp: source extent differs from flow");
  const Mask* mask = source.has_mask() ? &*source.mask() : nullptr;
  return GatherPlan::build(flow, source.height(), source.width(), mask).apply(source);
}

// ---------------------------------------------------------------------------
// Block matching

namespace {

Grid<double> downsample_half(const Grid<double>& g) {
  Grid<double> out(g.height() / 2, g.width() / 2, 1);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      out(y, x) = 0.25 * (g(2 * y, 2 * x) + g(2 * y, 2 * x + 1) + g(2 * y + 1, 2 * x) +
                          g(2 * y + 1, 2 * x + 1));
  return out;
}

double sample_clamped(const Grid<double>& g, int y, int x) {
  y = std::clamp(y, 0, g.height() - 1);
  x = std::clamp(x, 0, g.width() - 1);
  return g(y, x);
}

// Coarse flow -> finer level: bilinear in position, values doubled.
Grid<double> upsample_flow(const Grid<double>& coarse, int height, int width) {
  Grid<double> fine(height, width, 2, 0.0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double cy = std::clamp((y + 0.5) / 2.0 - 0.5, 0.0, coarse.height() - 1.0);
      const double cx = std::clamp((x + 0.5) / 2.0 - 0.5, 0.0, coarse.width() - 1.0);
      const int y0 = static_cast<int>(cy), x0 = static_cast<int>(cx);
      const int y1 = std::min(y0 + 1, coarse.height() - 1), x1 = std::min(x0 + 1, coarse.width() - 1);
      const double ty = cy - y0, tx = cx - x0;
      for (int c = 0; c < 2; ++c) {
        const double v = (1 - ty) * ((1 - tx) * coarse(y0, x0, c) + tx * coarse(y0, x1, c)) +
                         ty * ((1 - tx) * coarse(y1, x0, c) + tx * coarse(y1, x1, c));
        fine(y, x, c) = 2.0 * v;
      }
    }
  return fine;
}

void match_level(const Grid<double>& ref, const Grid<double>& tgt, Grid<double>& flow,
                 const BlockMatchingOptions& options) {
  const int r = options.search_radius, b = options.block_radius;
  for (int y = 0; y < ref.height(); ++y) {
    for (int x = 0; x < ref.width(); ++x) {
      const int px = static_cast<int>(std::lround(flow(y, x, 0)));
      const int py = static_cast<int>(std::lround(flow(y, x, 1)));
      double best_cost = std::numeric_limits<double>::infinity();
      long best_norm = std::numeric_limits<long>::max();
      int best_dx = px, best_dy = py;
      // Candidates visited in (dy, dx) lexicographic order; a strictly lower
      // cost wins, equal costs go to the smaller |d|^2.
      for (int dy = py - r; dy <= py + r; ++dy) {
        for (int dx = px - r; dx <= px + r; ++dx) {
          double cost = 0.0;
          for (int wy = -b; wy <= b; ++wy)
            for (int wx = -b; wx <= b; ++wx)
              cost += std::abs(sample_clamped(ref, y + wy, x + wx) -
                               sample_clamped(tgt, y + dy + wy, x + dx + wx));
          const long norm = static_cast<long>(dx) * dx + static_cast<long>(dy) * dy;
          if (cost < best_cost || (cost == best_cost && norm < best_norm)) {
            best_cost = cost;
            best_norm = norm;
            best_dx = dx;
            best_dy = dy;
          }
        }
      }
      flow(y, x, 0) = best_dx;
      flow(y, x, 1) = best_dy;
    }
  }
}

}  // namespace

FlowField block_matching_flow(const Image& reference, const Image& target,
                              const BlockMatchingOptions& options) {
  if (!reference.same_shape(target))
    throw InvalidInput("estimate_flow: reference and target dimensions differ");
  if (options.search_radius < 0 || options.block_radius < 0 || options.max_levels < 1)
    throw InvalidInput("estimate_flow: invalid block matching options");
  std::vector<Grid<double>> ref_pyr{luminance(reference)};
  std::vector<Grid<double>> tgt_pyr{luminance(target)};
  while (static_cast<int>(ref_pyr.size()) < options.max_levels &&
         std::min(ref_pyr.back().height(), ref_pyr.back().width()) / 2 >= options.min_level_size) {
    ref_pyr.push_back(downsample_half(ref_pyr.back()));
    tgt_pyr.push_back(downsample_half(tgt_pyr.back()));
  }
  Grid<double> flow(ref_pyr.back().height(), ref_pyr.back().width(), 2, 0.0);
  for (int level = static_cast<int>(ref_pyr.size()) - 1; level >= 0; --level) {
    const auto& ref = ref_pyr[level];
    if (!flow.same_extent(ref)) flow = upsample_flow(flow, ref.height(), ref.width());
    match_level(ref, tgt_pyr[level], flow, options);
  }
  return {std::move(flow)};
}

FlowField estimate_flow(const Image& reference, const Image& target,
                        const FlowEstimator& external) {
  if (!reference.same_shape(target))
    throw InvalidInput("estimate_flow: reference and target dimensions differ");
  if (!external) return block_matching_flow(reference, target);
  FlowField flow;
  try {
    flow = external(reference, target);
  } catch (const std::exception& e) {
    throw ExternalEstimatorError(std::string("external flow estimator failed: ") + e.what());
  }
  if (flow.height() != reference.height() || flow.width() != reference.width() ||
      flow.displacement.channels() != 2)
    throw ExternalEstimatorError("external flow estimator returned a mismatched field");
  return flow;
}

// ---------------------------------------------------------------------------
// Pre-alignment

std::pair<int, int> transform_extent(const ViewTransform& transform) {
  return std::visit(
      [](const auto& t) -> std::pair<int, int> {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, DepthPoseTransform>)
          return {t.depth.depth.height(), t.depth.depth.width()};
        else if constexpr (std::is_same_v<T, DisparityTransform>)
          return {t.map.disparity.height(), t.map.disparity.width()};
        else
          return {t.field.height(), t.field.width()};
      },
      transform);
}

namespace {

Grid<double> photometric_importance(const Image& reference, const FlowField& flow,
                                    const Image& degraded) {
  if (!degraded.same_shape(reference))
    throw InvalidInput("pre_align: degraded view shape differs from reference");
  const Image sampled = backward_warp(degraded, flow);
  Grid<double> importance(reference.height(), reference.width(), 1, 0.0);
  for (int y = 0; y < reference.height(); ++y)
    for (int x = 0; x < reference.width(); ++x) {
      double residual = 1.0;
      if (sampled.is_valid(y, x)) {
        residual = 0.0;
        for (int c = 0; c < reference.channels(); ++c)
          residual += std::abs(reference(y, x, c) - sampled(y, x, c));
        residual /= reference.channels();
      }
      importance(y, x) = -residual;
    }
  return importance;
}

}  // namespace

Image pre_align(const Image& reference, const ViewTransform& transform,
                const PreAlignOptions& options) {
  const auto [th, tw] = transform_extent(transform);
  if (th != reference.height() || tw != reference.width())
    throw InvalidInput("pre_align: transform extent differs from reference");
  const int h = reference.height(), w = reference.width();

  return std::visit(
      [&](const auto& t) -> Image {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, DepthPoseTransform>) {
          const FlowField flow = project_points(t.depth, t.intrinsics, t.relative_pose);
          Grid<double> importance(h, w, 1, 0.0);
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
              if (flow.is_valid(y, x)) importance(y, x) = -t.depth.depth(y, x);
          return softmax_splat(reference, flow, importance, options.temperature);
        } else if constexpr (std::is_same_v<T, DisparityTransform>) {
          const FlowField flow = disparity_to_flow(t.map);
          Grid<double> importance(h, w, 1, 0.0);
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) importance(y, x) = std::abs(t.map.disparity(y, x));
          return softmax_splat(reference, flow, importance, options.temperature);
        } else {
          const Grid<double> importance =
              options.degraded_view ? photometric_importance(reference, t.field, *options.degraded_view)
                                    : Grid<double>(h, w, 1, 0.0);
          return softmax_splat(reference, t.field, importance, options.temperature);
        }
      },
      transform);
}

}  // namespace refix
