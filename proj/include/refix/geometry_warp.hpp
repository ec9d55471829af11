#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "refix/grid.hpp"
#include "refix/image.hpp"

namespace refix {

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  void validate() const;
};

/// Motion of the target camera relative to the source camera: `rotation`
/// holds the target camera axes expressed in the source frame and
/// `translation` the target camera centre in source coordinates. A source
/// camera point X therefore maps to rotation^T (X - translation).
struct CameraPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  void validate() const;
  bool is_identity() const;
};

/// Metric depth per pixel. Pixels flagged in `valid` as 0 are ignored; every
/// other pixel must hold a finite positive depth.
struct DepthMap {
  Grid<double> depth;
  std::optional<Mask> valid;

  bool is_valid(int y, int x) const { return !valid || (*valid)(y, x) != 0; }
};

/// Signed horizontal shift in pixels.
struct DisparityMap {
  Grid<double> disparity;
};

/// Per-pixel (dx, dy) displacement from source coordinates toward target
/// coordinates. Pixels without a displacement hold kInvalid in both channels,
/// the same value Middlebury .flo files use for unknown flow.
struct FlowField {
  static constexpr double kInvalid = 1e10;
  static constexpr double kInvalidThreshold = 1e9;

  Grid<double> displacement;

  static FlowField zeros(int height, int width) { return {Grid<double>(height, width, 2, 0.0)}; }
  static FlowField uniform(int height, int width, double dx, double dy);

  int height() const noexcept { return displacement.height(); }
  int width() const noexcept { return displacement.width(); }
  double dx(int y, int x) const noexcept { return displacement(y, x, 0); }
  double dy(int y, int x) const noexcept { return displacement(y, x, 1); }
  bool is_valid(int y, int x) const noexcept {
    return std::abs(dx(y, x)) < kInvalidThreshold && std::abs(dy(y, x)) < kInvalidThreshold;
  }
};

struct DepthPoseTransform {
  DepthMap depth;
  CameraIntrinsics intrinsics;
  CameraPose relative_pose;
};
struct DisparityTransform {
  DisparityMap map;
};
struct FlowTransform {
  FlowField field;
};

/// How the reference view maps onto the degraded view.
using ViewTransform = std::variant<DepthPoseTransform, DisparityTransform, FlowTransform>;

/// Reprojects every valid source pixel into the target camera. Pixels with
/// invalid depth, or that land behind the target camera, get the sentinel.
FlowField project_points(const DepthMap& depth, const CameraIntrinsics& intrinsics,
                         const CameraPose& relative_pose);

/// dx = -disparity, dy = 0: positive disparity moves content to the left.
FlowField disparity_to_flow(const DisparityMap& disparity);

/// Forward-warping operator as an explicit sparse linear map from source
/// pixels to target pixels. Each target row holds softmax-normalised weights.
class SplatPlan {
 public:
  struct Entry {
    std::uint32_t source;  // linear pixel index y * width + x
    double weight;
  };

  /// `importance` is H x W; overlapping contributions at a target pixel are
  /// weighted by exp(importance / temperature) times the bilinear footprint.
  /// Source pixels whose `source_valid` entry is 0 do not splat.
  static SplatPlan build(const FlowField& flow, const Grid<double>& importance,
                         double temperature, const Mask* source_valid = nullptr);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }

  std::span<const Entry> contributions(int y, int x) const noexcept;
  bool receives_mass(int y, int x) const noexcept { return !contributions(y, x).empty(); }
  double total_weight(int y, int x) const noexcept;

  /// Warped image; pixels without mass are 0 and flagged invalid.
  Image apply(const Image& source) const;
  /// Vector-Jacobian product with respect to the source values.
  Grid<double> apply_transpose(const Grid<double>& grad_output) const;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint32_t> row_start_;
  std::vector<Entry> entries_;
};

Image softmax_splat(const Image& source, const FlowField& flow, const Grid<double>& importance,
                    double temperature = 1.0);

/// Bilinear gather: output(p) samples the source at p + flow(p).
class GatherPlan {
 public:
  using Entry = SplatPlan::Entry;

  static GatherPlan build(const FlowField& flow, int source_height, int source_width,
                          const Mask* source_valid = nullptr);

  std::span<const Entry> taps(int y, int x) const noexcept;
  bool is_valid(int y, int x) const noexcept { return valid_(y, x) != 0; }

  Image apply(const Image& source) const;
  Grid<double> apply_transpose(const Grid<double>& grad_output) const;

 private:
  int source_height_ = 0;
  int source_width_ = 0;
  Mask valid_;
  std::vector<std::uint32_t> row_start_;
  std::vector<Entry> entries_;
};

/// Samples outside the source bounds come back as 0 with valid = false.
Image backward_warp(const Image& source, const FlowField& flow);

/// External dense flow estimator (reference -> target). Any exception it
/// throws is reported as ExternalEstimatorError.
using FlowEstimator = std::function<FlowField(const Image& reference, const Image& target)>;

struct BlockMatchingOptions {
  int search_radius = 4;   // per pyramid level, in pixels of that level
  int block_radius = 3;    // SAD window is (2r+1)^2
  int min_level_size = 8;  // coarsest level keeps min(H, W) >= this
  int max_levels = 4;
};

/// Coarse-to-fine SAD block matching on luminance. Returns integer
/// displacements; ties go to the smallest displacement.
FlowField block_matching_flow(const Image& reference, const Image& target,
                              const BlockMatchingOptions& options = {});

/// Flow such that reference(p) ~ target(p + flow(p)). Uses `external` when
/// set, otherwise the built-in block matcher.
FlowField estimate_flow(const Image& reference, const Image& target,
                        const FlowEstimator& external = {});

struct PreAlignOptions {
  double temperature = 1.0;
  /// The degraded view, used by the flow variant to weight splats by
  /// brightness-constancy residual. Uniform importance when null.
  const Image* degraded_view = nullptr;
};

/// Warps the reference into the degraded view's frame via softmax splatting.
Image pre_align(const Image& reference, const ViewTransform& transform,
                const PreAlignOptions& options = {});

/// Size of the grid a transform is defined on.
std::pair<int, int> transform_extent(const ViewTransform& transform);

}  // namespace refix
