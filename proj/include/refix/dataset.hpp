#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "refix/geometry_warp.hpp"
#include "refix/image.hpp"

namespace refix {

using Pose34 = Eigen::Matrix<double, 3, 4>;

/// A scene directory:
///   frames/NNNNN.png        frames in order, NNNNN 0-based
///   depth/NNNNN.pfm         optional metric depth per frame
///   disparity/NNNNN.pfm     optional disparity from the reference to frame NNNNN
///   flow/NNNNN.flo          optional flow from the reference to frame NNNNN
///   pose.txt                optional: "fx fy cx cy", then one row-major 3x4
///                           world-to-camera matrix per frame
/// The reference is frame ceil(N / 2) (1-based).
struct Scene {
  std::string name;
  std::vector<Image> frames;
  std::vector<std::optional<Grid<double>>> depth;
  std::vector<std::optional<Grid<double>>> disparity;
  std::vector<std::optional<FlowField>> flow;
  std::optional<CameraIntrinsics> intrinsics;
  std::vector<Pose34> world_to_camera;

  int reference_index() const;  // 0-based
};

std::string frame_stem(int index);

Scene load_scene(const std::filesystem::path& dir);
void write_scene(const std::filesystem::path& dir, const Scene& scene);

/// One scene directory per non-empty, non-comment line, relative to the
/// manifest's directory unless absolute.
std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& manifest);

enum class WarpMode { geometry, disparity, flow };
WarpMode parse_warp_mode(const std::string& name);
std::string to_string(WarpMode mode);

/// Relative pose (in CameraPose convention) from the source camera to the
/// target camera, given both world-to-camera matrices.
CameraPose relative_pose(const Pose34& source_w2c, const Pose34& target_w2c);

/// Per-frame transforms from the reference view. In flow mode a frame without
/// a stored flow gets an empty entry (flow is estimated during curation).
/// Throws DataError when the mode needs data the scene lacks.
std::vector<std::optional<ViewTransform>> scene_transforms(const Scene& scene, WarpMode mode);

/// Reads one reference-to-view transform from disk:
///   flow       Middlebury .flo
///   disparity  single-channel .pfm
///   geometry   text file of `key = value` lines: depth (a .pfm path, relative
///              to the file), intrinsics "fx fy cx cy", rotation (9 numbers,
///              row-major) and translation (3 numbers), in CameraPose convention
ViewTransform load_view_transform(const std::filesystem::path& path, WarpMode mode);
void write_geometry_transform(const std::filesystem::path& path, const DepthPoseTransform& transform);

}  // namespace refix
