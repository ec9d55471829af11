#include "refix/synth.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <Eigen/Geometry>

#include "refix/errors.hpp"
#include "refix/rng.hpp"

namespace refix {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Grating {
  double kx, ky, phase, amplitude;
  std::array<double, 3> tint;
};

struct Shape {
  bool disc;
  double cx, cy, a, b, angle;
  std::array<double, 3> colour;
};

/// Texture in reference-pixel coordinates.
class Texture {
 public:
  Texture(Rng& rng, double extent) {
    for (double& c : base_) c = 0.25 + 0.5 * uniform01(rng);
    for (double& g : gradient_) g = (uniform01(rng) - 0.5) * 0.4 / extent;
    for (int i = 0; i < 6; ++i) {
      const double f = 0.15 + 0.9 * uniform01(rng), th = kPi * uniform01(rng);
      Grating g{f * std::cos(th), f * std::sin(th), 2 * kPi * uniform01(rng), 0.04 + 0.08 * uniform01(rng), {}};
      for (double& t : g.tint) t = 0.3 + 0.7 * uniform01(rng);
      gratings_.push_back(g);
    }
    for (int i = 0; i < 14; ++i) {
      Shape s{uniform01(rng) < 0.5, (uniform01(rng) * 1.6 - 0.3) * extent, (uniform01(rng) * 1.6 - 0.3) * extent,
              3 + 10 * uniform01(rng), 3 + 10 * uniform01(rng), kPi * uniform01(rng), {}};
      for (double& c : s.colour) c = uniform01(rng);
      shapes_.push_back(s);
    }
  }

  std::array<double, 3> operator()(double u, double v) const {
    std::array<double, 3> c{};
    for (int k = 0; k < 3; ++k) c[k] = base_[k] + gradient_[k] * (u - v);
    for (const auto& s : shapes_) {
      const double du = u - s.cx, dv = v - s.cy;
      const double ru = std::cos(s.angle) * du + std::sin(s.angle) * dv;
      const double rv = -std::sin(s.angle) * du + std::cos(s.angle) * dv;
      const bool inside = s.disc ? (ru * ru) / (s.a * s.a) + (rv * rv) / (s.b * s.b) <= 1.0
                                 : std::abs(ru) <= s.a && std::abs(rv) <= s.b;
      if (inside) c = s.colour;
    }
    for (const auto& g : gratings_) {
      const double w = g.amplitude * std::sin(g.kx * u + g.ky * v + g.phase);
      for (int k = 0; k < 3; ++k) c[k] += w * g.tint[k];
    }
    for (double& x : c) x = std::clamp(x, 0.0, 1.0);
    return c;
  }

 private:
  std::array<double, 3> base_{}, gradient_{};
  std::vector<Grating> gratings_;
  std::vector<Shape> shapes_;
};

}  // namespace

Scene make_synthetic_scene(std::uint64_t seed, int index, const SynthOptions& o) {
  if (o.frames < 1 || o.height < 1 || o.width < 1 || !(o.focal > 0) || !(o.plane_depth > 0) ||
      o.supersample < 1)
    throw InvalidInput("synthetic scene: invalid options");
  Rng rng = make_rng(seed, "synth", static_cast<std::uint64_t>(index));
  const Texture texture(rng, std::max(o.height, o.width));
  const double z0 = o.plane_depth, f = o.focal;
  const CameraIntrinsics k{f, f, (o.width - 1) / 2.0, (o.height - 1) / 2.0};

  // Per-step camera motion; the reference camera is the world frame.
  const double sx = (2 * uniform01(rng) - 1) * o.max_shift_px * z0 / f;
  const double sy = (2 * uniform01(rng) - 1) * o.max_shift_px * z0 / f;
  const double sz = (2 * uniform01(rng) - 1) * o.max_dolly;
  const double roll = (2 * uniform01(rng) - 1) * o.max_roll_deg * kPi / 180.0;

  Scene s;
  char name[32];
  std::snprintf(name, sizeof name, "scene_%03d", index);
  s.name = name;
  s.intrinsics = k;
  const int ref = (o.frames + 1) / 2 - 1;
  for (int i = 0; i < o.frames; ++i) {
    const double step = i - ref;
    const Eigen::Matrix3d r_w2c = Eigen::AngleAxisd(step * roll, Eigen::Vector3d::UnitZ()).toRotationMatrix();
    const Eigen::Vector3d centre(step * sx, step * sy, step * sz);
    Pose34 w2c;
    w2c.leftCols<3>() = r_w2c;
    w2c.col(3) = -r_w2c * centre;
    s.world_to_camera.push_back(w2c);

    const int ss = o.supersample;
    Image frame(o.height, o.width, 3);
    Grid<double> depth(o.height, o.width, 1, 0.0);
    for (int y = 0; y < o.height; ++y)
      for (int x = 0; x < o.width; ++x) {
        std::array<double, 3> acc{};
        for (int sy_ = 0; sy_ < ss; ++sy_)
          for (int sx_ = 0; sx_ < ss; ++sx_) {
            const double u = x + (sx_ + 0.5) / ss - 0.5, v = y + (sy_ + 0.5) / ss - 0.5;
            const Eigen::Vector3d dir = r_w2c.transpose() * Eigen::Vector3d((u - k.cx) / f, (v - k.cy) / f, 1.0);
            const double t = (z0 - centre.z()) / dir.z();
            const Eigen::Vector3d p = centre + t * dir;
            const auto c = texture(f * p.x() / z0 + k.cx, f * p.y() / z0 + k.cy);
            for (int ch = 0; ch < 3; ++ch) acc[ch] += c[ch];
          }
        for (int ch = 0; ch < 3; ++ch) frame.set(y, x, ch, acc[ch] / (ss * ss));
        const Eigen::Vector3d dir = r_w2c.transpose() * Eigen::Vector3d((x - k.cx) / f, (y - k.cy) / f, 1.0);
        depth(y, x) = (z0 - centre.z()) / dir.z();
      }
    s.frames.push_back(std::move(frame));
    s.depth.emplace_back(std::move(depth));
  }

  // Exact flow from each reference pixel into every frame.
  s.flow.resize(o.frames);
  s.disparity.resize(o.frames);
  for (int i = 0; i < o.frames; ++i) {
    FlowField fl = FlowField::zeros(o.height, o.width);
    const Eigen::Matrix3d r = s.world_to_camera[i].leftCols<3>();
    const Eigen::Vector3d t = s.world_to_camera[i].col(3);
    for (int y = 0; y < o.height; ++y)
      for (int x = 0; x < o.width; ++x) {
        const Eigen::Vector3d p((x - k.cx) * z0 / f, (y - k.cy) * z0 / f, z0);
        const Eigen::Vector3d q = r * p + t;
        fl.displacement(y, x, 0) = f * q.x() / q.z() + k.cx - x;
        fl.displacement(y, x, 1) = f * q.y() / q.z() + k.cy - y;
      }
    s.flow[i] = std::move(fl);
  }
  return s;
}

std::vector<std::filesystem::path> write_synthetic_dataset(const std::filesystem::path& root,
                                                           int count, std::uint64_t seed,
                                                           const SynthOptions& options) {
  if (count < 1) throw InvalidInput("synthetic dataset: count must be >= 1");
  std::filesystem::create_directories(root);
  std::vector<std::filesystem::path> dirs;
  std::ofstream manifest(root / "scenes.txt");
  for (int i = 0; i < count; ++i) {
    const Scene s = make_synthetic_scene(seed, i, options);
    write_scene(root / s.name, s);
    manifest << s.name << '\n';
    dirs.push_back(root / s.name);
  }
  if (!manifest) throw DataError("cannot write " + (root / "scenes.txt").string());
  return dirs;
}

}  // namespace refix
