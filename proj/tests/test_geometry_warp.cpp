#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "refix/degrade.hpp"
#include "refix/errors.hpp"
#include "refix/geometry_warp.hpp"
#include "refix/metrics.hpp"
#include "test_support.hpp"

using namespace refix;
using namespace refix::testing;

namespace {

Grid<double> constant_grid(int h, int w, double v) { return Grid<double>(h, w, 1, v); }

Image smooth_texture(int h, int w, std::uint64_t seed) {
  Rng rng = make_rng(seed, "texture");
  double f[6];
  for (double& v : f) v = 0.2 + 0.6 * uniform01(rng);
  Image img(h, w, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.set(y, x, c,
                0.5 + 0.25 * std::sin(f[c] * x + f[c + 3] * y + c) + 0.2 * std::cos(0.7 * f[c] * y - 0.3 * x));
  return img;
}

CameraPose small_pose(Rng& rng) {
  const double a = 0.05 * (2 * uniform01(rng) - 1), b = 0.05 * (2 * uniform01(rng) - 1);
  Eigen::Matrix3d rx, ry;
  rx << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
  ry << std::cos(b), 0, std::sin(b), 0, 1, 0, -std::sin(b), 0, std::cos(b);
  CameraPose p;
  p.rotation = rx * ry;
  p.translation = {0.3 * (2 * uniform01(rng) - 1), 0.3 * (2 * uniform01(rng) - 1), 0.2 * (2 * uniform01(rng) - 1)};
  return p;
}

}  // namespace

TEST_CASE("project_points: identity pose gives exactly zero flow") {
  Rng rng = make_rng(1, "t");
  Grid<double> d(9, 7);
  for (double& v : d.data()) v = 0.5 + 10 * uniform01(rng);
  const FlowField f = project_points({d, std::nullopt}, {50, 60, 3.2, 4.1}, CameraPose{});
  for (double v : f.displacement.data()) CHECK(v == 0.0);
}

TEST_CASE("project_points: lateral translation is a uniform closed-form shift") {
  const double fx = 80, z = 5, t = 0.3;
  CameraPose pose;
  pose.translation = {t, 0, 0};
  const FlowField f = project_points({constant_grid(12, 10, z), std::nullopt}, {fx, fx, 5, 6}, pose);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 10; ++x) {
      CHECK(std::abs(f.dx(y, x) - (-fx * t / z)) < 1e-9);
      CHECK(std::abs(f.dy(y, x)) < 1e-9);
    }
}

TEST_CASE("project_points: principal point with zero motion stays put") {
  CameraPose pose;
  Grid<double> d = constant_grid(5, 5, 1.0);
  const FlowField f = project_points({d, std::nullopt}, {10, 10, 2, 2}, pose);
  CHECK(f.dx(2, 2) == 0.0);
  CHECK(f.dy(2, 2) == 0.0);
}

TEST_CASE("project_points matches the per-pixel unproject/reproject oracle") {
  Rng rng = make_rng(2, "t");
  for (int trial = 0; trial < 10; ++trial) {
    Grid<double> d(8, 11);
    for (double& v : d.data()) v = 2 + 8 * uniform01(rng);
    const CameraIntrinsics k{40 + 20 * uniform01(rng), 40 + 20 * uniform01(rng), 5, 4};
    const CameraPose pose = small_pose(rng);
    const FlowField f = project_points({d, std::nullopt}, k, pose);
    const auto want = pinhole_flow_oracle(d, k, pose);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 11; ++x) {
        CHECK(std::abs(f.dx(y, x) - want[y * 11 + x].first) < 1e-9);
        CHECK(std::abs(f.dy(y, x) - want[y * 11 + x].second) < 1e-9);
      }
  }
}

TEST_CASE("project_points: invalid input is rejected or flagged") {
  Grid<double> d = constant_grid(4, 4, 2.0);
  d(1, 1) = 0.0;
  CHECK_THROWS_AS(project_points({d, std::nullopt}, {10, 10, 2, 2}, CameraPose{}), InvalidInput);
  CHECK_THROWS_AS(project_points({constant_grid(4, 4, 1), std::nullopt}, {0, 10, 2, 2}, CameraPose{}),
                  InvalidInput);
  Mask valid(4, 4, 1, 1);
  valid(1, 1) = 0;
  CameraPose pose;
  pose.translation = {0.1, 0, 0};
  const FlowField f = project_points({d, valid}, {10, 10, 2, 2}, pose);
  CHECK_FALSE(f.is_valid(1, 1));
  CHECK(f.is_valid(0, 0));
}

TEST_CASE("disparity_to_flow follows the sign convention") {
  Grid<double> zero(8, 8, 1, 0.0), three(8, 8, 1, 3.0), col(8, 8, 1, 0.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) col(y, x) = x;
  const FlowField a = disparity_to_flow({zero}), b = disparity_to_flow({three}), c = disparity_to_flow({col});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      CHECK(a.dx(y, x) == 0.0);
      CHECK(b.dx(y, x) == -3.0);
      CHECK(b.dy(y, x) == 0.0);
      CHECK(c.dx(y, x) == -x);
    }
}

TEST_CASE("softmax_splat: zero flow is the identity with every pixel valid") {
  const Image src = random_image(3, 6, 7);
  Rng rng = make_rng(3, "imp");
  Grid<double> imp(6, 7);
  for (double& v : imp.data()) v = 3 * uniform01(rng);
  const Image out = softmax_splat(src, FlowField::zeros(6, 7), imp);
  CHECK(out.pixels() == src.pixels());
  CHECK(out.valid_count() == 42u);
}

TEST_CASE("softmax_splat: two contributions blend by exp(importance)") {
  Image src(1, 2, 1);
  src.set(0, 0, 0, 0.2);
  src.set(0, 1, 0, 0.8);
  FlowField f = FlowField::zeros(1, 2);
  f.displacement(0, 1, 0) = -1.0;  // both land on (0, 0)
  Grid<double> imp(1, 2, 1, 0.0);
  imp(0, 1) = std::log(3.0);
  const Image out = softmax_splat(src, f, imp, 1.0);
  CHECK(std::abs(out(0, 0) - 0.65) < 1e-12);
  CHECK_FALSE(out.is_valid(0, 1));
  CHECK(out(0, 1) == 0.0);
}

TEST_CASE("softmax_splat: integer shift of a row") {
  Image src(1, 8, 1);
  for (int x = 0; x < 8; ++x) src.set(0, x, 0, 0.1 * (x + 1));
  const Image out = softmax_splat(src, FlowField::uniform(1, 8, 2, 0), constant_grid(1, 8, 0));
  CHECK_FALSE(out.is_valid(0, 0));
  CHECK_FALSE(out.is_valid(0, 1));
  for (int x = 2; x < 8; ++x) {
    CHECK(out.is_valid(0, x));
    CHECK(std::abs(out(0, x) - src(0, x - 2)) < 1e-15);
  }
}

TEST_CASE("softmax_splat: NaN importance and bad temperature are rejected") {
  Grid<double> imp(3, 3, 1, 0.0);
  imp(1, 1) = std::nan("");
  CHECK_THROWS_AS(softmax_splat(Image(3, 3, 1), FlowField::zeros(3, 3), imp), InvalidInput);
  CHECK_THROWS_AS(softmax_splat(Image(3, 3, 1), FlowField::zeros(3, 3), constant_grid(3, 3, 0), 0.0),
                  InvalidInput);
}

TEST_CASE("softmax_splat matches the brute-force oracle on random instances") {
  Rng rng = make_rng(4, "t");
  for (int trial = 0; trial < 25; ++trial) {
    const int h = 3 + static_cast<int>(uniform01(rng) * 10), w = 3 + static_cast<int>(uniform01(rng) * 10);
    const Image src = random_image(100 + trial, h, w, trial % 2 ? 3 : 1);
    FlowField f = FlowField::zeros(h, w);
    for (double& v : f.displacement.data()) v = 3 * (2 * uniform01(rng) - 1);
    Grid<double> imp(h, w);
    for (double& v : imp.data()) v = 2 * (2 * uniform01(rng) - 1);
    const double temp = 0.5 + uniform01(rng);
    const Image out = softmax_splat(src, f, imp, temp);
    const SplatResult want = splat_oracle(src, f, imp, temp);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        REQUIRE(out.is_valid(y, x) == (want.valid[y * w + x] != 0));
        for (int c = 0; c < src.channels(); ++c)
          CHECK(std::abs(out(y, x, c) - want.values[(y * w + x) * src.channels() + c]) < 1e-9);
      }
  }
}

TEST_CASE("softmax_splat: weights sum to one and constants are preserved") {
  Rng rng = make_rng(5, "t");
  const int h = 10, w = 10;
  FlowField f = FlowField::zeros(h, w);
  // Small flows on interior pixels keep every footprint in bounds.
  for (int y = 2; y < 8; ++y)
    for (int x = 2; x < 8; ++x) {
      f.displacement(y, x, 0) = 1.5 * (2 * uniform01(rng) - 1);
      f.displacement(y, x, 1) = 1.5 * (2 * uniform01(rng) - 1);
    }
  Grid<double> imp(h, w);
  for (double& v : imp.data()) v = uniform01(rng);
  const SplatPlan plan = SplatPlan::build(f, imp, 1.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (plan.receives_mass(y, x)) CHECK(std::abs(plan.total_weight(y, x) - 1.0) < 1e-5);
  const Image out = softmax_splat(Image(h, w, 3, 0.37), f, constant_grid(h, w, 0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (out.is_valid(y, x))
        for (int c = 0; c < 3; ++c) CHECK(std::abs(out(y, x, c) - 0.37) < 1e-5);
}

TEST_CASE("splat and gather are dual for constant integer flow") {
  const Image src = random_image(6, 9, 9);
  for (auto [dx, dy] : {std::pair{2, 0}, std::pair{-1, 3}, std::pair{0, -2}}) {
    const Image fwd = softmax_splat(src, FlowField::uniform(9, 9, dx, dy), constant_grid(9, 9, 0));
    const Image bwd = backward_warp(src, FlowField::uniform(9, 9, -dx, -dy));
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 9; ++x) {
        REQUIRE(fwd.is_valid(y, x) == bwd.is_valid(y, x));
        if (fwd.is_valid(y, x))
          for (int c = 0; c < 3; ++c) CHECK(fwd(y, x, c) == bwd(y, x, c));
      }
  }
}

TEST_CASE("backward_warp: identity, ramp shift and half-pixel midpoints") {
  const int w = 10;
  Image ramp(3, w, 1);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < w; ++x) ramp.set(y, x, 0, static_cast<double>(x) / w);
  CHECK(backward_warp(ramp, FlowField::zeros(3, w)).pixels() == ramp.pixels());
  const Image left = backward_warp(ramp, FlowField::uniform(3, w, -1, 0));
  CHECK_FALSE(left.is_valid(1, 0));
  for (int x = 1; x < w; ++x) CHECK(std::abs(left(1, x) - (x - 1.0) / w) < 1e-12);
  const Image half = backward_warp(ramp, FlowField::uniform(3, w, 0.5, 0));
  for (int x = 0; x + 1 < w; ++x) CHECK(std::abs(half(1, x) - (x + 0.5) / w) < 1e-12);
  CHECK_FALSE(half.is_valid(1, w - 1));
}

TEST_CASE("splat and gather gradients match central differences") {
  Rng rng = make_rng(7, "t");
  const int h = 6, w = 6;
  std::vector<double> base(h * w);
  for (double& v : base) v = 0.2 + 0.6 * uniform01(rng);
  FlowField f = FlowField::zeros(h, w);
  for (double& v : f.displacement.data()) v = 1.3 * (2 * uniform01(rng) - 1);
  Grid<double> imp(h, w), g(h, w);
  for (double& v : imp.data()) v = uniform01(rng);
  for (double& v : g.data()) v = 2 * uniform01(rng) - 1;
  const SplatPlan splat = SplatPlan::build(f, imp, 1.0);
  const GatherPlan gather = GatherPlan::build(f, h, w);
  auto objective = [&](const auto& plan, const std::vector<double>& v) {
    const Image out = plan.apply(Image::from_values(h, w, 1, v));
    double s = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) s += g(y, x) * out(y, x);
    return s;
  };
  auto check = [&](const auto& plan) {
    const Grid<double> analytic = plan.apply_transpose(g);
    double worst = 0.0;
    for (int i = 0; i < h * w; ++i) {
      std::vector<double> p = base, m = base;
      p[i] += 1e-4;
      m[i] -= 1e-4;
      const double num = (objective(plan, p) - objective(plan, m)) / 2e-4;
      const double a = analytic.data()[i];
      worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
    }
    return worst;
  };
  CHECK(check(splat) < 1e-3);
  CHECK(check(gather) < 1e-3);
}

TEST_CASE("estimate_flow: identical images give zero flow") {
  const Image a = smooth_texture(32, 32, 1);
  const FlowField f = estimate_flow(a, a);
  for (double v : f.displacement.data()) CHECK(v == 0.0);
}

TEST_CASE("estimate_flow recovers integer translations like an exhaustive SAD search") {
  const int h = 48, w = 48;
  // Blurred noise: periodic textures alias on the coarse pyramid levels.
  const Image ref = gaussian_blur(random_image(2, h, w), 1.5);
  for (auto [sx, sy] : {std::pair{3, 0}, std::pair{-2, 1}, std::pair{1, -4}}) {
    Image tgt(h, w, 3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          tgt.set(y, x, c, ref(std::clamp(y - sy, 0, h - 1), std::clamp(x - sx, 0, w - 1), c));
    const FlowField f = estimate_flow(ref, tgt);
    double worst = 0.0;
    for (int y = 10; y < h - 10; ++y)
      for (int x = 10; x < w - 10; ++x) {
        worst = std::max(worst, std::hypot(f.dx(y, x) - sx, f.dy(y, x) - sy));
        if ((x + y) % 7 == 0) {
          const auto [ox, oy] = sad_oracle(ref, tgt, y, x, 3, 5);
          CHECK(ox == sx);
          CHECK(oy == sy);
        }
      }
    CHECK(worst <= 0.5);
  }
}

TEST_CASE("estimate_flow: textureless pairs resolve to zero by tie-breaking") {
  const FlowField f = estimate_flow(Image(24, 24, 3, 0.4), Image(24, 24, 3, 0.4));
  for (double v : f.displacement.data()) CHECK(v == 0.0);
}

TEST_CASE("estimate_flow: size mismatch and external failures") {
  CHECK_THROWS_AS(estimate_flow(Image(8, 8, 1), Image(8, 9, 1)), InvalidInput);
  const FlowEstimator broken = [](const Image&, const Image&) -> FlowField {
    throw std::runtime_error("model not loaded");
  };
  CHECK_THROWS_AS(estimate_flow(Image(8, 8, 1), Image(8, 8, 1), broken), ExternalEstimatorError);
  const FlowEstimator fixed = [](const Image& a, const Image&) {
    return FlowField::uniform(a.height(), a.width(), 1, 0);
  };
  CHECK(estimate_flow(Image(8, 8, 1), Image(8, 8, 1), fixed).dx(3, 3) == 1.0);
}

TEST_CASE("pre_align: identity flow reproduces the reference") {
  const Image ref = random_image(8, 8, 8);
  const Image out = pre_align(ref, FlowTransform{FlowField::zeros(8, 8)});
  CHECK(out.pixels() == ref.pixels());
  CHECK(out.valid_count() == 64u);
}

TEST_CASE("pre_align: constant disparity shifts stripes and opens a border band") {
  const int h = 6, w = 16, d = 3;
  Image stripes(h, w, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) stripes.set(y, x, 0, (x / 2) % 2 ? 1.0 : 0.0);
  const Image out = pre_align(stripes, DisparityTransform{{constant_grid(h, w, d)}});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (x >= w - d) {
        CHECK_FALSE(out.is_valid(y, x));
      } else {
        CHECK(out.is_valid(y, x));
        CHECK(out(y, x) == stripes(y, x + d));
      }
    }
}

TEST_CASE("pre_align: the near plane wins where two depth layers overlap") {
  const int n = 16;
  Grid<double> depth = constant_grid(n, n, 10.0);
  Image src(n, n, 1, 0.0);
  for (int y = 5; y < 11; ++y)
    for (int x = 5; x < 11; ++x) {
      depth(y, x) = 2.0;
      src.set(y, x, 0, 1.0);
    }
  const CameraIntrinsics k{20, 20, 7.5, 7.5};
  CameraPose pose;
  pose.translation = {0.2, 0, 0};  // near layer moves 2 px, far layer 0.4 px
  const Image out = pre_align(src, DepthPoseTransform{{depth, std::nullopt}, k, pose});
  // z-ordering oracle: target pixels touched by any near-layer footprint.
  const auto flow = pinhole_flow_oracle(depth, k, pose);
  int covered = 0;
  for (int ty = 0; ty < n; ++ty)
    for (int tx = 0; tx < n; ++tx) {
      bool near = false;
      for (int y = 5; y < 11; ++y)
        for (int x = 5; x < 11; ++x) {
          const auto [dx, dy] = flow[y * n + x];
          if (std::abs(x + dx - tx) < 1 && std::abs(y + dy - ty) < 1) near = true;
        }
      if (!near) continue;
      ++covered;
      CHECK(out(ty, tx) > 0.99);
    }
  CHECK(covered == 36);
}

TEST_CASE("pre_align output stays in range and never validates massless pixels") {
  Rng rng = make_rng(9, "t");
  for (int trial = 0; trial < 5; ++trial) {
    const Image ref = random_image(200 + trial, 12, 12);
    FlowField f = FlowField::zeros(12, 12);
    for (double& v : f.displacement.data()) v = 4 * (2 * uniform01(rng) - 1);
    const Image deg = random_image(300 + trial, 12, 12);
    PreAlignOptions o;
    o.degraded_view = &deg;
    const Image out = pre_align(ref, FlowTransform{f}, o);
    const SplatPlan plan = SplatPlan::build(f, constant_grid(12, 12, 0), 1.0);
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x) {
        CHECK(out.is_valid(y, x) == plan.receives_mass(y, x));
        for (int c = 0; c < 3; ++c) CHECK((out(y, x, c) >= 0.0 && out(y, x, c) <= 1.0));
      }
  }
}

TEST_CASE("pre_align rejects transforms of the wrong size") {
  CHECK_THROWS_AS(pre_align(Image(8, 8, 1), FlowTransform{FlowField::zeros(8, 7)}), InvalidInput);
}
