#include "refix/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <Eigen/Dense>

#include "refix/errors.hpp"
#include "refix/image_io.hpp"

namespace refix {

namespace fs = std::filesystem;

int Scene::reference_index() const {
  if (frames.empty()) throw DataError("scene '" + name + "' has no frames");
  return (static_cast<int>(frames.size()) + 1) / 2 - 1;
}

std::string frame_stem(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d", index);
  return buf;
}

namespace {

template <typename T, typename Read>
std::vector<std::optional<T>> optional_per_frame(const fs::path& dir, const char* ext, int n, Read read) {
  std::vector<std::optional<T>> out(n);
  if (!fs::is_directory(dir)) return out;
  for (int i = 0; i < n; ++i) {
    const fs::path p = dir / (frame_stem(i) + ext);
    if (fs::exists(p)) out[i] = read(p);
  }
  return out;
}

}  // namespace

Scene load_scene(const fs::path& dir) {
  Scene s;
  s.name = dir.filename().string();
  if (s.name.empty()) s.name = dir.parent_path().filename().string();
  const fs::path frames_dir = dir / "frames";
  if (!fs::is_directory(frames_dir)) throw DataError("scene " + dir.string() + ": missing frames/");
  for (int i = 0;; ++i) {
    const fs::path p = frames_dir / (frame_stem(i) + ".png");
    if (!fs::exists(p)) break;
    s.frames.push_back(read_png(p));
    if (!s.frames.back().same_shape(s.frames.front()))
      throw DataError("scene " + dir.string() + ": frame " + frame_stem(i) + " differs in size");
  }
  if (s.frames.empty()) throw DataError("scene " + dir.string() + ": no frames/00000.png");
  const int n = static_cast<int>(s.frames.size());
  const int h = s.frames[0].height(), w = s.frames[0].width();
  auto check = [&](const Grid<double>& g, const fs::path& p) {
    if (!g.same_extent(h, w)) throw DataError(p.string() + " does not match the frame size");
    return g;
  };
  s.depth = optional_per_frame<Grid<double>>(dir / "depth", ".pfm", n,
                                             [&](const fs::path& p) { return check(read_pfm(p), p); });
  s.disparity = optional_per_frame<Grid<double>>(dir / "disparity", ".pfm", n,
                                                 [&](const fs::path& p) { return check(read_pfm(p), p); });
  s.flow = optional_per_frame<FlowField>(dir / "flow", ".flo", n, [&](const fs::path& p) {
    return FlowField{check(read_flo(p), p)};
  });

  const fs::path pose = dir / "pose.txt";
  if (fs::exists(pose)) {
    std::ifstream is(pose);
    std::string line;
    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
      std::istringstream ls(line);
      std::vector<double> v;
      for (double x; ls >> x;) v.push_back(x);
      if (!ls.eof()) throw DataError(pose.string() + ": non-numeric entry");
      rows.push_back(std::move(v));
    }
    if (rows.empty() || rows[0].size() != 4) throw DataError(pose.string() + ": first line must be 'fx fy cx cy'");
    CameraIntrinsics k{rows[0][0], rows[0][1], rows[0][2], rows[0][3]};
    try {
      k.validate();
    } catch (const InvalidInput& e) {
      throw DataError(pose.string() + ": " + e.what());
    }
    s.intrinsics = k;
    if (static_cast<int>(rows.size()) - 1 != n)
      throw DataError(pose.string() + ": expected " + std::to_string(n) + " pose lines, got " +
                      std::to_string(rows.size() - 1));
    for (int i = 1; i <= n; ++i) {
      if (rows[i].size() != 12) throw DataError(pose.string() + ": pose lines need 12 numbers");
      Pose34 m;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) m(r, c) = rows[i][r * 4 + c];
      s.world_to_camera.push_back(m);
    }
  }
  return s;
}

void write_scene(const fs::path& dir, const Scene& s) {
  fs::create_directories(dir / "frames");
  const int n = static_cast<int>(s.frames.size());
  for (int i = 0; i < n; ++i) write_png(dir / "frames" / (frame_stem(i) + ".png"), s.frames[i]);
  auto write_optional = [&](const auto& items, const char* sub, const char* ext, auto write) {
    bool any = false;
    for (const auto& it : items) any = any || it.has_value();
    if (!any) return;
    fs::create_directories(dir / sub);
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i]) write(dir / sub / (frame_stem(static_cast<int>(i)) + ext), *items[i]);
  };
  write_optional(s.depth, "depth", ".pfm", [](const fs::path& p, const Grid<double>& g) { write_pfm(p, g); });
  write_optional(s.disparity, "disparity", ".pfm",
                 [](const fs::path& p, const Grid<double>& g) { write_pfm(p, g); });
  write_optional(s.flow, "flow", ".flo",
                 [](const fs::path& p, const FlowField& f) { write_flo(p, f.displacement); });
  if (s.intrinsics) {
    std::ofstream os(dir / "pose.txt");
    os.precision(17);
    os << s.intrinsics->fx << ' ' << s.intrinsics->fy << ' ' << s.intrinsics->cx << ' '
       << s.intrinsics->cy << '\n';
    for (const auto& m : s.world_to_camera) {
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) os << m(r, c) << (r == 2 && c == 3 ? '\n' : ' ');
    }
    if (!os) throw DataError("cannot write " + (dir / "pose.txt").string());
  }
}

std::vector<fs::path> read_manifest(const fs::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw DataError("cannot open manifest " + manifest.string());
  std::vector<fs::path> out;
  for (std::string line; std::getline(is, line);) {
    line.erase(0, line.find_first_not_of(" \t"));
    line.erase(line.find_last_not_of(" \t\r") + 1);
    if (line.empty() || line[0] == '#') continue;
    fs::path p(line);
    out.push_back(p.is_absolute() ? p : manifest.parent_path() / p);
  }
  return out;
}

WarpMode parse_warp_mode(const std::string& name) {
  if (name == "geometry") return WarpMode::geometry;
  if (name == "disparity") return WarpMode::disparity;
  if (name == "flow") return WarpMode::flow;
  throw InvalidInput("unknown warp mode '" + name + "' (expected geometry, disparity or flow)");
}

std::string to_string(WarpMode mode) {
  switch (mode) {
    case WarpMode::geometry: return "geometry";
    case WarpMode::disparity: return "disparity";
    case WarpMode::flow: return "flow";
  }
  return "?";
}

CameraPose relative_pose(const Pose34& source_w2c, const Pose34& target_w2c) {
  const Eigen::Matrix3d rs = source_w2c.leftCols<3>(), rt = target_w2c.leftCols<3>();
  const Eigen::Vector3d ts = source_w2c.col(3), tt = target_w2c.col(3);
  CameraPose p;
  p.rotation = rs * rt.transpose();
  p.translation = ts - rs * rt.transpose() * tt;
  return p;
}

std::vector<std::optional<ViewTransform>> scene_transforms(const Scene& s, WarpMode mode) {
  const int n = static_cast<int>(s.frames.size());
  const int ref = s.reference_index();
  std::vector<std::optional<ViewTransform>> out(n);
  for (int i = 0; i < n; ++i) {
    if (i == ref) continue;
    switch (mode) {
      case WarpMode::geometry: {
        if (!s.depth[ref])
          throw DataError("scene '" + s.name + "': geometry warping needs depth/" + frame_stem(ref) + ".pfm");
        if (!s.intrinsics || static_cast<int>(s.world_to_camera.size()) != n)
          throw DataError("scene '" + s.name + "': geometry warping needs pose.txt");
        DepthPoseTransform t{DepthMap{*s.depth[ref], std::nullopt}, *s.intrinsics,
                             relative_pose(s.world_to_camera[ref], s.world_to_camera[i])};
        out[i] = t;
        break;
      }
      case WarpMode::disparity:
        if (!s.disparity[i])
          throw DataError("scene '" + s.name + "': disparity warping needs disparity/" + frame_stem(i) + ".pfm");
        out[i] = DisparityTransform{DisparityMap{*s.disparity[i]}};
        break;
      case WarpMode::flow:
        if (s.flow[i]) out[i] = FlowTransform{*s.flow[i]};
        break;
    }
  }
  return out;
}

namespace {

std::vector<double> parse_numbers(const std::string& text, std::size_t count, const fs::path& path,
                                  const std::string& key) {
  std::istringstream in(text);
  std::vector<double> v;
  for (double x; in >> x;) v.push_back(x);
  if (!in.eof() || v.size() != count)
    throw DataError(path.string() + ": '" + key + "' needs " + std::to_string(count) + " numbers");
  return v;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

ViewTransform load_view_transform(const fs::path& path, WarpMode mode) {
  if (!fs::exists(path)) throw DataError("transform file not found: " + path.string());
  if (mode == WarpMode::flow) return FlowTransform{FlowField{read_flo(path)}};
  if (mode == WarpMode::disparity) return DisparityTransform{DisparityMap{read_pfm(path)}};

  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(in, line);) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(path.string() + ": expected key = value, got '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  for (const char* key : {"depth", "intrinsics", "rotation", "translation"})
    if (!kv.count(key)) throw DataError(path.string() + ": missing '" + key + "'");
  for (const auto& [key, value] : kv)
    if (key != "depth" && key != "intrinsics" && key != "rotation" && key != "translation")
      throw DataError(path.string() + ": unknown key '" + key + "'");

  DepthPoseTransform t;
  fs::path depth = kv["depth"];
  if (depth.is_relative()) depth = path.parent_path() / depth;
  t.depth.depth = read_pfm(depth);
  const auto k = parse_numbers(kv["intrinsics"], 4, path, "intrinsics");
  t.intrinsics = {k[0], k[1], k[2], k[3]};
  const auto r = parse_numbers(kv["rotation"], 9, path, "rotation");
  for (int i = 0; i < 9; ++i) t.relative_pose.rotation(i / 3, i % 3) = r[i];
  const auto tr = parse_numbers(kv["translation"], 3, path, "translation");
  t.relative_pose.translation = {tr[0], tr[1], tr[2]};
  try {
    t.intrinsics.validate();
    t.relative_pose.validate();
  } catch (const InvalidInput& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return t;
}

void write_geometry_transform(const fs::path& path, const DepthPoseTransform& t) {
  const fs::path depth = path.stem().string() + "_depth.pfm";
  write_pfm(path.parent_path() / depth, t.depth.depth);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "depth = " << depth.string() << "\n";
  out << "intrinsics = " << num(t.intrinsics.fx) << ' ' << num(t.intrinsics.fy) << ' '
      << num(t.intrinsics.cx) << ' ' << num(t.intrinsics.cy) << "\n";
  out << "rotation =";
  for (int i = 0; i < 9; ++i) out << ' ' << num(t.relative_pose.rotation(i / 3, i % 3));
  out << "\ntranslation =";
  for (int i = 0; i < 3; ++i) out << ' ' << num(t.relative_pose.translation[i]);
  out << "\n";
}

}  // namespace refix
