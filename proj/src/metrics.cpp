#include "refix/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "refix/errors.hpp"
#include "refix/image_io.hpp"

namespace refix {

double psnr(const Image& a, const Image& b, double peak) {
  if (!a.same_shape(b)) throw InvalidInput("psnr: image shapes differ");
  if (a.empty()) throw InvalidInput("psnr: empty images");
  if (!(peak > 0)) throw InvalidInput("psnr: peak must be positive");
  double sse = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    sse += d * d;
  }
  const double mse = sse / static_cast<double>(a.data().size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

namespace {

constexpr int kWin = 11;

std::array<double, kWin> gaussian_window() {
  std::array<double, kWin> g{};
  double sum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double x = i - kWin / 2;
    g[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    sum += g[i];
  }
  for (double& v : g) v /= sum;
  return g;
}

// Separable 'valid' filtering.
Grid<double> filter_valid(const Grid<double>& in, const std::array<double, kWin>& g) {
  const int h = in.height(), w = in.width(), oh = h - kWin + 1, ow = w - kWin + 1;
  Grid<double> rows(h, ow, 1, 0.0), out(oh, ow, 1, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWin; ++k) s += g[k] * in(y, x + k);
      rows(y, x) = s;
    }
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWin; ++k) s += g[k] * rows(y + k, x);
      out(y, x) = s;
    }
  return out;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw InvalidInput("ssim: image shapes differ");
  if (std::min(a.height(), a.width()) < kWin)
    throw InvalidInput("ssim: images must be at least 11x11, got " + std::to_string(a.height()) +
                       "x" + std::to_string(a.width()));
  const Grid<double> x = luminance(a), y = luminance(b);
  const int h = x.height(), w = x.width();
  Grid<double> xx(h, w), yy(h, w), xy(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      xx(r, c) = x(r, c) * x(r, c);
      yy(r, c) = y(r, c) * y(r, c);
      xy(r, c) = x(r, c) * y(r, c);
    }
  const auto g = gaussian_window();
  const Grid<double> mx = filter_valid(x, g), my = filter_valid(y, g);
  const Grid<double> sxx = filter_valid(xx, g), syy = filter_valid(yy, g), sxy = filter_valid(xy, g);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double ux = mx.data()[i], uy = my.data()[i];
    const double vx = sxx.data()[i] - ux * ux, vy = syy.data()[i] - uy * uy;
    const double cov = sxy.data()[i] - ux * uy;
    total += ((2 * ux * uy + c1) * (2 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
  }
  return std::clamp(total / static_cast<double>(mx.size()), -1.0, 1.0);
}

std::string format_metric(double value) {
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", value);
  return buf;
}

namespace {

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

}  // namespace

std::optional<double> run_external_metric(const ExternalMetric& metric,
                                          const std::filesystem::path& pred,
                                          const std::filesystem::path& gt) {
  const std::string cmd = shell_quote(metric.executable.string()) + " " + shell_quote(pred.string()) +
                          " " + shell_quote(gt.string()) + " 2>/dev/null";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return std::nullopt;
  std::string output;
  char buf[256];
  while (std::fgets(buf, sizeof buf, pipe)) output += buf;
  const int status = ::pclose(pipe);
  if (status != 0) return std::nullopt;
  std::istringstream is(output);
  double v;
  if (!(is >> v) || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::vector<std::string> list_pngs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

EvaluationResult evaluate_pairs(const std::filesystem::path& pred_dir,
                                const std::filesystem::path& gt_dir,
                                const std::vector<ExternalMetric>& externals) {
  const auto pred = list_pngs(pred_dir), gt = list_pngs(gt_dir);
  if (pred.empty() && gt.empty()) throw DataError("evaluate: no PNG files in " + pred_dir.string());
  if (pred != gt) {
    std::vector<std::string> only_pred, only_gt;
    std::set_difference(pred.begin(), pred.end(), gt.begin(), gt.end(), std::back_inserter(only_pred));
    std::set_difference(gt.begin(), gt.end(), pred.begin(), pred.end(), std::back_inserter(only_gt));
    std::string msg = "evaluate: file sets differ;";
    for (const auto& n : only_pred) msg += " only in predictions: " + n + ";";
    for (const auto& n : only_gt) msg += " only in ground truth: " + n + ";";
    throw DataError(msg);
  }
  EvaluationResult r;
  std::set<std::string> failed;
  for (const auto& name : pred) {
    const Image p = read_png(pred_dir / name), g = read_png(gt_dir / name);
    if (p.height() != g.height() || p.width() != g.width())
      throw DataError("evaluate: " + name + " differs in size between directories");
    const Image p3 = to_rgb(p), g3 = to_rgb(g);
    MetricReport m;
    m.name = name;
    m.psnr_db = psnr(p3, g3);
    m.ssim = ssim(p3, g3);
    for (const auto& ext : externals) {
      if (failed.count(ext.name)) continue;
      if (auto v = run_external_metric(ext, pred_dir / name, gt_dir / name)) m.external[ext.name] = *v;
      else failed.insert(ext.name);
    }
    r.per_image.push_back(std::move(m));
  }
  r.unavailable.assign(failed.begin(), failed.end());
  for (auto& m : r.per_image)
    for (const auto& f : failed) m.external.erase(f);

  const double n = static_cast<double>(r.per_image.size());
  auto aggregate = [&](auto get) {
    double mean = 0.0;
    for (const auto& m : r.per_image) mean += get(m);
    mean /= n;
    double var = 0.0;
    for (const auto& m : r.per_image) {
      const double d = get(m) - mean;
      var += std::isfinite(d) ? d * d : 0.0;
    }
    return std::pair{mean, std::isfinite(mean) ? std::sqrt(var / n) : 0.0};
  };
  r.mean.name = "mean";
  r.stddev.name = "std";
  std::tie(r.mean.psnr_db, r.stddev.psnr_db) = aggregate([](const MetricReport& m) { return m.psnr_db; });
  std::tie(r.mean.ssim, r.stddev.ssim) = aggregate([](const MetricReport& m) { return m.ssim; });
  for (const auto& ext : externals) {
    if (failed.count(ext.name)) continue;
    std::tie(r.mean.external[ext.name], r.stddev.external[ext.name]) =
        aggregate([&](const MetricReport& m) { return m.external.at(ext.name); });
  }
  return r;
}

void write_eval_csv(const std::filesystem::path& path, const EvaluationResult& r) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << "image,psnr,ssim";
  for (const auto& [k, v] : r.mean.external) os << ',' << k;
  os << '\n';
  for (const auto& m : r.per_image) {
    os << m.name << ',' << format_metric(m.psnr_db) << ',' << format_metric(m.ssim);
    for (const auto& [k, v] : m.external) os << ',' << format_metric(v);
    os << '\n';
  }
}

std::string format_eval_summary(const EvaluationResult& r) {
  std::ostringstream os;
  os << "{\n  \"images\": " << r.per_image.size() << ",\n";
  os << "  \"psnr\": {\"mean\": \"" << format_metric(r.mean.psnr_db) << "\", \"std\": \""
     << format_metric(r.stddev.psnr_db) << "\"},\n";
  os << "  \"ssim\": {\"mean\": \"" << format_metric(r.mean.ssim) << "\", \"std\": \""
     << format_metric(r.stddev.ssim) << "\"}";
  for (const auto& [k, v] : r.mean.external)
    os << ",\n  \"" << k << "\": {\"mean\": \"" << format_metric(v) << "\", \"std\": \""
       << format_metric(r.stddev.external.at(k)) << "\"}";
  os << "\n}\n";
  return os.str();
}

}  // namespace refix
