#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "refix/image.hpp"

namespace refix {

/// 10 log10(peak^2 / MSE) over all channels; +infinity when the images are equal.
double psnr(const Image& a, const Image& b, double peak = 1.0);

/// Mean SSIM over the 'valid' region of an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, data range 1, computed on BT.601 luma for RGB.
double ssim(const Image& a, const Image& b);

/// "inf" for the infinite PSNR sentinel, otherwise fixed 6-decimal text.
std::string format_metric(double value);

/// Executable called as `<plugin> <pred.png> <gt.png>` that prints one number.
struct ExternalMetric {
  std::string name;
  std::filesystem::path executable;
};

/// Runs a plugin; empty when it exits nonzero or prints no number.
std::optional<double> run_external_metric(const ExternalMetric& metric,
                                          const std::filesystem::path& pred,
                                          const std::filesystem::path& gt);

struct MetricReport {
  std::string name;  // file name, or "mean" for aggregates
  double psnr_db = 0.0;
  double ssim = 0.0;
  std::map<std::string, double> external;
};

struct EvaluationResult {
  std::vector<MetricReport> per_image;  // sorted by file name
  MetricReport mean;
  MetricReport stddev;  // population
  std::vector<std::string> unavailable;  // plugins that failed on some pair
};

EvaluationResult evaluate_pairs(const std::filesystem::path& pred_dir,
                                const std::filesystem::path& gt_dir,
                                const std::vector<ExternalMetric>& externals = {});

void write_eval_csv(const std::filesystem::path& path, const EvaluationResult& result);
std::string format_eval_summary(const EvaluationResult& result);

/// Sorted *.png file names in a directory.
std::vector<std::string> list_pngs(const std::filesystem::path& dir);

}  // namespace refix
