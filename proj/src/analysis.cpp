#include "refix/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include <Eigen/Eigenvalues>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "refix/autograd.hpp"
#include "refix/errors.hpp"
#include "refix/fixer.hpp"
#include "refix/rng.hpp"

namespace refix {

// Feature extraction ------------------------------------------------------------

namespace {

constexpr int kToyWidths[4] = {3, 16, 32, 32};

}  // namespace

ToyExtractor::ToyExtractor(std::uint64_t seed) {
  Rng rng = make_rng(seed, "extractor");
  for (int l = 0; l < 3; ++l) {
    const int ci = kToyWidths[l], co = kToyWidths[l + 1];
    TensorRecord w{"extractor.conv" + std::to_string(l) + ".w", {co, ci, 3, 3}, {}};
    const double std = std::sqrt(2.0 / (ci * 9));
    w.values.resize(static_cast<std::size_t>(co) * ci * 9);
    for (double& v : w.values) v = static_cast<float>(std * normal01(rng));
    layers_.push_back(std::move(w));
  }
}

ToyExtractor ToyExtractor::from_archive(const Archive& archive) {
  ToyExtractor e(0);
  e.layers_.clear();
  for (int l = 0; l < 3; ++l) {
    const std::string name = "extractor.conv" + std::to_string(l) + ".w";
    const TensorRecord* t = archive.find_tensor(name);
    if (!t) throw DataError("extractor archive lacks '" + name + "'");
    if (t->shape != std::vector<int>{kToyWidths[l + 1], kToyWidths[l], 3, 3})
      throw DataError("extractor archive tensor '" + name + "' has the wrong shape");
    e.layers_.push_back(*t);
  }
  return e;
}

Archive ToyExtractor::to_archive() const {
  Archive a;
  a.set_config("extractor.kind", "toy_conv3");
  a.tensors = layers_;
  return a;
}

PatchTokenGrid ToyExtractor::tokens(const Image& image) const {
  ag::NoGradGuard no_grad;
  Tensor x = image_to_tensor(image);
  for (int l = 0; l < 3; ++l) {
    x = ag::conv2d(x, Tensor::constant(layers_[l].shape, layers_[l].values), Tensor{}, 2, 1);
    if (l < 2)
      for (double& v : x.mutable_value()) v = std::max(v, 0.0);
  }
  PatchTokenGrid g;
  g.rows = x.dim(1);
  g.cols = x.dim(2);
  const int d = x.dim(0), l = g.rows * g.cols;
  g.tokens.resize(l, d);
  for (int c = 0; c < d; ++c)
    for (int p = 0; p < l; ++p) g.tokens(p, c) = x.value()[static_cast<std::size_t>(c) * l + p];
  return g;
}

PatchTokenGrid extract_patch_tokens(const Image& image, const FeatureExtractor& extractor) {
  const int s = extractor.stride();
  if (image.empty() || image.height() % s != 0 || image.width() % s != 0)
    throw InvalidInput("extract_patch_tokens: image " + std::to_string(image.height()) + "x" +
                       std::to_string(image.width()) + " is not divisible by the extractor stride " +
                       std::to_string(s) + "; pad or crop it to a multiple of " + std::to_string(s));
  PatchTokenGrid g = extractor.tokens(image);
  if (g.tokens.rows() != g.rows * g.cols || g.tokens.rows() < 1 || g.tokens.cols() < 1 ||
      !g.tokens.allFinite())
    throw NumericalError("feature extractor returned an invalid token grid");
  return g;
}

// Embeddings --------------------------------------------------------------------

PooledEmbedding pool_embedding(const PatchTokenGrid& tokens) {
  const auto& t = tokens.tokens;
  if (t.rows() < 1 || t.cols() < 1) throw InvalidInput("pool_embedding: empty token grid");
  const Eigen::Index l = t.rows(), d = t.cols();
  PooledEmbedding out;
  out.values.resize(2 * d);
  std::vector<double> col(l);
  for (Eigen::Index c = 0; c < d; ++c) {
    // summing in sorted order makes the result independent of token order
    for (Eigen::Index r = 0; r < l; ++r) col[r] = t(r, c);
    std::sort(col.begin(), col.end());
    double sum = 0.0;
    for (double v : col) sum += v;
    const double mean = sum / static_cast<double>(l);
    double ss = 0.0;
    for (double v : col) ss += (v - mean) * (v - mean);
    out.values[c] = mean;
    out.values[d + c] = std::sqrt(ss / static_cast<double>(l));
  }
  return out;
}

double DegradationEmbedding::norm() const {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

DegradationEmbedding degradation_embedding(const PooledEmbedding& deg, const PooledEmbedding& gt) {
  if (deg.values.size() != gt.values.size())
    throw InvalidInput("degradation_embedding: lengths differ (" + std::to_string(deg.values.size()) +
                       " vs " + std::to_string(gt.values.size()) + ")");
  DegradationEmbedding out;
  out.values.resize(deg.values.size());
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = std::abs(deg.values[i] - gt.values[i]);
  return out;
}

// Projection --------------------------------------------------------------------

ProjectionMethod parse_projection_method(const std::string& name) {
  if (name == "tsne") return ProjectionMethod::tsne;
  if (name == "pca") return ProjectionMethod::pca;
  throw InvalidInput("unknown projection method '" + name + "' (expected tsne or pca)");
}

std::vector<Point2> pca_2d(const Eigen::MatrixXd& data) {
  const Eigen::Index n = data.rows();
  if (n < 2) throw InvalidInput("pca: needs at least 2 points");
  const Eigen::MatrixXd centred = data.rowwise() - data.colwise().mean();
  const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  std::vector<Point2> out(n, Point2{0.0, 0.0});
  const Eigen::Index d = cov.rows();
  for (int k = 0; k < 2 && k < d; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - k);
    // Sign convention: the largest-magnitude loading is positive.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    const Eigen::VectorXd scores = centred * v;
    for (Eigen::Index i = 0; i < n; ++i) out[i][k] = scores(i);
  }
  return out;
}

namespace {

// Row i of P: Gaussian conditional with bandwidth matched to log(perplexity).
void conditional_row(const Eigen::MatrixXd& d2, Eigen::Index i, double perplexity,
                     Eigen::MatrixXd& p) {
  const Eigen::Index n = d2.rows();
  const double target = std::log(perplexity);
  double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < 200; ++iter) {
    double sum = 0.0, weighted = 0.0;
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, d2(i, j));
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) {
        p(i, j) = 0.0;
        continue;
      }
      p(i, j) = std::exp(-beta * (d2(i, j) - dmin));
      sum += p(i, j);
      weighted += (d2(i, j) - dmin) * p(i, j);
    }
    const double entropy = std::log(sum) + beta * weighted / sum;
    p.row(i) /= sum;
    const double diff = entropy - target;
    if (std::abs(diff) < 1e-5) break;
    if (diff > 0) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
    } else {
      hi = beta;
      beta = 0.5 * (beta + lo);
    }
  }
}

}  // namespace

std::vector<Point2> tsne_2d(const Eigen::MatrixXd& data, const TsneOptions& o) {
  const Eigen::Index n = data.rows();
  if (n < 3) throw InvalidInput("tsne: needs at least 3 points");
  if (!(o.perplexity > 0) || o.iterations < 0 || !(o.learning_rate >= 0) ||
      !(o.early_exaggeration > 0))
    throw InvalidInput("tsne: invalid options");
  const double perplexity = std::min(o.perplexity, (static_cast<double>(n) - 1.0) / 3.0);
  const double learning_rate =
      o.learning_rate > 0 ? o.learning_rate
                          : std::max(static_cast<double>(n) / (4.0 * o.early_exaggeration), 50.0);

  Eigen::MatrixXd d2(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) d2(i, j) = (data.row(i) - data.row(j)).squaredNorm();
  Eigen::MatrixXd p(n, n);
  for (Eigen::Index i = 0; i < n; ++i) conditional_row(d2, i, perplexity, p);
  p = (p + p.transpose()).eval() / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(1e-12);
  p.diagonal().setZero();

  Eigen::MatrixXd y(n, 2);
  const auto init = pca_2d(data);
  for (Eigen::Index i = 0; i < n; ++i) y.row(i) << init[i][0], init[i][1];
  const double spread = std::sqrt((y.col(0).array() - y.col(0).mean()).square().mean());
  if (spread > 1e-12) {
    y *= 1e-4 / spread;
  } else {
    Rng rng = make_rng(o.seed, "tsne");
    for (Eigen::Index i = 0; i < n; ++i) y.row(i) << 1e-4 * normal01(rng), 1e-4 * normal01(rng);
  }

  Eigen::MatrixXd update = Eigen::MatrixXd::Zero(n, 2), gains = Eigen::MatrixXd::Ones(n, 2);
  Eigen::MatrixXd num(n, n), grad(n, 2);
  for (int it = 0; it < o.iterations; ++it) {
    const double exaggeration = it < o.exaggeration_iterations ? o.early_exaggeration : 1.0;
    const double momentum = it < o.exaggeration_iterations ? 0.5 : 0.8;
    // Gains and momentum restart once exaggeration ends; gains grown under
    // exaggerated attraction overshoot badly afterwards.
    if (it == o.exaggeration_iterations) {
      update.setZero();
      gains.setOnes();
    }
    double zsum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        num(i, j) = i == j ? 0.0 : 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
        zsum += num(i, j);
      }
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::RowVector2d g(0.0, 0.0);
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == j) continue;
        const double q = std::max(num(i, j) / zsum, 1e-12);
        g += (exaggeration * p(i, j) - q) * num(i, j) * (y.row(i) - y.row(j));
      }
      grad.row(i) = 4.0 * g;
    }
    for (Eigen::Index i = 0; i < n; ++i)
      for (int k = 0; k < 2; ++k) {
        const bool same_sign = (grad(i, k) > 0) == (update(i, k) > 0);
        gains(i, k) = same_sign ? std::max(gains(i, k) * 0.8, 0.01) : gains(i, k) + 0.2;
        update(i, k) = momentum * update(i, k) - learning_rate * gains(i, k) * grad(i, k);
      }
    y += update;
    y.rowwise() -= y.colwise().mean();
  }
  std::vector<Point2> out(n);
  for (Eigen::Index i = 0; i < n; ++i) out[i] = {y(i, 0), y(i, 1)};
  return out;
}

std::vector<Point2> project_2d(const std::vector<DegradationEmbedding>& embeddings,
                               ProjectionMethod method, std::uint64_t seed, double perplexity) {
  const std::size_t need = method == ProjectionMethod::tsne ? 3 : 2;
  if (embeddings.size() < need)
    throw InvalidInput("project_2d: needs at least " + std::to_string(need) + " embeddings, got " +
                       std::to_string(embeddings.size()));
  const std::size_t d = embeddings[0].values.size();
  Eigen::MatrixXd data(embeddings.size(), d);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].values.size() != d) throw InvalidInput("project_2d: embedding lengths differ");
    for (std::size_t k = 0; k < d; ++k) data(i, k) = embeddings[i].values[k];
  }
  // no spread at all: every embedding sits at one point, drawn at the origin
  if ((data.rowwise() - data.row(0)).cwiseAbs().maxCoeff() == 0.0)
    return std::vector<Point2>(embeddings.size(), Point2{0.0, 0.0});
  if (method == ProjectionMethod::pca) return pca_2d(data);
  TsneOptions o;
  o.seed = seed;
  o.perplexity = perplexity;
  return tsne_2d(data, o);
}

// Clusters ----------------------------------------------------------------------

std::vector<ClusterSummary> cluster_summaries(const std::vector<Point2>& points,
                                              const std::vector<std::string>& labels,
                                              std::vector<std::string>* warnings) {
  if (points.size() != labels.size())
    throw InvalidInput("cluster_summaries: points and labels differ in length");
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!groups.count(labels[i])) order.push_back(labels[i]);
    auto& g = groups[labels[i]];
    if (std::isfinite(points[i][0]) && std::isfinite(points[i][1])) g.push_back(i);
  }
  auto centre = [&](const std::vector<std::size_t>& pts) {
    Point2 m{0.0, 0.0};
    for (std::size_t i : pts) {
      m[0] += points[i][0];
      m[1] += points[i][1];
    }
    m[0] /= static_cast<double>(pts.size());
    m[1] /= static_cast<double>(pts.size());
    return m;
  };
  std::vector<ClusterSummary> out;
  for (const auto& label : order) {
    const auto& pts = groups[label];
    if (pts.empty()) {
      if (warnings) warnings->push_back("cluster '" + label + "' has no finite points; skipped");
      continue;
    }
    const Point2 m = centre(pts);
    std::vector<double> dist;
    double ms = 0.0;
    for (std::size_t i : pts) {
      dist.push_back(std::hypot(points[i][0] - m[0], points[i][1] - m[1]));
      ms += dist.back() * dist.back();
    }
    const double sigma = std::sqrt(ms / static_cast<double>(pts.size()));
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (dist[i] <= sigma * (1.0 + 1e-12)) kept.push_back(pts[i]);
    ClusterSummary s;
    s.label = label;
    s.mean = centre(kept);
    s.count_kept = static_cast<int>(kept.size());
    s.count_dropped = static_cast<int>(pts.size() - kept.size());
    s.kept = std::move(kept);
    out.push_back(s);
  }
  return out;
}

double silhouette_score(const std::vector<Point2>& points, const std::vector<std::string>& labels) {
  if (points.size() != labels.size() || points.empty())
    throw InvalidInput("silhouette_score: points and labels must be non-empty and equal in length");
  std::map<std::string, int> ids;
  std::vector<int> id(points.size());
  for (std::size_t i = 0; i < points.size(); ++i)
    id[i] = ids.emplace(labels[i], static_cast<int>(ids.size())).first->second;
  const int k = static_cast<int>(ids.size());
  if (k < 2) throw InvalidInput("silhouette_score: needs at least two labels");
  std::vector<int> sizes(k, 0);
  for (int c : id) ++sizes[c];
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (sizes[id[i]] == 1) continue;
    std::vector<double> sum(k, 0.0);
    for (std::size_t j = 0; j < points.size(); ++j)
      if (j != i) sum[id[j]] += std::hypot(points[i][0] - points[j][0], points[i][1] - points[j][1]);
    const double a = sum[id[i]] / (sizes[id[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c)
      if (c != id[i]) b = std::min(b, sum[c] / sizes[c]);
    const double denom = std::max(a, b);
    total += denom > 0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(points.size());
}

// Plot --------------------------------------------------------------------------

void write_scatter_png(const std::filesystem::path& path, const std::vector<Point2>& points,
                       const std::vector<std::string>& labels,
                       const std::vector<ClusterSummary>& summaries,
                       const std::vector<ShiftArrow>& arrows, int size) {
  if (points.size() != labels.size()) throw InvalidInput("scatter: points and labels differ in length");
  cv::Mat canvas(size, size, CV_8UC3, cv::Scalar(255, 255, 255));
  double lo_x = 0, hi_x = 1, lo_y = 0, hi_y = 1;
  if (!points.empty()) {
    lo_x = hi_x = points[0][0];
    lo_y = hi_y = points[0][1];
    for (const auto& p : points) {
      lo_x = std::min(lo_x, p[0]);
      hi_x = std::max(hi_x, p[0]);
      lo_y = std::min(lo_y, p[1]);
      hi_y = std::max(hi_y, p[1]);
    }
  }
  const double span = std::max({hi_x - lo_x, hi_y - lo_y, 1e-12});
  const int margin = size / 10;
  auto to_px = [&](const Point2& p) {
    const double u = (p[0] - 0.5 * (lo_x + hi_x)) / span, v = (p[1] - 0.5 * (lo_y + hi_y)) / span;
    return cv::Point(static_cast<int>(size / 2 + u * (size - 2 * margin)),
                     static_cast<int>(size / 2 - v * (size - 2 * margin)));
  };
  std::map<std::string, cv::Scalar> colour;
  auto colour_of = [&](const std::string& label) {
    auto it = colour.find(label);
    if (it != colour.end()) return it->second;
    // Golden-angle hue walk.
    const int hue = static_cast<int>(std::fmod(colour.size() * 137.508, 360.0) / 2.0);
    cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(hue, 200, 200)), bgr;
    cv::cvtColor(hsv, bgr, cv::COLOR_HSV2BGR);
    const auto c = bgr.at<cv::Vec3b>(0, 0);
    return colour[label] = cv::Scalar(c[0], c[1], c[2]);
  };
  for (std::size_t i = 0; i < points.size(); ++i)
    cv::circle(canvas, to_px(points[i]), 3, colour_of(labels[i]), cv::FILLED, cv::LINE_AA);
  std::map<std::string, Point2> means;
  int row = 0;
  for (const auto& s : summaries) {
    means[s.label] = s.mean;
    const cv::Scalar c = colour_of(s.label);
    cv::drawMarker(canvas, to_px(s.mean), cv::Scalar(0, 0, 0), cv::MARKER_CROSS, 16, 3);
    cv::drawMarker(canvas, to_px(s.mean), c, cv::MARKER_CROSS, 14, 2);
    cv::putText(canvas, s.label, cv::Point(10, 20 + 18 * row++), cv::FONT_HERSHEY_SIMPLEX, 0.5, c, 1,
                cv::LINE_AA);
  }
  for (const auto& a : arrows) {
    if (!means.count(a.from) || !means.count(a.to)) continue;
    cv::arrowedLine(canvas, to_px(means[a.from]), to_px(means[a.to]), cv::Scalar(40, 40, 40), 2,
                    cv::LINE_AA, 0, 0.15);
  }
  if (!cv::imwrite(path.string(), canvas)) throw DataError("cannot write plot " + path.string());
}

}  // namespace refix
