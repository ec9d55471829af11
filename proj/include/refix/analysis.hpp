#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "refix/checkpoint.hpp"
#include "refix/image.hpp"

namespace refix {

/// L patch tokens of dimension D laid out on a rows x cols grid.
struct PatchTokenGrid {
  Eigen::MatrixXd tokens;  // L x D
  int rows = 0;
  int cols = 0;
};

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual int stride() const = 0;
  virtual int dim() const = 0;
  /// Patch tokens only; the image extent is already checked against stride().
  virtual PatchTokenGrid tokens(const Image& image) const = 0;
};

/// Frozen stack of three stride-2 3x3 convolutions (3 -> 16 -> 32 -> 32,
/// ReLU between layers), D = 32 at stride 8. Biases are zero.
class ToyExtractor final : public FeatureExtractor {
 public:
  explicit ToyExtractor(std::uint64_t seed = 0);
  static ToyExtractor from_archive(const Archive& archive);
  Archive to_archive() const;

  int stride() const override { return 8; }
  int dim() const override { return 32; }
  PatchTokenGrid tokens(const Image& image) const override;

 private:
  std::vector<TensorRecord> layers_;  // w0, w1, w2
};

PatchTokenGrid extract_patch_tokens(const Image& image, const FeatureExtractor& extractor);

/// mean || population std over tokens, length 2D.
struct PooledEmbedding {
  std::vector<double> values;
};

/// |deg - gt| elementwise.
struct DegradationEmbedding {
  std::vector<double> values;
  double norm() const;
};

PooledEmbedding pool_embedding(const PatchTokenGrid& tokens);
DegradationEmbedding degradation_embedding(const PooledEmbedding& deg, const PooledEmbedding& gt);

using Point2 = std::array<double, 2>;

enum class ProjectionMethod { tsne, pca };
ProjectionMethod parse_projection_method(const std::string& name);

struct TsneOptions {
  double perplexity = 30.0;
  int iterations = 1000;
  /// 0 picks max(N / (4 * early_exaggeration), 50); a fixed 200 is unstable for small N.
  double learning_rate = 0.0;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
  std::uint64_t seed = 0;
};

/// Top-2 principal component scores of the centred rows.
std::vector<Point2> pca_2d(const Eigen::MatrixXd& data);
/// Exact t-SNE with PCA initialisation. The seed only matters when the data
/// has no variance and a random start is needed.
std::vector<Point2> tsne_2d(const Eigen::MatrixXd& data, const TsneOptions& options);

std::vector<Point2> project_2d(const std::vector<DegradationEmbedding>& embeddings,
                               ProjectionMethod method, std::uint64_t seed = 0,
                               double perplexity = 30.0);

struct ClusterSummary {
  std::string label;
  Point2 mean{};
  int count_kept = 0;
  int count_dropped = 0;
  std::vector<std::size_t> kept;  // indices into the input points
};

/// Per label, in order of first appearance. Points farther from the mean than
/// the root-mean-square distance are dropped and the mean recomputed.
std::vector<ClusterSummary> cluster_summaries(const std::vector<Point2>& points,
                                              const std::vector<std::string>& labels,
                                              std::vector<std::string>* warnings = nullptr);

/// Mean silhouette coefficient; points in singleton clusters score 0.
double silhouette_score(const std::vector<Point2>& points, const std::vector<std::string>& labels);

struct ShiftArrow {
  std::string from;
  std::string to;
};

/// Scatter plot with one colour per label, cluster means as crosses and
/// arrows between the means of paired labels.
void write_scatter_png(const std::filesystem::path& path, const std::vector<Point2>& points,
                       const std::vector<std::string>& labels,
                       const std::vector<ClusterSummary>& summaries,
                       const std::vector<ShiftArrow>& arrows, int size = 640);

}  // namespace refix
