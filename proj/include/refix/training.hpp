#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "refix/checkpoint.hpp"
#include "refix/degrade.hpp"
#include "refix/fixer.hpp"
#include "refix/geometry_warp.hpp"
#include "refix/image.hpp"

namespace refix {

struct TrainingSample {
  Image i_deg;
  Image i_warped;  // carries the validity mask
  Image i_gt;
  std::string scene_id;
  int frame_index = 0;  // 0-based
};

/// ceil(N / 2) as a 1-based frame number.
int reference_frame_number(int n);

/// One sample per frame, in frame order. `transforms[i]` maps the reference
/// view onto frame i and is ignored for the reference frame itself; an empty
/// entry means "estimate the flow from the reference to the degraded frame".
std::vector<TrainingSample> curate_pairs(const std::vector<Image>& frames,
                                         const std::vector<std::optional<ViewTransform>>& transforms,
                                         const Degrader& degrader, const std::string& scene_id = "",
                                         const PreAlignOptions& warp = {},
                                         const FlowEstimator& flow_estimator = {});

/// Differentiable distance between two [3, H, W] tensors.
class PerceptualBackend {
 public:
  virtual ~PerceptualBackend() = default;
  virtual Tensor distance(const Tensor& a, const Tensor& b) const = 0;
};

/// Frozen, seeded four-layer stride-2 convolution pyramid (3 -> 16 -> 32 ->
/// 32 -> 32, SiLU). Per layer the features are normalised across channels at
/// every pixel; the distance is the mean over layers of the mean squared
/// feature difference.
class RandomFeaturePerceptual final : public PerceptualBackend {
 public:
  explicit RandomFeaturePerceptual(std::uint64_t seed = 0);
  Tensor distance(const Tensor& a, const Tensor& b) const override;

 private:
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

struct LossConfig {
  double lambda_lpips = 1.0;
  std::string perceptual_backend = "random_features";  // or "external"
  int patch_h = 64;
  int patch_w = 64;
  /// Weight the L2 term by the warped view's validity mask instead of all pixels.
  bool mask_invalid = false;
  std::uint64_t perceptual_seed = 0;
  /// Required when perceptual_backend == "external".
  std::shared_ptr<const PerceptualBackend> external;

  void validate() const;
};

std::shared_ptr<const PerceptualBackend> make_perceptual_backend(const LossConfig& config);

double perceptual_distance(const Image& a, const Image& b, const LossConfig& config);

struct LossTerms {
  Tensor total;
  Tensor l2;
  Tensor perceptual;  // undefined when lambda is 0
};

/// L2 + lambda * perceptual on [3, H, W] tensors. `pixel_weights` (H x W)
/// weights the L2 term when given.
LossTerms total_loss(const Tensor& pred, const Tensor& gt, const LossConfig& config,
                     const PerceptualBackend* backend,
                     std::span<const double> pixel_weights = {});
double total_loss(const Image& pred, const Image& gt, const LossConfig& config);

struct OptimConfig {
  double learning_rate = 2e-5;
  int batch_size = 1;
  int max_steps = 50000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  bool freeze_encoder = false;

  void validate() const;
};

/// Adam moments per parameter, kept on the float32 grid like the parameters.
struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  void reset(const FixerModel& model);
};

/// One Adam update from the parameters' accumulated gradients.
void adam_step(FixerModel& model, AdamState& state, const OptimConfig& config);

struct LossRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double l2 = 0.0;
  double perceptual = 0.0;
};

struct TrainOptions {
  /// Written when the loss stops being finite, before NumericalError is thrown.
  std::filesystem::path diagnostic_checkpoint;
  /// Called after every step.
  std::function<void(const LossRecord&)> on_step;
};

/// Runs Adam until `state.step == optim.max_steps`. Resuming is a matter of
/// passing the saved state back in: crop and shuffle randomness derive from
/// (seed, step) only.
std::vector<LossRecord> train(FixerModel& model, AdamState& state,
                              const std::vector<TrainingSample>& samples, const LossConfig& loss,
                              const OptimConfig& optim, const TrainOptions& options = {});

/// Crop window for a sample at a given draw; never crosses image bounds.
struct CropWindow {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
};
CropWindow draw_crop(int image_h, int image_w, int patch_h, int patch_w, int multiple,
                     std::uint64_t seed, std::uint64_t draw);

/// Sample index used by draw `draw` of a seeded epoch-wise shuffle.
std::size_t sample_for_draw(std::size_t dataset_size, std::uint64_t seed, std::uint64_t draw);

/// Model + Adam state + step in one UFIX file.
void save_training_checkpoint(const std::filesystem::path& path, const FixerModel& model,
                              const AdamState& state);
struct TrainingCheckpoint {
  FixerModel model;
  AdamState state;
};
TrainingCheckpoint load_training_checkpoint(const std::filesystem::path& path);

/// Curated samples on disk: index.tsv plus, per sample, <stem>_deg.png,
/// <stem>_warped.png, <stem>_mask.png and <stem>_gt.png.
void write_sample_archive(const std::filesystem::path& dir, const std::vector<TrainingSample>& samples);
std::vector<TrainingSample> read_sample_archive(const std::filesystem::path& dir);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history);

}  // namespace refix
