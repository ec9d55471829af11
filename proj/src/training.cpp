#include "refix/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "refix/dataset.hpp"
#include "refix/errors.hpp"
#include "refix/image_io.hpp"
#include "refix/rng.hpp"

namespace refix {

// Curation ----------------------------------------------------------------------

int reference_frame_number(int n) {
  if (n < 1) throw InvalidInput("reference_frame_number: empty sequence");
  return (n + 1) / 2;
}

std::vector<TrainingSample> curate_pairs(const std::vector<Image>& frames,
                                         const std::vector<std::optional<ViewTransform>>& transforms,
                                         const Degrader& degrader, const std::string& scene_id,
                                         const PreAlignOptions& warp,
                                         const FlowEstimator& flow_estimator) {
  if (frames.empty()) throw InvalidInput("curate_pairs: empty frame sequence");
  if (transforms.size() != frames.size())
    throw InvalidInput("curate_pairs: expected one transform per frame (" +
                       std::to_string(frames.size()) + "), got " + std::to_string(transforms.size()));
  for (const Image& f : frames)
    if (!f.same_shape(frames[0])) throw InvalidInput("curate_pairs: frames differ in size");

  const int n = static_cast<int>(frames.size());
  const int ref = reference_frame_number(n) - 1;
  const Image& i_ref = frames[ref];
  const std::vector<Image> degraded = degrader(frames);

  std::vector<TrainingSample> out;
  out.reserve(frames.size());
  for (int i = 0; i < n; ++i) {
    TrainingSample s;
    s.scene_id = scene_id;
    s.frame_index = i;
    s.i_gt = frames[i];
    s.i_deg = degraded[i];
    if (i == ref) {
      s.i_warped = i_ref;
    } else {
      PreAlignOptions opts = warp;
      opts.degraded_view = &degraded[i];
      if (transforms[i]) {
        const auto [h, w] = transform_extent(*transforms[i]);
        if (h != i_ref.height() || w != i_ref.width())
          throw InvalidInput("curate_pairs: transform for frame " + std::to_string(i) +
                             " does not match the frame size");
        s.i_warped = pre_align(i_ref, *transforms[i], opts);
      } else {
        const FlowField flow = estimate_flow(i_ref, degraded[i], flow_estimator);
        s.i_warped = pre_align(i_ref, FlowTransform{flow}, opts);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Perceptual ----------------------------------------------------------------------

RandomFeaturePerceptual::RandomFeaturePerceptual(std::uint64_t seed) {
  Rng rng = make_rng(seed, "perceptual");
  const int widths[5] = {3, 16, 32, 32, 32};
  for (int l = 0; l < 4; ++l) {
    const int ci = widths[l], co = widths[l + 1];
    std::vector<double> w(static_cast<std::size_t>(co) * ci * 9);
    const double std = std::sqrt(2.0 / (ci * 9));
    for (double& v : w) v = std * normal01(rng);
    std::vector<double> b(co);
    for (double& v : b) v = 0.1 * normal01(rng);
    weights_.push_back(Tensor::constant({co, ci, 3, 3}, std::move(w)));
    biases_.push_back(Tensor::constant({co}, std::move(b)));
  }
}

Tensor RandomFeaturePerceptual::distance(const Tensor& a, const Tensor& b) const {
  if (a.shape() != b.shape() || a.rank() != 3 || a.dim(0) != 3)
    throw InvalidInput("perceptual_distance: inputs must be equal-sized [3, H, W] images");
  Tensor fa = ag::affine(a, 2.0, -1.0), fb = ag::affine(b, 2.0, -1.0);
  Tensor total;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    fa = ag::silu(ag::conv2d(fa, weights_[l], biases_[l], 2, 1));
    fb = ag::silu(ag::conv2d(fb, weights_[l], biases_[l], 2, 1));
    const Tensor d = ag::mse(ag::channel_normalize(fa), ag::channel_normalize(fb));
    total = total.defined() ? ag::add(total, d) : d;
  }
  return ag::scale(total, 1.0 / static_cast<double>(weights_.size()));
}

void LossConfig::validate() const {
  if (!std::isfinite(lambda_lpips) || lambda_lpips < 0)
    throw InvalidInput("train.lambda_lpips must be finite and >= 0");
  if (perceptual_backend != "random_features" && perceptual_backend != "external")
    throw InvalidInput("unknown perceptual backend '" + perceptual_backend + "'");
  if (perceptual_backend == "external" && !external && lambda_lpips > 0)
    throw InvalidInput("perceptual backend 'external' selected but none registered");
  if (patch_h < 0 || patch_w < 0) throw InvalidInput("patch size must be >= 0 (0 = full image)");
}

std::shared_ptr<const PerceptualBackend> make_perceptual_backend(const LossConfig& config) {
  config.validate();
  if (config.perceptual_backend == "external") return config.external;
  return std::make_shared<RandomFeaturePerceptual>(config.perceptual_seed);
}

double perceptual_distance(const Image& a, const Image& b, const LossConfig& config) {
  if (a.height() != b.height() || a.width() != b.width())
    throw InvalidInput("perceptual_distance: image sizes differ");
  ag::NoGradGuard no_grad;
  return make_perceptual_backend(config)->distance(image_to_tensor(a), image_to_tensor(b)).item();
}

LossTerms total_loss(const Tensor& pred, const Tensor& gt, const LossConfig& config,
                     const PerceptualBackend* backend, std::span<const double> pixel_weights) {
  if (pred.shape() != gt.shape()) throw InvalidInput("total_loss: prediction and target differ in shape");
  LossTerms t;
  t.l2 = pixel_weights.empty() ? ag::mse(pred, gt) : ag::weighted_mse(pred, gt, pixel_weights);
  t.total = t.l2;
  if (config.lambda_lpips > 0) {
    if (!backend) throw InvalidInput("total_loss: perceptual weight set but no backend");
    t.perceptual = backend->distance(pred, gt);
    t.total = ag::add(t.l2, ag::scale(t.perceptual, config.lambda_lpips));
  }
  return t;
}

double total_loss(const Image& pred, const Image& gt, const LossConfig& config) {
  if (pred.height() != gt.height() || pred.width() != gt.width())
    throw InvalidInput("total_loss: image sizes differ");
  ag::NoGradGuard no_grad;
  const auto backend = config.lambda_lpips > 0 ? make_perceptual_backend(config) : nullptr;
  return total_loss(image_to_tensor(pred), image_to_tensor(gt), config, backend.get()).total.item();
}

// Optimiser -----------------------------------------------------------------------

void OptimConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw InvalidInput("train.lr must be > 0");
  if (batch_size < 1) throw InvalidInput("train.batch must be >= 1");
  if (max_steps < 0) throw InvalidInput("train.steps must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0))
    throw InvalidInput("invalid Adam hyperparameters");
}

void AdamState::reset(const FixerModel& model) {
  step = 0;
  m.clear();
  v.clear();
  for (const auto& p : model.parameters()) {
    m.emplace_back(p.tensor.numel(), 0.0);
    v.emplace_back(p.tensor.numel(), 0.0);
  }
}

namespace {

double f32(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace

void adam_step(FixerModel& model, AdamState& state, const OptimConfig& config) {
  auto& params = model.parameters();
  if (state.m.size() != params.size()) state.reset(model);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t), c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (p.tensor.grad().empty()) continue;
    if (config.freeze_encoder && parameter_group(p.name) == "encoder") continue;
    auto value = p.tensor.mutable_value();
    const auto grad = p.tensor.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = f32(config.beta1 * m[i] + (1.0 - config.beta1) * grad[i]);
      v[i] = f32(config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i]);
      value[i] = f32(value[i] - config.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps));
    }
  }
}

// Sampling ------------------------------------------------------------------------

CropWindow draw_crop(int image_h, int image_w, int patch_h, int patch_w, int multiple,
                     std::uint64_t seed, std::uint64_t draw) {
  CropWindow c;
  c.height = patch_h == 0 ? image_h : patch_h;
  c.width = patch_w == 0 ? image_w : patch_w;
  if (c.height > image_h || c.width > image_w)
    throw InvalidInput("patch " + std::to_string(c.height) + "x" + std::to_string(c.width) +
                       " exceeds image " + std::to_string(image_h) + "x" + std::to_string(image_w));
  if (c.height % multiple != 0 || c.width % multiple != 0)
    throw InvalidInput("patch size must be divisible by " + std::to_string(multiple));
  Rng rng = make_rng(seed, "crop", draw);
  c.top = static_cast<int>(uniform01(rng) * (image_h - c.height + 1));
  c.left = static_cast<int>(uniform01(rng) * (image_w - c.width + 1));
  return c;
}

std::size_t sample_for_draw(std::size_t n, std::uint64_t seed, std::uint64_t draw) {
  if (n == 0) throw InvalidInput("empty dataset");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "shuffle", draw / n);
  for (std::size_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i + 1));
    std::swap(order[i], order[j]);
  }
  return order[draw % n];
}

// Training loop -------------------------------------------------------------------

std::vector<LossRecord> train(FixerModel& model, AdamState& state,
                              const std::vector<TrainingSample>& samples, const LossConfig& loss,
                              const OptimConfig& optim, const TrainOptions& options) {
  optim.validate();
  loss.validate();
  if (samples.empty()) throw InvalidInput("train: empty dataset");
  const int multiple = model.config().stride();
  for (const auto& s : samples) {
    if (!s.i_deg.same_shape(s.i_gt) || s.i_warped.height() != s.i_gt.height() ||
        s.i_warped.width() != s.i_gt.width())
      throw InvalidInput("train: sample " + s.scene_id + "/" + std::to_string(s.frame_index) +
                         " has mismatched image sizes");
    draw_crop(s.i_gt.height(), s.i_gt.width(), loss.patch_h, loss.patch_w, multiple, 0, 0);
  }
  if (state.m.size() != model.parameters().size()) {
    const auto step = state.step;
    state.reset(model);
    state.step = step;
  }
  const auto backend = loss.lambda_lpips > 0 ? make_perceptual_backend(loss) : nullptr;
  const int batch = optim.batch_size;

  std::vector<LossRecord> history;
  while (state.step < optim.max_steps) {
    model.zero_grad();
    LossRecord rec;
    rec.step = state.step + 1;
    for (int b = 0; b < batch; ++b) {
      const std::uint64_t draw = static_cast<std::uint64_t>(state.step) * batch + b;
      const TrainingSample& s = samples[sample_for_draw(samples.size(), optim.seed, draw)];
      const CropWindow c = draw_crop(s.i_gt.height(), s.i_gt.width(), loss.patch_h, loss.patch_w,
                                     multiple, optim.seed, draw);
      const Image warped = crop(s.i_warped, c.top, c.left, c.height, c.width);
      const Tensor validity = validity_tensor(warped);
      const Tensor pred = fix(image_to_tensor(crop(s.i_deg, c.top, c.left, c.height, c.width)),
                              image_to_tensor(zero_fill_invalid(warped)), validity, model);
      const Tensor gt = image_to_tensor(crop(s.i_gt, c.top, c.left, c.height, c.width));
      const LossTerms terms = total_loss(pred, gt, loss, backend.get(),
                                         loss.mask_invalid ? validity.value() : std::span<const double>{});
      rec.loss += terms.total.item() / batch;
      rec.l2 += terms.l2.item() / batch;
      if (terms.perceptual.defined()) rec.perceptual += terms.perceptual.item() / batch;
      if (!std::isfinite(terms.total.item())) break;
      (batch == 1 ? terms.total : ag::scale(terms.total, 1.0 / batch)).backward();
    }
    if (!std::isfinite(rec.loss)) {
      if (!options.diagnostic_checkpoint.empty())
        save_training_checkpoint(options.diagnostic_checkpoint, model, state);
      throw NumericalError("training diverged at step " + std::to_string(rec.step) +
                           " (loss is not finite)" +
                           (options.diagnostic_checkpoint.empty()
                                ? std::string()
                                : "; diagnostic checkpoint written to " +
                                      options.diagnostic_checkpoint.string()));
    }
    adam_step(model, state, optim);
    history.push_back(rec);
    if (options.on_step) options.on_step(rec);
  }
  model.zero_grad();
  return history;
}

// Checkpoints ---------------------------------------------------------------------

void save_training_checkpoint(const std::filesystem::path& path, const FixerModel& model,
                              const AdamState& state) {
  Archive a = model_to_archive(model);
  a.set_config("train.step", std::to_string(state.step));
  const auto& params = model.parameters();
  if (state.m.size() == params.size())
    for (std::size_t k = 0; k < params.size(); ++k) {
      a.tensors.push_back({"adam.m/" + params[k].name, params[k].tensor.shape(), state.m[k]});
      a.tensors.push_back({"adam.v/" + params[k].name, params[k].tensor.shape(), state.v[k]});
    }
  write_archive(path, a);
}

TrainingCheckpoint load_training_checkpoint(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  TrainingCheckpoint ck{model_from_archive(a), {}};
  ck.state.reset(ck.model);
  if (const std::string* s = a.find_config("train.step")) {
    try {
      ck.state.step = std::stoll(*s);
    } catch (const std::exception&) {
      throw DataError("checkpoint " + path.string() + ": bad train.step");
    }
  }
  const auto& params = ck.model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const TensorRecord* m = a.find_tensor("adam.m/" + params[k].name);
    const TensorRecord* v = a.find_tensor("adam.v/" + params[k].name);
    if (!m || !v) {
      if (ck.state.step > 0)
        throw DataError("checkpoint " + path.string() + " lacks optimiser state for '" +
                        params[k].name + "'");
      continue;
    }
    if (m->values.size() != ck.state.m[k].size() || v->values.size() != ck.state.v[k].size())
      throw DataError("checkpoint " + path.string() + ": optimiser state has the wrong size");
    ck.state.m[k] = m->values;
    ck.state.v[k] = v->values;
  }
  return ck;
}

namespace {

std::string sample_stem(const TrainingSample& s) {
  return (s.scene_id.empty() ? std::string("sample") : s.scene_id) + "_" + frame_stem(s.frame_index);
}

}  // namespace

void write_sample_archive(const std::filesystem::path& dir, const std::vector<TrainingSample>& samples) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.tsv");
  if (!index) throw DataError("cannot write " + (dir / "index.tsv").string());
  index << "scene\tframe\tdeg\twarped\tmask\tgt\n";
  for (const auto& s : samples) {
    if (s.scene_id.find_first_of("\t\n/") != std::string::npos)
      throw InvalidInput("sample scene id '" + s.scene_id + "' contains a tab, newline or slash");
    const std::string stem = sample_stem(s);
    write_png(dir / (stem + "_deg.png"), s.i_deg);
    write_png(dir / (stem + "_warped.png"), s.i_warped);
    Mask mask = s.i_warped.has_mask() ? *s.i_warped.mask()
                                      : Mask(s.i_warped.height(), s.i_warped.width(), 1, 1);
    write_mask_png(dir / (stem + "_mask.png"), mask);
    write_png(dir / (stem + "_gt.png"), s.i_gt);
    index << s.scene_id << '\t' << s.frame_index << '\t' << stem << "_deg.png\t" << stem
          << "_warped.png\t" << stem << "_mask.png\t" << stem << "_gt.png\n";
  }
  if (!index) throw DataError("failed writing " + (dir / "index.tsv").string());
}

std::vector<TrainingSample> read_sample_archive(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.tsv");
  if (!index) throw DataError("no sample index at " + (dir / "index.tsv").string());
  std::vector<TrainingSample> out;
  std::string line;
  std::getline(index, line);
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      f.push_back(line.substr(start, tab - start));
    f.push_back(line.substr(start));
    if (f.size() != 6) throw DataError("malformed line in " + (dir / "index.tsv").string());
    TrainingSample s;
    s.scene_id = f[0];
    try {
      s.frame_index = std::stoi(f[1]);
    } catch (const std::exception&) {
      throw DataError("bad frame index '" + f[1] + "' in " + (dir / "index.tsv").string());
    }
    s.i_deg = read_png(dir / f[2]);
    s.i_warped = read_png(dir / f[3]);
    Mask mask = read_mask_png(dir / f[4]);
    if (!mask.same_extent(s.i_warped.height(), s.i_warped.width()))
      throw DataError(f[4] + " does not match the warped image size");
    s.i_warped.set_mask(std::move(mask));
    s.i_gt = read_png(dir / f[5]);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw DataError("sample archive " + dir.string() + " is empty");
  return out;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os.precision(17);
  os << "step,loss,l2,perceptual\n";
  for (const auto& r : history) os << r.step << ',' << r.loss << ',' << r.l2 << ',' << r.perceptual << '\n';
}

}  // namespace refix
