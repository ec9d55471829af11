#include "refix/fixer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "refix/errors.hpp"
#include "refix/rng.hpp"

namespace refix {

namespace {

std::string key(const std::string& prefix, int index, const std::string& leaf) {
  return prefix + "." + std::to_string(index) + "." + leaf;
}

/// Parameters are kept on the float32 grid so checkpoints round-trip exactly.
double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::vector<double> he_normal(Rng& rng, std::size_t n, int fan_in, double gain) {
  const double std = gain * std::sqrt(1.0 / fan_in);
  std::vector<double> v(n);
  for (double& x : v) x = f32(std * normal01(rng));
  return v;
}

Tensor conv(const Tensor& x, const FixerModel& m, const std::string& name, int stride = 1) {
  const Tensor& w = m.param(name + ".w");
  return ag::conv2d(x, w, m.param(name + ".b"), stride, w.dim(2) / 2);
}

}  // namespace

void FixerConfig::validate() const {
  if (scales < 1 || scales > 6) throw InvalidInput("model.scales must be in [1, 6]");
  if (static_cast<int>(channels.size()) != scales)
    throw InvalidInput("model.channels must list one width per scale (" + std::to_string(scales) +
                       "), got " + std::to_string(channels.size()));
  for (int c : channels)
    if (c < 1) throw InvalidInput("model.channels entries must be positive");
  if (latent_channels < 1) throw InvalidInput("model.latent_channels must be positive");
  if (!(max_offset > 0.0) || !std::isfinite(max_offset))
    throw InvalidInput("model.max_offset must be positive");
  if (attn_blocks < 0) throw InvalidInput("model.attn_blocks must be >= 0");
  if (attn_heads < 1 || latent_channels % attn_heads != 0)
    throw InvalidInput("model.attn_heads must divide latent_channels");
  if (predictor_hidden < 0) throw InvalidInput("model.predictor_hidden must be >= 0");
}

std::string parameter_group(const std::string& name) {
  if (name.rfind("enc.", 0) == 0) return "encoder";
  if (name.rfind("attn.", 0) == 0) return "attention";
  if (name.rfind("dec.", 0) == 0) return "decoder";
  if (name.find(".pred") != std::string::npos) return "offset_predictor";
  if (name.find(".dcn.") != std::string::npos) return "deformable";
  if (name.find(".gate.") != std::string::npos) return "gate";
  throw InvalidInput("unknown parameter '" + name + "'");
}

FixerModel::FixerModel(FixerConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng = make_rng(config_.seed, "init");
  const auto& ch = config_.channels;
  const int n = config_.scales, lat = config_.latent_channels;
  const double relu_gain = std::sqrt(2.0);

  auto conv_param = [&](const std::string& name, int co, int ci, int k, double gain) {
    add(name + ".w", {co, ci, k, k},
        he_normal(rng, static_cast<std::size_t>(co) * ci * k * k, ci * k * k, gain));
    add(name + ".b", {co}, std::vector<double>(co, 0.0));
  };

  conv_param("enc.stem", ch[0], 3, 3, relu_gain);
  for (int i = 0; i < n; ++i) {
    conv_param(key("enc", i, "down"), ch[i], i == 0 ? ch[0] : ch[i - 1], 3, relu_gain);
    conv_param(key("enc", i, "conv"), ch[i], ch[i], 3, relu_gain);
  }
  conv_param("enc.bottleneck", lat, ch[n - 1], 3, 1.0);

  for (int b = 0; b < config_.attn_blocks; ++b)
    for (const char* p : {"q", "k", "v"}) {
      // Small V keeps the residual attention close to identity at start.
      const double gain = std::string(p) == "v" ? 0.5 : 1.0;
      add(key("attn", b, p) + ".w", {lat, lat},
          he_normal(rng, static_cast<std::size_t>(lat) * lat, lat, gain));
      add(key("attn", b, p) + ".b", {lat}, std::vector<double>(lat, 0.0));
    }

  for (int i = 0; i < n; ++i) {
    const int c = ch[i], hid = config_.hidden(i);
    conv_param(key("ldi", i, "pred1"), hid, 2 * c + 1, 3, relu_gain);
    conv_param(key("ldi", i, "pred2"), 27, hid, 3, 0.1);
    if (config_.zero_init_offsets) {
      for (double& v : param(key("ldi", i, "pred2") + ".w").mutable_value()) v = 0.0;
    }
    conv_param(key("ldi", i, "dcn"), c, c, 3, 0.5);
    conv_param(key("ldi", i, "gate"), c, 2 * c + 1, 3, 0.5);
    for (double& v : param(key("ldi", i, "gate") + ".b").mutable_value()) v = 2.0;
  }

  conv_param("dec.in", ch[n - 1], lat, 3, relu_gain);
  for (int i = n - 1; i >= 0; --i) {
    const int c = ch[i], out = i == 0 ? ch[0] : ch[i - 1];
    conv_param(key("dec", i, "merge"), c, 2 * c, 1, 1.0);
    conv_param(key("dec", i, "conv"), c, c, 3, relu_gain);
    conv_param(key("dec", i, "up"), out, c, 3, relu_gain);
  }
  // Small head: the decoder starts close to passing the skip image through.
  conv_param("dec.head", 3, ch[0], 3, 0.05);
}

void FixerModel::add(std::string name, std::vector<int> shape, std::vector<double> values) {
  params_.push_back({std::move(name), Tensor::parameter(std::move(shape), std::move(values))});
}

const Tensor& FixerModel::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw InvalidInput("model has no parameter '" + name + "'");
}

Tensor& FixerModel::param(const std::string& name) {
  return const_cast<Tensor&>(std::as_const(*this).param(name));
}

bool FixerModel::has_param(const std::string& name) const noexcept {
  return std::any_of(params_.begin(), params_.end(), [&](const auto& p) { return p.name == name; });
}

void FixerModel::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::size_t FixerModel::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

// Image <-> tensor ------------------------------------------------------------

Tensor image_to_tensor(const Image& image) {
  const Image rgb = to_rgb(image);
  const int h = rgb.height(), w = rgb.width();
  std::vector<double> v(static_cast<std::size_t>(3) * h * w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) v[(c * h + y) * w + x] = rgb(y, x, c);
  return Tensor::constant({3, h, w}, std::move(v));
}

Tensor validity_tensor(const Image& image) {
  const int h = image.height(), w = image.width();
  std::vector<double> v(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) v[y * w + x] = image.is_valid(y, x) ? 1.0 : 0.0;
  return Tensor::constant({1, h, w}, std::move(v));
}

Image tensor_to_image(const Tensor& t) {
  if (t.rank() != 3 || (t.dim(0) != 1 && t.dim(0) != 3))
    throw InvalidInput("tensor_to_image: expects [1 or 3, H, W]");
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  std::vector<double> v(t.numel());
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) v[(static_cast<std::size_t>(y) * w + x) * c + ch] = t.value()[(ch * h + y) * w + x];
  return Image::from_values(h, w, c, std::move(v));
}

// Encoder -----------------------------------------------------------------------

EncoderOutput encode(const Tensor& image, const FixerModel& model) {
  const auto& cfg = model.config();
  if (image.rank() != 3 || image.dim(0) != 3) throw InvalidInput("encode: expects a [3, H, W] image");
  const int h = image.dim(1), w = image.dim(2), s = cfg.stride();
  if (h % s != 0 || w % s != 0 || h < s || w < s)
    throw InvalidInput("encode: image " + std::to_string(h) + "x" + std::to_string(w) +
                       " is not divisible by " + std::to_string(s) + "; pad it to a multiple of " +
                       std::to_string(s));
  EncoderOutput out;
  Tensor x = ag::silu(conv(image, model, "enc.stem"));
  for (int i = 0; i < cfg.scales; ++i) {
    x = ag::silu(conv(x, model, key("enc", i, "down"), 2));
    x = ag::silu(conv(x, model, key("enc", i, "conv")));
    out.taps.push_back(x);
  }
  out.latent = conv(x, model, "enc.bottleneck");
  return out;
}

EncoderOutput encode(const Image& image, const FixerModel& model) {
  return encode(image_to_tensor(image), model);
}

// Global structure anchoring --------------------------------------------------

AttentionWeights attention_weights(const FixerModel& m, int b) {
  if (b < 0 || b >= m.config().attn_blocks) throw InvalidInput("attention block out of range");
  auto p = [&](const char* n, const char* leaf) -> const Tensor& {
    return m.param(key("attn", b, n) + "." + leaf);
  };
  return {p("q", "w"), p("q", "b"), p("k", "w"), p("k", "b"), p("v", "w"), p("v", "b")};
}

Tensor mixed_attention(const Tensor& tokens, const std::vector<AttentionWeights>& blocks, int heads,
                       AttentionTrace* trace) {
  if (tokens.rank() != 2) throw InvalidInput("mixed_attention: tokens must be [N, C]");
  const int c = tokens.dim(1);
  if (heads < 1 || c % heads != 0) throw InvalidInput("mixed_attention: heads must divide C");
  const int d = c / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor x = tokens;
  for (const auto& blk : blocks) {
    const Tensor q = ag::add_row_bias(ag::matmul(x, blk.wq), blk.bq);
    const Tensor k = ag::add_row_bias(ag::matmul(x, blk.wk), blk.bk);
    const Tensor v = ag::add_row_bias(ag::matmul(x, blk.wv), blk.bv);
    std::vector<Tensor> outs;
    for (int hd = 0; hd < heads; ++hd) {
      const Tensor qh = heads == 1 ? q : ag::slice_cols(q, hd * d, d);
      const Tensor kh = heads == 1 ? k : ag::slice_cols(k, hd * d, d);
      const Tensor vh = heads == 1 ? v : ag::slice_cols(v, hd * d, d);
      const Tensor a = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt_d));
      if (trace) trace->weights.push_back(a);
      outs.push_back(ag::matmul(a, vh));
    }
    x = ag::add(x, heads == 1 ? outs[0] : ag::concat_cols(outs));
  }
  return x;
}

std::pair<Tensor, Tensor> reference_mixed_attention(const Tensor& z_deg, const Tensor& z_ref,
                                                    const FixerModel& model,
                                                    AttentionTrace* trace) {
  if (z_deg.rank() != 3 || z_deg.shape() != z_ref.shape())
    throw InvalidInput("reference_mixed_attention: latent shapes differ");
  if (z_deg.dim(0) != model.config().latent_channels)
    throw InvalidInput("reference_mixed_attention: latent channels do not match the model");
  const int h = z_deg.dim(1), w = z_deg.dim(2), hw = h * w;
  std::vector<AttentionWeights> blocks;
  for (int b = 0; b < model.config().attn_blocks; ++b) blocks.push_back(attention_weights(model, b));
  const Tensor tokens = ag::concat({ag::to_tokens(z_deg), ag::to_tokens(z_ref)});
  const Tensor mixed = mixed_attention(tokens, blocks, model.config().attn_heads, trace);
  return {ag::from_tokens(ag::slice(mixed, 0, hw), h, w),
          ag::from_tokens(ag::slice(mixed, hw, hw), h, w)};
}

// Local detail injection --------------------------------------------------------

Tensor pool_validity(const Tensor& validity, int h, int w) {
  if (!validity.defined()) return Tensor::constant({1, h, w}, std::vector<double>(static_cast<std::size_t>(h) * w, 1.0));
  if (validity.rank() != 3 || validity.dim(0) != 1) throw InvalidInput("validity must be [1, H, W]");
  const int H = validity.dim(1), W = validity.dim(2);
  if (H % h != 0 || W % w != 0 || H / h != W / w)
    throw InvalidInput("pool_validity: extent is not an integer downscale");
  const int f = H / h;
  std::vector<double> v(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) v[(y / f) * w + x / f] += validity.value()[y * W + x];
  for (double& e : v) e /= static_cast<double>(f) * f;
  return Tensor::constant({1, h, w}, std::move(v));
}

namespace {

void check_scale(const FixerModel& model, int scale, const char* op) {
  if (scale < 0 || scale >= model.config().scales)
    throw InvalidInput(std::string(op) + ": scale " + std::to_string(scale) + " out of range [0, " +
                       std::to_string(model.config().scales) + ")");
}

void check_pair(const Tensor& a, const Tensor& b, const FixerModel& model, int scale, const char* op) {
  check_scale(model, scale, op);
  if (a.rank() != 3 || a.shape() != b.shape())
    throw InvalidInput(std::string(op) + ": feature shapes differ");
  if (a.dim(0) != model.config().channels[scale])
    throw InvalidInput(std::string(op) + ": channel count does not match the scale");
}

}  // namespace

OffsetField predict_offsets(const Tensor& f_deg, const Tensor& f_ref, const FixerModel& model,
                            int scale, const Tensor& validity) {
  check_pair(f_deg, f_ref, model, scale, "predict_offsets");
  const Tensor m = pool_validity(validity, f_deg.dim(1), f_deg.dim(2));
  const Tensor in = ag::concat({f_deg, f_ref, m});
  const Tensor hidden = ag::silu(conv(in, model, key("ldi", scale, "pred1")));
  const Tensor raw = conv(hidden, model, key("ldi", scale, "pred2"));
  const double r = model.config().max_offset;
  return {ag::scale(ag::tanh(ag::slice(raw, 0, 18)), r), ag::sigmoid(ag::slice(raw, 18, 9))};
}

Tensor deformable_sample(const Tensor& f_ref, const OffsetField& field, const Tensor& weight,
                         const Tensor& bias) {
  return ag::add(f_ref, ag::deform_conv3x3(f_ref, field.offsets, field.mask, weight, bias));
}

Tensor deformable_sample(const Tensor& f_ref, const OffsetField& field, const FixerModel& model,
                         int scale) {
  check_scale(model, scale, "deformable_sample");
  return deformable_sample(f_ref, field, model.param(key("ldi", scale, "dcn") + ".w"),
                           model.param(key("ldi", scale, "dcn") + ".b"));
}

Tensor blend(const Tensor& gate, const Tensor& f_deg, const Tensor& f_ref) {
  return ag::add(ag::mul(gate, f_deg), ag::mul(ag::one_minus(gate), f_ref));
}

Tensor gate_map(const Tensor& f_deg, const Tensor& f_ref_aligned, const FixerModel& model,
                int scale, const Tensor& validity) {
  check_pair(f_deg, f_ref_aligned, model, scale, "gated_fusion");
  const Tensor m = pool_validity(validity, f_deg.dim(1), f_deg.dim(2));
  return ag::sigmoid(conv(ag::concat({f_deg, f_ref_aligned, m}), model, key("ldi", scale, "gate")));
}

Tensor gated_fusion(const Tensor& f_deg, const Tensor& f_ref_aligned, const FixerModel& model,
                    int scale, const Tensor& validity) {
  return blend(gate_map(f_deg, f_ref_aligned, model, scale, validity), f_deg, f_ref_aligned);
}

// Decoder -------------------------------------------------------------------------

Tensor decode(const Tensor& z, const std::vector<Tensor>& fused, const FixerModel& model,
              const Tensor& skip_image) {
  const auto& cfg = model.config();
  if (static_cast<int>(fused.size()) != cfg.scales)
    throw InvalidInput("decode: expected " + std::to_string(cfg.scales) + " fused scales, got " +
                       std::to_string(fused.size()));
  if (z.rank() != 3 || z.dim(0) != cfg.latent_channels)
    throw InvalidInput("decode: latent channel count does not match the model");
  Tensor x = ag::silu(conv(z, model, "dec.in"));
  for (int i = cfg.scales - 1; i >= 0; --i) {
    if (fused[i].rank() != 3 || fused[i].dim(1) != x.dim(1) || fused[i].dim(2) != x.dim(2) ||
        fused[i].dim(0) != cfg.channels[i])
      throw InvalidInput("decode: fused feature " + std::to_string(i) + " has the wrong shape");
    x = conv(ag::concat({x, fused[i]}), model, key("dec", i, "merge"));
    x = ag::silu(conv(x, model, key("dec", i, "conv")));
    x = ag::silu(conv(ag::upsample_nearest2x(x), model, key("dec", i, "up")));
  }
  Tensor logits = conv(x, model, "dec.head");
  if (skip_image.defined()) {
    if (skip_image.shape() != logits.shape()) throw InvalidInput("decode: skip image shape mismatch");
    std::vector<double> base(skip_image.numel());
    for (std::size_t k = 0; k < base.size(); ++k) {
      const double p = std::clamp(skip_image.value()[k], 1e-3, 1.0 - 1e-3);
      base[k] = std::log(p / (1.0 - p));
    }
    logits = ag::add(logits, Tensor::constant(logits.shape(), std::move(base)));
  }
  return ag::sigmoid(logits);
}

// Pipeline ------------------------------------------------------------------------

Tensor fix(const Tensor& deg, const Tensor& warped, const Tensor& validity, const FixerModel& model) {
  if (deg.shape() != warped.shape()) throw InvalidInput("fix: degraded and warped views differ in size");
  const EncoderOutput e_deg = encode(deg, model);
  const EncoderOutput e_ref = encode(warped, model);
  const auto [z, z_ref_unused] = reference_mixed_attention(e_deg.latent, e_ref.latent, model);
  std::vector<Tensor> fused;
  for (int i = 0; i < model.config().scales; ++i) {
    if (!model.config().local_detail_injection) {
      fused.push_back(e_deg.taps[i]);
      continue;
    }
    const OffsetField field = predict_offsets(e_deg.taps[i], e_ref.taps[i], model, i, validity);
    const Tensor aligned = deformable_sample(e_ref.taps[i], field, model, i);
    fused.push_back(gated_fusion(e_deg.taps[i], aligned, model, i, validity));
  }
  return decode(z, fused, model, deg);
}

namespace {

// Edge-replicate to (h, w); padded pixels of a masked image are invalid.
Image pad_to(const Image& image, int h, int w) {
  if (image.height() == h && image.width() == w) return image;
  const int c = image.channels();
  Image out(h, w, c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k)
        out.set(y, x, k, image(std::min(y, image.height() - 1), std::min(x, image.width() - 1), k));
  if (image.has_mask()) {
    Mask m(h, w, 1, 0);
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x) m(y, x) = (*image.mask())(y, x);
    out.set_mask(std::move(m));
  }
  return out;
}

Image crop_to(const Image& image, int h, int w) {
  if (image.height() == h && image.width() == w) return image;
  Image out(h, w, image.channels());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < image.channels(); ++k) out.set(y, x, k, image(y, x, k));
  return out;
}

}  // namespace

Image fix(const Image& i_deg, const Image& i_warped, const FixerModel& model) {
  if (i_deg.height() != i_warped.height() || i_deg.width() != i_warped.width())
    throw InvalidInput("fix: degraded and warped views differ in size");
  ag::NoGradGuard no_grad;
  const int s = model.config().stride();
  const int h = i_deg.height(), w = i_deg.width();
  const int ph = (h + s - 1) / s * s, pw = (w + s - 1) / s * s;
  const Image deg = pad_to(i_deg, ph, pw), warped = pad_to(i_warped, ph, pw);
  const Tensor out = fix(image_to_tensor(deg), image_to_tensor(zero_fill_invalid(warped)),
                         validity_tensor(warped), model);
  return crop_to(tensor_to_image(out), h, w);
}

}  // namespace refix
