#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "refix/autograd.hpp"
#include "refix/image.hpp"

namespace refix {

using ag::Tensor;

struct FixerConfig {
  int scales = 3;
  std::vector<int> channels{32, 64, 128};
  int latent_channels = 128;
  double max_offset = 4.0;
  int attn_blocks = 2;
  int attn_heads = 1;
  /// Hidden width of the offset predictor; 0 means "same as the scale's channels".
  int predictor_hidden = 0;
  /// When false the decoder receives the degraded-branch taps directly.
  bool local_detail_injection = true;
  /// Zero-initialise the last offset-predictor layer (identity alignment at start).
  bool zero_init_offsets = true;
  std::uint64_t seed = 0;

  void validate() const;
  int hidden(int scale) const { return predictor_hidden > 0 ? predictor_hidden : channels[scale]; }
  int stride() const { return 1 << scales; }
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

/// Parameter groups, used for gradient checks and encoder freezing.
inline constexpr const char* kParameterGroups[] = {"encoder",    "attention", "offset_predictor",
                                                   "deformable", "gate",      "decoder"};

std::string parameter_group(const std::string& name);

class FixerModel {
 public:
  explicit FixerModel(FixerConfig config);

  const FixerConfig& config() const noexcept { return config_; }
  const std::vector<NamedParameter>& parameters() const noexcept { return params_; }
  std::vector<NamedParameter>& parameters() noexcept { return params_; }

  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  bool has_param(const std::string& name) const noexcept;

  void zero_grad();
  std::size_t parameter_count() const noexcept;

 private:
  void add(std::string name, std::vector<int> shape, std::vector<double> values);

  FixerConfig config_;
  std::vector<NamedParameter> params_;
};

struct EncoderOutput {
  Tensor latent;              // [C, H / 2^n, W / 2^n]
  std::vector<Tensor> taps;   // scale i: [C_i, H / 2^(i+1), W / 2^(i+1)]
};

struct OffsetField {
  Tensor offsets;  // [18, H, W], (dy, dx) per tap, |value| < R
  Tensor mask;     // [9, H, W] in (0, 1)
};

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv;  // w: [C, C], b: [C]
};

/// Row-stochastic attention matrices recorded per block and head.
struct AttentionTrace {
  std::vector<Tensor> weights;
};

/// Image (converted to RGB) as a [3, H, W] constant tensor.
Tensor image_to_tensor(const Image& image);
/// Validity mask as a [1, H, W] tensor of 0/1 (all ones when the image has no mask).
Tensor validity_tensor(const Image& image);
Image tensor_to_image(const Tensor& t);

EncoderOutput encode(const Tensor& image, const FixerModel& model);
EncoderOutput encode(const Image& image, const FixerModel& model);

/// Residual scaled dot-product attention blocks over a [tokens, C] matrix.
Tensor mixed_attention(const Tensor& tokens, const std::vector<AttentionWeights>& blocks, int heads,
                       AttentionTrace* trace = nullptr);
AttentionWeights attention_weights(const FixerModel& model, int block);

/// Joint attention over the concatenated 2*h*w tokens of both latents.
std::pair<Tensor, Tensor> reference_mixed_attention(const Tensor& z_deg, const Tensor& z_ref,
                                                    const FixerModel& model,
                                                    AttentionTrace* trace = nullptr);

/// Validity pooled to a scale, [1, h, w]. An undefined input means all valid.
Tensor pool_validity(const Tensor& validity, int h, int w);

OffsetField predict_offsets(const Tensor& f_deg, const Tensor& f_ref, const FixerModel& model,
                            int scale, const Tensor& validity = {});

/// f_ref + DCN(f_ref; offsets, mask) with explicit convolution weights.
Tensor deformable_sample(const Tensor& f_ref, const OffsetField& field, const Tensor& weight,
                         const Tensor& bias);
Tensor deformable_sample(const Tensor& f_ref, const OffsetField& field, const FixerModel& model,
                         int scale);

/// gate * f_deg + (1 - gate) * f_ref.
Tensor blend(const Tensor& gate, const Tensor& f_deg, const Tensor& f_ref);
Tensor gate_map(const Tensor& f_deg, const Tensor& f_ref_aligned, const FixerModel& model,
                int scale, const Tensor& validity = {});
Tensor gated_fusion(const Tensor& f_deg, const Tensor& f_ref_aligned, const FixerModel& model,
                    int scale, const Tensor& validity = {});

/// Decoder with per-scale injection. When `skip_image` is given, the head
/// output is added to its logit before the final sigmoid.
Tensor decode(const Tensor& z, const std::vector<Tensor>& fused, const FixerModel& model,
              const Tensor& skip_image = {});

/// Full pipeline on tensors; `validity` is the warped view's [1, H, W] mask.
Tensor fix(const Tensor& deg, const Tensor& warped, const Tensor& validity, const FixerModel& model);
/// Any size: inputs are edge-padded to a multiple of the model stride and the
/// output is cropped back.
Image fix(const Image& i_deg, const Image& i_warped, const FixerModel& model);

}  // namespace refix
