#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace refix::ag {

struct Node {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  /// Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

/// Handle to a node of a dynamically recorded computation graph.
///
/// Feature maps are [C, H, W], matrices [rows, cols] and scalars [1].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(std::vector<int> shape, std::vector<double> values);
  static Tensor zeros(std::vector<int> shape);
  /// Leaf that accumulates gradients.
  static Tensor parameter(std::vector<int> shape, std::vector<double> values);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const std::vector<int>& shape() const noexcept { return node_->shape; }
  int dim(std::size_t i) const noexcept { return node_->shape[i]; }
  std::size_t rank() const noexcept { return node_->shape.size(); }
  std::size_t numel() const noexcept { return node_->value.size(); }

  std::span<const double> value() const noexcept { return node_->value; }
  /// Mutable access, meant for parameters and test perturbations.
  std::span<double> mutable_value() noexcept { return node_->value; }
  std::span<const double> grad() const noexcept { return node_->grad; }
  double item() const;

  bool requires_grad() const noexcept { return node_->requires_grad; }
  void zero_grad() noexcept { node_->grad.clear(); }

  /// Back-propagates from a scalar tensor.
  void backward() const;

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

// Elementwise -----------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// s * a + t
Tensor affine(const Tensor& a, double s, double t);
Tensor one_minus(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);

// Shape -----------------------------------------------------------------------
Tensor reshape(const Tensor& a, std::vector<int> shape);
/// Concatenation along the leading dimension.
Tensor concat(const std::vector<Tensor>& parts);
/// Rows [begin, begin + count) of the leading dimension.
Tensor slice(const Tensor& a, int begin, int count);
/// Columns [begin, begin + count) of a matrix.
Tensor slice_cols(const Tensor& a, int begin, int count);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// [C, H, W] -> [H*W, C]
Tensor to_tokens(const Tensor& a);
/// [H*W, C] -> [C, H, W]
Tensor from_tokens(const Tensor& a, int height, int width);
Tensor upsample_nearest2x(const Tensor& a);

// Linear algebra --------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// x[m, n] + bias[n] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor softmax_rows(const Tensor& a);

// Convolution -----------------------------------------------------------------
/// x[Ci, H, W], weight[Co, Ci, k, k], bias[Co] (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);

/// Modulated deformable 3x3 convolution, stride 1, padding 1.
/// offsets[18, H, W] holds (dy, dx) per tap, tap k = 3 * ky + kx;
/// mask[9, H, W] scales each bilinear sample. Out-of-bounds samples read 0.
Tensor deform_conv3x3(const Tensor& x, const Tensor& offsets, const Tensor& mask,
                      const Tensor& weight, const Tensor& bias);

// Reductions and losses ---------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);
/// mean over all entries of w * (a - b)^2, with w[H, W] broadcast over channels.
Tensor weighted_mse(const Tensor& a, const Tensor& b, std::span<const double> pixel_weights);
/// x / sqrt(sum_c x^2 + eps) at every pixel of a [C, H, W] map.
Tensor channel_normalize(const Tensor& a, double eps = 1e-10);

}  // namespace refix::ag
