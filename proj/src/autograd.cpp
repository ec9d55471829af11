#include "refix/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <unordered_set>

#include <Eigen/Core>

#include "refix/errors.hpp"

namespace refix::ag {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

std::size_t product(const std::vector<int>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw InvalidInput(std::string(op) + ": " + what);
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.defined() && b.defined(), op, "undefined operand");
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

/// Creates an op output. Parents and the backward closure are only kept when
/// recording is on and some input needs a gradient.
Tensor make_result(std::vector<int> shape, std::vector<double> value,
                   std::initializer_list<Tensor> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled)
    for (const Tensor& t : inputs)
      if (t.defined() && t.requires_grad()) needs = true;
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs)
      if (t.defined()) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor make_result_n(std::vector<int> shape, std::vector<double> value,
                     const std::vector<Tensor>& inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled)
    for (const Tensor& t : inputs)
      if (t.requires_grad()) needs = true;
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Unary elementwise op given f(x) and f'(x, y).
template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D df) {
  std::vector<double> out(a.numel());
  const auto in = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  auto pa = a.node();
  return make_result(a.shape(), std::move(out), {a}, [pa, df](Node& self) {
    if (!pa->requires_grad) return;
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(pa->value[i], self.value[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor Tensor::constant(std::vector<int> shape, std::vector<double> values) {
  require(product(shape) == values.size(), "Tensor::constant", "value count mismatch");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(std::vector<int> shape) {
  const std::size_t n = product(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::parameter(std::vector<int> shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

double Tensor::item() const {
  require(numel() == 1, "Tensor::item", "tensor is not a scalar");
  return node_->value[0];
}

void Tensor::backward() const {
  require(numel() == 1, "Tensor::backward", "backward() needs a scalar");
  if (!node_->requires_grad) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

// Elementwise ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  auto pa = a.node(), pb = b.node();
  return make_result(a.shape(), std::move(out), {a, b}, [pa, pb](Node& self) {
    for (Node* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  auto pa = a.node(), pb = b.node();
  return make_result(a.shape(), std::move(out), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto pa = a.node(), pb = b.node();
  return make_result(a.shape(), std::move(out), {a, b}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor affine(const Tensor& a, double s, double t) {
  return unary(a, [s, t](double x) { return s * x + t; }, [s](double, double) { return s; });
}

Tensor one_minus(const Tensor& a) {
  return unary(a, [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

// Shape -----------------------------------------------------------------------

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  require(product(shape) == a.numel(), "reshape", "element count mismatch");
  std::vector<double> out(a.value().begin(), a.value().end());
  auto pa = a.node();
  return make_result(std::move(shape), std::move(out), {a}, [pa](Node& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat", "no inputs");
  std::vector<int> shape = parts[0].shape();
  int lead = 0;
  for (const Tensor& t : parts) {
    require(t.rank() == shape.size() &&
                std::equal(t.shape().begin() + 1, t.shape().end(), shape.begin() + 1),
            "concat", "trailing dimensions differ");
    lead += t.dim(0);
  }
  shape[0] = lead;
  std::vector<double> out;
  out.reserve(product(shape));
  std::vector<std::shared_ptr<Node>> nodes;
  for (const Tensor& t : parts) {
    out.insert(out.end(), t.value().begin(), t.value().end());
    nodes.push_back(t.node());
  }
  return make_result_n(std::move(shape), std::move(out), parts, [nodes](Node& self) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) {
        auto& g = n->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += n->value.size();
    }
  });
}

Tensor slice(const Tensor& a, int begin, int count) {
  require(a.rank() >= 1 && begin >= 0 && count >= 1 && begin + count <= a.dim(0), "slice",
          "range out of bounds");
  const std::size_t stride = a.numel() / static_cast<std::size_t>(a.dim(0));
  std::vector<int> shape = a.shape();
  shape[0] = count;
  std::vector<double> out(a.value().begin() + begin * stride,
                          a.value().begin() + (begin + count) * stride);
  auto pa = a.node();
  const std::size_t offset = begin * stride;
  return make_result(std::move(shape), std::move(out), {a}, [pa, offset](Node& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, int begin, int count) {
  require(a.rank() == 2 && begin >= 0 && count >= 1 && begin + count <= a.dim(1), "slice_cols",
          "range out of bounds");
  const int rows = a.dim(0), cols = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(rows) * count);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < count; ++c) out[r * count + c] = a.value()[r * cols + begin + c];
  auto pa = a.node();
  return make_result({rows, count}, std::move(out), {a}, [pa, rows, cols, begin, count](Node& self) {
    auto& g = pa->ensure_grad();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < count; ++c) g[r * cols + begin + c] += self.grad[r * count + c];
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  const int rows = parts[0].dim(0);
  int cols = 0;
  for (const Tensor& t : parts) {
    require(t.rank() == 2 && t.dim(0) == rows, "concat_cols", "row count differs");
    cols += t.dim(1);
  }
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
  std::vector<std::shared_ptr<Node>> nodes;
  int c0 = 0;
  for (const Tensor& t : parts) {
    const int w = t.dim(1);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c) out[r * cols + c0 + c] = t.value()[r * w + c];
    c0 += w;
    nodes.push_back(t.node());
  }
  return make_result_n({rows, cols}, std::move(out), parts, [nodes, rows, cols](Node& self) {
    int c0 = 0;
    for (const auto& n : nodes) {
      const int w = n->shape[1];
      if (n->requires_grad) {
        auto& g = n->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < w; ++c) g[r * w + c] += self.grad[r * cols + c0 + c];
      }
      c0 += w;
    }
  });
}

Tensor to_tokens(const Tensor& a) {
  require(a.rank() == 3, "to_tokens", "expects [C, H, W]");
  const int c = a.dim(0), hw = a.dim(1) * a.dim(2);
  std::vector<double> out(a.numel());
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < hw; ++p) out[p * c + ch] = a.value()[ch * hw + p];
  auto pa = a.node();
  return make_result({hw, c}, std::move(out), {a}, [pa, c, hw](Node& self) {
    auto& g = pa->ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < hw; ++p) g[ch * hw + p] += self.grad[p * c + ch];
  });
}

Tensor from_tokens(const Tensor& a, int height, int width) {
  require(a.rank() == 2 && a.dim(0) == height * width, "from_tokens", "token count mismatch");
  const int c = a.dim(1), hw = height * width;
  std::vector<double> out(a.numel());
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < hw; ++p) out[ch * hw + p] = a.value()[p * c + ch];
  auto pa = a.node();
  return make_result({c, height, width}, std::move(out), {a}, [pa, c, hw](Node& self) {
    auto& g = pa->ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < hw; ++p) g[p * c + ch] += self.grad[ch * hw + p];
  });
}

Tensor upsample_nearest2x(const Tensor& a) {
  require(a.rank() == 3, "upsample_nearest2x", "expects [C, H, W]");
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  const int oh = 2 * h, ow = 2 * w;
  std::vector<double> out(static_cast<std::size_t>(c) * oh * ow);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        out[(ch * oh + y) * ow + x] = a.value()[(ch * h + y / 2) * w + x / 2];
  auto pa = a.node();
  return make_result({c, oh, ow}, std::move(out), {a}, [pa, c, h, w](Node& self) {
    auto& g = pa->ensure_grad();
    const int oh = 2 * h, ow = 2 * w;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
          g[(ch * h + y / 2) * w + x / 2] += self.grad[(ch * oh + y) * ow + x];
  });
}

// Linear algebra --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul",
          "incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  MapMat(out.data(), m, n).noalias() = CMapMat(a.value().data(), m, k) * CMapMat(b.value().data(), k, n);
  auto pa = a.node(), pb = b.node();
  return make_result({m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](Node& self) {
    CMapMat g(self.grad.data(), m, n);
    if (pa->requires_grad)
      MapMat(pa->ensure_grad().data(), m, k).noalias() += g * CMapMat(pb->value.data(), k, n).transpose();
    if (pb->requires_grad)
      MapMat(pb->ensure_grad().data(), k, n).noalias() += CMapMat(pa->value.data(), m, k).transpose() * g;
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), "matmul_nt",
          "incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  MapMat(out.data(), m, n).noalias() =
      CMapMat(a.value().data(), m, k) * CMapMat(b.value().data(), n, k).transpose();
  auto pa = a.node(), pb = b.node();
  return make_result({m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](Node& self) {
    CMapMat g(self.grad.data(), m, n);
    if (pa->requires_grad)
      MapMat(pa->ensure_grad().data(), m, k).noalias() += g * CMapMat(pb->value.data(), n, k);
    if (pb->requires_grad)
      MapMat(pb->ensure_grad().data(), n, k).noalias() += g.transpose() * CMapMat(pa->value.data(), m, k);
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require(x.rank() == 2 && bias.numel() == static_cast<std::size_t>(x.dim(1)), "add_row_bias",
          "bias length must equal column count");
  const int m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.value().begin(), x.value().end());
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out[r * n + c] += bias.value()[c];
  auto px = x.node(), pb = bias.node();
  return make_result({m, n}, std::move(out), {x, bias}, [px, pb, m, n](Node& self) {
    if (px->requires_grad) {
      auto& g = px->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
    }
  });
}

Tensor softmax_rows(const Tensor& a) {
  require(a.rank() == 2, "softmax_rows", "expects a matrix");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.numel());
  for (int r = 0; r < m; ++r) {
    const double* in = a.value().data() + static_cast<std::size_t>(r) * n;
    double* o = out.data() + static_cast<std::size_t>(r) * n;
    const double peak = *std::max_element(in, in + n);
    double total = 0.0;
    for (int c = 0; c < n; ++c) total += (o[c] = std::exp(in[c] - peak));
    for (int c = 0; c < n; ++c) o[c] /= total;
  }
  auto pa = a.node();
  return make_result({m, n}, std::move(out), {a}, [pa, m, n](Node& self) {
    auto& g = pa->ensure_grad();
    for (int r = 0; r < m; ++r) {
      const double* y = self.value.data() + static_cast<std::size_t>(r) * n;
      const double* gy = self.grad.data() + static_cast<std::size_t>(r) * n;
      double dot = 0.0;
      for (int c = 0; c < n; ++c) dot += gy[c] * y[c];
      for (int c = 0; c < n; ++c) g[r * n + c] += y[c] * (gy[c] - dot);
    }
  });
}

// Convolution -----------------------------------------------------------------

namespace {

struct ConvGeometry {
  int ci, h, w, k, stride, pad, oh, ow;
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const int ohw = g.oh * g.ow;
  for (int c = 0; c < g.ci; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * ohw;
        const double* plane = x + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          double* out = row + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.ow, 0.0);
            continue;
          }
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            out[ox] = (ix < 0 || ix >= g.w) ? 0.0 : plane[iy * g.w + ix];
          }
        }
      }
}

void col2im(const double* cols, const ConvGeometry& g, double* x) {
  const int ohw = g.oh * g.ow;
  for (int c = 0; c < g.ci; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * ohw;
        double* plane = x + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
  require(x.rank() == 3 && weight.rank() == 4, "conv2d", "expects x[C,H,W] and w[Co,Ci,k,k]");
  require(weight.dim(1) == x.dim(0), "conv2d",
          "input channels " + std::to_string(x.dim(0)) + " vs weight " + shape_str(weight.shape()));
  require(weight.dim(2) == weight.dim(3), "conv2d", "square kernels only");
  require(stride >= 1 && pad >= 0, "conv2d", "invalid stride/padding");
  const int co = weight.dim(0);
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), weight.dim(2), stride, pad, 0, 0};
  g.oh = (g.h + 2 * pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * pad - g.k) / stride + 1;
  require(g.oh >= 1 && g.ow >= 1, "conv2d", "input smaller than kernel");
  if (bias.defined()) require(bias.numel() == static_cast<std::size_t>(co), "conv2d", "bias length");
  const int kk = g.ci * g.k * g.k, ohw = g.oh * g.ow;

  const bool pointwise = g.k == 1 && stride == 1 && pad == 0;
  std::vector<double> cols;
  const double* cols_ptr = x.value().data();
  if (!pointwise) {
    cols.resize(static_cast<std::size_t>(kk) * ohw);
    im2col(x.value().data(), g, cols.data());
    cols_ptr = cols.data();
  }
  std::vector<double> out(static_cast<std::size_t>(co) * ohw);
  MapMat o(out.data(), co, ohw);
  o.noalias() = CMapMat(weight.value().data(), co, kk) * CMapMat(cols_ptr, kk, ohw);
  if (bias.defined())
    for (int c = 0; c < co; ++c) o.row(c).array() += bias.value()[c];

  auto px = x.node(), pw = weight.node();
  auto pb = bias.defined() ? bias.node() : nullptr;
  return make_result(
      {co, g.oh, g.ow}, std::move(out), {x, weight, bias},
      [px, pw, pb, g, co, kk, ohw, pointwise, cols = std::move(cols)](Node& self) {
        CMapMat gout(self.grad.data(), co, ohw);
        const double* cptr = pointwise ? px->value.data() : cols.data();
        if (pw->requires_grad)
          MapMat(pw->ensure_grad().data(), co, kk).noalias() += gout * CMapMat(cptr, kk, ohw).transpose();
        if (pb && pb->requires_grad) {
          auto& gb = pb->ensure_grad();
          for (int c = 0; c < co; ++c) gb[c] += gout.row(c).sum();
        }
        if (px->requires_grad) {
          auto& gx = px->ensure_grad();
          if (pointwise) {
            MapMat(gx.data(), kk, ohw).noalias() += CMapMat(pw->value.data(), co, kk).transpose() * gout;
          } else {
            std::vector<double> dcols(static_cast<std::size_t>(kk) * ohw);
            MapMat(dcols.data(), kk, ohw).noalias() = CMapMat(pw->value.data(), co, kk).transpose() * gout;
            col2im(dcols.data(), g, gx.data());
          }
        }
      });
}

namespace {

struct Tap {
  int y0, x0;
  double ty, tx;
};

inline double read_zero(const double* plane, int h, int w, int y, int x) {
  return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : plane[y * w + x];
}

}  // namespace

Tensor deform_conv3x3(const Tensor& x, const Tensor& offsets, const Tensor& mask,
                      const Tensor& weight, const Tensor& bias) {
  constexpr int K = 9;
  require(x.rank() == 3, "deform_conv3x3", "expects x[C,H,W]");
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2), hw = h * w;
  require(offsets.shape() == std::vector<int>{2 * K, h, w}, "deform_conv3x3",
          "offsets must be [18,H,W], got " + shape_str(offsets.shape()));
  require(mask.shape() == std::vector<int>{K, h, w}, "deform_conv3x3",
          "mask must be [9,H,W], got " + shape_str(mask.shape()));
  require(weight.rank() == 4 && weight.dim(1) == ci && weight.dim(2) == 3 && weight.dim(3) == 3,
          "deform_conv3x3", "weight must be [Co,Ci,3,3]");
  const int co = weight.dim(0), kk = ci * K;
  if (bias.defined()) require(bias.numel() == static_cast<std::size_t>(co), "deform_conv3x3", "bias length");

  // Sampling positions depend only on (tap, pixel).
  std::vector<Tap> taps(static_cast<std::size_t>(K) * hw);
  const double* off = offsets.value().data();
  for (int k = 0; k < K; ++k)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const int p = y * w + xx;
        const double py = y + (k / 3) - 1 + off[(2 * k) * hw + p];
        const double px = xx + (k % 3) - 1 + off[(2 * k + 1) * hw + p];
        const double fy = std::floor(py), fx = std::floor(px);
        taps[k * hw + p] = {static_cast<int>(fy), static_cast<int>(fx), py - fy, px - fx};
      }

  std::vector<double> cols(static_cast<std::size_t>(kk) * hw);
  const double* m = mask.value().data();
  for (int c = 0; c < ci; ++c) {
    const double* plane = x.value().data() + static_cast<std::size_t>(c) * hw;
    for (int k = 0; k < K; ++k) {
      double* row = cols.data() + static_cast<std::size_t>(c * K + k) * hw;
      for (int p = 0; p < hw; ++p) {
        const Tap& t = taps[k * hw + p];
        const double v00 = read_zero(plane, h, w, t.y0, t.x0);
        const double v01 = read_zero(plane, h, w, t.y0, t.x0 + 1);
        const double v10 = read_zero(plane, h, w, t.y0 + 1, t.x0);
        const double v11 = read_zero(plane, h, w, t.y0 + 1, t.x0 + 1);
        const double s = (1 - t.ty) * ((1 - t.tx) * v00 + t.tx * v01) +
                         t.ty * ((1 - t.tx) * v10 + t.tx * v11);
        row[p] = m[k * hw + p] * s;
      }
    }
  }
  std::vector<double> out(static_cast<std::size_t>(co) * hw);
  MapMat o(out.data(), co, hw);
  o.noalias() = CMapMat(weight.value().data(), co, kk) * CMapMat(cols.data(), kk, hw);
  if (bias.defined())
    for (int c = 0; c < co; ++c) o.row(c).array() += bias.value()[c];

  auto px = x.node(), poff = offsets.node(), pm = mask.node(), pw = weight.node();
  auto pb = bias.defined() ? bias.node() : nullptr;
  return make_result(
      {co, h, w}, std::move(out), {x, offsets, mask, weight, bias},
      [px, poff, pm, pw, pb, ci, co, h, w, hw, kk, taps = std::move(taps),
       cols = std::move(cols)](Node& self) {
        CMapMat gout(self.grad.data(), co, hw);
        if (pw->requires_grad)
          MapMat(pw->ensure_grad().data(), co, kk).noalias() += gout * CMapMat(cols.data(), kk, hw).transpose();
        if (pb && pb->requires_grad) {
          auto& gb = pb->ensure_grad();
          for (int c = 0; c < co; ++c) gb[c] += gout.row(c).sum();
        }
        const bool need_x = px->requires_grad, need_off = poff->requires_grad,
                   need_m = pm->requires_grad;
        if (!need_x && !need_off && !need_m) return;
        std::vector<double> dcols(static_cast<std::size_t>(kk) * hw);
        MapMat(dcols.data(), kk, hw).noalias() = CMapMat(pw->value.data(), co, kk).transpose() * gout;
        std::vector<double> dpos(static_cast<std::size_t>(2 * K) * hw, 0.0);
        std::vector<double> dmask(static_cast<std::size_t>(K) * hw, 0.0);
        double* gx = need_x ? px->ensure_grad().data() : nullptr;
        const double* mval = pm->value.data();
        for (int c = 0; c < ci; ++c) {
          const double* plane = px->value.data() + static_cast<std::size_t>(c) * hw;
          double* gplane = gx ? gx + static_cast<std::size_t>(c) * hw : nullptr;
          for (int k = 0; k < K; ++k) {
            const double* drow = dcols.data() + static_cast<std::size_t>(c * K + k) * hw;
            for (int p = 0; p < hw; ++p) {
              const double g = drow[p];
              if (g == 0.0) continue;
              const Tap& t = taps[k * hw + p];
              const double v00 = read_zero(plane, h, w, t.y0, t.x0);
              const double v01 = read_zero(plane, h, w, t.y0, t.x0 + 1);
              const double v10 = read_zero(plane, h, w, t.y0 + 1, t.x0);
              const double v11 = read_zero(plane, h, w, t.y0 + 1, t.x0 + 1);
              const double mk = mval[k * hw + p];
              if (need_m)
                dmask[k * hw + p] += g * ((1 - t.ty) * ((1 - t.tx) * v00 + t.tx * v01) +
                                          t.ty * ((1 - t.tx) * v10 + t.tx * v11));
              const double gs = g * mk;
              if (need_off) {
                dpos[(2 * k) * hw + p] += gs * ((1 - t.tx) * (v10 - v00) + t.tx * (v11 - v01));
                dpos[(2 * k + 1) * hw + p] += gs * ((1 - t.ty) * (v01 - v00) + t.ty * (v11 - v10));
              }
              if (gplane) {
                auto scatter = [&](int yy, int xx, double wgt) {
                  if (yy >= 0 && yy < h && xx >= 0 && xx < w) gplane[yy * w + xx] += gs * wgt;
                };
                scatter(t.y0, t.x0, (1 - t.ty) * (1 - t.tx));
                scatter(t.y0, t.x0 + 1, (1 - t.ty) * t.tx);
                scatter(t.y0 + 1, t.x0, t.ty * (1 - t.tx));
                scatter(t.y0 + 1, t.x0 + 1, t.ty * t.tx);
              }
            }
          }
        }
        if (need_off) {
          auto& go = poff->ensure_grad();
          for (std::size_t i = 0; i < go.size(); ++i) go[i] += dpos[i];
        }
        if (need_m) {
          auto& gm = pm->ensure_grad();
          for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += dmask[i];
        }
      });
}

// Reductions ------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.value()) total += v;
  auto pa = a.node();
  return make_result({1}, {total}, {a}, [pa](Node& self) {
    auto& g = pa->ensure_grad();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mse");
  const std::size_t n = a.numel();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - b.value()[i];
    total += d * d;
  }
  auto pa = a.node(), pb = b.node();
  return make_result({1}, {total / static_cast<double>(n)}, {a, b}, [pa, pb, n](Node& self) {
    const double s = 2.0 * self.grad[0] / static_cast<double>(n);
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += s * (pa->value[i] - pb->value[i]);
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] -= s * (pa->value[i] - pb->value[i]);
    }
  });
}

Tensor weighted_mse(const Tensor& a, const Tensor& b, std::span<const double> pixel_weights) {
  require_same(a, b, "weighted_mse");
  require(a.rank() == 3 && pixel_weights.size() == static_cast<std::size_t>(a.dim(1)) * a.dim(2),
          "weighted_mse", "weights must be [H, W]");
  const std::size_t n = a.numel(), hw = pixel_weights.size();
  std::vector<double> wts(pixel_weights.begin(), pixel_weights.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - b.value()[i];
    total += wts[i % hw] * d * d;
  }
  auto pa = a.node(), pb = b.node();
  return make_result({1}, {total / static_cast<double>(n)}, {a, b},
                     [pa, pb, n, hw, wts = std::move(wts)](Node& self) {
                       const double s = 2.0 * self.grad[0] / static_cast<double>(n);
                       for (Node* p : {pa.get(), pb.get()}) {
                         if (!p->requires_grad) continue;
                         const double sign = p == pa.get() ? 1.0 : -1.0;
                         auto& g = p->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           g[i] += sign * s * wts[i % hw] * (pa->value[i] - pb->value[i]);
                       }
                     });
}

Tensor channel_normalize(const Tensor& a, double eps) {
  require(a.rank() == 3, "channel_normalize", "expects [C, H, W]");
  const int c = a.dim(0), hw = a.dim(1) * a.dim(2);
  std::vector<double> out(a.numel());
  std::vector<double> norms(hw);
  for (int p = 0; p < hw; ++p) {
    double s = eps;
    for (int ch = 0; ch < c; ++ch) s += a.value()[ch * hw + p] * a.value()[ch * hw + p];
    norms[p] = std::sqrt(s);
    for (int ch = 0; ch < c; ++ch) out[ch * hw + p] = a.value()[ch * hw + p] / norms[p];
  }
  auto pa = a.node();
  return make_result(a.shape(), std::move(out), {a}, [pa, c, hw, norms = std::move(norms)](Node& self) {
    auto& g = pa->ensure_grad();
    for (int p = 0; p < hw; ++p) {
      double dot = 0.0;
      for (int ch = 0; ch < c; ++ch) dot += self.grad[ch * hw + p] * self.value[ch * hw + p];
      for (int ch = 0; ch < c; ++ch)
        g[ch * hw + p] += (self.grad[ch * hw + p] - self.value[ch * hw + p] * dot) / norms[p];
    }
  });
}

}  // namespace refix::ag
