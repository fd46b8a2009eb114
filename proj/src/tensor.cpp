#include "lpmii/tensor.hpp"

#include "lpmii/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace lpmii::tensor {

namespace {

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  throw ShapeError(to_string(kind) + ": " + detail);
}

void require_rank(OpKind kind, const Tensor& t, std::size_t rank, const char* what) {
  if (!t.defined()) shape_error(kind, std::string(what) + " is undefined");
  if (t.rank() != rank) {
    shape_error(kind, std::string(what) + " must have rank " + std::to_string(rank) +
                          ", got " + to_string(t.shape()));
  }
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;

template <typename Lhs, typename Rhs>
void gemm_into(Eigen::Map<RowMatrix>& c, const Lhs& lhs, const Rhs& rhs, double alpha, double beta) {
  if (beta == 0.0) {
    c.noalias() = alpha * (lhs * rhs);
    return;
  }
  if (beta != 1.0) c *= beta;
  c.noalias() += alpha * (lhs * rhs);
}

// C[m,n] = alpha * op(A) * op(B) + beta * C, row-major.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, const double* b, double beta, double* c) {
  if (m == 0 || n == 0) return;
  const auto rows = [](std::size_t r) { return static_cast<Eigen::Index>(r); };
  Eigen::Map<RowMatrix> cm(c, rows(m), rows(n));
  const ConstMap am(a, rows(trans_a ? k : m), rows(trans_a ? m : k));
  const ConstMap bm(b, rows(trans_b ? n : k), rows(trans_b ? k : n));
  if (trans_a && trans_b) {
    gemm_into(cm, am.transpose(), bm.transpose(), alpha, beta);
  } else if (trans_a) {
    gemm_into(cm, am.transpose(), bm, alpha, beta);
  } else if (trans_b) {
    gemm_into(cm, am, bm.transpose(), alpha, beta);
  } else {
    gemm_into(cm, am, bm, alpha, beta);
  }
}

void accumulate(Tensor& t, std::span<const double> delta) {
  auto g = t.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

double softplus_value(double v) {
  return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// Per-thread scratch that is grown on demand and never cleared; callers overwrite what they use.
double* scratch(int slot, std::size_t n) {
  thread_local std::vector<double> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

// Upper bound on the im2col buffer, in doubles.
constexpr std::size_t kConvChunkDoubles = std::size_t{1} << 16;

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kh, kw;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

// Output indices [lo, hi) whose input index o*stride + j - padding lies inside [0, extent).
std::pair<std::size_t, std::size_t> valid_range(std::size_t extent, std::size_t out, std::size_t stride,
                                                std::size_t j, std::size_t padding) {
  if (extent + padding <= j) return {0, 0};
  const std::size_t lo = j >= padding ? 0 : (padding - j + stride - 1) / stride;
  const std::size_t hi = std::min(out, (extent + padding - j - 1) / stride + 1);
  return {std::min(lo, hi), hi};
}

// cols[(c*kh + i)*kw + j, n*P + oy*out_w + ox] = x[n, c, oy*s + i - p, ox*s + j - p]
void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t row_len = g.batch * g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      const auto [ylo, yhi] = valid_range(g.height, g.out_h, g.stride, i, g.padding);
      for (std::size_t j = 0; j < g.kw; ++j) {
        const auto [xlo, xhi] = valid_range(g.width, g.out_w, g.stride, j, g.padding);
        double* row = cols + ((c * g.kh + i) * g.kw + j) * row_len;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const double* plane = x + (n * g.channels + c) * g.height * g.width;
          double* dst = row + n * g.positions();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            double* out_row = dst + oy * g.out_w;
            if (oy < ylo || oy >= yhi) {
              std::fill_n(out_row, g.out_w, 0.0);
              continue;
            }
            const double* in_row = plane + (oy * g.stride + i - g.padding) * g.width;
            std::fill(out_row, out_row + xlo, 0.0);
            for (std::size_t ox = xlo; ox < xhi; ++ox) out_row[ox] = in_row[ox * g.stride + j - g.padding];
            std::fill(out_row + xhi, out_row + g.out_w, 0.0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates every column entry back onto its input pixel.
void col2im(const ConvGeometry& g, const double* cols, double* dx) {
  const std::size_t row_len = g.batch * g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      const auto [ylo, yhi] = valid_range(g.height, g.out_h, g.stride, i, g.padding);
      for (std::size_t j = 0; j < g.kw; ++j) {
        const auto [xlo, xhi] = valid_range(g.width, g.out_w, g.stride, j, g.padding);
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * row_len;
        for (std::size_t n = 0; n < g.batch; ++n) {
          double* plane = dx + (n * g.channels + c) * g.height * g.width;
          const double* src = row + n * g.positions();
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            double* in_row = plane + (oy * g.stride + i - g.padding) * g.width;
            const double* col_row = src + oy * g.out_w;
            for (std::size_t ox = xlo; ox < xhi; ++ox) in_row[ox * g.stride + j - g.padding] += col_row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

std::string to_string(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::linear: return "linear";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::softplus: return "softplus";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::mse: return "mse";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), storage_(std::make_shared<Storage>()) {
  storage_->value.assign(numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), storage_(std::make_shared<Storage>()) {
  if (values.size() != numel(shape_)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " values do not fill shape " + to_string(shape_));
  }
  storage_->value = std::move(values);
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.storage_->requires_grad = true;
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::size() const { return storage_ ? storage_->value.size() : 0; }

std::span<double> Tensor::data() { return storage_->value; }
std::span<const double> Tensor::data() const { return storage_->value; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not a scalar");
  return storage_->value.front();
}

bool Tensor::requires_grad() const { return storage_ && storage_->requires_grad; }

bool Tensor::has_grad() const { return storage_ && !storage_->grad.empty(); }

std::span<double> Tensor::grad() {
  if (storage_->grad.empty()) storage_->grad.assign(storage_->value.size(), 0.0);
  return storage_->grad;
}

std::span<const double> Tensor::grad() const {
  return storage_ ? std::span<const double>(storage_->grad) : std::span<const double>{};
}

void Tensor::zero_grad() {
  if (storage_ && !storage_->grad.empty()) std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0);
}

Tensor Tensor::reshape(Shape shape) const {
  if (numel(shape) != size()) {
    throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
  }
  Tensor view = *this;
  view.shape_ = std::move(shape);
  return view;
}

Tensor Tensor::clone() const {
  Tensor copy(shape_, storage_->value);
  copy.storage_->requires_grad = storage_->requires_grad;
  return copy;
}

Tensor Tensor::detach() const { return Tensor(shape_, storage_->value); }

// ---------------------------------------------------------------------------
// Graph bookkeeping

bool Graph::tracks(std::initializer_list<const Tensor*> inputs) const {
  if (!record_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

Tensor Graph::make_output(Shape shape, std::initializer_list<const Tensor*> inputs) const {
  std::vector<double> values(numel(shape));
  // Intermediates carry requires_grad so downstream ops record them.
  if (tracks(inputs)) return Tensor::parameter(std::move(shape), std::move(values));
  return Tensor(std::move(shape), std::move(values));
}

void Graph::push(OpKind kind, std::vector<Tensor> inputs, const Tensor& output,
                 std::function<void(std::span<const double>)> backward) {
  if (!output.requires_grad()) return;
  nodes_.push_back(Node{kind, std::move(inputs), output, std::move(backward)});
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (consumed_) throw Error("backward: graph has already been differentiated");
  consumed_ = true;
  if (!loss.requires_grad()) return;

  Tensor seed = loss;
  seed.grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    const Tensor& out = it->output;
    it->backward(out.grad());
  }
}

// ---------------------------------------------------------------------------
// Ops

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require_rank(OpKind::matmul, a, 2, "lhs");
  require_rank(OpKind::matmul, b, 2, "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    shape_error(OpKind::matmul, "inner dimensions disagree: " + to_string(a.shape()) + " x " +
                                    to_string(b.shape()));
  }
  Tensor out = make_output({m, n}, {&a, &b});
  gemm(false, false, m, n, k, 1.0, a.data().data(), b.data().data(), 0.0, out.data().data());
  push(OpKind::matmul, {a, b}, out, [a = a, b = b, m, n, k](std::span<const double> g) mutable {
    if (a.requires_grad()) gemm(false, true, m, k, n, 1.0, g.data(), b.data().data(), 1.0, a.grad().data());
    if (b.requires_grad()) gemm(true, false, k, n, m, 1.0, a.data().data(), g.data(), 1.0, b.grad().data());
  });
  return out;
}

Tensor Graph::linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(OpKind::linear, x, 2, "input");
  require_rank(OpKind::linear, weight, 2, "weight");
  require_rank(OpKind::linear, bias, 1, "bias");
  const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    shape_error(OpKind::linear, "weight " + to_string(weight.shape()) + " does not accept input " +
                                    to_string(x.shape()));
  }
  if (bias.dim(0) != out_dim) {
    shape_error(OpKind::linear, "bias " + to_string(bias.shape()) + " does not match weight " +
                                    to_string(weight.shape()));
  }
  Tensor out = make_output({batch, out_dim}, {&x, &weight, &bias});
  auto y = out.data();
  const auto b = bias.data();
  for (std::size_t r = 0; r < batch; ++r) std::copy(b.begin(), b.end(), y.begin() + r * out_dim);
  gemm(false, true, batch, out_dim, in, 1.0, x.data().data(), weight.data().data(), 1.0, y.data());
  push(OpKind::linear, {x, weight, bias}, out,
       [x = x, weight = weight, bias = bias, batch, in, out_dim](std::span<const double> g) mutable {
         if (x.requires_grad()) gemm(false, false, batch, in, out_dim, 1.0, g.data(), weight.data().data(), 1.0, x.grad().data());
         if (weight.requires_grad()) gemm(true, false, out_dim, in, batch, 1.0, g.data(), x.data().data(), 1.0, weight.grad().data());
         if (bias.requires_grad()) {
           auto db = bias.grad();
           for (std::size_t r = 0; r < batch; ++r)
             for (std::size_t o = 0; o < out_dim; ++o) db[o] += g[r * out_dim + o];
         }
       });
  return out;
}

Tensor Graph::conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     Conv2dOptions options) {
  require_rank(OpKind::conv2d, x, 4, "input");
  require_rank(OpKind::conv2d, weight, 4, "weight");
  require_rank(OpKind::conv2d, bias, 1, "bias");
  if (options.stride == 0) shape_error(OpKind::conv2d, "stride must be positive");
  ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2),
                   weight.dim(3), options.stride, options.padding, 0, 0};
  if (weight.dim(1) != geo.channels) {
    shape_error(OpKind::conv2d, "weight " + to_string(weight.shape()) + " expects " +
                                    std::to_string(weight.dim(1)) + " input channels, input " +
                                    to_string(x.shape()) + " has " + std::to_string(geo.channels));
  }
  if (bias.dim(0) != geo.out_channels) {
    shape_error(OpKind::conv2d, "bias " + to_string(bias.shape()) + " does not match " +
                                    std::to_string(geo.out_channels) + " output channels");
  }
  const std::size_t padded_h = geo.height + 2 * geo.padding;
  const std::size_t padded_w = geo.width + 2 * geo.padding;
  if (geo.kh > padded_h || geo.kw > padded_w) {
    shape_error(OpKind::conv2d, "kernel " + std::to_string(geo.kh) + "x" + std::to_string(geo.kw) +
                                    " does not fit padded input " + std::to_string(padded_h) +
                                    "x" + std::to_string(padded_w));
  }
  geo.out_h = (padded_h - geo.kh) / geo.stride + 1;
  geo.out_w = (padded_w - geo.kw) / geo.stride + 1;

  // Samples are processed in chunks so each GEMM is wide but the column buffer stays bounded.
  const std::size_t patch = geo.patch();
  const std::size_t P = geo.positions();
  const std::size_t in_stride = geo.channels * geo.height * geo.width;
  const std::size_t out_stride = geo.out_channels * P;
  const std::size_t chunk = std::clamp<std::size_t>(kConvChunkDoubles / std::max<std::size_t>(1, patch * P), 1,
                                                    std::max<std::size_t>(1, geo.batch));

  Tensor out = make_output({geo.batch, geo.out_channels, geo.out_h, geo.out_w}, {&x, &weight, &bias});
  auto y = out.data();
  const auto b = bias.data();
  double* cols = scratch(0, patch * P * chunk);
  double* prod = scratch(1, geo.out_channels * P * chunk);
  for (std::size_t n0 = 0; n0 < geo.batch; n0 += chunk) {
    ConvGeometry part = geo;
    part.batch = std::min(chunk, geo.batch - n0);
    const std::size_t cp = part.batch * P;
    im2col(part, x.data().data() + n0 * in_stride, cols);
    gemm(false, false, geo.out_channels, cp, patch, 1.0, weight.data().data(), cols, 0.0, prod);
    for (std::size_t n = 0; n < part.batch; ++n)
      for (std::size_t o = 0; o < geo.out_channels; ++o) {
        const double* src = prod + o * cp + n * P;
        double* dst = y.data() + (n0 + n) * out_stride + o * P;
        for (std::size_t q = 0; q < P; ++q) dst[q] = src[q] + b[o];
      }
  }

  push(OpKind::conv2d, {x, weight, bias}, out,
       [x = x, weight = weight, bias = bias, geo, chunk](std::span<const double> g) mutable {
         const std::size_t patch = geo.patch();
         const std::size_t P = geo.positions();
         const std::size_t in_stride = geo.channels * geo.height * geo.width;
         const std::size_t out_stride = geo.out_channels * P;
         if (bias.requires_grad()) {
           auto db = bias.grad();
           for (std::size_t n = 0; n < geo.batch; ++n)
             for (std::size_t o = 0; o < geo.out_channels; ++o) {
               const double* row = g.data() + n * out_stride + o * P;
               db[o] += std::accumulate(row, row + P, 0.0);
             }
         }
         if (!weight.requires_grad() && !x.requires_grad()) return;
         double* cols = scratch(0, patch * P * chunk);
         double* gt = scratch(1, geo.out_channels * P * chunk);
         for (std::size_t n0 = 0; n0 < geo.batch; n0 += chunk) {
           ConvGeometry part = geo;
           part.batch = std::min(chunk, geo.batch - n0);
           const std::size_t cp = part.batch * P;
           for (std::size_t n = 0; n < part.batch; ++n)
             for (std::size_t o = 0; o < geo.out_channels; ++o)
               std::copy_n(g.data() + (n0 + n) * out_stride + o * P, P, gt + o * cp + n * P);
           if (weight.requires_grad()) {
             im2col(part, x.data().data() + n0 * in_stride, cols);
             gemm(false, true, geo.out_channels, patch, cp, 1.0, gt, cols, 1.0, weight.grad().data());
           }
           if (x.requires_grad()) {
             gemm(true, false, patch, cp, geo.out_channels, 1.0, weight.data().data(), gt, 0.0, cols);
             col2im(part, cols, x.grad().data() + n0 * in_stride);
           }
         }
       });
  return out;
}

Tensor Graph::relu(const Tensor& x) {
  Tensor out = make_output(x.shape(), {&x});
  const auto in = x.data();
  auto y = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) y[i] = in[i] > 0.0 ? in[i] : 0.0;
  push(OpKind::relu, {x}, out, [x = x](std::span<const double> g) mutable {
    const auto in = x.data();
    auto dx = x.grad();
    for (std::size_t i = 0; i < in.size(); ++i) dx[i] += in[i] > 0.0 ? g[i] : 0.0;
  });
  return out;
}

Tensor Graph::softplus(const Tensor& x) {
  Tensor out = make_output(x.shape(), {&x});
  const auto in = x.data();
  auto y = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) y[i] = softplus_value(in[i]);
  push(OpKind::softplus, {x}, out, [x = x](std::span<const double> g) mutable {
    const auto in = x.data();
    auto dx = x.grad();
    for (std::size_t i = 0; i < in.size(); ++i) dx[i] += g[i] * sigmoid(in[i]);
  });
  return out;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(OpKind::add, "shapes differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor out = make_output(a.shape(), {&a, &b});
  const auto av = a.data(), bv = b.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  push(OpKind::add, {a, b}, out, [a = a, b = b](std::span<const double> g) mutable {
    if (a.requires_grad()) accumulate(a, g);
    if (b.requires_grad()) accumulate(b, g);
  });
  return out;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(OpKind::mul, "shapes differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor out = make_output(a.shape(), {&a, &b});
  const auto av = a.data(), bv = b.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  push(OpKind::mul, {a, b}, out, [a = a, b = b](std::span<const double> g) mutable {
    if (a.requires_grad()) {
      auto da = a.grad();
      const auto bv = b.data();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto db = b.grad();
      const auto av = a.data();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * av[i];
    }
  });
  return out;
}

Tensor Graph::scale(const Tensor& x, double factor) {
  Tensor out = make_output(x.shape(), {&x});
  const auto in = x.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = in[i] * factor;
  push(OpKind::scale, {x}, out, [x = x, factor](std::span<const double> g) mutable {
    auto dx = x.grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * factor;
  });
  return out;
}

Tensor Graph::global_avg_pool(const Tensor& x) {
  require_rank(OpKind::global_avg_pool, x, 4, "input");
  const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
  if (area == 0) shape_error(OpKind::global_avg_pool, "empty spatial extent");
  Tensor out = make_output({n, c}, {&x});
  const auto in = x.data();
  auto y = out.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < area; ++p) acc += in[i * area + p];
    y[i] = acc / static_cast<double>(area);
  }
  push(OpKind::global_avg_pool, {x}, out, [x = x, n, c, area](std::span<const double> g) mutable {
    auto dx = x.grad();
    const double inv = 1.0 / static_cast<double>(area);
    for (std::size_t i = 0; i < n * c; ++i)
      for (std::size_t p = 0; p < area; ++p) dx[i * area + p] += g[i] * inv;
  });
  return out;
}

Tensor Graph::sum(const Tensor& x) {
  Tensor out = make_output({}, {&x});
  const auto in = x.data();
  out.data()[0] = std::accumulate(in.begin(), in.end(), 0.0);
  push(OpKind::sum, {x}, out, [x = x](std::span<const double> g) mutable {
    for (double& d : x.grad()) d += g[0];
  });
  return out;
}

Tensor Graph::mean(const Tensor& x) {
  if (x.size() == 0) shape_error(OpKind::mean, "empty tensor");
  Tensor out = make_output({}, {&x});
  const auto in = x.data();
  const double count = static_cast<double>(in.size());
  out.data()[0] = std::accumulate(in.begin(), in.end(), 0.0) / count;
  push(OpKind::mean, {x}, out, [x = x, count](std::span<const double> g) mutable {
    for (double& d : x.grad()) d += g[0] / count;
  });
  return out;
}

Tensor Graph::softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank(OpKind::softmax_cross_entropy, logits, 2, "logits");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != rows) {
    shape_error(OpKind::softmax_cross_entropy,
                std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  }
  if (rows == 0 || classes == 0) shape_error(OpKind::softmax_cross_entropy, "empty logits");
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= classes) {
      throw RangeError("softmax_cross_entropy: target " + std::to_string(targets[r]) + " in row " +
                       std::to_string(r) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<double>>(rows * classes);
  const auto z = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = z.data() + r * classes;
    const double peak = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - peak);
    const double log_denom = std::log(denom);
    for (std::size_t c = 0; c < classes; ++c)
      (*probs)[r * classes + c] = std::exp(row[c] - peak - log_denom);
    total += log_denom - (row[targets[r]] - peak);
  }
  Tensor out = make_output({}, {&logits});
  out.data()[0] = total / static_cast<double>(rows);
  std::vector<int> labels(targets.begin(), targets.end());
  push(OpKind::softmax_cross_entropy, {logits}, out,
       [logits = logits, probs, labels = std::move(labels), rows, classes](std::span<const double> g) mutable {
         auto dz = logits.grad();
         const double w = g[0] / static_cast<double>(rows);
         for (std::size_t r = 0; r < rows; ++r)
           for (std::size_t c = 0; c < classes; ++c) {
             const double onehot = static_cast<int>(c) == labels[r] ? 1.0 : 0.0;
             dz[r * classes + c] += w * ((*probs)[r * classes + c] - onehot);
           }
       });
  return out;
}

Tensor Graph::mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    shape_error(OpKind::mse, "prediction " + to_string(pred.shape()) + " vs target " +
                                 to_string(target.shape()));
  }
  if (pred.size() == 0) shape_error(OpKind::mse, "empty tensors");
  const auto p = pred.data(), t = target.data();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] - t[i]) * (p[i] - t[i]);
  const double count = static_cast<double>(p.size());
  Tensor out = make_output({}, {&pred, &target});
  out.data()[0] = total / count;
  push(OpKind::mse, {pred, target}, out, [pred = pred, target = target, count](std::span<const double> g) mutable {
    const auto p = pred.data(), t = target.data();
    const double w = 2.0 * g[0] / count;
    if (pred.requires_grad()) {
      auto dp = pred.grad();
      for (std::size_t i = 0; i < p.size(); ++i) dp[i] += w * (p[i] - t[i]);
    }
    if (target.requires_grad()) {
      auto dt = target.grad();
      for (std::size_t i = 0; i < p.size(); ++i) dt[i] -= w * (p[i] - t[i]);
    }
  });
  return out;
}

Tensor softmax(const Tensor& logits) {
  require_rank(OpKind::softmax_cross_entropy, logits, 2, "logits");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  Tensor out({rows, classes});
  const auto z = logits.data();
  auto p = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = z.data() + r * classes;
    const double peak = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += (p[r * classes + c] = std::exp(row[c] - peak));
    for (std::size_t c = 0; c < classes; ++c) p[r * classes + c] /= denom;
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: expected rank 2, got " + to_string(logits.shape()));
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  std::vector<int> out(rows);
  const auto z = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = z.data() + r * classes;
    out[r] = static_cast<int>(std::max_element(row, row + classes) - row);
  }
  return out;
}

}  // namespace lpmii::tensor
