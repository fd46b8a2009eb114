#pragma once
//
// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle: copies share storage (and therefore gradients).
// Use clone() for an independent deep copy. Every differentiable op is a
// member of Graph, which records one node per op in execution order; that
// order is a topological order, so backward() simply walks the tape in
// reverse. Intermediate tensors stay alive as long as the Graph does.
//
// Layout is row-major. Images are [batch, channels, height, width].
//

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lpmii::tensor {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  /// Leaf tensor that accumulates gradients across backward passes.
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  bool has_grad() const;
  /// Gradient buffer; allocated zero-filled on first access.
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  /// Same storage viewed with another shape of equal element count.
  Tensor reshape(Shape shape) const;
  /// Deep copy of the values; the copy is a leaf with the same requires_grad.
  Tensor clone() const;
  /// Deep copy of the values with no gradient tracking.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }

 private:
  struct Storage {
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  Shape shape_;
  std::shared_ptr<Storage> storage_;
};

enum class OpKind {
  matmul,
  linear,
  conv2d,
  relu,
  softplus,
  add,
  mul,
  scale,
  global_avg_pool,
  sum,
  mean,
  softmax_cross_entropy,
  mse,
};

std::string to_string(OpKind kind);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

class Graph {
 public:
  /// With record == false no nodes are stored (inference mode).
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// [m, k] x [k, n] -> [m, n]
  Tensor matmul(const Tensor& a, const Tensor& b);
  /// x [n, in], weight [out, in], bias [out] -> x * weight^T + bias
  Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
  /// x [n, c, h, w], weight [o, c, kh, kw], bias [o]; zero padding, no dilation.
  Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                Conv2dOptions options = {});
  Tensor relu(const Tensor& x);
  /// log(1 + exp(x)), computed without overflow.
  Tensor softplus(const Tensor& x);
  Tensor add(const Tensor& a, const Tensor& b);
  /// Elementwise product of equal shapes.
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& x, double factor);
  /// [n, c, h, w] -> [n, c]
  Tensor global_avg_pool(const Tensor& x);
  Tensor sum(const Tensor& x);
  Tensor mean(const Tensor& x);
  /// Mean over rows of -log softmax(logits)[target]; logits [n, classes].
  Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets);
  /// Mean of squared differences; shapes must match.
  Tensor mse(const Tensor& pred, const Tensor& target);

  /// Propagates d(loss)/d(.) into every tensor on the tape that requires
  /// gradients. Gradients are added to whatever the leaves already hold.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }
  bool recording() const { return record_; }

 private:
  struct Node {
    OpKind kind;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void(std::span<const double> grad_out)> backward;
  };

  bool tracks(std::initializer_list<const Tensor*> inputs) const;
  Tensor make_output(Shape shape, std::initializer_list<const Tensor*> inputs) const;
  void push(OpKind kind, std::vector<Tensor> inputs, const Tensor& output,
            std::function<void(std::span<const double>)> backward);

  bool record_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

/// Row-wise softmax of [n, classes] logits (no graph).
Tensor softmax(const Tensor& logits);

/// Row-wise argmax of [n, classes].
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace lpmii::tensor
