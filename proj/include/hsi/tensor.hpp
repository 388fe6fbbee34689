#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hsi/common.hpp"
#include "hsi/rng.hpp"

namespace hsi {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);

enum class Activation { Selu, Silu, Gelu };

struct ActivationSpec {
  Activation kind = Activation::Selu;
  // canonical self-normalizing constants
  double selu_alpha = 1.6732632423543772;
  double selu_lambda = 1.0507009873554805;
  void validate() const;  // requires lambda > 1, alpha > 0
};

/// Per-channel running statistics owned by the model, updated in training
/// mode and consumed in eval mode. Population variance throughout.
template <typename T>
struct BatchNormState {
  std::vector<T> mean;
  std::vector<T> var;
  bool initialized = false;
};

namespace detail {
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated on demand, same length as values
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // reads grad, accumulates parents'

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};
}  // namespace detail

/// Dense row-major N-d array participating in a reverse-mode autodiff graph.
/// Cheap to copy (shared handle). Compute precision is the template
/// parameter: float for training, double for finite-difference checks.
template <typename T>
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return static_cast<int64_t>(node_->values.size()); }
  int64_t dim(size_t i) const { return node_->shape[i]; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const T> values() const { return node_->values; }
  /// Mutable access for leaves (parameter updates, data staging).
  std::span<T> values_mut() { return node_->values; }

  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_) node_->grad.assign(node_->values.size(), T(0));
  }

  /// Value of a single-element tensor.
  T item() const;

  /// Reverse-topological gradient accumulation from this scalar. Repeated
  /// calls without zero_grad accumulate.
  void backward() const;

  detail::Node<T>* node() const { return node_.get(); }
  std::shared_ptr<detail::Node<T>> handle() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

private:
  std::shared_ptr<detail::Node<T>> node_;
};

// --- operator set --------------------------------------------------------
// All ops use cross-correlation semantics for convolutions (no kernel flip)
// and NCHW layout. Element loops are parallelized only over disjoint output
// (forward) or input (backward) slices, so results are bit-identical for any
// thread count.

/// x: N x C x h x w, kernel: O x C x k x k, bias: O. Zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 int stride = 1, int pad = 0);

/// kernel: C x k x k, bias: C; channel c of the output sees only channel c
/// of the input.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                           const Tensor<T>& bias, int stride = 1, int pad = 0);

/// Normalizes over the channel axis independently at each (n, y, x) position
/// (population variance), then applies the per-channel affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps);

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     BatchNormState<T>& state, bool training, double momentum,
                     double eps);

template <typename T>
Tensor<T> activate(const Tensor<T>& x, const ActivationSpec& spec);

/// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
/// Identity in eval mode. The mask is drawn serially from `rng`.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training);

/// Squeeze-excite: global average pool -> reduce FC -> activation ->
/// expand FC -> sigmoid -> per-channel rescale. w_reduce: C/r x C,
/// w_expand: C x C/r.
template <typename T>
Tensor<T> se_module(const Tensor<T>& x, const Tensor<T>& w_reduce,
                    const Tensor<T>& b_reduce, const Tensor<T>& w_expand,
                    const Tensor<T>& b_expand, const ActivationSpec& act);

/// Mean over masked pixels of -log softmax(logits)[label-1]. logits:
/// N x K x h x w; labels/mask: N*h*w row-major. Labels under the mask must
/// lie in 1..K. Returns 0 with zero gradient (and a stderr warning) when the
/// mask is empty.
template <typename T>
Tensor<T> masked_softmax_ce(const Tensor<T>& logits,
                            const std::vector<uint16_t>& labels,
                            const std::vector<uint8_t>& mask);

// elementwise / reduction helpers
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> sum(const Tensor<T>& a);

/// N x C x h x w -> N x C mean over spatial positions.
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);

/// x: N x C_in, weight: C_out x C_in, bias: C_out -> N x C_out.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);

/// x: N x C x h x w scaled per channel by s: N x C.
template <typename T> Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& s);

}  // namespace hsi
