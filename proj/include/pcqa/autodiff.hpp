#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
// Every op records its inputs and a backward closure on the result node when
// any input requires a gradient; backward() replays the trace in reverse
// topological order. Instantiated for float (training) and double (gradient
// checking).

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pcqa::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  bool is_leaf() const noexcept { return !backward; }
  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  /// Extent of axis `i`; negative indices count from the back.
  std::int64_t dim(std::int64_t i) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<const T> values() const { return node_->value; }
  /// Direct buffer access for leaves (parameter updates, initialization).
  std::span<T> mutable_values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.clear(); }
  T item() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Disables trace recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Builds an op result. When recording is on and any input requires a
/// gradient, the result keeps `inputs` alive and runs `backward` during the
/// reverse pass. Custom ops outside this module use this entry point.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward, const char* op);

/// Seeds d(loss)/d(loss) = 1 and propagates. Leaf gradients accumulate across
/// calls; intermediate gradients are reset at the start of each call.
/// Throws UsageError for a non-scalar loss.
template <typename T>
void backward(const Tensor<T>& loss);

// Elementwise and broadcasting arithmetic (numpy broadcasting rules).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

/// Sum / mean of all elements, producing a scalar.
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// [M,K]x[K,N], [B,M,K]x[B,K,N], and the mixed 2-D/3-D batch broadcasts.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x[..., in] * weight[out, in]^T + bias[out]; bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t begin, std::int64_t end);
/// Gathers rows along axis 0.
template <typename T>
Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::int64_t>& rows);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);

/// x [B,C,H,W], weight [Co,C,K,K], bias [Co] or undefined. K odd.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding);
/// x [B,C,H,W], weight [C,1,K,K]: one filter per channel.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding);
/// Bilinear reads of x [B,C,H,W] at fractional (row, col) pairs loc [B,L,2];
/// taps outside the map read zero. Result [B,C,L].
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& x, const Tensor<T>& loc);

template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);  // [B,C,H,W] -> [B,C]
/// Non-overlapping `window` x `window` average pooling; H, W divisible.
template <typename T> Tensor<T> avg_pool2d(const Tensor<T>& x, int window);

/// Running statistics shared between training and evaluation calls.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
};

/// Per-channel normalization of x [B,C,H,W]. Training mode normalizes with
/// batch statistics and blends them into `state` with `momentum` (unbiased
/// variance); evaluation mode uses the running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool training, T momentum = T(0.1),
                     T eps = T(1e-5));

/// Normalizes over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

}  // namespace pcqa::ad
