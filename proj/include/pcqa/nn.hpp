#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pcqa/autodiff.hpp"
#include "pcqa/checkpoint.hpp"

namespace pcqa::nn {

/// Stage layout of the quality regressor: a deformable-convolution stem,
/// two depthwise-convolution stages, two transformer stages, then global
/// average pooling, layer norm and a linear head.
struct ModelConfig {
  std::array<int, 5> repeats{3, 3, 6, 14, 2};
  std::array<int, 5> widths{64, 96, 128, 128, 512};
  int head_dim = 32;
  int kernel = 3;
  int input_channels = 9;
  int grid = 32;
  double scale = 1.0;  // width multiplier; head_dim scales with it
  int expansion = 4;   // inverted-residual and MLP hidden ratio
  bool stem_concat = true;  // append the raw input channels to the stage-2 input
  double head_bias = 3.0;   // initial prediction (mid-scale MOS)

  std::array<int, 5> effective_widths() const;
  int effective_head_dim() const;
  /// Throws UsageError on inconsistent settings.
  void validate() const;
};

template <typename T>
struct Parameter {
  std::string name;
  ad::Tensor<T> tensor;
  bool decay = true;  // false for normalization and bias terms
};

template <typename T>
struct Buffer {
  std::string name;
  ad::BatchNormState<T>* state = nullptr;
};

template <typename T>
struct BatchNorm2d {
  ad::Tensor<T> gamma, beta;
  ad::BatchNormState<T>* state = nullptr;

  ad::Tensor<T> operator()(const ad::Tensor<T>& x, bool training) const {
    return ad::batch_norm(x, gamma, beta, *state, training);
  }
};

template <typename T>
struct LayerNorm {
  ad::Tensor<T> gamma, beta;

  ad::Tensor<T> operator()(const ad::Tensor<T>& x) const { return ad::layer_norm(x, gamma, beta); }
};

/// Deformable convolution (v1), stride 1, "same" padding. `offset` holds
/// 2*k*k channels ordered (tap, {row, col}) with taps in row-major kernel
/// order; each tap reads the input bilinearly at its grid position plus the
/// predicted displacement.
template <typename T>
ad::Tensor<T> deform_conv2d(const ad::Tensor<T>& x, const ad::Tensor<T>& offset,
                            const ad::Tensor<T>& weight, const ad::Tensor<T>& bias);

template <typename T>
struct DeformBlock {
  ad::Tensor<T> offset_weight, offset_bias;  // [2k^2, Cin, k, k], [2k^2]
  ad::Tensor<T> weight;                      // [Cout, Cin, k, k]
  BatchNorm2d<T> norm;
  bool residual = false;

  ad::Tensor<T> forward(const ad::Tensor<T>& x, bool training) const;
};

/// Inverted residual unit: 1x1 expand, depthwise k x k, 1x1 project.
template <typename T>
struct DepthUnit {
  ad::Tensor<T> expand_weight;   // [E, Cin, 1, 1]
  BatchNorm2d<T> norm1;
  ad::Tensor<T> depth_weight;    // [E, 1, k, k]
  BatchNorm2d<T> norm2;
  ad::Tensor<T> project_weight;  // [Cout, E, 1, 1]
  BatchNorm2d<T> norm3;
  ad::Tensor<T> skip_weight;     // [Cout, Cin, 1, 1] when the skip needs projecting
  int stride = 1;

  ad::Tensor<T> forward(const ad::Tensor<T>& x, bool training) const;
};

template <typename T>
struct AttentionResult {
  ad::Tensor<T> output;   // [B, L, Cout]
  ad::Tensor<T> weights;  // [B, heads, L, L], rows sum to one
};

/// Pre-norm transformer unit over the spatial grid as tokens.
template <typename T>
struct TransformerUnit {
  LayerNorm<T> norm1;
  ad::Tensor<T> qkv_weight, qkv_bias;  // [3 Cout, Cin], [3 Cout]
  ad::Tensor<T> out_weight, out_bias;  // [Cout, Cout], [Cout]
  LayerNorm<T> norm2;
  ad::Tensor<T> mlp1_weight, mlp1_bias;  // [E, Cout], [E]
  ad::Tensor<T> mlp2_weight, mlp2_bias;  // [Cout, E], [Cout]
  ad::Tensor<T> skip_weight;             // [Cout, Cin] when widths differ
  ad::Tensor<T>* relative_bias = nullptr;  // [(2H-1)(2W-1), heads], shared by the stage
  int heads = 1;
  bool downsample = false;

  /// Multi-head self-attention on tokens [B, H*W, Cin] laid out row-major on
  /// an h x w grid.
  AttentionResult<T> attend(const ad::Tensor<T>& tokens, int h, int w) const;
  ad::Tensor<T> forward(const ad::Tensor<T>& x, bool training) const;
};

/// Token index pairs -> row of the relative position table.
std::vector<std::int64_t> relative_position_index(int h, int w);

template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// features [B, C, G, G] -> scores [B].
  ad::Tensor<T> forward(const ad::Tensor<T>& features, bool training);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  const std::vector<Buffer<T>>& buffers() const { return buffers_; }
  /// Number of learnable scalars.
  std::int64_t parameter_count() const;

  void zero_grad();
  /// Weights and normalization statistics as float32 arrays.
  std::vector<ad::NamedArray> state() const;
  /// Restores `state()` output; every name must match in name and shape.
  void load_state(const std::vector<ad::NamedArray>& arrays);

  std::vector<DeformBlock<T>>& stem() { return stem_; }
  std::vector<DepthUnit<T>>& depth_stage(int i) { return depth_[i]; }
  std::vector<TransformerUnit<T>>& transformer_stage(int i) { return transformer_[i]; }
  ad::Tensor<T>& head_weight() { return head_weight_; }
  ad::Tensor<T>& head_bias() { return head_bias_; }

 private:
  ad::Tensor<T> add_param(const std::string& name, ad::Shape shape, T init_std, bool decay,
                          T fill = T(0));
  BatchNorm2d<T> add_batch_norm(const std::string& name, std::int64_t channels);
  LayerNorm<T> add_layer_norm(const std::string& name, std::int64_t channels);

  ModelConfig config_;
  std::mt19937_64 rng_;
  std::vector<Parameter<T>> params_;
  std::vector<Buffer<T>> buffers_;
  std::deque<ad::BatchNormState<T>> bn_states_;
  std::deque<ad::Tensor<T>> relative_tables_;

  std::vector<DeformBlock<T>> stem_;
  std::array<std::vector<DepthUnit<T>>, 2> depth_;
  std::array<std::vector<TransformerUnit<T>>, 2> transformer_;
  LayerNorm<T> head_norm_;  // keeps the pooled features at unit scale
  ad::Tensor<T> head_weight_, head_bias_;
};

/// Q_f: mean of the per-patch scores. Throws UsageError on empty input.
double aggregate_quality(std::span<const double> patch_scores);

}  // namespace pcqa::nn
