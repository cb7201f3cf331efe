#include "pcqa/nn.hpp"

#include <cmath>
#include <map>
#include <numeric>

#include "pcqa/error.hpp"

namespace pcqa::nn {

using ad::Shape;
using ad::Tensor;

std::array<int, 5> ModelConfig::effective_widths() const {
  std::array<int, 5> w{};
  for (int i = 0; i < 5; ++i)
    w[i] = std::max(1, static_cast<int>(std::lround(widths[i] * scale)));
  return w;
}

int ModelConfig::effective_head_dim() const {
  return std::max(1, static_cast<int>(std::lround(head_dim * scale)));
}

void ModelConfig::validate() const {
  for (int i = 0; i < 5; ++i) {
    if (repeats[i] < 1) throw UsageError("model: repeat R" + std::to_string(i + 1) + " must be >= 1");
    if (widths[i] < 1) throw UsageError("model: width D" + std::to_string(i + 1) + " must be >= 1");
  }
  if (kernel < 1 || kernel % 2 == 0) throw UsageError("model: kernel must be odd");
  if (input_channels < 1) throw UsageError("model: input_channels must be >= 1");
  if (grid < 1 || (grid & (grid - 1)) != 0) throw UsageError("model: grid must be a power of two");
  if (!(scale > 0.0)) throw UsageError("model: scale must be positive");
  if (expansion < 1) throw UsageError("model: expansion must be >= 1");
  if (head_dim < 1) throw UsageError("model: head_dim must be >= 1");
  const auto w = effective_widths();
  const int hd = effective_head_dim();
  for (int i : {3, 4})
    if (w[i] % hd != 0)
      throw UsageError("model: transformer width D" + std::to_string(i + 1) + " = " +
                       std::to_string(w[i]) + " is not divisible by head size " + std::to_string(hd));
}

std::vector<std::int64_t> relative_position_index(int h, int w) {
  const int l = h * w;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(l) * l);
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j) {
      const int dy = i / w - j / w + (h - 1);
      const int dx = i % w - j % w + (w - 1);
      idx[static_cast<std::size_t>(i) * l + j] = dy * (2 * w - 1) + dx;
    }
  return idx;
}

template <typename T>
Tensor<T> deform_conv2d(const Tensor<T>& x, const Tensor<T>& offset, const Tensor<T>& weight,
                        const Tensor<T>& bias) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) ||
      weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0)
    throw UsageError("deform_conv2d: weight " + ad::to_string(weight.shape()) +
                     " does not match input " + ad::to_string(x.shape()));
  const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t k = weight.dim(2), taps = k * k, co = weight.dim(0), hw = h * w;
  if (offset.shape() != Shape{b, 2 * taps, h, w})
    throw UsageError("deform_conv2d: offset " + ad::to_string(offset.shape()) + " must be " +
                     ad::to_string(Shape{b, 2 * taps, h, w}));
  const std::int64_t pad = k / 2;
  std::vector<T> base(static_cast<std::size_t>(taps * hw * 2));
  for (std::int64_t t = 0; t < taps; ++t)
    for (std::int64_t p = 0; p < hw; ++p) {
      base[(t * hw + p) * 2] = static_cast<T>(p / w - pad + t / k);
      base[(t * hw + p) * 2 + 1] = static_cast<T>(p % w - pad + t % k);
    }
  Tensor<T> grid(Shape{1, taps * hw, 2}, std::move(base));
  auto disp = ad::reshape(offset, {b, taps, 2, hw});
  disp = ad::reshape(ad::permute(disp, {0, 1, 3, 2}), {b, taps * hw, 2});
  auto sampled = ad::bilinear_sample(x, ad::add(disp, grid));  // [B, C, taps*hw]
  auto cols = ad::reshape(sampled, {b, c * taps, hw});
  auto out = ad::matmul(ad::reshape(weight, {co, c * taps}), cols);
  out = ad::reshape(out, {b, co, h, w});
  if (bias.defined()) out = ad::add(out, ad::reshape(bias, {1, co, 1, 1}));
  return out;
}

template <typename T>
Tensor<T> DeformBlock<T>::forward(const Tensor<T>& x, bool training) const {
  const int pad = static_cast<int>(weight.dim(2) / 2);
  auto offset = ad::conv2d(x, offset_weight, offset_bias, 1, pad);
  auto y = ad::gelu(norm(deform_conv2d(x, offset, weight, Tensor<T>()), training));
  return residual ? ad::add(x, y) : y;
}

template <typename T>
Tensor<T> DepthUnit<T>::forward(const Tensor<T>& x, bool training) const {
  const int pad = static_cast<int>(depth_weight.dim(2) / 2);
  auto h = ad::gelu(norm1(ad::conv2d(x, expand_weight, Tensor<T>(), 1, 0), training));
  h = ad::gelu(norm2(ad::depthwise_conv2d(h, depth_weight, Tensor<T>(), stride, pad), training));
  h = norm3(ad::conv2d(h, project_weight, Tensor<T>(), 1, 0), training);
  Tensor<T> skip = x;
  if (stride > 1) skip = ad::avg_pool2d(skip, stride);
  if (skip_weight.defined()) skip = ad::conv2d(skip, skip_weight, Tensor<T>(), 1, 0);
  return ad::add(skip, h);
}

template <typename T>
AttentionResult<T> TransformerUnit<T>::attend(const Tensor<T>& tokens, int h, int w) const {
  const std::int64_t b = tokens.dim(0), l = tokens.dim(1);
  const std::int64_t cout = out_weight.dim(0);
  const std::int64_t hd = cout / heads;
  if (l != static_cast<std::int64_t>(h) * w)
    throw UsageError("attention: " + std::to_string(l) + " tokens do not fill a " +
                     std::to_string(h) + "x" + std::to_string(w) + " grid");
  auto qkv = ad::linear(tokens, qkv_weight, qkv_bias);  // [B, L, 3C]
  qkv = ad::permute(ad::reshape(qkv, {b, l, 3, heads, hd}), {2, 0, 3, 1, 4});
  auto q = ad::reshape(ad::slice(qkv, 0, 0, 1), {b * heads, l, hd});
  auto k = ad::reshape(ad::slice(qkv, 0, 1, 2), {b * heads, l, hd});
  auto v = ad::reshape(ad::slice(qkv, 0, 2, 3), {b * heads, l, hd});
  auto scores = ad::scale(ad::matmul(q, ad::permute(k, {0, 2, 1})),
                          T(1) / std::sqrt(static_cast<T>(hd)));
  scores = ad::reshape(scores, {b, heads, l, l});
  if (relative_bias) {
    auto bias = ad::index_select(*relative_bias, relative_position_index(h, w));  // [L*L, heads]
    bias = ad::reshape(ad::permute(bias, {1, 0}), {heads, l, l});
    scores = ad::add(scores, bias);
  }
  auto weights = ad::softmax(scores, -1);
  auto mixed = ad::matmul(ad::reshape(weights, {b * heads, l, l}), v);  // [B*h, L, hd]
  mixed = ad::reshape(ad::permute(ad::reshape(mixed, {b, heads, l, hd}), {0, 2, 1, 3}),
                      {b, l, cout});
  return {ad::linear(mixed, out_weight, out_bias), weights};
}

template <typename T>
Tensor<T> TransformerUnit<T>::forward(const Tensor<T>& x, bool) const {
  Tensor<T> in = downsample ? ad::avg_pool2d(x, 2) : x;
  const std::int64_t b = in.dim(0), cin = in.dim(1), h = in.dim(2), w = in.dim(3);
  const std::int64_t cout = out_weight.dim(0);
  auto tokens = ad::reshape(ad::permute(in, {0, 2, 3, 1}), {b, h * w, cin});
  Tensor<T> skip = skip_weight.defined() ? ad::linear(tokens, skip_weight, Tensor<T>()) : tokens;
  auto t = ad::add(skip, attend(norm1(tokens), static_cast<int>(h), static_cast<int>(w)).output);
  auto m = ad::gelu(ad::linear(norm2(t), mlp1_weight, mlp1_bias));
  t = ad::add(t, ad::linear(m, mlp2_weight, mlp2_bias));
  return ad::permute(ad::reshape(t, {b, h, w, cout}), {0, 3, 1, 2});
}

template <typename T>
Tensor<T> Model<T>::add_param(const std::string& name, Shape shape, T init_std, bool decay, T fill) {
  const auto n = static_cast<std::size_t>(ad::numel(shape));
  std::vector<T> v(n, fill);
  if (init_std > T(0)) {
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& x : v) {
      double z;
      do z = dist(rng_);
      while (std::abs(z) > 2.0);
      x = static_cast<T>(z * init_std);
    }
  }
  Tensor<T> t(std::move(shape), std::move(v), true);
  params_.push_back({name, t, decay});
  return t;
}

template <typename T>
BatchNorm2d<T> Model<T>::add_batch_norm(const std::string& name, std::int64_t channels) {
  BatchNorm2d<T> bn;
  bn.gamma = add_param(name + ".weight", {channels}, T(0), false, T(1));
  bn.beta = add_param(name + ".bias", {channels}, T(0), false, T(0));
  auto& st = bn_states_.emplace_back();
  st.running_mean.assign(static_cast<std::size_t>(channels), T(0));
  st.running_var.assign(static_cast<std::size_t>(channels), T(1));
  bn.state = &st;
  buffers_.push_back({name, &st});
  return bn;
}

template <typename T>
LayerNorm<T> Model<T>::add_layer_norm(const std::string& name, std::int64_t channels) {
  LayerNorm<T> ln;
  ln.gamma = add_param(name + ".weight", {channels}, T(0), false, T(1));
  ln.beta = add_param(name + ".bias", {channels}, T(0), false, T(0));
  return ln;
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config), rng_(seed) {
  config_.validate();
  const auto widths = config_.effective_widths();
  const int hd = config_.effective_head_dim();
  const std::int64_t k = config_.kernel;
  const std::int64_t ex = config_.expansion;
  const T std_init = T(0.02);

  std::int64_t cin = config_.input_channels;
  for (int r = 0; r < config_.repeats[0]; ++r) {
    const std::string p = "stem." + std::to_string(r);
    DeformBlock<T> blk;
    const std::int64_t cout = widths[0];
    blk.offset_weight = add_param(p + ".offset.weight", {2 * k * k, cin, k, k}, T(0), true);
    blk.offset_bias = add_param(p + ".offset.bias", {2 * k * k}, T(0), false);
    blk.weight = add_param(p + ".conv.weight", {cout, cin, k, k}, std_init, true);
    blk.norm = add_batch_norm(p + ".norm", cout);
    blk.residual = cin == cout;
    stem_.push_back(std::move(blk));
    cin = cout;
  }
  if (config_.stem_concat) cin += config_.input_channels;

  int g = config_.grid;
  for (int s = 0; s < 2; ++s) {
    const std::int64_t cout = widths[1 + s];
    for (int r = 0; r < config_.repeats[1 + s]; ++r) {
      const std::string p = "depth" + std::to_string(s + 1) + "." + std::to_string(r);
      DepthUnit<T> u;
      const std::int64_t e = ex * cout;
      u.stride = (r == 0 && g >= 2) ? 2 : 1;
      u.expand_weight = add_param(p + ".expand.weight", {e, cin, 1, 1}, std_init, true);
      u.norm1 = add_batch_norm(p + ".norm1", e);
      u.depth_weight = add_param(p + ".depthwise.weight", {e, 1, k, k}, std_init, true);
      u.norm2 = add_batch_norm(p + ".norm2", e);
      u.project_weight = add_param(p + ".project.weight", {cout, e, 1, 1}, std_init, true);
      u.norm3 = add_batch_norm(p + ".norm3", cout);
      if (cin != cout) u.skip_weight = add_param(p + ".skip.weight", {cout, cin, 1, 1}, std_init, true);
      if (u.stride == 2) g /= 2;
      depth_[s].push_back(std::move(u));
      cin = cout;
    }
  }

  for (int s = 0; s < 2; ++s) {
    const std::int64_t cout = widths[3 + s];
    const int heads = static_cast<int>(cout / hd);
    const bool down = g >= 2;
    const int gs = down ? g / 2 : g;
    const std::string stage = "attn" + std::to_string(s + 1);
    auto& table = relative_tables_.emplace_back(
        add_param(stage + ".relative_bias", {static_cast<std::int64_t>((2 * gs - 1) * (2 * gs - 1)), heads},
                  std_init, false));
    for (int r = 0; r < config_.repeats[3 + s]; ++r) {
      const std::string p = stage + "." + std::to_string(r);
      TransformerUnit<T> u;
      const std::int64_t e = ex * cout;
      u.heads = heads;
      u.downsample = r == 0 && down;
      u.relative_bias = &table;
      u.norm1 = add_layer_norm(p + ".norm1", cin);
      u.qkv_weight = add_param(p + ".qkv.weight", {3 * cout, cin}, std_init, true);
      u.qkv_bias = add_param(p + ".qkv.bias", {3 * cout}, T(0), false);
      u.out_weight = add_param(p + ".out.weight", {cout, cout}, std_init, true);
      u.out_bias = add_param(p + ".out.bias", {cout}, T(0), false);
      u.norm2 = add_layer_norm(p + ".norm2", cout);
      u.mlp1_weight = add_param(p + ".mlp1.weight", {e, cout}, std_init, true);
      u.mlp1_bias = add_param(p + ".mlp1.bias", {e}, T(0), false);
      u.mlp2_weight = add_param(p + ".mlp2.weight", {cout, e}, std_init, true);
      u.mlp2_bias = add_param(p + ".mlp2.bias", {cout}, T(0), false);
      if (cin != cout) u.skip_weight = add_param(p + ".skip.weight", {cout, cin}, std_init, true);
      transformer_[s].push_back(std::move(u));
      cin = cout;
    }
    g = gs;
  }

  head_norm_ = add_layer_norm("head.norm", cin);
  head_weight_ = add_param("head.weight", {1, cin}, T(0), true);
  head_bias_ = add_param("head.bias", {1}, T(0), false, static_cast<T>(config_.head_bias));
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& features, bool training) {
  const Shape expect{features.rank() == 4 ? features.dim(0) : 0, config_.input_channels,
                     config_.grid, config_.grid};
  if (features.rank() != 4 || features.shape() != expect)
    throw UsageError("model: input " + ad::to_string(features.shape()) + " must be [B," +
                     std::to_string(config_.input_channels) + "," + std::to_string(config_.grid) +
                     "," + std::to_string(config_.grid) + "]");
  Tensor<T> x = features;
  for (const auto& blk : stem_) x = blk.forward(x, training);
  if (config_.stem_concat) x = ad::concat<T>({x, features}, 1);
  for (const auto& stage : depth_)
    for (const auto& u : stage) x = u.forward(x, training);
  for (const auto& stage : transformer_)
    for (const auto& u : stage) x = u.forward(x, training);
  auto pooled = head_norm_(ad::global_avg_pool(x));
  auto y = ad::linear(pooled, head_weight_, head_bias_);  // [B, 1]
  return ad::reshape(y, {features.dim(0)});
}

template <typename T>
std::int64_t Model<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
std::vector<ad::NamedArray> Model<T>::state() const {
  std::vector<ad::NamedArray> out;
  for (const auto& p : params_)
    out.push_back({p.name, p.tensor.shape(),
                   std::vector<float>(p.tensor.values().begin(), p.tensor.values().end())});
  for (const auto& b : buffers_) {
    const auto c = static_cast<std::int64_t>(b.state->running_mean.size());
    out.push_back({b.name + ".running_mean", {c},
                   std::vector<float>(b.state->running_mean.begin(), b.state->running_mean.end())});
    out.push_back({b.name + ".running_var", {c},
                   std::vector<float>(b.state->running_var.begin(), b.state->running_var.end())});
  }
  return out;
}

template <typename T>
void Model<T>::load_state(const std::vector<ad::NamedArray>& arrays) {
  std::map<std::string, const ad::NamedArray*> by_name;
  for (const auto& a : arrays)
    if (!by_name.emplace(a.name, &a).second)
      throw DataError("checkpoint: duplicate entry '" + a.name + "'");
  auto take = [&](const std::string& name, const Shape& shape) -> const ad::NamedArray& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint: missing entry '" + name + "'");
    if (it->second->shape != shape)
      throw DataError("checkpoint: entry '" + name + "' has shape " +
                      ad::to_string(it->second->shape) + ", model expects " + ad::to_string(shape));
    const ad::NamedArray& a = *it->second;
    by_name.erase(it);
    return a;
  };
  for (auto& p : params_) {
    const auto& a = take(p.name, p.tensor.shape());
    std::copy(a.values.begin(), a.values.end(), p.tensor.mutable_values().begin());
  }
  for (auto& b : buffers_) {
    const Shape s{static_cast<std::int64_t>(b.state->running_mean.size())};
    const auto& m = take(b.name + ".running_mean", s);
    const auto& v = take(b.name + ".running_var", s);
    std::copy(m.values.begin(), m.values.end(), b.state->running_mean.begin());
    std::copy(v.values.begin(), v.values.end(), b.state->running_var.begin());
  }
  if (!by_name.empty())
    throw DataError("checkpoint: unexpected entry '" + by_name.begin()->first + "'");
}

double aggregate_quality(std::span<const double> patch_scores) {
  if (patch_scores.empty()) throw UsageError("aggregate_quality: no patch scores");
  double s = 0.0;
  for (double v : patch_scores) s += v;
  return s / static_cast<double>(patch_scores.size());
}

template Tensor<float> deform_conv2d(const Tensor<float>&, const Tensor<float>&,
                                     const Tensor<float>&, const Tensor<float>&);
template Tensor<double> deform_conv2d(const Tensor<double>&, const Tensor<double>&,
                                      const Tensor<double>&, const Tensor<double>&);
template struct DeformBlock<float>;
template struct DeformBlock<double>;
template struct DepthUnit<float>;
template struct DepthUnit<double>;
template struct TransformerUnit<float>;
template struct TransformerUnit<double>;
template class Model<float>;
template class Model<double>;

}  // namespace pcqa::nn
