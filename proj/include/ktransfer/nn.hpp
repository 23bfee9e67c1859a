#pragma once

// Layer graphs organized in named groups, plus the four architectures used
// for knowledge transfer: residual teacher/student networks, the
// paraphraser (convolutional autoencoder on the teacher's last group) and
// the translator (convolutional adapter on the student's last group).

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ktransfer/error.hpp"
#include "ktransfer/ops.hpp"
#include "ktransfer/tensor.hpp"

namespace ktransfer {

enum class LayerKind {
  conv,
  conv_transpose,
  batchnorm,
  leaky_relu,
  relu,
  avg_pool,
  global_avg_pool,
  linear,
  residual_block,
  flatten,
};

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in_channels = 0;   // channels, or input features for linear
  std::size_t out_channels = 0;  // channels, or output features for linear
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  double slope = 0.0;
  bool bias = true;

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                        std::size_t padding, bool bias = true) {
    return {LayerKind::conv, in, out, kernel, stride, padding, 0.0, bias};
  }
  static LayerSpec conv_transpose(std::size_t in, std::size_t out, std::size_t kernel,
                                  std::size_t stride, std::size_t padding, bool bias = true) {
    return {LayerKind::conv_transpose, in, out, kernel, stride, padding, 0.0, bias};
  }
  static LayerSpec batchnorm(std::size_t channels) {
    return {LayerKind::batchnorm, channels, channels, 0, 1, 0, 0.0, false};
  }
  static LayerSpec leaky_relu(double slope) {
    return {LayerKind::leaky_relu, 0, 0, 0, 1, 0, slope, false};
  }
  static LayerSpec relu() { return {LayerKind::relu, 0, 0, 0, 1, 0, 0.0, false}; }
  static LayerSpec avg_pool(std::size_t kernel) {
    return {LayerKind::avg_pool, 0, 0, kernel, kernel, 0, 0.0, false};
  }
  static LayerSpec global_avg_pool() {
    return {LayerKind::global_avg_pool, 0, 0, 0, 1, 0, 0.0, false};
  }
  static LayerSpec flatten() { return {LayerKind::flatten, 0, 0, 0, 1, 0, 0.0, false}; }
  static LayerSpec linear(std::size_t in, std::size_t out, bool bias = true) {
    return {LayerKind::linear, in, out, 0, 1, 0, 0.0, bias};
  }
  static LayerSpec residual_block(std::size_t in, std::size_t out, std::size_t stride) {
    return {LayerKind::residual_block, in, out, 3, stride, 1, 0.0, false};
  }
};

enum class Mode { training, eval };

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool decay = true;  // false for batchnorm scale/shift
};

template <class T>
struct Buffer {
  std::string name;
  Tensor<T> value;
};

template <class T>
struct ForwardResult {
  Tensor<T> output;
  std::map<std::string, Tensor<T>> group_features;
};

inline constexpr double kBatchnormMomentum = 0.1;
inline constexpr double kBatchnormEps = 1e-5;
inline constexpr double kFactorSlope = 0.1;

template <class T>
class Network {
 public:
  struct Layer {
    LayerSpec spec;
    std::vector<std::size_t> params;
    std::vector<std::size_t> buffers;
  };
  struct Group {
    std::string name;
    bool exposed = false;
    std::vector<Layer> layers;
    std::size_t channels = 0;  // output channels
  };

  Network() = default;
  Network(std::string arch, std::size_t input_channels)
      : arch_(std::move(arch)), input_channels_(input_channels), channels_(input_channels) {}

  Network(const Network& other) { *this = other; }
  Network& operator=(const Network& other) {
    if (this == &other) return *this;
    arch_ = other.arch_;
    input_channels_ = other.input_channels_;
    channels_ = other.channels_;
    features_ = other.features_;
    mode_ = other.mode_;
    groups_ = other.groups_;
    params_.clear();
    for (const auto& p : other.params_) params_.push_back({p.name, p.value.clone(), p.decay});
    buffers_.clear();
    for (const auto& b : other.buffers_) buffers_.push_back({b.name, b.value.clone()});
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  /// Appends a group; validates channel contracts against the previous
  /// layers and initializes its parameters from `rng`.
  void add_group(std::string name, const std::vector<LayerSpec>& layers, bool exposed,
                 std::mt19937_64& rng) {
    for (const auto& g : groups_)
      if (g.name == name) throw ConfigError("duplicate group name '" + name + "'");
    Group group{name, exposed, {}};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      group.layers.push_back(make_layer(name + "." + std::to_string(i), layers[i], rng));
    }
    group.channels = channels_;
    groups_.push_back(std::move(group));
  }

  ForwardResult<T> forward_collect(const Tensor<T>& input) {
    check_input(input);
    ForwardResult<T> result;
    Tensor<T> x = input;
    for (const auto& g : groups_) {
      x = run_group(g, x);
      if (g.exposed) result.group_features.emplace(g.name, x);
    }
    result.output = x;
    return result;
  }

  Tensor<T> forward(const Tensor<T>& input) { return forward_collect(input).output; }

  /// Runs the groups up to and including `last_group`.
  Tensor<T> forward_through(const Tensor<T>& input, const std::string& last_group) {
    if (!has_group(last_group)) throw ConfigError("network '" + arch_ + "' has no group '" + last_group + "'");
    check_input(input);
    Tensor<T> x = input;
    for (const auto& g : groups_) {
      x = run_group(g, x);
      if (g.name == last_group) break;
    }
    return x;
  }

  std::size_t group_channels(const std::string& name) const {
    for (const auto& g : groups_)
      if (g.name == name) return g.channels;
    throw ConfigError("network '" + arch_ + "' has no group '" + name + "'");
  }

  bool has_group(const std::string& name) const {
    for (const auto& g : groups_)
      if (g.name == name) return true;
    return false;
  }

  const std::string& arch() const { return arch_; }
  std::size_t input_channels() const { return input_channels_; }
  /// Channel count produced by the last layer (before any flatten/linear).
  std::size_t output_channels() const { return channels_; }
  const std::vector<Group>& groups() const { return groups_; }

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::vector<Buffer<T>>& buffers() { return buffers_; }
  const std::vector<Buffer<T>>& buffers() const { return buffers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }
  void train() { mode_ = Mode::training; }
  void eval() { mode_ = Mode::eval; }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }
  void set_requires_grad(bool value) {
    for (auto& p : params_) p.value.set_requires_grad(value);
  }

 private:
  Layer make_layer(const std::string& prefix, const LayerSpec& spec, std::mt19937_64& rng) {
    Layer layer{spec, {}, {}};
    auto need_channels = [&](std::size_t in) {
      if (in != channels_) {
        throw ConfigError(prefix + ": expects " + std::to_string(in) + " input channels, previous layer produces " +
                          std::to_string(channels_));
      }
    };
    switch (spec.kind) {
      case LayerKind::conv:
      case LayerKind::conv_transpose: {
        need_channels(spec.in_channels);
        if (spec.kernel == 0 || spec.stride == 0 || spec.out_channels == 0)
          throw ConfigError(prefix + ": kernel, stride and channels must be positive");
        const bool transposed = spec.kind == LayerKind::conv_transpose;
        Shape wshape = transposed ? Shape{spec.in_channels, spec.out_channels, spec.kernel, spec.kernel}
                                  : Shape{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel};
        layer.params.push_back(add_param(prefix + ".weight",
                                         he_normal(wshape, spec.in_channels * spec.kernel * spec.kernel, rng), true));
        if (spec.bias) layer.params.push_back(add_param(prefix + ".bias", Tensor<T>(Shape{spec.out_channels}), true));
        channels_ = spec.out_channels;
        features_.reset();
        break;
      }
      case LayerKind::batchnorm:
        need_channels(spec.in_channels);
        add_batchnorm(prefix, spec.in_channels, layer);
        break;
      case LayerKind::leaky_relu:
        if (!(spec.slope >= 0.0 && spec.slope < 1.0)) throw ConfigError(prefix + ": slope must lie in [0,1)");
        break;
      case LayerKind::relu:
        break;
      case LayerKind::avg_pool:
        if (spec.kernel == 0) throw ConfigError(prefix + ": pooling kernel must be positive");
        break;
      case LayerKind::global_avg_pool:
        features_ = channels_;
        break;
      case LayerKind::flatten:
        break;
      case LayerKind::linear:
        if (features_ && *features_ != spec.in_channels) {
          throw ConfigError(prefix + ": expects " + std::to_string(spec.in_channels) +
                            " features, previous layer produces " + std::to_string(*features_));
        }
        layer.params.push_back(add_param(
            prefix + ".weight", he_normal(Shape{spec.out_channels, spec.in_channels}, spec.in_channels, rng), true));
        if (spec.bias) layer.params.push_back(add_param(prefix + ".bias", Tensor<T>(Shape{spec.out_channels}), true));
        features_ = spec.out_channels;
        break;
      case LayerKind::residual_block: {
        need_channels(spec.in_channels);
        const std::size_t in = spec.in_channels, out = spec.out_channels;
        // main path: conv1, bn1, conv2, bn2; optional projection: conv, bn
        layer.params.push_back(add_param(prefix + ".conv1.weight", he_normal(Shape{out, in, 3, 3}, in * 9, rng), true));
        add_batchnorm(prefix + ".bn1", out, layer);
        layer.params.push_back(add_param(prefix + ".conv2.weight", he_normal(Shape{out, out, 3, 3}, out * 9, rng), true));
        add_batchnorm(prefix + ".bn2", out, layer);
        if (spec.stride != 1 || in != out) {
          layer.params.push_back(add_param(prefix + ".proj.weight", he_normal(Shape{out, in, 1, 1}, in, rng), true));
          add_batchnorm(prefix + ".proj_bn", out, layer);
        }
        channels_ = out;
        features_.reset();
        break;
      }
    }
    return layer;
  }

  void add_batchnorm(const std::string& prefix, std::size_t channels, Layer& layer) {
    layer.params.push_back(add_param(prefix + ".gamma", Tensor<T>(Shape{channels}, T(1)), false));
    layer.params.push_back(add_param(prefix + ".shift", Tensor<T>(Shape{channels}), false));
    layer.buffers.push_back(add_buffer(prefix + ".running_mean", Tensor<T>(Shape{channels}, T(0))));
    layer.buffers.push_back(add_buffer(prefix + ".running_var", Tensor<T>(Shape{channels}, T(1))));
  }

  std::size_t add_param(std::string name, Tensor<T> value, bool decay) {
    for (const auto& p : params_)
      if (p.name == name) throw ConfigError("duplicate parameter name '" + name + "'");
    value.set_requires_grad(true);
    params_.push_back({std::move(name), std::move(value), decay});
    return params_.size() - 1;
  }
  std::size_t add_buffer(std::string name, Tensor<T> value) {
    buffers_.push_back({std::move(name), std::move(value)});
    return buffers_.size() - 1;
  }

  static Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<T> data(numel(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(data));
  }

  void check_input(const Tensor<T>& input) const {
    if (input.ndim() != 4 || input.dim(1) != input_channels_) {
      throw DimensionError("network '" + arch_ + "' expects input [N," + std::to_string(input_channels_) +
                           ",H,W], got " + to_string(input.shape()));
    }
  }

  Tensor<T> bn(const Layer& layer, std::size_t p, std::size_t b, const Tensor<T>& x) {
    return batchnorm2d(x, params_[layer.params[p]].value, params_[layer.params[p + 1]].value,
                       buffers_[layer.buffers[b]].value, buffers_[layer.buffers[b + 1]].value,
                       kBatchnormMomentum, kBatchnormEps, mode_ == Mode::training);
  }

  Tensor<T> optional_param(const Layer& layer, std::size_t i) const {
    return i < layer.params.size() ? params_[layer.params[i]].value : Tensor<T>{};
  }

  Tensor<T> run_layer(const Layer& layer, const Tensor<T>& x) {
    const auto& s = layer.spec;
    switch (s.kind) {
      case LayerKind::conv:
        return conv2d(x, params_[layer.params[0]].value, optional_param(layer, 1), s.stride, s.padding);
      case LayerKind::conv_transpose:
        return conv_transpose2d(x, params_[layer.params[0]].value, optional_param(layer, 1), s.stride, s.padding);
      case LayerKind::batchnorm:
        return bn(layer, 0, 0, x);
      case LayerKind::leaky_relu:
        return leaky_relu(x, s.slope);
      case LayerKind::relu:
        return relu(x);
      case LayerKind::avg_pool:
        return avg_pool2d(x, s.kernel);
      case LayerKind::global_avg_pool:
        return global_avg_pool(x);
      case LayerKind::flatten:
        return flatten(x);
      case LayerKind::linear:
        return linear(x.ndim() == 2 ? x : flatten(x), params_[layer.params[0]].value, optional_param(layer, 1));
      case LayerKind::residual_block: {
        // params: conv1, bn1.gamma, bn1.shift, conv2, bn2.gamma, bn2.shift, [proj, proj_bn.gamma, proj_bn.shift]
        // Downsampling pools first: a strided 3x3 conv on an even extent
        // has a non-integral output size.
        const Tensor<T> in = s.stride > 1 ? avg_pool2d(x, s.stride) : x;
        Tensor<T> h = conv2d(in, params_[layer.params[0]].value, 1, 1);
        h = relu(bn(layer, 1, 0, h));
        h = conv2d(h, params_[layer.params[3]].value, 1, 1);
        h = bn(layer, 4, 2, h);
        Tensor<T> skip = in;
        if (layer.params.size() > 6) {
          skip = conv2d(in, params_[layer.params[6]].value, 1, 0);
          skip = bn(layer, 7, 4, skip);
        }
        return relu(add(h, skip));
      }
    }
    throw ConfigError("unknown layer kind");
  }

  Tensor<T> run_group(const Group& g, const Tensor<T>& x) {
    Tensor<T> h = x;
    for (const auto& layer : g.layers) h = run_layer(layer, h);
    return h;
  }

  std::string arch_;
  std::size_t input_channels_ = 0;
  std::size_t channels_ = 0;
  std::optional<std::size_t> features_;
  Mode mode_ = Mode::training;
  std::vector<Group> groups_;
  std::vector<Parameter<T>> params_;
  std::vector<Buffer<T>> buffers_;
};

// ---------------------------------------------------------------------------
// Architectures

/// Number of factor channels for a paraphrase rate: round-half-up(m * k).
inline std::size_t factor_channels(std::size_t m, double k) {
  if (!(k > 0.0) || !std::isfinite(k)) throw ConfigError("paraphrase rate k must be positive");
  const double c = std::floor(static_cast<double>(m) * k + 0.5);
  if (c < 1.0) {
    throw ConfigError("paraphrase rate k=" + std::to_string(k) + " with m=" + std::to_string(m) +
                      " yields fewer than one factor channel");
  }
  return static_cast<std::size_t>(c);
}

namespace detail {
inline std::string format_rate(double k) {
  std::ostringstream os;
  os.precision(17);
  os << k;
  return os.str();
}
}  // namespace detail

/// Residual network: stem, groups g1..g3 with widths (w, 2w, 4w) and entry
/// strides (1, 2, 2), then global pooling and a linear head. Strided blocks
/// downsample with a 2x2 average pool ahead of their convolutions.
template <class T>
Network<T> build_resnet(std::size_t depth_blocks, std::size_t width, std::size_t classes, std::uint64_t seed,
                        std::size_t input_channels = 3) {
  if (depth_blocks < 1) throw ConfigError("resnet: depth_blocks must be >= 1");
  if (width < 8) throw ConfigError("resnet: width must be >= 8");
  if (classes < 2) throw ConfigError("resnet: need at least 2 classes");
  if (input_channels < 1) throw ConfigError("resnet: need at least one input channel");
  std::mt19937_64 rng(seed);
  Network<T> net("resnet:" + std::to_string(depth_blocks) + ":" + std::to_string(width) + ":" +
                     std::to_string(classes) + ":" + std::to_string(input_channels),
                 input_channels);
  net.add_group("stem",
                {LayerSpec::conv(input_channels, width, 3, 1, 1, false), LayerSpec::batchnorm(width),
                 LayerSpec::relu()},
                false, rng);
  std::size_t in = width;
  const std::size_t widths[3] = {width, 2 * width, 4 * width};
  const std::size_t strides[3] = {1, 2, 2};
  for (int g = 0; g < 3; ++g) {
    std::vector<LayerSpec> blocks;
    for (std::size_t b = 0; b < depth_blocks; ++b) {
      blocks.push_back(LayerSpec::residual_block(in, widths[g], b == 0 ? strides[g] : 1));
      in = widths[g];
    }
    net.add_group("g" + std::to_string(g + 1), blocks, true, rng);
  }
  net.add_group("head", {LayerSpec::global_avg_pool(), LayerSpec::flatten(), LayerSpec::linear(in, classes)}, false,
                rng);
  return net;
}

template <class T>
Network<T> build_teacher(std::size_t depth_blocks, std::size_t width, std::size_t classes, std::uint64_t seed,
                         std::size_t input_channels = 3) {
  return build_resnet<T>(depth_blocks, width, classes, seed, input_channels);
}

template <class T>
Network<T> build_student(std::size_t depth_blocks, std::size_t width, std::size_t classes, std::uint64_t seed,
                         std::size_t input_channels = 3) {
  return build_resnet<T>(depth_blocks, width, classes, seed, input_channels);
}

/// Encoder (3 stride-1 convs, m -> m -> f -> f, each followed by leaky ReLU)
/// and decoder (3 stride-1 transposed convs, f -> m -> m -> m, linear
/// output), f = round(m*k). The encoder output is the teacher factor.
template <class T>
Network<T> build_paraphraser(std::size_t m, double k, std::uint64_t seed) {
  if (m < 1) throw ConfigError("paraphraser: m must be positive");
  const std::size_t f = factor_channels(m, k);
  std::mt19937_64 rng(seed);
  Network<T> net("paraphraser:" + std::to_string(m) + ":" + detail::format_rate(k), m);
  const auto act = LayerSpec::leaky_relu(kFactorSlope);
  net.add_group("encoder",
                {LayerSpec::conv(m, m, 3, 1, 1), act, LayerSpec::conv(m, f, 3, 1, 1), act,
                 LayerSpec::conv(f, f, 3, 1, 1), act},
                true, rng);
  net.add_group("decoder",
                {LayerSpec::conv_transpose(f, m, 3, 1, 1), act, LayerSpec::conv_transpose(m, m, 3, 1, 1), act,
                 LayerSpec::conv_transpose(m, m, 3, 1, 1)},
                true, rng);
  return net;
}

/// 3 stride-1 convs s -> s -> f -> f with leaky ReLU between them and a
/// linear output, f = round(m*k).
template <class T>
Network<T> build_translator(std::size_t s, std::size_t m, double k, std::uint64_t seed) {
  if (s < 1 || m < 1) throw ConfigError("translator: channel counts must be positive");
  const std::size_t f = factor_channels(m, k);
  std::mt19937_64 rng(seed);
  Network<T> net("translator:" + std::to_string(s) + ":" + std::to_string(m) + ":" + detail::format_rate(k), s);
  const auto act = LayerSpec::leaky_relu(kFactorSlope);
  net.add_group("translator",
                {LayerSpec::conv(s, s, 3, 1, 1), act, LayerSpec::conv(s, f, 3, 1, 1), act,
                 LayerSpec::conv(f, f, 3, 1, 1)},
                true, rng);
  return net;
}

/// Rebuilds a freshly initialized network from its architecture string.
template <class T>
Network<T> build_from_arch(const std::string& arch, std::uint64_t seed = 0) {
  std::vector<std::string> parts;
  std::stringstream ss(arch);
  for (std::string item; std::getline(ss, item, ':');) parts.push_back(item);
  auto num = [&](std::size_t i) -> std::size_t {
    try {
      return static_cast<std::size_t>(std::stoull(parts.at(i)));
    } catch (const std::exception&) {
      throw FormatError("malformed architecture string '" + arch + "'");
    }
  };
  auto rate = [&](std::size_t i) -> double {
    try {
      return std::stod(parts.at(i));
    } catch (const std::exception&) {
      throw FormatError("malformed architecture string '" + arch + "'");
    }
  };
  if (parts.empty()) throw FormatError("empty architecture string");
  if (parts[0] == "resnet" && parts.size() == 5) return build_resnet<T>(num(1), num(2), num(3), seed, num(4));
  if (parts[0] == "paraphraser" && parts.size() == 3) return build_paraphraser<T>(num(1), rate(2), seed);
  if (parts[0] == "translator" && parts.size() == 4) return build_translator<T>(num(1), num(2), rate(3), seed);
  throw FormatError("unknown architecture string '" + arch + "'");
}

/// Factor produced by a paraphraser's encoder or by a translator. When
/// `frozen`, the result is a constant: nothing upstream receives gradients.
template <class T>
Tensor<T> extract_factor(Network<T>& net, const Tensor<T>& feature, bool frozen) {
  const std::string last = net.has_group("encoder") ? "encoder" : net.groups().back().name;
  if (frozen) {
    NoGradGuard guard;
    return net.forward_through(feature.detach(), last);
  }
  return net.forward_through(feature, last);
}

}  // namespace ktransfer
