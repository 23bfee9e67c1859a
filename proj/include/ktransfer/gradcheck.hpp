#pragma once

// Finite-difference and oracle-equivalence suites behind `ktransfer gradcheck`.

#include <algorithm>
#include <array>
#include <chrono>
#include <limits>
#include <memory>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ktransfer/finite_difference.hpp"
#include "ktransfer/losses.hpp"
#include "ktransfer/nn.hpp"
#include "ktransfer/ops.hpp"
#include "ktransfer/reference.hpp"
#include "ktransfer/rng.hpp"

namespace ktransfer {

inline constexpr double kPrimitiveTolerance = 1e-5;
inline constexpr double kCompositeTolerance = 1e-4;
inline constexpr double kConvOracleTolerance = 1e-5;

struct GradcheckCase {
  std::function<Tensor<double>()> loss;
  std::vector<Tensor<double>> inputs;
  std::size_t max_coords = 0;  // 0 = every coordinate
  double step = 1e-5;
};

enum class CheckKind { primitive, composite, oracle };

struct OpReport {
  std::string name;
  CheckKind kind = CheckKind::primitive;
  std::size_t instances = 0;
  double worst = 0;  // relative error, or absolute error for oracles
  double tolerance = 0;
  bool passed() const { return worst < tolerance; }
};

struct GradcheckReport {
  std::vector<OpReport> ops;
  double seconds = 0;

  bool passed() const {
    return std::all_of(ops.begin(), ops.end(), [](const OpReport& r) { return r.passed(); });
  }
  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& r : ops)
      if (!r.passed()) out.push_back(r.name);
    return out;
  }
};

struct GradcheckOptions {
  std::vector<std::string> ops;  // empty = all
  std::size_t instances = 50;
  std::size_t conv_configs = 200;
  /// Negative control: this op's loss gains a term the tape cannot see.
  std::string inject_broken;
  std::uint64_t seed = 0;
};

namespace gradcheck_detail {

using TD = Tensor<double>;
using Rng = std::mt19937_64;

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline TD uniform(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = d(rng);
  return TD(std::move(shape), std::move(v));
}

// Magnitudes in [margin, 1] with random sign: keeps central differences off
// the kinks of piecewise-linear ops.
inline TD away_from_zero(Shape shape, Rng& rng, double margin = 0.05) {
  std::uniform_real_distribution<double> mag(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return TD(std::move(shape), std::move(v));
}

inline TD project(const TD& y, Rng& rng) { return sum(mul(y, uniform(y.shape(), rng))); }

inline std::vector<int> labels(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<int> out(n);
  for (auto& l : out) l = static_cast<int>(pick(rng, 0, k - 1));
  return out;
}

// A small random feature map shape [N, C, H, W].
inline Shape feature_shape(Rng& rng, std::size_t min_hw = 2) {
  return {pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, min_hw, 5), pick(rng, min_hw, 5)};
}

/// Three conv layers with leaky ReLU: x[N,C,H,W] -> [N,O,H,W]; the
/// intermediate activations are returned too.
struct ThreeLayer {
  std::vector<TD> weights, biases;
  std::vector<TD> params() const {
    std::vector<TD> out = weights;
    out.insert(out.end(), biases.begin(), biases.end());
    return out;
  }
  std::vector<TD> forward(const TD& x) const {
    std::vector<TD> acts;
    TD h = x;
    for (std::size_t l = 0; l < 3; ++l) {
      h = conv2d(h, weights[l], biases[l], 1, 1);
      if (l < 2) h = leaky_relu(h, 0.1);
      acts.push_back(h);
    }
    return acts;
  }
};

inline ThreeLayer three_layer(std::size_t in, std::size_t out, Rng& rng) {
  ThreeLayer net;
  const std::size_t hidden = pick(rng, 2, 4);
  const std::size_t widths[] = {in, hidden, hidden, out};
  for (std::size_t l = 0; l < 3; ++l) {
    net.weights.push_back(uniform({widths[l + 1], widths[l], 3, 3}, rng, -0.5, 0.5));
    net.biases.push_back(uniform({widths[l + 1]}, rng, -0.2, 0.2));
  }
  return net;
}

// Logits head on top of a feature map.
inline TD logits_head(const TD& feature, const TD& w, const TD& b) { return linear(flatten(global_avg_pool(feature)), w, b); }

inline std::vector<TD> with(std::vector<TD> a, const std::vector<TD>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

struct OpDef {
  std::string name;
  CheckKind kind;
  std::function<GradcheckCase(Rng&)> make;
};

inline std::vector<OpDef> primitive_ops() {
  std::vector<OpDef> ops;
  auto add_op = [&](std::string name, std::function<GradcheckCase(Rng&)> f) {
    ops.push_back({std::move(name), CheckKind::primitive, std::move(f)});
  };
  add_op("conv2d", [](Rng& rng) {
    const std::size_t s = pick(rng, 1, 2), k = pick(rng, 1, 3);
    const std::size_t oh = pick(rng, 1, 4), ow = pick(rng, 1, 4);
    const std::size_t N = pick(rng, 1, 2), C = pick(rng, 1, 3), O = pick(rng, 1, 3);
    // Input extent chosen so the output size is integral and positive.
    std::size_t pp = pick(rng, 0, k - 1);
    if ((std::min(oh, ow) - 1) * s + k <= 2 * pp) pp = 0;
    const std::size_t H = (oh - 1) * s + k - 2 * pp, W = (ow - 1) * s + k - 2 * pp;
    TD x = uniform({N, C, H, W}, rng), w = uniform({O, C, k, k}, rng), b = uniform({O}, rng);
    TD r = uniform({N, O, oh, ow}, rng);
    return GradcheckCase{[=] { return sum(mul(conv2d(x, w, b, s, pp), r)); }, {x, w, b}};
  });
  add_op("conv_transpose2d", [](Rng& rng) {
    const std::size_t s = pick(rng, 1, 2), k = pick(rng, 1, 3), p = pick(rng, 0, (k - 1) / 2);
    const std::size_t N = pick(rng, 1, 2), C = pick(rng, 1, 3), O = pick(rng, 1, 3);
    const std::size_t H = pick(rng, 1, 4), W = pick(rng, 1, 4);
    TD x = uniform({N, C, H, W}, rng), w = uniform({C, O, k, k}, rng), b = uniform({O}, rng);
    const TD y = conv_transpose2d(x, w, b, s, p);
    TD r = uniform(y.shape(), rng);
    return GradcheckCase{[=] { return sum(mul(conv_transpose2d(x, w, b, s, p), r)); }, {x, w, b}};
  });
  add_op("leaky_relu", [](Rng& rng) {
    TD x = away_from_zero(feature_shape(rng), rng);
    const double slope = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    TD r = uniform(x.shape(), rng);
    return GradcheckCase{[=] { return sum(mul(leaky_relu(x, slope), r)); }, {x}};
  });
  add_op("relu", [](Rng& rng) {
    TD x = away_from_zero(feature_shape(rng), rng);
    TD r = uniform(x.shape(), rng);
    return GradcheckCase{[=] { return sum(mul(relu(x), r)); }, {x}};
  });
  add_op("add", [](Rng& rng) {
    const Shape s = feature_shape(rng);
    TD a = uniform(s, rng), b = uniform(s, rng), r = uniform(s, rng);
    return GradcheckCase{[=] { return sum(mul(add(a, b), r)); }, {a, b}};
  });
  add_op("sub", [](Rng& rng) {
    const Shape s = feature_shape(rng);
    TD a = uniform(s, rng), b = uniform(s, rng), r = uniform(s, rng);
    return GradcheckCase{[=] { return sum(mul(sub(a, b), r)); }, {a, b}};
  });
  add_op("mul", [](Rng& rng) {
    const Shape s = feature_shape(rng);
    TD a = uniform(s, rng), b = uniform(s, rng), r = uniform(s, rng);
    return GradcheckCase{[=] { return sum(mul(mul(a, b), r)); }, {a, b}};
  });
  add_op("scale", [](Rng& rng) {
    TD x = uniform(feature_shape(rng), rng), r = uniform(x.shape(), rng);
    const double c = std::uniform_real_distribution<double>(-3, 3)(rng);
    return GradcheckCase{[=] { return sum(mul(scale(x, c), r)); }, {x}};
  });
  add_op("sum", [](Rng& rng) {
    TD x = uniform(feature_shape(rng), rng);
    return GradcheckCase{[=] { return sum(x); }, {x}};
  });
  add_op("mean", [](Rng& rng) {
    TD x = uniform(feature_shape(rng), rng);
    return GradcheckCase{[=] { return mean(x); }, {x}};
  });
  add_op("reshape", [](Rng& rng) {
    TD x = uniform(feature_shape(rng), rng);
    const Shape flat{x.dim(0), x.size() / x.dim(0)};
    TD r = uniform(flat, rng);
    return GradcheckCase{[=] { return sum(mul(reshape(x, flat), r)); }, {x}};
  });
  add_op("flatten", [](Rng& rng) {
    TD x = uniform(feature_shape(rng), rng);
    TD r = uniform({x.dim(0), x.size() / x.dim(0)}, rng);
    return GradcheckCase{[=] { return sum(mul(flatten(x), r)); }, {x}};
  });
  add_op("batchnorm2d", [](Rng& rng) {
    Shape s = feature_shape(rng);
    s[0] = pick(rng, 2, 3);
    TD x = uniform(s, rng), r = uniform(s, rng);
    TD gamma = uniform({s[1]}, rng, 0.5, 1.5), shift = uniform({s[1]}, rng);
    return GradcheckCase{[=] {
                           TD rm(Shape{s[1]}, 0.0), rv(Shape{s[1]}, 1.0);
                           return sum(mul(batchnorm2d(x, gamma, shift, rm, rv, 0.1, 1e-5, true), r));
                         },
                         {x, gamma, shift}};
  });
  add_op("linear", [](Rng& rng) {
    const std::size_t N = pick(rng, 1, 4), F = pick(rng, 1, 6), O = pick(rng, 1, 5);
    TD x = uniform({N, F}, rng), w = uniform({O, F}, rng), b = uniform({O}, rng), r = uniform({N, O}, rng);
    return GradcheckCase{[=] { return sum(mul(linear(x, w, b), r)); }, {x, w, b}};
  });
  add_op("avg_pool2d", [](Rng& rng) {
    const std::size_t k = pick(rng, 1, 3);
    TD x = uniform({pick(rng, 1, 2), pick(rng, 1, 3), k * pick(rng, 1, 3), k * pick(rng, 1, 3)}, rng);
    TD r = uniform({x.dim(0), x.dim(1), x.dim(2) / k, x.dim(3) / k}, rng);
    return GradcheckCase{[=] { return sum(mul(avg_pool2d(x, k), r)); }, {x}};
  });
  add_op("global_avg_pool", [](Rng& rng) {
    TD x = uniform(feature_shape(rng), rng);
    TD r = uniform({x.dim(0), x.dim(1), 1, 1}, rng);
    return GradcheckCase{[=] { return sum(mul(global_avg_pool(x), r)); }, {x}};
  });
  add_op("l2_normalize", [](Rng& rng) {
    TD x = uniform(feature_shape(rng), rng), r = uniform(x.shape(), rng);
    return GradcheckCase{[=] { return sum(mul(l2_normalize(x), r)); }, {x}};
  });
  add_op("row_pnorm_p1", [](Rng& rng) {
    TD x = away_from_zero(feature_shape(rng), rng), r = uniform({x.dim(0)}, rng);
    return GradcheckCase{[=] { return sum(mul(row_pnorm(x, 1), r)); }, {x}};
  });
  add_op("row_pnorm_p2", [](Rng& rng) {
    TD x = uniform(feature_shape(rng), rng), r = uniform({x.dim(0)}, rng);
    return GradcheckCase{[=] { return sum(mul(row_pnorm(x, 2), r)); }, {x}};
  });
  add_op("channel_sum_squares", [](Rng& rng) {
    TD x = uniform(feature_shape(rng), rng);
    TD r = uniform({x.dim(0), x.dim(2) * x.dim(3)}, rng);
    return GradcheckCase{[=] { return sum(mul(channel_sum_squares(x), r)); }, {x}};
  });
  add_op("softmax_t", [](Rng& rng) {
    TD x = uniform({pick(rng, 1, 4), pick(rng, 2, 10)}, rng, -3, 3), r = uniform(x.shape(), rng);
    const double t = std::uniform_real_distribution<double>(0.5, 5)(rng);
    return GradcheckCase{[=] { return sum(mul(softmax_t(x, t), r)); }, {x}};
  });
  add_op("log_softmax", [](Rng& rng) {
    TD x = uniform({pick(rng, 1, 4), pick(rng, 2, 10)}, rng, -3, 3), r = uniform(x.shape(), rng);
    const double t = std::uniform_real_distribution<double>(0.5, 5)(rng);
    return GradcheckCase{[=] { return sum(mul(log_softmax(x, t), r)); }, {x}};
  });
  add_op("gather_rows", [](Rng& rng) {
    TD x = uniform({pick(rng, 1, 4), pick(rng, 2, 6)}, rng);
    const auto idx = labels(x.dim(0), x.dim(1), rng);
    TD r = uniform({x.dim(0)}, rng);
    return GradcheckCase{[=] { return sum(mul(gather_rows(x, std::span<const int>(idx)), r)); }, {x}};
  });
  return ops;
}

// End-to-end losses, differentiated through three-layer networks.
inline std::vector<OpDef> composite_ops() {
  std::vector<OpDef> ops;
  auto add_op = [&](std::string name, std::function<GradcheckCase(Rng&)> f) {
    ops.push_back({std::move(name), CheckKind::composite, std::move(f)});
  };
  constexpr std::size_t kCoords = 12;
  // Hidden leaky-ReLU kinks get straddled now and then at 1e-5.
  constexpr double kStep = 1e-6;

  add_op("reconstruction_loss", [](Rng& rng) {
    const std::size_t m = pick(rng, 2, 4);
    auto para = std::make_shared<Network<double>>(build_paraphraser<double>(m, 0.5, pick(rng, 0, 1u << 30)));
    TD x = uniform({pick(rng, 1, 2), m, pick(rng, 2, 4), pick(rng, 2, 4)}, rng);
    std::vector<TD> inputs;
    for (auto& p : para->parameters()) inputs.push_back(p.value);
    return GradcheckCase{[=] { return reconstruction_loss(x, para->forward(x)); }, inputs, kCoords, kStep};
  });
  for (int p : {1, 2}) {
    add_op("factor_transfer_loss_p" + std::to_string(p), [p](Rng& rng) {
      const std::size_t s = pick(rng, 1, 3), m = pick(rng, 2, 4);
      const double k = std::array{0.5, 1.0, 2.0}[pick(rng, 0, 2)];
      auto tr = std::make_shared<Network<double>>(build_translator<double>(s, m, k, pick(rng, 0, 1u << 30)));
      TD x = uniform({pick(rng, 1, 3), s, pick(rng, 2, 4), pick(rng, 2, 4)}, rng);
      TD ft = uniform({x.dim(0), factor_channels(m, k), x.dim(2), x.dim(3)}, rng);
      std::vector<TD> inputs{x};
      for (auto& q : tr->parameters()) inputs.push_back(q.value);
      return GradcheckCase{[=] { return factor_transfer_loss(ft, tr->forward(x), p); }, inputs, kCoords, kStep};
    });
  }
  add_op("cross_entropy", [](Rng& rng) {
    const Shape s = feature_shape(rng);
    const std::size_t K = pick(rng, 2, 5), F = pick(rng, 1, 3);
    auto net = three_layer(s[1], F, rng);
    TD x = uniform(s, rng), w = uniform({K, F}, rng), b = uniform({K}, rng);
    const auto y = labels(s[0], K, rng);
    return GradcheckCase{
        [=] { return cross_entropy(logits_head(net.forward(x).back(), w, b), std::span<const int>(y)); },
        with({x, w, b}, net.params()), kCoords, kStep};
  });
  add_op("kd_loss", [](Rng& rng) {
    const Shape s = feature_shape(rng);
    const std::size_t K = pick(rng, 2, 5), F = pick(rng, 1, 3);
    auto net = three_layer(s[1], F, rng);
    TD x = uniform(s, rng), w = uniform({K, F}, rng), b = uniform({K}, rng);
    TD teacher = uniform({s[0], K}, rng, -3, 3);
    const double T = std::uniform_real_distribution<double>(1, 5)(rng);
    return GradcheckCase{[=] { return kd_loss(logits_head(net.forward(x).back(), w, b), teacher, T); },
                         with({x, w, b}, net.params()), kCoords, kStep};
  });
  add_op("at_loss", [](Rng& rng) {
    const Shape s = feature_shape(rng);
    auto net = three_layer(s[1], pick(rng, 1, 3), rng);
    TD x = uniform(s, rng);
    std::vector<TD> teacher;
    for (int g = 0; g < 3; ++g) teacher.push_back(uniform({s[0], pick(rng, 1, 4), s[2], s[3]}, rng));
    return GradcheckCase{[=] {
                           const auto acts = net.forward(x);
                           return at_loss<double>(std::span<const TD>(acts), std::span<const TD>(teacher));
                         },
                         with({x}, net.params()), kCoords, kStep};
  });
  // Full student objectives: three-layer body, translator for FT, linear head.
  for (Method method : {Method::ft, Method::ft_kd, Method::at_kd}) {
    add_op("student_total_" + std::string(method == Method::ft ? "ft" : method == Method::ft_kd ? "ft_kd" : "at_kd"),
           [method](Rng& rng) {
             const Shape s = feature_shape(rng);
             const std::size_t K = pick(rng, 2, 4), F = pick(rng, 1, 3), m = pick(rng, 2, 4);
             auto net = three_layer(s[1], F, rng);
             auto tr = std::make_shared<Network<double>>(build_translator<double>(F, m, 0.5, pick(rng, 0, 1u << 30)));
             TD x = uniform(s, rng), w = uniform({K, F}, rng), b = uniform({K}, rng);
             TD ft = uniform({s[0], factor_channels(m, 0.5), s[2], s[3]}, rng);
             TD teacher_logits = uniform({s[0], K}, rng, -3, 3);
             std::vector<TD> teacher_groups;
             for (int g = 0; g < 3; ++g) teacher_groups.push_back(uniform({s[0], 2, s[2], s[3]}, rng));
             const auto y = labels(s[0], K, rng);
             FactorConfig fc;
             fc.beta = 2.0;
             fc.beta_at = 5.0;
             std::vector<TD> inputs = with({x, w, b}, net.params());
             for (auto& q : tr->parameters()) inputs.push_back(q.value);
             return GradcheckCase{[=] {
                                    const auto acts = net.forward(x);
                                    const TD logits = logits_head(acts.back(), w, b);
                                    LossParts<double> parts;
                                    parts.cls = cross_entropy(logits, std::span<const int>(y));
                                    if (uses_factor(method)) parts.ft = factor_transfer_term(ft, tr->forward(acts.back()), 1);
                                    if (uses_kd(method)) parts.kd = kd_loss(logits, teacher_logits, 4.0);
                                    if (uses_attention(method)) {
                                      parts.at = at_loss<double>(std::span<const TD>(acts),
                                                                 std::span<const TD>(teacher_groups));
                                    }
                                    return compose_total(method, parts, fc);
                                  },
                                  inputs, kCoords, kStep};
           });
  }
  return ops;
}

inline bool selected(const GradcheckOptions& opt, const std::string& name) {
  return opt.ops.empty() || std::find(opt.ops.begin(), opt.ops.end(), name) != opt.ops.end();
}

}  // namespace gradcheck_detail

/// Names accepted by GradcheckOptions::ops.
inline std::vector<std::string> gradcheck_op_names() {
  std::vector<std::string> out;
  for (const auto& op : gradcheck_detail::primitive_ops()) out.push_back(op.name);
  for (const auto& op : gradcheck_detail::composite_ops()) out.push_back(op.name);
  out.push_back("conv2d_oracle");
  out.push_back("conv_transpose2d_adjoint");
  return out;
}

/// Worst absolute deviation of conv2d (float, production path) from the
/// nested-loop oracle over random configurations.
inline double conv2d_oracle_error(std::size_t configs, std::uint64_t seed) {
  using namespace gradcheck_detail;
  Rng rng(seed);
  double worst = 0;
  for (std::size_t t = 0; t < configs; ++t) {
    const std::size_t N = pick(rng, 1, 3), C = pick(rng, 1, 6), O = pick(rng, 1, 6);
    const std::size_t kh = pick(rng, 1, 5), kw = pick(rng, 1, 5), s = pick(rng, 1, 3);
    const std::size_t p = pick(rng, 0, std::min(kh, kw) - 1);
    const std::size_t oh = pick(rng, 1, 6), ow = pick(rng, 1, 6);
    const std::size_t H = (oh - 1) * s + kh, W = (ow - 1) * s + kw;  // before padding
    if (H <= 2 * p || W <= 2 * p) continue;
    const std::size_t Hin = H - 2 * p, Win = W - 2 * p;
    std::uniform_real_distribution<float> d(-1, 1);
    auto fill = [&](std::size_t n) {
      std::vector<float> v(n);
      for (auto& x : v) x = d(rng);
      return v;
    };
    auto xs = fill(N * C * Hin * Win), ws = fill(O * C * kh * kw), bs = fill(O);
    Tensor<float> x(Shape{N, C, Hin, Win}, xs), w(Shape{O, C, kh, kw}, ws), b(Shape{O}, bs);
    const auto y = conv2d(x, w, b, s, p);
    std::size_t rh = 0, rw = 0;
    const auto expect = reference::conv2d<double>({xs.begin(), xs.end()}, N, C, Hin, Win, {ws.begin(), ws.end()}, O,
                                                  kh, kw, {bs.begin(), bs.end()}, s, p, rh, rw);
    if (y.shape() != Shape{N, O, rh, rw}) return std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < expect.size(); ++i) worst = std::max(worst, std::abs(double(y[i]) - expect[i]));
  }
  return worst;
}

/// conv_transpose2d(g, W) must equal the input gradient of conv2d(., W)
/// under upstream gradient g.
inline double conv_transpose_adjoint_error(std::size_t configs, std::uint64_t seed) {
  using namespace gradcheck_detail;
  Rng rng(seed);
  double worst = 0;
  for (std::size_t t = 0; t < configs; ++t) {
    const std::size_t N = pick(rng, 1, 2), C = pick(rng, 1, 4), O = pick(rng, 1, 4);
    const std::size_t k = pick(rng, 1, 4), s = pick(rng, 1, 2), p = pick(rng, 0, (k - 1) / 2);
    const std::size_t oh = pick(rng, 1, 4), ow = pick(rng, 1, 4);
    const std::size_t H = (oh - 1) * s + k - 2 * p, W = (ow - 1) * s + k - 2 * p;
    if (H == 0 || W == 0) continue;
    TD x = uniform({N, C, H, W}, rng);
    x.set_requires_grad(true);
    TD w = uniform({O, C, k, k}, rng);
    const TD y = conv2d(x, w, s, p);
    TD g = uniform(y.shape(), rng);
    backward(sum(mul(y, g)));
    const TD xt = conv_transpose2d(g, w, s, p);
    if (xt.shape() != x.shape()) return std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < xt.size(); ++i) worst = std::max(worst, std::abs(xt[i] - x.grad()[i]));
  }
  return worst;
}

inline GradcheckReport run_gradcheck(const GradcheckOptions& opt = {}) {
  using namespace gradcheck_detail;
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& name : opt.ops) {
    const auto all = gradcheck_op_names();
    if (std::find(all.begin(), all.end(), name) == all.end()) throw ConfigError("unknown gradcheck op '" + name + "'");
  }
  GradcheckReport report;
  std::vector<OpDef> defs = primitive_ops();
  for (auto& d : composite_ops()) defs.push_back(std::move(d));
  for (const auto& def : defs) {
    if (!selected(opt, def.name)) continue;
    OpReport r{def.name, def.kind, 0, 0,
               def.kind == CheckKind::primitive ? kPrimitiveTolerance : kCompositeTolerance};
    Rng rng(derive_seed(opt.seed, "gradcheck/" + def.name));
    for (std::size_t i = 0; i < opt.instances; ++i) {
      GradcheckCase c = def.make(rng);
      auto loss = c.loss;
      if (def.name == opt.inject_broken) {
        // Forward value includes sum(x) but the tape does not see it.
        const TD probe = c.inputs.front();
        loss = [inner = c.loss, probe] { return add(inner(), sum(probe.detach())); };
      }
      ktransfer::GradCheckOptions fd;
      fd.max_coords = c.max_coords;
      fd.step = c.step;
      fd.seed = derive_seed(opt.seed, def.name, i);
      r.worst = std::max(r.worst, check_gradients(loss, c.inputs, fd).max_relative_error);
      ++r.instances;
    }
    report.ops.push_back(r);
  }
  if (selected(opt, "conv2d_oracle")) {
    double err = conv2d_oracle_error(opt.conv_configs, derive_seed(opt.seed, "gradcheck/conv2d_oracle"));
    if (opt.inject_broken == "conv2d_oracle") err += 1.0;
    report.ops.push_back({"conv2d_oracle", CheckKind::oracle, opt.conv_configs, err, kConvOracleTolerance});
  }
  if (selected(opt, "conv_transpose2d_adjoint")) {
    double err = conv_transpose_adjoint_error(opt.conv_configs, derive_seed(opt.seed, "gradcheck/convT"));
    if (opt.inject_broken == "conv_transpose2d_adjoint") err += 1.0;
    report.ops.push_back({"conv_transpose2d_adjoint", CheckKind::oracle, opt.conv_configs, err, kConvOracleTolerance});
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace ktransfer
