#pragma once

// Differentiable primitives over NCHW tensors. Convolutions are
// cross-correlations lowered to im2col + GEMM.

#include <Eigen/Core>

#include <algorithm>
#include <utility>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ktransfer/error.hpp"
#include "ktransfer/tensor.hpp"

namespace ktransfer {

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* arg) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                         ", got " + to_string(s));
  }
}

struct ConvGeometry {
  std::size_t channels, height, width;  // image side
  std::size_t kh, kw, stride, padding;
  std::size_t out_h, out_w;             // column grid
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t grid() const { return out_h * out_w; }
};

// Output extent of a convolution; throws when the window does not tile.
inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad, const char* axis) {
  const long long span = static_cast<long long>(in) + 2 * static_cast<long long>(pad) -
                         static_cast<long long>(k);
  if (span < 0) {
    throw DimensionError(std::string("conv2d: kernel larger than padded input along ") + axis);
  }
  if (span % static_cast<long long>(stride) != 0) {
    throw ConfigError(std::string("conv2d: output size along ") + axis + " is not integral: (" +
                      std::to_string(in) + " + 2*" + std::to_string(pad) + " - " +
                      std::to_string(k) + ")/" + std::to_string(stride) + " + 1");
  }
  return static_cast<std::size_t>(span) / stride + 1;
}

// Output columns [lo, hi) whose input column ox*stride + j - padding lies
// inside [0, width).
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t j) {
  const long long p = static_cast<long long>(g.padding), s = static_cast<long long>(g.stride);
  const long long off = static_cast<long long>(j) - p;
  long long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long long hi = (static_cast<long long>(g.width) - 1 - off) / s + 1;
  if (static_cast<long long>(g.width) - 1 - off < 0) hi = 0;
  lo = std::min<long long>(lo, static_cast<long long>(g.out_w));
  hi = std::clamp<long long>(hi, lo, static_cast<long long>(g.out_w));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// cols[rows, nb*grid] from images [nb, channels, height, width].
template <class T>
void im2col(const T* images, std::size_t nb, const ConvGeometry& g, T* cols) {
  const std::size_t grid = g.grid();
  const std::size_t ld = nb * grid;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        const auto [lo, hi] = valid_columns(g, j);
        const long long shift = static_cast<long long>(j) - static_cast<long long>(g.padding);
        for (std::size_t n = 0; n < nb; ++n) {
          const T* img = images + (n * g.channels + c) * g.height * g.width;
          T* dst = row + n * grid;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long long iy = static_cast<long long>(oy * g.stride + i) -
                                 static_cast<long long>(g.padding);
            T* line = dst + oy * g.out_w;
            if (iy < 0 || iy >= static_cast<long long>(g.height)) {
              std::fill(line, line + g.out_w, T(0));
              continue;
            }
            const T* src = img + static_cast<std::size_t>(iy) * g.width;
            std::fill(line, line + lo, T(0));
            if (g.stride == 1) {
              std::copy(src + (static_cast<long long>(lo) + shift), src + (static_cast<long long>(hi) + shift),
                        line + lo);
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox)
                line[ox] = src[static_cast<long long>(ox * g.stride) + shift];
            }
            std::fill(line + hi, line + g.out_w, T(0));
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds cols back into images.
template <class T>
void col2im(const T* cols, std::size_t nb, const ConvGeometry& g, T* images) {
  const std::size_t grid = g.grid();
  const std::size_t ld = nb * grid;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        const auto [lo, hi] = valid_columns(g, j);
        const long long shift = static_cast<long long>(j) - static_cast<long long>(g.padding);
        for (std::size_t n = 0; n < nb; ++n) {
          T* img = images + (n * g.channels + c) * g.height * g.width;
          const T* src = row + n * grid;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long long iy = static_cast<long long>(oy * g.stride + i) -
                                 static_cast<long long>(g.padding);
            if (iy < 0 || iy >= static_cast<long long>(g.height)) continue;
            T* dst = img + static_cast<std::size_t>(iy) * g.width;
            const T* line = src + oy * g.out_w;
            if (g.stride == 1) {
              T* d = dst + shift;
              for (std::size_t ox = lo; ox < hi; ++ox) d[ox] += line[ox];
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<long long>(ox * g.stride) + shift] += line[ox];
            }
          }
        }
      }
    }
  }
}

// [nb, C, grid] (NCHW sample-major) <-> [C, nb*grid] (channel-major).
template <class T>
void to_channel_major(const T* src, std::size_t nb, std::size_t channels, std::size_t grid, T* dst) {
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(src + (n * channels + c) * grid, grid, dst + c * nb * grid + n * grid);
}

template <class T>
void from_channel_major_add(const T* src, std::size_t nb, std::size_t channels, std::size_t grid,
                            T* dst) {
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      const T* s = src + c * nb * grid + n * grid;
      T* d = dst + (n * channels + c) * grid;
      for (std::size_t p = 0; p < grid; ++p) d[p] += s[p];
    }
}

// Samples per GEMM chunk so the column buffer stays around 4M elements.
inline std::size_t chunk_samples(std::size_t batch, std::size_t per_sample) {
  constexpr std::size_t kBudget = std::size_t{1} << 22;
  return std::clamp<std::size_t>(kBudget / std::max<std::size_t>(per_sample, 1), 1, batch);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolutions

/// Cross-correlation. `bias` may be an undefined tensor.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  using namespace detail;
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t O = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  require(weight.dim(1) == C, "conv2d: input has " + std::to_string(C) +
                                  " channels but weight expects " + std::to_string(weight.dim(1)));
  if (bias.defined()) require(bias.shape() == Shape{O}, "conv2d: bias must have shape [" +
                                                             std::to_string(O) + "]");
  const ConvGeometry g{C, H, W, kh, kw, stride, padding,
                       conv_out_extent(H, kh, stride, padding, "height"),
                       conv_out_extent(W, kw, stride, padding, "width")};
  const std::size_t grid = g.grid();
  const std::size_t rows = g.rows();
  const std::size_t chunk = chunk_samples(N, rows * grid);

  std::vector<T> out(N * O * grid);
  {
    std::vector<T> cols(rows * chunk * grid);
    std::vector<T> prod(O * chunk * grid);
    ConstMatrixMap<T> wm(weight.data().data(), O, rows);
    for (std::size_t s0 = 0; s0 < N; s0 += chunk) {
      const std::size_t nb = std::min(chunk, N - s0);
      im2col(input.data().data() + s0 * C * H * W, nb, g, cols.data());
      MatrixMap<T> pm(prod.data(), O, nb * grid);
      pm.noalias() = wm * ConstMatrixMap<T>(cols.data(), rows, nb * grid);
      for (std::size_t n = 0; n < nb; ++n)
        for (std::size_t o = 0; o < O; ++o) {
          const T b = bias.defined() ? bias[o] : T(0);
          const T* src = prod.data() + o * nb * grid + n * grid;
          T* dst = out.data() + ((s0 + n) * O + o) * grid;
          for (std::size_t p = 0; p < grid; ++p) dst[p] = src[p] + b;
        }
    }
  }

  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  auto x_data = input.handle();
  auto w_data = weight.handle();
  const bool has_bias = bias.defined();
  return Tensor<T>::make_result(
      Shape{N, O, g.out_h, g.out_w}, std::move(out), "conv2d", std::move(inputs),
      [=](std::span<const T> gout, std::span<const std::span<T>> gin) {
        std::vector<T> cols(rows * chunk * grid);
        std::vector<T> gchunk(O * chunk * grid);
        ConstMatrixMap<T> wm(w_data->data.data(), O, rows);
        for (std::size_t s0 = 0; s0 < N; s0 += chunk) {
          const std::size_t nb = std::min(chunk, N - s0);
          to_channel_major(gout.data() + s0 * O * grid, nb, O, grid, gchunk.data());
          ConstMatrixMap<T> gm(gchunk.data(), O, nb * grid);
          if (has_bias && !gin[2].empty()) {
            // Plain loop: Eigen's vectorized sum depends on buffer alignment.
            for (std::size_t o = 0; o < O; ++o) {
              const T* row = gchunk.data() + o * nb * grid;
              T acc = 0;
              for (std::size_t j = 0; j < nb * grid; ++j) acc += row[j];
              gin[2][o] += acc;
            }
          }
          if (!gin[1].empty()) {
            im2col(x_data->data.data() + s0 * C * H * W, nb, g, cols.data());
            MatrixMap<T>(gin[1].data(), O, rows).noalias() +=
                gm * ConstMatrixMap<T>(cols.data(), rows, nb * grid).transpose();
          }
          if (!gin[0].empty()) {
            MatrixMap<T> cm(cols.data(), rows, nb * grid);
            cm.noalias() = wm.transpose() * gm;
            col2im(cols.data(), nb, g, gin[0].data() + s0 * C * H * W);
          }
        }
      });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride,
                 std::size_t padding) {
  return conv2d(input, weight, Tensor<T>{}, stride, padding);
}

/// Transposed convolution: the input-gradient of conv2d with the same weight
/// layout read as [C_in, C_out, kh, kw].
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride, std::size_t padding) {
  using namespace detail;
  require_rank(input.shape(), 4, "conv_transpose2d", "input");
  require_rank(weight.shape(), 4, "conv_transpose2d", "weight");
  if (stride == 0) throw ConfigError("conv_transpose2d: stride must be positive");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t O = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  require(weight.dim(0) == C, "conv_transpose2d: input has " + std::to_string(C) +
                                  " channels but weight expects " + std::to_string(weight.dim(0)));
  if (bias.defined()) require(bias.shape() == Shape{O}, "conv_transpose2d: bias must have shape [" +
                                                             std::to_string(O) + "]");
  const long long oh = static_cast<long long>((H - 1) * stride + kh) - 2 * static_cast<long long>(padding);
  const long long ow = static_cast<long long>((W - 1) * stride + kw) - 2 * static_cast<long long>(padding);
  require(oh > 0 && ow > 0, "conv_transpose2d: padding too large for input " + to_string(input.shape()));
  const std::size_t OH = static_cast<std::size_t>(oh), OW = static_cast<std::size_t>(ow);
  // Column geometry is that of the forward convolution from the output image.
  const ConvGeometry g{O, OH, OW, kh, kw, stride, padding, H, W};
  const std::size_t grid = H * W;
  const std::size_t rows = g.rows();
  const std::size_t chunk = chunk_samples(N, std::max(rows, C) * grid);

  std::vector<T> out(N * O * OH * OW, T(0));
  {
    std::vector<T> xcm(C * chunk * grid);
    std::vector<T> cols(rows * chunk * grid);
    ConstMatrixMap<T> wm(weight.data().data(), C, rows);
    for (std::size_t s0 = 0; s0 < N; s0 += chunk) {
      const std::size_t nb = std::min(chunk, N - s0);
      to_channel_major(input.data().data() + s0 * C * grid, nb, C, grid, xcm.data());
      MatrixMap<T>(cols.data(), rows, nb * grid).noalias() =
          wm.transpose() * ConstMatrixMap<T>(xcm.data(), C, nb * grid);
      col2im(cols.data(), nb, g, out.data() + s0 * O * OH * OW);
    }
    if (bias.defined()) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
          T* dst = out.data() + (n * O + o) * OH * OW;
          for (std::size_t p = 0; p < OH * OW; ++p) dst[p] += bias[o];
        }
    }
  }

  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  auto x_data = input.handle();
  auto w_data = weight.handle();
  const bool has_bias = bias.defined();
  return Tensor<T>::make_result(
      Shape{N, O, OH, OW}, std::move(out), "conv_transpose2d", std::move(inputs),
      [=](std::span<const T> gout, std::span<const std::span<T>> gin) {
        std::vector<T> cols(rows * chunk * grid);
        std::vector<T> xcm(C * chunk * grid);
        ConstMatrixMap<T> wm(w_data->data.data(), C, rows);
        if (has_bias && !gin[2].empty()) {
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o) {
              const T* src = gout.data() + (n * O + o) * OH * OW;
              T acc = 0;
              for (std::size_t p = 0; p < OH * OW; ++p) acc += src[p];
              gin[2][o] += acc;
            }
        }
        if (gin[0].empty() && gin[1].empty()) return;
        for (std::size_t s0 = 0; s0 < N; s0 += chunk) {
          const std::size_t nb = std::min(chunk, N - s0);
          im2col(gout.data() + s0 * O * OH * OW, nb, g, cols.data());
          ConstMatrixMap<T> cm(cols.data(), rows, nb * grid);
          if (!gin[1].empty()) {
            to_channel_major(x_data->data.data() + s0 * C * grid, nb, C, grid, xcm.data());
            MatrixMap<T>(gin[1].data(), C, rows).noalias() +=
                ConstMatrixMap<T>(xcm.data(), C, nb * grid) * cm.transpose();
          }
          if (!gin[0].empty()) {
            MatrixMap<T> xm(xcm.data(), C, nb * grid);
            xm.noalias() = wm * cm;
            from_channel_major_add(xcm.data(), nb, C, grid, gin[0].data() + s0 * C * grid);
          }
        }
      });
}

template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride,
                           std::size_t padding) {
  return conv_transpose2d(input, weight, Tensor<T>{}, stride, padding);
}

// ---------------------------------------------------------------------------
// Elementwise

/// max(x, slope*x); the derivative at exactly 0 is 1.
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope) {
  if (!(slope >= 0.0 && slope < 1.0)) throw ConfigError("leaky_relu: slope must lie in [0,1)");
  const T a = static_cast<T>(slope);
  std::vector<T> out(x.size());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] >= T(0) ? in[i] : a * in[i];
  auto xh = x.handle();
  return Tensor<T>::make_result(x.shape(), std::move(out), "leaky_relu", {x},
                                [xh, a](std::span<const T> g, std::span<const std::span<T>> gin) {
                                  const auto& v = xh->data;
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    gin[0][i] += v[i] >= T(0) ? g[i] : a * g[i];
                                });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return leaky_relu(x, 0.0);
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + to_string(a.shape()) + " vs " +
                                              to_string(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), "add", {a, b},
                                [](std::span<const T> g, std::span<const std::span<T>> gin) {
                                  for (auto& dst : gin)
                                    if (!dst.empty())
                                      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                                });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch " + to_string(a.shape()) + " vs " +
                                              to_string(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), "sub", {a, b},
                                [](std::span<const T> g, std::span<const std::span<T>> gin) {
                                  if (!gin[0].empty())
                                    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                                  if (!gin[1].empty())
                                    for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] -= g[i];
                                });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch " + to_string(a.shape()) + " vs " +
                                              to_string(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto ah = a.handle();
  auto bh = b.handle();
  return Tensor<T>::make_result(a.shape(), std::move(out), "mul", {a, b},
                                [ah, bh](std::span<const T> g, std::span<const std::span<T>> gin) {
                                  if (!gin[0].empty())
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      gin[0][i] += g[i] * bh->data[i];
                                  if (!gin[1].empty())
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      gin[1][i] += g[i] * ah->data[i];
                                });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return Tensor<T>::make_result(x.shape(), std::move(out), "scale", {x},
                                [factor](std::span<const T> g, std::span<const std::span<T>> gin) {
                                  for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * factor;
                                });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return Tensor<T>::make_result(Shape{1}, {acc}, "sum", {x},
                                [](std::span<const T> g, std::span<const std::span<T>> gin) {
                                  for (auto& v : gin[0]) v += g[0];
                                });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  const T inv = T(1) / static_cast<T>(x.size());
  T acc = 0;
  for (T v : x.data()) acc += v;
  return Tensor<T>::make_result(Shape{1}, {acc * inv}, "mean", {x},
                                [inv](std::span<const T> g, std::span<const std::span<T>> gin) {
                                  for (auto& v : gin[0]) v += g[0] * inv;
                                });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.size(), "reshape: cannot view " + to_string(x.shape()) +
                                                " as " + to_string(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return Tensor<T>::make_result(std::move(shape), std::move(out), "reshape", {x},
                                [](std::span<const T> g, std::span<const std::span<T>> gin) {
                                  for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                                });
}

/// [N, ...] -> [N, rest]
template <class T>
Tensor<T> flatten(const Tensor<T>& x) {
  return reshape(x, Shape{x.dim(0), x.size() / x.dim(0)});
}

// ---------------------------------------------------------------------------
// Normalization, pooling, affine

/// Per-channel batch normalization. Training mode normalizes with biased
/// batch statistics and blends the unbiased variance into the running
/// estimate; eval mode uses the running statistics.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& shift,
                      Tensor<T>& running_mean, Tensor<T>& running_var, double momentum, double eps,
                      bool training) {
  detail::require_rank(x.shape(), 4, "batchnorm2d", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const Shape cshape{C};
  detail::require(gamma.shape() == cshape && shift.shape() == cshape &&
                      running_mean.shape() == cshape && running_var.shape() == cshape,
                  "batchnorm2d: channel parameters must have shape [" + std::to_string(C) + "]");
  if (!(eps > 0.0)) throw ConfigError("batchnorm2d: eps must be positive");
  const std::size_t M = N * HW;
  if (training && M < 2) {
    throw DimensionError("batchnorm2d: degenerate batch, training mode needs at least 2 values per channel");
  }

  std::vector<T> mean_c(C), invstd(C);
  auto xd = x.data();
  if (training) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      T acc = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) acc += xd[(n * C + c) * HW + p];
      const T mu = acc / static_cast<T>(M);
      T var = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) {
          const T d = xd[(n * C + c) * HW + p] - mu;
          var += d * d;
        }
      var /= static_cast<T>(M);
      mean_c[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + static_cast<T>(eps));
      const T m = static_cast<T>(momentum);
      rm[c] = (T(1) - m) * rm[c] + m * mu;
      rv[c] = (T(1) - m) * rv[c] + m * var * static_cast<T>(M) / static_cast<T>(M - 1);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean_c[c] = running_mean[c];
      invstd[c] = T(1) / std::sqrt(running_var[c] + static_cast<T>(eps));
    }
  }

  std::vector<T> xhat(x.size()), out(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) {
        const std::size_t i = (n * C + c) * HW + p;
        xhat[i] = (xd[i] - mean_c[c]) * invstd[c];
        out[i] = gamma[c] * xhat[i] + shift[c];
      }

  auto gh = gamma.handle();
  return Tensor<T>::make_result(
      x.shape(), std::move(out), "batchnorm2d", {x, gamma, shift},
      [=, xhat = std::move(xhat), invstd = std::move(invstd)](std::span<const T> g,
                                                              std::span<const std::span<T>> gin) {
        for (std::size_t c = 0; c < C; ++c) {
          T sum_g = 0, sum_gx = 0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
              const std::size_t i = (n * C + c) * HW + p;
              sum_g += g[i];
              sum_gx += g[i] * xhat[i];
            }
          if (!gin[1].empty()) gin[1][c] += sum_gx;
          if (!gin[2].empty()) gin[2][c] += sum_g;
          if (gin[0].empty()) continue;
          const T gam = gh->data[c];
          if (training) {
            const T k = gam * invstd[c] / static_cast<T>(M);
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t p = 0; p < HW; ++p) {
                const std::size_t i = (n * C + c) * HW + p;
                gin[0][i] += k * (static_cast<T>(M) * g[i] - sum_g - xhat[i] * sum_gx);
              }
          } else {
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t p = 0; p < HW; ++p) {
                const std::size_t i = (n * C + c) * HW + p;
                gin[0][i] += g[i] * gam * invstd[c];
              }
          }
        }
      });
}

/// x[N,F] * weight[O,F]^T + bias[O]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  using namespace detail;
  require_rank(x.shape(), 2, "linear", "input");
  require_rank(weight.shape(), 2, "linear", "weight");
  const std::size_t N = x.dim(0), F = x.dim(1), O = weight.dim(0);
  require(weight.dim(1) == F, "linear: input has " + std::to_string(F) +
                                  " features but weight expects " + std::to_string(weight.dim(1)));
  if (bias.defined()) require(bias.shape() == Shape{O}, "linear: bias must have shape [" +
                                                             std::to_string(O) + "]");
  std::vector<T> out(N * O);
  MatrixMap<T> om(out.data(), N, O);
  om.noalias() = ConstMatrixMap<T>(x.data().data(), N, F) *
                 ConstMatrixMap<T>(weight.data().data(), O, F).transpose();
  if (bias.defined())
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o) out[n * O + o] += bias[o];

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  auto xh = x.handle();
  auto wh = weight.handle();
  const bool has_bias = bias.defined();
  return Tensor<T>::make_result(
      Shape{N, O}, std::move(out), "linear", std::move(inputs),
      [=](std::span<const T> g, std::span<const std::span<T>> gin) {
        ConstMatrixMap<T> gm(g.data(), N, O);
        if (!gin[0].empty())
          MatrixMap<T>(gin[0].data(), N, F).noalias() +=
              gm * ConstMatrixMap<T>(wh->data.data(), O, F);
        if (!gin[1].empty())
          MatrixMap<T>(gin[1].data(), O, F).noalias() +=
              gm.transpose() * ConstMatrixMap<T>(xh->data.data(), N, F);
        if (has_bias && !gin[2].empty())
          for (std::size_t o = 0; o < O; ++o) {
            T acc = 0;
            for (std::size_t n = 0; n < N; ++n) acc += g[n * O + o];
            gin[2][o] += acc;
          }
      });
}

/// Non-overlapping kernel x kernel window averages.
template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t kernel) {
  detail::require_rank(x.shape(), 4, "avg_pool2d", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel == 0 || H % kernel != 0 || W % kernel != 0) {
    throw ConfigError("avg_pool2d: spatial dims " + std::to_string(H) + "x" + std::to_string(W) +
                      " not divisible by kernel " + std::to_string(kernel));
  }
  const std::size_t OH = H / kernel, OW = W / kernel;
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  std::vector<T> out(N * C * OH * OW, T(0));
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        out[(nc * OH + y / kernel) * OW + xx / kernel] += x[(nc * H + y) * W + xx] * inv;
  return Tensor<T>::make_result(
      Shape{N, C, OH, OW}, std::move(out), "avg_pool2d", {x},
      [=](std::span<const T> g, std::span<const std::span<T>> gin) {
        for (std::size_t nc = 0; nc < N * C; ++nc)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx)
              gin[0][(nc * H + y) * W + xx] += g[(nc * OH + y / kernel) * OW + xx / kernel] * inv;
      });
}

/// [N,C,H,W] -> [N,C,1,1]
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const T inv = T(1) / static_cast<T>(HW);
  std::vector<T> out(N * C);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T acc = 0;
    for (std::size_t p = 0; p < HW; ++p) acc += x[nc * HW + p];
    out[nc] = acc * inv;
  }
  return Tensor<T>::make_result(Shape{N, C, 1, 1}, std::move(out), "global_avg_pool", {x},
                                [=](std::span<const T> g, std::span<const std::span<T>> gin) {
                                  for (std::size_t nc = 0; nc < N * C; ++nc)
                                    for (std::size_t p = 0; p < HW; ++p)
                                      gin[0][nc * HW + p] += g[nc] * inv;
                                });
}

// ---------------------------------------------------------------------------
// Per-sample reductions

/// Divides each sample's flattened entries by max(||v||_2, eps).
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, double eps = 1e-12) {
  if (!(eps > 0.0)) throw ConfigError("l2_normalize: eps must be positive");
  const std::size_t N = x.dim(0), D = x.size() / N;
  std::vector<T> out(x.size()), denom(N);
  std::vector<char> clamped(N);
  for (std::size_t n = 0; n < N; ++n) {
    T sq = 0;
    for (std::size_t i = 0; i < D; ++i) sq += x[n * D + i] * x[n * D + i];
    const T norm = std::sqrt(sq);
    clamped[n] = norm < static_cast<T>(eps);
    denom[n] = clamped[n] ? static_cast<T>(eps) : norm;
    for (std::size_t i = 0; i < D; ++i) out[n * D + i] = x[n * D + i] / denom[n];
  }
  auto y = out;
  return Tensor<T>::make_result(
      x.shape(), std::move(out), "l2_normalize", {x},
      [=, y = std::move(y)](std::span<const T> g, std::span<const std::span<T>> gin) {
        for (std::size_t n = 0; n < N; ++n) {
          const T* yn = y.data() + n * D;
          const T* gn = g.data() + n * D;
          if (clamped[n]) {
            for (std::size_t i = 0; i < D; ++i) gin[0][n * D + i] += gn[i] / denom[n];
            continue;
          }
          T dot = 0;
          for (std::size_t i = 0; i < D; ++i) dot += yn[i] * gn[i];
          for (std::size_t i = 0; i < D; ++i) gin[0][n * D + i] += (gn[i] - yn[i] * dot) / denom[n];
        }
      });
}

/// Per-sample p-norm of the flattened entries; p in {1,2}. Output [N].
template <class T>
Tensor<T> row_pnorm(const Tensor<T>& x, int p) {
  if (p != 1 && p != 2) throw ConfigError("row_pnorm: p must be 1 or 2");
  const std::size_t N = x.dim(0), D = x.size() / N;
  std::vector<T> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    T acc = 0;
    for (std::size_t i = 0; i < D; ++i) {
      const T v = x[n * D + i];
      acc += p == 1 ? std::abs(v) : v * v;
    }
    out[n] = p == 1 ? acc : std::sqrt(acc);
  }
  auto xh = x.handle();
  auto norms = out;
  return Tensor<T>::make_result(
      Shape{N}, std::move(out), p == 1 ? "row_l1norm" : "row_l2norm", {x},
      [=, norms = std::move(norms)](std::span<const T> g, std::span<const std::span<T>> gin) {
        const auto& v = xh->data;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t i = 0; i < D; ++i) {
            const T xi = v[n * D + i];
            T d;
            if (p == 1) {
              d = xi > T(0) ? T(1) : (xi < T(0) ? T(-1) : T(0));
            } else {
              d = norms[n] > T(0) ? xi / norms[n] : T(0);
            }
            gin[0][n * D + i] += g[n] * d;
          }
        }
      });
}

/// Sum of squares over the channel axis: [N,C,H,W] -> [N, H*W].
template <class T>
Tensor<T> channel_sum_squares(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "channel_sum_squares", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<T> out(N * HW, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) {
        const T v = x[(n * C + c) * HW + p];
        out[n * HW + p] += v * v;
      }
  auto xh = x.handle();
  return Tensor<T>::make_result(Shape{N, HW}, std::move(out), "channel_sum_squares", {x},
                                [=](std::span<const T> g, std::span<const std::span<T>> gin) {
                                  const auto& v = xh->data;
                                  for (std::size_t n = 0; n < N; ++n)
                                    for (std::size_t c = 0; c < C; ++c)
                                      for (std::size_t p = 0; p < HW; ++p) {
                                        const std::size_t i = (n * C + c) * HW + p;
                                        gin[0][i] += T(2) * v[i] * g[n * HW + p];
                                      }
                                });
}

// ---------------------------------------------------------------------------
// Softmax family

/// Row softmax of logits / temperature.
template <class T>
Tensor<T> softmax_t(const Tensor<T>& logits, double temperature = 1.0) {
  detail::require_rank(logits.shape(), 2, "softmax_t", "logits");
  if (!(temperature > 0.0)) throw ConfigError("softmax: temperature must be positive");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  const T invT = T(1) / static_cast<T>(temperature);
  std::vector<T> out(N * K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data().data() + n * K;
    const T mx = *std::max_element(z, z + K);
    T acc = 0;
    for (std::size_t k = 0; k < K; ++k) {
      out[n * K + k] = std::exp((z[k] - mx) * invT);
      acc += out[n * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] /= acc;
  }
  auto probs = out;
  return Tensor<T>::make_result(
      Shape{N, K}, std::move(out), "softmax_t", {logits},
      [=, probs = std::move(probs)](std::span<const T> g, std::span<const std::span<T>> gin) {
        for (std::size_t n = 0; n < N; ++n) {
          T dot = 0;
          for (std::size_t k = 0; k < K; ++k) dot += g[n * K + k] * probs[n * K + k];
          for (std::size_t k = 0; k < K; ++k)
            gin[0][n * K + k] += probs[n * K + k] * (g[n * K + k] - dot) * invT;
        }
      });
}

/// Row log-softmax of logits / temperature.
template <class T>
Tensor<T> log_softmax(const Tensor<T>& logits, double temperature = 1.0) {
  detail::require_rank(logits.shape(), 2, "log_softmax", "logits");
  if (!(temperature > 0.0)) throw ConfigError("log_softmax: temperature must be positive");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  const T invT = T(1) / static_cast<T>(temperature);
  std::vector<T> out(N * K), probs(N * K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data().data() + n * K;
    const T mx = *std::max_element(z, z + K);
    T acc = 0;
    for (std::size_t k = 0; k < K; ++k) acc += std::exp((z[k] - mx) * invT);
    const T lse = std::log(acc);
    for (std::size_t k = 0; k < K; ++k) {
      out[n * K + k] = (z[k] - mx) * invT - lse;
      probs[n * K + k] = std::exp(out[n * K + k]);
    }
  }
  return Tensor<T>::make_result(
      Shape{N, K}, std::move(out), "log_softmax", {logits},
      [=, probs = std::move(probs)](std::span<const T> g, std::span<const std::span<T>> gin) {
        for (std::size_t n = 0; n < N; ++n) {
          T gs = 0;
          for (std::size_t k = 0; k < K; ++k) gs += g[n * K + k];
          for (std::size_t k = 0; k < K; ++k)
            gin[0][n * K + k] += (g[n * K + k] - probs[n * K + k] * gs) * invT;
        }
      });
}

/// out[n] = x[n, index[n]]
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const int> index) {
  detail::require_rank(x.shape(), 2, "gather_rows", "input");
  const std::size_t N = x.dim(0), K = x.dim(1);
  detail::require(index.size() == N, "gather_rows: " + std::to_string(index.size()) +
                                         " indices for " + std::to_string(N) + " rows");
  std::vector<std::size_t> idx(N);
  std::vector<T> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    if (index[n] < 0 || static_cast<std::size_t>(index[n]) >= K) {
      throw DataError("label " + std::to_string(index[n]) + " out of range [0," +
                      std::to_string(K) + ")");
    }
    idx[n] = static_cast<std::size_t>(index[n]);
    out[n] = x[n * K + idx[n]];
  }
  return Tensor<T>::make_result(Shape{N}, std::move(out), "gather_rows", {x},
                                [=](std::span<const T> g, std::span<const std::span<T>> gin) {
                                  for (std::size_t n = 0; n < N; ++n) gin[0][n * K + idx[n]] += g[n];
                                });
}

}  // namespace ktransfer
