#pragma once

// Naive nested-loop reference implementations used as oracles by the
// verification suites. They share no code with ops.hpp.

#include <cstddef>
#include <vector>

namespace ktransfer::reference {

/// Direct cross-correlation, NCHW input and OIHW weight.
template <class T>
std::vector<T> conv2d(const std::vector<T>& x, std::size_t N, std::size_t C, std::size_t H, std::size_t W,
                      const std::vector<T>& w, std::size_t O, std::size_t kh, std::size_t kw,
                      const std::vector<T>& bias, std::size_t stride, std::size_t pad, std::size_t& OH,
                      std::size_t& OW) {
  OH = (H + 2 * pad - kh) / stride + 1;
  OW = (W + 2 * pad - kw) / stride + 1;
  std::vector<T> out(N * O * OH * OW, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          T acc = bias.empty() ? T(0) : bias[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long long y = static_cast<long long>(oy * stride + i) - static_cast<long long>(pad);
                const long long xx = static_cast<long long>(ox * stride + j) - static_cast<long long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long long>(H) || xx >= static_cast<long long>(W)) continue;
                acc += x[((n * C + c) * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(xx)] *
                       w[((o * C + c) * kh + i) * kw + j];
              }
          out[((n * O + o) * OH + oy) * OW + ox] = acc;
        }
  return out;
}

/// out[n,o] = sum_f x[n,f] w[o,f] + b[o]
template <class T>
std::vector<T> linear(const std::vector<T>& x, std::size_t N, std::size_t F, const std::vector<T>& w,
                      std::size_t O, const std::vector<T>& b) {
  std::vector<T> out(N * O);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      T acc = b[o];
      for (std::size_t f = 0; f < F; ++f) acc += x[n * F + f] * w[o * F + f];
      out[n * O + o] = acc;
    }
  return out;
}

}  // namespace ktransfer::reference
