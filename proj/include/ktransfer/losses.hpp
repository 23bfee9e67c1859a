#pragma once

// Training objectives: reconstruction, classification, factor transfer and
// their combination, plus the KD and attention-transfer baselines.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ktransfer/error.hpp"
#include "ktransfer/ops.hpp"
#include "ktransfer/tensor.hpp"

namespace ktransfer {

struct FactorConfig {
  double k = 0.5;        // paraphrase rate
  double beta = 500.0;   // factor-transfer weight
  int p = 1;             // norm of the factor difference
  double T = 4.0;        // KD temperature
  double beta_at = 1000.0;

  void validate() const {
    if (!(k > 0.0)) throw ConfigError("k must be positive");
    if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative");
    if (!(beta_at >= 0.0)) throw ConfigError("beta_at must be non-negative");
    if (p != 1 && p != 2) throw ConfigError("p must be 1 or 2");
    if (!(T > 0.0)) throw ConfigError("T must be positive");
  }
};

enum class Method { scratch, ft, kd, at, ft_kd, at_kd };

inline constexpr std::array<Method, 6> kAllMethods = {Method::scratch, Method::at, Method::kd,
                                                      Method::ft, Method::at_kd, Method::ft_kd};

inline std::string_view method_tag(Method m) {
  switch (m) {
    case Method::scratch: return "scratch";
    case Method::ft: return "ft";
    case Method::kd: return "kd";
    case Method::at: return "at";
    case Method::ft_kd: return "ft+kd";
    case Method::at_kd: return "at+kd";
  }
  return "?";
}

/// Column header used in comparison tables.
inline std::string_view method_header(Method m) {
  switch (m) {
    case Method::scratch: return "Student";
    case Method::ft: return "FT";
    case Method::kd: return "KD";
    case Method::at: return "AT";
    case Method::ft_kd: return "FT+KD";
    case Method::at_kd: return "AT+KD";
  }
  return "?";
}

inline Method parse_method(std::string_view tag) {
  for (Method m : kAllMethods)
    if (method_tag(m) == tag) return m;
  throw ConfigError("unknown method '" + std::string(tag) + "' (expected scratch, ft, kd, at, ft+kd, at+kd)");
}

inline bool uses_factor(Method m) { return m == Method::ft || m == Method::ft_kd; }
inline bool uses_kd(Method m) { return m == Method::kd || m == Method::ft_kd || m == Method::at_kd; }
inline bool uses_attention(Method m) { return m == Method::at || m == Method::at_kd; }
inline bool uses_teacher(Method m) { return m != Method::scratch; }

namespace detail {
inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}
}  // namespace detail

/// (1/N) sum_n ||x_n - px_n||^2
template <class T>
Tensor<T> reconstruction_loss(const Tensor<T>& x, const Tensor<T>& px) {
  detail::require_same(x.shape(), px.shape(), "reconstruction_loss");
  auto d = sub(x, px);
  return scale(sum(mul(d, d)), T(1) / static_cast<T>(x.dim(0)));
}

/// Mean negative log-likelihood of the labels under softmax(logits).
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.ndim() != 2) throw DimensionError("cross_entropy: logits must be [N,K], got " + to_string(logits.shape()));
  return scale(mean(gather_rows(log_softmax(logits), labels)), T(-1));
}

/// Batch mean of || ft/||ft|| - fs/||fs|| ||_p over flattened samples. The
/// teacher factor is a constant.
template <class T>
Tensor<T> factor_transfer_loss(const Tensor<T>& ft, const Tensor<T>& fs, int p) {
  detail::require_same(ft.shape(), fs.shape(), "factor_transfer_loss");
  if (p != 1 && p != 2) throw ConfigError("factor_transfer_loss: p must be 1 or 2");
  const Tensor<T> teacher = [&] {
    NoGradGuard guard;
    return l2_normalize(ft.detach());
  }();
  return mean(row_pnorm(sub(teacher, l2_normalize(fs)), p));
}

/// The factor-transfer term weighted by beta during student training: the
/// loss above divided by the number of factor elements per sample. beta=500
/// was tuned against this element-averaged scale; on the raw per-sample norm
/// it swamps the classification loss.
template <class T>
Tensor<T> factor_transfer_term(const Tensor<T>& ft, const Tensor<T>& fs, int p) {
  const std::size_t per_sample = fs.size() / fs.dim(0);
  return scale(factor_transfer_loss(ft, fs, p), static_cast<T>(1.0 / static_cast<double>(per_sample)));
}

template <class T>
Tensor<T> student_loss(const Tensor<T>& cls, const Tensor<T>& ft, double beta) {
  if (!(beta >= 0.0)) throw ConfigError("student_loss: beta must be non-negative");
  return add(cls, scale(ft, static_cast<T>(beta)));
}

/// T^2 * KL(softmax(teacher/T) || softmax(student/T)), batch mean.
template <class T>
Tensor<T> kd_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("kd_loss: temperature must be positive");
  detail::require_same(student_logits.shape(), teacher_logits.shape(), "kd_loss");
  const std::size_t N = student_logits.dim(0);
  Tensor<T> target;
  T entropy_term = 0;  // sum p log p
  {
    NoGradGuard guard;
    target = softmax_t(teacher_logits.detach(), temperature);
    for (T v : target.data())
      if (v > T(0)) entropy_term += v * std::log(v);
  }
  const T t2 = static_cast<T>(temperature * temperature);
  const T inv_n = T(1) / static_cast<T>(N);
  auto cross = sum(mul(target, log_softmax(student_logits, temperature)));
  return add(scale(cross, -t2 * inv_n), Tensor<T>::scalar(t2 * inv_n * entropy_term));
}

/// l2-normalized per-sample map of channel-wise squared activations, [N, H*W].
template <class T>
Tensor<T> attention_map(const Tensor<T>& feature) {
  return l2_normalize(channel_sum_squares(feature));
}

/// Sum over paired groups of the batch-mean l2 distance between attention
/// maps. Teacher features are constants. Unweighted; see compose_total.
template <class T>
Tensor<T> at_loss(std::span<const Tensor<T>> student_groups, std::span<const Tensor<T>> teacher_groups) {
  if (student_groups.size() != teacher_groups.size() || student_groups.empty()) {
    throw DimensionError("at_loss: need the same non-zero number of student and teacher groups");
  }
  Tensor<T> total;
  for (std::size_t g = 0; g < student_groups.size(); ++g) {
    const auto& s = student_groups[g];
    const auto& t = teacher_groups[g];
    if (s.ndim() != 4 || t.ndim() != 4 || s.dim(0) != t.dim(0) || s.dim(2) * s.dim(3) != t.dim(2) * t.dim(3)) {
      throw DimensionError("at_loss: group " + std::to_string(g) + " spatial mismatch " + to_string(s.shape()) +
                           " vs " + to_string(t.shape()));
    }
    Tensor<T> target;
    {
      NoGradGuard guard;
      target = attention_map(t.detach());
    }
    auto term = mean(row_pnorm(sub(attention_map(s), target), 2));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

template <class T>
struct LossParts {
  Tensor<T> cls;
  Tensor<T> ft;
  Tensor<T> kd;
  Tensor<T> at;
};

/// Total objective for a method: scratch = cls, ft = cls + beta*FT,
/// kd = cls + KD, at = cls + beta_at*AT; hybrids add the KD term.
template <class T>
Tensor<T> compose_total(Method method, const LossParts<T>& parts, const FactorConfig& factor) {
  auto need = [&](const Tensor<T>& t, const char* name) {
    if (!t.defined()) {
      throw ConfigError("method " + std::string(method_tag(method)) + " requires the " + name + " loss term");
    }
  };
  need(parts.cls, "classification");
  Tensor<T> total = parts.cls;
  if (uses_factor(method)) {
    need(parts.ft, "factor-transfer");
    total = student_loss(total, parts.ft, factor.beta);
  }
  if (uses_attention(method)) {
    need(parts.at, "attention-transfer");
    total = add(total, scale(parts.at, static_cast<T>(factor.beta_at)));
  }
  if (uses_kd(method)) {
    need(parts.kd, "knowledge-distillation");
    total = add(total, parts.kd);
  }
  return total;
}

}  // namespace ktransfer
