#pragma once

// Teacher training, stage-1 paraphraser training, stage-2 student training
// (factor transfer, KD, AT and their ablations) and evaluation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ktransfer/checkpoint.hpp"
#include "ktransfer/data.hpp"
#include "ktransfer/error.hpp"
#include "ktransfer/losses.hpp"
#include "ktransfer/metrics.hpp"
#include "ktransfer/nn.hpp"
#include "ktransfer/optim.hpp"
#include "ktransfer/rng.hpp"

namespace ktransfer {

/// Which factor-transfer modules take part in stage 2.
enum class Ablation { both, para_only, trans_only, neither };

inline std::string_view ablation_tag(Ablation a) {
  switch (a) {
    case Ablation::both: return "both";
    case Ablation::para_only: return "para_only";
    case Ablation::trans_only: return "trans_only";
    case Ablation::neither: return "neither";
  }
  return "?";
}

inline Ablation parse_ablation(std::string_view tag) {
  for (Ablation a : {Ablation::both, Ablation::para_only, Ablation::trans_only, Ablation::neither})
    if (ablation_tag(a) == tag) return a;
  throw ConfigError("unknown ablation '" + std::string(tag) + "' (expected both, para_only, trans_only, neither)");
}

inline bool uses_paraphraser(Ablation a) { return a == Ablation::both || a == Ablation::para_only; }
inline bool uses_translator(Ablation a) { return a == Ablation::both || a == Ablation::trans_only; }

struct ResnetSpec {
  std::size_t depth = 3;  // residual blocks per group
  std::size_t width = 16;
};

/// The feature group factors are extracted from.
inline constexpr const char* kLastGroup = "g3";
inline const std::vector<std::string> kAttentionGroups = {"g1", "g2", "g3"};

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 128;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::optional<std::vector<std::size_t>> lr_drop_epochs;  // unset: 50% and 75% of epochs
  double lr_drop_factor = 0.1;
  std::uint64_t seed = 1;
  Method method = Method::scratch;
  FactorConfig factor;
  Ablation ablation = Ablation::both;
  std::size_t augment_pad = 4;
  bool augment_flip = true;
  std::size_t max_steps = 0;  // 0 = no cap
  std::optional<ChannelStats> normalization;
  std::function<void(const EpochRecord&)> on_epoch;

  std::vector<std::size_t> drops() const {
    if (lr_drop_epochs) return *lr_drop_epochs;
    std::vector<std::size_t> d;
    for (std::size_t e : {epochs / 2, epochs * 3 / 4})
      if (e > 0 && e < epochs && (d.empty() || d.back() < e)) d.push_back(e);
    return d;
  }

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(lr_drop_factor > 0.0)) throw ConfigError("lr_drop_factor must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    const auto d = drops();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d[i] >= epochs) {
        throw ConfigError("lr drop epoch " + std::to_string(d[i]) + " must be < epochs (" + std::to_string(epochs) + ")");
      }
      if (i > 0 && d[i] <= d[i - 1]) throw ConfigError("lr drop epochs must be strictly increasing");
    }
    factor.validate();
  }
};

inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.epochs) {
    throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  }
  double lr = cfg.lr;
  for (std::size_t d : cfg.drops())
    if (d <= epoch) lr *= cfg.lr_drop_factor;
  return lr;
}

struct TrainResult {
  Checkpoint checkpoint;
  Metrics metrics;
  std::vector<StepRecord> steps;
  std::optional<Checkpoint> translator;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Percentage of misclassified samples under argmax, in eval mode.
template <class T>
double evaluate_network(Network<T>& net, const Dataset& data, const std::optional<ChannelStats>& stats,
                        std::size_t batch_size = 256) {
  if (data.size() == 0) throw DataError("cannot evaluate on empty dataset '" + data.name + "'");
  const Mode saved = net.mode();
  net.eval();
  NoGradGuard guard;
  std::size_t wrong = 0;
  BatchIterator it(data, batch_size, false, 0);
  while (auto b = it.next()) {
    Batch in = stats ? normalize(*b, stats->mean, stats->std) : *b;
    Tensor<T> x = [&] {
      if constexpr (std::is_same_v<T, float>) return in.x;
      else {
        std::vector<T> v(in.x.data().begin(), in.x.data().end());
        return Tensor<T>(in.x.shape(), std::move(v));
      }
    }();
    auto logits = net.forward(x);
    const std::size_t K = logits.dim(1);
    if (K != data.class_count) {
      net.set_mode(saved);
      throw DataError("network '" + net.arch() + "' predicts " + std::to_string(K) + " classes but dataset '" +
                      data.name + "' has " + std::to_string(data.class_count));
    }
    auto v = logits.data();
    for (std::size_t n = 0; n < in.y.size(); ++n) {
      const auto row = v.subspan(n * K, K);
      const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (pred != in.y[n]) ++wrong;
    }
  }
  net.set_mode(saved);
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(data.size());
}

inline std::optional<ChannelStats> checkpoint_stats(const Checkpoint& ck) {
  if (!ck.norm_mean || !ck.norm_std) return std::nullopt;
  return ChannelStats{*ck.norm_mean, *ck.norm_std};
}

inline double evaluate(const Checkpoint& ck, const Dataset& data) {
  auto net = ck.to_network<float>();
  return evaluate_network(net, data, checkpoint_stats(ck));
}

// ---------------------------------------------------------------------------
// Shared epoch loop

namespace detail {

struct EpochAccumulator {
  double cls = 0, ft = 0, kd = 0, at = 0, rec = 0;
  std::size_t steps = 0, seen = 0, wrong = 0;

  void add(const StepRecord& s) {
    ++steps;
    if (s.l_cls) cls += *s.l_cls;
    if (s.l_ft) ft += *s.l_ft;
    if (s.l_kd) kd += *s.l_kd;
    if (s.l_at) at += *s.l_at;
    if (s.l_rec) rec += *s.l_rec;
  }

  void count_errors(const Tensor<float>& logits, std::span<const int> labels) {
    const std::size_t K = logits.dim(1);
    auto v = logits.data();
    for (std::size_t n = 0; n < labels.size(); ++n) {
      const auto row = v.subspan(n * K, K);
      if (std::max_element(row.begin(), row.end()) - row.begin() != labels[n]) ++wrong;
    }
    seen += labels.size();
  }
};

inline void check_finite(double loss, std::size_t epoch, std::size_t step, double lr, const char* what) {
  if (!std::isfinite(loss)) {
    throw NumericError(std::string(what) + " loss became " + format_number(loss) + " at epoch " +
                       std::to_string(epoch) + ", step " + std::to_string(step) + " (lr " + format_number(lr) + ")");
  }
}

inline std::string rng_state(std::uint64_t seed, std::size_t epoch, std::size_t step) {
  return "derive_seed seed=" + std::to_string(seed) + " epoch=" + std::to_string(epoch) + " step=" + std::to_string(step);
}

/// Runs cfg.epochs epochs (or until cfg.max_steps). `step_fn(batch, epoch,
/// step, lr, acc)` performs one optimization step on a prepared batch and
/// returns its StepRecord. `test_error` may be empty.
template <class StepFn>
std::size_t run_epochs(const Dataset& train, const TrainConfig& cfg, const ChannelStats& stats, bool track_errors,
                       StepFn&& step_fn, const std::function<std::optional<double>()>& test_error,
                       TrainResult& result) {
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps && step >= cfg.max_steps) break;
    const auto start = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch, cfg);
    EpochAccumulator acc;
    BatchIterator it(train, cfg.batch_size, true, derive_seed(cfg.seed, "shuffle", epoch));
    while (auto raw = it.next()) {
      if (cfg.max_steps && step >= cfg.max_steps) break;
      Batch b = augment(*raw, cfg.augment_pad, cfg.augment_flip, derive_seed(cfg.seed, "augment", step));
      b = normalize(b, stats.mean, stats.std);
      StepRecord rec = step_fn(b, epoch, step, lr, acc);
      rec.epoch = epoch;
      rec.step = step;
      rec.lr = lr;
      acc.add(rec);
      result.steps.push_back(rec);
      ++step;
    }
    EpochRecord r;
    r.epoch = epoch + 1;
    r.lr = lr;
    const auto& first = result.steps[result.steps.size() - acc.steps];
    const double n = static_cast<double>(acc.steps);
    if (first.l_cls) r.l_cls = acc.cls / n;
    if (first.l_ft) r.l_ft = acc.ft / n;
    if (first.l_kd) r.l_kd = acc.kd / n;
    if (first.l_at) r.l_at = acc.at / n;
    if (first.l_rec) r.l_rec = acc.rec / n;
    if (track_errors && acc.seen) r.train_err = 100.0 * static_cast<double>(acc.wrong) / static_cast<double>(acc.seen);
    if (test_error) r.test_err = test_error();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.metrics.records.push_back(r);
    if (cfg.on_epoch) cfg.on_epoch(r);
  }
  return step;
}

inline ChannelStats resolve_stats(const TrainConfig& cfg, const Checkpoint* teacher, const Dataset& train) {
  if (cfg.normalization) return *cfg.normalization;
  if (teacher) {
    if (auto s = checkpoint_stats(*teacher)) return *s;
  }
  return compute_channel_stats(train);
}

inline void attach_stats(Checkpoint& ck, const ChannelStats& stats) {
  ck.norm_mean = stats.mean;
  ck.norm_std = stats.std;
}

inline void require_classes(const Dataset& data, std::size_t classes, const std::string& who) {
  if (data.class_count != classes) {
    throw DataError(who + " predicts " + std::to_string(classes) + " classes but dataset '" + data.name + "' has " +
                    std::to_string(data.class_count));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Teacher

inline TrainResult train_teacher(const Dataset& train, const Dataset& test, const ResnetSpec& arch,
                                 const TrainConfig& cfg) {
  cfg.validate();
  train.validate();
  auto net = build_teacher<float>(arch.depth, arch.width, train.class_count, derive_seed(cfg.seed, "init/teacher"),
                                  train.channels);
  const ChannelStats stats = detail::resolve_stats(cfg, nullptr, train);
  Sgd<float> opt(parameter_pointers(net), cfg.momentum, cfg.weight_decay);
  TrainResult result;
  auto step_fn = [&](const Batch& b, std::size_t epoch, std::size_t step, double lr, detail::EpochAccumulator& acc) {
    net.train();
    auto logits = net.forward(b.x);
    auto loss = cross_entropy(logits, std::span<const int>(b.y));
    const double value = loss.item();
    detail::check_finite(value, epoch, step, lr, "teacher cross-entropy");
    backward(loss);
    opt.step(lr);
    opt.zero_grad();
    acc.count_errors(logits, b.y);
    StepRecord r;
    r.total = value;
    r.l_cls = value;
    return r;
  };
  std::function<std::optional<double>()> test_fn = [&]() -> std::optional<double> {
    if (test.size() == 0) return std::nullopt;
    return evaluate_network(net, test, stats);
  };
  const std::size_t steps = detail::run_epochs(train, cfg, stats, true, step_fn, test_fn, result);
  result.checkpoint = Checkpoint::from_network(net, steps, detail::rng_state(cfg.seed, cfg.epochs, steps));
  detail::attach_stats(result.checkpoint, stats);
  return result;
}

// ---------------------------------------------------------------------------
// Stage 1: paraphraser

/// Trains a paraphraser to reconstruct the teacher's last-group features.
/// The teacher is only run forward in eval mode; labels are never read.
inline TrainResult train_paraphraser(Network<float>& teacher, const Dataset& train, const TrainConfig& cfg,
                                     const ChannelStats& stats) {
  cfg.validate();
  const std::size_t m = teacher.group_channels(kLastGroup);
  auto para = build_paraphraser<float>(m, cfg.factor.k, derive_seed(cfg.seed, "init/paraphraser"));
  teacher.eval();
  Sgd<float> opt(parameter_pointers(para), cfg.momentum, cfg.weight_decay);
  TrainResult result;
  auto step_fn = [&](const Batch& b, std::size_t epoch, std::size_t step, double lr, detail::EpochAccumulator&) {
    Tensor<float> feature;
    {
      NoGradGuard guard;
      feature = teacher.forward_through(b.x, kLastGroup).detach();
    }
    para.train();
    auto loss = reconstruction_loss(feature, para.forward(feature));
    const double value = loss.item();
    detail::check_finite(value, epoch, step, lr, "reconstruction");
    // Step on the per-element mean so the learning rate does not depend on
    // the size of the feature map; the logged value is the per-sample sum.
    const float per_sample = static_cast<float>(feature.size() / feature.dim(0));
    backward(scale(loss, 1.0f / per_sample));
    opt.step(lr);
    opt.zero_grad();
    StepRecord r;
    r.total = value;
    r.l_rec = value;
    return r;
  };
  const std::size_t steps = detail::run_epochs(train, cfg, stats, false, step_fn, {}, result);
  result.checkpoint = Checkpoint::from_network(para, steps, detail::rng_state(cfg.seed, cfg.epochs, steps));
  detail::attach_stats(result.checkpoint, stats);
  return result;
}

inline TrainResult train_paraphraser(const Checkpoint& teacher_ckpt, const Dataset& train, const TrainConfig& cfg) {
  train.validate();
  auto teacher = teacher_ckpt.to_network<float>();
  teacher.set_requires_grad(false);
  return train_paraphraser(teacher, train, cfg, detail::resolve_stats(cfg, &teacher_ckpt, train));
}

// ---------------------------------------------------------------------------
// Stage 2: student (+ translator)

/// Networks and loss computation for one stage-2 run. Teacher and
/// paraphraser are frozen copies; student and translator are trainable.
class StudentSession {
 public:
  struct Output {
    LossParts<float> parts;
    Tensor<float> total;
    Tensor<float> logits;
  };

  StudentSession(const Checkpoint* teacher, const Checkpoint* paraphraser, const Dataset& train,
                 const ResnetSpec& arch, const TrainConfig& cfg)
      : cfg_(cfg) {
    cfg.validate();
    const Method method = cfg.method;
    const std::string tag(method_tag(method));
    student_ = build_student<float>(arch.depth, arch.width, train.class_count, derive_seed(cfg.seed, "init/student"),
                                    train.channels);
    if (uses_teacher(method)) {
      if (!teacher) throw ConfigError(tag + " requires a teacher checkpoint (--teacher <ckpt>)");
      teacher_ = teacher->to_network<float>();
      teacher_->eval();
      teacher_->set_requires_grad(false);
      if (teacher_->input_channels() != train.channels) {
        throw ConfigError("teacher expects " + std::to_string(teacher_->input_channels()) +
                          " input channels, dataset has " + std::to_string(train.channels));
      }
    }
    if (uses_factor(method)) setup_factor(paraphraser);
  }

  Output compute(const Batch& b) {
    const Method method = cfg_.method;
    student_.train();
    auto s = student_.forward_collect(b.x);
    Output out;
    out.logits = s.output;
    out.parts.cls = cross_entropy(s.output, std::span<const int>(b.y));
    ForwardResult<float> t;
    if (teacher_) {
      NoGradGuard guard;
      t = teacher_->forward_collect(b.x);
      if (t.output.dim(1) != s.output.dim(1)) {
        throw ConfigError("teacher predicts " + std::to_string(t.output.dim(1)) + " classes, student " +
                          std::to_string(s.output.dim(1)));
      }
    }
    if (uses_factor(method)) {
      const auto& ts = t.group_features.at(kLastGroup);
      const auto& ss = s.group_features.at(kLastGroup);
      if (ts.dim(2) != ss.dim(2) || ts.dim(3) != ss.dim(3)) {
        throw ConfigError("teacher and student last-group spatial sizes differ: " + to_string(ts.shape()) + " vs " +
                          to_string(ss.shape()));
      }
      Tensor<float> ft = paraphraser_ ? extract_factor(*paraphraser_, ts, true) : ts.detach();
      Tensor<float> fs = translator_ ? extract_factor(*translator_, ss, false) : ss;
      out.parts.ft = factor_transfer_term(ft, fs, cfg_.factor.p);
    }
    if (uses_kd(method)) out.parts.kd = kd_loss(s.output, t.output, cfg_.factor.T);
    if (uses_attention(method)) {
      std::vector<Tensor<float>> sg, tg;
      for (const auto& g : kAttentionGroups) {
        sg.push_back(s.group_features.at(g));
        tg.push_back(t.group_features.at(g));
      }
      out.parts.at = at_loss<float>(sg, tg);
    }
    out.total = compose_total(method, out.parts, cfg_.factor);
    return out;
  }

  std::vector<Parameter<float>*> trainable() {
    auto p = parameter_pointers(student_);
    if (translator_) {
      auto q = parameter_pointers(*translator_);
      p.insert(p.end(), q.begin(), q.end());
    }
    return p;
  }

  Network<float>& student() { return student_; }
  Network<float>* teacher() { return teacher_ ? &*teacher_ : nullptr; }
  Network<float>* paraphraser() { return paraphraser_ ? &*paraphraser_ : nullptr; }
  Network<float>* translator() { return translator_ ? &*translator_ : nullptr; }
  const TrainConfig& config() const { return cfg_; }

 private:
  void setup_factor(const Checkpoint* paraphraser) {
    const Ablation ab = cfg_.ablation;
    const std::size_t m = teacher_->group_channels(kLastGroup);
    const std::size_t s = student_.group_channels(kLastGroup);
    std::size_t target = m;  // channels of the teacher-side factor
    if (uses_paraphraser(ab)) {
      if (!paraphraser) {
        throw ConfigError("ft requires a paraphraser checkpoint (--paraphraser <ckpt>) unless ablation is trans_only or neither");
      }
      paraphraser_ = paraphraser->to_network<float>();
      paraphraser_->eval();
      paraphraser_->set_requires_grad(false);
      if (paraphraser_->input_channels() != m) {
        throw ConfigError("paraphraser expects " + std::to_string(paraphraser_->input_channels()) +
                          " channels, teacher last group has " + std::to_string(m));
      }
      target = paraphraser_->group_channels("encoder");
    }
    if (uses_translator(ab)) {
      // Without a paraphraser the translator must reproduce all m raw channels.
      const double k = uses_paraphraser(ab) ? cfg_.factor.k : 1.0;
      translator_ = build_translator<float>(s, m, k, derive_seed(cfg_.seed, "init/translator"));
      if (translator_->output_channels() != target) {
        throw ConfigError("translator produces " + std::to_string(translator_->output_channels()) +
                          " factor channels (k=" + format_number(k) + "), paraphraser factor has " +
                          std::to_string(target));
      }
    } else if (s != target) {
      throw ConfigError("ablation " + std::string(ablation_tag(ab)) + " matches student features (" +
                        std::to_string(s) + " channels) directly against a " + std::to_string(target) +
                        "-channel teacher factor; channel counts must be equal");
    }
  }

  TrainConfig cfg_;
  Network<float> student_;
  std::optional<Network<float>> teacher_;
  std::optional<Network<float>> paraphraser_;
  std::optional<Network<float>> translator_;
};

inline TrainResult train_student(const Checkpoint* teacher_ckpt, const Checkpoint* paraphraser_ckpt,
                                 const Dataset& train, const Dataset& test, const ResnetSpec& arch,
                                 const TrainConfig& cfg) {
  train.validate();
  StudentSession session(teacher_ckpt, paraphraser_ckpt, train, arch, cfg);
  const ChannelStats stats =
      detail::resolve_stats(cfg, uses_teacher(cfg.method) ? teacher_ckpt : nullptr, train);
  Sgd<float> opt(session.trainable(), cfg.momentum, cfg.weight_decay);
  TrainResult result;
  auto item = [](const Tensor<float>& t) -> std::optional<double> {
    if (!t.defined()) return std::nullopt;
    return t.item();
  };
  auto step_fn = [&](const Batch& b, std::size_t epoch, std::size_t step, double lr, detail::EpochAccumulator& acc) {
    auto out = session.compute(b);
    StepRecord r;
    r.total = out.total.item();
    r.l_cls = item(out.parts.cls);
    r.l_ft = item(out.parts.ft);
    r.l_kd = item(out.parts.kd);
    r.l_at = item(out.parts.at);
    detail::check_finite(r.total, epoch, step, lr, "student");
    backward(out.total);
    opt.step(lr);
    opt.zero_grad();
    acc.count_errors(out.logits, b.y);
    return r;
  };
  std::function<std::optional<double>()> test_fn = [&]() -> std::optional<double> {
    if (test.size() == 0) return std::nullopt;
    return evaluate_network(session.student(), test, stats);
  };
  const std::size_t steps = detail::run_epochs(train, cfg, stats, true, step_fn, test_fn, result);
  const auto state = detail::rng_state(cfg.seed, cfg.epochs, steps);
  result.checkpoint = Checkpoint::from_network(session.student(), steps, state);
  detail::attach_stats(result.checkpoint, stats);
  if (auto* tr = session.translator()) result.translator = Checkpoint::from_network(*tr, steps, state);
  return result;
}

}  // namespace ktransfer
