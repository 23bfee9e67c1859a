#pragma once

// Command implementations behind the `ktransfer` executable. Every command
// reads a RunConfig (defaults < --config file < --set key=value < flags) and
// writes its artifacts under out_dir.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "ktransfer/config.hpp"
#include "ktransfer/gradcheck.hpp"
#include "ktransfer/training.hpp"

namespace ktransfer::cli {

namespace fs = std::filesystem;

/// Raised for failures that should carry a specific exit code and context.
class CommandError : public std::runtime_error {
 public:
  CommandError(const std::string& what, int code) : std::runtime_error(what), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

inline int exit_code_for(const std::exception& e) {
  if (auto* c = dynamic_cast<const CommandError*>(&e)) return c->code();
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  return 1;
}

inline std::string k_label(double k) { return config_detail::show(k); }

inline std::string file_tag(Method m) {
  std::string tag(method_tag(m));
  for (auto& ch : tag)
    if (ch == '+') ch = '_';
  return tag;
}

inline std::string teacher_stem(const RunConfig& c) { return "teacher_s" + std::to_string(c.train.seed); }

inline std::string paraphraser_stem(const RunConfig& c, double k) {
  return "paraphraser_k" + k_label(k) + "_s" + std::to_string(c.train.seed);
}

inline std::string student_stem(const RunConfig& c) {
  std::string stem = "student_" + file_tag(c.train.method);
  if (uses_factor(c.train.method)) {
    stem += "_k" + k_label(c.train.factor.k);
    if (c.train.ablation != Ablation::both) stem += "_" + std::string(ablation_tag(c.train.ablation));
  }
  return stem + "_s" + std::to_string(c.train.seed);
}

/// Writes <stem>.csv, <stem>.cfg and, when requested, <stem>.timing.log.
inline void write_run_files(const RunConfig& cfg, const std::string& stem, const Metrics& metrics, bool timing) {
  const fs::path dir(cfg.out_dir);
  write_text_file(dir / (stem + ".csv"), metrics.to_csv());
  write_text_file(dir / (stem + ".cfg"), resolved_config_text(cfg));
  if (timing) write_text_file(dir / (stem + ".timing.log"), metrics.timing_log());
}

// Progress lines go to `log`; the metrics CSV is the durable record.
inline std::function<void(const EpochRecord&)> epoch_logger(std::ostream& log, const std::string& who,
                                                            std::size_t epochs) {
  return [&log, who, epochs](const EpochRecord& r) {
    log << who << " epoch " << r.epoch << "/" << epochs << " lr " << format_number(r.lr);
    auto put = [&](const char* name, const std::optional<double>& v) {
      if (v) log << " " << name << " " << format_number(*v);
    };
    put("l_cls", r.l_cls);
    put("l_ft", r.l_ft);
    put("l_kd", r.l_kd);
    put("l_at", r.l_at);
    put("l_rec", r.l_rec);
    put("train_err", r.train_err);
    put("test_err", r.test_err);
    log << "\n" << std::flush;
  };
}

inline void apply_normalization(RunConfig& cfg, const Dataset& train) {
  if (!cfg.normalize) {
    cfg.train.normalization =
        ChannelStats{std::vector<double>(train.channels, 0.0), std::vector<double>(train.channels, 1.0)};
  }
}

inline Checkpoint load_required(const std::string& path, const std::string& what, const std::string& flag) {
  if (path.empty()) throw ConfigError(what + " checkpoint required (" + flag + " <ckpt>)");
  if (!fs::exists(path)) throw DataError(what + " checkpoint '" + path + "' does not exist");
  return Checkpoint::load(path);
}

struct Context {
  RunConfig cfg;
  bool timing = false;
  std::ostream& out;
  std::ostream& log;
};

// ---------------------------------------------------------------------------
// Commands

inline Checkpoint do_train_teacher(Context& ctx, const Dataset& train, const Dataset& test) {
  RunConfig& cfg = ctx.cfg;
  TrainConfig tc = cfg.train;
  tc.on_epoch = epoch_logger(ctx.log, "teacher", tc.epochs);
  auto res = train_teacher(train, test, cfg.teacher, tc);
  const std::string stem = teacher_stem(cfg);
  const fs::path dir(cfg.out_dir);
  res.checkpoint.save(dir / (stem + ".ckpt"));
  if (auto stats = checkpoint_stats(res.checkpoint)) write_channel_stats(dir / (stem + ".norm"), *stats);
  write_run_files(cfg, stem, res.metrics, ctx.timing);
  ctx.out << "wrote " << (dir / (stem + ".ckpt")).string() << "\n";
  return res.checkpoint;
}

inline int cmd_train_teacher(Context& ctx) {
  auto [train, test] = load_datasets(ctx.cfg);
  apply_normalization(ctx.cfg, train);
  do_train_teacher(ctx, train, test);
  return 0;
}

inline Checkpoint do_train_paraphraser(Context& ctx, const Checkpoint& teacher, const Dataset& train, double k) {
  RunConfig cfg = ctx.cfg;
  cfg.train.factor.k = k;
  TrainConfig pc = cfg.paraphraser_config();
  pc.on_epoch = epoch_logger(ctx.log, "paraphraser", pc.epochs);
  auto res = train_paraphraser(teacher, train, pc);
  const std::string stem = paraphraser_stem(cfg, k);
  const fs::path dir(cfg.out_dir);
  res.checkpoint.save(dir / (stem + ".ckpt"));
  write_run_files(cfg, stem, res.metrics, ctx.timing);
  ctx.out << "wrote " << (dir / (stem + ".ckpt")).string() << "\n";
  return res.checkpoint;
}

inline int cmd_train_paraphraser(Context& ctx) {
  const Checkpoint teacher = load_required(ctx.cfg.teacher_ckpt, "teacher", "--teacher");
  auto [train, test] = load_datasets(ctx.cfg);
  apply_normalization(ctx.cfg, train);
  do_train_paraphraser(ctx, teacher, train, ctx.cfg.train.factor.k);
  return 0;
}

struct StudentRun {
  Metrics metrics;
  std::optional<double> test_err;
};

inline StudentRun do_train_student(Context& ctx, const RunConfig& cfg, const Checkpoint* teacher,
                                   const Checkpoint* paraphraser, const Dataset& train, const Dataset& test) {
  TrainConfig sc = cfg.train;
  sc.on_epoch = epoch_logger(ctx.log, std::string(method_tag(sc.method)), sc.epochs);
  auto res = train_student(teacher, paraphraser, train, test, cfg.student, sc);
  const std::string stem = student_stem(cfg);
  const fs::path dir(cfg.out_dir);
  res.checkpoint.save(dir / (stem + ".ckpt"));
  if (res.translator) res.translator->save(dir / (stem + "_translator.ckpt"));
  write_run_files(cfg, stem, res.metrics, ctx.timing);
  StudentRun run{res.metrics, std::nullopt};
  if (!res.metrics.records.empty()) run.test_err = res.metrics.records.back().test_err;
  return run;
}

inline int cmd_train_student(Context& ctx) {
  RunConfig& cfg = ctx.cfg;
  const Method m = cfg.train.method;
  std::optional<Checkpoint> teacher, para;
  if (uses_teacher(m)) {
    if (cfg.teacher_ckpt.empty()) {
      throw ConfigError(std::string(method_tag(m)) + " requires a teacher checkpoint (--teacher <ckpt>)");
    }
    teacher = load_required(cfg.teacher_ckpt, "teacher", "--teacher");
  }
  if (uses_factor(m) && uses_paraphraser(cfg.train.ablation)) {
    if (cfg.paraphraser_ckpt.empty()) {
      throw ConfigError(std::string(method_tag(m)) + " requires --paraphraser <ckpt> unless ablation is trans_only or neither");
    }
    para = load_required(cfg.paraphraser_ckpt, "paraphraser", "--paraphraser");
  }
  auto [train, test] = load_datasets(cfg);
  apply_normalization(cfg, train);
  auto run = do_train_student(ctx, cfg, teacher ? &*teacher : nullptr, para ? &*para : nullptr, train, test);
  ctx.out << "wrote " << (fs::path(cfg.out_dir) / (student_stem(cfg) + ".ckpt")).string() << "\n";
  if (run.test_err) ctx.out << "test_error=" << format_number(*run.test_err) << "%\n";
  return 0;
}

inline int cmd_eval(Context& ctx, const std::string& ckpt_path) {
  const Checkpoint ck = load_required(ckpt_path, "model", "--ckpt");
  auto [train, test] = load_datasets(ctx.cfg);
  const double err = evaluate(ck, test);
  ctx.out << "test_error=" << format_number(err) << "%\n";
  return 0;
}

inline int cmd_gradcheck(Context& ctx, const GradcheckOptions& opt) {
  const auto report = run_gradcheck(opt);
  std::size_t width = 4;
  for (const auto& r : report.ops) width = std::max(width, r.name.size());
  ctx.out << std::left << std::setw(static_cast<int>(width)) << "op" << "  kind       n    worst      tol      status\n";
  for (const auto& r : report.ops) {
    const char* kind = r.kind == CheckKind::primitive ? "primitive" : r.kind == CheckKind::composite ? "composite" : "oracle";
    char line[160];
    std::snprintf(line, sizeof line, "  %-9s %4zu  %.3e  %.0e  %s\n", kind, r.instances, r.worst, r.tolerance,
                  r.passed() ? "ok" : "FAIL");
    ctx.out << std::left << std::setw(static_cast<int>(width)) << r.name << line;
  }
  if (report.passed()) {
    ctx.out << "gradcheck: all " << report.ops.size() << " checks passed\n";
    return 0;
  }
  ctx.out << "gradcheck: FAILED:";
  for (const auto& name : report.failures()) ctx.out << " " << name;
  ctx.out << "\n";
  return 1;
}

// ---------------------------------------------------------------------------
// compare

struct CompareRow {
  Method method;
  std::optional<double> k;
  std::uint64_t seed;
  double test_err;
};

struct SummaryRow {
  Method method;
  std::optional<double> k;
  double mean, std;
  std::vector<double> errors;
};

/// Mean and sample standard deviation (0 for a single value).
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

inline std::vector<SummaryRow> summarize(const std::vector<CompareRow>& rows) {
  std::vector<SummaryRow> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const SummaryRow& s) { return s.method == r.method && s.k == r.k; });
    if (it == out.end()) {
      out.push_back({r.method, r.k, 0, 0, {}});
      it = out.end() - 1;
    }
    it->errors.push_back(r.test_err);
  }
  for (auto& s : out) std::tie(s.mean, s.std) = mean_std(s.errors);
  return out;
}

inline constexpr const char* kCompareHeader = "method,k,seed,test_err,std";

/// Seed rows, then one summary row per (method, k) with seed "mean".
inline std::string compare_csv(const std::vector<CompareRow>& rows) {
  std::string out = std::string(kCompareHeader) + "\n";
  auto k_text = [](const std::optional<double>& k) { return k ? k_label(*k) : std::string(); };
  for (const auto& r : rows) {
    out += std::string(method_tag(r.method)) + "," + k_text(r.k) + "," + std::to_string(r.seed) + "," +
           format_number(r.test_err) + ",\n";
  }
  for (const auto& s : summarize(rows)) {
    out += std::string(method_tag(s.method)) + "," + k_text(s.k) + ",mean," + format_number(s.mean) + "," +
           format_number(s.std) + "\n";
  }
  return out;
}

inline std::string compare_table(const std::vector<CompareRow>& rows, std::optional<double> teacher_err,
                                 const std::vector<double>& ks) {
  std::ostringstream t;
  const auto summary = summarize(rows);
  char line[256];
  std::snprintf(line, sizeof line, "%-8s %-6s %9s %8s  %s\n", "method", "k", "mean_err", "std", "per-seed");
  t << line;
  for (const auto& s : summary) {
    std::string seeds;
    for (double e : s.errors) {
      char b[32];
      std::snprintf(b, sizeof b, "%s%.2f", seeds.empty() ? "" : " ", e);
      seeds += b;
    }
    std::snprintf(line, sizeof line, "%-8s %-6s %9.2f %8.2f  %s\n", std::string(method_header(s.method)).c_str(),
                  s.k ? k_label(*s.k).c_str() : "-", s.mean, s.std, seeds.c_str());
    t << line;
  }
  if (teacher_err) {
    std::snprintf(line, sizeof line, "%-8s %-6s %9.2f\n", "Teacher", "-", *teacher_err);
    t << line;
  }
  if (ks.size() > 1) {
    t << "\nk-sweep (mean test error %)\n";
    std::snprintf(line, sizeof line, "%-8s", "method");
    t << line;
    for (double k : ks) {
      std::snprintf(line, sizeof line, " %9s", ("k=" + k_label(k)).c_str());
      t << line;
    }
    t << "\n";
    for (Method m : kAllMethods) {
      bool any = false;
      std::string cells;
      for (double k : ks) {
        auto it = std::find_if(summary.begin(), summary.end(), [&](const SummaryRow& s) { return s.method == m && s.k == k; });
        if (it != summary.end()) any = true;
        if (it == summary.end()) std::snprintf(line, sizeof line, " %9s", "-");
        else std::snprintf(line, sizeof line, " %9.2f", it->mean);
        cells += line;
      }
      if (!any) continue;
      std::snprintf(line, sizeof line, "%-8s", std::string(method_header(m)).c_str());
      t << line << cells << "\n";
    }
  }
  return t.str();
}

inline int cmd_compare(Context& ctx, bool auto_build) {
  RunConfig& cfg = ctx.cfg;
  auto [train, test] = load_datasets(cfg);
  apply_normalization(cfg, train);
  const fs::path dir(cfg.out_dir);
  const bool need_teacher = std::any_of(cfg.methods.begin(), cfg.methods.end(), uses_teacher);
  const bool need_factor = std::any_of(cfg.methods.begin(), cfg.methods.end(), uses_factor) &&
                           uses_paraphraser(cfg.train.ablation);
  const std::vector<double> ks = cfg.k_sweep.empty() ? std::vector<double>{cfg.train.factor.k} : cfg.k_sweep;

  std::optional<Checkpoint> teacher;
  if (need_teacher) {
    const fs::path path = cfg.teacher_ckpt.empty() ? dir / (teacher_stem(cfg) + ".ckpt") : fs::path(cfg.teacher_ckpt);
    if (fs::exists(path)) {
      teacher = Checkpoint::load(path);
    } else if (auto_build && cfg.teacher_ckpt.empty()) {
      teacher = do_train_teacher(ctx, train, test);
    } else {
      throw ConfigError("compare requires a teacher checkpoint (--teacher <ckpt>, or --auto to train one); '" +
                        path.string() + "' not found");
    }
  }
  std::map<double, Checkpoint> paraphrasers;
  if (need_factor) {
    if (!cfg.paraphraser_ckpt.empty() && ks.size() > 1) {
      throw ConfigError("--paraphraser names one checkpoint; a k-sweep needs one per k (use --auto)");
    }
    for (double k : ks) {
      const fs::path path = cfg.paraphraser_ckpt.empty() ? dir / (paraphraser_stem(cfg, k) + ".ckpt")
                                                         : fs::path(cfg.paraphraser_ckpt);
      if (fs::exists(path)) {
        paraphrasers.emplace(k, Checkpoint::load(path));
      } else if (auto_build && cfg.paraphraser_ckpt.empty()) {
        paraphrasers.emplace(k, do_train_paraphraser(ctx, *teacher, train, k));
      } else {
        throw ConfigError("compare requires a paraphraser checkpoint for k=" + k_label(k) +
                          " (--paraphraser <ckpt>, or --auto to train one); '" + path.string() + "' not found");
      }
    }
  }

  std::vector<CompareRow> rows;
  for (Method m : cfg.methods) {
    const std::vector<std::optional<double>> run_ks = [&] {
      std::vector<std::optional<double>> v;
      if (uses_factor(m)) v.assign(ks.begin(), ks.end());
      else v.push_back(std::nullopt);
      return v;
    }();
    for (const auto& k : run_ks) {
      for (std::uint64_t seed : cfg.seeds) {
        RunConfig rc = cfg;
        rc.train.method = m;
        rc.train.seed = seed;
        if (k) rc.train.factor.k = *k;
        const Checkpoint* para = nullptr;
        if (k && paraphrasers.count(*k)) para = &paraphrasers.at(*k);
        try {
          auto run = do_train_student(ctx, rc, teacher ? &*teacher : nullptr, para, train, test);
          if (!run.test_err) throw DataError("compare needs a non-empty test set");
          rows.push_back({m, k, seed, *run.test_err});
          ctx.log << "compare " << method_tag(m) << (k ? " k=" + k_label(*k) : std::string()) << " seed " << seed
                  << " test_err " << format_number(*run.test_err) << "\n";
        } catch (const std::exception& e) {
          throw CommandError("compare: run method=" + std::string(method_tag(m)) +
                                 (k ? " k=" + k_label(*k) : std::string()) + " seed=" + std::to_string(seed) +
                                 " failed: " + e.what(),
                             exit_code_for(e));
        }
      }
    }
  }
  write_text_file(dir / "compare.csv", compare_csv(rows));
  write_text_file(dir / "compare.cfg", resolved_config_text(cfg));
  std::optional<double> teacher_err;
  if (teacher && test.size() > 0) teacher_err = evaluate(*teacher, test);
  ctx.out << compare_table(rows, teacher_err, ks);
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses argv and dispatches. Returns the process exit code: 0 success,
/// 1 runtime/data error, 2 usage error.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& log) {
  CLI::App app{"Knowledge transfer by factor transfer (paraphraser + translator) and baselines"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flag_values;  // config key -> value
  bool timing = false;
  bool auto_build = false;
  std::string ckpt_path;
  GradcheckOptions gopt;
  std::string ops_list;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value config file");
    sub->add_option("--set", sets, "override one config key (key=value), repeatable");
    sub->add_flag("--timing", timing, "also write wall-clock seconds to <run>.timing.log");
  };
  // A flag that overrides one config key.
  auto key_flag = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(flag, [&flag_values, key](const std::string& v) { flag_values[key] = v; },
                                          help);
  };
  auto data_flags = [&](CLI::App* sub) {
    key_flag(sub, "--dataset", "dataset", "synth | cifar10 | mnist");
    key_flag(sub, "--data", "data_path", "dataset directory");
    key_flag(sub, "--out", "out_dir", "output directory");
    key_flag(sub, "--seed", "seed", "run seed");
  };
  auto train_flags = [&](CLI::App* sub) {
    key_flag(sub, "--epochs", "epochs", "training epochs");
    key_flag(sub, "--lr", "lr", "initial learning rate");
    key_flag(sub, "--batch-size", "batch_size", "minibatch size");
  };
  auto factor_flags = [&](CLI::App* sub) {
    key_flag(sub, "--k", "k", "paraphrase rate");
    key_flag(sub, "--beta", "beta", "factor-transfer weight");
    key_flag(sub, "--p", "p", "norm of the factor difference (1 or 2)");
    key_flag(sub, "--T", "T", "KD temperature");
    key_flag(sub, "--ablation", "ablation", "both | para_only | trans_only | neither");
  };

  auto* teacher = app.add_subcommand("train-teacher", "train the teacher network");
  common(teacher);
  data_flags(teacher);
  train_flags(teacher);

  auto* para = app.add_subcommand("train-paraphraser", "stage 1: paraphraser on frozen teacher features");
  common(para);
  data_flags(para);
  key_flag(para, "--teacher", "teacher_ckpt", "teacher checkpoint");
  key_flag(para, "--k", "k", "paraphrase rate");
  key_flag(para, "--epochs", "para_epochs", "stage-1 epochs");
  key_flag(para, "--lr", "para_lr", "stage-1 learning rate");
  key_flag(para, "--steps", "para_steps", "cap on optimization steps (0 = none)");

  auto* student = app.add_subcommand("train-student", "stage 2: student (+ translator) with a transfer method");
  common(student);
  data_flags(student);
  train_flags(student);
  factor_flags(student);
  key_flag(student, "--method", "method", "scratch | ft | kd | at | ft+kd | at+kd");
  key_flag(student, "--teacher", "teacher_ckpt", "teacher checkpoint");
  key_flag(student, "--paraphraser", "paraphraser_ckpt", "paraphraser checkpoint");

  auto* compare = app.add_subcommand("compare", "seeded multi-method comparison table");
  common(compare);
  data_flags(compare);
  train_flags(compare);
  factor_flags(compare);
  key_flag(compare, "--methods", "methods", "comma-separated methods");
  key_flag(compare, "--seeds", "seeds", "comma-separated seeds");
  key_flag(compare, "--k-sweep", "k_sweep", "comma-separated paraphrase rates");
  key_flag(compare, "--teacher", "teacher_ckpt", "teacher checkpoint");
  key_flag(compare, "--paraphraser", "paraphraser_ckpt", "paraphraser checkpoint");
  compare->add_flag("--auto", auto_build, "train missing teacher/paraphraser checkpoints");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference and conv oracle suites (64-bit)");
  grad->add_option("--ops", ops_list, "comma-separated subset of ops");
  grad->add_option("--instances", gopt.instances, "random instances per op")->check(CLI::PositiveNumber);
  grad->add_option("--inject-broken", gopt.inject_broken)->group("");  // negative control

  auto* eval = app.add_subcommand("eval", "test error of a checkpoint");
  common(eval);
  data_flags(eval);
  eval->add_option("--ckpt", ckpt_path, "model checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, log);
    return code == 0 ? 0 : 2;
  }

  try {
    if (grad->parsed()) {
      gopt.ops = config_detail::split_list(ops_list);
      Context ctx{RunConfig{}, false, out, log};
      return cmd_gradcheck(ctx, gopt);
    }
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      set_config_value(cfg, config_detail::trim(s.substr(0, eq)), config_detail::trim(s.substr(eq + 1)));
    }
    for (const auto& [key, value] : flag_values) set_config_value(cfg, key, value);
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    Context ctx{cfg, timing, out, log};
    if (teacher->parsed()) return cmd_train_teacher(ctx);
    if (para->parsed()) return cmd_train_paraphraser(ctx);
    if (student->parsed()) return cmd_train_student(ctx);
    if (compare->parsed()) return cmd_compare(ctx, auto_build);
    if (eval->parsed()) return cmd_eval(ctx, ckpt_path);
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 2;
}

}  // namespace ktransfer::cli
