// Acceptance suite: one PASS/FAIL line per criterion. Tolerances and
// experiment sizes are fixed here. Pass criterion numbers as arguments to run
// a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ktransfer/cli.hpp"
#include "ktransfer/gradcheck.hpp"
#include "ktransfer/training.hpp"

namespace kt = ktransfer;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// CPU seconds consumed by this process.
double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<unsigned char> read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("ktransfer_acceptance_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

kt::Dataset synth(std::size_t per_class, std::size_t classes, std::size_t size, const std::string& split,
                  double noise = 0.1, bool phase_jitter = false, double contrast_jitter = 0, std::uint64_t seed = 0) {
  kt::SynthOptions o;
  o.n_per_class = per_class;
  o.classes = classes;
  o.size = size;
  o.split = split;
  o.noise = noise;
  o.phase_jitter = phase_jitter;
  o.contrast_jitter = contrast_jitter;
  o.seed = seed;
  return kt::synth_dataset(o);
}

template <class T>
bool any_nonzero_grad(const kt::Network<T>& net) {
  for (const auto& p : net.parameters()) {
    if (!p.value.has_grad()) continue;
    for (T g : p.value.grad())
      if (g != T(0)) return true;
  }
  return false;
}

template <class T>
std::vector<unsigned char> parameter_bytes(const kt::Network<T>& net) {
  std::vector<unsigned char> out;
  for (const auto& p : net.parameters()) {
    const auto d = p.value.data();
    const auto* b = reinterpret_cast<const unsigned char*>(d.data());
    out.insert(out.end(), b, b + d.size_bytes());
  }
  for (const auto& p : net.buffers()) {
    const auto d = p.value.data();
    const auto* b = reinterpret_cast<const unsigned char*>(d.data());
    out.insert(out.end(), b, b + d.size_bytes());
  }
  return out;
}

// Runs the CLI in-process; output is captured and discarded unless it fails.
int cli(std::vector<std::string> args, std::string* captured = nullptr) {
  args.insert(args.begin(), "ktransfer");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, log;
  const int code = kt::cli::run(static_cast<int>(argv.size()), argv.data(), out, log);
  if (captured) *captured = out.str();
  if (code != 0) std::cerr << "cli failed (" << code << "): " << log.str() << out.str();
  return code;
}

// ---------------------------------------------------------------------------
// 1. Gradient oracle suite

Outcome criterion1() {
  const double t0 = cpu_seconds();
  kt::GradcheckOptions opt;
  opt.instances = 50;
  for (const auto& name : kt::gradcheck_op_names())
    if (name != "conv2d_oracle" && name != "conv_transpose2d_adjoint") opt.ops.push_back(name);
  const auto report = kt::run_gradcheck(opt);
  const double secs = cpu_seconds() - t0;
  double worst_prim = 0, worst_comp = 0;
  std::size_t min_instances = SIZE_MAX;
  for (const auto& r : report.ops) {
    double& worst = r.kind == kt::CheckKind::primitive ? worst_prim : worst_comp;
    worst = std::max(worst, r.worst);
    min_instances = std::min(min_instances, r.instances);
  }
  Outcome o;
  o.pass = report.passed() && worst_prim < 1e-5 && worst_comp < 1e-4 && min_instances >= 50 && secs < 120;
  o.detail = std::to_string(report.ops.size()) + " ops, >=" + std::to_string(min_instances) +
             " instances each, worst primitive rel err " + fmt("%.2e", worst_prim) + " (<1e-5), worst composite " +
             fmt("%.2e", worst_comp) + " (<1e-4), " + fmt("%.1f", secs) + " s CPU (<120)";
  if (!report.passed()) {
    o.detail += ", failing:";
    for (const auto& f : report.failures()) o.detail += " " + f;
  }
  return o;
}

// ---------------------------------------------------------------------------
// 2. Convolution oracle

Outcome criterion2() {
  const double t0 = cpu_seconds();
  const double conv = kt::conv2d_oracle_error(200, 2024);
  const double adj = kt::conv_transpose_adjoint_error(200, 2025);
  const double secs = cpu_seconds() - t0;
  Outcome o;
  o.pass = conv < 1e-5 && adj < 1e-5 && secs < 60;
  o.detail = "conv2d vs loop oracle max abs err " + fmt("%.2e", conv) + " over 200 configs, conv_transpose2d vs adjoint " +
             fmt("%.2e", adj) + " (both <1e-5), " + fmt("%.1f", secs) + " s CPU (<60)";
  return o;
}

// ---------------------------------------------------------------------------
// 3. FT-loss properties

Outcome criterion3() {
  using TD = kt::Tensor<double>;
  constexpr double kTol = 1e-6;
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(-1, 1);
  auto rand_tensor = [&](kt::Shape s) {
    std::vector<double> v(kt::numel(s));
    for (auto& x : v) x = u(rng);
    return TD(std::move(s), std::move(v));
  };
  std::size_t cases = 0;
  std::string broken;
  auto check = [&](bool ok, const std::string& what) {
    ++cases;
    if (!ok && broken.empty()) broken = what;
  };
  for (int trial = 0; trial < 100; ++trial) {
    const kt::Shape s{1 + static_cast<std::size_t>(trial % 3), 1 + static_cast<std::size_t>(trial % 4), 2, 3};
    const TD ft = rand_tensor(s), fs = rand_tensor(s);
    for (int p : {1, 2}) {
      const double base = kt::factor_transfer_loss(ft, fs, p).item();
      check(base >= 0, "non-negativity");
      check(std::abs(kt::factor_transfer_loss(ft, ft.clone(), p).item()) < kTol, "zero for equal factors");
      const double c = 0.1 + 10.0 * (u(rng) + 1.0);
      check(std::abs(kt::factor_transfer_loss(ft, kt::scale(ft, c), p).item()) < kTol,
            "zero for positively rescaled equal factors");
      check(base > kTol, "positive for distinct factors");
      check(std::abs(kt::factor_transfer_loss(ft, kt::scale(fs, c), p).item() - base) < kTol,
            "positive-scale invariance");
      check(std::abs(kt::factor_transfer_loss(ft, kt::scale(fs, -c), p).item() - base) > kTol,
            "negative-scale non-invariance");
      // Duplicating the batch leaves the batch-mean loss unchanged.
      std::vector<double> a(ft.data().begin(), ft.data().end()), b(fs.data().begin(), fs.data().end());
      a.insert(a.end(), ft.data().begin(), ft.data().end());
      b.insert(b.end(), fs.data().begin(), fs.data().end());
      kt::Shape d = s;
      d[0] *= 2;
      check(std::abs(kt::factor_transfer_loss(TD(d, a), TD(d, b), p).item() - base) < kTol,
            "batch-duplication invariance");
    }
  }
  Outcome o;
  o.pass = broken.empty();
  o.detail = std::to_string(cases) + " property checks (p=1,2) at tol 1e-6" +
             (broken.empty() ? std::string() : ", first violation: " + broken);
  return o;
}

// ---------------------------------------------------------------------------
// 4. Stage-1 convergence

Outcome criterion4() {
  const auto train = synth(200, 4, 32, "train");
  const auto test = synth(50, 4, 32, "test");
  kt::TrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = 64;
  tc.augment_pad = 2;
  tc.augment_flip = false;
  tc.seed = 1;
  const double t_teacher = cpu_seconds();
  const auto teacher = kt::train_teacher(train, test, {3, 16}, tc);
  const double teacher_secs = cpu_seconds() - t_teacher;
  const double teacher_err = kt::evaluate(teacher.checkpoint, test);

  auto net = teacher.checkpoint.to_network<float>();
  net.set_requires_grad(false);
  const auto before = parameter_bytes(net);
  kt::TrainConfig pc = tc;
  pc.epochs = 100;
  pc.max_steps = 200;
  pc.lr = 1e-3;
  pc.lr_drop_epochs = std::vector<std::size_t>{};
  pc.factor.k = 0.5;
  const double t0 = cpu_seconds();
  const auto res = kt::train_paraphraser(net, train, pc, *kt::checkpoint_stats(teacher.checkpoint));
  const double secs = cpu_seconds() - t0;
  const bool identical = parameter_bytes(net) == before;
  const double first = *res.steps.front().l_rec, last = *res.steps.back().l_rec;
  const double ratio = last / first;
  Outcome o;
  o.pass = res.steps.size() == 200 && ratio < 0.10 && identical && secs < 180 && teacher_err <= 5.0;
  o.detail = "teacher(3,16,4) test err " + fmt("%.2f", teacher_err) + "% (data gate <=5%, " +
             fmt("%.0f", teacher_secs) + " s), L_rec " + fmt("%.4g", first) + " -> " + fmt("%.4g", last) +
             " after " + std::to_string(res.steps.size()) + " steps, ratio " + fmt("%.4f", ratio) +
             " (<0.10), teacher bytes " + (identical ? "identical" : "CHANGED") + ", stage 1 " + fmt("%.1f", secs) +
             " s CPU (<180)";
  return o;
}

// ---------------------------------------------------------------------------
// 5. Ablation mechanics

Outcome criterion5() {
  const double t0 = cpu_seconds();
  const auto train = synth(16, 4, 16, "train");
  const auto test = synth(8, 4, 16, "test");
  kt::TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 16;
  tc.augment_pad = 2;
  tc.augment_flip = false;
  tc.seed = 5;
  // Width-matched pair: both last groups have 64 channels.
  const auto teacher = kt::train_teacher(train, test, {3, 16}, tc).checkpoint;
  kt::TrainConfig pc = tc;
  pc.lr = 1e-3;
  pc.max_steps = 10;
  pc.lr_drop_epochs = std::vector<std::size_t>{};
  pc.factor.k = 1.0;  // para_only matches raw student features against the factor
  const auto para = kt::train_paraphraser(teacher, train, pc).checkpoint;

  std::vector<std::vector<double>> traces;
  std::string problems;
  for (kt::Ablation ab : {kt::Ablation::neither, kt::Ablation::para_only, kt::Ablation::trans_only, kt::Ablation::both}) {
    kt::TrainConfig sc = tc;
    sc.method = kt::Method::ft;
    sc.factor.k = 1.0;
    sc.ablation = ab;
    const kt::Checkpoint* p = kt::uses_paraphraser(ab) ? &para : nullptr;
    const std::string tag(kt::ablation_tag(ab));
    try {
      // Gradient partition on a fresh session and batch.
      kt::StudentSession session(&teacher, p, train, {1, 16}, sc);
      kt::BatchIterator it(train, 16, true, 11);
      kt::backward(session.compute(*it.next()).total);
      if (!any_nonzero_grad(session.student())) problems += " " + tag + ":student-grad-zero";
      if (session.translator() && !any_nonzero_grad(*session.translator())) problems += " " + tag + ":translator-grad-zero";
      if (any_nonzero_grad(*session.teacher())) problems += " " + tag + ":teacher-grad";
      if (session.paraphraser() && any_nonzero_grad(*session.paraphraser())) problems += " " + tag + ":paraphraser-grad";

      auto res = kt::train_student(&teacher, p, train, test, {1, 16}, sc);
      std::vector<double> trace;
      for (const auto& s : res.steps) trace.push_back(*s.l_ft);
      traces.push_back(trace);
    } catch (const std::exception& e) {
      problems += " " + tag + ":" + e.what();
    }
  }
  bool distinct = traces.size() == 4;
  for (std::size_t i = 0; distinct && i < traces.size(); ++i)
    for (std::size_t j = i + 1; j < traces.size(); ++j) distinct = distinct && traces[i] != traces[j];
  const double secs = cpu_seconds() - t0;
  Outcome o;
  o.pass = problems.empty() && distinct && secs < 600;
  o.detail = "modes neither/para_only/trans_only/both completed " + std::to_string(traces.size()) +
             "/4, L_FT traces pairwise " + (distinct ? "distinct" : "NOT distinct") +
             ", teacher/paraphraser grads zero and student/translator grads nonzero" +
             (problems.empty() ? std::string() : " VIOLATED:" + problems) + ", " + fmt("%.0f", secs) + " s CPU (<600)";
  return o;
}

// ---------------------------------------------------------------------------
// 6. Directional desk-scale experiment

Outcome criterion6() {
  const double t0 = cpu_seconds();
  // Synthetic substitute for a CIFAR-10 subset: ten grating classes at 16x16
  // with heavy noise, random phase and contrast.
  constexpr std::size_t kPerClass = 300, kTestPerClass = 100, kSize = 16;
  constexpr double kNoise = 1.0, kContrast = 0.5;
  constexpr std::size_t kTeacherEpochs = 30, kStudentEpochs = 10;
  constexpr double kBeta = 500;
  const auto train = synth(kPerClass, 10, kSize, "train", kNoise, true, kContrast, 7);
  const auto test = synth(kTestPerClass, 10, kSize, "test", kNoise, true, kContrast, 7);
  kt::TrainConfig tc;
  tc.epochs = kTeacherEpochs;
  tc.batch_size = 64;
  tc.augment_pad = 2;
  tc.augment_flip = false;
  tc.seed = 1;
  const auto teacher = kt::train_teacher(train, test, {3, 16}, tc).checkpoint;
  kt::TrainConfig pc = tc;
  pc.epochs = 100;
  pc.max_steps = 200;
  pc.lr = 1e-3;
  pc.lr_drop_epochs = std::vector<std::size_t>{};
  pc.factor.k = 0.5;
  const auto para = kt::train_paraphraser(teacher, train, pc).checkpoint;
  const double teacher_err = kt::evaluate(teacher, test);

  std::vector<double> scratch, ft;
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    kt::TrainConfig sc = tc;
    sc.epochs = kStudentEpochs;
    sc.seed = seed;
    sc.method = kt::Method::scratch;
    scratch.push_back(*kt::train_student(&teacher, nullptr, train, test, {1, 16}, sc).metrics.records.back().test_err);
    sc.method = kt::Method::ft;
    sc.factor.k = 0.5;
    sc.factor.beta = kBeta;
    ft.push_back(*kt::train_student(&teacher, &para, train, test, {1, 16}, sc).metrics.records.back().test_err);
    wins += ft.back() < scratch.back();
  }
  const double ms = kt::cli::mean_std(scratch).first, mf = kt::cli::mean_std(ft).first;
  const double secs = cpu_seconds() - t0;
  std::string seeds;
  for (std::size_t i = 0; i < ft.size(); ++i) seeds += " " + fmt("%.2f", scratch[i]) + "/" + fmt("%.2f", ft[i]);
  Outcome o;
  o.pass = mf <= ms && wins >= 3 && secs < 45 * 60;
  o.detail = "synthetic 10-class, teacher(3,16,10) err " + fmt("%.2f", teacher_err) + "%, student(1,16,10) mean err scratch " +
             fmt("%.2f", ms) + "% vs FT " + fmt("%.2f", mf) + "% (need FT <= scratch), FT wins " + std::to_string(wins) +
             "/5 (need >=3), per-seed scratch/FT" + seeds + ", " + fmt("%.0f", secs) + " s CPU (<2700)";
  return o;
}

// ---------------------------------------------------------------------------
// 7. Baseline parity harness

const std::vector<std::string> kTinyRun = {
    "--set", "synth_per_class=8", "--set", "synth_test_per_class=4", "--set", "synth_classes=4",
    "--set", "synth_size=8",      "--set", "teacher_depth=1",        "--set", "teacher_width=8",
    "--set", "student_width=8",   "--set", "batch_size=8",           "--set", "para_steps=4",
    "--set", "para_epochs=1",     "--set", "epochs=1"};

std::vector<std::string> with_args(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

Outcome criterion7() {
  const double t0 = cpu_seconds();
  std::vector<std::vector<unsigned char>> csvs;
  std::string table;
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path dir = scratch_dir("compare" + std::to_string(rep));
    std::string out;
    const int code = cli(with_args({"compare", "--auto", "--out", dir.string(), "--seeds", "1,2", "--methods",
                                    "scratch,at,kd,ft,at+kd,ft+kd", "--k-sweep", "0.5,0.75,1,2,4"},
                                   kTinyRun),
                         &out);
    if (code != 0) return {false, "compare exited with " + std::to_string(code)};
    csvs.push_back(read_all(dir / "compare.csv"));
    table = out;
  }
  // 4 single-k methods + 2 factor methods x 5 rates, 2 seeds each, plus one
  // summary row per (method, k).
  std::istringstream in(std::string(csvs[0].begin(), csvs[0].end()));
  std::string line;
  std::size_t seed_rows = 0, summary_rows = 0;
  std::getline(in, line);
  const bool header_ok = line == kt::cli::kCompareHeader;
  while (std::getline(in, line)) (line.find(",mean,") != std::string::npos ? summary_rows : seed_rows)++;
  bool headers = true;
  for (const char* h : {"Student", "AT", "KD", "FT", "AT+KD", "FT+KD", "Teacher", "k=0.5", "k=0.75", "k=1", "k=2", "k=4"})
    headers = headers && table.find(h) != std::string::npos;
  const bool same = csvs[0] == csvs[1];
  const double secs = cpu_seconds() - t0;
  Outcome o;
  o.pass = header_ok && seed_rows == 28 && summary_rows == 14 && headers && same;
  o.detail = "six-method table and k-sweep {0.5,0.75,1,2,4}: " + std::to_string(seed_rows) + " run rows (expect 28), " +
             std::to_string(summary_rows) + " summary rows (expect 14), table columns " +
             (headers ? "present" : "MISSING") + ", rerun CSV " + (same ? "byte-identical" : "DIFFERS") + ", " +
             fmt("%.0f", secs) + " s CPU";
  return o;
}

// ---------------------------------------------------------------------------
// 8. Serialization

Outcome criterion8() {
  const fs::path dir = scratch_dir("serialization");
  const auto train = synth(8, 4, 8, "train"), test = synth(6, 4, 8, "test");
  kt::TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.augment_pad = 1;
  tc.augment_flip = false;
  const auto ck = kt::train_teacher(train, test, {1, 8}, tc).checkpoint;
  ck.save(dir / "a.ckpt");
  const auto loaded = kt::Checkpoint::load(dir / "a.ckpt");
  loaded.save(dir / "b.ckpt");
  const auto a = read_all(dir / "a.ckpt");
  const bool identical = a == read_all(dir / "b.ckpt");
  const bool eval_same = kt::evaluate(ck, test) == kt::evaluate(loaded, test);

  auto rejects = [&](std::vector<unsigned char> bytes, const std::string& expect) {
    try {
      kt::Checkpoint::deserialize(bytes, "corrupt.ckpt");
    } catch (const kt::FormatError& e) {
      return std::string(e.what()).find(expect) != std::string::npos;
    }
    return false;
  };
  auto bad_magic = a;
  bad_magic[1] = 'X';
  auto bad_version = a;
  bad_version[4] = 7;
  auto truncated = a;
  truncated.resize(a.size() / 2);
  auto trailing = a;
  trailing.push_back(0);
  const bool magic_ok = rejects(bad_magic, "magic");
  const bool version_ok = rejects(bad_version, "version 7");
  const bool trunc_ok = rejects(truncated, "offset");
  const bool trailing_ok = rejects(trailing, "trailing");
  bool arch_ok = false;
  try {
    auto other = kt::build_teacher<float>(1, 16, 4, 0);
    loaded.restore_into(other);
  } catch (const kt::DimensionError& e) {
    arch_ok = std::string(e.what()).find("'stem.0.weight'") != std::string::npos;
  }
  Outcome o;
  o.pass = identical && eval_same && magic_ok && version_ok && trunc_ok && trailing_ok && arch_ok;
  o.detail = std::string("save->load->save ") + (identical ? "byte-identical" : "DIFFERS") + ", evaluate() " +
             (eval_same ? "invariant" : "CHANGED") + ", rejects bad magic/version/truncation/trailing bytes: " +
             (magic_ok ? "y" : "n") + (version_ok ? "y" : "n") + (trunc_ok ? "y" : "n") + (trailing_ok ? "y" : "n") +
             ", wrong architecture names first offender: " + (arch_ok ? "y" : "n");
  return o;
}

// ---------------------------------------------------------------------------
// 9. Determinism

Outcome criterion9() {
  const double t0 = cpu_seconds();
  std::vector<std::string> mismatches;
  std::size_t files = 0;
  std::vector<fs::path> dirs;
  // Both repetitions run in the same directory, since resolved configs record
  // checkpoint paths; the first run's files are moved aside afterwards.
  const fs::path dir = scratch_dir("determinism");
  for (int rep = 0; rep < 2; ++rep) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string out = dir.string();
    const std::string teacher = (dir / "teacher_s1.ckpt").string();
    const std::string para = (dir / "paraphraser_k0.5_s1.ckpt").string();
    const std::vector<std::vector<std::string>> commands = {
        {"train-teacher", "--out", out},
        {"train-paraphraser", "--out", out, "--teacher", teacher},
        {"train-student", "--out", out, "--method", "scratch"},
        {"train-student", "--out", out, "--method", "ft", "--teacher", teacher, "--paraphraser", para},
        {"train-student", "--out", out, "--method", "kd", "--teacher", teacher},
        {"train-student", "--out", out, "--method", "at", "--teacher", teacher},
        {"train-student", "--out", out, "--method", "ft+kd", "--teacher", teacher, "--paraphraser", para},
        {"train-student", "--out", out, "--method", "at+kd", "--teacher", teacher},
        {"train-student", "--out", out, "--method", "ft", "--ablation", "neither", "--teacher", teacher},
        {"compare", "--out", out, "--seeds", "1,2", "--methods", "scratch,ft"},
    };
    for (const auto& c : commands) {
      auto args = c;
      args.insert(args.end(), kTinyRun.begin(), kTinyRun.end());
      if (cli(args) != 0) return {false, "command '" + c[0] + "' failed"};
    }
    std::string eval_out;
    if (cli(with_args({"eval", "--ckpt", teacher}, kTinyRun), &eval_out) != 0) return {false, "eval failed"};
    std::ofstream(dir / "eval.txt") << eval_out;
    const fs::path kept = dir.string() + "_run" + std::to_string(rep);
    fs::remove_all(kept);
    fs::rename(dir, kept);
    dirs.push_back(kept);
  }
  for (const auto& entry : fs::directory_iterator(dirs[0])) {
    const auto name = entry.path().filename();
    const auto ext = name.extension().string();
    if (ext != ".csv" && ext != ".ckpt" && ext != ".txt" && ext != ".cfg") continue;
    ++files;
    if (read_all(entry.path()) != read_all(dirs[1] / name)) mismatches.push_back(name.string());
  }
  const double secs = cpu_seconds() - t0;
  Outcome o;
  o.pass = mismatches.empty() && files >= 20;
  o.detail = "train-teacher, train-paraphraser, train-student (6 methods + ablation), compare, eval run twice: " +
             std::to_string(files) + " CSV/checkpoint/config/output files compared, " +
             (mismatches.empty() ? std::string("all bit-identical") : "DIFFER: " + mismatches.front()) + ", " +
             fmt("%.0f", secs) + " s CPU";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient oracle suite", criterion1},       {"convolution oracle", criterion2},
      {"FT-loss properties", criterion3},          {"stage-1 convergence", criterion4},
      {"ablation mechanics", criterion5},          {"directional desk-scale experiment", criterion6},
      {"baseline parity harness", criterion7},     {"serialization", criterion8},
      {"determinism", criterion9},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(n)) continue;
    Outcome o;
    const auto w0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - w0).count();
    std::printf("%s criterion %d (%s): %s [%.0f s]\n", o.pass ? "PASS" : "FAIL", n, criteria[i].first.c_str(),
                o.detail.c_str(), wall);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
