#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ktransfer/training.hpp"

namespace ktransfer {
namespace {

namespace fs = std::filesystem;

Dataset tiny(std::size_t per_class, std::uint64_t seed, const std::string& split = "train") {
  SynthOptions o;
  o.n_per_class = per_class;
  o.classes = 4;
  o.size = 8;
  o.seed = seed;
  o.split = split;
  return synth_dataset(o);
}

TrainConfig quick(std::size_t epochs = 2) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  c.lr = 0.05;
  c.augment_pad = 1;
  c.augment_flip = false;
  c.seed = 3;
  return c;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() /
         ("ktransfer_train_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" + name);
}

std::vector<unsigned char> read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <class T>
bool same_parameters(const Network<T>& a, const Network<T>& b) {
  if (a.parameters().size() != b.parameters().size()) return false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto x = a.parameters()[i].value.data(), y = b.parameters()[i].value.data();
    if (std::memcmp(x.data(), y.data(), x.size_bytes()) != 0) return false;
  }
  return true;
}

// --- optimizer and schedule ------------------------------------------------

TEST(Sgd, SingleStep) {
  std::vector<float> w{1.0f}, g{0.5f}, v{0.0f};
  sgd_update<float>(w, g, v, 0.1, 0.0, 0.0);
  EXPECT_FLOAT_EQ(w[0], 0.95f);
}

TEST(Sgd, MomentumRecurrence) {
  std::vector<double> w{0.0}, g{1.0}, v{0.0};
  sgd_update<double>(w, g, v, 0.1, 0.9, 0.0);
  sgd_update<double>(w, g, v, 0.1, 0.9, 0.0);
  EXPECT_NEAR(w[0], -(0.1 + 0.19), 1e-15);
}

TEST(Sgd, WeightDecayShrinks) {
  std::vector<double> w{2.0}, g{0.0}, v{0.0};
  sgd_update<double>(w, g, v, 0.5, 0.0, 0.01);
  EXPECT_NEAR(w[0], 2.0 * (1 - 0.5 * 0.01), 1e-15);
  sgd_update<double>(w, g, v, 0.5, 0.0, 0.01);
  EXPECT_NEAR(w[0], 2.0 * (1 - 0.5 * 0.01) * (1 - 0.5 * 0.01), 1e-15);
}

TEST(Sgd, ShapeMismatch) {
  std::vector<double> w{1.0, 2.0}, g{1.0}, v{0.0, 0.0};
  EXPECT_THROW(sgd_update<double>(w, g, v, 0.1, 0.9, 0.0), DimensionError);
}

TEST(Sgd, BatchnormParametersAreNotDecayed) {
  auto net = build_student<float>(1, 8, 4, 1);
  Sgd<float> opt(parameter_pointers(net), 0.0, 0.5);
  const auto before = net;
  opt.step(1.0);  // no gradients: only decay acts
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    const auto& p = net.parameters()[i];
    const auto& q = before.parameters()[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      ASSERT_FLOAT_EQ(p.value[j], p.decay ? 0.5f * q.value[j] : q.value[j]) << p.name;
    }
  }
}

TEST(Schedule, StepDrops) {
  TrainConfig c;
  c.epochs = 60;
  c.lr = 0.1;
  c.lr_drop_epochs = std::vector<std::size_t>{30, 45};
  EXPECT_DOUBLE_EQ(lr_at(0, c), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(29, c), 0.1);
  EXPECT_NEAR(lr_at(30, c), 0.01, 1e-15);
  EXPECT_NEAR(lr_at(45, c), 0.001, 1e-15);
  EXPECT_THROW(lr_at(60, c), ContractError);
}

TEST(Schedule, DefaultDropsAtHalfAndThreeQuarters) {
  TrainConfig c;
  c.epochs = 60;
  EXPECT_EQ(c.drops(), (std::vector<std::size_t>{30, 45}));
  c.lr_drop_epochs = std::vector<std::size_t>{};
  for (std::size_t e = 0; e < 60; ++e) EXPECT_EQ(lr_at(e, c), c.lr);
}

TEST(TrainConfigValidation, Rejections) {
  auto bad = [](auto edit) {
    TrainConfig c;
    c.epochs = 10;
    edit(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](TrainConfig& c) { c.lr = 0; });
  bad([](TrainConfig& c) { c.momentum = 1.0; });
  bad([](TrainConfig& c) { c.lr_drop_epochs = std::vector<std::size_t>{5, 5}; });
  bad([](TrainConfig& c) { c.lr_drop_epochs = std::vector<std::size_t>{10}; });
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.factor.T = 0; });
}

TEST(Ablation, Tags) {
  for (auto a : {Ablation::both, Ablation::para_only, Ablation::trans_only, Ablation::neither})
    EXPECT_EQ(parse_ablation(ablation_tag(a)), a);
  EXPECT_THROW(parse_ablation("half"), ConfigError);
}

// --- checkpoints -------------------------------------------------------------

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto net = build_teacher<float>(1, 8, 4, 5);
  net.buffers()[0].value.mutable_data()[0] = 0.25f;
  const auto a = temp_path("a.ckpt"), b = temp_path("b.ckpt");
  save_checkpoint(net, a, 17, "state");
  auto loaded = Checkpoint::load(a);
  EXPECT_EQ(loaded.step, 17u);
  EXPECT_EQ(loaded.rng_state, "state");
  loaded.save(b);
  EXPECT_EQ(read_all(a), read_all(b));
  auto back = load_checkpoint<float>(a);
  EXPECT_TRUE(same_parameters(net, back));
  EXPECT_EQ(back.buffers()[0].value[0], 0.25f);
  fs::remove(a);
  fs::remove(b);
}

TEST(Checkpoint, NormalizationStatsRoundTrip) {
  auto ck = Checkpoint::from_network(build_student<float>(1, 8, 4, 1));
  ck.norm_mean = std::vector<double>{0.1, 0.2, 0.3};
  ck.norm_std = std::vector<double>{1.0, 2.0, 3.0};
  auto back = Checkpoint::deserialize(ck.serialize());
  EXPECT_EQ(back.norm_mean, ck.norm_mean);
  EXPECT_EQ(back.norm_std, ck.norm_std);
  EXPECT_EQ(back.serialize(), ck.serialize());
}

TEST(Checkpoint, CorruptMagic) {
  auto bytes = Checkpoint::from_network(build_student<float>(1, 8, 4, 1)).serialize();
  bytes[0] = 'X';
  try {
    Checkpoint::deserialize(bytes, "bad.ckpt");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, UnknownVersion) {
  auto bytes = Checkpoint::from_network(build_student<float>(1, 8, 4, 1)).serialize();
  bytes[4] = 9;
  try {
    Checkpoint::deserialize(bytes, "v.ckpt");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, TruncationNamesOffset) {
  auto bytes = Checkpoint::from_network(build_student<float>(1, 8, 4, 1)).serialize();
  bytes.resize(bytes.size() - 3);
  try {
    Checkpoint::deserialize(bytes, "t.ckpt");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
  bytes = Checkpoint::from_network(build_student<float>(1, 8, 4, 1)).serialize();
  bytes.push_back(0);
  EXPECT_THROW(Checkpoint::deserialize(bytes), FormatError);
}

TEST(Checkpoint, WrongArchitectureNamesFirstOffender) {
  auto ck = Checkpoint::from_network(build_student<float>(1, 8, 4, 1));
  auto other = build_student<float>(1, 16, 4, 1);
  try {
    ck.restore_into(other);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("'stem.0.weight'"), std::string::npos) << e.what();
  }
  auto deeper = build_student<float>(2, 8, 4, 1);
  EXPECT_THROW(ck.restore_into(deeper), FormatError);
}

TEST(Checkpoint, EvaluateInvariantUnderRoundTrip) {
  auto train = tiny(6, 1), test = tiny(4, 1, "test");
  auto res = train_teacher(train, test, {1, 8}, quick(1));
  const double before = evaluate(res.checkpoint, test);
  auto back = Checkpoint::deserialize(res.checkpoint.serialize());
  EXPECT_EQ(evaluate(back, test), before);
  EXPECT_EQ(evaluate(back, test), evaluate(back, test));
}

// --- evaluation --------------------------------------------------------------

Network<float> constant_predictor(std::size_t classes, int winner) {
  auto net = build_student<float>(1, 8, classes, 1);
  for (auto& p : net.parameters()) {
    if (p.name.rfind("head.", 0) != 0) continue;
    auto d = p.value.mutable_data();
    std::fill(d.begin(), d.end(), 0.0f);
    if (p.name.find("bias") != std::string::npos) d[static_cast<std::size_t>(winner)] = 1.0f;
  }
  return net;
}

TEST(Evaluate, AllCorrectAndConstantPredictor) {
  SynthOptions o;
  o.n_per_class = 5;
  o.classes = 10;
  o.size = 8;
  auto data = synth_dataset(o);
  auto net = constant_predictor(10, 3);
  EXPECT_DOUBLE_EQ(evaluate_network(net, data, std::nullopt), 90.0);
  std::fill(data.labels.begin(), data.labels.end(), 3);
  EXPECT_DOUBLE_EQ(evaluate_network(net, data, std::nullopt), 0.0);
}

TEST(Evaluate, ClassCountMismatch) {
  auto net = constant_predictor(5, 0);
  EXPECT_THROW(evaluate_network(net, tiny(2, 1), std::nullopt), DataError);
}

// --- teacher -----------------------------------------------------------------

TEST(Teacher, ZeroEpochsKeepsInitialization) {
  auto train = tiny(4, 1);
  auto res = train_teacher(train, Dataset{}, {1, 8}, quick(0));
  auto init = build_teacher<float>(1, 8, 4, derive_seed(3, "init/teacher"));
  EXPECT_TRUE(same_parameters(res.checkpoint.to_network<float>(), init));
  EXPECT_TRUE(res.metrics.records.empty());
}

TEST(Teacher, DeterministicMetrics) {
  auto train = tiny(6, 2), test = tiny(3, 2, "test");
  auto a = train_teacher(train, test, {1, 8}, quick(2));
  auto b = train_teacher(train, test, {1, 8}, quick(2));
  EXPECT_EQ(a.metrics.to_csv(), b.metrics.to_csv());
  EXPECT_EQ(a.checkpoint.serialize(), b.checkpoint.serialize());
  ASSERT_EQ(a.metrics.records.size(), 2u);
  EXPECT_TRUE(a.metrics.records[0].l_cls.has_value());
  EXPECT_FALSE(a.metrics.records[0].l_ft.has_value());
  EXPECT_TRUE(a.metrics.records[0].test_err.has_value());
}

TEST(Teacher, CsvLayout) {
  auto res = train_teacher(tiny(4, 1), tiny(2, 1, "test"), {1, 8}, quick(1));
  const auto csv = res.metrics.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,lr,l_cls,l_ft,l_kd,l_at,l_rec,train_err,test_err,seconds");
  const auto row = csv.substr(csv.find('\n') + 1);
  EXPECT_EQ(row.rfind("1,0.05,", 0), 0u) << row;
  EXPECT_EQ(row.back(), '\n');
  EXPECT_EQ(row[row.size() - 2], ',');  // wall time omitted by default
}

TEST(Teacher, DivergenceAborts) {
  auto cfg = quick(3);
  cfg.lr = 1e30;
  try {
    train_teacher(tiny(4, 1), Dataset{}, {1, 8}, cfg);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("lr"), std::string::npos);
  }
}

// --- stage 1 -----------------------------------------------------------------

class Stages : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    train_ = new Dataset(tiny(8, 4));
    test_ = new Dataset(tiny(4, 4, "test"));
    teacher_ = new Checkpoint(train_teacher(*train_, *test_, {1, 8}, quick(2)).checkpoint);
    auto pc = quick(3);
    pc.lr = 1e-3;
    para_ = new Checkpoint(train_paraphraser(*teacher_, *train_, pc).checkpoint);
  }
  static void TearDownTestSuite() {
    delete train_;
    delete test_;
    delete teacher_;
    delete para_;
  }

  static TrainConfig student_cfg(Method m, std::size_t epochs = 2) {
    auto c = quick(epochs);
    c.method = m;
    return c;
  }

  static Dataset* train_;
  static Dataset* test_;
  static Checkpoint* teacher_;
  static Checkpoint* para_;
};

Dataset* Stages::train_ = nullptr;
Dataset* Stages::test_ = nullptr;
Checkpoint* Stages::teacher_ = nullptr;
Checkpoint* Stages::para_ = nullptr;

TEST_F(Stages, ParaphraserLeavesTeacherUntouchedAndIgnoresLabels) {
  auto teacher = teacher_->to_network<float>();
  teacher.set_requires_grad(false);
  const auto before = teacher;
  auto cfg = quick(2);
  cfg.lr = 1e-3;
  const auto stats = compute_channel_stats(*train_);
  auto a = train_paraphraser(teacher, *train_, cfg, stats);
  EXPECT_TRUE(same_parameters(teacher, before));
  for (std::size_t i = 0; i < teacher.buffers().size(); ++i) {
    const auto x = teacher.buffers()[i].value.data(), y = before.buffers()[i].value.data();
    EXPECT_EQ(std::memcmp(x.data(), y.data(), x.size_bytes()), 0);
  }
  Dataset garbage = *train_;
  for (auto& y : garbage.labels) y = (y * 7 + 3) % 4;
  auto b = train_paraphraser(teacher, garbage, cfg, stats);
  EXPECT_EQ(a.checkpoint.serialize(), b.checkpoint.serialize());
  EXPECT_EQ(a.metrics.to_csv(), b.metrics.to_csv());
}

TEST_F(Stages, ParaphraserReducesReconstruction) {
  auto cfg = quick(6);
  cfg.lr = 1e-3;
  auto res = train_paraphraser(*teacher_, *train_, cfg);
  ASSERT_FALSE(res.steps.empty());
  EXPECT_LT(*res.steps.back().l_rec, *res.steps.front().l_rec);
  EXPECT_TRUE(res.metrics.records[0].l_rec.has_value());
  EXPECT_FALSE(res.metrics.records[0].train_err.has_value());
}

TEST_F(Stages, MaxStepsCapsTraining) {
  auto cfg = quick(50);
  cfg.lr = 1e-3;
  cfg.max_steps = 5;
  auto res = train_paraphraser(*teacher_, *train_, cfg);
  EXPECT_EQ(res.steps.size(), 5u);
  EXPECT_EQ(res.checkpoint.step, 5u);
}

// --- stage 2 -----------------------------------------------------------------

TEST_F(Stages, ScratchIgnoresTeacher) {
  auto cfg = student_cfg(Method::scratch);
  auto a = train_student(nullptr, nullptr, *train_, *test_, {1, 8}, cfg);
  auto b = train_student(teacher_, para_, *train_, *test_, {1, 8}, cfg);
  EXPECT_EQ(a.metrics.to_csv(), b.metrics.to_csv());
  EXPECT_EQ(a.checkpoint.serialize(), b.checkpoint.serialize());
  EXPECT_FALSE(a.translator.has_value());
}

TEST_F(Stages, MissingPrerequisites) {
  try {
    train_student(teacher_, nullptr, *train_, *test_, {1, 8}, student_cfg(Method::ft));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("ft requires a paraphraser"), std::string::npos) << e.what();
  }
  EXPECT_THROW(train_student(nullptr, para_, *train_, *test_, {1, 8}, student_cfg(Method::kd)), ConfigError);
  auto cfg = student_cfg(Method::ft);
  cfg.ablation = Ablation::trans_only;
  EXPECT_NO_THROW(StudentSession(teacher_, nullptr, *train_, {1, 8}, cfg));
}

TEST_F(Stages, BetaZeroFollowsScratchTrajectory) {
  auto ft = student_cfg(Method::ft);
  ft.factor.beta = 0;
  auto a = train_student(teacher_, para_, *train_, *test_, {1, 8}, ft);
  auto b = train_student(nullptr, nullptr, *train_, *test_, {1, 8}, student_cfg(Method::scratch));
  EXPECT_EQ(a.checkpoint.serialize(), b.checkpoint.serialize());
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) EXPECT_EQ(*a.steps[i].l_cls, *b.steps[i].l_cls);

  StudentSession s(teacher_, para_, *train_, {1, 8}, ft);
  BatchIterator it(*train_, 8, false, 0);
  auto out = s.compute(*it.next());
  backward(out.total);
  for (auto& p : s.translator()->parameters()) {
    if (!p.value.has_grad()) continue;
    for (float g : p.value.grad()) ASSERT_EQ(g, 0.0f) << p.name;
  }
}

TEST_F(Stages, LossBookkeeping) {
  for (Method m : kAllMethods) {
    auto cfg = student_cfg(m, 1);
    auto res = train_student(teacher_, para_, *train_, *test_, {1, 8}, cfg);
    for (const auto& s : res.steps) {
      double expect = *s.l_cls;
      if (uses_factor(m)) expect += cfg.factor.beta * *s.l_ft;
      if (uses_attention(m)) expect += cfg.factor.beta_at * *s.l_at;
      if (uses_kd(m)) expect += *s.l_kd;
      EXPECT_NEAR(s.total, expect, 1e-5 * std::max(1.0, std::abs(expect))) << method_tag(m);
      EXPECT_EQ(s.l_ft.has_value(), uses_factor(m));
      EXPECT_EQ(s.l_kd.has_value(), uses_kd(m));
      EXPECT_EQ(s.l_at.has_value(), uses_attention(m));
    }
  }
}

bool any_nonzero(Network<float>& net) {
  for (auto& p : net.parameters())
    if (p.value.has_grad())
      for (float g : p.value.grad())
        if (g != 0.0f) return true;
  return false;
}

TEST_F(Stages, GradientPartition) {
  StudentSession s(teacher_, para_, *train_, {1, 8}, student_cfg(Method::ft));
  BatchIterator it(*train_, 8, true, 1);
  backward(s.compute(*it.next()).total);
  EXPECT_TRUE(any_nonzero(s.student()));
  EXPECT_TRUE(any_nonzero(*s.translator()));
  EXPECT_FALSE(any_nonzero(*s.teacher()));
  EXPECT_FALSE(any_nonzero(*s.paraphraser()));
}

TEST_F(Stages, AblationChannelChecks) {
  // Teacher width 8 gives 32 last-group channels; k=0.5 gives a 16-channel factor.
  auto cfg = student_cfg(Method::ft);
  cfg.ablation = Ablation::para_only;
  EXPECT_THROW(StudentSession(teacher_, para_, *train_, {1, 8}, cfg), ConfigError);
  auto pc = quick(1);
  pc.lr = 1e-3;
  pc.max_steps = 1;
  pc.factor.k = 1.0;
  auto para_full = train_paraphraser(*teacher_, *train_, pc).checkpoint;
  EXPECT_NO_THROW(StudentSession(teacher_, &para_full, *train_, {1, 8}, cfg));
  cfg.ablation = Ablation::neither;
  EXPECT_NO_THROW(StudentSession(teacher_, nullptr, *train_, {1, 8}, cfg));
  EXPECT_THROW(StudentSession(teacher_, nullptr, *train_, {1, 16}, cfg), ConfigError);
  cfg.ablation = Ablation::trans_only;
  StudentSession t(teacher_, nullptr, *train_, {1, 16}, cfg);
  EXPECT_EQ(t.translator()->output_channels(), 32u);
}

TEST_F(Stages, FactorLossDecreasesOverTraining) {
  auto cfg = student_cfg(Method::ft, 4);
  auto res = train_student(teacher_, para_, *train_, *test_, {1, 8}, cfg);
  ASSERT_EQ(res.metrics.records.size(), 4u);
  EXPECT_LT(*res.metrics.records.back().l_ft, *res.metrics.records.front().l_ft);
  ASSERT_TRUE(res.translator.has_value());
  EXPECT_EQ(res.translator->arch, "translator:32:32:0.5");
}

TEST_F(Stages, StudentRunsAreDeterministic) {
  auto cfg = student_cfg(Method::ft_kd);
  auto a = train_student(teacher_, para_, *train_, *test_, {1, 8}, cfg);
  auto b = train_student(teacher_, para_, *train_, *test_, {1, 8}, cfg);
  EXPECT_EQ(a.metrics.to_csv(), b.metrics.to_csv());
  EXPECT_EQ(a.translator->serialize(), b.translator->serialize());
}

}  // namespace
}  // namespace ktransfer
