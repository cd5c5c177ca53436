#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "moesplit/errors.hpp"
#include "moesplit/grad_check.hpp"
#include "moesplit/losses.hpp"
#include "moesplit/ops.hpp"
#include "moesplit/train.hpp"
#include "toy.hpp"

using namespace moesplit;
namespace fs = std::filesystem;

namespace {

Tensor<double> row(std::vector<double> v) {
  Tensor<double> t({1, v.size()});
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

// stable full sort by (distance, index), then the first k indices ascending
std::vector<std::uint32_t> argsort_oracle(std::span<const double> d, std::size_t k) {
  std::vector<std::uint32_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return d[a] < d[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::uint8_t> tensor_bytes(const Tensor<float>& t) {
  std::vector<std::uint8_t> out(t.size() * sizeof(float));
  std::memcpy(out.data(), t.data().data(), out.size());
  return out;
}

std::vector<std::uint8_t> router_bytes(StudentWeights<float>& s) {
  std::vector<std::uint8_t> out;
  for_each_moe_tensor(s, [&](const std::string&, Tensor<float>& t, bool is_router) {
    if (!is_router) return;
    auto b = tensor_bytes(t);
    out.insert(out.end(), b.begin(), b.end());
  });
  return out;
}

std::vector<std::uint8_t> model_bytes(ModelWeights<float>& m) {
  std::vector<std::uint8_t> out;
  for_each_tensor(m, [&](const std::string&, Tensor<float>& t) {
    auto b = tensor_bytes(t);
    out.insert(out.end(), b.begin(), b.end());
  });
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("moesplit_training_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(PseudoAllocation, SmallestTwo) {
  auto pa = allocation_from_distances(row({0.3, 0.1, 0.5, 0.2}), 2);
  EXPECT_EQ(pa.indices[0], (std::vector<std::uint32_t>{1, 3}));
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(pa.mask.at(0, k), k == 1 || k == 3 ? 1.0 : 0.0);
}

TEST(PseudoAllocation, ExactExpertAlwaysSelected) {
  std::mt19937_64 rng(1);
  auto teacher = random_normal<double>({5, 3}, 1.0, rng);
  auto experts = random_normal<double>({5, 4, 3}, 1.0, rng);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t j = 0; j < 3; ++j) experts.data()[(t * 4 + 2) * 3 + j] = teacher.at(t, j);
  auto pa = pseudo_allocation(teacher, experts, 1);
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_EQ(pa.distances.at(t, 2), 0.0);
    EXPECT_EQ(pa.indices[t], std::vector<std::uint32_t>{2});
  }
}

TEST(PseudoAllocation, DistanceIsMeanSquare) {
  Tensor<double> teacher({1, 2}, {1.0, -1.0});
  Tensor<double> experts({1, 2, 2}, {1.0, -1.0, 3.0, 0.0});
  auto d = expert_distances(teacher, experts);
  EXPECT_DOUBLE_EQ(d.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(d.at(0, 1), (4.0 + 1.0) / 2.0);
}

TEST(PseudoAllocation, KAboveNThrows) {
  Tensor<double> teacher({1, 2});
  Tensor<double> experts({1, 3, 2});
  EXPECT_THROW(pseudo_allocation(teacher, experts, 4), ContractError);
}

TEST(PseudoAllocation, MatchesArgsortOracle) {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> level(0, 5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + trial % 16;
    const std::size_t k = 1 + rng() % n;
    Tensor<double> d({1, n});
    // coarse levels so ties are common
    for (auto& v : d.data()) v = trial % 2 ? level(rng) * 0.25 : std::uniform_real_distribution<double>()(rng);
    auto pa = allocation_from_distances(d, k);
    ASSERT_EQ(pa.indices[0], argsort_oracle(d.row(0), k)) << "trial " << trial;
    double ones = 0;
    for (double v : pa.mask.row(0)) ones += v;
    EXPECT_EQ(ones, static_cast<double>(k));
  }
}

TEST(PseudoAllocation, GroupsPickWithinEachGroup) {
  auto pa = allocation_from_distances(row({0.1, 0.2, 0.9, 0.8}), 2, 2);
  EXPECT_EQ(pa.indices[0], (std::vector<std::uint32_t>{0, 3}));
}

TEST(Losses, PaHandValues) {
  auto uniform = row({0.25, 0.25, 0.25, 0.25});
  EXPECT_NEAR(pa_loss(row({0, 1, 0, 0}), uniform, 4), 0.25 * std::log(4.0), 1e-12);
  EXPECT_NEAR(pa_loss(row({0, 1, 0, 1}), uniform, 4), 0.25 * 2 * std::log(4.0), 1e-12);
  EXPECT_NEAR(pa_loss(row({0, 1, 0, 0}), uniform, 4), 0.3466, 1e-4);
  EXPECT_NEAR(pa_loss(row({0, 1, 0, 1}), uniform, 4), 0.6931, 1e-4);
  EXPECT_NEAR(pa_loss(row({0, 1, 0, 0}), row({0, 1, 0, 0}), 4), 0.0, 1e-15);
  // log is clamped, so zero probability on a marked expert stays finite
  EXPECT_NEAR(pa_loss(row({1, 0}), row({0, 1}), 2), -std::log(1e-12) / 2, 1e-9);
}

TEST(Losses, PaAveragesTokensAndLayers) {
  Tensor<double> mask({2, 2}, {1, 0, 0, 1});
  Tensor<double> probs({2, 2}, {0.5, 0.5, 0.9, 0.1});
  const double expected = -(std::log(0.5) + std::log(0.1)) / 2 / 2;
  EXPECT_NEAR(pa_loss(mask, probs, 2), expected, 1e-12);
  std::vector<Tensor<double>> masks{mask, row({1, 0})}, ps{probs, row({0.5, 0.5})};
  EXPECT_NEAR(pa_loss(masks, ps, 2), (expected - std::log(0.5) / 2) / 2, 1e-12);
}

TEST(Losses, FtHandValues) {
  Tensor<double> uniform({1, 4});
  std::vector<int> label{2};
  EXPECT_NEAR(ft_loss(uniform, label), std::log(4.0), 1e-12);
  EXPECT_NEAR(ft_loss(uniform, label), 1.3863, 1e-4);
  Tensor<double> sharp({1, 4}, {0, 0, 100, 0});
  EXPECT_NEAR(ft_loss(sharp, label), 0.0, 1e-12);

  std::mt19937_64 rng(9);
  auto logits = random_normal<double>({6, 5}, 2.0, rng);
  std::vector<int> labels{0, 4, 2, 2, 1, 3};
  double direct = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    double z = 0;
    for (double v : logits.row(r)) z += std::exp(v);
    direct += std::log(z) - logits.at(r, labels[r]);
  }
  EXPECT_NEAR(ft_loss(logits, labels), direct / 6, 1e-6);
  std::vector<int> bad{7};
  EXPECT_THROW(ft_loss(uniform, bad), ContractError);
}

TEST(Losses, BalanceHandValues) {
  EXPECT_NEAR(balance_loss(row({0.25, 0.25, 0.25, 0.25}), Selection{{0, 1}}, 2, 4), 0.25, 1e-12);
  EXPECT_NEAR(balance_loss(row({0.9, 0.1}), Selection{{0}}, 1, 2), 0.45, 1e-12);
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    auto probs = softmax(random_normal<double>({3, 4}, 2.0, rng));
    Selection all(3, {0, 1, 2, 3});
    EXPECT_NEAR(balance_loss(probs, all, 4, 4), 1.0, 1e-12);
  }
}

TEST(Losses, Overall) {
  EXPECT_EQ(overall_loss(0.5, 0.25, 0.0), 0.5);
  EXPECT_EQ(overall_loss(0.5, 0.25, 1.0), 0.75);
  const double a = overall_loss(1.5, 0.3, 0.2), b = overall_loss(1.5, 0.3, 0.7);
  EXPECT_NEAR((b - a) / 0.5, 0.3, 1e-12);
  EXPECT_NEAR(a - 0.2 * 0.3, 1.5, 1e-12);
}

TEST(Losses, GraphMatchesEager) {
  std::mt19937_64 rng(8);
  std::vector<Tensor<double>> probs, masks;
  std::vector<Selection> sels;
  for (int l = 0; l < 2; ++l) {
    probs.push_back(softmax(random_normal<double>({5, 4}, 1.0, rng)));
    sels.push_back(topk_select(probs.back(), 2));
    masks.push_back(allocation_from_distances(random_normal<double>({5, 4}, 1.0, rng), 2).mask);
  }
  Graph<double> g(nullptr, false);
  std::vector<Var> pv;
  for (auto& p : probs) pv.push_back(g.constant(p));
  EXPECT_NEAR(g.value(pa_loss_graph(g, pv, masks, 4))[0], pa_loss(masks, probs, 4), 1e-14);
  EXPECT_NEAR(g.value(balance_loss_graph(g, pv, sels, 2, 4))[0], balance_loss(probs, sels, 2, 4), 1e-14);
}

// ---------------------------------------------------------------------------
// Gradients through a 2-layer toy student (f64)

namespace {

using toy::GradFixture;

void expect_grads(const GradCheckReport& r, const char* what) {
  EXPECT_GT(r.checked, 0u) << what;
  std::printf("%s: %zu checked, %zu skipped, max rel %.3g\n", what, r.checked, r.skipped, r.max_rel_err);
  EXPECT_LE(r.max_rel_err, 1e-4) << what << " worst " << r.worst;
}

}  // namespace

TEST(GradCheck, FineTuneLoss) {
  GradFixture f;
  expect_grads(grad_check([&](Graph<double>& g) { return f.losses(g).ft; }, f.all), "L_FT");
}

TEST(GradCheck, PseudoAllocationLoss) {
  GradFixture f;
  expect_grads(grad_check([&](Graph<double>& g) { return f.losses(g).pa; }, f.all), "L_PA");
}

TEST(GradCheck, BalanceLoss) {
  GradFixture f;
  expect_grads(grad_check([&](Graph<double>& g) { return f.losses(g).lb; }, f.routers), "L_lb");
}

TEST(GradCheck, OverallLoss) {
  GradFixture f;
  expect_grads(grad_check(
                   [&](Graph<double>& g) {
                     auto l = f.losses(g);
                     return g.add(l.ft, g.scale(l.pa, 0.7));
                   },
                   f.all),
               "L_overall");
}

TEST(GradCheck, DetachedRouterInputStopsPaAtExperts) {
  GradFixture f;
  Graph<double> g(&f.all);
  StudentPassOptions<double> opt;
  opt.detach_router_input = true;
  auto l = student_losses(g, f.teacher, f.student, f.batch, opt);
  f.all.zero_grad();
  g.backward(l.pa);
  double expert_norm = 0, router_norm = 0;
  for (auto& e : f.all.entries())
    for (double v : e.grad.data()) (e.name.find("router") == std::string::npos ? expert_norm : router_norm) += v * v;
  EXPECT_EQ(expert_norm, 0.0);
  EXPECT_GT(router_norm, 0.0);
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Training, RoutersFrozenInPhaseTwoAndTeacherUntouched) {
  auto teacher = init_model<float>(toy::model_config(), 1);
  const auto teacher_before = model_bytes(teacher);
  const auto data = toy::dataset();
  auto cfg = toy::train_config();

  auto warm_only = cfg;
  warm_only.train_steps = 0;
  auto after_warmup = run_training(teacher, toy::student(teacher), warm_only, data);
  auto full = run_training(teacher, toy::student(teacher), cfg, data);
  auto fresh = toy::student(teacher);

  EXPECT_NE(router_bytes(after_warmup.student), router_bytes(fresh));
  EXPECT_EQ(router_bytes(after_warmup.student), router_bytes(full.student));
  EXPECT_EQ(model_bytes(full.student.backbone), model_bytes(fresh.backbone));
  EXPECT_EQ(model_bytes(teacher), teacher_before);
}

TEST(Training, ExpertsFrozenInWarmup) {
  auto teacher = init_model<float>(toy::model_config(), 1);
  auto cfg = toy::train_config();
  cfg.train_steps = 0;
  auto res = run_training(teacher, toy::student(teacher), cfg, toy::dataset());
  auto fresh = toy::student(teacher);
  std::vector<std::uint8_t> a, b;
  for_each_moe_tensor(res.student, [&](const std::string&, Tensor<float>& t, bool r) {
    if (!r) a = tensor_bytes(t);
  });
  for_each_moe_tensor(fresh, [&](const std::string&, Tensor<float>& t, bool r) {
    if (!r) b = tensor_bytes(t);
  });
  EXPECT_EQ(a, b);
}

TEST(Training, LogComposition) {
  auto teacher = init_model<float>(toy::model_config(), 1);
  auto cfg = toy::train_config();
  cfg.alpha = 0.6;
  auto res = run_training(teacher, toy::student(teacher), cfg, toy::dataset());
  ASSERT_EQ(res.log.size(), cfg.warmup_steps + cfg.train_steps);
  for (const auto& r : res.log) {
    if (r.phase == "experts") {
      EXPECT_NEAR(r.l_overall, r.l_ft + cfg.alpha * r.l_pa, 1e-7) << r.step;
    } else {
      EXPECT_EQ(r.phase, "warmup");
      EXPECT_NEAR(r.l_overall, cfg.alpha * r.l_pa + cfg.lb_weight * r.l_lb, 1e-7) << r.step;
    }
    EXPECT_TRUE(std::isfinite(r.grad_norm));
  }
  for (std::size_t i = 0; i < res.log.size(); ++i) EXPECT_EQ(res.log[i].step, i);
}

TEST(Training, FeatureMseTermIsLogged) {
  auto teacher = init_model<float>(toy::model_config(), 1);
  auto cfg = toy::train_config();
  cfg.warmup_steps = 0;
  cfg.train_steps = 3;
  cfg.feature_mse_weight = 2.0;
  auto res = run_training(teacher, toy::student(teacher), cfg, toy::dataset());
  for (const auto& r : res.log) {
    // the student starts as an exact split, so only the selection gap shows
    EXPECT_GT(r.l_feat, 0.0);
    EXPECT_NEAR(r.l_overall, r.l_ft + cfg.alpha * r.l_pa + 2.0 * r.l_feat, 1e-7);
  }
}

TEST(Training, FullSelectionKeepsTeacherLoss) {
  auto teacher = init_model<float>(toy::model_config(), 1);
  const auto data = toy::dataset();
  auto cfg = toy::train_config();
  cfg.train_steps = 0;
  auto student = build_student(teacher, MoeConfig{4, 4, 1}, PermutationStrategy::kContiguous, 5, 0.5);
  auto res = run_training(teacher, student, cfg, data);
  BatchSampler sampler(data.train, cfg.batch_size, cfg.seed);
  for (const auto& r : res.log) {
    const auto batch = sampler.next();
    Graph<float> g(nullptr, false);
    const double teacher_ce = g.value(g.cross_entropy(lm_graph(g, teacher, batch.inputs), batch.targets))[0];
    EXPECT_EQ(r.l_ft, teacher_ce) << r.step;
  }
}

TEST(Training, OverfitSingleBatch) {
  auto teacher = init_model<float>(toy::model_config(), 1);
  auto data = toy::dataset();
  data.train.resize(2);
  auto cfg = toy::train_config();
  cfg.warmup_steps = 0;
  cfg.train_steps = 200;
  cfg.adam.lr = 1e-2;
  auto res = run_training(teacher, toy::student(teacher), cfg, data);
  EXPECT_LE(res.log.back().l_ft, 0.5 * res.log.front().l_ft)
      << res.log.front().l_ft << " -> " << res.log.back().l_ft;
}

TEST(Training, DeterministicLogsAndFiles) {
  auto teacher = init_model<float>(toy::model_config(), 1);
  const auto data = toy::dataset();
  auto cfg = toy::train_config();
  cfg.checkpoint_every = 4;
  const auto a = scratch("det_a"), b = scratch("det_b");
  run_training(teacher, toy::student(teacher), cfg, data, {a});
  run_training(teacher, toy::student(teacher), cfg, data, {b});
  for (const char* f : {"metrics.jsonl", "routes.csv", "student.json", "student.bin", "checkpoints/step_000008.json",
                        "checkpoints/step_000008.bin"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Training, RandomRoutingSkipsWarmup) {
  auto teacher = init_model<float>(toy::model_config(), 1);
  auto cfg = toy::train_config();
  cfg.routing = RouterTraining::kRandom;
  auto res = run_training(teacher, toy::student(teacher), cfg, toy::dataset());
  ASSERT_EQ(res.log.size(), cfg.warmup_steps + cfg.train_steps);
  EXPECT_TRUE(res.snapshots.empty());
  for (const auto& r : res.log) {
    EXPECT_EQ(r.phase, "experts");
    EXPECT_EQ(r.l_pa, 0.0);
    EXPECT_EQ(r.l_overall, r.l_ft);
  }
}

TEST(Training, WarmupSnapshots) {
  auto teacher = init_model<float>(toy::model_config(), 1);
  auto cfg = toy::train_config();
  cfg.warmup_steps = 10;
  cfg.snapshot_every = 2;
  auto res = run_training(teacher, toy::student(teacher), cfg, toy::dataset());
  // step 0 plus steps 2, 4, ..., 10, one record per layer
  ASSERT_EQ(res.snapshots.size(), 6u * 2);
  for (std::size_t i = 0; i < res.snapshots.size(); ++i) {
    EXPECT_EQ(res.snapshots[i].step, (i / 2) * 2);
    EXPECT_EQ(res.snapshots[i].selected.size(), cfg.probe_windows * 16);
  }
}

TEST(Training, DivergenceKeepsLastGood) {
  auto teacher = init_model<float>(toy::model_config(), 1);
  auto student = toy::student(teacher);
  student.backbone.token_embedding.data()[0] = std::numeric_limits<float>::quiet_NaN();
  auto data = toy::dataset();
  for (auto& w : data.train) w.input[0] = 0;
  const auto dir = scratch("diverge");
  EXPECT_THROW(run_training(teacher, student, toy::train_config(), data, {dir}), DivergenceError);
  EXPECT_TRUE(fs::exists(dir / "last_good.json"));
  fs::remove_all(dir);
}

TEST(TrainConfigJson, MissingFieldNamed) {
  Json j{{"alpha", 1.0}, {"lr", 1e-3}, {"beta1", 0.9}, {"beta2", 0.95}, {"weight_decay", 0.0},
         {"grad_clip", 1.0}, {"train_steps", 100}, {"seed", 1}, {"lb_weight", 0.01}};
  auto c = TrainConfig::from_json(j);
  EXPECT_EQ(c.warmup_steps, 10u);
  EXPECT_TRUE(c.pa_grad_to_experts);
  EXPECT_EQ(c.feature_mse_weight, 0.0);
  for (const char* key : {"alpha", "lr", "train_steps", "seed", "lb_weight"}) {
    auto k = j;
    k.erase(key);
    try {
      TrainConfig::from_json(k);
      ADD_FAILURE() << key;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(std::string("train.") + key), std::string::npos) << e.what();
    }
  }
  j["alpha"] = -1.0;
  EXPECT_THROW(TrainConfig::from_json(j), ConfigError);
  j["alpha"] = 1.0;
  j["routing"] = "sometimes";
  EXPECT_THROW(TrainConfig::from_json(j), ConfigError);
}

TEST(TrainConfigJson, RoundTrip) {
  RunConfig rc;
  rc.train = toy::train_config();
  auto back = RunConfig::from_json(rc.to_json());
  EXPECT_EQ(back.to_json(), rc.to_json());
}
