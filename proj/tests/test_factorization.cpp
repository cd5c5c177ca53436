#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>
#include <set>

#include "moesplit/errors.hpp"
#include "moesplit/factorization.hpp"
#include "moesplit/ops.hpp"

using namespace moesplit;

namespace {

FfnWeights<double> random_ffn(std::size_t d, std::size_t h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {random_normal<double>({d, h}, 0.4, rng), random_normal<double>({h}, 0.2, rng),
          random_normal<double>({h, d}, 0.4, rng), random_normal<double>({d}, 0.2, rng)};
}

// Calibration activations driven by two independent latent signals; neurons
// {0,2,5,7} follow the first and {1,3,4,6} the second.
Tensor<double> two_block_calibration() {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> n01;
  Tensor<double> calib({200, 8});
  for (std::size_t r = 0; r < 200; ++r) {
    const double a = n01(rng), b = n01(rng);
    const std::size_t block_a[] = {0, 2, 5, 7}, block_b[] = {1, 3, 4, 6};
    for (std::size_t i = 0; i < 4; ++i) {
      calib.at(r, block_a[i]) = a * static_cast<double>(i + 1);
      calib.at(r, block_b[i]) = b * static_cast<double>(i + 1) + 3.0;
    }
  }
  return calib;
}

double within_group_score(const Tensor<double>& calib, const std::vector<std::size_t>& group) {
  // mean pairwise Pearson correlation, computed directly
  const std::size_t s = calib.rows();
  auto col = [&](std::size_t j) {
    std::vector<double> v(s);
    for (std::size_t r = 0; r < s; ++r) v[r] = calib.at(r, j);
    return v;
  };
  auto corr = [&](const std::vector<double>& x, const std::vector<double>& y) {
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < s; ++i) mx += x[i], my += y[i];
    mx /= s;
    my /= s;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < s; ++i) {
      sxy += (x[i] - mx) * (y[i] - my);
      sxx += (x[i] - mx) * (x[i] - mx);
      syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
  };
  double total = 0;
  for (std::size_t i = 0; i < group.size(); ++i)
    for (std::size_t j = i + 1; j < group.size(); ++j) total += corr(col(group[i]), col(group[j]));
  return total;
}

}  // namespace

TEST(BuildPermutation, ContiguousIsIdentity) {
  const auto pm = build_permutation(PermutationStrategy::kContiguous, 8, 2);
  EXPECT_EQ(pm.delta, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST(BuildPermutation, RandomIsSeededBijection) {
  const auto a = build_permutation(PermutationStrategy::kRandom, 256, 4, 9);
  const auto b = build_permutation(PermutationStrategy::kRandom, 256, 4, 9);
  const auto c = build_permutation(PermutationStrategy::kRandom, 256, 4, 10);
  EXPECT_EQ(a.delta, b.delta);
  EXPECT_NE(a.delta, c.delta);
  EXPECT_TRUE(a.is_bijection());
}

TEST(BuildPermutation, CoactivationRecoversBlocks) {
  const auto calib = two_block_calibration();
  const auto pm = build_permutation(PermutationStrategy::kCoactivation, 8, 2, 0, &calib);
  ASSERT_TRUE(pm.is_bijection());
  std::set<std::size_t> g0(pm.delta.begin(), pm.delta.begin() + 4), g1(pm.delta.begin() + 4, pm.delta.end());
  const std::set<std::size_t> a{0, 2, 5, 7}, b{1, 3, 4, 6};
  EXPECT_TRUE((g0 == a && g1 == b) || (g0 == b && g1 == a));

  // brute force over all 35 balanced 2-partitions (member 0 fixed in the first group)
  double best = -1e9;
  std::vector<std::size_t> best_group;
  for (unsigned mask = 0; mask < 256; ++mask) {
    if (std::popcount(mask) != 4 || !(mask & 1u)) continue;
    std::vector<std::size_t> x, y;
    for (std::size_t i = 0; i < 8; ++i) ((mask >> i) & 1u ? x : y).push_back(i);
    const double s = within_group_score(calib, x) + within_group_score(calib, y);
    if (s > best) best = s, best_group = x;
  }
  EXPECT_EQ(std::set<std::size_t>(best_group.begin(), best_group.end()), a);
}

TEST(BuildPermutation, Errors) {
  EXPECT_THROW(build_permutation(PermutationStrategy::kContiguous, 10, 4), ConfigError);
  EXPECT_THROW(build_permutation(PermutationStrategy::kCoactivation, 8, 2), ContractError);
  EXPECT_THROW(parse_strategy("kmeans"), ConfigError);
  EXPECT_EQ(parse_strategy("coactivation"), PermutationStrategy::kCoactivation);
}

TEST(PermutationMatrix, HandCaseAndOrthogonality) {
  PermutationMap pm;
  pm.delta = {1, 0};
  EXPECT_EQ(permutation_matrix(pm).vec(), (std::vector<double>{0, 1, 1, 0}));
  EXPECT_EQ(permutation_matrix(build_permutation(PermutationStrategy::kContiguous, 5, 1)), Tensor<double>::identity(5));

  const auto rnd = build_permutation(PermutationStrategy::kRandom, 32, 4, 3);
  const auto p = permutation_matrix(rnd);
  Tensor<double> pt({32, 32});
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 32; ++j) pt.at(j, i) = p.at(i, j);
  EXPECT_EQ(matmul(p, pt), Tensor<double>::identity(32));
  for (std::size_t i = 0; i < 32; ++i) {
    double row = 0, col = 0;
    for (std::size_t j = 0; j < 32; ++j) row += p.at(i, j), col += p.at(j, i);
    EXPECT_EQ(row, 1.0);
    EXPECT_EQ(col, 1.0);
  }
}

TEST(PermutationMatrix, MatchesIndexSplit) {
  // W1 P equals the concatenated expert W1 blocks
  const auto w = random_ffn(4, 16, 20);
  const auto pm = build_permutation(PermutationStrategy::kRandom, 16, 4, 21);
  const auto bank = split_ffn(w, pm, 4);
  const auto w1p = matmul(w.w1, permutation_matrix(pm));
  for (std::size_t e = 0; e < 4; ++e)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(bank.experts[e].w1.at(r, c), w1p.at(r, e * 4 + c));
}

TEST(SplitFfn, SingleExpertAndContiguousSlices) {
  const auto w = random_ffn(3, 8, 30);
  const auto one = split_ffn(w, build_permutation(PermutationStrategy::kContiguous, 8, 1), 1);
  ASSERT_EQ(one.count(), 1u);
  EXPECT_EQ(one.experts[0].w1, w.w1);
  EXPECT_EQ(one.experts[0].w2, w.w2);
  EXPECT_EQ(one.b2, w.b2);

  const auto two = split_ffn(w, build_permutation(PermutationStrategy::kContiguous, 8, 2), 2);
  for (std::size_t e = 0; e < 2; ++e)
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(two.experts[e].b1[c], w.b1[e * 4 + c]);
      for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(two.experts[e].w1.at(r, c), w.w1.at(r, e * 4 + c));
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(two.experts[e].w2.at(c, j), w.w2.at(e * 4 + c, j));
    }
  EXPECT_THROW(split_ffn(w, build_permutation(PermutationStrategy::kContiguous, 8, 2), 3), ConfigError);
}

TEST(SplitFfn, RandomSplitSumMatchesDense) {
  const auto w = random_ffn(16, 64, 40);
  const auto bank = split_ffn(w, build_permutation(PermutationStrategy::kRandom, 64, 4, 41), 4);
  std::mt19937_64 rng(42);
  for (int i = 0; i < 100; ++i) {
    const auto x = random_normal<double>({1, 16}, 1.0, rng);
    const auto dense = ffn_forward(x, w);
    const auto split = expert_sum(x, bank);
    double scale = 0;
    for (double v : dense.data()) scale = std::max(scale, std::abs(v));
    ASSERT_LE(max_abs_diff(dense, split) / scale, 1e-10);
  }
}

TEST(SplitFfn, ReconstructionIsBitExactAndIdempotent) {
  const auto w = random_ffn(8, 32, 50);
  std::mt19937_64 rng(51);
  const auto calib = silu(linear_forward(random_normal<double>({64, 8}, 1.0, rng), w.w1, w.b1));
  for (auto strat : {PermutationStrategy::kContiguous, PermutationStrategy::kRandom, PermutationStrategy::kCoactivation}) {
    const auto pm = build_permutation(strat, 32, 4, 52, &calib);
    const auto bank = split_ffn(w, pm, 4);
    const auto back = merge_experts(bank);
    EXPECT_EQ(back.w1, w.w1);
    EXPECT_EQ(back.b1, w.b1);
    EXPECT_EQ(back.w2, w.w2);
    EXPECT_EQ(back.b2, w.b2);
    const auto again = split_ffn(back, pm, 4);
    for (std::size_t e = 0; e < 4; ++e) {
      EXPECT_EQ(again.experts[e].w1, bank.experts[e].w1);
      EXPECT_EQ(again.experts[e].w2, bank.experts[e].w2);
    }
  }
}

TEST(VerifyEquivalence, PassesAndReportsBothPrecisions) {
  const auto w = random_ffn(16, 64, 60);
  const auto bank = split_ffn(w, build_permutation(PermutationStrategy::kRandom, 64, 8, 61), 8);
  const auto cert = verify_equivalence(w, bank, 200);
  EXPECT_TRUE(cert.pass);
  EXPECT_LE(cert.f64.max_rel, 1e-10);
  EXPECT_LE(cert.f32.max_rel, 1e-5);
  EXPECT_GT(cert.f32.max_rel, cert.f64.max_rel);
  const auto j = cert.to_json();
  EXPECT_EQ(j.at("strategy"), "random");
  EXPECT_EQ(j.at("experts"), 8);
  EXPECT_TRUE(j.at("f32").contains("max_rel"));
  EXPECT_TRUE(j.at("pass").get<bool>());
}

TEST(VerifyEquivalence, CorruptedExpertFails) {
  const auto w = random_ffn(16, 64, 70);
  auto bank = split_ffn(w, build_permutation(PermutationStrategy::kContiguous, 64, 4), 4);
  bank.experts[2].w2.fill(0);
  const auto cert = verify_equivalence(w, bank, 50);
  EXPECT_FALSE(cert.pass);
  EXPECT_GT(cert.f64.max_rel, 1e-3);
}

TEST(VerifyEquivalence, MismatchedBankIsContractError) {
  const auto w = random_ffn(16, 64, 80);
  const auto other = split_ffn(random_ffn(16, 32, 81), build_permutation(PermutationStrategy::kContiguous, 32, 4), 4);
  EXPECT_THROW(verify_equivalence(w, other, 10), ContractError);
}

TEST(PermutationMap, JsonRoundTrip) {
  const auto pm = build_permutation(PermutationStrategy::kRandom, 16, 4, 5);
  const auto back = PermutationMap::from_json(pm.to_json());
  EXPECT_EQ(back.delta, pm.delta);
  EXPECT_EQ(back.seed, 5u);
  auto j = pm.to_json();
  j["delta"][0] = j["delta"][1];
  EXPECT_THROW(PermutationMap::from_json(j), CheckpointError);
}
