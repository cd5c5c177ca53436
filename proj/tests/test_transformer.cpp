#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "moesplit/checkpoint.hpp"
#include "moesplit/corpus.hpp"
#include "moesplit/errors.hpp"
#include "moesplit/ops.hpp"
#include "moesplit/transformer.hpp"

using namespace moesplit;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 8;
  c.expansion = 4;
  c.heads = 2;
  c.vocab = 16;
  c.max_seq = 12;
  return c;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("moesplit_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

}  // namespace

TEST(FfnForward, DeadNetworkReturnsBias) {
  FfnWeights<double> w{Tensor<double>({3, 6}), Tensor<double>({6}), Tensor<double>({6, 3}),
                       Tensor<double>({3}, {0.5, -1, 2})};
  std::mt19937_64 rng(1);
  const auto y = ffn_forward(random_normal<double>({4, 3}, 1.0, rng), w);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(std::vector<double>(y.row(r).begin(), y.row(r).end()), w.b2.vec());
}

TEST(FfnForward, AllOnesHandExpansion) {
  FfnWeights<double> w{Tensor<double>::full({2, 4}, 1.0), Tensor<double>::full({4}, 1.0),
                       Tensor<double>::full({4, 2}, 1.0), Tensor<double>::full({2}, 1.0)};
  // h = [1,0]·1 + 1 = 2 per neuron; y_j = 4·silu(2) + 1
  const double expected = 4.0 * 2.0 / (1.0 + std::exp(-2.0)) + 1.0;
  const auto y = ffn_forward(Tensor<double>({1, 2}, {1, 0}), w);
  EXPECT_NEAR(y[0], expected, 1e-12);
  EXPECT_NEAR(y[1], expected, 1e-12);
}

TEST(FfnForward, MatchesOpCompositionBitwise) {
  std::mt19937_64 rng(2);
  FfnWeights<float> w{random_normal<float>({8, 32}, 0.3, rng), random_normal<float>({32}, 0.1, rng),
                      random_normal<float>({32, 8}, 0.3, rng), random_normal<float>({8}, 0.1, rng)};
  const auto x = random_normal<float>({5, 8}, 1.0, rng);
  const auto composed = linear_forward(silu(linear_forward(x, w.w1, w.b1)), w.w2, w.b2);
  EXPECT_EQ(ffn_forward(x, w), composed);
}

TEST(FfnForward, ShapeMismatchThrows) {
  FfnWeights<double> w{Tensor<double>({3, 6}), Tensor<double>({5}), Tensor<double>({6, 3}), Tensor<double>({3})};
  EXPECT_THROW(ffn_forward(Tensor<double>({1, 3}), w), DimensionError);
}

TEST(BlockForward, ZeroWeightsArePureResidual) {
  auto m = init_model<double>(tiny_config(), 3);
  auto& b = m.blocks[0];
  for (auto* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.ffn.w1, &b.ffn.b1, &b.ffn.w2, &b.ffn.b2}) t->fill(0);
  std::mt19937_64 rng(4);
  const auto x = random_normal<double>({5, 8}, 1.0, rng);
  const auto res = block_forward(x, b, 2, 12);
  EXPECT_EQ(res.out, x);
  EXPECT_EQ(res.hidden, x);
}

TEST(BlockForward, SingleTokenAttentionIsValuePath) {
  auto m = init_model<double>(tiny_config(), 5);
  const auto& b = m.blocks[0];
  std::mt19937_64 rng(6);
  const auto x = random_normal<double>({1, 8}, 1.0, rng);
  const auto n1 = rms_norm(x, b.norm1_scale, b.norm1_shift, kNormEps);
  const auto expected = add(x, matmul(matmul(n1, b.wv), b.wo));
  const auto res = block_forward(x, b, 2, 12);
  EXPECT_LE(max_abs_diff(res.hidden, expected), 1e-14);
  EXPECT_EQ(res.out.shape(), x.shape());
}

TEST(BlockForward, TooLongSequenceThrows) {
  auto m = init_model<double>(tiny_config(), 7);
  EXPECT_THROW(block_forward(Tensor<double>({13, 8}), m.blocks[0], 2, 12), ContractError);
}

TEST(LmForward, ShapeAndZeroHeadGivesUniform) {
  auto m = init_model<double>(tiny_config(), 8);
  const std::vector<int> toks{1, 2, 3, 4, 5};
  auto logits = lm_forward<double>(toks, m);
  EXPECT_EQ(logits.shape(), (Shape{5, 16}));
  m.head.fill(0);
  logits = lm_forward<double>(toks, m);
  const std::vector<int> targets{2, 3, 4, 5, 6};
  EXPECT_NEAR(cross_entropy(logits, std::span<const int>(targets)), std::log(16.0), 1e-12);
}

TEST(LmForward, CausalityUnderSuffixPerturbation) {
  const auto m = init_model<double>(tiny_config(), 9);
  std::vector<int> a{3, 1, 4, 1, 5, 9, 2, 6};
  for (std::size_t t = 0; t < a.size(); ++t) {
    auto b = a;
    b[t] = (b[t] + 7) % 16;
    const auto la = lm_forward<double>(a, m);
    const auto lb = lm_forward<double>(b, m);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < 16; ++c) ASSERT_EQ(la.at(r, c), lb.at(r, c)) << "t=" << t << " r=" << r;
  }
}

TEST(LmForward, OutOfRangeTokenThrows) {
  const auto m = init_model<double>(tiny_config(), 10);
  const std::vector<int> bad{1, 16};
  EXPECT_THROW(lm_forward<double>(bad, m), ContractError);
}

TEST(LmForward, FrozenWeightsReceiveNoGradient) {
  auto m = init_model<double>(tiny_config(), 11);
  ParamSet<double> params;
  params.add("head", m.head);
  Graph<double> g(&params);
  TokenBatch batch{{1, 2, 3, 4}, 1, 4};
  Var loss = g.cross_entropy(lm_graph(g, m, batch), {2, 3, 4, 5});
  g.backward(loss);
  EXPECT_GT(params.grad_norm(), 0.0);
  EXPECT_FALSE(g.requires_grad(g.weight(m.blocks[0].ffn.w1)));
}

TEST(ModelConfig, ValidatesHeads) {
  auto c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.vocab = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(InitModel, NormScalesPositive) {
  const auto m = init_model<float>(tiny_config(), 12);
  for (const auto& b : m.blocks)
    for (float v : b.norm1_scale.data()) EXPECT_GT(v, 0.0f);
}

TEST(Corpus, TwoBytesOneWindow) {
  const std::vector<std::uint8_t> bytes{'a', 'b'};
  const auto w = make_windows(bytes, 1);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_EQ(w[0].input, std::vector<int>{97});
  EXPECT_EQ(w[0].target, std::vector<int>{98});
}

TEST(Corpus, ThousandBytesFifteenWindows) {
  std::vector<std::uint8_t> bytes(1000);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>(i * 7);
  const auto w = make_windows(bytes, 64);
  ASSERT_EQ(w.size(), 15u);
  for (const auto& win : w) {
    ASSERT_EQ(win.input.size(), 64u);
    for (std::size_t i = 0; i + 1 < 64; ++i) EXPECT_EQ(win.target[i], win.input[i + 1]);
  }
  EXPECT_EQ(w[1].input[0], w[0].target[63]);
}

TEST(Corpus, SeededOrderIsDeterministic) {
  std::vector<std::uint8_t> bytes(2000);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>(i * 31 + 5);
  const auto a = make_windows(bytes, 16, 42);
  const auto b = make_windows(bytes, 16, 42);
  const auto plain = make_windows(bytes, 16);
  ASSERT_EQ(a.size(), b.size());
  bool moved = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].input, b[i].input);
    moved = moved || a[i].input != plain[i].input;
  }
  EXPECT_TRUE(moved);
}

TEST(Corpus, EmptyFileIsIngestError) {
  const auto dir = scratch("empty_corpus");
  write_file(dir / "empty.txt", "");
  EXPECT_THROW(corpus_ingest(dir / "empty.txt", 4), IngestError);
  EXPECT_THROW(corpus_ingest(dir / "missing.txt", 4), IngestError);
}

TEST(Corpus, SplitAndSampler) {
  std::vector<std::uint8_t> bytes(1000, 1);
  const auto split = split_corpus(bytes, 0.1);
  EXPECT_EQ(split.train.size() + split.heldout.size(), 1000u);
  EXPECT_EQ(split.heldout.size(), 100u);
  EXPECT_THROW(split_corpus(bytes, 1.5), ConfigError);

  BatchSampler a(make_windows(split.train, 8), 4, 3), b(make_windows(split.train, 8), 4, 3);
  for (int i = 0; i < 60; ++i) {
    const auto x = a.next(), y = b.next();
    ASSERT_EQ(x.inputs.tokens, y.inputs.tokens);
    ASSERT_EQ(x.inputs.batch, 4u);
    ASSERT_EQ(x.targets.size(), 32u);
  }
  EXPECT_GE(a.epoch(), 1u);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto dir = scratch("ckpt_roundtrip");
  const auto m = init_model<float>(tiny_config(), 13);
  save_model(dir / "model.json", m, Json{{"note", "x"}});
  const auto back = load_model(dir / "model.json");
  EXPECT_EQ(back.config, m.config);
  std::vector<const Tensor<float>*> a, b;
  for_each_tensor(m, [&](const std::string&, const Tensor<float>& t) { a.push_back(&t); });
  for_each_tensor(back, [&](const std::string&, const Tensor<float>& t) { b.push_back(&t); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i], *b[i]);
  EXPECT_EQ(fs::file_size(blob_path(dir / "model.json")) % 4, 0u);
  EXPECT_EQ(Checkpoint::load(dir / "model.json").meta.at("note"), "x");
}

TEST(Checkpoint, MissingOrCorruptIsCheckpointError) {
  const auto dir = scratch("ckpt_bad");
  EXPECT_THROW(load_model(dir / "none.json"), CheckpointError);
  write_file(dir / "bad.json", "{not json");
  EXPECT_THROW(load_model(dir / "bad.json"), CheckpointError);
  save_model(dir / "short.json", init_model<float>(tiny_config(), 14));
  fs::resize_file(blob_path(dir / "short.json"), 16);
  EXPECT_THROW(load_model(dir / "short.json"), CheckpointError);
}

TEST(Checkpoint, RealFormatting) {
  EXPECT_EQ(format_real(1.0 / 3.0), "0.333333333");
  EXPECT_EQ(real9(std::log(4.0)), 1.38629436);
}
