#include "moesplit/transformer.hpp"

#include <cmath>
#include <random>

#include "moesplit/ops.hpp"

namespace moesplit {

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model.layers must be >= 1");
  if (vocab < 2) throw ConfigError("model.vocab must be >= 2");
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.heads (" +
                      std::to_string(heads) + ")");
  }
  if (expansion < 1) throw ConfigError("model.expansion must be a positive integer");
  if (max_seq < 1) throw ConfigError("model.max_seq must be >= 1");
}

template <typename T>
void FfnWeights<T>::validate() const {
  const bool ok = w1.rank() == 2 && w2.rank() == 2 && w2.shape()[0] == w1.shape()[1] &&
                  w2.shape()[1] == w1.shape()[0] && b1.size() == w1.shape()[1] && b2.size() == w1.shape()[0];
  if (!ok) {
    throw DimensionError("ffn weights inconsistent: W1 " + shape_str(w1.shape()) + ", b1 " + shape_str(b1.shape()) +
                         ", W2 " + shape_str(w2.shape()) + ", b2 " + shape_str(b2.shape()));
  }
}

template <typename T>
ModelWeights<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model;
  const std::size_t h = config.hidden();
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid_std = proj_std / std::sqrt(2.0 * static_cast<double>(config.layers));

  ModelWeights<T> m;
  m.config = config;
  m.token_embedding = random_normal<T>({config.vocab, d}, 0.1, rng);
  m.position_embedding = random_normal<T>({config.max_seq, d}, 0.02, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    BlockWeights<T> b;
    b.wq = random_normal<T>({d, d}, proj_std, rng);
    b.wk = random_normal<T>({d, d}, proj_std, rng);
    b.wv = random_normal<T>({d, d}, proj_std, rng);
    b.wo = random_normal<T>({d, d}, resid_std, rng);
    b.norm1_scale = Tensor<T>::full({d}, T(1));
    b.norm1_shift = Tensor<T>({d});
    b.norm2_scale = Tensor<T>::full({d}, T(1));
    b.norm2_shift = Tensor<T>({d});
    b.ffn.w1 = random_normal<T>({d, h}, proj_std, rng);
    b.ffn.b1 = Tensor<T>({h});
    b.ffn.w2 = random_normal<T>({h, d}, resid_std * std::sqrt(static_cast<double>(d) / static_cast<double>(h)), rng);
    b.ffn.b2 = Tensor<T>({d});
    m.blocks.push_back(std::move(b));
  }
  m.final_scale = Tensor<T>::full({d}, T(1));
  m.final_shift = Tensor<T>({d});
  m.head = random_normal<T>({d, config.vocab}, proj_std, rng);
  return m;
}

template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const FfnWeights<T>& w) {
  w.validate();
  return add_bias(matmul(silu(linear_forward(x, w.w1, w.b1)), w.w2), w.b2);
}

template <typename T>
Var ffn_graph(Graph<T>& g, Var x, const FfnWeights<T>& w) {
  Var act = g.silu(g.linear(x, g.weight(w.w1), g.weight(w.b1)));
  return g.add_bias(g.matmul(act, g.weight(w.w2)), g.weight(w.b2));
}

template <typename T>
BlockVars<T> block_graph(Graph<T>& g, Var x, const BlockWeights<T>& w, std::size_t batch, std::size_t seq,
                         std::size_t heads, std::size_t layer, const FfnHook<T>& hook) {
  const T eps = static_cast<T>(kNormEps);
  Var n1 = g.rms_norm(x, g.weight(w.norm1_scale), g.weight(w.norm1_shift), eps);
  Var q = g.matmul(n1, g.weight(w.wq));
  Var k = g.matmul(n1, g.weight(w.wk));
  Var v = g.matmul(n1, g.weight(w.wv));
  Var att = g.causal_attention(q, k, v, batch, seq, heads);
  BlockVars<T> out;
  out.hidden = g.add(x, g.matmul(att, g.weight(w.wo)));
  out.normed = g.rms_norm(out.hidden, g.weight(w.norm2_scale), g.weight(w.norm2_shift), eps);
  Var f = hook ? hook(g, layer, out.normed) : ffn_graph(g, out.normed, w.ffn);
  out.out = g.add(out.hidden, f);
  return out;
}

void check_batch(const TokenBatch& batch, const ModelConfig& config) {
  if (batch.seq > config.max_seq) {
    throw ContractError("sequence too long: " + std::to_string(batch.seq) + " > max_seq " +
                        std::to_string(config.max_seq));
  }
  if (batch.tokens.size() != batch.batch * batch.seq) {
    throw ContractError("token batch holds " + std::to_string(batch.tokens.size()) + " tokens, expected " +
                        std::to_string(batch.batch) + " x " + std::to_string(batch.seq));
  }
  for (int t : batch.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab) {
      throw ContractError("token " + std::to_string(t) + " out of range for vocabulary of " +
                          std::to_string(config.vocab));
    }
  }
}

template <typename T>
Var lm_graph(Graph<T>& g, const ModelWeights<T>& m, const TokenBatch& batch, const FfnHook<T>& hook) {
  check_batch(batch, m.config);
  std::vector<int> positions(batch.tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % batch.seq);
  Var x = g.add(g.gather_rows(g.weight(m.token_embedding), batch.tokens),
                g.gather_rows(g.weight(m.position_embedding), std::move(positions)));
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    x = block_graph(g, x, m.blocks[l], batch.batch, batch.seq, m.config.heads, l, hook).out;
  }
  Var final_norm = g.rms_norm(x, g.weight(m.final_scale), g.weight(m.final_shift), static_cast<T>(kNormEps));
  return g.matmul(final_norm, g.weight(m.head));
}

template <typename T>
BlockResult<T> block_forward(const Tensor<T>& x, const BlockWeights<T>& w, std::size_t heads, std::size_t max_seq) {
  if (x.rows() > max_seq) {
    throw ContractError("sequence too long: " + std::to_string(x.rows()) + " > max_seq " + std::to_string(max_seq));
  }
  Graph<T> g(nullptr, false);
  auto vars = block_graph(g, g.constant_ref(x), w, 1, x.rows(), heads, 0, FfnHook<T>{});
  return {g.value(vars.hidden), g.value(vars.out)};
}

template <typename T>
Tensor<T> lm_forward(std::span<const int> tokens, const ModelWeights<T>& m) {
  Graph<T> g(nullptr, false);
  TokenBatch batch{std::vector<int>(tokens.begin(), tokens.end()), 1, tokens.size()};
  return g.value(lm_graph(g, m, batch));
}

#define MOESPLIT_INSTANTIATE_TRANSFORMER(T)                                                                   \
  template struct FfnWeights<T>;                                                                              \
  template ModelWeights<T> init_model<T>(const ModelConfig&, std::uint64_t);                                  \
  template Tensor<T> ffn_forward<T>(const Tensor<T>&, const FfnWeights<T>&);                                  \
  template Var ffn_graph<T>(Graph<T>&, Var, const FfnWeights<T>&);                                            \
  template BlockVars<T> block_graph<T>(Graph<T>&, Var, const BlockWeights<T>&, std::size_t, std::size_t,      \
                                       std::size_t, std::size_t, const FfnHook<T>&);                          \
  template Var lm_graph<T>(Graph<T>&, const ModelWeights<T>&, const TokenBatch&, const FfnHook<T>&);          \
  template BlockResult<T> block_forward<T>(const Tensor<T>&, const BlockWeights<T>&, std::size_t, std::size_t); \
  template Tensor<T> lm_forward<T>(std::span<const int>, const ModelWeights<T>&);

MOESPLIT_INSTANTIATE_TRANSFORMER(float)
MOESPLIT_INSTANTIATE_TRANSFORMER(double)

}  // namespace moesplit
