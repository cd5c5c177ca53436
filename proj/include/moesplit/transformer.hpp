#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moesplit/graph.hpp"
#include "moesplit/tensor.hpp"

namespace moesplit {

/// Architecture of the decoder-only teacher. Defaults are the desk-scale model.
struct ModelConfig {
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t expansion = 4;
  std::size_t heads = 4;
  std::size_t vocab = 256;
  std::size_t max_seq = 64;

  std::size_t hidden() const noexcept { return d_model * expansion; }
  /// Throws ConfigError on an inconsistent architecture.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr double kNormEps = 1e-5;

/// Dense two-layer FFN: silu(x W1 + b1) W2 + b2.
template <typename T>
struct FfnWeights {
  Tensor<T> w1;  // [d_model, hidden]
  Tensor<T> b1;  // [hidden]
  Tensor<T> w2;  // [hidden, d_model]
  Tensor<T> b2;  // [d_model]

  std::size_t d_model() const noexcept { return w1.rank() == 2 ? w1.shape()[0] : 0; }
  std::size_t hidden() const noexcept { return w1.rank() == 2 ? w1.shape()[1] : 0; }
  /// Throws DimensionError unless the four tensors agree.
  void validate() const;

  template <typename U>
  FfnWeights<U> cast() const {
    return {w1.template cast<U>(), b1.template cast<U>(), w2.template cast<U>(), b2.template cast<U>()};
  }
};

template <typename T>
struct BlockWeights {
  Tensor<T> wq, wk, wv, wo;  // [d_model, d_model], heads split along columns
  Tensor<T> norm1_scale, norm1_shift;
  Tensor<T> norm2_scale, norm2_shift;
  FfnWeights<T> ffn;
};

template <typename T>
struct ModelWeights {
  ModelConfig config;
  Tensor<T> token_embedding;     // [vocab, d_model]
  Tensor<T> position_embedding;  // [max_seq, d_model]
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> final_scale, final_shift;
  Tensor<T> head;  // [d_model, vocab]

  template <typename U>
  ModelWeights<U> cast() const;
};

/// Visits every tensor with its checkpoint name, in a fixed order.
template <typename T, typename Fn>
void for_each_tensor(ModelWeights<T>& m, Fn&& fn) {
  fn("tok_emb", m.token_embedding);
  fn("pos_emb", m.position_embedding);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    auto& b = m.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    fn(p + "wq", b.wq);
    fn(p + "wk", b.wk);
    fn(p + "wv", b.wv);
    fn(p + "wo", b.wo);
    fn(p + "norm1_scale", b.norm1_scale);
    fn(p + "norm1_shift", b.norm1_shift);
    fn(p + "norm2_scale", b.norm2_scale);
    fn(p + "norm2_shift", b.norm2_shift);
    fn(p + "ffn.w1", b.ffn.w1);
    fn(p + "ffn.b1", b.ffn.b1);
    fn(p + "ffn.w2", b.ffn.w2);
    fn(p + "ffn.b2", b.ffn.b2);
  }
  fn("final_scale", m.final_scale);
  fn("final_shift", m.final_shift);
  fn("head", m.head);
}

template <typename T, typename Fn>
void for_each_tensor(const ModelWeights<T>& m, Fn&& fn) {
  for_each_tensor(const_cast<ModelWeights<T>&>(m),
                  [&](const std::string& name, Tensor<T>& t) { fn(name, static_cast<const Tensor<T>&>(t)); });
}

template <typename T>
template <typename U>
ModelWeights<U> ModelWeights<T>::cast() const {
  ModelWeights<U> out;
  out.config = config;
  out.blocks.resize(blocks.size());
  std::vector<const Tensor<T>*> src;
  for_each_tensor(*this, [&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  for_each_tensor(out, [&](const std::string&, Tensor<U>& t) { t = src[i++]->template cast<U>(); });
  return out;
}

template <typename T>
ModelWeights<T> init_model(const ModelConfig& config, std::uint64_t seed);

/// Tokens of `batch` sequences of length `seq`, row-major.
struct TokenBatch {
  std::vector<int> tokens;
  std::size_t batch = 0;
  std::size_t seq = 0;
};

/// Replaces the dense FFN of a block: receives the normalized post-attention
/// hidden state [rows, d_model] and returns the FFN output.
template <typename T>
using FfnHook = std::function<Var(Graph<T>&, std::size_t layer, Var normed)>;

template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const FfnWeights<T>& w);

template <typename T>
Var ffn_graph(Graph<T>& g, Var x, const FfnWeights<T>& w);

template <typename T>
struct BlockVars {
  Var hidden;  // x + MHA(norm1(x)): the state both teacher and student FFNs see
  Var normed;  // norm2(hidden), the FFN input
  Var out;     // hidden + FFN(normed)
};

template <typename T>
BlockVars<T> block_graph(Graph<T>& g, Var x, const BlockWeights<T>& w, std::size_t batch, std::size_t seq,
                         std::size_t heads, std::size_t layer, const FfnHook<T>& hook);

/// Logits [batch*seq, vocab]. An empty hook uses each block's dense FFN.
template <typename T>
Var lm_graph(Graph<T>& g, const ModelWeights<T>& m, const TokenBatch& batch, const FfnHook<T>& hook = {});

template <typename T>
struct BlockResult {
  Tensor<T> hidden;
  Tensor<T> out;
};

/// One block on a single sequence x [n, d_model].
template <typename T>
BlockResult<T> block_forward(const Tensor<T>& x, const BlockWeights<T>& w, std::size_t heads,
                             std::size_t max_seq);

/// Logits [n, vocab] for one sequence.
template <typename T>
Tensor<T> lm_forward(std::span<const int> tokens, const ModelWeights<T>& m);

/// Throws ContractError on out-of-range tokens or an over-long batch.
void check_batch(const TokenBatch& batch, const ModelConfig& config);

}  // namespace moesplit
