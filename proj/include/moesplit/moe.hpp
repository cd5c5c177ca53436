#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include "moesplit/checkpoint.hpp"
#include "moesplit/factorization.hpp"
#include "moesplit/graph.hpp"
#include "moesplit/transformer.hpp"

namespace moesplit {

/// N experts per layer, K of them active per token. With more than one
/// router per layer the experts are cut into disjoint contiguous groups, each
/// with its own router picking K/routers experts from N/routers.
struct MoeConfig {
  std::size_t experts = 4;
  std::size_t active = 2;
  std::size_t routers_per_layer = 1;

  void validate() const;
  std::size_t group_size() const noexcept { return experts / routers_per_layer; }
  std::size_t active_per_group() const noexcept { return active / routers_per_layer; }
  friend bool operator==(const MoeConfig&, const MoeConfig&) = default;
};

/// Gating weights stored as [d_model, N] so logits are x W3 + b3. Several
/// routers per layer occupy disjoint column blocks of the same matrix.
template <typename T>
struct RouterParams {
  Tensor<T> w3;
  Tensor<T> b3;

  std::size_t experts() const noexcept { return b3.size(); }
};

template <typename T>
RouterParams<T> init_router(std::size_t d_model, std::size_t experts, double stddev, std::mt19937_64& rng);

/// Per-token expert index sets, each sorted ascending.
using Selection = std::vector<std::vector<std::uint32_t>>;

struct RoutingRecord {
  std::size_t step = 0;
  std::size_t layer = 0;
  /// [tokens, N]; empty when routing was random.
  Tensor<double> probs;
  Selection selected;
};

/// Indices of the `k` largest entries, ties to the lower index, returned
/// ascending.
template <typename T>
std::vector<std::uint32_t> topk_largest(std::span<const T> row, std::size_t k);

/// Indices of the `k` smallest entries, ties to the lower index, returned
/// ascending.
template <typename T>
std::vector<std::uint32_t> topk_smallest(std::span<const T> row, std::size_t k);

/// softmax(x W3 + b3), grouped when there are several routers.
template <typename T>
Tensor<T> router_forward(const Tensor<T>& x, const RouterParams<T>& rp, std::size_t groups = 1);

/// K largest probabilities per row (K/groups within each group).
template <typename T>
Selection topk_select(const Tensor<T>& probs, std::size_t k, std::size_t groups = 1);

/// Counts expert blocks evaluated, per token.
struct ExpertCounter {
  std::size_t blocks = 0;
  std::size_t tokens = 0;
};

/// y_t = sum_{i in selected_t} silu(x_t W1^i + b1^i) W2^i + b2, unweighted,
/// accumulated in ascending expert order. Only the selected blocks are
/// evaluated.
template <typename T>
Tensor<T> experts_forward(const Tensor<T>& x, const ExpertBank<T>& bank, const Selection& selected,
                          ExpertCounter* counter = nullptr);

template <typename T>
struct MoeOutput {
  Tensor<T> y;
  RoutingRecord record;
};

template <typename T>
MoeOutput<T> moe_ffn_forward(const Tensor<T>& x, const ExpertBank<T>& bank, const RouterParams<T>& rp,
                             const MoeConfig& cfg, std::size_t layer = 0, std::size_t step = 0,
                             ExpertCounter* counter = nullptr);

/// Uniformly random K-subsets per token (K/groups per group).
Selection random_select(std::size_t tokens, const MoeConfig& cfg, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Factorized student model

template <typename T>
struct MoeLayer {
  ExpertBank<T> bank;
  RouterParams<T> router;
};

/// The teacher backbone (attention, norms, embeddings and the original dense
/// FFNs kept as frozen references) plus one expert bank and router per layer.
template <typename T>
struct StudentWeights {
  ModelWeights<T> backbone;
  MoeConfig moe;
  std::vector<MoeLayer<T>> layers;

  template <typename U>
  StudentWeights<U> cast() const {
    StudentWeights<U> out;
    out.backbone = backbone.template cast<U>();
    out.moe = moe;
    for (const auto& l : layers)
      out.layers.push_back({l.bank.template cast<U>(), {l.router.w3.template cast<U>(), l.router.b3.template cast<U>()}});
    return out;
  }
};

template <typename T, typename Fn>
void for_each_moe_tensor(StudentWeights<T>& s, Fn&& fn) {
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    auto& layer = s.layers[l];
    const std::string p = "moe." + std::to_string(l) + ".";
    for (std::size_t e = 0; e < layer.bank.experts.size(); ++e) {
      const std::string q = p + "expert." + std::to_string(e) + ".";
      fn(q + "w1", layer.bank.experts[e].w1, false);
      fn(q + "b1", layer.bank.experts[e].b1, false);
      fn(q + "w2", layer.bank.experts[e].w2, false);
    }
    fn(p + "b2", layer.bank.b2, false);
    fn(p + "router.w3", layer.router.w3, true);
    fn(p + "router.b3", layer.router.b3, true);
  }
}

/// Splits every layer's FFN with `perms[layer]` and attaches a random router.
template <typename T>
StudentWeights<T> make_student(const ModelWeights<T>& teacher, const MoeConfig& cfg,
                               const std::vector<PermutationMap>& perms, std::uint64_t router_seed,
                               double router_std = 0.02);

enum class RoutingMode { kRouter, kRandom };

/// What one MoE layer computed during a recorded student pass.
template <typename T>
struct LayerTrace {
  Var normed;                   // FFN input
  Var probs;                    // router output (invalid in random mode)
  std::vector<Var> activations; // silu(x W1^i + b1^i) for every expert
  Var output;                   // MoE output including b2
  Selection selected;
};

template <typename T>
struct StudentPassOptions {
  RoutingMode mode = RoutingMode::kRouter;
  std::mt19937_64* rng = nullptr;  // required for kRandom
  /// Cut the gradient path from the router back into the hidden state.
  bool detach_router_input = false;
  std::vector<LayerTrace<T>>* traces = nullptr;
};

/// Logits of the student. Every expert is evaluated on every token (the
/// training losses need all of them); the output only sums selected blocks.
template <typename T>
Var student_graph(Graph<T>& g, const StudentWeights<T>& s, const TokenBatch& batch,
                  const StudentPassOptions<T>& options = {});

/// Logits [n, vocab] for a single sequence with router selection.
template <typename T>
Tensor<T> student_forward(std::span<const int> tokens, const StudentWeights<T>& s);

void save_student(const std::filesystem::path& manifest, const StudentWeights<float>& s, const Json& extra_meta = {});
StudentWeights<float> load_student(const std::filesystem::path& manifest);

Json moe_config_to_json(const MoeConfig& c);
MoeConfig moe_config_from_json(const Json& j);

// ---------------------------------------------------------------------------
// Route traces

/// CSV with header `step,layer,position,selected,probs`; index and probability
/// lists are ';'-separated, probabilities printed with 9 significant digits.
void write_route_trace_csv(std::ostream& out, std::span<const RoutingRecord> records, bool header = true);
std::vector<RoutingRecord> read_route_trace_csv(std::istream& in);
/// One JSON object per token with the same fields as the CSV.
void write_route_trace_jsonl(std::ostream& out, std::span<const RoutingRecord> records);

}  // namespace moesplit
