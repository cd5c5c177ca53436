#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "moesplit/checkpoint.hpp"
#include "moesplit/corpus.hpp"
#include "moesplit/moe.hpp"
#include "moesplit/transformer.hpp"

namespace moesplit {

// ---------------------------------------------------------------------------
// FLOPs

/// Analytic inference cost. One multiply-accumulate counts as 2 FLOPs.
/// Embedding lookups, norms, activations and the LM head are not counted.
struct FlopsReport {
  ModelConfig model;
  MoeConfig moe;
  std::size_t seq_len = 0;

  /// QKV and output projections 8*n*d^2 plus scores and value mixing 4*n^2*d
  /// (full n x n, causal masking not discounted), one layer, one sequence.
  double attention_per_layer = 0;
  /// 4*d*h per token per layer.
  double dense_ffn_per_token = 0;
  /// 2*d*N per token per layer.
  double router_per_token = 0;
  /// dense*(K/N) + router.
  double factorized_ffn_per_token = 0;
  /// Attention plus FFN over all layers for one sequence.
  double dense_total_per_seq = 0;
  double factorized_total_per_seq = 0;
  /// 1 - factorized/dense.
  double reduction_ffn = 0;
  double reduction_total = 0;

  Json to_json() const;
};

FlopsReport count_flops(const ModelConfig& model, const MoeConfig& moe, std::size_t seq_len);

// ---------------------------------------------------------------------------
// Routing statistics

struct SnapshotStats {
  std::size_t step = 0;
  /// usage[layer][expert]: selections over the probe tokens.
  std::vector<std::vector<std::size_t>> usage;
  /// Entropy (nats) of each layer's empirical usage distribution.
  std::vector<double> entropy;
  /// Mean of `entropy` over layers.
  double mean_entropy = 0;
};

struct RouteStats {
  std::size_t experts = 0;
  std::size_t layers = 0;
  std::size_t tokens = 0;
  std::vector<SnapshotStats> snapshots;
  /// churn[i]: fraction of (token, layer) pairs whose selected set differs
  /// between snapshots i and i+1.
  std::vector<double> churn;

  /// Trailing moving average of `churn` over at most `window` values.
  std::vector<double> smoothed_churn(std::size_t window) const;
  Json to_json(std::size_t window = 3) const;
};

/// Groups `records` into snapshots by step (records of one snapshot must be
/// contiguous, steps increasing). `experts` = 0 infers N from the probability
/// columns. Throws DimensionError when snapshots cover different layers or
/// token counts.
RouteStats route_stats(std::span<const RoutingRecord> records, std::size_t experts = 0);

/// Entropy in nats of a count histogram; 0 for an empty histogram.
double usage_entropy(std::span<const std::size_t> counts);

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  std::size_t windows = 0;
  std::size_t tokens = 0;
  /// Mean next-token cross-entropy (nats).
  double ce = 0;
  double perplexity = 0;
  /// Set by compare_to_teacher: exp(-(ce - ce_teacher)) and ce_teacher / ce.
  std::optional<double> maintenance;
  std::optional<double> ce_ratio;

  Json to_json() const;
};

/// Mean CE over `windows` in order, in batches of `batch_size`.
/// Throws IngestError for an empty stream.
EvalReport evaluate(const ModelWeights<float>& model, std::span<const Window> windows, std::size_t batch_size = 8);

/// Student evaluation with router selection, or uniformly random selection
/// drawn from `seed` when mode is kRandom.
EvalReport evaluate(const StudentWeights<float>& student, std::span<const Window> windows,
                    RoutingMode mode = RoutingMode::kRouter, std::uint64_t seed = 0, std::size_t batch_size = 8);

void compare_to_teacher(EvalReport& student, const EvalReport& teacher);

}  // namespace moesplit
