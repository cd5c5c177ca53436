#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "moesplit/checkpoint.hpp"
#include "moesplit/corpus.hpp"
#include "moesplit/factorization.hpp"
#include "moesplit/graph.hpp"
#include "moesplit/losses.hpp"
#include "moesplit/moe.hpp"
#include "moesplit/transformer.hpp"

namespace moesplit {

/// Adam with L2 weight decay folded into the gradient.
struct AdamConfig {
  double lr = 4e-5;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double grad_clip = 1.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  /// Clips, then updates every parameter in `params`. Returns the gradient
  /// norm before clipping.
  double step(ParamSet<float>& params);
  std::size_t steps() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

enum class RouterTraining { kRouter, kRandom };

struct TrainConfig {
  double alpha = 1.0;
  AdamConfig adam;
  std::size_t warmup_steps = 0;
  std::size_t train_steps = 0;
  std::uint64_t seed = 0;
  double lb_weight = 0.0;
  /// Weight of the per-layer student/teacher FFN output MSE term (phase 2).
  double feature_mse_weight = 0.0;
  /// When false, the router input is detached during phase 2 so L_PA cannot
  /// reach the experts through earlier layers.
  bool pa_grad_to_experts = true;
  RouterTraining routing = RouterTraining::kRouter;
  std::size_t batch_size = 8;
  /// 0 writes only the final checkpoint.
  std::size_t checkpoint_every = 0;
  /// Warmup route snapshots on the probe batch every this many steps.
  std::size_t snapshot_every = 0;
  std::size_t probe_windows = 4;
  double router_std = 0.02;
  std::uint64_t eval_seed = 7;

  /// Parses the "train" section. The loss weights, optimizer settings, step
  /// count and seed are required and reported by dotted path; warmup_steps
  /// defaults to 10% of train_steps.
  static TrainConfig from_json(const Json& j, const std::string& path = "train");
  Json to_json() const;
  std::size_t snapshot_interval() const noexcept;
};

struct DataConfig {
  /// Empty means a synthetic corpus of `synthetic_bytes`.
  std::string corpus;
  std::size_t synthetic_bytes = 262144;
  std::uint64_t corpus_seed = 0;
  std::size_t seq_len = 64;
  double heldout_fraction = 0.1;

  static DataConfig from_json(const Json& j, const std::string& path = "data");
  Json to_json() const;
};

struct PretrainConfig {
  std::size_t steps = 600;
  std::size_t batch_size = 8;
  AdamConfig adam{3e-3, 0.9, 0.95, 1e-8, 1e-5, 1.0};
  std::uint64_t seed = 0;

  static PretrainConfig from_json(const Json& j, const std::string& path = "pretrain");
  Json to_json() const;
};

/// The single JSON config shared by every command.
struct RunConfig {
  ModelConfig model;
  MoeConfig moe;
  PermutationStrategy strategy = PermutationStrategy::kContiguous;
  DataConfig data;
  PretrainConfig pretrain;
  std::optional<TrainConfig> train;

  static RunConfig from_json(const Json& j);
  static RunConfig load(const std::filesystem::path& path);
  Json to_json() const;
};

/// Train/held-out windows for a data config.
struct Dataset {
  std::vector<Window> train;
  std::vector<Window> heldout;
};
Dataset load_dataset(const DataConfig& data);

struct LossBreakdown {
  std::size_t step = 0;
  std::string phase;
  double l_ft = 0;
  double l_pa = 0;
  double l_lb = 0;
  double l_feat = 0;
  double l_overall = 0;
  double grad_norm = 0;
  double lr = 0;

  Json to_json(bool with_feat = false) const;
};

/// Where run_training writes. An empty `dir` keeps everything in memory.
struct TrainIo {
  std::filesystem::path dir;
  std::ostream* progress = nullptr;
};

struct TrainResult {
  StudentWeights<float> student;
  std::vector<LossBreakdown> log;
  /// Warmup snapshots of the probe batch, one record per layer per snapshot.
  std::vector<RoutingRecord> snapshots;
};

/// Per-layer silu(x W1 + b1) of the teacher on `batch`, for coactivation grouping.
std::vector<Tensor<double>> calibration_activations(const ModelWeights<float>& teacher, const TokenBatch& batch);

/// Teacher split with the configured strategy plus fresh routers.
StudentWeights<float> build_student(const ModelWeights<float>& teacher, const MoeConfig& moe,
                                    PermutationStrategy strategy, std::uint64_t seed, double router_std,
                                    const TokenBatch* calib_batch = nullptr);

/// Loss terms of one student pass. `pa` and `lb` are invalid under random
/// routing; `feat` is only built when requested.
template <typename T>
struct StudentLosses {
  Var ft;
  Var pa;
  Var lb;
  Var feat;
  std::vector<LayerTrace<T>> traces;
  std::vector<PseudoAllocation> allocations;
};

/// Runs the student on `batch` and records L_FT, L_PA (against pseudo
/// allocations from the teacher FFN on the student's own FFN inputs), L_lb and
/// optionally the mean per-layer FFN output MSE against the teacher.
template <typename T>
StudentLosses<T> student_losses(Graph<T>& g, const ModelWeights<T>& teacher, const StudentWeights<T>& s,
                                const LabeledBatch& batch, const StudentPassOptions<T>& options,
                                bool with_feature_mse = false);

/// Phase 1 (warmup): routers only, loss alpha*L_PA + lb_weight*L_lb.
/// Phase 2: experts only, loss L_FT + alpha*L_PA (+ feature MSE if enabled).
/// With random routing there is no router: phase 2 runs for
/// warmup_steps + train_steps with L_FT on uniformly random expert subsets.
/// Writes metrics.jsonl, routes.csv, periodic and final checkpoints under io.dir.
/// Throws DivergenceError after saving last_good.json if a loss turns non-finite.
TrainResult run_training(const ModelWeights<float>& teacher, StudentWeights<float> student, const TrainConfig& cfg,
                         const Dataset& data, const TrainIo& io = {});

struct PretrainResult {
  ModelWeights<float> model;
  std::vector<LossBreakdown> log;
};

/// Dense next-token training of the teacher from `init_model(seed)`.
PretrainResult pretrain_teacher(const ModelConfig& model, const PretrainConfig& cfg, const Dataset& data,
                                std::size_t seq_len, const TrainIo& io = {});

/// Fixed probe batch: the first `count` training windows in corpus order.
TokenBatch probe_batch(const Dataset& data, std::size_t count);

}  // namespace moesplit
