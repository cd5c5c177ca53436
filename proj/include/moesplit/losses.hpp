#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "moesplit/graph.hpp"
#include "moesplit/moe.hpp"
#include "moesplit/tensor.hpp"

namespace moesplit {

inline constexpr double kLogFloor = 1e-12;

/// Pseudo router targets: distances D[t, k] between each expert's output and
/// the teacher FFN output, and a 0/1 mask with ones at the K smallest
/// distances of each token (K/groups per router group).
struct PseudoAllocation {
  Tensor<double> distances;  // [tokens, N]
  Tensor<double> mask;       // [tokens, N]
  Selection indices;
};

/// mask from precomputed distances; ties go to the lower index.
PseudoAllocation allocation_from_distances(Tensor<double> distances, std::size_t k, std::size_t groups = 1);

/// D[t, k] = mean_j (expert_outs[t, k, j] - teacher_out[t, j])^2.
/// `expert_outs` is [tokens, N, d_model], `teacher_out` is [tokens, d_model].
template <typename T>
Tensor<double> expert_distances(const Tensor<T>& teacher_out, const Tensor<T>& expert_outs);

template <typename T>
PseudoAllocation pseudo_allocation(const Tensor<T>& teacher_out, const Tensor<T>& expert_outs, std::size_t k,
                                   std::size_t groups = 1);

/// -(1/N) * mean over layers of mean over tokens of sum_k A[t,k] log R[t,k],
/// with log clamped at kLogFloor.
double pa_loss(std::span<const Tensor<double>> masks, std::span<const Tensor<double>> probs, std::size_t experts);
double pa_loss(const Tensor<double>& mask, const Tensor<double>& probs, std::size_t experts);

/// Mean next-token cross-entropy.
template <typename T>
double ft_loss(const Tensor<T>& logits, std::span<const int> labels);

/// (K/N) * mean over layers of mean over tokens of sum_{i selected} R_i.
double balance_loss(std::span<const Tensor<double>> probs, std::span<const Selection> selected, std::size_t k,
                    std::size_t experts);
double balance_loss(const Tensor<double>& probs, const Selection& selected, std::size_t k, std::size_t experts);

inline double overall_loss(double l_ft, double l_pa, double alpha) { return l_ft + alpha * l_pa; }

/// Recorded counterparts of pa_loss and balance_loss, one probability node per
/// layer.
template <typename T>
Var pa_loss_graph(Graph<T>& g, const std::vector<Var>& probs, const std::vector<Tensor<double>>& masks,
                  std::size_t experts);

template <typename T>
Var balance_loss_graph(Graph<T>& g, const std::vector<Var>& probs, const std::vector<Selection>& selected,
                       std::size_t k, std::size_t experts);

/// 0/1 [tokens, N] matrix of a selection.
Tensor<double> selection_mask(const Selection& selected, std::size_t experts);

}  // namespace moesplit
