#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moesplit/checkpoint.hpp"
#include "moesplit/tensor.hpp"
#include "moesplit/transformer.hpp"

namespace moesplit {

enum class PermutationStrategy { kContiguous, kRandom, kCoactivation };

std::string to_string(PermutationStrategy s);
/// Accepts "contiguous", "random", "coactivation"; throws ConfigError otherwise.
PermutationStrategy parse_strategy(const std::string& name);

/// Neuron reordering: new slot q takes old neuron delta[q].
struct PermutationMap {
  std::vector<std::size_t> delta;
  PermutationStrategy strategy = PermutationStrategy::kContiguous;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return delta.size(); }
  bool is_bijection() const;

  Json to_json() const;
  static PermutationMap from_json(const Json& j);
};

/// Builds delta for `hidden` neurons split into `experts` equal groups.
///  - contiguous: identity.
///  - random: seeded Fisher-Yates shuffle.
///  - coactivation: greedy balanced grouping on the correlation of the
///    calibration activations `calib` [samples, hidden]; each group holds
///    hidden/experts neurons and occupies a contiguous block of new slots.
PermutationMap build_permutation(PermutationStrategy strategy, std::size_t hidden, std::size_t experts,
                                 std::uint64_t seed = 0, const Tensor<double>* calib = nullptr);

/// Dense 0/1 matrix with (P)[p][q] = 1 iff delta[q] == p.
Tensor<double> permutation_matrix(const PermutationMap& pm);

template <typename T>
struct Expert {
  Tensor<T> w1;  // [d_model, width]
  Tensor<T> b1;  // [width]
  Tensor<T> w2;  // [width, d_model]
};

/// N equal-width sub-FFNs cut from one dense FFN. The output bias b2 is
/// shared and stored once.
template <typename T>
struct ExpertBank {
  std::vector<Expert<T>> experts;
  Tensor<T> b2;
  PermutationMap perm;

  std::size_t count() const noexcept { return experts.size(); }
  std::size_t width() const noexcept { return experts.empty() ? 0 : experts.front().b1.size(); }
  std::size_t d_model() const noexcept { return b2.size(); }

  template <typename U>
  ExpertBank<U> cast() const {
    ExpertBank<U> out;
    out.b2 = b2.template cast<U>();
    out.perm = perm;
    for (const auto& e : experts)
      out.experts.push_back({e.w1.template cast<U>(), e.b1.template cast<U>(), e.w2.template cast<U>()});
    return out;
  }
};

/// Column-permutes W1/b1 and row-permutes W2 by delta, then cuts N
/// contiguous blocks. Throws ConfigError unless N divides the hidden width.
template <typename T>
ExpertBank<T> split_ffn(const FfnWeights<T>& w, const PermutationMap& pm, std::size_t experts);

/// Inverse of split_ffn: concatenates the blocks and undoes the permutation.
template <typename T>
FfnWeights<T> merge_experts(const ExpertBank<T>& bank);

/// sum_i silu(x W1^i + b1^i) W2^i + b2 over every expert.
template <typename T>
Tensor<T> expert_sum(const Tensor<T>& x, const ExpertBank<T>& bank);

struct Deviation {
  double max_abs = 0;
  double max_rel = 0;
};

struct Tolerance {
  double f64 = 1e-10;
  double f32 = 1e-5;
};

/// Result of comparing the all-expert sum with the dense FFN.
struct Certificate {
  std::string strategy;
  std::uint64_t seed = 0;
  std::size_t experts = 0;
  std::size_t samples = 0;
  Deviation f64;
  Deviation f32;
  Tolerance tol;
  bool pass = false;

  Json to_json() const;
};

/// Runs `samples` standard-normal inputs through both paths in f64 and f32.
/// Relative deviation of a sample is max|S(x) - F(x)| / max|F(x)|. Passes when
/// each precision is within its tolerance.
Certificate verify_equivalence(const FfnWeights<double>& w, const ExpertBank<double>& bank, std::size_t samples,
                               Tolerance tol = {}, std::uint64_t seed = 0);

}  // namespace moesplit
