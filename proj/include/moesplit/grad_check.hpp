#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

#include "moesplit/graph.hpp"

namespace moesplit {

using LossFn = std::function<Var(Graph<double>&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  /// Relative error is |a - f| / max(|a|, |f|, abs_floor).
  double abs_floor = 1e-6;
  /// Coordinates checked per tensor; 0 checks every element.
  std::size_t max_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_err = 0;
  std::size_t checked = 0;
  /// Coordinates whose +/- eps probes changed a discrete decision.
  std::size_t skipped = 0;
  std::string worst;
};

/// Compares recorded-graph gradients of `loss_fn` against central finite
/// differences for every registered parameter. Probes that change the graph's
/// decision hash (a TopK flip) are excluded.
GradCheckReport grad_check(const LossFn& loss_fn, ParamSet<double>& params,
                           const GradCheckOptions& options = {});

}  // namespace moesplit
