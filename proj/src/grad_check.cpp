#include "moesplit/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace moesplit {

namespace {

struct Probe {
  double loss;
  std::uint64_t decisions;
};

Probe evaluate(const LossFn& fn) {
  Graph<double> g(nullptr, false);
  Var loss = fn(g);
  const auto& v = g.value(loss);
  if (v.size() != 1) throw ContractError("grad_check: loss must be scalar, got " + shape_str(v.shape()));
  return {v[0], g.decision_hash()};
}

}  // namespace

GradCheckReport grad_check(const LossFn& loss_fn, ParamSet<double>& params, const GradCheckOptions& options) {
  params.zero_grad();
  std::uint64_t base_decisions = 0;
  {
    Graph<double> g(&params, true);
    Var loss = loss_fn(g);
    g.backward(loss);
    base_decisions = g.decision_hash();
  }

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (auto& entry : params.entries()) {
    auto values = entry.value->data();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_per_tensor != 0 && coords.size() > options.max_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = values[i];
      values[i] = saved + options.eps;
      const Probe plus = evaluate(loss_fn);
      values[i] = saved - options.eps;
      const Probe minus = evaluate(loss_fn);
      values[i] = saved;
      if (plus.decisions != base_decisions || minus.decisions != base_decisions) {
        ++report.skipped;
        continue;
      }
      const double fd = (plus.loss - minus.loss) / (2 * options.eps);
      const double an = entry.grad[i];
      const double denom = std::max({std::abs(an), std::abs(fd), options.abs_floor});
      const double rel = std::abs(an - fd) / denom;
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = entry.name + "[" + std::to_string(i) + "] analytic=" + std::to_string(an) +
                       " numeric=" + std::to_string(fd);
      }
    }
  }
  return report;
}

}  // namespace moesplit
