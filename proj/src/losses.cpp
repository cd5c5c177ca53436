#include "moesplit/losses.hpp"

#include <algorithm>
#include <cmath>

#include "moesplit/errors.hpp"
#include "moesplit/ops.hpp"

namespace moesplit {

Tensor<double> selection_mask(const Selection& selected, std::size_t experts) {
  Tensor<double> m({selected.size(), experts});
  for (std::size_t t = 0; t < selected.size(); ++t) {
    for (auto e : selected[t]) {
      if (e >= experts) throw ContractError("selected expert " + std::to_string(e) + " out of range");
      m.at(t, e) = 1.0;
    }
  }
  return m;
}

PseudoAllocation allocation_from_distances(Tensor<double> distances, std::size_t k, std::size_t groups) {
  const std::size_t n = distances.cols();
  if (groups == 0 || n % groups != 0 || k % groups != 0 || k < 1 || k > n) {
    throw ContractError("pseudo allocation: K=" + std::to_string(k) + " invalid for " + std::to_string(n) +
                        " experts in " + std::to_string(groups) + " groups");
  }
  const std::size_t gs = n / groups, gk = k / groups;
  PseudoAllocation pa;
  pa.indices.resize(distances.rows());
  for (std::size_t t = 0; t < distances.rows(); ++t) {
    auto row = std::span<const double>(distances.row(t));
    for (std::size_t grp = 0; grp < groups; ++grp)
      for (auto i : topk_smallest(row.subspan(grp * gs, gs), gk))
        pa.indices[t].push_back(static_cast<std::uint32_t>(grp * gs + i));
  }
  pa.mask = selection_mask(pa.indices, n);
  pa.distances = std::move(distances);
  return pa;
}

template <typename T>
Tensor<double> expert_distances(const Tensor<T>& teacher_out, const Tensor<T>& expert_outs) {
  if (expert_outs.rank() != 3 || teacher_out.rank() != 2 || expert_outs.shape()[0] != teacher_out.rows() ||
      expert_outs.shape()[2] != teacher_out.cols()) {
    throw DimensionError("expert distances: teacher " + shape_str(teacher_out.shape()) + " vs experts " +
                         shape_str(expert_outs.shape()));
  }
  const std::size_t m = teacher_out.rows(), n = expert_outs.shape()[1], d = teacher_out.cols();
  Tensor<double> dist({m, n});
  const auto e = expert_outs.data();
  for (std::size_t t = 0; t < m; ++t)
    for (std::size_t k = 0; k < n; ++k) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(e[(t * n + k) * d + j]) - static_cast<double>(teacher_out.at(t, j));
        s += diff * diff;
      }
      dist.at(t, k) = s / static_cast<double>(d);
    }
  return dist;
}

template <typename T>
PseudoAllocation pseudo_allocation(const Tensor<T>& teacher_out, const Tensor<T>& expert_outs, std::size_t k,
                                   std::size_t groups) {
  if (expert_outs.rank() == 3 && k > expert_outs.shape()[1]) {
    throw ContractError("pseudo allocation: K=" + std::to_string(k) + " exceeds " +
                        std::to_string(expert_outs.shape()[1]) + " experts");
  }
  return allocation_from_distances(expert_distances(teacher_out, expert_outs), k, groups);
}

double pa_loss(std::span<const Tensor<double>> masks, std::span<const Tensor<double>> probs, std::size_t experts) {
  if (masks.size() != probs.size() || masks.empty()) throw ContractError("pa_loss: need one mask per layer");
  double total = 0;
  for (std::size_t l = 0; l < masks.size(); ++l) {
    if (masks[l].shape() != probs[l].shape()) {
      throw DimensionError("pa_loss: mask " + shape_str(masks[l].shape()) + " vs probs " + shape_str(probs[l].shape()));
    }
    double s = 0;
    for (std::size_t i = 0; i < masks[l].size(); ++i)
      if (masks[l][i] != 0) s += masks[l][i] * std::log(std::max(probs[l][i], kLogFloor));
    total += s / static_cast<double>(masks[l].rows());
  }
  return -total / (static_cast<double>(experts) * static_cast<double>(masks.size()));
}

double pa_loss(const Tensor<double>& mask, const Tensor<double>& probs, std::size_t experts) {
  return pa_loss(std::span<const Tensor<double>>(&mask, 1), std::span<const Tensor<double>>(&probs, 1), experts);
}

template <typename T>
double ft_loss(const Tensor<T>& logits, std::span<const int> labels) {
  return cross_entropy(logits, labels);
}

double balance_loss(std::span<const Tensor<double>> probs, std::span<const Selection> selected, std::size_t k,
                    std::size_t experts) {
  if (probs.size() != selected.size() || probs.empty()) throw ContractError("balance_loss: need one selection per layer");
  double total = 0;
  for (std::size_t l = 0; l < probs.size(); ++l) {
    if (selected[l].size() != probs[l].rows()) throw DimensionError("balance_loss: selection count vs probs rows");
    double s = 0;
    for (std::size_t t = 0; t < selected[l].size(); ++t)
      for (auto e : selected[l][t]) s += probs[l].at(t, e);
    total += s / static_cast<double>(probs[l].rows());
  }
  return static_cast<double>(k) / static_cast<double>(experts) * total / static_cast<double>(probs.size());
}

double balance_loss(const Tensor<double>& probs, const Selection& selected, std::size_t k, std::size_t experts) {
  return balance_loss(std::span<const Tensor<double>>(&probs, 1), std::span<const Selection>(&selected, 1), k,
                      experts);
}

template <typename T>
Var pa_loss_graph(Graph<T>& g, const std::vector<Var>& probs, const std::vector<Tensor<double>>& masks,
                  std::size_t experts) {
  if (probs.size() != masks.size() || probs.empty()) throw ContractError("pa_loss: need one mask per layer");
  Var total;
  for (std::size_t l = 0; l < probs.size(); ++l) {
    const double rows = static_cast<double>(g.value(probs[l]).rows());
    Var term = g.sum_all(g.mul_const(g.log_clamped(probs[l], static_cast<T>(kLogFloor)), masks[l].cast<T>()));
    term = g.scale(term, static_cast<T>(-1.0 / (rows * static_cast<double>(experts) * static_cast<double>(probs.size()))));
    total = total.valid() ? g.add(total, term) : term;
  }
  return total;
}

template <typename T>
Var balance_loss_graph(Graph<T>& g, const std::vector<Var>& probs, const std::vector<Selection>& selected,
                       std::size_t k, std::size_t experts) {
  if (probs.size() != selected.size() || probs.empty()) throw ContractError("balance_loss: need one selection per layer");
  Var total;
  for (std::size_t l = 0; l < probs.size(); ++l) {
    const double rows = static_cast<double>(g.value(probs[l]).rows());
    Var term = g.sum_all(g.mul_const(probs[l], selection_mask(selected[l], experts).cast<T>()));
    term = g.scale(term, static_cast<T>(static_cast<double>(k) /
                                        (static_cast<double>(experts) * rows * static_cast<double>(probs.size()))));
    total = total.valid() ? g.add(total, term) : term;
  }
  return total;
}

#define MOESPLIT_INSTANTIATE_LOSSES(T)                                                                        \
  template Tensor<double> expert_distances<T>(const Tensor<T>&, const Tensor<T>&);                            \
  template PseudoAllocation pseudo_allocation<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template double ft_loss<T>(const Tensor<T>&, std::span<const int>);                                         \
  template Var pa_loss_graph<T>(Graph<T>&, const std::vector<Var>&, const std::vector<Tensor<double>>&,       \
                                std::size_t);                                                                 \
  template Var balance_loss_graph<T>(Graph<T>&, const std::vector<Var>&, const std::vector<Selection>&,       \
                                     std::size_t, std::size_t);

MOESPLIT_INSTANTIATE_LOSSES(float)
MOESPLIT_INSTANTIATE_LOSSES(double)

}  // namespace moesplit
