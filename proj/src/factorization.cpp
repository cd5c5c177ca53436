#include "moesplit/factorization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "moesplit/errors.hpp"
#include "moesplit/ops.hpp"

namespace moesplit {

std::string to_string(PermutationStrategy s) {
  switch (s) {
    case PermutationStrategy::kContiguous:
      return "contiguous";
    case PermutationStrategy::kRandom:
      return "random";
    case PermutationStrategy::kCoactivation:
      return "coactivation";
  }
  return "unknown";
}

PermutationStrategy parse_strategy(const std::string& name) {
  if (name == "contiguous") return PermutationStrategy::kContiguous;
  if (name == "random") return PermutationStrategy::kRandom;
  if (name == "coactivation") return PermutationStrategy::kCoactivation;
  throw ConfigError("unknown permutation strategy '" + name + "' (expected contiguous, random or coactivation)");
}

bool PermutationMap::is_bijection() const {
  std::vector<bool> seen(delta.size(), false);
  for (std::size_t p : delta) {
    if (p >= delta.size() || seen[p]) return false;
    seen[p] = true;
  }
  return true;
}

Json PermutationMap::to_json() const {
  return {{"strategy", to_string(strategy)}, {"seed", seed}, {"delta", delta}};
}

PermutationMap PermutationMap::from_json(const Json& j) {
  PermutationMap pm;
  pm.strategy = parse_strategy(j.at("strategy").get<std::string>());
  pm.seed = j.at("seed").get<std::uint64_t>();
  pm.delta = j.at("delta").get<std::vector<std::size_t>>();
  if (!pm.is_bijection()) throw CheckpointError("stored permutation is not a bijection");
  return pm;
}

namespace {

// Pearson correlation of the calibration columns. Constant columns correlate 0.
std::vector<double> column_correlation(const Tensor<double>& calib) {
  const std::size_t s = calib.rows(), h = calib.cols();
  std::vector<double> mean(h, 0.0), norm(h, 0.0);
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t j = 0; j < h; ++j) mean[j] += calib.at(r, j);
  for (auto& m : mean) m /= static_cast<double>(s);
  std::vector<double> centered(s * h);
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t j = 0; j < h; ++j) {
      const double c = calib.at(r, j) - mean[j];
      centered[r * h + j] = c;
      norm[j] += c * c;
    }
  for (auto& n : norm) n = std::sqrt(n);
  std::vector<double> corr(h * h, 0.0);
  for (std::size_t a = 0; a < h; ++a) {
    for (std::size_t b = a; b < h; ++b) {
      double dot = 0;
      for (std::size_t r = 0; r < s; ++r) dot += centered[r * h + a] * centered[r * h + b];
      const double den = norm[a] * norm[b];
      const double c = den > 0 ? dot / den : 0.0;
      corr[a * h + b] = corr[b * h + a] = c;
    }
  }
  return corr;
}

std::vector<std::size_t> coactivation_groups(const Tensor<double>& calib, std::size_t experts) {
  const std::size_t h = calib.cols();
  const std::size_t width = h / experts;
  const auto corr = column_correlation(calib);
  std::vector<bool> used(h, false);
  std::vector<std::size_t> delta;
  delta.reserve(h);
  for (std::size_t grp = 0; grp < experts; ++grp) {
    std::vector<std::size_t> members;
    // Seed with the most correlated free pair; ties go to the lowest indices.
    if (width >= 2) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t ba = 0, bb = 0;
      for (std::size_t a = 0; a < h; ++a) {
        if (used[a]) continue;
        for (std::size_t b = a + 1; b < h; ++b) {
          if (used[b]) continue;
          if (corr[a * h + b] > best) {
            best = corr[a * h + b];
            ba = a;
            bb = b;
          }
        }
      }
      members = {ba, bb};
    } else {
      members = {static_cast<std::size_t>(std::find(used.begin(), used.end(), false) - used.begin())};
    }
    for (auto m : members) used[m] = true;
    // Grow by the free neuron with the highest mean correlation to the group.
    while (members.size() < width) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t pick = h;
      for (std::size_t c = 0; c < h; ++c) {
        if (used[c]) continue;
        double s = 0;
        for (auto m : members) s += corr[c * h + m];
        s /= static_cast<double>(members.size());
        if (s > best) {
          best = s;
          pick = c;
        }
      }
      used[pick] = true;
      members.push_back(pick);
    }
    std::sort(members.begin(), members.end());
    delta.insert(delta.end(), members.begin(), members.end());
  }
  return delta;
}

void check_divisible(std::size_t hidden, std::size_t experts) {
  if (experts == 0 || hidden % experts != 0) {
    throw ConfigError("expert count " + std::to_string(experts) + " does not divide hidden width " +
                      std::to_string(hidden));
  }
}

}  // namespace

PermutationMap build_permutation(PermutationStrategy strategy, std::size_t hidden, std::size_t experts,
                                 std::uint64_t seed, const Tensor<double>* calib) {
  check_divisible(hidden, experts);
  PermutationMap pm;
  pm.strategy = strategy;
  pm.seed = seed;
  pm.delta.resize(hidden);
  std::iota(pm.delta.begin(), pm.delta.end(), std::size_t{0});
  switch (strategy) {
    case PermutationStrategy::kContiguous:
      break;
    case PermutationStrategy::kRandom: {
      std::mt19937_64 rng(seed);
      for (std::size_t i = hidden; i-- > 1;) {
        std::uniform_int_distribution<std::size_t> pick(0, i);
        std::swap(pm.delta[i], pm.delta[pick(rng)]);
      }
      break;
    }
    case PermutationStrategy::kCoactivation:
      if (calib == nullptr) throw ContractError("coactivation grouping requires calibration activations");
      if (calib->rank() != 2 || calib->cols() != hidden || calib->rows() < 2) {
        throw DimensionError("calibration activations " + shape_str(calib->shape()) + " do not match hidden width " +
                             std::to_string(hidden));
      }
      pm.delta = coactivation_groups(*calib, experts);
      break;
  }
  return pm;
}

Tensor<double> permutation_matrix(const PermutationMap& pm) {
  const std::size_t n = pm.size();
  Tensor<double> p({n, n});
  for (std::size_t q = 0; q < n; ++q) p.at(pm.delta[q], q) = 1.0;
  return p;
}

template <typename T>
ExpertBank<T> split_ffn(const FfnWeights<T>& w, const PermutationMap& pm, std::size_t experts) {
  w.validate();
  const std::size_t d = w.d_model(), h = w.hidden();
  check_divisible(h, experts);
  if (pm.size() != h || !pm.is_bijection()) {
    throw ContractError("permutation of size " + std::to_string(pm.size()) + " is not a bijection on " +
                        std::to_string(h) + " neurons");
  }
  const std::size_t width = h / experts;
  ExpertBank<T> bank;
  bank.b2 = w.b2;
  bank.perm = pm;
  for (std::size_t e = 0; e < experts; ++e) {
    Expert<T> ex{Tensor<T>({d, width}), Tensor<T>({width}), Tensor<T>({width, d})};
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t old = pm.delta[e * width + c];
      for (std::size_t r = 0; r < d; ++r) ex.w1.at(r, c) = w.w1.at(r, old);
      ex.b1[c] = w.b1[old];
      for (std::size_t j = 0; j < d; ++j) ex.w2.at(c, j) = w.w2.at(old, j);
    }
    bank.experts.push_back(std::move(ex));
  }
  return bank;
}

template <typename T>
FfnWeights<T> merge_experts(const ExpertBank<T>& bank) {
  const std::size_t d = bank.d_model(), width = bank.width(), h = width * bank.count();
  if (bank.perm.size() != h) throw ContractError("expert bank permutation does not cover its hidden width");
  FfnWeights<T> w{Tensor<T>({d, h}), Tensor<T>({h}), Tensor<T>({h, d}), bank.b2};
  for (std::size_t e = 0; e < bank.count(); ++e) {
    const auto& ex = bank.experts[e];
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t old = bank.perm.delta[e * width + c];
      for (std::size_t r = 0; r < d; ++r) w.w1.at(r, old) = ex.w1.at(r, c);
      w.b1[old] = ex.b1[c];
      for (std::size_t j = 0; j < d; ++j) w.w2.at(old, j) = ex.w2.at(c, j);
    }
  }
  return w;
}

template <typename T>
Tensor<T> expert_sum(const Tensor<T>& x, const ExpertBank<T>& bank) {
  if (x.cols() != bank.d_model()) {
    throw DimensionError("expert_sum: input " + shape_str(x.shape()) + " vs expert bank of width " +
                         std::to_string(bank.d_model()));
  }
  Tensor<T> acc(x.shape());
  for (const auto& e : bank.experts) acc = add(acc, matmul(silu(linear_forward(x, e.w1, e.b1)), e.w2));
  return add_bias(acc, bank.b2);
}

Json Certificate::to_json() const {
  auto dev = [](const Deviation& d, double tol) {
    return Json{{"max_abs", real9(d.max_abs)}, {"max_rel", real9(d.max_rel)}, {"tol", tol}, {"pass", d.max_rel <= tol}};
  };
  return {{"strategy", strategy}, {"seed", seed},           {"experts", experts},      {"samples", samples},
          {"f64", dev(f64, tol.f64)}, {"f32", dev(f32, tol.f32)}, {"pass", pass}};
}

namespace {

template <typename T>
Deviation measure(const FfnWeights<T>& w, const ExpertBank<T>& bank, const Tensor<T>& x) {
  const auto dense = ffn_forward(x, w);
  const auto split = expert_sum(x, bank);
  Deviation dev;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double abs_err = 0, scale = 0;
    for (std::size_t j = 0; j < dense.cols(); ++j) {
      abs_err = std::max(abs_err, std::abs(static_cast<double>(split.at(r, j)) - static_cast<double>(dense.at(r, j))));
      scale = std::max(scale, std::abs(static_cast<double>(dense.at(r, j))));
    }
    dev.max_abs = std::max(dev.max_abs, abs_err);
    dev.max_rel = std::max(dev.max_rel, scale > 0 ? abs_err / scale : abs_err);
  }
  return dev;
}

}  // namespace

Certificate verify_equivalence(const FfnWeights<double>& w, const ExpertBank<double>& bank, std::size_t samples,
                               Tolerance tol, std::uint64_t seed) {
  w.validate();
  if (bank.d_model() != w.d_model() || bank.width() * bank.count() != w.hidden()) {
    throw ContractError("expert bank (" + std::to_string(bank.count()) + " x " + std::to_string(bank.width()) +
                        ", d_model " + std::to_string(bank.d_model()) + ") does not match ffn " +
                        shape_str(w.w1.shape()));
  }
  std::mt19937_64 rng(seed);
  const auto x = random_normal<double>({samples, w.d_model()}, 1.0, rng);
  Certificate c;
  c.strategy = to_string(bank.perm.strategy);
  c.seed = bank.perm.seed;
  c.experts = bank.count();
  c.samples = samples;
  c.tol = tol;
  c.f64 = measure(w, bank, x);
  c.f32 = measure(w.cast<float>(), bank.cast<float>(), x.cast<float>());
  c.pass = c.f64.max_rel <= tol.f64 && c.f32.max_rel <= tol.f32;
  return c;
}

#define MOESPLIT_INSTANTIATE_FACTORIZATION(T)                                            \
  template ExpertBank<T> split_ffn<T>(const FfnWeights<T>&, const PermutationMap&, std::size_t); \
  template FfnWeights<T> merge_experts<T>(const ExpertBank<T>&);                         \
  template Tensor<T> expert_sum<T>(const Tensor<T>&, const ExpertBank<T>&);

MOESPLIT_INSTANTIATE_FACTORIZATION(float)
MOESPLIT_INSTANTIATE_FACTORIZATION(double)

}  // namespace moesplit
