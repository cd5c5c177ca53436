#include "moesplit/analysis.hpp"

#include <cmath>
#include <random>

#include "moesplit/errors.hpp"
#include "moesplit/graph.hpp"
#include "moesplit/ops.hpp"

namespace moesplit {

FlopsReport count_flops(const ModelConfig& model, const MoeConfig& moe, std::size_t seq_len) {
  model.validate();
  moe.validate();
  if (seq_len == 0) throw ConfigError("seq_len must be positive");
  const double d = static_cast<double>(model.d_model), h = static_cast<double>(model.hidden());
  const double n = static_cast<double>(seq_len), layers = static_cast<double>(model.layers);
  const double experts = static_cast<double>(moe.experts), active = static_cast<double>(moe.active);

  FlopsReport r;
  r.model = model;
  r.moe = moe;
  r.seq_len = seq_len;
  r.attention_per_layer = 8 * n * d * d + 4 * n * n * d;
  r.dense_ffn_per_token = 4 * d * h;
  r.router_per_token = 2 * d * experts;
  r.factorized_ffn_per_token = r.dense_ffn_per_token * active / experts + r.router_per_token;
  r.dense_total_per_seq = layers * (r.attention_per_layer + n * r.dense_ffn_per_token);
  r.factorized_total_per_seq = layers * (r.attention_per_layer + n * r.factorized_ffn_per_token);
  r.reduction_ffn = 1 - r.factorized_ffn_per_token / r.dense_ffn_per_token;
  r.reduction_total = 1 - r.factorized_total_per_seq / r.dense_total_per_seq;
  return r;
}

Json FlopsReport::to_json() const {
  return {{"convention", "1 multiply-accumulate = 2 FLOPs"},
          {"model", model_config_to_json(model)},
          {"moe", moe_config_to_json(moe)},
          {"seq_len", seq_len},
          {"attention_per_layer", real9(attention_per_layer)},
          {"dense_ffn_per_token", real9(dense_ffn_per_token)},
          {"router_per_token", real9(router_per_token)},
          {"factorized_ffn_per_token", real9(factorized_ffn_per_token)},
          {"dense_total_per_seq", real9(dense_total_per_seq)},
          {"factorized_total_per_seq", real9(factorized_total_per_seq)},
          {"reduction_ffn", real9(reduction_ffn)},
          {"reduction_total", real9(reduction_total)}};
}

double usage_entropy(std::span<const std::size_t> counts) {
  double total = 0;
  for (auto c : counts) total += static_cast<double>(c);
  if (total == 0) return 0;
  double h = 0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h;
}

RouteStats route_stats(std::span<const RoutingRecord> records, std::size_t experts) {
  RouteStats rs;
  if (records.empty()) return rs;
  rs.experts = experts;
  if (rs.experts == 0) {
    for (const auto& r : records) rs.experts = std::max(rs.experts, r.probs.rank() == 2 ? r.probs.cols() : 0);
    if (rs.experts == 0) {
      for (const auto& r : records)
        for (const auto& sel : r.selected)
          for (auto e : sel) rs.experts = std::max<std::size_t>(rs.experts, e + 1);
    }
  }

  // Split into snapshots: a new snapshot starts whenever the step changes.
  std::vector<std::vector<const RoutingRecord*>> snaps;
  for (const auto& r : records) {
    if (snaps.empty() || snaps.back().front()->step != r.step) {
      if (!snaps.empty() && r.step < snaps.back().front()->step)
        throw ContractError("route records must be ordered by step");
      snaps.emplace_back();
    }
    snaps.back().push_back(&r);
  }
  auto layout = [](const std::vector<const RoutingRecord*>& s) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (auto* r : s) out.emplace_back(r->layer, r->selected.size());
    return out;
  };
  const auto ref = layout(snaps.front());
  rs.layers = ref.size();
  rs.tokens = ref.front().second;
  for (const auto& s : snaps) {
    if (layout(s) != ref) {
      throw DimensionError("route snapshot at step " + std::to_string(s.front()->step) +
                           " covers different layers or token counts than step " +
                           std::to_string(snaps.front().front()->step));
    }
  }

  for (const auto& s : snaps) {
    SnapshotStats st;
    st.step = s.front()->step;
    for (auto* r : s) {
      std::vector<std::size_t> counts(rs.experts, 0);
      for (const auto& sel : r->selected)
        for (auto e : sel) {
          if (e >= rs.experts) throw ContractError("route record names expert " + std::to_string(e));
          ++counts[e];
        }
      st.entropy.push_back(usage_entropy(counts));
      st.usage.push_back(std::move(counts));
    }
    double sum = 0;
    for (double h : st.entropy) sum += h;
    st.mean_entropy = sum / static_cast<double>(st.entropy.size());
    rs.snapshots.push_back(std::move(st));
  }

  for (std::size_t i = 1; i < snaps.size(); ++i) {
    std::size_t changed = 0, total = 0;
    for (std::size_t l = 0; l < snaps[i].size(); ++l) {
      const auto& a = snaps[i - 1][l]->selected;
      const auto& b = snaps[i][l]->selected;
      for (std::size_t t = 0; t < a.size(); ++t, ++total) changed += a[t] != b[t];
    }
    rs.churn.push_back(total ? static_cast<double>(changed) / static_cast<double>(total) : 0.0);
  }
  return rs;
}

std::vector<double> RouteStats::smoothed_churn(std::size_t window) const {
  if (window == 0) throw ContractError("smoothing window must be positive");
  std::vector<double> out(churn.size());
  for (std::size_t i = 0; i < churn.size(); ++i) {
    const std::size_t lo = i + 1 >= window ? i + 1 - window : 0;
    double s = 0;
    for (std::size_t j = lo; j <= i; ++j) s += churn[j];
    out[i] = s / static_cast<double>(i + 1 - lo);
  }
  return out;
}

Json RouteStats::to_json(std::size_t window) const {
  Json snaps = Json::array();
  for (const auto& s : snapshots) {
    Json ent = Json::array();
    for (double h : s.entropy) ent.push_back(real9(h));
    snaps.push_back({{"step", s.step}, {"usage", s.usage}, {"entropy", ent}, {"mean_entropy", real9(s.mean_entropy)}});
  }
  Json ch = Json::array(), sm = Json::array();
  for (double c : churn) ch.push_back(real9(c));
  for (double c : smoothed_churn(window)) sm.push_back(real9(c));
  return {{"experts", experts}, {"layers", layers},       {"tokens", tokens},          {"snapshots", snaps},
          {"churn", ch},        {"smoothing_window", window}, {"smoothed_churn", sm}};
}

namespace {

template <typename LogitsFn>
EvalReport eval_windows(std::span<const Window> windows, std::size_t batch_size, LogitsFn&& logits_of) {
  if (windows.empty()) throw IngestError("evaluation stream is empty");
  if (batch_size == 0) throw ConfigError("eval batch_size must be positive");
  EvalReport r;
  double total = 0;
  for (std::size_t start = 0; start < windows.size(); start += batch_size) {
    const auto chunk = windows.subspan(start, std::min(batch_size, windows.size() - start));
    const auto batch = pack_windows(chunk);
    Graph<float> g(nullptr, false);
    const Tensor<float>& logits = g.value(logits_of(g, batch.inputs));
    total += cross_entropy(logits, batch.targets) * static_cast<double>(batch.targets.size());
    r.tokens += batch.targets.size();
  }
  r.windows = windows.size();
  r.ce = total / static_cast<double>(r.tokens);
  r.perplexity = std::exp(r.ce);
  return r;
}

}  // namespace

EvalReport evaluate(const ModelWeights<float>& model, std::span<const Window> windows, std::size_t batch_size) {
  return eval_windows(windows, batch_size,
                      [&](Graph<float>& g, const TokenBatch& b) { return lm_graph(g, model, b); });
}

EvalReport evaluate(const StudentWeights<float>& student, std::span<const Window> windows, RoutingMode mode,
                    std::uint64_t seed, std::size_t batch_size) {
  std::mt19937_64 rng(seed);
  StudentPassOptions<float> opt;
  opt.mode = mode;
  opt.rng = &rng;
  return eval_windows(windows, batch_size,
                      [&](Graph<float>& g, const TokenBatch& b) { return student_graph(g, student, b, opt); });
}

void compare_to_teacher(EvalReport& student, const EvalReport& teacher) {
  student.maintenance = std::exp(-(student.ce - teacher.ce));
  student.ce_ratio = teacher.ce / student.ce;
}

Json EvalReport::to_json() const {
  Json j{{"windows", windows}, {"tokens", tokens}, {"ce", real9(ce)}, {"perplexity", real9(perplexity)}};
  if (maintenance) j["maintenance"] = real9(*maintenance);
  if (ce_ratio) j["ce_ratio"] = real9(*ce_ratio);
  return j;
}

}  // namespace moesplit
