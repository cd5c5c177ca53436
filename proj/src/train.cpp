#include "moesplit/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "moesplit/errors.hpp"
#include "moesplit/losses.hpp"
#include "moesplit/ops.hpp"

namespace moesplit {

// ---------------------------------------------------------------------------
// Optimizer

double Adam::step(ParamSet<float>& params) {
  const double norm = params.grad_norm();
  if (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) params.scale_grad(cfg_.grad_clip / norm);
  auto& entries = params.entries();
  if (m_.size() != entries.size()) {
    m_.assign(entries.size(), {});
    v_.assign(entries.size(), {});
    for (std::size_t i = 0; i < entries.size(); ++i) {
      m_[i].assign(entries[i].value->size(), 0.0);
      v_[i].assign(entries[i].value->size(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto value = entries[i].value->data();
    const auto grad = entries[i].grad.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = static_cast<double>(grad[j]) + cfg_.weight_decay * static_cast<double>(value[j]);
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double update = cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
      value[j] = static_cast<float>(static_cast<double>(value[j]) - update);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

const Json& section(const Json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  return j;
}

template <typename V>
V required(const Json& j, const std::string& path, const char* key) {
  const std::string name = path.empty() ? std::string(key) : path + "." + key;
  if (!j.contains(key)) throw ConfigError("missing config field '" + name + "'");
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field '" + name + "' has the wrong type");
  }
}

template <typename V>
V optional_field(const Json& j, const std::string& path, const char* key, V fallback) {
  if (!j.contains(key)) return fallback;
  return required<V>(j, path, key);
}

void check_adam(const AdamConfig& a, const std::string& path) {
  if (!(a.lr > 0)) throw ConfigError(path + ".lr must be positive");
  if (a.beta1 < 0 || a.beta1 >= 1 || a.beta2 < 0 || a.beta2 >= 1) throw ConfigError(path + " betas must lie in [0, 1)");
  if (a.weight_decay < 0) throw ConfigError(path + ".weight_decay must be >= 0");
}

void put_adam(Json& j, const AdamConfig& a) {
  j["lr"] = a.lr;
  j["beta1"] = a.beta1;
  j["beta2"] = a.beta2;
  j["weight_decay"] = a.weight_decay;
  j["grad_clip"] = a.grad_clip;
}

}  // namespace

TrainConfig TrainConfig::from_json(const Json& jin, const std::string& path) {
  const Json& j = section(jin, path);
  TrainConfig c;
  c.alpha = required<double>(j, path, "alpha");
  c.adam.lr = required<double>(j, path, "lr");
  c.adam.beta1 = required<double>(j, path, "beta1");
  c.adam.beta2 = required<double>(j, path, "beta2");
  c.adam.weight_decay = required<double>(j, path, "weight_decay");
  c.adam.grad_clip = required<double>(j, path, "grad_clip");
  c.train_steps = required<std::size_t>(j, path, "train_steps");
  c.seed = required<std::uint64_t>(j, path, "seed");
  c.lb_weight = required<double>(j, path, "lb_weight");
  c.warmup_steps = optional_field<std::size_t>(j, path, "warmup_steps", c.train_steps / 10);
  c.feature_mse_weight = optional_field<double>(j, path, "feature_mse_weight", 0.0);
  c.pa_grad_to_experts = optional_field<bool>(j, path, "pa_grad_to_experts", true);
  const auto routing = optional_field<std::string>(j, path, "routing", "router");
  if (routing == "router")
    c.routing = RouterTraining::kRouter;
  else if (routing == "random")
    c.routing = RouterTraining::kRandom;
  else
    throw ConfigError(path + ".routing must be \"router\" or \"random\", got \"" + routing + "\"");
  c.batch_size = optional_field<std::size_t>(j, path, "batch_size", c.batch_size);
  c.checkpoint_every = optional_field<std::size_t>(j, path, "checkpoint_every", 0);
  c.snapshot_every = optional_field<std::size_t>(j, path, "snapshot_every", 0);
  c.probe_windows = optional_field<std::size_t>(j, path, "probe_windows", c.probe_windows);
  c.router_std = optional_field<double>(j, path, "router_std", c.router_std);
  c.eval_seed = optional_field<std::uint64_t>(j, path, "eval_seed", c.eval_seed);
  if (c.alpha < 0) throw ConfigError(path + ".alpha must be >= 0");
  if (c.batch_size == 0) throw ConfigError(path + ".batch_size must be positive");
  if (c.probe_windows == 0) throw ConfigError(path + ".probe_windows must be positive");
  check_adam(c.adam, path);
  return c;
}

Json TrainConfig::to_json() const {
  Json j{{"alpha", alpha}};
  put_adam(j, adam);
  j["warmup_steps"] = warmup_steps;
  j["train_steps"] = train_steps;
  j["seed"] = seed;
  j["lb_weight"] = lb_weight;
  j["feature_mse_weight"] = feature_mse_weight;
  j["pa_grad_to_experts"] = pa_grad_to_experts;
  j["routing"] = routing == RouterTraining::kRouter ? "router" : "random";
  j["batch_size"] = batch_size;
  j["checkpoint_every"] = checkpoint_every;
  j["snapshot_every"] = snapshot_every;
  j["probe_windows"] = probe_windows;
  j["router_std"] = router_std;
  j["eval_seed"] = eval_seed;
  return j;
}

std::size_t TrainConfig::snapshot_interval() const noexcept {
  if (snapshot_every > 0) return snapshot_every;
  return std::max<std::size_t>(1, warmup_steps / 10);
}

DataConfig DataConfig::from_json(const Json& jin, const std::string& path) {
  const Json& j = section(jin, path);
  DataConfig c;
  c.corpus = optional_field<std::string>(j, path, "corpus", "");
  c.synthetic_bytes = optional_field<std::size_t>(j, path, "synthetic_bytes", c.synthetic_bytes);
  c.corpus_seed = optional_field<std::uint64_t>(j, path, "corpus_seed", 0);
  c.seq_len = optional_field<std::size_t>(j, path, "seq_len", c.seq_len);
  c.heldout_fraction = optional_field<double>(j, path, "heldout_fraction", c.heldout_fraction);
  if (c.seq_len == 0) throw ConfigError(path + ".seq_len must be positive");
  if (c.heldout_fraction <= 0 || c.heldout_fraction >= 1) throw ConfigError(path + ".heldout_fraction must lie in (0, 1)");
  return c;
}

Json DataConfig::to_json() const {
  return {{"corpus", corpus},   {"synthetic_bytes", synthetic_bytes}, {"corpus_seed", corpus_seed},
          {"seq_len", seq_len}, {"heldout_fraction", heldout_fraction}};
}

PretrainConfig PretrainConfig::from_json(const Json& jin, const std::string& path) {
  const Json& j = section(jin, path);
  PretrainConfig c;
  c.steps = optional_field<std::size_t>(j, path, "steps", c.steps);
  c.batch_size = optional_field<std::size_t>(j, path, "batch_size", c.batch_size);
  c.adam.lr = optional_field<double>(j, path, "lr", c.adam.lr);
  c.adam.beta1 = optional_field<double>(j, path, "beta1", c.adam.beta1);
  c.adam.beta2 = optional_field<double>(j, path, "beta2", c.adam.beta2);
  c.adam.weight_decay = optional_field<double>(j, path, "weight_decay", c.adam.weight_decay);
  c.adam.grad_clip = optional_field<double>(j, path, "grad_clip", c.adam.grad_clip);
  c.seed = optional_field<std::uint64_t>(j, path, "seed", 0);
  if (c.batch_size == 0) throw ConfigError(path + ".batch_size must be positive");
  check_adam(c.adam, path);
  return c;
}

Json PretrainConfig::to_json() const {
  Json j{{"steps", steps}, {"batch_size", batch_size}};
  put_adam(j, adam);
  j["seed"] = seed;
  return j;
}

RunConfig RunConfig::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  if (j.contains("model")) {
    const Json& m = section(j.at("model"), "model");
    c.model.layers = optional_field<std::size_t>(m, "model", "layers", c.model.layers);
    c.model.d_model = optional_field<std::size_t>(m, "model", "d_model", c.model.d_model);
    c.model.expansion = optional_field<std::size_t>(m, "model", "expansion", c.model.expansion);
    c.model.heads = optional_field<std::size_t>(m, "model", "heads", c.model.heads);
    c.model.vocab = optional_field<std::size_t>(m, "model", "vocab", c.model.vocab);
    c.model.max_seq = optional_field<std::size_t>(m, "model", "max_seq", c.model.max_seq);
  }
  c.model.validate();
  if (j.contains("moe")) {
    const Json& m = section(j.at("moe"), "moe");
    c.moe.experts = optional_field<std::size_t>(m, "moe", "experts", c.moe.experts);
    c.moe.active = optional_field<std::size_t>(m, "moe", "active", c.moe.active);
    c.moe.routers_per_layer = optional_field<std::size_t>(m, "moe", "routers_per_layer", c.moe.routers_per_layer);
  }
  c.moe.validate();
  if (c.model.hidden() % c.moe.experts != 0) {
    throw ConfigError("moe.experts (" + std::to_string(c.moe.experts) + ") must divide the hidden width " +
                      std::to_string(c.model.hidden()));
  }
  c.strategy = parse_strategy(optional_field<std::string>(j, "", "strategy", "contiguous"));
  if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
  if (c.data.seq_len > c.model.max_seq) {
    throw ConfigError("data.seq_len (" + std::to_string(c.data.seq_len) + ") exceeds model.max_seq (" +
                      std::to_string(c.model.max_seq) + ")");
  }
  if (c.model.vocab < kByteVocab) throw ConfigError("model.vocab must be at least 256 for byte corpora");
  if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

Json RunConfig::to_json() const {
  Json j{{"model", model_config_to_json(model)},
         {"moe", moe_config_to_json(moe)},
         {"strategy", to_string(strategy)},
         {"data", data.to_json()},
         {"pretrain", pretrain.to_json()}};
  if (train) j["train"] = train->to_json();
  return j;
}

Dataset load_dataset(const DataConfig& data) {
  const auto bytes =
      data.corpus.empty() ? synthetic_corpus(data.synthetic_bytes, data.corpus_seed) : read_corpus_bytes(data.corpus);
  const auto split = split_corpus(bytes, data.heldout_fraction);
  Dataset ds;
  ds.train = make_windows(split.train, data.seq_len);
  if (!split.heldout.empty()) ds.heldout = make_windows(split.heldout, data.seq_len);
  if (ds.train.empty() || ds.heldout.empty()) {
    throw IngestError("corpus of " + std::to_string(bytes.size()) + " bytes is too short for seq_len " +
                      std::to_string(data.seq_len));
  }
  return ds;
}

TokenBatch probe_batch(const Dataset& data, std::size_t count) {
  const std::size_t n = std::min(count, data.train.size());
  return pack_windows(std::span<const Window>(data.train.data(), n)).inputs;
}

Json LossBreakdown::to_json(bool with_feat) const {
  Json j{{"step", step}, {"phase", phase}, {"l_ft", real9(l_ft)}, {"l_pa", real9(l_pa)}, {"l_lb", real9(l_lb)}};
  if (with_feat) j["l_feat"] = real9(l_feat);
  j["l_overall"] = real9(l_overall);
  j["grad_norm"] = real9(grad_norm);
  j["lr"] = real9(lr);
  return j;
}

// ---------------------------------------------------------------------------
// Student construction

std::vector<Tensor<double>> calibration_activations(const ModelWeights<float>& teacher, const TokenBatch& batch) {
  Graph<float> g(nullptr, false);
  std::vector<Tensor<double>> out;
  FfnHook<float> hook = [&](Graph<float>& gr, std::size_t layer, Var normed) {
    const auto& ffn = teacher.blocks[layer].ffn;
    Var act = gr.silu(gr.linear(normed, gr.weight(ffn.w1), gr.weight(ffn.b1)));
    out.push_back(gr.value(act).cast<double>());
    return gr.add_bias(gr.matmul(act, gr.weight(ffn.w2)), gr.weight(ffn.b2));
  };
  lm_graph(g, teacher, batch, hook);
  return out;
}

StudentWeights<float> build_student(const ModelWeights<float>& teacher, const MoeConfig& moe,
                                    PermutationStrategy strategy, std::uint64_t seed, double router_std,
                                    const TokenBatch* calib_batch) {
  std::vector<Tensor<double>> calib;
  if (strategy == PermutationStrategy::kCoactivation) {
    if (calib_batch == nullptr) throw ContractError("coactivation grouping requires a calibration batch");
    calib = calibration_activations(teacher, *calib_batch);
  }
  std::vector<PermutationMap> perms;
  for (std::size_t l = 0; l < teacher.blocks.size(); ++l) {
    perms.push_back(build_permutation(strategy, teacher.config.hidden(), moe.experts, seed + l,
                                      calib.empty() ? nullptr : &calib[l]));
  }
  return make_student(teacher, moe, perms, seed ^ 0x5851f42d4c957f2dULL, router_std);
}

template <typename T>
StudentLosses<T> student_losses(Graph<T>& g, const ModelWeights<T>& teacher, const StudentWeights<T>& s,
                                const LabeledBatch& batch, const StudentPassOptions<T>& options,
                                bool with_feature_mse) {
  const MoeConfig& moe = s.moe;
  StudentLosses<T> out;
  StudentPassOptions<T> opt = options;
  opt.traces = &out.traces;
  Var logits = student_graph(g, s, batch.inputs, opt);
  out.ft = g.cross_entropy(logits, batch.targets);
  if (opt.mode == RoutingMode::kRandom) return out;

  std::vector<Var> probs;
  std::vector<Tensor<double>> masks;
  std::vector<Selection> selected;
  for (std::size_t l = 0; l < out.traces.size(); ++l) {
    const auto& tr = out.traces[l];
    const auto& bank = s.layers[l].bank;
    const Tensor<T>& x = g.value(tr.normed);
    const std::size_t rows = x.rows(), d = x.cols();
    // The distances only pick the targets; TopK is piecewise constant, so they
    // carry no gradient and are computed outside the graph.
    const auto reference = ffn_forward(x, teacher.blocks[l].ffn);
    Tensor<T> expert_outs({rows, bank.count(), d});
    for (std::size_t k = 0; k < bank.count(); ++k) {
      const auto fk = add_bias(matmul(g.value(tr.activations[k]), bank.experts[k].w2), bank.b2);
      for (std::size_t t = 0; t < rows; ++t)
        std::copy(fk.row(t).begin(), fk.row(t).end(), expert_outs.data().begin() + (t * bank.count() + k) * d);
    }
    auto pa = pseudo_allocation(reference, expert_outs, moe.active, moe.routers_per_layer);
    for (const auto& sel : pa.indices) {
      std::uint64_t h = sel.size();
      for (auto i : sel) h = h * 31 + i;
      g.note_decision(h);
    }
    probs.push_back(tr.probs);
    masks.push_back(pa.mask);
    selected.push_back(tr.selected);
    out.allocations.push_back(std::move(pa));
    if (with_feature_mse) {
      Var term = g.mean_sq_diff(tr.output, ffn_graph(g, tr.normed, teacher.blocks[l].ffn));
      out.feat = out.feat.valid() ? g.add(out.feat, term) : term;
    }
  }
  out.pa = pa_loss_graph(g, probs, masks, moe.experts);
  out.lb = balance_loss_graph(g, probs, selected, moe.active, moe.experts);
  if (out.feat.valid()) out.feat = g.scale(out.feat, static_cast<T>(1.0 / static_cast<double>(out.traces.size())));
  return out;
}

template StudentLosses<float> student_losses<float>(Graph<float>&, const ModelWeights<float>&,
                                                    const StudentWeights<float>&, const LabeledBatch&,
                                                    const StudentPassOptions<float>&, bool);
template StudentLosses<double> student_losses<double>(Graph<double>&, const ModelWeights<double>&,
                                                      const StudentWeights<double>&, const LabeledBatch&,
                                                      const StudentPassOptions<double>&, bool);

// ---------------------------------------------------------------------------
// Training loop

namespace {

enum class Phase { kWarmup, kExperts };

struct StepResult {
  Var loss;
  LossBreakdown record;
};

StepResult student_step(Graph<float>& g, const ModelWeights<float>& teacher, const StudentWeights<float>& s,
                        const LabeledBatch& batch, const TrainConfig& cfg, Phase phase, std::mt19937_64& route_rng) {
  StudentPassOptions<float> opt;
  opt.mode = cfg.routing == RouterTraining::kRouter ? RoutingMode::kRouter : RoutingMode::kRandom;
  opt.rng = &route_rng;
  opt.detach_router_input = phase == Phase::kExperts && !cfg.pa_grad_to_experts;
  const bool with_feat = phase == Phase::kExperts && cfg.feature_mse_weight > 0;
  auto losses = student_losses(g, teacher, s, batch, opt, with_feat);

  StepResult out;
  out.record.phase = phase == Phase::kWarmup ? "warmup" : "experts";
  out.record.l_ft = g.value(losses.ft)[0];
  if (cfg.routing == RouterTraining::kRandom) {
    out.loss = losses.ft;
    out.record.l_overall = out.record.l_ft;
    return out;
  }
  out.record.l_pa = g.value(losses.pa)[0];
  out.record.l_lb = g.value(losses.lb)[0];
  const auto alpha = static_cast<float>(cfg.alpha);
  if (phase == Phase::kWarmup) {
    out.loss = g.add(g.scale(losses.pa, alpha), g.scale(losses.lb, static_cast<float>(cfg.lb_weight)));
    out.record.l_overall = cfg.alpha * out.record.l_pa + cfg.lb_weight * out.record.l_lb;
  } else {
    out.loss = g.add(losses.ft, g.scale(losses.pa, alpha));
    out.record.l_overall = overall_loss(out.record.l_ft, out.record.l_pa, cfg.alpha);
    if (with_feat) {
      out.record.l_feat = g.value(losses.feat)[0];
      out.loss = g.add(out.loss, g.scale(losses.feat, static_cast<float>(cfg.feature_mse_weight)));
      out.record.l_overall += cfg.feature_mse_weight * out.record.l_feat;
    }
  }
  return out;
}

std::vector<RoutingRecord> route_snapshot(const StudentWeights<float>& s, const TokenBatch& probe, std::size_t step) {
  Graph<float> g(nullptr, false);
  std::vector<LayerTrace<float>> traces;
  StudentPassOptions<float> opt;
  opt.traces = &traces;
  student_graph(g, s, probe, opt);
  std::vector<RoutingRecord> out;
  for (std::size_t l = 0; l < traces.size(); ++l)
    out.push_back({step, l, g.value(traces[l].probs).cast<double>(), traces[l].selected});
  return out;
}

std::string step_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06zu.json", step);
  return buf;
}

class RunFiles {
 public:
  RunFiles(const TrainIo& io, const std::string& metrics_name, bool with_routes) : io_(io) {
    if (io.dir.empty()) return;
    std::filesystem::create_directories(io.dir);
    metrics_.open(io.dir / metrics_name, std::ios::trunc);
    if (!metrics_) throw CheckpointError("cannot write " + (io.dir / metrics_name).string());
    if (with_routes) {
      routes_.open(io.dir / "routes.csv", std::ios::trunc);
      routes_ << "step,layer,position,selected,probs\n";
    }
  }

  bool enabled() const { return !io_.dir.empty(); }
  const std::filesystem::path& dir() const { return io_.dir; }

  void metric(const LossBreakdown& r, bool with_feat) {
    if (enabled()) metrics_ << r.to_json(with_feat).dump() << '\n' << std::flush;
    if (io_.progress && (r.step % 50 == 0)) {
      *io_.progress << r.phase << " step " << r.step << " l_ft " << format_real(r.l_ft) << " l_pa "
                    << format_real(r.l_pa) << " l_overall " << format_real(r.l_overall) << '\n';
    }
  }

  void routes(std::span<const RoutingRecord> recs) {
    if (routes_.is_open()) write_route_trace_csv(routes_, recs, false);
  }

 private:
  const TrainIo& io_;
  std::ofstream metrics_;
  std::ofstream routes_;
};

bool finite(double v) { return std::isfinite(v); }

}  // namespace

TrainResult run_training(const ModelWeights<float>& teacher, StudentWeights<float> student, const TrainConfig& cfg,
                         const Dataset& data, const TrainIo& io) {
  if (student.layers.size() != teacher.blocks.size()) throw ContractError("student and teacher layer counts differ");
  TrainResult result;
  RunFiles files(io, "metrics.jsonl", cfg.routing == RouterTraining::kRouter);
  BatchSampler sampler(data.train, cfg.batch_size, cfg.seed);
  std::mt19937_64 route_rng(cfg.seed ^ 0x2545f4914f6cdd1dULL);
  const TokenBatch probe = probe_batch(data, cfg.probe_windows);
  const bool with_feat = cfg.feature_mse_weight > 0;
  std::size_t step = 0;

  auto checkpoint = [&](const std::filesystem::path& path) {
    save_student(path, student, Json{{"step", step}, {"train", cfg.to_json()}});
  };
  auto snapshot = [&] {
    auto recs = route_snapshot(student, probe, step);
    files.routes(recs);
    result.snapshots.insert(result.snapshots.end(), recs.begin(), recs.end());
  };
  auto run_phase = [&](Phase phase, std::size_t steps, ParamSet<float>& params) {
    Adam adam(cfg.adam);
    for (std::size_t i = 0; i < steps; ++i) {
      const auto batch = sampler.next();
      Graph<float> g(&params);
      auto res = student_step(g, teacher, student, batch, cfg, phase, route_rng);
      res.record.step = step;
      res.record.lr = cfg.adam.lr;
      params.zero_grad();
      bool ok = finite(res.record.l_overall);
      if (ok) {
        g.backward(res.loss);
        ok = finite(params.grad_norm());
      }
      if (!ok) {
        std::string where;
        if (files.enabled()) {
          checkpoint(files.dir() / "last_good.json");
          where = "; last good checkpoint " + (files.dir() / "last_good.json").string();
        }
        throw DivergenceError("non-finite loss at step " + std::to_string(step) + where);
      }
      res.record.grad_norm = adam.step(params);
      files.metric(res.record, with_feat);
      result.log.push_back(res.record);
      ++step;
      if (phase == Phase::kWarmup && (step % cfg.snapshot_interval() == 0 || i + 1 == steps)) snapshot();
      if (files.enabled() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
        checkpoint(files.dir() / "checkpoints" / step_name(step));
    }
  };

  if (cfg.routing == RouterTraining::kRouter && cfg.warmup_steps > 0) {
    ParamSet<float> routers;
    for_each_moe_tensor(student, [&](const std::string& name, Tensor<float>& t, bool is_router) {
      if (is_router) routers.add(name, t);
    });
    snapshot();
    run_phase(Phase::kWarmup, cfg.warmup_steps, routers);
  }
  ParamSet<float> experts;
  for_each_moe_tensor(student, [&](const std::string& name, Tensor<float>& t, bool is_router) {
    if (!is_router) experts.add(name, t);
  });
  // Random routing has no warmup; its steps go to the experts so both arms
  // take the same number of optimizer steps.
  const std::size_t expert_steps =
      cfg.routing == RouterTraining::kRandom ? cfg.warmup_steps + cfg.train_steps : cfg.train_steps;
  run_phase(Phase::kExperts, expert_steps, experts);
  if (files.enabled()) checkpoint(files.dir() / "student.json");
  result.student = std::move(student);
  return result;
}

PretrainResult pretrain_teacher(const ModelConfig& model, const PretrainConfig& cfg, const Dataset& data,
                                std::size_t seq_len, const TrainIo& io) {
  if (seq_len > model.max_seq) throw ConfigError("seq_len exceeds model.max_seq");
  PretrainResult result;
  result.model = init_model<float>(model, cfg.seed);
  ParamSet<float> params;
  for_each_tensor(result.model, [&](const std::string& name, Tensor<float>& t) { params.add(name, t); });
  RunFiles files(io, "pretrain_metrics.jsonl", false);
  BatchSampler sampler(data.train, cfg.batch_size, cfg.seed);
  Adam adam(cfg.adam);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto batch = sampler.next();
    Graph<float> g(&params);
    Var loss = g.cross_entropy(lm_graph(g, result.model, batch.inputs), batch.targets);
    LossBreakdown rec;
    rec.step = step;
    rec.phase = "pretrain";
    rec.l_ft = rec.l_overall = g.value(loss)[0];
    rec.lr = cfg.adam.lr;
    if (!finite(rec.l_ft)) throw DivergenceError("non-finite pretraining loss at step " + std::to_string(step));
    params.zero_grad();
    g.backward(loss);
    rec.grad_norm = adam.step(params);
    files.metric(rec, false);
    result.log.push_back(rec);
  }
  if (files.enabled()) save_model(io.dir / "teacher.json", result.model, Json{{"pretrain", cfg.to_json()}});
  return result;
}

}  // namespace moesplit
