#include "moesplit/moe.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "moesplit/errors.hpp"
#include "moesplit/ops.hpp"

namespace moesplit {

void MoeConfig::validate() const {
  if (experts < 1) throw ConfigError("moe.experts must be >= 1");
  if (active < 1 || active > experts) {
    throw ConfigError("moe.active (K=" + std::to_string(active) + ") must lie in [1, " + std::to_string(experts) +
                      "]");
  }
  if (routers_per_layer < 1 || experts % routers_per_layer != 0 || active % routers_per_layer != 0) {
    throw ConfigError("moe.routers_per_layer (" + std::to_string(routers_per_layer) +
                      ") must divide both moe.experts and moe.active");
  }
}

template <typename T>
RouterParams<T> init_router(std::size_t d_model, std::size_t experts, double stddev, std::mt19937_64& rng) {
  return {random_normal<T>({d_model, experts}, stddev, rng), Tensor<T>({experts})};
}

namespace {

template <typename T, typename Less>
std::vector<std::uint32_t> topk_by(std::span<const T> row, std::size_t k, Less before) {
  if (k > row.size()) {
    throw ContractError("top-k: K=" + std::to_string(k) + " exceeds " + std::to_string(row.size()) + " entries");
  }
  std::vector<std::uint32_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      if (before(row[a], row[b])) return true;
                      if (before(row[b], row[a])) return false;
                      return a < b;
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void check_groups(std::size_t n, std::size_t k, std::size_t groups) {
  if (groups == 0 || n % groups != 0 || k % groups != 0) {
    throw ContractError("cannot split " + std::to_string(n) + " experts / K=" + std::to_string(k) + " into " +
                        std::to_string(groups) + " router groups");
  }
  if (k < 1 || k > n) throw ContractError("K=" + std::to_string(k) + " out of range [1, " + std::to_string(n) + "]");
}

}  // namespace

template <typename T>
std::vector<std::uint32_t> topk_largest(std::span<const T> row, std::size_t k) {
  return topk_by(row, k, [](T a, T b) { return a > b; });
}

template <typename T>
std::vector<std::uint32_t> topk_smallest(std::span<const T> row, std::size_t k) {
  return topk_by(row, k, [](T a, T b) { return a < b; });
}

template <typename T>
Tensor<T> router_forward(const Tensor<T>& x, const RouterParams<T>& rp, std::size_t groups) {
  if (rp.w3.rank() != 2 || rp.w3.cols() != rp.b3.size() || x.cols() != rp.w3.shape()[0]) {
    throw DimensionError("router: input " + shape_str(x.shape()) + " with W3 " + shape_str(rp.w3.shape()) +
                         " and b3 " + shape_str(rp.b3.shape()));
  }
  return softmax_grouped(linear_forward(x, rp.w3, rp.b3), groups);
}

template <typename T>
Selection topk_select(const Tensor<T>& probs, std::size_t k, std::size_t groups) {
  const std::size_t n = probs.cols();
  check_groups(n, k, groups);
  const std::size_t gs = n / groups, gk = k / groups;
  Selection out(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    auto row = probs.row(r);
    for (std::size_t grp = 0; grp < groups; ++grp) {
      for (auto i : topk_largest<T>(row.subspan(grp * gs, gs), gk))
        out[r].push_back(static_cast<std::uint32_t>(grp * gs + i));
    }
  }
  return out;
}

Selection random_select(std::size_t tokens, const MoeConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t gs = cfg.group_size(), gk = cfg.active_per_group();
  Selection out(tokens);
  std::vector<std::uint32_t> pool(gs);
  for (auto& sel : out) {
    for (std::size_t grp = 0; grp < cfg.routers_per_layer; ++grp) {
      std::iota(pool.begin(), pool.end(), static_cast<std::uint32_t>(grp * gs));
      for (std::size_t i = 0; i < gk; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, gs - 1);
        std::swap(pool[i], pool[pick(rng)]);
      }
      sel.insert(sel.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(gk));
    }
    std::sort(sel.begin(), sel.end());
  }
  return out;
}

template <typename T>
Tensor<T> experts_forward(const Tensor<T>& x, const ExpertBank<T>& bank, const Selection& selected,
                          ExpertCounter* counter) {
  const std::size_t d = bank.d_model(), w = bank.width();
  if (x.cols() != d) {
    throw DimensionError("experts_forward: input " + shape_str(x.shape()) + " vs expert d_model " +
                         std::to_string(d));
  }
  if (selected.size() != x.rows()) {
    throw ContractError("experts_forward: " + std::to_string(selected.size()) + " selections for " +
                        std::to_string(x.rows()) + " tokens");
  }
  Tensor<T> y({x.rows(), d});
  std::vector<T> h(w);
  std::vector<bool> seen(bank.count());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::vector<std::uint32_t> order = selected[r];
    std::sort(order.begin(), order.end());
    std::fill(seen.begin(), seen.end(), false);
    T* yr = y.data().data() + r * d;
    const T* xr = x.data().data() + r * d;
    for (auto e : order) {
      if (e >= bank.count()) throw ContractError("expert index " + std::to_string(e) + " out of range");
      if (seen[e]) throw ContractError("expert index " + std::to_string(e) + " selected twice");
      seen[e] = true;
      const auto& ex = bank.experts[e];
      std::vector<T> acc(w, T(0));
      kernels::matmul_acc(xr, ex.w1.data().data(), acc.data(), 1, d, w);
      for (std::size_t c = 0; c < w; ++c) h[c] = silu_scalar(acc[c] + ex.b1[c]);
      kernels::matmul_acc(h.data(), ex.w2.data().data(), yr, 1, w, d);
      if (counter) ++counter->blocks;
    }
    for (std::size_t j = 0; j < d; ++j) yr[j] += bank.b2[j];
    if (counter) ++counter->tokens;
  }
  return y;
}

template <typename T>
MoeOutput<T> moe_ffn_forward(const Tensor<T>& x, const ExpertBank<T>& bank, const RouterParams<T>& rp,
                             const MoeConfig& cfg, std::size_t layer, std::size_t step, ExpertCounter* counter) {
  cfg.validate();
  if (rp.experts() != bank.count() || cfg.experts != bank.count()) {
    throw ContractError("moe config has " + std::to_string(cfg.experts) + " experts, router " +
                        std::to_string(rp.experts()) + ", bank " + std::to_string(bank.count()));
  }
  MoeOutput<T> out;
  const auto probs = router_forward(x, rp, cfg.routers_per_layer);
  out.record.step = step;
  out.record.layer = layer;
  out.record.selected = topk_select(probs, cfg.active, cfg.routers_per_layer);
  out.record.probs = probs.template cast<double>();
  out.y = experts_forward(x, bank, out.record.selected, counter);
  return out;
}

template <typename T>
StudentWeights<T> make_student(const ModelWeights<T>& teacher, const MoeConfig& cfg,
                               const std::vector<PermutationMap>& perms, std::uint64_t router_seed,
                               double router_std) {
  cfg.validate();
  if (perms.size() != teacher.blocks.size()) {
    throw ContractError("need one permutation per layer: got " + std::to_string(perms.size()) + " for " +
                        std::to_string(teacher.blocks.size()) + " layers");
  }
  StudentWeights<T> s;
  s.backbone = teacher;
  s.moe = cfg;
  std::mt19937_64 rng(router_seed);
  for (std::size_t l = 0; l < teacher.blocks.size(); ++l) {
    const auto& ffn = teacher.blocks[l].ffn;
    s.layers.push_back({split_ffn(ffn, perms[l], cfg.experts), init_router<T>(ffn.d_model(), cfg.experts, router_std, rng)});
  }
  return s;
}

namespace {

std::uint64_t selection_token(const std::vector<std::uint32_t>& sel) {
  std::uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (auto i : sel) h = (h ^ i) * 0x100000001b3ULL;
  return h;
}

}  // namespace

template <typename T>
Var student_graph(Graph<T>& g, const StudentWeights<T>& s, const TokenBatch& batch,
                  const StudentPassOptions<T>& options) {
  if (s.layers.size() != s.backbone.blocks.size()) throw ContractError("student has mismatched layer count");
  if (options.mode == RoutingMode::kRandom && options.rng == nullptr) {
    throw ContractError("random routing needs a generator");
  }
  const MoeConfig& cfg = s.moe;
  FfnHook<T> hook = [&](Graph<T>& gr, std::size_t layer, Var normed) {
    const auto& ml = s.layers[layer];
    LayerTrace<T> tr;
    tr.normed = normed;
    if (options.mode == RoutingMode::kRouter) {
      Var rin = options.detach_router_input ? gr.detach(normed) : normed;
      tr.probs = gr.softmax(gr.linear(rin, gr.weight(ml.router.w3), gr.weight(ml.router.b3)), cfg.routers_per_layer);
      tr.selected = topk_select(gr.value(tr.probs), cfg.active, cfg.routers_per_layer);
      for (const auto& sel : tr.selected) gr.note_decision(selection_token(sel));
    } else {
      tr.selected = random_select(gr.value(normed).rows(), cfg, *options.rng);
    }
    const std::size_t rows = tr.selected.size();
    std::vector<std::vector<std::uint8_t>> masks(ml.bank.count(), std::vector<std::uint8_t>(rows, 0));
    for (std::size_t r = 0; r < rows; ++r)
      for (auto e : tr.selected[r]) masks[e][r] = 1;
    std::vector<Var> w2s;
    for (const auto& ex : ml.bank.experts) {
      tr.activations.push_back(gr.silu(gr.linear(normed, gr.weight(ex.w1), gr.weight(ex.b1))));
      w2s.push_back(gr.weight(ex.w2));
    }
    tr.output = gr.add_bias(gr.expert_mix(tr.activations, w2s, std::move(masks)), gr.weight(ml.bank.b2));
    Var out = tr.output;
    if (options.traces) options.traces->push_back(std::move(tr));
    return out;
  };
  return lm_graph(g, s.backbone, batch, hook);
}

template <typename T>
Tensor<T> student_forward(std::span<const int> tokens, const StudentWeights<T>& s) {
  Graph<T> g(nullptr, false);
  TokenBatch batch{std::vector<int>(tokens.begin(), tokens.end()), 1, tokens.size()};
  return g.value(student_graph(g, s, batch));
}

Json moe_config_to_json(const MoeConfig& c) {
  return {{"experts", c.experts}, {"active", c.active}, {"routers_per_layer", c.routers_per_layer}};
}

MoeConfig moe_config_from_json(const Json& j) {
  MoeConfig c;
  c.experts = j.at("experts").get<std::size_t>();
  c.active = j.at("active").get<std::size_t>();
  c.routers_per_layer = j.value("routers_per_layer", std::size_t{1});
  c.validate();
  return c;
}

void save_student(const std::filesystem::path& manifest, const StudentWeights<float>& s, const Json& extra_meta) {
  CheckpointWriter w;
  for_each_tensor(s.backbone, [&](const std::string& name, const Tensor<float>& t) { w.add("backbone." + name, t); });
  for_each_moe_tensor(const_cast<StudentWeights<float>&>(s),
                      [&](const std::string& name, const Tensor<float>& t, bool) { w.add(name, t); });
  w.meta()["kind"] = "student";
  w.meta()["model"] = model_config_to_json(s.backbone.config);
  w.meta()["moe"] = moe_config_to_json(s.moe);
  Json perms = Json::array();
  for (const auto& l : s.layers) perms.push_back(l.bank.perm.to_json());
  w.meta()["permutations"] = std::move(perms);
  for (const auto& [k, v] : extra_meta.items()) w.meta()[k] = v;
  w.write(manifest);
}

StudentWeights<float> load_student(const std::filesystem::path& manifest) {
  const auto ck = Checkpoint::load(manifest);
  if (ck.meta.value("kind", "") != "student") {
    throw CheckpointError(manifest.string() + " is not a student checkpoint");
  }
  StudentWeights<float> s;
  s.backbone = model_from_checkpoint(ck, "backbone.");
  s.moe = moe_config_from_json(ck.meta.at("moe"));
  const auto& perms = ck.meta.at("permutations");
  if (perms.size() != s.backbone.config.layers) throw CheckpointError("permutation count does not match layers");
  s.layers.resize(s.backbone.config.layers);
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    s.layers[l].bank.experts.resize(s.moe.experts);
    s.layers[l].bank.perm = PermutationMap::from_json(perms[l]);
  }
  for_each_moe_tensor(s, [&](const std::string& name, Tensor<float>& t, bool) { t = ck.at(name); });
  return s;
}

// ---------------------------------------------------------------------------

namespace {

template <typename V>
std::string join(const V& values, bool reals) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ';';
    if (reals)
      out += format_real(static_cast<double>(values[i]));
    else
      out += std::to_string(values[i]);
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (s.back() == sep) out.emplace_back();
  return out;
}

std::vector<double> prob_row(const RoutingRecord& rec, std::size_t r) {
  if (rec.probs.empty()) return {};
  auto row = rec.probs.row(r);
  return {row.begin(), row.end()};
}

}  // namespace

void write_route_trace_csv(std::ostream& out, std::span<const RoutingRecord> records, bool header) {
  if (header) out << "step,layer,position,selected,probs\n";
  for (const auto& rec : records) {
    for (std::size_t r = 0; r < rec.selected.size(); ++r) {
      out << rec.step << ',' << rec.layer << ',' << r << ',' << join(rec.selected[r], false) << ','
          << join(prob_row(rec, r), true) << '\n';
    }
  }
}

std::vector<RoutingRecord> read_route_trace_csv(std::istream& in) {
  std::vector<RoutingRecord> out;
  std::vector<std::vector<double>> probs;
  auto flush = [&] {
    if (out.empty()) return;
    auto& rec = out.back();
    if (!probs.empty() && !probs.front().empty()) {
      const std::size_t n = probs.front().size();
      Tensor<double> p({probs.size(), n});
      for (std::size_t r = 0; r < probs.size(); ++r) {
        if (probs[r].size() != n) throw IngestError("route trace has ragged probability rows");
        std::copy(probs[r].begin(), probs[r].end(), p.row(r).begin());
      }
      rec.probs = std::move(p);
    }
    probs.clear();
  };
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("step,", 0) == 0) continue;
    const auto f = split(line, ',');
    if (f.size() != 5) throw IngestError("route trace line " + std::to_string(lineno) + ": expected 5 fields");
    try {
      const std::size_t step = std::stoull(f[0]), layer = std::stoull(f[1]), pos = std::stoull(f[2]);
      if (out.empty() || out.back().step != step || out.back().layer != layer || pos == 0) {
        flush();
        out.push_back({step, layer, {}, {}});
      }
      std::vector<std::uint32_t> sel;
      for (const auto& s : split(f[3], ';')) sel.push_back(static_cast<std::uint32_t>(std::stoul(s)));
      out.back().selected.push_back(std::move(sel));
      std::vector<double> p;
      for (const auto& s : split(f[4], ';')) p.push_back(std::stod(s));
      probs.push_back(std::move(p));
    } catch (const std::logic_error&) {
      throw IngestError("route trace line " + std::to_string(lineno) + ": malformed number");
    }
  }
  flush();
  return out;
}

void write_route_trace_jsonl(std::ostream& out, std::span<const RoutingRecord> records) {
  for (const auto& rec : records) {
    for (std::size_t r = 0; r < rec.selected.size(); ++r) {
      Json probs = Json::array();
      for (double p : prob_row(rec, r)) probs.push_back(real9(p));
      Json j{{"step", rec.step}, {"layer", rec.layer}, {"position", r}, {"selected", rec.selected[r]}, {"probs", probs}};
      out << j.dump() << '\n';
    }
  }
}

#define MOESPLIT_INSTANTIATE_MOE(T)                                                                               \
  template RouterParams<T> init_router<T>(std::size_t, std::size_t, double, std::mt19937_64&);                   \
  template std::vector<std::uint32_t> topk_largest<T>(std::span<const T>, std::size_t);                          \
  template std::vector<std::uint32_t> topk_smallest<T>(std::span<const T>, std::size_t);                         \
  template Tensor<T> router_forward<T>(const Tensor<T>&, const RouterParams<T>&, std::size_t);                   \
  template Selection topk_select<T>(const Tensor<T>&, std::size_t, std::size_t);                                 \
  template Tensor<T> experts_forward<T>(const Tensor<T>&, const ExpertBank<T>&, const Selection&, ExpertCounter*); \
  template MoeOutput<T> moe_ffn_forward<T>(const Tensor<T>&, const ExpertBank<T>&, const RouterParams<T>&,       \
                                           const MoeConfig&, std::size_t, std::size_t, ExpertCounter*);          \
  template StudentWeights<T> make_student<T>(const ModelWeights<T>&, const MoeConfig&,                           \
                                             const std::vector<PermutationMap>&, std::uint64_t, double);         \
  template Var student_graph<T>(Graph<T>&, const StudentWeights<T>&, const TokenBatch&,                          \
                                const StudentPassOptions<T>&);                                                   \
  template Tensor<T> student_forward<T>(std::span<const int>, const StudentWeights<T>&);

MOESPLIT_INSTANTIATE_MOE(float)
MOESPLIT_INSTANTIATE_MOE(double)

}  // namespace moesplit
