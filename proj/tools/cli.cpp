#include "moesplit/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "moesplit/analysis.hpp"
#include "moesplit/errors.hpp"
#include "moesplit/factorization.hpp"
#include "moesplit/train.hpp"

namespace moesplit {
namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::string out;
  std::string teacher;
  std::string student;
  std::string trace;
  std::string strategy;
  std::string routing;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> experts;
  std::optional<std::size_t> active;
  std::optional<std::size_t> routers;
  std::optional<std::size_t> seq_len;
  std::size_t samples = 1000;
  std::size_t window = 3;
};

void write_json(const fs::path& path, const Json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw CheckpointError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

/// Loads the config and applies command-line overrides, re-running validation.
RunConfig load_config(const Options& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  Json j = rc.to_json();
  if (o.experts) j["moe"]["experts"] = *o.experts;
  if (o.active) j["moe"]["active"] = *o.active;
  if (o.routers) j["moe"]["routers_per_layer"] = *o.routers;
  if (o.seq_len) j["data"]["seq_len"] = *o.seq_len;
  if (!o.strategy.empty()) j["strategy"] = o.strategy;
  if (o.seed) {
    j["pretrain"]["seed"] = *o.seed;
    if (j.contains("train")) j["train"]["seed"] = *o.seed;
  }
  if (!o.routing.empty() && j.contains("train")) j["train"]["routing"] = o.routing;
  return RunConfig::from_json(j);
}

const TrainConfig& need_train(const RunConfig& rc) {
  if (!rc.train) throw ConfigError("missing config field 'train'");
  return *rc.train;
}

StudentWeights<float> student_for(const RunConfig& rc, const ModelWeights<float>& teacher, const Dataset& data,
                                  const Options& o) {
  if (!o.student.empty()) return load_student(o.student);
  if (teacher.config != rc.model) throw ConfigError("teacher checkpoint does not match the model section of the config");
  const std::uint64_t seed = o.seed ? *o.seed : rc.train ? rc.train->seed : 0;
  const double router_std = rc.train ? rc.train->router_std : 0.02;
  const TokenBatch calib = probe_batch(data, 8);
  return build_student(teacher, rc.moe, rc.strategy, seed, router_std, &calib);
}

int cmd_pretrain(const Options& o, std::ostream& out) {
  const RunConfig rc = load_config(o);
  const Dataset data = load_dataset(rc.data);
  write_json(fs::path(o.out) / "config.json", rc.to_json());
  auto res = pretrain_teacher(rc.model, rc.pretrain, data, rc.data.seq_len, {o.out, &out});
  out << "teacher " << (fs::path(o.out) / "teacher.json").string() << " final l_ft "
      << format_real(res.log.empty() ? 0.0 : res.log.back().l_ft) << '\n';
  return 0;
}

int cmd_factorize(const Options& o, std::ostream& out) {
  const RunConfig rc = load_config(o);
  const auto teacher = load_model(o.teacher);
  const Dataset data = load_dataset(rc.data);
  const auto student = student_for(rc, teacher, data, o);
  const auto path = fs::path(o.out) / "student.json";
  save_student(path, student, Json{{"strategy", to_string(rc.strategy)}});
  out << "student " << path.string() << " N=" << rc.moe.experts << " K=" << rc.moe.active << '\n';
  return 0;
}

int cmd_verify(const Options& o, std::ostream& out, std::ostream& err) {
  const auto teacher = load_model(o.teacher);
  const auto student = load_student(o.student);
  if (student.layers.size() != teacher.blocks.size()) throw ContractError("student and teacher layer counts differ");
  const std::uint64_t seed = o.seed.value_or(0);
  Json layers = Json::array();
  bool pass = true;
  for (std::size_t l = 0; l < teacher.blocks.size(); ++l) {
    auto cert = verify_equivalence(teacher.blocks[l].ffn.cast<double>(), student.layers[l].bank.cast<double>(),
                                   o.samples, Tolerance{}, seed + l);
    pass = pass && cert.pass;
    Json j = cert.to_json();
    j["layer"] = l;
    layers.push_back(std::move(j));
  }
  const auto path = fs::path(o.out) / "certificate.json";
  write_json(path, Json{{"pass", pass}, {"layers", layers}});
  if (!pass) {
    err << "verification failed; certificate " << path.string() << '\n';
    return 1;
  }
  out << "verification passed; certificate " << path.string() << '\n';
  return 0;
}

int cmd_train(const Options& o, std::ostream& out) {
  const RunConfig rc = load_config(o);
  const TrainConfig& tc = need_train(rc);
  const auto teacher = load_model(o.teacher);
  const Dataset data = load_dataset(rc.data);
  auto student = student_for(rc, teacher, data, o);
  write_json(fs::path(o.out) / "config.json", rc.to_json());
  auto res = run_training(teacher, std::move(student), tc, data, {o.out, &out});
  out << "student " << (fs::path(o.out) / "student.json").string() << " steps " << res.log.size() << '\n';
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const RunConfig rc = load_config(o);
  const auto teacher = load_model(o.teacher);
  const Dataset data = load_dataset(rc.data);
  const auto t = evaluate(teacher, data.heldout);
  Json report{{"teacher", t.to_json()}};
  if (!o.student.empty()) {
    const auto student = load_student(o.student);
    // Without --routing, use what the student was trained with.
    std::string routing = o.routing;
    if (routing.empty()) {
      const Json meta = Checkpoint::load(o.student).meta;
      routing = meta.contains("train") ? meta["train"].value("routing", "router") : "router";
    }
    const bool random = routing == "random";
    const std::uint64_t seed = o.seed ? *o.seed : rc.train ? rc.train->eval_seed : 7;
    auto s = evaluate(student, data.heldout, random ? RoutingMode::kRandom : RoutingMode::kRouter, seed);
    compare_to_teacher(s, t);
    report["student"] = s.to_json();
    report["routing"] = random ? "random" : "router";
  }
  if (!o.out.empty()) write_json(fs::path(o.out) / "eval.json", report);
  out << report.dump(2) << '\n';
  return 0;
}

int cmd_flops(const Options& o, std::ostream& out) {
  const RunConfig rc = load_config(o);
  const Json report = count_flops(rc.model, rc.moe, rc.data.seq_len).to_json();
  if (!o.out.empty()) write_json(fs::path(o.out) / "flops.json", report);
  out << report.dump(2) << '\n';
  return 0;
}

int cmd_routes(const Options& o, std::ostream& out) {
  std::ifstream in(o.trace);
  if (!in) throw IngestError("cannot read route trace " + o.trace);
  const auto records = read_route_trace_csv(in);
  const auto stats = route_stats(records);
  const Json report = stats.to_json(o.window);
  if (!o.out.empty()) write_json(fs::path(o.out) / "route_stats.json", report);
  const auto smooth = stats.smoothed_churn(o.window);
  out << "snapshots " << stats.snapshots.size() << " layers " << stats.layers << " tokens " << stats.tokens << '\n';
  if (!smooth.empty()) {
    out << "churn first " << format_real(stats.churn.front()) << " last " << format_real(stats.churn.back())
        << " smoothed last " << format_real(smooth.back()) << '\n';
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Split dense transformer FFNs into routed experts, train the routers, and analyse the result",
               "moesplit"};
  app.require_subcommand(1);
  Options o;

  auto config = [&](CLI::App* c, bool required) {
    auto* opt = c->add_option("--config", o.config, "JSON run config");
    if (required) opt->required();
    opt->check(CLI::ExistingFile);
  };
  auto moe_overrides = [&](CLI::App* c) {
    c->add_option("--N", o.experts, "experts per layer");
    c->add_option("--K", o.active, "active experts per token");
    c->add_option("--routers", o.routers, "routers per layer");
    c->add_option("--strategy", o.strategy, "contiguous | random | coactivation");
  };

  auto* pretrain = app.add_subcommand("pretrain", "train the dense teacher");
  config(pretrain, true);
  pretrain->add_option("--out", o.out, "output directory")->required();
  pretrain->add_option("--seed", o.seed, "override pretrain.seed");

  auto* factorize = app.add_subcommand("factorize", "split the teacher into experts and attach routers");
  config(factorize, true);
  factorize->add_option("--teacher", o.teacher, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  factorize->add_option("--out", o.out, "output directory")->required();
  factorize->add_option("--seed", o.seed, "permutation and router seed");
  moe_overrides(factorize);

  auto* verify = app.add_subcommand("verify", "check that all experts together reproduce the dense FFN");
  config(verify, false);
  verify->add_option("--teacher", o.teacher, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  verify->add_option("--student", o.student, "student checkpoint")->required()->check(CLI::ExistingFile);
  verify->add_option("--out", o.out, "output directory")->required();
  verify->add_option("--samples", o.samples, "random inputs per layer");
  verify->add_option("--seed", o.seed, "input seed");

  auto* train = app.add_subcommand("train", "router warmup, then expert tuning");
  config(train, true);
  train->add_option("--teacher", o.teacher, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  train->add_option("--student", o.student, "start from this student instead of a fresh split")
      ->check(CLI::ExistingFile);
  train->add_option("--out", o.out, "output directory")->required();
  train->add_option("--seed", o.seed, "override train.seed");
  train->add_option("--routing", o.routing, "router | random")->check(CLI::IsMember({"router", "random"}));
  moe_overrides(train);

  auto* eval = app.add_subcommand("eval", "held-out cross-entropy and maintenance");
  config(eval, true);
  eval->add_option("--teacher", o.teacher, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--student", o.student, "student checkpoint")->check(CLI::ExistingFile);
  eval->add_option("--out", o.out, "output directory");
  eval->add_option("--seed", o.seed, "seed for random routing");
  eval->add_option("--routing", o.routing, "router | random")->check(CLI::IsMember({"router", "random"}));

  auto* flops = app.add_subcommand("flops", "analytic FLOPs report");
  config(flops, false);
  flops->add_option("--out", o.out, "output directory");
  flops->add_option("--seq-len", o.seq_len, "sequence length");
  moe_overrides(flops);

  auto* routes = app.add_subcommand("routes", "usage, entropy and churn of a route trace");
  routes->add_option("--trace", o.trace, "routes.csv from train")->required()->check(CLI::ExistingFile);
  routes->add_option("--out", o.out, "output directory");
  routes->add_option("--window", o.window, "churn smoothing window")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (*pretrain) return cmd_pretrain(o, out);
    if (*factorize) return cmd_factorize(o, out);
    if (*verify) return cmd_verify(o, out, err);
    if (*train) return cmd_train(o, out);
    if (*eval) return cmd_eval(o, out);
    if (*flops) return cmd_flops(o, out);
    if (*routes) return cmd_routes(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace moesplit
