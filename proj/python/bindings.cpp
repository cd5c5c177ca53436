#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>
#include <sstream>

#include "moesplit/analysis.hpp"
#include "moesplit/cli.hpp"
#include "moesplit/errors.hpp"
#include "moesplit/factorization.hpp"
#include "moesplit/losses.hpp"
#include "moesplit/moe.hpp"

namespace py = pybind11;
using namespace moesplit;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<double>(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor<double>& t) {
  Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

py::object to_py(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

FfnWeights<double> ffn(const Array& w1, const Array& b1, const Array& w2, const Array& b2) {
  FfnWeights<double> w{to_tensor(w1), to_tensor(b1), to_tensor(w2), to_tensor(b2)};
  w.validate();
  return w;
}

PermutationMap permutation(const FfnWeights<double>& w, std::size_t experts, const std::string& strategy,
                           std::uint64_t seed, const std::optional<Array>& calib) {
  std::optional<Tensor<double>> c;
  if (calib) c = to_tensor(*calib);
  return build_permutation(parse_strategy(strategy), w.w1.cols(), experts, seed, c ? &*c : nullptr);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Dense FFN to routed-expert factorization, routing losses and analysis";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<IngestError>(m, "IngestError", PyExc_RuntimeError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);

  m.def(
      "split_ffn",
      [](const Array& w1, const Array& b1, const Array& w2, const Array& b2, std::size_t experts,
         const std::string& strategy, std::uint64_t seed, const std::optional<Array>& calib) {
        const auto w = ffn(w1, b1, w2, b2);
        const auto bank = split_ffn(w, permutation(w, experts, strategy, seed, calib), experts);
        py::list blocks;
        for (const auto& e : bank.experts)
          blocks.append(py::dict(py::arg("w1") = to_array(e.w1), py::arg("b1") = to_array(e.b1),
                                 py::arg("w2") = to_array(e.w2)));
        return py::dict(py::arg("experts") = blocks, py::arg("b2") = to_array(bank.b2),
                        py::arg("delta") = bank.perm.delta);
      },
      py::arg("w1"), py::arg("b1"), py::arg("w2"), py::arg("b2"), py::arg("experts"),
      py::arg("strategy") = "contiguous", py::arg("seed") = 0, py::arg("calib") = py::none(),
      "Split W1 [d, h], b1 [h], W2 [h, d], b2 [d] into equal-width experts.");

  m.def(
      "verify_split",
      [](const Array& w1, const Array& b1, const Array& w2, const Array& b2, std::size_t experts,
         const std::string& strategy, std::uint64_t seed, std::size_t samples) {
        const auto w = ffn(w1, b1, w2, b2);
        const auto bank = split_ffn(w, permutation(w, experts, strategy, seed, std::nullopt), experts);
        return to_py(verify_equivalence(w, bank, samples, Tolerance{}, seed).to_json());
      },
      py::arg("w1"), py::arg("b1"), py::arg("w2"), py::arg("b2"), py::arg("experts"),
      py::arg("strategy") = "contiguous", py::arg("seed") = 0, py::arg("samples") = 1000,
      "Equivalence certificate of the all-expert sum against the dense FFN.");

  m.def(
      "topk_select",
      [](const Array& probs, std::size_t k, std::size_t groups) { return topk_select(to_tensor(probs), k, groups); },
      py::arg("probs"), py::arg("k"), py::arg("groups") = 1);

  m.def(
      "pseudo_allocation",
      [](const Array& teacher_out, const Array& expert_outs, std::size_t k, std::size_t groups) {
        auto pa = pseudo_allocation(to_tensor(teacher_out), to_tensor(expert_outs), k, groups);
        return py::make_tuple(to_array(pa.distances), to_array(pa.mask));
      },
      py::arg("teacher_out"), py::arg("expert_outs"), py::arg("k"), py::arg("groups") = 1,
      "Distances [M, N] and 0/1 mask of the K closest experts per row.");

  m.def(
      "pa_loss", [](const Array& mask, const Array& probs, std::size_t experts) {
        return pa_loss(to_tensor(mask), to_tensor(probs), experts);
      },
      py::arg("mask"), py::arg("probs"), py::arg("experts"));
  m.def(
      "ft_loss", [](const Array& logits, const std::vector<int>& labels) { return ft_loss(to_tensor(logits), labels); },
      py::arg("logits"), py::arg("labels"));
  m.def(
      "balance_loss",
      [](const Array& probs, const Selection& selected, std::size_t k, std::size_t experts) {
        return balance_loss(to_tensor(probs), selected, k, experts);
      },
      py::arg("probs"), py::arg("selected"), py::arg("k"), py::arg("experts"));
  m.def("overall_loss", &overall_loss, py::arg("l_ft"), py::arg("l_pa"), py::arg("alpha") = 1.0);

  m.def(
      "count_flops",
      [](std::size_t d_model, std::size_t expansion, std::size_t layers, std::size_t heads, std::size_t experts,
         std::size_t active, std::size_t routers, std::size_t seq_len) {
        ModelConfig mc;
        mc.d_model = d_model;
        mc.expansion = expansion;
        mc.layers = layers;
        mc.heads = heads;
        mc.max_seq = seq_len;
        return to_py(count_flops(mc, MoeConfig{experts, active, routers}, seq_len).to_json());
      },
      py::arg("d_model") = 64, py::arg("expansion") = 4, py::arg("layers") = 2, py::arg("heads") = 4,
      py::arg("experts") = 4, py::arg("active") = 2, py::arg("routers") = 1, py::arg("seq_len") = 64);

  m.def(
      "route_stats",
      [](const std::string& trace_csv, std::size_t window) {
        std::ifstream in(trace_csv);
        if (!in) throw IngestError("cannot read route trace " + trace_csv);
        return to_py(route_stats(read_route_trace_csv(in)).to_json(window));
      },
      py::arg("trace_csv"), py::arg("window") = 3, "Usage, entropy and churn of a routes.csv trace.");

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "moesplit");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in-process; returns (exit code, stdout, stderr).");
}
