#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "curvelang/commands.hpp"
#include "curvelang/error.hpp"

namespace py = pybind11;
using namespace curvelang;

namespace {

py::dict record_dict(const theory::VerificationRecord& r) {
  py::dict d;
  d["claim"] = r.claim;
  d["lhs"] = r.lhs;
  d["rhs"] = r.rhs;
  d["residual"] = r.residual;
  d["tolerance"] = r.tolerance;
  d["passed"] = r.passed;
  d["asserted"] = r.asserted;
  d["note"] = r.note;
  return d;
}

py::list records(const std::vector<theory::VerificationRecord>& rs) {
  py::list out;
  for (const auto& r : rs) out.append(record_dict(r));
  return out;
}

RunConfig config_from(const py::dict& overrides) {
  RunConfig c;
  for (const auto& [k, v] : overrides) c.set(py::str(k), py::str(v));
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_curvelang, m) {
  m.doc() = "Sentence-curve language modeling core";

  static py::exception<Error> error(m, "CurvelangError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  m.def("basis_matrix", &spline::basis_matrix, py::arg("length"), py::arg("n_control"),
        py::arg("degree"), py::arg("margin") = 0.01, "B-spline basis matrix B (N x L)");
  m.def(
      "pseudo_inverse",
      [](const spline::Matrix& b) { return spline::pseudo_inverse(b).pinv; }, py::arg("b"));
  m.def(
      "resolve_dims",
      [](int length, double n_ratio, double eta_ratio, int min_degree) {
        CurveConfig c;
        c.n_ratio = n_ratio;
        c.degree = DegreeRatio{eta_ratio};
        c.min_degree = min_degree;
        const auto d = resolve_dims(length, c);
        return py::make_tuple(d.n_control, d.degree);
      },
      py::arg("length"), py::arg("n_ratio") = 2.0, py::arg("eta_ratio") = 0.1,
      py::arg("min_degree") = 2, "(N, degree) for a sentence length");
  m.def(
      "spectrum",
      [](int length, double n_ratio, double eta_ratio, int dim) {
        CurveConfig c;
        c.n_ratio = n_ratio;
        c.degree = DegreeRatio{eta_ratio};
        return cli::cmd_spectrum(length, c, dim).dump();
      },
      py::arg("length"), py::arg("n_ratio") = 2.0, py::arg("eta_ratio") = 0.1, py::arg("dim") = 1,
      "spectral report as a JSON string");
  m.def(
      "reconstruction_error",
      [](int length, double n_ratio, double eta_ratio, int dim, int trials, std::uint64_t seed) {
        ReconstructionConfig c;
        c.n_ratio = n_ratio;
        c.degree = DegreeRatio{eta_ratio};
        c.dim = dim;
        return reconstruction_error(length, c, trials, seed);
      },
      py::arg("length"), py::arg("n_ratio") = 2.0, py::arg("eta_ratio") = 0.0, py::arg("dim") = 16,
      py::arg("trials") = 100, py::arg("seed") = 0);

  m.def("distance_correlation", &theory::distance_correlation, py::arg("x"), py::arg("y"));
  m.def(
      "relaxation_posterior_check",
      [](const spline::Matrix& e, const spline::Vector& z, double sigma2) {
        return record_dict(theory::relaxation_posterior_check(e, z, sigma2));
      },
      py::arg("embeddings"), py::arg("z"), py::arg("sigma2") = 1.0);
  m.def(
      "lemma1_stationarity",
      [](const spline::Matrix& e, int target) {
        return record_dict(theory::lemma1_stationarity(e, target));
      },
      py::arg("embeddings"), py::arg("target"));
  m.def(
      "verify", [](const std::string& suite, std::uint64_t seed) { return records(cli::run_suite(suite, seed)); },
      py::arg("suite") = "all", py::arg("seed") = 0);

  m.def(
      "toy_corpus",
      [](const std::string& kind, int lines, int length, std::uint64_t seed) {
        return data::toy_corpus(data::parse_toy_kind(kind), lines, length, seed);
      },
      py::arg("kind"), py::arg("lines") = 64, py::arg("length") = 16, py::arg("seed") = 0);
  m.def("config_keys", &RunConfig::keys);
  m.def(
      "default_config",
      [] {
        const RunConfig c;
        py::dict d;
        for (const auto& k : RunConfig::keys()) d[py::str(k)] = c.get(k);
        return d;
      },
      "every config key with its default, as strings");

  m.def(
      "train",
      [](const py::dict& overrides, const std::string& resume) {
        const RunConfig c = config_from(overrides);
        cli::TrainReport r;
        {
          py::gil_scoped_release release;
          r = cli::cmd_train(c, resume);
        }
        py::list totals;
        for (const auto& rec : r.history) totals.append(rec.total);
        py::dict d;
        d["first_step"] = r.first_step;
        d["last_step"] = r.last_step;
        d["losses"] = totals;
        d["checkpoint"] = r.checkpoint;
        d["losses_csv"] = r.losses_csv;
        return d;
      },
      py::arg("config"), py::arg("resume") = "",
      "train with key/value overrides; returns per-step total losses and paths");
  m.def(
      "sample",
      [](const std::string& checkpoint, int length, int steps, int n, std::uint64_t seed,
         const std::string& out) {
        return cli::cmd_sample(checkpoint, length, steps, n, seed, out).texts;
      },
      py::arg("checkpoint"), py::arg("length") = 16, py::arg("steps") = 20, py::arg("n") = 8,
      py::arg("seed") = 0, py::arg("out") = "samples");
  m.def(
      "probe",
      [](const std::string& a, const std::string& b, const py::dict& overrides) {
        return cli::cmd_probe(a, b, config_from(overrides)).dump();
      },
      py::arg("checkpoint_a"), py::arg("checkpoint_b"), py::arg("config") = py::dict(),
      "probe comparison as a JSON string");
}
