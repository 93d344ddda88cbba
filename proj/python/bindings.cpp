#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "saelab/activations.hpp"
#include "saelab/checkpoint.hpp"
#include "saelab/cli.hpp"
#include "saelab/datagen.hpp"
#include "saelab/error.hpp"
#include "saelab/metrics.hpp"
#include "saelab/report_io.hpp"
#include "saelab/training.hpp"

namespace py = pybind11;
using namespace saelab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw Error(ErrorKind::Shape, "expected a 2-d array, got " + std::to_string(a.ndim()) + "-d");
  Matrix m(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), m.data().begin());
  return m;
}

Vector to_vector(const Array& a) {
  if (a.ndim() != 1) throw Error(ErrorKind::Shape, "expected a 1-d array, got " + std::to_string(a.ndim()) + "-d");
  return Vector(a.data(), a.data() + a.size());
}

Array to_array(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

Array to_array(const Vector& v) {
  Array out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::list codes_to_py(const std::vector<SparseCode>& codes) {
  py::list out;
  for (const auto& code : codes) {
    py::list token;
    for (const auto& c : code) token.append(py::make_tuple(c.expert, c.feature, c.value));
    out.append(token);
  }
  return out;
}

std::vector<SparseCode> codes_from_py(const py::iterable& codes) {
  std::vector<SparseCode> out;
  for (const auto& token : codes) {
    SparseCode code;
    for (const auto& item : token.cast<py::iterable>()) {
      const auto t = item.cast<py::tuple>();
      if (t.size() == 2) {
        code.push_back({t[0].cast<std::uint32_t>(), t[1].cast<std::uint32_t>(), 1.0});
      } else {
        code.push_back({t[0].cast<std::uint32_t>(), t[1].cast<std::uint32_t>(), t[2].cast<double>()});
      }
    }
    out.push_back(std::move(code));
  }
  return out;
}

py::dict report_to_dict(const MetricsReport& r) {
  py::dict d;
  for (const auto& [name, value] : metric_rows(r)) d[py::str(name)] = value;
  return d;
}

py::dict step_to_dict(const StepReport& r) {
  py::dict d;
  d["step"] = r.step;
  d["recon_loss"] = r.recon_loss;
  d["aux_loss"] = r.aux_loss;
  d["total_loss"] = r.total_loss;
  d["mean_l0"] = r.mean_l0;
  d["load"] = r.load;
  d["mean_probs"] = r.mean_probs;
  d["omega"] = r.omega;
  return d;
}

/// Python-facing handle on a trained or loaded model.
struct Model {
  SaeModel m;

  std::string architecture() const { return to_string(architecture_of(m)); }
  std::size_t d_model() const { return d_model_of(m); }
  std::size_t k() const { return k_of(m); }
  std::size_t n_experts() const {
    const auto* s = std::get_if<ScaleSae>(&m);
    return s ? s->n_experts : 1;
  }
  std::size_t n_features() const {
    return std::visit([](const auto& x) { return x.n_features(); }, m);
  }
  std::optional<double> omega() const {
    const auto* s = std::get_if<ScaleSae>(&m);
    return s ? std::optional<double>(s->omega) : std::nullopt;
  }
  std::string scaling_mode() const {
    const auto* s = std::get_if<ScaleSae>(&m);
    return to_string(s ? s->scaling_mode : ScalingMode::Off);
  }
};

}  // namespace

PYBIND11_MODULE(_core, mod) {
  mod.doc() = "Sparse autoencoder lab: dense TopK and multi-expert scaled SAEs";

  static py::exception<Error> error_type(mod, "SaelabError", PyExc_RuntimeError);
  static py::exception<ParseError> parse_error_type(mod, "ParseError", error_type.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ParseError& e) {
      py::set_error(parse_error_type, e.what());
    } catch (const Error& e) {
      py::set_error(error_type, e.what());
    }
  });

  // -- data ---------------------------------------------------------------
  mod.def(
      "gen_synthetic",
      [](std::size_t d_model, std::size_t n_true_features, std::size_t n_tokens, std::uint64_t seed,
         double sparsity, double noise, const std::string& dist, std::size_t n_groups) {
        SyntheticSpec spec;
        spec.d_model = d_model;
        spec.n_true_features = n_true_features;
        spec.n_tokens = n_tokens;
        spec.seed = seed;
        spec.feature_sparsity = sparsity;
        spec.noise_std = noise;
        spec.value_distribution = parse_value_distribution(dist);
        spec.n_groups = n_groups;
        auto [batch, truth] = gen_synthetic(spec);
        return py::make_tuple(to_array(batch.values), batch.labels, to_array(truth.dictionary),
                              codes_to_py(truth.codes));
      },
      py::arg("d_model") = 32, py::arg("n_true_features") = 128, py::arg("n_tokens") = 50000,
      py::arg("seed") = 0, py::arg("sparsity") = 4.0, py::arg("noise") = 0.01, py::arg("dist") = "uniform",
      py::arg("n_groups") = 0,
      "Synthetic superposition data: (activations, labels, dictionary, true codes).");

  mod.def(
      "read_activations",
      [](const std::string& path) {
        const auto b = read_activations(path);
        return py::make_tuple(to_array(b.values), b.labels);
      },
      py::arg("path"));
  mod.def(
      "write_activations",
      [](const std::string& path, const Array& values, std::vector<std::string> labels) {
        ActivationBatch b{to_matrix(values), std::move(labels)};
        write_activations(b, path);
        return hex64(fnv1a64(serialize_activations(b)));
      },
      py::arg("path"), py::arg("values"), py::arg("labels") = std::vector<std::string>{},
      "Write an SAEA file; returns its FNV-1a checksum.");
  mod.def("fnv1a64", [](const py::bytes& b) { return hex64(fnv1a64(std::string(b))); });

  // -- config ---------------------------------------------------------------
  py::class_<TrainConfig>(mod, "TrainConfig")
      .def(py::init<>())
      .def_property(
          "architecture", [](const TrainConfig& c) { return to_string(c.architecture); },
          [](TrainConfig& c, const std::string& s) { c.architecture = parse_architecture(s); })
      .def_readwrite("d_model", &TrainConfig::d_model)
      .def_readwrite("n_experts", &TrainConfig::n_experts)
      .def_readwrite("expert_width", &TrainConfig::expert_width)
      .def_readwrite("e_active", &TrainConfig::e_active)
      .def_readwrite("k", &TrainConfig::k)
      .def_readwrite("alpha", &TrainConfig::alpha)
      .def_property(
          "scaling_mode", [](const TrainConfig& c) { return to_string(c.scaling_mode); },
          [](TrainConfig& c, const std::string& s) { c.scaling_mode = parse_scaling_mode(s); })
      .def_readwrite("learn_rate", &TrainConfig::learn_rate)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("n_steps", &TrainConfig::n_steps)
      .def_readwrite("log_interval", &TrainConfig::log_interval)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("decoder_renorm", &TrainConfig::decoder_renorm)
      .def_readwrite("output_b_pre", &TrainConfig::output_b_pre)
      .def("validate", &TrainConfig::validate)
      .def("to_text", &TrainConfig::to_text)
      .def("set", [](TrainConfig& c, const std::string& kv) { apply_config_override(c, kv); }, py::arg("assignment"))
      .def("__repr__", [](const TrainConfig& c) { return "<TrainConfig\n" + c.to_text() + ">"; });

  mod.def("parse_config", [](const std::string& text) { return parse_config(text); }, py::arg("text"));
  mod.def("load_config", &load_config, py::arg("path"));
  mod.def("preset_names", &preset_names);
  mod.def("preset_config", &preset_config, py::arg("name"));

  // -- models ---------------------------------------------------------------
  py::class_<Model>(mod, "Model")
      .def_property_readonly("architecture", &Model::architecture)
      .def_property_readonly("d_model", &Model::d_model)
      .def_property_readonly("k", &Model::k)
      .def_property_readonly("n_experts", &Model::n_experts)
      .def_property_readonly("n_features", &Model::n_features)
      .def_property_readonly("omega", &Model::omega)
      .def_property_readonly("scaling_mode", &Model::scaling_mode)
      .def("encode", [](const Model& self, const Array& x) { return codes_to_py(encode_batch(self.m, to_matrix(x))); },
           py::arg("x"), "Active latents per token as (expert, feature, value) tuples.")
      .def("reconstruct", [](const Model& self, const Array& x) { return to_array(reconstruct_batch(self.m, to_matrix(x))); },
           py::arg("x"))
      .def("decoder_features", [](const Model& self) { return to_array(decoder_features(self.m)); })
      .def(
          "loss",
          [](const Model& self, const Array& x, double alpha) {
            const auto l = evaluate_loss(self.m, to_matrix(x), alpha);
            py::dict d;
            d["recon"] = l.recon;
            d["aux"] = l.aux;
            d["total"] = l.total;
            d["mean_l0"] = l.mean_l0;
            d["load"] = l.routing.load;
            d["mean_probs"] = l.routing.mean_probs;
            return d;
          },
          py::arg("x"), py::arg("alpha") = 0.0)
      .def(
          "route",
          [](const Model& self, const Array& x) {
            const auto* s = std::get_if<ScaleSae>(&self.m);
            if (!s) throw Error(ErrorKind::Capability, "architecture lacks experts");
            const auto r = route(*s, to_vector(x));
            return py::make_tuple(r.selected, to_array(r.probs));
          },
          py::arg("x"), "Selected experts and router probabilities for one token.")
      .def("save", [](const Model& self, const std::string& path) { write_checkpoint(self.m, path); }, py::arg("path"))
      .def("to_bytes", [](const Model& self) { return py::bytes(serialize_checkpoint(self.m)); })
      .def("__repr__", [](const Model& self) {
        return "<Model " + self.architecture() + " d_model=" + std::to_string(self.d_model()) +
               " features=" + std::to_string(self.n_features()) + " k=" + std::to_string(self.k()) + ">";
      });

  mod.def("load_model", [](const std::string& path) { return Model{read_checkpoint(path)}; }, py::arg("path"));
  mod.def(
      "init_model",
      [](const TrainConfig& cfg, const Array& x) {
        ActivationBatch data{to_matrix(x), {}};
        return Model{init_model(cfg, data)};
      },
      py::arg("config"), py::arg("x"));
  mod.def(
      "train",
      [](const TrainConfig& cfg, const Array& x) {
        ActivationBatch data{to_matrix(x), {}};
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(cfg, data);
        }
        py::list reports;
        for (const auto& rep : r.reports) reports.append(step_to_dict(rep));
        return py::make_tuple(Model{std::move(r.model)}, reports);
      },
      py::arg("config"), py::arg("x"), "Train from scratch; returns (model, step reports).");

  // -- metrics --------------------------------------------------------------
  mod.def("recon_loss", [](const Array& x, const Array& x_hat) { return recon_loss(to_matrix(x), to_matrix(x_hat)); });
  mod.def("aux_loss", [](const Array& f, const Array& p) { return aux_loss(to_vector(f), to_vector(p), f.size()); },
          py::arg("f"), py::arg("p"));
  mod.def("loss_recovered", &loss_recovered, py::arg("l_zero"), py::arg("l_recon"), py::arg("l_orig"));
  mod.def(
      "redundancy_fraction",
      [](const Array& features, double threshold) { return redundancy_fraction(to_matrix(features), threshold).fraction; },
      py::arg("features"), py::arg("threshold") = 0.9);
  mod.def(
      "activation_similarity",
      [](const py::iterable& codes, std::size_t k_total) { return activation_similarity(codes_from_py(codes), k_total); },
      py::arg("codes"), py::arg("k_total"));
  mod.def(
      "overlap_histogram",
      [](const py::iterable& codes, std::size_t k_total) { return overlap_histogram(codes_from_py(codes), k_total).counts; },
      py::arg("codes"), py::arg("k_total"));
  mod.def(
      "dictionary_recovery",
      [](const Array& learned, const Array& truth) { return dictionary_recovery(to_matrix(learned), to_matrix(truth)); },
      py::arg("learned"), py::arg("truth"));
  mod.def(
      "intra_inter_similarity",
      [](const Model& model, std::size_t samples, std::uint64_t seed) {
        const auto* s = std::get_if<ScaleSae>(&model.m);
        if (!s) throw Error(ErrorKind::Capability, "architecture lacks experts");
        Rng rng(seed);
        const auto r = intra_inter_similarity(*s, samples, rng);
        return py::make_tuple(r.intra, r.inter);
      },
      py::arg("model"), py::arg("samples") = 32, py::arg("seed") = 0);
  mod.def(
      "evaluate",
      [](const Model& model, const Array& x, std::optional<Array> truth_dictionary,
         std::optional<std::tuple<double, double, double>> losses, std::size_t samples, std::uint64_t seed) {
        ActivationBatch data{to_matrix(x), {}};
        EvalOptions opts;
        opts.inter_samples = samples;
        opts.seed = seed;
        GroundTruth truth;
        if (truth_dictionary) {
          truth.dictionary = to_matrix(*truth_dictionary);
          opts.truth = &truth;
        }
        if (losses) opts.losses = LossTriple{std::get<0>(*losses), std::get<1>(*losses), std::get<2>(*losses)};
        return report_to_dict(evaluate(model.m, data, opts));
      },
      py::arg("model"), py::arg("x"), py::arg("truth_dictionary") = py::none(), py::arg("losses") = py::none(),
      py::arg("samples") = 32, py::arg("seed") = 0);

  // -- command line ---------------------------------------------------------
  mod.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run the saelab command line in-process: (exit code, stdout, stderr).");

#ifdef VERSION_INFO
#define SAELAB_STR(x) #x
#define SAELAB_XSTR(x) SAELAB_STR(x)
  mod.attr("__version__") = SAELAB_XSTR(VERSION_INFO);
#else
  mod.attr("__version__") = "dev";
#endif
}
