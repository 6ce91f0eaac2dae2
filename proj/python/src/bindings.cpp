#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "poroperm/cli.hpp"
#include "poroperm/metrics.hpp"
#include "poroperm/model.hpp"
#include "poroperm/model_check.hpp"
#include "poroperm/search.hpp"
#include "poroperm/volume.hpp"

namespace py = pybind11;
using namespace pybind11::literals;
using namespace poroperm;
using json = nlohmann::json;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

// Arrays are indexed [z, y, x] so that C order matches the x-fastest layout.
Volume3D volume_of(const FloatArray& a, bool binary) {
  if (a.ndim() != 3) throw py::value_error("volume must be a 3-D array indexed [z, y, x]");
  const Dims dims{static_cast<std::size_t>(a.shape(2)), static_cast<std::size_t>(a.shape(1)),
                  static_cast<std::size_t>(a.shape(0))};
  return Volume3D(dims, std::vector<float>(a.data(), a.data() + a.size()),
                  binary ? VolumeKind::binary : VolumeKind::grayscale);
}

FloatArray array_of(const Volume3D& v) {
  const auto& d = v.dims();
  FloatArray out({d.nz, d.ny, d.nx});
  std::copy(v.data().begin(), v.data().end(), out.mutable_data());
  return out;
}

std::vector<float> cube_of(const FloatArray& a) { return {a.data(), a.data() + a.size()}; }

py::dict labels_dict(const CoreLabels& l) { return py::dict("porosity"_a = l.porosity, "permeability_md"_a = l.permeability_md); }

ArchConfig arch_of(const std::string& text) {
  auto a = text.empty() ? ArchConfig{} : json::parse(text).get<ArchConfig>();
  a.validate();
  return a;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Voxel-volume pretraining and porosity/permeability regression";
  py::register_exception<Error>(m, "PoropermError", PyExc_RuntimeError);

  m.def(
      "generate_synthetic",
      [](std::vector<std::size_t> dims, double porosity, double corr_len, std::uint64_t seed, double kozeny_c) {
        if (dims.size() != 3) throw py::value_error("dims must be (nx, ny, nz)");
        SynthSpec spec{{dims[0], dims[1], dims[2]}, corr_len, porosity, seed, kozeny_c};
        const auto core = generate_synthetic(spec);
        return py::make_tuple(array_of(core.volume), labels_dict(core.labels));
      },
      "dims"_a, "porosity"_a = 0.25, "corr_len"_a = 2.0, "seed"_a = 0, "kozeny_c"_a = 5.0,
      "Synthetic binary volume ([z, y, x], 1 = pore) and its labels.");
  m.def(
      "porosity", [](const FloatArray& v) { return porosity(volume_of(v, true)); }, "volume"_a);
  m.def(
      "specific_surface", [](const FloatArray& v) { return specific_surface(volume_of(v, true)); }, "volume"_a);
  m.def("kozeny_carman", &kozeny_carman, "porosity"_a, "surface"_a, "c"_a = 5.0);
  m.def(
      "load_volume",
      [](const std::filesystem::path& path, bool invert) {
        const auto lv = load_volume(path, invert);
        return py::make_tuple(array_of(lv.volume), lv.labels ? py::object(labels_dict(*lv.labels)) : py::none());
      },
      "path"_a, "invert"_a = false);
  m.def(
      "save_volume",
      [](const std::filesystem::path& path, const FloatArray& v) { save_volume(path, volume_of(v, true), {}, {}); },
      "path"_a, "volume"_a);

  m.def(
      "rmse", [](const DoubleArray& p, const DoubleArray& t) {
        return rmse({p.data(), static_cast<std::size_t>(p.size())}, {t.data(), static_cast<std::size_t>(t.size())});
      },
      "pred"_a, "target"_a);
  m.def(
      "r_squared", [](const DoubleArray& p, const DoubleArray& t) {
        return r_squared({p.data(), static_cast<std::size_t>(p.size())},
                         {t.data(), static_cast<std::size_t>(t.size())});
      },
      "pred"_a, "target"_a);

  py::class_<Model>(m, "Model")
      .def_static(
          "build", [](const std::string& arch, std::uint64_t seed) { return Model::build(arch_of(arch), seed); },
          "arch_json"_a = "", "seed"_a = 0)
      .def_static(
          "load", [](const std::filesystem::path& p) { return load_checkpoint(p).model; }, "path"_a)
      .def(
          "save", [](const Model& self, const std::filesystem::path& p) { save_checkpoint(Checkpoint{self, {}}, p); },
          "path"_a)
      .def_property_readonly("arch_json", [](const Model& self) { return json(self.config()).dump(); })
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def(
          "forward_ssl",
          [](const Model& self, const FloatArray& cube) {
            const auto out = self.forward_ssl(cube_of(cube));
            const auto r = static_cast<py::ssize_t>(self.config().effective_restore_edge());
            FloatArray arr({r, r, r});
            std::copy(out.begin(), out.end(), arr.mutable_data());
            return arr;
          },
          "cube"_a)
      .def(
          "forward_supervised",
          [](const Model& self, const FloatArray& cube) {
            const auto y = self.forward_supervised(cube_of(cube));
            return py::dict("porosity"_a = y[0], "permeability_md"_a = y[1]);
          },
          "cube"_a)
      .def(
          "transfer", [](const Model& self, std::uint64_t head_seed) {
            return transfer_weights(Checkpoint{self, {}}, head_seed);
          },
          "head_seed"_a = 0)
      .def(
          "set_target_norm",
          [](Model& self, std::array<double, 2> mean, std::array<double, 2> stddev) {
            self.set_target_norm(TargetNorm{mean, stddev});
          },
          "mean"_a, "stddev"_a);

  m.def(
      "check_gradients",
      [](const std::string& arch, std::size_t inputs, std::size_t coords, double eps, std::uint64_t seed) {
        ModelGradCheckOptions o;
        o.inputs = inputs;
        o.coords_per_tensor = coords;
        o.fd_epsilon = eps;
        o.seed = seed;
        const ArchConfig a = arch_of(arch);
        ModelGradCheckResult r;
        {
          py::gil_scoped_release release;
          r = check_model_gradients(a, o);
        }
        return py::dict("max_rel_error"_a = r.max_rel_error, "checked"_a = r.checked,
                        "skipped_kinks"_a = r.skipped_kinks, "refined"_a = r.refined);
      },
      "arch_json"_a = "", "inputs"_a = 10, "coords"_a = 200, "eps"_a = 1e-5, "seed"_a = 0);

  m.def(
      "sample_trials",
      [](std::size_t count, std::uint64_t seed) {
        py::list out;
        for (const auto& t : sample_trials(SearchSpace{}, TrialConfig{}, count, seed))
          out.append(json({{"arch", t.arch}, {"train", t.train}}).dump());
        return out;
      },
      "count"_a, "seed"_a = 0, "Default-space trial configs as JSON strings.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      "args"_a, "Runs one command-line subcommand in-process; returns (exit_code, stdout, stderr).");
}
