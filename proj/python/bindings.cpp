#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "hsi/experiment.hpp"

namespace py = pybind11;
using namespace hsi;

namespace {

LabelMap label_map_from_array(const py::array_t<uint16_t>& arr, int num_classes) {
  const auto buf = arr.request();
  if (buf.ndim != 2) throw ValidationError("labels must be a 2-d uint16 array");
  LabelMap lm;
  lm.height = static_cast<int>(buf.shape[0]);
  lm.width = static_cast<int>(buf.shape[1]);
  const auto view = arr.unchecked<2>();
  lm.labels.resize(static_cast<size_t>(lm.height) * lm.width);
  uint16_t max_label = 0;
  for (int r = 0; r < lm.height; ++r)
    for (int c = 0; c < lm.width; ++c) {
      const uint16_t v = view(r, c);
      lm.labels[static_cast<size_t>(r) * lm.width + c] = v;
      max_label = std::max(max_label, v);
    }
  lm.num_classes = num_classes > 0 ? num_classes : max_label;
  if (lm.num_classes < 1) throw ValidationError("labels contain no class");
  for (int k = 1; k <= lm.num_classes; ++k) {
    lm.class_names.push_back("class_" + std::to_string(k));
    const uint8_t v = static_cast<uint8_t>(255 * k / lm.num_classes);
    lm.palette.push_back({v, v, v});
  }
  return lm;
}

HyperCube dummy_cube(int height, int width) {
  HyperCube cube;
  cube.height = height;
  cube.width = width;
  cube.bands = 1;
  cube.data.assign(static_cast<size_t>(height) * width, 0.0f);
  return cube;
}

ModelConfig config_from_obj(const py::object& obj) {
  if (py::isinstance<py::str>(obj)) return load_model_config(obj.cast<std::string>());
  const std::string text =
      py::module_::import("json").attr("dumps")(obj).cast<std::string>();
  return ModelConfig::from_json(nlohmann::ordered_json::parse(text));
}

py::dict metrics_dict(const MetricsReport& rep) {
  py::dict d;
  d["per_class_pa"] = rep.per_class_pa;
  d["oa"] = rep.oa;
  d["aa"] = rep.aa;
  d["kappa"] = rep.kappa;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Leakage-free window sampling and a compact FCN for hyperspectral scenes";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<AuditError>(m, "AuditError", PyExc_RuntimeError);

  m.def("set_num_threads", &set_num_threads, py::arg("n"));

  m.def(
      "synth",
      [](int height, int width, int bands, int num_classes, int granularity,
         double separation, double noise, uint64_t seed) {
        SynthSpec spec;
        spec.height = height;
        spec.width = width;
        spec.bands = bands;
        spec.num_classes = num_classes;
        spec.region_granularity = granularity;
        spec.spectral_separation = separation;
        spec.noise_level = noise;
        auto [cube, labels] = synth_dataset(spec, seed);
        py::array_t<float> cube_arr({bands, height, width});
        std::copy(cube.data.begin(), cube.data.end(), cube_arr.mutable_data());
        py::array_t<uint16_t> label_arr({height, width});
        std::copy(labels.labels.begin(), labels.labels.end(), label_arr.mutable_data());
        return py::make_tuple(cube_arr, label_arr);
      },
      py::arg("height"), py::arg("width"), py::arg("bands"), py::arg("num_classes"),
      py::arg("granularity") = 3, py::arg("separation") = 1.0, py::arg("noise") = 0.1,
      py::arg("seed") = 0,
      "Deterministic synthetic scene; returns (cube [bands,h,w] f32, labels [h,w] u16)");

  py::class_<WindowPartition>(m, "WindowPartition")
      .def_readonly("window_size", &WindowPartition::window_size)
      .def_readonly("grid_rows", &WindowPartition::grid_rows)
      .def_readonly("grid_cols", &WindowPartition::grid_cols)
      .def_readonly("seed", &WindowPartition::seed)
      .def_property_readonly("tags",
                             [](const WindowPartition& p) {
                               py::array_t<uint8_t> arr({p.grid_rows, p.grid_cols});
                               auto view = arr.mutable_unchecked<2>();
                               for (int r = 0; r < p.grid_rows; ++r)
                                 for (int c = 0; c < p.grid_cols; ++c)
                                   view(r, c) = static_cast<uint8_t>(p.tag_at(r, c));
                               return arr;
                             },
                             "0 unassigned, 1 train, 2 test")
      .def("save", [](const WindowPartition& p, const std::string& path) { p.save(path); })
      .def_static("load", [](const std::string& path) { return WindowPartition::load(path); });

  m.def(
      "sample",
      [](const py::array_t<uint16_t>& labels, int window, double rate, uint64_t seed,
         int num_classes) {
        const LabelMap lm = label_map_from_array(labels, num_classes);
        return leakage_free_sample(dummy_cube(lm.height, lm.width), lm, window, rate, seed);
      },
      py::arg("labels"), py::arg("window"), py::arg("rate"), py::arg("seed") = 0,
      py::arg("num_classes") = 0, "Leakage-free balanced window partition");

  m.def(
      "audit",
      [](const WindowPartition& part, const py::array_t<uint16_t>& labels,
         int num_classes) {
        const LabelMap lm = label_map_from_array(labels, num_classes);
        const AuditReport rep = audit_partition(part, lm);
        py::dict d;
        d["train_pixels_per_class"] = rep.train_pixels_per_class;
        d["test_pixels_per_class"] = rep.test_pixels_per_class;
        d["leakage_pixel_count"] = rep.leakage_pixel_count;
        d["uncovered_labelled_pixel_count"] = rep.uncovered_labelled_pixel_count;
        d["p1_balanced"] = rep.p1_balanced;
        d["p2_max_utilisation"] = rep.p2_max_utilisation;
        d["p3_no_leakage"] = rep.p3_no_leakage;
        d["p4_seeded"] = rep.p4_seeded;
        d["all_pass"] = rep.all_pass();
        return d;
      },
      py::arg("partition"), py::arg("labels"), py::arg("num_classes") = 0);

  m.def(
      "baseline_overlap",
      [](const py::array_t<uint16_t>& labels, double rate, int radius, uint64_t seed,
         int num_classes) {
        const LabelMap lm = label_map_from_array(labels, num_classes);
        const PixelSplit split = baseline_pixel_sample(lm, rate, seed);
        const OverlapStats s = patch_overlap_audit(split, lm.height, lm.width, radius);
        py::dict d;
        d["train_pixels"] = split.train.size();
        d["test_pixels"] = s.test_pixel_count;
        d["overlapping_test_pixels"] = s.overlapping_test_pixel_count;
        d["fraction"] = s.fraction;
        return d;
      },
      py::arg("labels"), py::arg("rate"), py::arg("radius"), py::arg("seed") = 0,
      py::arg("num_classes") = 0,
      "Patch-overlap fraction of the stratified per-pixel baseline split");

  m.def(
      "metrics",
      [](const py::array_t<int64_t>& confusion, const std::string& convention) {
        const auto buf = confusion.request();
        if (buf.ndim != 2 || buf.shape[0] != buf.shape[1])
          throw ValidationError("confusion must be a square 2-d int64 array");
        ConfusionMatrix cm;
        cm.num_classes = static_cast<int>(buf.shape[0]);
        cm.counts.resize(static_cast<size_t>(cm.num_classes) * cm.num_classes);
        const auto view = confusion.unchecked<2>();
        for (int i = 0; i < cm.num_classes; ++i)
          for (int j = 0; j < cm.num_classes; ++j) {
            if (view(i, j) < 0) throw ValidationError("confusion counts must be >= 0");
            cm.at(i, j) = view(i, j);
            cm.total += view(i, j);
          }
        PaConvention conv;
        if (convention == "column")
          conv = PaConvention::ColumnMarginal;
        else if (convention == "row")
          conv = PaConvention::RowMarginal;
        else
          throw ValidationError("convention must be 'column' or 'row'");
        return metrics_dict(metrics(cm, conv));
      },
      py::arg("confusion"), py::arg("convention") = "column");

  m.def(
      "save_dataset",
      [](const py::array_t<float>& cube, const py::array_t<uint16_t>& labels,
         const std::string& prefix, int num_classes) {
        const auto buf = cube.request();
        if (buf.ndim != 3) throw ValidationError("cube must be a 3-d float32 array");
        HyperCube hc;
        hc.bands = static_cast<int>(buf.shape[0]);
        hc.height = static_cast<int>(buf.shape[1]);
        hc.width = static_cast<int>(buf.shape[2]);
        const auto view = cube.unchecked<3>();
        hc.data.resize(static_cast<size_t>(hc.bands) * hc.height * hc.width);
        for (int b = 0; b < hc.bands; ++b)
          for (int r = 0; r < hc.height; ++r)
            for (int c = 0; c < hc.width; ++c)
              hc.at(r, c, b) = view(b, r, c);
        for (int b = 0; b < hc.bands; ++b) hc.band_mask.push_back(b);
        const LabelMap lm = label_map_from_array(labels, num_classes);
        if (lm.height != hc.height || lm.width != hc.width)
          throw ValidationError("cube and label dims differ");
        save_cube(hc, prefix + ".hdr.json");
        save_labels(lm, prefix + ".gt.json");
      },
      py::arg("cube"), py::arg("labels"), py::arg("prefix"), py::arg("num_classes") = 0,
      "Writes <prefix>.hdr.json/.bin and <prefix>.gt.json/.gt.bin");

  m.def(
      "count_params",
      [](const py::object& config) {
        Model<float> model(config_from_obj(config), 0);
        return model.count_params();
      },
      py::arg("config"), "Model config (dict or path) -> trainable element count");

  m.def(
      "count_flops",
      [](const py::object& config, int h, int w, int mac) {
        Model<float> model(config_from_obj(config), 0);
        return model.count_flops(h, w, mac).total;
      },
      py::arg("config"), py::arg("h"), py::arg("w"), py::arg("mac") = 2);

  m.def(
      "run_train",
      [](const std::string& config_path) {
        const TrainArtifacts art = run_train(ExperimentConfig::load(config_path));
        py::dict d;
        d["out_dir"] = art.out_dir.string();
        d["checkpoint"] = art.checkpoint_prefix.string();
        d["final_loss"] = art.log.back().mean_loss;
        d["final_train_oa"] = art.log.back().train_oa;
        return d;
      },
      py::arg("config_path"));

  m.def(
      "run_eval",
      [](const std::string& config_path) {
        const EvalArtifacts art = run_eval(ExperimentConfig::load(config_path));
        py::dict d = metrics_dict(art.report);
        d["metrics_json"] = art.metrics_json.string();
        d["pred_map"] = art.pred_map.string();
        d["n_test_pixels"] = art.cm.total;
        return d;
      },
      py::arg("config_path"));
}
