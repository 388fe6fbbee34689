#include "hsi/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace hsi {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Re-labels any exception from a pipeline stage without losing its type, so
// CLI errors read "sampling: ..." and map to the right exit code.
template <typename Fn>
auto stage(const char* label, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string(label) + ": " + e.what());
  } catch (const AuditError& e) {
    throw AuditError(std::string(label) + ": " + e.what());
  } catch (const std::exception& e) {
    throw RuntimeError(std::string(label) + ": " + e.what());
  }
}

RotationMode rotation_from_name(const std::string& s) {
  if (s == "quarter_turns") return RotationMode::QuarterTurns;
  if (s == "arbitrary") return RotationMode::Arbitrary;
  throw ValidationError("experiment config: unknown rotation mode \"" + s + "\"");
}

std::string rotation_name(RotationMode m) {
  return m == RotationMode::QuarterTurns ? "quarter_turns" : "arbitrary";
}

AugmentPolicy augment_from_json(const json& j) {
  AugmentPolicy p;
  if (j.contains("rotation")) p.rotation = rotation_from_name(j.at("rotation").get<std::string>());
  if (j.contains("flip")) p.flip = j.at("flip").get<bool>();
  if (j.contains("noise_sigma")) p.noise_sigma = j.at("noise_sigma").get<double>();
  if (j.contains("brightness_delta"))
    p.brightness_delta = j.at("brightness_delta").get<double>();
  if (j.contains("copies")) p.copies = j.at("copies").get<int>();
  if (j.contains("seed")) p.seed = j.at("seed").get<uint64_t>();
  return p;
}

json augment_to_json(const AugmentPolicy& p) {
  json j;
  j["rotation"] = rotation_name(p.rotation);
  j["flip"] = p.flip;
  j["noise_sigma"] = p.noise_sigma;
  j["brightness_delta"] = p.brightness_delta;
  j["copies"] = p.copies;
  j["seed"] = p.seed;
  return j;
}

std::string csv_safe(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (cube_path.empty()) throw ValidationError("experiment config: dataset.cube required");
  if (labels_path.empty())
    throw ValidationError("experiment config: dataset.labels required");
  if (window_size < 1) throw ValidationError("experiment config: window_size must be >= 1");
  if (rates.empty()) {
    if (!(uniform_rate > 0 && uniform_rate < 1))
      throw ValidationError("experiment config: rate must lie in (0, 1)");
  } else {
    for (double r : rates)
      if (!(r > 0 && r < 1))
        throw ValidationError("experiment config: every rate must lie in (0, 1)");
  }
  if (out_dir.empty()) throw ValidationError("experiment config: out_dir required");
  augment.validate();
  model.validate();
  train.validate();
}

ExperimentConfig ExperimentConfig::from_json(const json& j, const fs::path& base_dir) {
  ExperimentConfig cfg;
  try {
    const auto& ds = j.at("dataset");
    cfg.cube_path = (base_dir / ds.at("cube").get<std::string>()).string();
    cfg.labels_path = (base_dir / ds.at("labels").get<std::string>()).string();
    if (j.contains("discard_bands"))
      cfg.discard_bands = j.at("discard_bands").get<std::vector<int>>();
    if (j.contains("normalize")) {
      const std::string n = j.at("normalize").get<std::string>();
      if (n == "per_band") {
        cfg.normalize_mode = NormalizeMode::PerBand;
      } else if (n == "global") {
        cfg.normalize_mode = NormalizeMode::Global;
      } else if (n == "none") {
        cfg.normalize_enabled = false;
      } else {
        throw ValidationError("experiment config: unknown normalize mode \"" + n + "\"");
      }
    }
    cfg.window_size = j.at("window_size").get<int>();
    if (j.contains("rates"))
      cfg.rates = j.at("rates").get<std::vector<double>>();
    else if (j.contains("rate"))
      cfg.uniform_rate = j.at("rate").get<double>();
    cfg.seed = j.contains("seed") ? j.at("seed").get<uint64_t>() : 0;

    if (j.contains("augment"))
      cfg.augment = augment_from_json(j.at("augment"));
    if (!j.at("model").is_string() && !j.at("model").is_object())
      throw ValidationError("experiment config: model must be an object or a path");
    if (j.at("model").is_string())
      cfg.model = load_model_config((base_dir / j.at("model").get<std::string>()).string());
    else
      cfg.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("train")) cfg.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("pa_convention")) {
      const std::string c = j.at("pa_convention").get<std::string>();
      if (c == "column")
        cfg.pa_convention = PaConvention::ColumnMarginal;
      else if (c == "row")
        cfg.pa_convention = PaConvention::RowMarginal;
      else
        throw ValidationError("experiment config: pa_convention must be column or row");
    }
    cfg.out_dir = j.contains("out_dir")
                      ? (base_dir / j.at("out_dir").get<std::string>()).string()
                      : "";

    // sub-seeds not pinned by the file derive from the experiment seed
    if (!j.contains("augment") || !j.at("augment").contains("seed"))
      cfg.augment.seed = Rng::mix_key(cfg.seed, 1);
    if (!j.contains("train") || !j.at("train").contains("seed"))
      cfg.train.seed = Rng::mix_key(cfg.seed, 2);
    cfg.model_seed = j.contains("model_seed") ? j.at("model_seed").get<uint64_t>()
                                              : Rng::mix_key(cfg.seed, 3);
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(std::string("experiment config: ") + e.what());
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open experiment config: " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded())
    throw ValidationError("malformed JSON in experiment config: " + path);
  return from_json(j, fs::path(path).parent_path());
}

json ExperimentConfig::to_json() const {
  json j;
  j["dataset"] = {{"cube", cube_path}, {"labels", labels_path}};
  j["discard_bands"] = discard_bands;
  j["normalize"] = normalize_enabled
                       ? (normalize_mode == NormalizeMode::PerBand ? "per_band" : "global")
                       : "none";
  j["window_size"] = window_size;
  if (rates.empty())
    j["rate"] = uniform_rate;
  else
    j["rates"] = rates;
  j["augment"] = augment_to_json(augment);
  j["model"] = model.to_json();
  j["train"] = train.to_json();
  j["pa_convention"] =
      pa_convention == PaConvention::ColumnMarginal ? "column" : "row";
  j["out_dir"] = out_dir;
  j["seed"] = seed;
  j["model_seed"] = model_seed;
  return j;
}

PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData d;
  d.cube = stage("datacube: load_cube",
                 [&] { return load_cube(resolve_cube_header(cfg.cube_path)); });
  d.labels = stage("datacube: load_labels",
                   [&] { return load_labels(resolve_labels_sidecar(cfg.labels_path)); });
  if (d.cube.height != d.labels.height || d.cube.width != d.labels.width)
    throw ValidationError("datacube: cube and label dims differ");
  if (!cfg.discard_bands.empty())
    d.cube = stage("datacube: drop_bands", [&] { return drop_bands(d.cube, cfg.discard_bands); });
  if (cfg.normalize_enabled)
    d.cube = stage("datacube: normalize", [&] { return normalize(d.cube, cfg.normalize_mode); });
  return d;
}

namespace {

struct PipelineRun {
  WindowPartition partition;
  AuditReport audit;
  std::vector<EpochLog> log;
  MetricsReport report;
  ConfusionMatrix cm;
  PredictStats stats;
};

// Shared by run_train (without eval) and run_sweep (with eval, in memory).
PipelineRun run_pipeline(const ExperimentConfig& cfg, const PreparedData& data,
                         Model<float>& model, bool evaluate) {
  PipelineRun out;
  if (model.config().input_bands != data.cube.bands)
    throw ValidationError("experiment: model expects " +
                          std::to_string(model.config().input_bands) +
                          " bands but cube has " + std::to_string(data.cube.bands));
  if (model.config().num_classes != data.labels.num_classes)
    throw ValidationError("experiment: model expects " +
                          std::to_string(model.config().num_classes) +
                          " classes but labels have " +
                          std::to_string(data.labels.num_classes));

  out.partition = stage("sampling: leakage_free_sample", [&] {
    return cfg.rates.empty()
               ? leakage_free_sample(data.cube, data.labels, cfg.window_size,
                                     cfg.uniform_rate, cfg.seed)
               : leakage_free_sample(data.cube, data.labels, cfg.window_size, cfg.rates,
                                     cfg.seed);
  });
  out.audit = stage("sampling: audit_partition",
                    [&] { return audit_partition(out.partition, data.labels); });
  if (!out.audit.all_pass())
    throw AuditError("sampling: partition failed its principle audit");

  std::vector<WindowSample> train_windows = stage("sampling: extract_windows", [&] {
    return extract_windows(data.cube, data.labels, out.partition, WindowTag::Train);
  });
  train_windows = stage("augment: augment_set",
                        [&] { return augment_set(train_windows, cfg.augment); });
  out.log = stage("train: train", [&] { return train(model, train_windows, cfg.train); });

  if (evaluate) {
    LabelMap pred = stage("eval: predict", [&] {
      return predict(model, data.cube, out.partition, WindowTag::Test,
                     cfg.train.batch_size, &out.stats);
    });
    out.cm = stage("eval: confusion",
                   [&] { return confusion(pred, data.labels, out.partition); });
    out.report = stage("eval: metrics", [&] { return metrics(out.cm, cfg.pa_convention); });
  }
  return out;
}

}  // namespace

TrainArtifacts run_train(const ExperimentConfig& cfg) {
  cfg.validate();
  const PreparedData data = prepare_data(cfg);
  Model<float> model(cfg.model, cfg.model_seed);
  PipelineRun run = run_pipeline(cfg, data, model, false);

  TrainArtifacts art;
  art.out_dir = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(art.out_dir, ec);
  if (ec) throw RuntimeError("cannot create output directory: " + art.out_dir.string());

  art.snapshot = art.out_dir / "config.snapshot.json";
  {
    std::ofstream out(art.snapshot);
    if (!out) throw RuntimeError("cannot write " + art.snapshot.string());
    out << cfg.to_json().dump(2) << "\n";
  }
  art.partition = art.out_dir / "partition.json";
  run.partition.save(art.partition);
  art.checkpoint_prefix = art.out_dir / "model.ckpt";
  model.save_checkpoint(art.checkpoint_prefix.string());
  art.log_csv = art.out_dir / "train_log.csv";
  write_train_log(art.log_csv.string(), run.log);
  art.audit = run.audit;
  art.log = run.log;
  return art;
}

EvalArtifacts run_eval(const ExperimentConfig& cfg, bool write_truth_map) {
  cfg.validate();
  const PreparedData data = prepare_data(cfg);
  const fs::path out_dir = cfg.out_dir;
  WindowPartition part = stage("sampling: load_partition", [&] {
    return WindowPartition::load(out_dir / "partition.json");
  });
  Model<float> model = stage("network: load_checkpoint", [&] {
    return Model<float>::load_checkpoint((out_dir / "model.ckpt").string());
  });
  if (model.config().input_bands != data.cube.bands)
    throw ValidationError("eval: checkpoint expects " +
                          std::to_string(model.config().input_bands) +
                          " bands but cube has " + std::to_string(data.cube.bands));
  if (model.config().num_classes != data.labels.num_classes)
    throw ValidationError("eval: checkpoint expects " +
                          std::to_string(model.config().num_classes) +
                          " classes but labels have " +
                          std::to_string(data.labels.num_classes));

  EvalArtifacts art;
  LabelMap pred = stage("eval: predict", [&] {
    return predict(model, data.cube, part, WindowTag::Test, cfg.train.batch_size,
                   &art.stats);
  });
  art.cm = stage("eval: confusion", [&] { return confusion(pred, data.labels, part); });
  art.report = stage("eval: metrics", [&] { return metrics(art.cm, cfg.pa_convention); });

  art.metrics_json = out_dir / "metrics.json";
  {
    std::ofstream out(art.metrics_json);
    if (!out) throw RuntimeError("cannot write " + art.metrics_json.string());
    out << metrics_to_json(art.report, art.cm).dump(2) << "\n";
  }
  pred.class_names = data.labels.class_names;
  pred.palette = data.labels.palette;
  art.pred_map = out_dir / "pred_map.ppm";
  write_map_ppm(art.pred_map, pred);
  if (write_truth_map) {
    art.truth_map = out_dir / "truth_map.ppm";
    write_map_ppm(*art.truth_map, data.labels);
  }
  return art;
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, SweepAxis axis,
                                const std::vector<double>& values,
                                const fs::path& csv_path) {
  cfg.validate();
  if (values.empty()) throw ValidationError("sweep: no settings given");
  std::vector<double> unique;
  for (double v : values)
    if (std::find(unique.begin(), unique.end(), v) == unique.end()) unique.push_back(v);

  const PreparedData data = prepare_data(cfg);
  std::vector<SweepRow> rows;
  for (size_t i = 0; i < unique.size(); ++i) {
    SweepRow row;
    row.value = unique[i];
    row.seed = cfg.seed + i;
    ExperimentConfig setting = cfg;
    setting.seed = row.seed;
    setting.augment.seed = Rng::mix_key(row.seed, 1);
    setting.train.seed = Rng::mix_key(row.seed, 2);
    setting.model_seed = Rng::mix_key(row.seed, 3);
    if (axis == SweepAxis::WindowSize) {
      const int w = static_cast<int>(unique[i]);
      if (w < 1 || static_cast<double>(w) != unique[i]) {
        row.status = "invalid window size";
        rows.push_back(row);
        continue;
      }
      setting.window_size = w;
    } else {
      const double f = unique[i];
      if (!(f > 0 && f <= 1)) {
        row.status = "invalid fraction";
        rows.push_back(row);
        continue;
      }
      if (setting.rates.empty()) {
        setting.uniform_rate = cfg.uniform_rate * f;
      } else {
        for (double& r : setting.rates) r *= f;
      }
    }
    try {
      Model<float> model(setting.model, setting.model_seed);
      PipelineRun run = run_pipeline(setting, data, model, true);
      row.status = "ok";
      row.report = run.report;
    } catch (const ValidationError& e) {
      row.status = std::string("infeasible: ") + e.what();
    } catch (const AuditError& e) {
      row.status = std::string("audit failed: ") + e.what();
    }
    rows.push_back(row);
  }

  if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
  std::ofstream out(csv_path);
  if (!out) throw RuntimeError("cannot write sweep table: " + csv_path.string());
  out << (axis == SweepAxis::WindowSize ? "window_size" : "fraction")
      << ",seed,status,oa,aa,kappa\n";
  char buf[64];
  for (const SweepRow& row : rows) {
    if (axis == SweepAxis::WindowSize)
      out << static_cast<int>(row.value);
    else
      out << row.value;
    out << "," << row.seed << "," << csv_safe(row.status);
    if (row.report) {
      std::snprintf(buf, sizeof(buf), ",%.9g,%.9g,%.9g", row.report->oa, row.report->aa,
                    row.report->kappa);
      out << buf;
    } else {
      out << ",,,";
    }
    out << "\n";
  }
  return rows;
}

void write_map_ppm(const fs::path& path, const LabelMap& map) {
  if (map.palette.size() != static_cast<size_t>(map.num_classes))
    throw ValidationError("ppm: palette size does not match num_classes");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write map: " + path.string());
  out << "P6\n" << map.width << " " << map.height << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(map.width) * 3);
  for (int r = 0; r < map.height; ++r) {
    for (int c = 0; c < map.width; ++c) {
      const uint16_t v = map.labels[static_cast<size_t>(r) * map.width + c];
      uint8_t rr = 0, gg = 0, bb = 0;
      if (v != 0) {
        const auto& rgb = map.palette[static_cast<size_t>(v - 1)];
        rr = rgb[0];
        gg = rgb[1];
        bb = rgb[2];
      }
      row[static_cast<size_t>(c) * 3] = rr;
      row[static_cast<size_t>(c) * 3 + 1] = gg;
      row[static_cast<size_t>(c) * 3 + 2] = bb;
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw RuntimeError("short write to map: " + path.string());
}

}  // namespace hsi
