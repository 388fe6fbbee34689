#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hsi/augment.hpp"
#include "hsi/train_eval.hpp"

namespace hsi {

/// Everything a reproducible run needs. Loading a config resolves the model
/// reference (inline object or path) and derives any sub-seed the file does
/// not pin, so the serialized snapshot replays the run exactly.
struct ExperimentConfig {
  std::string cube_path;
  std::string labels_path;
  std::vector<int> discard_bands;
  bool normalize_enabled = true;
  NormalizeMode normalize_mode = NormalizeMode::PerBand;
  int window_size = 0;
  double uniform_rate = 0;        // used when rates is empty
  std::vector<double> rates;      // per class 1..K when non-empty
  AugmentPolicy augment;
  ModelConfig model;
  TrainConfig train;
  PaConvention pa_convention = PaConvention::ColumnMarginal;
  std::string out_dir;
  uint64_t seed = 0;
  uint64_t model_seed = 0;

  void validate() const;
  static ExperimentConfig from_json(const nlohmann::ordered_json& j,
                                    const std::filesystem::path& base_dir);
  static ExperimentConfig load(const std::string& path);
  nlohmann::ordered_json to_json() const;
};

/// Cube and labels after discard + normalize, ready for sampling.
struct PreparedData {
  HyperCube cube;
  LabelMap labels;
};

PreparedData prepare_data(const ExperimentConfig& cfg);

struct TrainArtifacts {
  std::filesystem::path out_dir;
  std::filesystem::path snapshot;
  std::filesystem::path partition;
  std::filesystem::path checkpoint_prefix;  // .json / .bin appended
  std::filesystem::path log_csv;
  AuditReport audit;
  std::vector<EpochLog> log;
};

/// load -> drop bands -> normalize -> sample -> audit -> augment -> train.
/// No file is written before every validation-prone stage has passed; an
/// audit failure raises AuditError before any output exists.
TrainArtifacts run_train(const ExperimentConfig& cfg);

struct EvalArtifacts {
  std::filesystem::path metrics_json;
  std::filesystem::path pred_map;
  std::optional<std::filesystem::path> truth_map;
  MetricsReport report;
  ConfusionMatrix cm;
  PredictStats stats;
};

/// Loads the partition and checkpoint produced by run_train from
/// cfg.out_dir, predicts the Test windows, and writes metrics + maps.
EvalArtifacts run_eval(const ExperimentConfig& cfg, bool write_truth_map = false);

enum class SweepAxis { WindowSize, TrainingFraction };

struct SweepRow {
  double value = 0;     // window size or rate multiplier
  uint64_t seed = 0;
  std::string status;   // "ok" or a reason
  std::optional<MetricsReport> report;
};

/// Repeats the in-memory pipeline once per setting (deduplicated, seed =
/// cfg.seed + index) and writes one CSV row each. Infeasible settings get a
/// warning row instead of aborting the sweep.
std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, SweepAxis axis,
                                const std::vector<double>& values,
                                const std::filesystem::path& csv_path);

/// Binary PPM (P6) using the map's palette; class 0 renders black.
void write_map_ppm(const std::filesystem::path& path, const LabelMap& map);

}  // namespace hsi
