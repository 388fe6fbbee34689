#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hsi/experiment.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

void print_audit(const hsi::AuditReport& audit) {
  const size_t k = audit.train_pixels_per_class.size();
  std::printf("class  train_px  test_px  train_win  test_win\n");
  for (size_t c = 1; c < k; ++c)
    std::printf("%5zu  %8lld  %7lld  %9lld  %8lld\n", c,
                static_cast<long long>(audit.train_pixels_per_class[c]),
                static_cast<long long>(audit.test_pixels_per_class[c]),
                static_cast<long long>(audit.train_windows_per_class[c]),
                static_cast<long long>(audit.test_windows_per_class[c]));
  std::printf("leakage_pixels=%lld uncovered_labelled=%lld\n",
              static_cast<long long>(audit.leakage_pixel_count),
              static_cast<long long>(audit.uncovered_labelled_pixel_count));
  std::printf("P1 balanced=%s  P2 max-utilisation=%s  P3 no-leakage=%s  P4 seeded=%s\n",
              audit.p1_balanced ? "pass" : "FAIL",
              audit.p2_max_utilisation ? "pass" : "FAIL",
              audit.p3_no_leakage ? "pass" : "FAIL", audit.p4_seeded ? "pass" : "FAIL");
}

void print_metrics(const hsi::MetricsReport& rep) {
  std::printf("oa=%.6f aa=%.6f kappa=%.6f\n", rep.oa, rep.aa, rep.kappa);
  for (size_t j = 0; j < rep.per_class_pa.size(); ++j)
    std::printf("  pa[%zu]=%.6f\n", j + 1, rep.per_class_pa[j]);
}

// Window-input counterpart of the baseline patch-overlap audit: a labelled
// test pixel overlaps training data iff its own window holds any train-
// assigned pixel. Disjoint windows make this structurally zero; computing it
// anyway keeps the comparison honest.
hsi::OverlapStats window_overlap_audit(const hsi::WindowPartition& part,
                                       const hsi::LabelMap& labels) {
  hsi::OverlapStats stats;
  const int w = part.window_size;
  std::vector<char> window_has_train(part.tags.size(), 0);
  for (int r = 0; r < labels.height; ++r)
    for (int c = 0; c < labels.width; ++c) {
      if (labels.at(r, c) == 0) continue;
      if (part.tag_at(r / w, c / w) == hsi::WindowTag::Train)
        window_has_train[static_cast<size_t>(r / w) * part.grid_cols + c / w] = 1;
    }
  for (int r = 0; r < labels.height; ++r)
    for (int c = 0; c < labels.width; ++c) {
      if (labels.at(r, c) == 0) continue;
      if (part.tag_at(r / w, c / w) != hsi::WindowTag::Test) continue;
      ++stats.test_pixel_count;
      if (window_has_train[static_cast<size_t>(r / w) * part.grid_cols + c / w])
        ++stats.overlapping_test_pixel_count;
    }
  stats.fraction = stats.test_pixel_count == 0
                       ? 0.0
                       : static_cast<double>(stats.overlapping_test_pixel_count) /
                             static_cast<double>(stats.test_pixel_count);
  return stats;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Leakage-free window sampling and a compact FCN for "
               "partially labelled hyperspectral scenes"};
  app.require_subcommand(1);

  std::string config_path, out_path;
  uint64_t seed = 0;
  int threads = 1;
  auto* config_opt = app.add_option("--config,-c", config_path, "JSON config file");
  auto* seed_opt = app.add_option("--seed", seed, "Random seed");
  auto* out_opt = app.add_option("--out,-o", out_path, "Output directory (synth: prefix)");
  app.add_option("--threads,-t", threads, "Worker threads")->check(CLI::Range(1, 256));

  // synth (long-only help frees -h, so --h etc. stay usable as aliases)
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->set_help_flag("--help", "Print this help message and exit");
  hsi::SynthSpec synth_spec;
  synth->add_option("--height,--h", synth_spec.height, "Scene height");
  synth->add_option("--width,--w", synth_spec.width, "Scene width");
  synth->add_option("--bands,--b", synth_spec.bands, "Spectral bands");
  synth->add_option("--classes,--k", synth_spec.num_classes, "Label classes");
  synth->add_option("--granularity", synth_spec.region_granularity, "Regions per class");
  synth->add_option("--separation", synth_spec.spectral_separation,
                    "Min class-mean spectral distance");
  synth->add_option("--noise", synth_spec.noise_level, "Gaussian noise sigma");

  // sample
  auto* sample = app.add_subcommand("sample", "Leakage-free window partition + audit");
  std::string cube_path, labels_path;
  int window_size = 0;
  double rate = 0;
  std::vector<double> rates;
  sample->add_option("--cube", cube_path, "Cube header (.hdr.json)");
  sample->add_option("--labels", labels_path, "Label sidecar (.gt.json)");
  sample->add_option("--window", window_size, "Window size w");
  sample->add_option("--rate", rate, "Uniform training rate");
  sample->add_option("--rates", rates, "Per-class training rates")->delimiter(',');

  // audit-baseline
  auto* audit_baseline =
      app.add_subcommand("audit-baseline", "Patch-overlap leakage comparison table");
  std::vector<int> radii{3};
  audit_baseline->add_option("--cube", cube_path, "Cube header (.hdr.json)");
  audit_baseline->add_option("--labels", labels_path, "Label sidecar (.gt.json)");
  audit_baseline->add_option("--window", window_size, "Window size w");
  audit_baseline->add_option("--rate", rate, "Training rate");
  audit_baseline->add_option("--radii", radii, "Patch radii to audit")->delimiter(',');

  // train / eval
  auto* train_cmd = app.add_subcommand("train", "Run the training pipeline");
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained run");
  bool truth_map = false;
  eval_cmd->add_flag("--truth-map", truth_map, "Also render the ground-truth map");

  // cost
  auto* cost = app.add_subcommand("cost", "Parameter and FLOP accounting");
  int cost_h = 9, cost_w = 9;
  bool no_timing = false;
  cost->add_option("--height", cost_h, "Spatial height for FLOPs");
  cost->add_option("--width", cost_w, "Spatial width for FLOPs");
  cost->add_flag("--no-timing", no_timing, "Skip timed inference");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Window-size or training-fraction sweep");
  std::vector<int> sweep_windows;
  std::vector<double> sweep_fractions;
  sweep->add_option("--windows", sweep_windows, "Window sizes")->delimiter(',');
  sweep->add_option("--fractions", sweep_fractions, "Rate multipliers")->delimiter(',');

  for (CLI::App* sub : {synth, sample, audit_baseline, train_cmd, eval_cmd, cost, sweep})
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  hsi::set_num_threads(threads);

  try {
    if (synth->parsed()) {
      if (out_path.empty())
        throw hsi::ValidationError("synth: --out <prefix> is required");
      auto [cube, labels] = hsi::synth_dataset(synth_spec, seed);
      const fs::path prefix(out_path);
      if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
      hsi::save_cube(cube, out_path + ".hdr.json");
      hsi::save_labels(labels, out_path + ".gt.json");
      std::printf("wrote %s.hdr.json %s.bin %s.gt.json %s.gt.bin\n", out_path.c_str(),
                  out_path.c_str(), out_path.c_str(), out_path.c_str());
      return 0;
    }

    if (sample->parsed()) {
      if (cube_path.empty() || labels_path.empty())
        throw hsi::ValidationError("sample: --cube and --labels are required");
      if (window_size < 1)
        throw hsi::ValidationError("sample: --window must be >= 1");
      if (rates.empty() && !(rate > 0 && rate < 1))
        throw hsi::ValidationError("sample: --rate in (0,1) or --rates required");
      const hsi::HyperCube cube = hsi::load_cube(hsi::resolve_cube_header(cube_path));
      const hsi::LabelMap labels = hsi::load_labels(hsi::resolve_labels_sidecar(labels_path));
      const hsi::WindowPartition part =
          rates.empty()
              ? hsi::leakage_free_sample(cube, labels, window_size, rate, seed)
              : hsi::leakage_free_sample(cube, labels, window_size, rates, seed);
      std::printf("grid %dx%d windows, %lld train / %lld test\n", part.grid_rows,
                  part.grid_cols, static_cast<long long>(part.count(hsi::WindowTag::Train)),
                  static_cast<long long>(part.count(hsi::WindowTag::Test)));
      const hsi::AuditReport audit = hsi::audit_partition(part, labels);
      print_audit(audit);
      if (!out_path.empty()) {
        fs::create_directories(out_path);
        part.save(fs::path(out_path) / "partition.json");
        std::printf("wrote %s/partition.json\n", out_path.c_str());
      }
      if (!audit.all_pass())
        throw hsi::AuditError("partition failed its principle audit");
      return 0;
    }

    if (audit_baseline->parsed()) {
      if (cube_path.empty() || labels_path.empty())
        throw hsi::ValidationError("audit-baseline: --cube and --labels are required");
      if (window_size < 1)
        throw hsi::ValidationError("audit-baseline: --window must be >= 1");
      if (!(rate > 0 && rate < 1))
        throw hsi::ValidationError("audit-baseline: --rate must lie in (0,1)");
      for (int r : radii)
        if (r < 0) throw hsi::ValidationError("audit-baseline: radii must be >= 0");
      const hsi::HyperCube cube = hsi::load_cube(hsi::resolve_cube_header(cube_path));
      const hsi::LabelMap labels = hsi::load_labels(hsi::resolve_labels_sidecar(labels_path));
      const hsi::PixelSplit split = hsi::baseline_pixel_sample(labels, rate, seed);
      const hsi::WindowPartition part =
          hsi::leakage_free_sample(cube, labels, window_size, rate, seed);
      const hsi::OverlapStats window_stats = window_overlap_audit(part, labels);

      std::ostringstream table;
      table << "method,input_reach,train_pixels,test_pixels,overlap_pixels,fraction\n";
      for (int r : radii) {
        const hsi::OverlapStats s =
            hsi::patch_overlap_audit(split, labels.height, labels.width, r);
        table << "pixel_baseline," << r << "," << split.train.size() << ","
              << s.test_pixel_count << "," << s.overlapping_test_pixel_count << ","
              << s.fraction << "\n";
      }
      const hsi::AuditReport part_audit = hsi::audit_partition(part, labels);
      int64_t window_train_pixels = 0;
      for (int64_t n : part_audit.train_pixels_per_class) window_train_pixels += n;
      table << "window_partition," << window_size << "," << window_train_pixels << ","
            << window_stats.test_pixel_count << ","
            << window_stats.overlapping_test_pixel_count << "," << window_stats.fraction
            << "\n";
      std::fputs(table.str().c_str(), stdout);
      if (!out_path.empty()) {
        fs::create_directories(out_path);
        std::ofstream f(fs::path(out_path) / "leakage_audit.csv");
        f << table.str();
        std::printf("wrote %s/leakage_audit.csv\n", out_path.c_str());
      }
      return 0;
    }

    if (train_cmd->parsed() || eval_cmd->parsed() || sweep->parsed()) {
      if (config_path.empty())
        throw hsi::ValidationError("--config <experiment.json> is required");
      hsi::ExperimentConfig cfg = hsi::ExperimentConfig::load(config_path);
      if (seed_opt->count() > 0) {
        cfg.seed = seed;
        cfg.augment.seed = hsi::Rng::mix_key(seed, 1);
        cfg.train.seed = hsi::Rng::mix_key(seed, 2);
        cfg.model_seed = hsi::Rng::mix_key(seed, 3);
      }
      if (out_opt->count() > 0) cfg.out_dir = out_path;

      if (train_cmd->parsed()) {
        const hsi::TrainArtifacts art = hsi::run_train(cfg);
        print_audit(art.audit);
        std::printf("epochs=%zu first_loss=%.6f final_loss=%.6f final_train_oa=%.6f\n",
                    art.log.size(), art.log.front().mean_loss, art.log.back().mean_loss,
                    art.log.back().train_oa);
        std::printf("wrote %s, %s, %s{.json,.bin}, %s\n", art.snapshot.c_str(),
                    art.partition.c_str(), art.checkpoint_prefix.c_str(),
                    art.log_csv.c_str());
      } else if (eval_cmd->parsed()) {
        const hsi::EvalArtifacts art = hsi::run_eval(cfg, truth_map);
        print_metrics(art.report);
        std::printf("windows_forwarded=%lld forward_calls=%lld\n",
                    static_cast<long long>(art.stats.windows_forwarded),
                    static_cast<long long>(art.stats.forward_calls));
        std::printf("wrote %s, %s\n", art.metrics_json.c_str(), art.pred_map.c_str());
        if (art.truth_map) std::printf("wrote %s\n", art.truth_map->c_str());
      } else {
        if (sweep_windows.empty() == sweep_fractions.empty())
          throw hsi::ValidationError(
              "sweep: give exactly one of --windows or --fractions");
        const fs::path csv = fs::path(cfg.out_dir) / "sweep.csv";
        std::vector<double> values;
        hsi::SweepAxis axis;
        if (!sweep_windows.empty()) {
          axis = hsi::SweepAxis::WindowSize;
          for (int w : sweep_windows) values.push_back(w);
        } else {
          axis = hsi::SweepAxis::TrainingFraction;
          values = sweep_fractions;
        }
        const auto rows = hsi::run_sweep(cfg, axis, values, csv);
        for (const auto& row : rows) {
          if (row.report)
            std::printf("%g: oa=%.6f aa=%.6f kappa=%.6f\n", row.value, row.report->oa,
                        row.report->aa, row.report->kappa);
          else
            std::printf("%g: %s\n", row.value, row.status.c_str());
        }
        std::printf("wrote %s\n", csv.c_str());
      }
      return 0;
    }

    if (cost->parsed()) {
      if (config_path.empty())
        throw hsi::ValidationError("cost: --config <model or experiment JSON> is required");
      std::ifstream in(config_path);
      if (!in) throw hsi::ValidationError("cannot open config: " + config_path);
      json j = json::parse(in, nullptr, false);
      if (j.is_discarded())
        throw hsi::ValidationError("malformed JSON: " + config_path);

      hsi::ModelConfig mcfg;
      std::optional<hsi::ExperimentConfig> ecfg;
      if (j.contains("dataset")) {
        ecfg = hsi::ExperimentConfig::from_json(j, fs::path(config_path).parent_path());
        mcfg = ecfg->model;
      } else {
        mcfg = hsi::ModelConfig::from_json(j);
      }
      hsi::Model<float> model(mcfg, seed);
      const int64_t params = model.count_params();
      std::printf("params: %lld\n", static_cast<long long>(params));
      if (mcfg.reference_params > 0) {
        const double rel =
            static_cast<double>(params - mcfg.reference_params) / mcfg.reference_params;
        std::printf("reference: %lld (deviation %+.2f%%, %s 10%% tolerance)\n",
                    static_cast<long long>(mcfg.reference_params), rel * 100,
                    std::abs(rel) <= 0.10 ? "within" : "OUTSIDE");
      }
      for (int mac : {2, 1}) {
        const hsi::FlopReport rep = model.count_flops(cost_h, cost_w, mac);
        std::printf("flops (%dx%d, %d op%s per MAC): %lld\n", cost_h, cost_w, mac,
                    mac == 1 ? "" : "s", static_cast<long long>(rep.total));
        for (const auto& item : rep.items)
          std::printf("  %-20s %lld\n", item.name.c_str(),
                      static_cast<long long>(item.flops));
      }
      std::printf("note: conv terms count mac_per_op x h x w x k^2 x C_in x C_out; "
                  "norms add 8 and activations 4 per element under both conventions\n");

      if (ecfg && !no_timing) {
        const hsi::PreparedData data = hsi::prepare_data(*ecfg);
        if (data.cube.bands != mcfg.input_bands ||
            data.labels.num_classes != mcfg.num_classes)
          throw hsi::ValidationError("cost: model config does not match dataset");
        const hsi::WindowPartition part =
            ecfg->rates.empty()
                ? hsi::leakage_free_sample(data.cube, data.labels, ecfg->window_size,
                                           ecfg->uniform_rate, ecfg->seed)
                : hsi::leakage_free_sample(data.cube, data.labels, ecfg->window_size,
                                           ecfg->rates, ecfg->seed);
        hsi::PredictStats stats;
        const auto t0 = std::chrono::steady_clock::now();
        hsi::predict(model, data.cube, part, hsi::WindowTag::Test,
                     ecfg->train.batch_size, &stats);
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
        std::printf("inference: %lld test windows in %.3f s (%.1f windows/s)\n",
                    static_cast<long long>(stats.windows_forwarded), dt.count(),
                    static_cast<double>(stats.windows_forwarded) / dt.count());
      }
      return 0;
    }
  } catch (const hsi::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const hsi::AuditError& e) {
    std::cerr << "audit failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
