#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hsi/datacube.hpp"
#include "hsi/network.hpp"
#include "hsi/sampling.hpp"

namespace hsi {

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-2;
  int epochs = 150;
  int batch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 0;

  void validate() const;
  static TrainConfig from_json(const nlohmann::ordered_json& j);
  nlohmann::ordered_json to_json() const;
};

/// First/second moment buffers, one pair per model parameter, in parameter
/// order. step counts completed updates.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  int64_t step = 0;
};

/// One decoupled-decay update over all parameters from their accumulated
/// gradients. Parameters flagged decay_exempt (norm affine) skip the decay
/// term. Throws on any non-finite gradient, naming the parameter.
template <typename T>
void adamw_step(std::vector<NamedParam<T>>& params, AdamState<T>& state,
                const TrainConfig& cfg);

struct EpochLog {
  int epoch = 0;         // 1-based
  double mean_loss = 0;  // pixel-weighted over the epoch's masked pixels
  double train_oa = 0;   // running accuracy from pre-update logits
  double wall_seconds = 0;
};

/// Shuffled mini-batch training over window samples. Loss and accuracy use
/// every labelled pixel of every window. Deterministic for a fixed seed.
template <typename T>
std::vector<EpochLog> train(Model<T>& model, const std::vector<WindowSample>& windows,
                            const TrainConfig& cfg);

void write_train_log(const std::string& path, const std::vector<EpochLog>& log);

struct PredictStats {
  int64_t windows_forwarded = 0;
  int64_t forward_calls = 0;
};

/// Pixel-to-pixel inference over the windows carrying `which`. Each selected
/// window is forwarded exactly once. Returns an original-dims map with
/// argmax class ids (ties toward the lower id) inside selected windows and 0
/// elsewhere.
template <typename T>
LabelMap predict(Model<T>& model, const HyperCube& cube, const WindowPartition& part,
                 WindowTag which, int batch_size = 64, PredictStats* stats = nullptr);

struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<int64_t> counts;  // K x K row-major, row = true - 1, col = predicted - 1
  int64_t total = 0;

  int64_t at(int true_class, int predicted) const {
    return counts[static_cast<size_t>(true_class) * num_classes + predicted];
  }
  int64_t& at(int true_class, int predicted) {
    return counts[static_cast<size_t>(true_class) * num_classes + predicted];
  }
  int64_t row_sum(int i) const;
  int64_t col_sum(int j) const;
  int64_t trace() const;
};

/// Tallies original-coordinate labelled pixels whose window carries `scope`.
/// Mirrored padding copies never enter (they have no original coordinate).
ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& truth,
                          const WindowPartition& part, WindowTag scope = WindowTag::Test);

/// Denominator convention for per-class accuracy: ColumnMarginal divides the
/// diagonal by the predicted-class total (the printed formula), RowMarginal
/// by the true-class total (the recall convention).
enum class PaConvention { ColumnMarginal, RowMarginal };

struct MetricsReport {
  std::vector<double> per_class_pa;
  double oa = 0;
  double aa = 0;
  double kappa = 0;
};

MetricsReport metrics(const ConfusionMatrix& cm,
                      PaConvention convention = PaConvention::ColumnMarginal);

nlohmann::ordered_json metrics_to_json(const MetricsReport& report,
                                       const ConfusionMatrix& cm);

}  // namespace hsi
