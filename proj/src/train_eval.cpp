#include "hsi/train_eval.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace hsi {

using json = nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ValidationError("train config: learning_rate must be positive");
  if (!(weight_decay >= 0)) throw ValidationError("train config: weight_decay must be non-negative");
  if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1)) throw ValidationError("train config: beta1 must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ValidationError("train config: beta2 must lie in [0, 1)");
  if (!(eps > 0)) throw ValidationError("train config: eps must be positive");
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig cfg;
  try {
    if (j.contains("learning_rate")) cfg.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("weight_decay")) cfg.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
    if (j.contains("betas")) {
      const auto& b = j.at("betas");
      if (!b.is_array() || b.size() != 2)
        throw ValidationError("train config: betas must be a two-element array");
      cfg.beta1 = b[0].get<double>();
      cfg.beta2 = b[1].get<double>();
    }
    if (j.contains("eps")) cfg.eps = j.at("eps").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

json TrainConfig::to_json() const {
  json j;
  j["learning_rate"] = learning_rate;
  j["weight_decay"] = weight_decay;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["betas"] = {beta1, beta2};
  j["eps"] = eps;
  j["seed"] = seed;
  return j;
}

// --- optimizer -----------------------------------------------------------

template <typename T>
void adamw_step(std::vector<NamedParam<T>>& params, AdamState<T>& state,
                const TrainConfig& cfg) {
  cfg.validate();
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(static_cast<size_t>(params[i].value.size()), T(0));
      state.v[i].assign(static_cast<size_t>(params[i].value.size()), T(0));
    }
  }
  if (state.m.size() != params.size())
    throw RuntimeError("adamw: state does not match parameter count");

  ++state.step;
  const T lr = static_cast<T>(cfg.learning_rate);
  const T wd = static_cast<T>(cfg.weight_decay);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.eps);
  const T bc1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(state.step)));
  const T bc2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(state.step)));

  for (size_t i = 0; i < params.size(); ++i) {
    NamedParam<T>& pr = params[i];
    const auto grad = pr.value.grad();
    const bool has_grad = !grad.empty();
    if (has_grad)
      for (int64_t k = 0; k < pr.value.size(); ++k)
        if (!std::isfinite(grad[k]))
          throw RuntimeError("adamw: non-finite gradient in parameter \"" + pr.name + "\"");

    auto theta = pr.value.values_mut();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    const bool decay = wd > 0 && !pr.decay_exempt;
    const int64_t n = pr.value.size();
    parallel_for(n, [&](int64_t k) {
      const T g = has_grad ? grad[k] : T(0);
      m[k] = b1 * m[k] + (T(1) - b1) * g;
      v[k] = b2 * v[k] + (T(1) - b2) * g * g;
      const T mhat = m[k] / bc1;
      const T vhat = v[k] / bc2;
      // both the adam term and the decoupled decay read the pre-step value
      const T prev = theta[k];
      theta[k] = prev - lr * (mhat / (std::sqrt(vhat) + eps));
      if (decay) theta[k] -= lr * wd * prev;
    });
  }
}

// --- training loop -------------------------------------------------------

namespace {

// Argmax over the class axis with ties toward the lower class id.
template <typename T>
uint16_t argmax_class(const T* logits, int64_t k_count, int64_t stride) {
  int64_t best = 0;
  T best_v = logits[0];
  for (int64_t k = 1; k < k_count; ++k) {
    const T v = logits[k * stride];
    if (v > best_v) {
      best_v = v;
      best = k;
    }
  }
  return static_cast<uint16_t>(best + 1);
}

template <typename T>
Tensor<T> stage_batch(const std::vector<WindowSample>& windows,
                      const std::vector<int64_t>& order, int64_t begin, int64_t end,
                      std::vector<uint16_t>& labels, std::vector<uint8_t>& mask) {
  const int64_t n = end - begin;
  const int w = windows[static_cast<size_t>(order[begin])].window_size;
  const int b = windows[static_cast<size_t>(order[begin])].bands;
  const int64_t plane = static_cast<int64_t>(w) * w;
  std::vector<T> data(static_cast<size_t>(n * b * plane));
  labels.assign(static_cast<size_t>(n * plane), 0);
  mask.assign(static_cast<size_t>(n * plane), 0);
  for (int64_t i = 0; i < n; ++i) {
    const WindowSample& s = windows[static_cast<size_t>(order[begin + i])];
    for (size_t k = 0; k < s.cube.size(); ++k)
      data[static_cast<size_t>(i * b * plane) + k] = static_cast<T>(s.cube[k]);
    for (int64_t px = 0; px < plane; ++px) {
      const uint16_t lab = s.labels[static_cast<size_t>(px)];
      labels[static_cast<size_t>(i * plane + px)] = lab;
      mask[static_cast<size_t>(i * plane + px)] = lab != 0 ? 1 : 0;
    }
  }
  return Tensor<T>::from({n, b, w, w}, std::move(data), false);
}

}  // namespace

template <typename T>
std::vector<EpochLog> train(Model<T>& model, const std::vector<WindowSample>& windows,
                            const TrainConfig& cfg) {
  cfg.validate();
  if (windows.empty()) throw ValidationError("train: no training windows");
  const int w = windows.front().window_size;
  const int b = windows.front().bands;
  for (const WindowSample& s : windows)
    if (s.window_size != w || s.bands != b)
      throw ValidationError("train: window dims must be uniform");
  if (b != model.config().input_bands)
    throw ValidationError("train: window bands do not match model input_bands");
  int64_t labelled = 0;
  for (const WindowSample& s : windows)
    for (uint16_t lab : s.labels) {
      if (lab > model.config().num_classes)
        throw ValidationError("train: label exceeds model num_classes");
      if (lab != 0) ++labelled;
    }
  if (labelled == 0) throw ValidationError("train: no labelled pixel in training set");

  Rng base(cfg.seed);
  Rng shuffle_rng = base.fork(1);
  Rng dropout_rng = base.fork(2);
  AdamState<T> state;
  const int64_t count = static_cast<int64_t>(windows.size());
  const int64_t plane = static_cast<int64_t>(w) * w;
  std::vector<int64_t> order(static_cast<size_t>(count));
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochLog> log;
  std::vector<uint16_t> labels;
  std::vector<uint8_t> mask;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);
    double loss_sum = 0;
    int64_t scored = 0, correct = 0;
    for (int64_t begin = 0; begin < count; begin += cfg.batch_size) {
      const int64_t end = std::min(count, begin + cfg.batch_size);
      const int64_t n = end - begin;
      Tensor<T> x = stage_batch<T>(windows, order, begin, end, labels, mask);
      Tensor<T> logits = model.forward(x, true, dropout_rng);
      Tensor<T> loss = masked_softmax_ce(logits, labels, mask);

      const T* lp = logits.values().data();
      int64_t batch_masked = 0;
      for (int64_t i = 0; i < n; ++i)
        for (int64_t px = 0; px < plane; ++px) {
          const uint16_t lab = labels[static_cast<size_t>(i * plane + px)];
          if (lab == 0) continue;
          ++batch_masked;
          const T* cell = lp + i * model.config().num_classes * plane + px;
          if (argmax_class(cell, model.config().num_classes, plane) == lab) ++correct;
        }
      scored += batch_masked;
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(batch_masked);

      for (auto& pr : model.params()) pr.value.zero_grad();
      loss.backward();
      adamw_step(model.params(), state, cfg);
    }
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    EpochLog entry;
    entry.epoch = epoch;
    entry.mean_loss = loss_sum / static_cast<double>(scored);
    entry.train_oa = static_cast<double>(correct) / static_cast<double>(scored);
    entry.wall_seconds = dt.count();
    log.push_back(entry);
  }
  return log;
}

void write_train_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write training log: " + path);
  out << "epoch,mean_loss,train_oa,wall_seconds\n";
  char buf[128];
  for (const EpochLog& e : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.3f\n", e.epoch, e.mean_loss,
                  e.train_oa, e.wall_seconds);
    out << buf;
  }
}

// --- inference and metrics -----------------------------------------------

template <typename T>
LabelMap predict(Model<T>& model, const HyperCube& cube, const WindowPartition& part,
                 WindowTag which, int batch_size, PredictStats* stats) {
  if (batch_size < 1) throw ValidationError("predict: batch_size must be >= 1");
  if (cube.height != part.orig_height || cube.width != part.orig_width)
    throw ValidationError("predict: cube dims do not match partition");
  if (cube.bands != model.config().input_bands)
    throw ValidationError("predict: cube has " + std::to_string(cube.bands) +
                          " bands, model expects " +
                          std::to_string(model.config().input_bands));
  const int w = part.window_size;
  const int K = model.config().num_classes;
  const HyperCube padded = mirror_pad_cube(cube, w);

  std::vector<std::pair<int, int>> cells;
  for (int gr = 0; gr < part.grid_rows; ++gr)
    for (int gc = 0; gc < part.grid_cols; ++gc)
      if (part.tag_at(gr, gc) == which) cells.emplace_back(gr, gc);

  LabelMap pred;
  pred.height = cube.height;
  pred.width = cube.width;
  pred.num_classes = K;
  pred.labels.assign(static_cast<size_t>(cube.height) * cube.width, 0);
  for (int k = 1; k <= K; ++k) {
    pred.class_names.push_back("class_" + std::to_string(k));
    const uint8_t v = static_cast<uint8_t>(255 * k / K);
    pred.palette.push_back({v, v, v});
  }

  const int64_t calls0 = model.forward_calls();
  const int64_t samples0 = model.forward_samples();
  const int64_t plane = static_cast<int64_t>(w) * w;
  const int64_t bands = cube.bands;
  Rng unused(0);
  for (size_t begin = 0; begin < cells.size(); begin += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(cells.size(), begin + static_cast<size_t>(batch_size));
    const int64_t n = static_cast<int64_t>(end - begin);
    std::vector<T> data(static_cast<size_t>(n * bands * plane));
    for (int64_t i = 0; i < n; ++i) {
      const auto [gr, gc] = cells[begin + static_cast<size_t>(i)];
      for (int64_t bb = 0; bb < bands; ++bb)
        for (int dy = 0; dy < w; ++dy) {
          const float* row = padded.data.data() +
                             (bb * padded.height + (gr * w + dy)) *
                                 static_cast<int64_t>(padded.width) +
                             gc * static_cast<int64_t>(w);
          T* dst = data.data() + ((i * bands + bb) * w + dy) * static_cast<int64_t>(w);
          for (int dx = 0; dx < w; ++dx) dst[dx] = static_cast<T>(row[dx]);
        }
    }
    Tensor<T> x = Tensor<T>::from({n, bands, w, w}, std::move(data), false);
    Tensor<T> logits = model.forward(x, false, unused);
    const T* lp = logits.values().data();
    for (int64_t i = 0; i < n; ++i) {
      const auto [gr, gc] = cells[begin + static_cast<size_t>(i)];
      for (int dy = 0; dy < w; ++dy) {
        const int r = gr * w + dy;
        if (r >= cube.height) break;
        for (int dx = 0; dx < w; ++dx) {
          const int c = gc * w + dx;
          if (c >= cube.width) continue;
          const T* cell = lp + i * K * plane + dy * static_cast<int64_t>(w) + dx;
          pred.labels[static_cast<size_t>(r) * cube.width + c] =
              argmax_class(cell, K, plane);
        }
      }
    }
  }
  if (stats) {
    stats->windows_forwarded = model.forward_samples() - samples0;
    stats->forward_calls = model.forward_calls() - calls0;
  }
  return pred;
}

int64_t ConfusionMatrix::row_sum(int i) const {
  int64_t s = 0;
  for (int j = 0; j < num_classes; ++j) s += at(i, j);
  return s;
}

int64_t ConfusionMatrix::col_sum(int j) const {
  int64_t s = 0;
  for (int i = 0; i < num_classes; ++i) s += at(i, j);
  return s;
}

int64_t ConfusionMatrix::trace() const {
  int64_t s = 0;
  for (int i = 0; i < num_classes; ++i) s += at(i, i);
  return s;
}

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& truth,
                          const WindowPartition& part, WindowTag scope) {
  if (pred.height != truth.height || pred.width != truth.width)
    throw ValidationError("confusion: prediction and truth dims differ");
  if (truth.height != part.orig_height || truth.width != part.orig_width)
    throw ValidationError("confusion: dims do not match partition");
  if (pred.num_classes != truth.num_classes)
    throw ValidationError("confusion: class counts differ (prediction " +
                          std::to_string(pred.num_classes) + ", truth " +
                          std::to_string(truth.num_classes) + ")");
  const int K = truth.num_classes;
  const int w = part.window_size;
  ConfusionMatrix cm;
  cm.num_classes = K;
  cm.counts.assign(static_cast<size_t>(K) * K, 0);
  for (int r = 0; r < truth.height; ++r)
    for (int c = 0; c < truth.width; ++c) {
      if (part.tag_at(r / w, c / w) != scope) continue;
      const uint16_t t = truth.labels[static_cast<size_t>(r) * truth.width + c];
      if (t == 0) continue;
      const uint16_t p = pred.labels[static_cast<size_t>(r) * pred.width + c];
      if (p == 0)
        throw ValidationError("confusion: unpredicted pixel inside scope at (" +
                              std::to_string(r) + ", " + std::to_string(c) + ")");
      ++cm.at(t - 1, p - 1);
      ++cm.total;
    }
  return cm;
}

MetricsReport metrics(const ConfusionMatrix& cm, PaConvention convention) {
  if (cm.num_classes < 1) throw ValidationError("metrics: empty confusion matrix");
  if (cm.total <= 0) throw ValidationError("metrics: no scored pixels");
  const int K = cm.num_classes;
  const double N = static_cast<double>(cm.total);

  MetricsReport rep;
  rep.per_class_pa.resize(static_cast<size_t>(K));
  double pa_sum = 0;
  for (int j = 0; j < K; ++j) {
    const int64_t denom =
        convention == PaConvention::ColumnMarginal ? cm.col_sum(j) : cm.row_sum(j);
    const double pa =
        denom == 0 ? 0.0 : static_cast<double>(cm.at(j, j)) / static_cast<double>(denom);
    rep.per_class_pa[static_cast<size_t>(j)] = pa;
    pa_sum += pa;
  }
  rep.oa = static_cast<double>(cm.trace()) / N;
  rep.aa = pa_sum / static_cast<double>(K);

  double expected = 0;
  for (int i = 0; i < K; ++i)
    expected += static_cast<double>(cm.row_sum(i)) * static_cast<double>(cm.col_sum(i));
  const double denom = N * N - expected;
  rep.kappa = denom == 0 ? 1.0 : (N * static_cast<double>(cm.trace()) - expected) / denom;
  return rep;
}

json metrics_to_json(const MetricsReport& report, const ConfusionMatrix& cm) {
  json j;
  j["per_class_pa"] = report.per_class_pa;
  j["oa"] = report.oa;
  j["aa"] = report.aa;
  j["kappa"] = report.kappa;
  json rows = json::array();
  for (int i = 0; i < cm.num_classes; ++i) {
    json row = json::array();
    for (int k = 0; k < cm.num_classes; ++k) row.push_back(cm.at(i, k));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  j["n_test_pixels"] = cm.total;
  return j;
}

template void adamw_step(std::vector<NamedParam<float>>&, AdamState<float>&,
                         const TrainConfig&);
template void adamw_step(std::vector<NamedParam<double>>&, AdamState<double>&,
                         const TrainConfig&);
template std::vector<EpochLog> train(Model<float>&, const std::vector<WindowSample>&,
                                     const TrainConfig&);
template std::vector<EpochLog> train(Model<double>&, const std::vector<WindowSample>&,
                                     const TrainConfig&);
template LabelMap predict(Model<float>&, const HyperCube&, const WindowPartition&,
                          WindowTag, int, PredictStats*);
template LabelMap predict(Model<double>&, const HyperCube&, const WindowPartition&,
                          WindowTag, int, PredictStats*);

}  // namespace hsi
