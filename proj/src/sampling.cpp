#include "hsi/sampling.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "hsi/rng.hpp"

namespace hsi {

namespace {

using json = nlohmann::ordered_json;

// Ping-pong reflection of index i into [0, n); first bounce is inclusive
// (pad(n) = n-1).
int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

const char* tag_name(WindowTag t) {
  switch (t) {
    case WindowTag::Train: return "train";
    case WindowTag::Test: return "test";
    default: return "unassigned";
  }
}

WindowTag tag_from_name(const std::string& s) {
  if (s == "train") return WindowTag::Train;
  if (s == "test") return WindowTag::Test;
  if (s == "unassigned") return WindowTag::Unassigned;
  throw ValidationError("unknown window tag: " + s);
}

}  // namespace

int64_t WindowPartition::count(WindowTag t) const {
  return std::count(tags.begin(), tags.end(), t);
}

LabelMap mirror_pad_labels(const LabelMap& labels, int w) {
  if (w <= 0) throw ValidationError("window size must be >= 1");
  const int ph = static_cast<int>(ceil_div(labels.height, w)) * w;
  const int pw = static_cast<int>(ceil_div(labels.width, w)) * w;
  LabelMap out = labels;
  out.height = ph;
  out.width = pw;
  out.labels.assign(static_cast<size_t>(ph) * pw, 0);
  for (int r = 0; r < ph; ++r) {
    const int sr = reflect_index(r, labels.height);
    for (int c = 0; c < pw; ++c)
      out.at(r, c) = labels.at(sr, reflect_index(c, labels.width));
  }
  return out;
}

HyperCube mirror_pad_cube(const HyperCube& cube, int w) {
  if (w <= 0) throw ValidationError("window size must be >= 1");
  const int ph = static_cast<int>(ceil_div(cube.height, w)) * w;
  const int pw = static_cast<int>(ceil_div(cube.width, w)) * w;
  HyperCube out;
  out.height = ph;
  out.width = pw;
  out.bands = cube.bands;
  out.band_mask = cube.band_mask;
  out.normalized = cube.normalized;
  out.data.resize(static_cast<size_t>(ph) * pw * cube.bands);
  for (int b = 0; b < cube.bands; ++b)
    for (int r = 0; r < ph; ++r) {
      const int sr = reflect_index(r, cube.height);
      for (int c = 0; c < pw; ++c)
        out.at(r, c, b) = cube.at(sr, reflect_index(c, cube.width), b);
    }
  return out;
}

std::pair<HyperCube, LabelMap> mirror_pad(const HyperCube& cube,
                                          const LabelMap& labels, int w) {
  if (cube.height != labels.height || cube.width != labels.width)
    throw ValidationError("cube and label dims differ");
  return {mirror_pad_cube(cube, w), mirror_pad_labels(labels, w)};
}

WindowPartition leakage_free_sample(const HyperCube& cube, const LabelMap& labels,
                                    int w, double uniform_rate, uint64_t seed) {
  return leakage_free_sample(
      cube, labels, w,
      std::vector<double>(static_cast<size_t>(labels.num_classes) + 1, uniform_rate),
      seed);
}

WindowPartition leakage_free_sample(const HyperCube& cube, const LabelMap& labels,
                                    int w, const std::vector<double>& rates,
                                    uint64_t seed) {
  if (w <= 0) throw ValidationError("window size must be >= 1");
  if (cube.height != labels.height || cube.width != labels.width)
    throw ValidationError("cube and label dims differ");
  const int K = labels.num_classes;
  if (rates.size() != static_cast<size_t>(K) + 1)
    throw ValidationError("need one sampling rate per class");
  for (int c = 1; c <= K; ++c)
    if (!(rates[c] > 0.0 && rates[c] < 1.0))
      throw ValidationError("rate for class " + std::to_string(c) +
                            " must lie in (0, 1)");

  const LabelMap padded = mirror_pad_labels(labels, w);

  WindowPartition part;
  part.window_size = w;
  part.orig_height = labels.height;
  part.orig_width = labels.width;
  part.padded_height = padded.height;
  part.padded_width = padded.width;
  part.grid_rows = padded.height / w;
  part.grid_cols = padded.width / w;
  part.seed = seed;
  part.rates = rates;
  part.rates[0] = 0.0;  // class 0 has no rate; keep the slot canonical
  const int n_windows = part.grid_rows * part.grid_cols;
  part.tags.assign(n_windows, WindowTag::Unassigned);
  part.owning_class.assign(n_windows, 0);

  // Per-window class presence bitmaps.
  std::vector<std::vector<char>> contains(
      n_windows, std::vector<char>(static_cast<size_t>(K) + 1, 0));
  for (int r = 0; r < padded.height; ++r)
    for (int c = 0; c < padded.width; ++c) {
      const uint16_t v = padded.at(r, c);
      if (v > 0) contains[(r / w) * part.grid_cols + (c / w)][v] = 1;
    }

  Rng rng(seed);
  std::vector<char> available(n_windows, 1);
  for (int cls = 1; cls <= K; ++cls) {
    std::vector<int> candidates;
    for (int win = 0; win < n_windows; ++win)
      if (available[win] && contains[win][cls]) candidates.push_back(win);
    const int64_t n = static_cast<int64_t>(candidates.size());
    if (n < 2)
      throw ValidationError(
          "class " + std::to_string(cls) + " appears in only " +
          std::to_string(n) +
          " still-available window(s); choose a smaller window size so every "
          "class lands in at least two windows");
    const int64_t n_train = std::clamp<int64_t>(
        static_cast<int64_t>(rates[cls] * static_cast<double>(n)), 1, n - 1);
    rng.shuffle(candidates);
    for (int64_t i = 0; i < n; ++i) {
      const int win = candidates[i];
      part.tags[win] = i < n_train ? WindowTag::Train : WindowTag::Test;
      part.owning_class[win] = static_cast<uint16_t>(cls);
      available[win] = 0;
    }
  }
  return part;
}

std::vector<WindowSample> extract_windows(const HyperCube& cube,
                                          const LabelMap& labels,
                                          const WindowPartition& partition,
                                          WindowTag which) {
  if (cube.height != partition.orig_height || cube.width != partition.orig_width ||
      labels.height != partition.orig_height || labels.width != partition.orig_width)
    throw ValidationError("partition was built for different dims");
  const int w = partition.window_size;
  const auto [pc, pl] = mirror_pad(cube, labels, w);

  std::vector<WindowSample> out;
  for (int wr = 0; wr < partition.grid_rows; ++wr)
    for (int wc = 0; wc < partition.grid_cols; ++wc) {
      if (partition.tag_at(wr, wc) != which) continue;
      WindowSample s;
      s.window_size = w;
      s.bands = cube.bands;
      s.grid_row = wr;
      s.grid_col = wc;
      s.cube.resize(static_cast<size_t>(cube.bands) * w * w);
      s.labels.resize(static_cast<size_t>(w) * w);
      for (int b = 0; b < cube.bands; ++b)
        for (int r = 0; r < w; ++r)
          for (int c = 0; c < w; ++c)
            s.cube[(static_cast<size_t>(b) * w + r) * w + c] =
                pc.at(wr * w + r, wc * w + c, b);
      for (int r = 0; r < w; ++r)
        for (int c = 0; c < w; ++c)
          s.labels[static_cast<size_t>(r) * w + c] = pl.at(wr * w + r, wc * w + c);
      out.push_back(std::move(s));
    }
  return out;
}

AuditReport audit_partition(const WindowPartition& partition, const LabelMap& labels) {
  if (labels.height != partition.orig_height || labels.width != partition.orig_width)
    throw ValidationError("partition was built for different dims");
  const int K = labels.num_classes;
  const int w = partition.window_size;
  const LabelMap padded = mirror_pad_labels(labels, w);

  AuditReport rep;
  rep.train_pixels_per_class.assign(K + 1, 0);
  rep.test_pixels_per_class.assign(K + 1, 0);
  rep.train_windows_per_class.assign(K + 1, 0);
  rep.test_windows_per_class.assign(K + 1, 0);

  // Pixel sets are tracked explicitly so leakage is measured, not assumed.
  std::set<std::pair<int, int>> train_set, test_set;
  for (int r = 0; r < padded.height; ++r)
    for (int c = 0; c < padded.width; ++c) {
      const uint16_t v = padded.at(r, c);
      if (v == 0) continue;
      switch (partition.tag_at(r / w, c / w)) {
        case WindowTag::Train:
          rep.train_pixels_per_class[v]++;
          train_set.insert({r, c});
          break;
        case WindowTag::Test:
          rep.test_pixels_per_class[v]++;
          test_set.insert({r, c});
          break;
        case WindowTag::Unassigned:
          rep.uncovered_labelled_pixel_count++;
          break;
      }
    }
  for (const auto& px : train_set)
    if (test_set.count(px)) rep.leakage_pixel_count++;

  for (int wr = 0; wr < partition.grid_rows; ++wr)
    for (int wc = 0; wc < partition.grid_cols; ++wc) {
      const WindowTag t = partition.tag_at(wr, wc);
      if (t == WindowTag::Unassigned) continue;
      std::vector<char> present(K + 1, 0);
      for (int r = wr * w; r < (wr + 1) * w; ++r)
        for (int c = wc * w; c < (wc + 1) * w; ++c) present[padded.at(r, c)] = 1;
      for (int cls = 1; cls <= K; ++cls)
        if (present[cls]) {
          if (t == WindowTag::Train)
            rep.train_windows_per_class[cls]++;
          else
            rep.test_windows_per_class[cls]++;
        }
    }

  rep.p1_balanced = true;
  for (int cls = 1; cls <= K; ++cls)
    if (rep.train_pixels_per_class[cls] == 0 || rep.test_pixels_per_class[cls] == 0)
      rep.p1_balanced = false;
  rep.p2_max_utilisation = rep.uncovered_labelled_pixel_count == 0;
  rep.p3_no_leakage = rep.leakage_pixel_count == 0;
  rep.p4_seeded = !partition.rates.empty();
  return rep;
}

PixelSplit baseline_pixel_sample(const LabelMap& labels, double rate, uint64_t seed) {
  if (!(rate > 0.0 && rate < 1.0))
    throw ValidationError("rate must lie in (0, 1)");
  const int K = labels.num_classes;
  std::vector<std::vector<std::pair<int, int>>> by_class(K + 1);
  for (int r = 0; r < labels.height; ++r)
    for (int c = 0; c < labels.width; ++c) {
      const uint16_t v = labels.at(r, c);
      if (v > 0) by_class[v].push_back({r, c});
    }
  Rng rng(seed);
  PixelSplit split;
  for (int cls = 1; cls <= K; ++cls) {
    auto& px = by_class[cls];
    const int64_t n = static_cast<int64_t>(px.size());
    if (n < 2)
      throw ValidationError("class " + std::to_string(cls) +
                            " has fewer than two labelled pixels");
    const int64_t n_train = std::clamp<int64_t>(
        static_cast<int64_t>(rate * static_cast<double>(n)), 1, n - 1);
    rng.shuffle(px);
    split.train.insert(split.train.end(), px.begin(), px.begin() + n_train);
    split.test.insert(split.test.end(), px.begin() + n_train, px.end());
  }
  return split;
}

OverlapStats patch_overlap_audit(const PixelSplit& split, int height, int width,
                                 int patch_radius) {
  if (patch_radius < 0) throw ValidationError("patch radius must be >= 0");
  OverlapStats stats;
  stats.test_pixel_count = static_cast<int64_t>(split.test.size());
  if (split.test.empty()) return stats;

  std::vector<char> train_grid(static_cast<size_t>(height) * width, 0);
  for (const auto& [r, c] : split.train)
    train_grid[static_cast<size_t>(r) * width + c] = 1;

  const int reach = 2 * patch_radius;  // patches intersect iff Chebyshev <= 2r
  for (const auto& [r, c] : split.test) {
    bool overlapping = false;
    for (int rr = std::max(0, r - reach); rr <= std::min(height - 1, r + reach) && !overlapping; ++rr)
      for (int cc = std::max(0, c - reach); cc <= std::min(width - 1, c + reach); ++cc)
        if (train_grid[static_cast<size_t>(rr) * width + cc]) {
          overlapping = true;
          break;
        }
    if (overlapping) stats.overlapping_test_pixel_count++;
  }
  stats.fraction = static_cast<double>(stats.overlapping_test_pixel_count) /
                   static_cast<double>(stats.test_pixel_count);
  return stats;
}

void WindowPartition::save(const std::filesystem::path& path) const {
  json j;
  j["w"] = window_size;
  j["seed"] = seed;
  j["rates"] = std::vector<double>(rates.begin() + 1, rates.end());
  j["orig_dims"] = {orig_height, orig_width};
  j["padded_dims"] = {padded_height, padded_width};
  j["grid_dims"] = {grid_rows, grid_cols};
  json assignments = json::array();
  for (int wr = 0; wr < grid_rows; ++wr)
    for (int wc = 0; wc < grid_cols; ++wc) {
      const int idx = wr * grid_cols + wc;
      assignments.push_back(
          {wr, wc, tag_name(tags[idx]), owning_class[idx]});
    }
  j["assignments"] = assignments;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot write partition: " + path.string());
  out << j.dump(2) << "\n";
}

WindowPartition WindowPartition::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open partition: " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ValidationError("malformed partition JSON: " + path.string());
  WindowPartition p;
  try {
    p.window_size = j.at("w").get<int>();
    p.seed = j.at("seed").get<uint64_t>();
    const auto r = j.at("rates").get<std::vector<double>>();
    p.rates.assign(1, 0.0);
    p.rates.insert(p.rates.end(), r.begin(), r.end());
    p.orig_height = j.at("orig_dims")[0].get<int>();
    p.orig_width = j.at("orig_dims")[1].get<int>();
    p.padded_height = j.at("padded_dims")[0].get<int>();
    p.padded_width = j.at("padded_dims")[1].get<int>();
    p.grid_rows = j.at("grid_dims")[0].get<int>();
    p.grid_cols = j.at("grid_dims")[1].get<int>();
    p.tags.assign(static_cast<size_t>(p.grid_rows) * p.grid_cols,
                  WindowTag::Unassigned);
    p.owning_class.assign(p.tags.size(), 0);
    for (const auto& a : j.at("assignments")) {
      const int wr = a[0].get<int>(), wc = a[1].get<int>();
      if (wr < 0 || wr >= p.grid_rows || wc < 0 || wc >= p.grid_cols)
        throw ValidationError("assignment outside window grid");
      const int idx = wr * p.grid_cols + wc;
      p.tags[idx] = tag_from_name(a[2].get<std::string>());
      p.owning_class[idx] = a[3].get<uint16_t>();
    }
  } catch (const json::exception& e) {
    throw ValidationError("bad partition JSON " + path.string() + ": " + e.what());
  }
  return p;
}

}  // namespace hsi
