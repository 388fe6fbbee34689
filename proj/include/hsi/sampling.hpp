#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "hsi/datacube.hpp"

namespace hsi {

enum class WindowTag : uint8_t { Unassigned = 0, Train = 1, Test = 2 };

/// Result of the leakage-free balanced window sampler: the scene is mirror-
/// padded to a multiple of the window size, split into disjoint w x w
/// windows, and every window holding at least one labelled pixel is assigned
/// wholly to Train or Test.
struct WindowPartition {
  int window_size = 0;
  int orig_height = 0, orig_width = 0;
  int padded_height = 0, padded_width = 0;
  int grid_rows = 0, grid_cols = 0;
  uint64_t seed = 0;
  std::vector<double> rates;            // per class 1..K (index 0 unused)
  std::vector<WindowTag> tags;          // grid_rows * grid_cols, row-major
  std::vector<uint16_t> owning_class;   // class whose turn assigned the window

  WindowTag tag_at(int wr, int wc) const { return tags[wr * grid_cols + wc]; }
  int64_t count(WindowTag t) const;

  void save(const std::filesystem::path& path) const;
  static WindowPartition load(const std::filesystem::path& path);
};

/// Quantitative check of the sampling principles for a given partition.
struct AuditReport {
  std::vector<int64_t> train_pixels_per_class;   // index 0 unused
  std::vector<int64_t> test_pixels_per_class;
  std::vector<int64_t> train_windows_per_class;  // windows containing the class
  std::vector<int64_t> test_windows_per_class;
  int64_t leakage_pixel_count = 0;      // pixels in both sets (must be 0)
  int64_t uncovered_labelled_pixel_count = 0;
  bool p1_balanced = false;       // every class present in both sets
  bool p2_max_utilisation = false;  // no labelled pixel left unassigned
  bool p3_no_leakage = false;
  bool p4_seeded = false;
  bool all_pass() const {
    return p1_balanced && p2_max_utilisation && p3_no_leakage && p4_seeded;
  }
};

/// Baseline per-pixel stratified random split (the strategy whose spatial
/// leakage the window sampler eliminates).
struct PixelSplit {
  std::vector<std::pair<int, int>> train;  // (row, col), labelled
  std::vector<std::pair<int, int>> test;
};

struct OverlapStats {
  int64_t test_pixel_count = 0;
  int64_t overlapping_test_pixel_count = 0;
  double fraction = 0.0;
};

/// One training/testing sample: a w x w cube window (band-major planes) plus
/// its w x w label window and the window's grid position.
struct WindowSample {
  int window_size = 0;
  int bands = 0;
  int grid_row = 0, grid_col = 0;
  std::vector<float> cube;       // bands * w * w
  std::vector<uint16_t> labels;  // w * w
};

/// Extends the right and bottom borders by reflection so both dims become
/// multiples of w. Reflection is inclusive: padded index i >= H reads row
/// 2H-1-i (ping-pong for deeper pads). The original region is bit-identical.
std::pair<HyperCube, LabelMap> mirror_pad(const HyperCube& cube,
                                          const LabelMap& labels, int w);
LabelMap mirror_pad_labels(const LabelMap& labels, int w);
HyperCube mirror_pad_cube(const HyperCube& cube, int w);

/// Window-based balanced sampler. Classes are processed in ascending id
/// order; for each class the still-unassigned windows containing it are
/// collected and floor(rate_c * count), clamped to [1, count-1], are drawn
/// uniformly (seeded) as Train with the rest as Test; collected windows are
/// then excluded from later classes. Throws ValidationError naming the class
/// if fewer than two candidate windows remain at its turn.
WindowPartition leakage_free_sample(const HyperCube& cube, const LabelMap& labels,
                                    int w, const std::vector<double>& rates,
                                    uint64_t seed);
WindowPartition leakage_free_sample(const HyperCube& cube, const LabelMap& labels,
                                    int w, double uniform_rate, uint64_t seed);

/// Materializes the cube/label windows for one side of the partition.
/// Windows keep every labelled pixel they contain, whichever class owns them;
/// mirrored border pixels come along as genuine labelled copies.
std::vector<WindowSample> extract_windows(const HyperCube& cube,
                                          const LabelMap& labels,
                                          const WindowPartition& partition,
                                          WindowTag which);

AuditReport audit_partition(const WindowPartition& partition, const LabelMap& labels);

/// Stratified per-class uniform pixel sampling at `rate`, deterministic by
/// seed. Train count per class is floor(rate * n) clamped to [1, n-1].
PixelSplit baseline_pixel_sample(const LabelMap& labels, double rate, uint64_t seed);

/// Counts test pixels whose (2r+1)^2 feature patch intersects any train
/// pixel's patch, i.e. Chebyshev distance <= 2r to some train pixel.
OverlapStats patch_overlap_audit(const PixelSplit& split, int height, int width,
                                 int patch_radius);

}  // namespace hsi
