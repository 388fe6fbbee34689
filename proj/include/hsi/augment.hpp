#pragma once

#include <cstdint>
#include <vector>

#include "hsi/sampling.hpp"

namespace hsi {

enum class RotationMode { QuarterTurns, Arbitrary };
enum class FlipAxis { Horizontal, Vertical };

/// Seeded augmentation policy for training windows. Defaults are repo
/// choices, not dataset-calibrated values.
struct AugmentPolicy {
  RotationMode rotation = RotationMode::QuarterTurns;
  bool flip = true;
  double noise_sigma = 0.02;       // fraction of the [-1,1] data range
  double brightness_delta = 0.1;   // multiplicative factor drawn in 1 +/- delta
  int copies = 3;                  // augmented variants appended per window
  uint64_t seed = 0;

  void validate() const;
};

/// Rotates a square window clockwise. QuarterTurns requires angle to be a
/// multiple of 90 and permutes pixels exactly; Arbitrary resamples nearest-
/// neighbour about the window centre with reflect fill. Labels follow the
/// same index map.
WindowSample rotate_window(const WindowSample& win, double angle_degrees,
                           RotationMode mode);

WindowSample flip_window(const WindowSample& win, FlipAxis axis);

/// Adds zero-mean gaussian noise with std = sigma * 2 (the width of the
/// normalized range) to cube values, clamped back to [-1, 1]. Labels
/// untouched.
WindowSample add_noise(const WindowSample& win, double sigma, uint64_t seed);

/// Multiplies cube values by `factor` (> 0) and clamps to [-1, 1].
WindowSample adjust_brightness(const WindowSample& win, double factor);

/// Originals first, then `copies` variants per window grouped by source
/// window. Each variant draws rotation/flip/brightness/noise parameters from
/// a substream keyed by (window index, copy index), so the expansion is
/// order-independent and bit-reproducible.
std::vector<WindowSample> augment_set(const std::vector<WindowSample>& train_windows,
                                      const AugmentPolicy& policy);

}  // namespace hsi
