#include "hsi/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "hsi/rng.hpp"

namespace hsi {

namespace {

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

// dst(r,c) <- src(sr(r,c), sc(r,c)) applied to every band plane and labels.
template <typename SrcIndex>
WindowSample remap(const WindowSample& win, SrcIndex&& src_index) {
  const int w = win.window_size;
  WindowSample out = win;
  for (int r = 0; r < w; ++r)
    for (int c = 0; c < w; ++c) {
      const auto [sr, sc] = src_index(r, c);
      for (int b = 0; b < win.bands; ++b)
        out.cube[(static_cast<size_t>(b) * w + r) * w + c] =
            win.cube[(static_cast<size_t>(b) * w + sr) * w + sc];
      out.labels[static_cast<size_t>(r) * w + c] =
          win.labels[static_cast<size_t>(sr) * w + sc];
    }
  return out;
}

}  // namespace

void AugmentPolicy::validate() const {
  if (noise_sigma < 0) throw ValidationError("noise sigma must be >= 0");
  if (brightness_delta < 0 || brightness_delta >= 1)
    throw ValidationError("brightness delta must lie in [0, 1)");
  if (copies < 0 || copies > 16)
    throw ValidationError("copies must lie in [0, 16]");
}

WindowSample rotate_window(const WindowSample& win, double angle_degrees,
                           RotationMode mode) {
  const int w = win.window_size;
  if (static_cast<size_t>(w) * w != win.labels.size())
    throw ValidationError("rotate_window needs a square window");

  if (mode == RotationMode::QuarterTurns) {
    double turns_d = angle_degrees / 90.0;
    const long turns = std::lround(turns_d);
    if (std::abs(turns_d - static_cast<double>(turns)) > 1e-9)
      throw ValidationError("quarter-turn mode needs a multiple of 90 degrees");
    const int q = static_cast<int>(((turns % 4) + 4) % 4);
    switch (q) {
      case 0: return win;
      case 1: return remap(win, [w](int r, int c) { return std::pair{w - 1 - c, r}; });
      case 2: return remap(win, [w](int r, int c) { return std::pair{w - 1 - r, w - 1 - c}; });
      default: return remap(win, [w](int r, int c) { return std::pair{c, w - 1 - r}; });
    }
  }

  // Arbitrary angle: inverse-rotate each destination pixel about the centre,
  // round to the nearest source pixel, reflect out-of-range indices.
  const double theta = angle_degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double centre = (w - 1) / 2.0;
  return remap(win, [=](int r, int c) {
    const double y = r - centre, x = c - centre;
    // inverse of a clockwise rotation in (row, col) coordinates
    const double sy = cs * y - sn * x;
    const double sx = sn * y + cs * x;
    const int sr = reflect_index(static_cast<int>(std::lround(sy + centre)), w);
    const int sc = reflect_index(static_cast<int>(std::lround(sx + centre)), w);
    return std::pair{sr, sc};
  });
}

WindowSample flip_window(const WindowSample& win, FlipAxis axis) {
  const int w = win.window_size;
  if (axis == FlipAxis::Horizontal)
    return remap(win, [w](int r, int c) { return std::pair{r, w - 1 - c}; });
  return remap(win, [w](int r, int c) { return std::pair{w - 1 - r, c}; });
}

WindowSample add_noise(const WindowSample& win, double sigma, uint64_t seed) {
  if (sigma < 0) throw ValidationError("noise sigma must be >= 0");
  if (sigma == 0) return win;
  WindowSample out = win;
  Rng rng(seed);
  const double std_dev = sigma * 2.0;  // range [-1,1] has width 2
  for (auto& v : out.cube)
    v = std::clamp(static_cast<float>(v + std_dev * rng.next_gaussian()), -1.0f, 1.0f);
  return out;
}

WindowSample adjust_brightness(const WindowSample& win, double factor) {
  if (!(factor > 0)) throw ValidationError("brightness factor must be > 0");
  WindowSample out = win;
  for (auto& v : out.cube)
    v = std::clamp(static_cast<float>(v * factor), -1.0f, 1.0f);
  return out;
}

std::vector<WindowSample> augment_set(const std::vector<WindowSample>& train_windows,
                                      const AugmentPolicy& policy) {
  policy.validate();
  std::vector<WindowSample> out = train_windows;
  out.reserve(train_windows.size() * (1 + policy.copies));
  const Rng base(policy.seed);
  for (size_t i = 0; i < train_windows.size(); ++i) {
    for (int copy = 0; copy < policy.copies; ++copy) {
      Rng rng = base.fork(Rng::mix_key(i, copy));
      WindowSample v = train_windows[i];

      if (policy.rotation == RotationMode::QuarterTurns)
        v = rotate_window(v, 90.0 * static_cast<double>(rng.next_below(4)),
                          RotationMode::QuarterTurns);
      else
        v = rotate_window(v, 360.0 * rng.next_double(), RotationMode::Arbitrary);

      if (policy.flip) {
        switch (rng.next_below(3)) {
          case 0: break;
          case 1: v = flip_window(v, FlipAxis::Horizontal); break;
          default: v = flip_window(v, FlipAxis::Vertical); break;
        }
      }
      if (policy.brightness_delta > 0)
        v = adjust_brightness(
            v, 1.0 + policy.brightness_delta * (2.0 * rng.next_double() - 1.0));
      if (policy.noise_sigma > 0)
        v = add_noise(v, policy.noise_sigma, rng.next_u64());
      out.push_back(std::move(v));
    }
  }
  return out;
}

}  // namespace hsi
