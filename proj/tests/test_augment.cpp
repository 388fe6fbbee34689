#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "hsi/augment.hpp"

using namespace hsi;

namespace {

WindowSample square(int w, int bands = 1) {
  WindowSample s;
  s.window_size = w;
  s.bands = bands;
  s.cube.resize(static_cast<size_t>(bands) * w * w);
  s.labels.resize(static_cast<size_t>(w) * w);
  for (size_t i = 0; i < s.cube.size(); ++i) s.cube[i] = static_cast<float>(i) * 0.01f;
  for (size_t i = 0; i < s.labels.size(); ++i)
    s.labels[i] = static_cast<uint16_t>(i % 5);
  return s;
}

float px(const WindowSample& s, int b, int r, int c) {
  return s.cube[(static_cast<size_t>(b) * s.window_size + r) * s.window_size + c];
}

}  // namespace

TEST_CASE("quarter-turn rotation permutes pixels clockwise") {
  const WindowSample s = square(3, 2);
  const WindowSample r90 = rotate_window(s, 90, RotationMode::QuarterTurns);
  for (int b = 0; b < 2; ++b)
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) REQUIRE(px(r90, b, r, c) == px(s, b, 2 - c, r));
  // top-left of the source lands at the top-right
  CHECK(r90.labels[2] == s.labels[0]);

  const WindowSample r180 = rotate_window(s, 180, RotationMode::QuarterTurns);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      REQUIRE(r180.labels[r * 3 + c] == s.labels[(2 - r) * 3 + (2 - c)]);

  const WindowSample full = rotate_window(s, 360, RotationMode::QuarterTurns);
  CHECK(full.cube == s.cube);
  CHECK(full.labels == s.labels);

  // four quarter turns compose to the identity
  WindowSample acc = s;
  for (int i = 0; i < 4; ++i) acc = rotate_window(acc, 90, RotationMode::QuarterTurns);
  CHECK(acc.cube == s.cube);

  const WindowSample neg = rotate_window(s, -90, RotationMode::QuarterTurns);
  const WindowSample r270 = rotate_window(s, 270, RotationMode::QuarterTurns);
  CHECK(neg.cube == r270.cube);

  CHECK_THROWS_AS((void)rotate_window(s, 45, RotationMode::QuarterTurns),
                  ValidationError);
}

TEST_CASE("arbitrary rotation agrees with quarter turns at multiples of 90") {
  const WindowSample s = square(5);
  for (double angle : {90.0, 180.0, 270.0}) {
    const WindowSample a = rotate_window(s, angle, RotationMode::Arbitrary);
    const WindowSample q = rotate_window(s, angle, RotationMode::QuarterTurns);
    CHECK(a.cube == q.cube);
    CHECK(a.labels == q.labels);
  }
  // off-axis angles stay a permutation-with-repeats of original values
  const WindowSample odd = rotate_window(s, 37.0, RotationMode::Arbitrary);
  for (float v : odd.cube)
    CHECK(std::find(s.cube.begin(), s.cube.end(), v) != s.cube.end());
}

TEST_CASE("flips mirror the correct axis and self-invert") {
  const WindowSample s = square(4, 2);
  const WindowSample h = flip_window(s, FlipAxis::Horizontal);
  const WindowSample v = flip_window(s, FlipAxis::Vertical);
  for (int b = 0; b < 2; ++b)
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        REQUIRE(px(h, b, r, c) == px(s, b, r, 3 - c));
        REQUIRE(px(v, b, r, c) == px(s, b, 3 - r, c));
      }
  CHECK(flip_window(h, FlipAxis::Horizontal).cube == s.cube);
  CHECK(flip_window(v, FlipAxis::Vertical).labels == s.labels);
}

TEST_CASE("noise is seeded, clamped and label-preserving") {
  WindowSample s = square(4);
  for (auto& x : s.cube) x = 0.95f;
  const WindowSample a = add_noise(s, 0.1, 5);
  const WindowSample b = add_noise(s, 0.1, 5);
  const WindowSample c = add_noise(s, 0.1, 6);
  CHECK(a.cube == b.cube);
  CHECK(a.cube != c.cube);
  CHECK(a.labels == s.labels);
  for (float x : a.cube) {
    REQUIRE(x <= 1.0f);
    REQUIRE(x >= -1.0f);
  }
  CHECK(add_noise(s, 0.0, 5).cube == s.cube);
}

TEST_CASE("brightness scales and clamps without touching labels") {
  WindowSample s = square(3);
  s.cube = {0.5f, -0.5f, 0.9f, 0.0f, 1.0f, -1.0f, 0.2f, -0.2f, 0.75f};
  const WindowSample out = adjust_brightness(s, 1.5);
  CHECK(out.cube[0] == doctest::Approx(0.75f));
  CHECK(out.cube[1] == doctest::Approx(-0.75f));
  CHECK(out.cube[2] == 1.0f);   // clamped
  CHECK(out.cube[5] == -1.0f);  // clamped
  CHECK(out.labels == s.labels);
  CHECK(adjust_brightness(s, 1.0).cube == s.cube);
  CHECK_THROWS_AS((void)adjust_brightness(s, 0.0), ValidationError);
}

TEST_CASE("augment_set keeps originals first and groups variants by window") {
  std::vector<WindowSample> base;
  for (int i = 0; i < 3; ++i) {
    WindowSample s = square(4, 2);
    for (auto& v : s.cube) v += static_cast<float>(i);  // distinct per window
    for (auto& v : s.cube) v = std::clamp(v, -1.0f, 1.0f);
    base.push_back(s);
  }
  AugmentPolicy policy;
  policy.copies = 2;
  policy.seed = 9;
  const auto out = augment_set(base, policy);
  REQUIRE(out.size() == 3 * (1 + 2));
  for (int i = 0; i < 3; ++i) {
    CHECK(out[i].cube == base[i].cube);
    CHECK(out[i].labels == base[i].labels);
  }
  // variants keep their source window's grid position and label multiset
  for (size_t i = 0; i < 3; ++i)
    for (int copy = 0; copy < 2; ++copy) {
      const auto& v = out[3 + i * 2 + copy];
      auto sorted_labels = v.labels;
      auto expect = base[i].labels;
      std::sort(sorted_labels.begin(), sorted_labels.end());
      std::sort(expect.begin(), expect.end());
      CHECK(sorted_labels == expect);
    }
}

TEST_CASE("augment_set is reproducible and copy-count linear") {
  std::vector<WindowSample> base{square(4), square(4)};
  AugmentPolicy policy;
  policy.copies = 3;
  policy.seed = 21;
  const auto a = augment_set(base, policy);
  const auto b = augment_set(base, policy);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].cube == b[i].cube);
    CHECK(a[i].labels == b[i].labels);
  }
  policy.seed = 22;
  const auto c = augment_set(base, policy);
  bool any_diff = false;
  for (size_t i = base.size(); i < a.size(); ++i)
    if (a[i].cube != c[i].cube) any_diff = true;
  CHECK(any_diff);

  policy.copies = 0;
  const auto plain = augment_set(base, policy);
  CHECK(plain.size() == 2);
}

TEST_CASE("augment policy validation") {
  AugmentPolicy p;
  CHECK_NOTHROW(p.validate());
  p.noise_sigma = -0.1;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  p = AugmentPolicy{};
  p.brightness_delta = 1.0;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  p = AugmentPolicy{};
  p.copies = 17;
  CHECK_THROWS_AS(p.validate(), ValidationError);
}
