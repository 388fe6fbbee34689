#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hsi/datacube.hpp"
#include "hsi/rng.hpp"

namespace fs = std::filesystem;
using namespace hsi;

namespace {

fs::path fresh_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("hsicls_dc_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

HyperCube ramp_cube(int h, int w, int b) {
  HyperCube cube;
  cube.height = h;
  cube.width = w;
  cube.bands = b;
  cube.data.resize(static_cast<size_t>(h) * w * b);
  for (size_t i = 0; i < cube.data.size(); ++i)
    cube.data[i] = static_cast<float>(i) * 0.25f - 3.0f;
  return cube;
}

LabelMap two_class_labels(int h, int w) {
  LabelMap lm;
  lm.height = h;
  lm.width = w;
  lm.num_classes = 2;
  lm.class_names = {"earth", "water"};
  lm.palette = {{{120, 80, 10}}, {{20, 40, 200}}};
  lm.labels.assign(static_cast<size_t>(h) * w, 0);
  lm.at(0, 0) = 1;
  lm.at(h - 1, w - 1) = 2;
  return lm;
}

}  // namespace

TEST_CASE("cube save/load round trip is bit exact") {
  const fs::path dir = fresh_dir("roundtrip");
  HyperCube cube = ramp_cube(5, 4, 3);
  cube.band_mask = {2, 5, 9};
  save_cube(cube, dir / "toy.hdr.json");

  const HyperCube back = load_cube(dir / "toy.hdr.json");
  CHECK(back.height == 5);
  CHECK(back.width == 4);
  CHECK(back.bands == 3);
  CHECK(back.band_mask == cube.band_mask);
  CHECK(back.data == cube.data);
  CHECK_FALSE(back.normalized);
}

TEST_CASE("label save/load round trip keeps names and palette") {
  const fs::path dir = fresh_dir("labels");
  const LabelMap lm = two_class_labels(6, 7);
  save_labels(lm, dir / "toy.gt.json");
  const LabelMap back = load_labels(dir / "toy.gt.json");
  CHECK(back.labels == lm.labels);
  CHECK(back.num_classes == 2);
  CHECK(back.class_names == lm.class_names);
  CHECK(back.palette == lm.palette);
}

TEST_CASE("prefix resolution appends the sidecar suffixes") {
  CHECK(resolve_cube_header("data/toy") == fs::path("data/toy.hdr.json"));
  CHECK(resolve_cube_header("data/toy.hdr.json") == fs::path("data/toy.hdr.json"));
  CHECK(resolve_labels_sidecar("data/toy") == fs::path("data/toy.gt.json"));
  CHECK(resolve_labels_sidecar("x/y.gt.json") == fs::path("x/y.gt.json"));
}

TEST_CASE("loader rejects missing and malformed inputs") {
  const fs::path dir = fresh_dir("badload");
  CHECK_THROWS_AS((void)load_cube(dir / "absent.hdr.json"), ValidationError);

  HyperCube cube = ramp_cube(3, 3, 2);
  save_cube(cube, dir / "c.hdr.json");
  // truncate payload
  fs::resize_file(dir / "c.bin", 10);
  CHECK_THROWS_AS((void)load_cube(dir / "c.hdr.json"), ValidationError);

  std::ofstream(dir / "d.hdr.json")
      << R"({"height":2,"width":2,"bands":1,"dtype":"f64le","interleave":"bsq","payload":"d.bin"})";
  std::ofstream(dir / "d.bin") << "xxxxxxxxxxxxxxxx";
  CHECK_THROWS_AS((void)load_cube(dir / "d.hdr.json"), ValidationError);
}

TEST_CASE("label validation requires every class to appear") {
  LabelMap lm = two_class_labels(4, 4);
  lm.at(3, 3) = 0;  // drops the only class-2 pixel
  CHECK_THROWS_WITH_AS(lm.validate(), doctest::Contains("class 2"), ValidationError);

  LabelMap over = two_class_labels(4, 4);
  over.at(1, 1) = 3;
  CHECK_THROWS_AS(over.validate(), ValidationError);
}

TEST_CASE("drop_bands removes planes and tracks original indices") {
  HyperCube cube = ramp_cube(2, 2, 4);
  const HyperCube out = drop_bands(cube, {1, 3});
  CHECK(out.bands == 2);
  CHECK(out.band_mask == std::vector<int>{0, 2});
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      CHECK(out.at(r, c, 0) == cube.at(r, c, 0));
      CHECK(out.at(r, c, 1) == cube.at(r, c, 2));
    }

  CHECK_THROWS_AS((void)drop_bands(cube, {4}), ValidationError);
  CHECK_THROWS_AS((void)drop_bands(cube, {1, 1}), ValidationError);
  CHECK_THROWS_AS((void)drop_bands(cube, {0, 1, 2, 3}), ValidationError);
}

TEST_CASE("drop_bands composes with a previous mask") {
  HyperCube cube = ramp_cube(2, 2, 3);
  cube.band_mask = {10, 20, 30};
  const HyperCube out = drop_bands(cube, {1});
  CHECK(out.band_mask == std::vector<int>{10, 30});
}

TEST_CASE("per-band normalization maps each band onto [-1,1]") {
  HyperCube cube = ramp_cube(4, 4, 3);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) cube.at(r, c, 2) = 5.0f;  // constant band

  const HyperCube out = normalize(cube, NormalizeMode::PerBand);
  CHECK(out.normalized);
  for (int b = 0; b < 2; ++b) {
    float lo = 1e9f, hi = -1e9f;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        lo = std::min(lo, out.at(r, c, b));
        hi = std::max(hi, out.at(r, c, b));
      }
    CHECK(lo == doctest::Approx(-1.0f));
    CHECK(hi == doctest::Approx(1.0f));
  }
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) CHECK(out.at(r, c, 2) == 0.0f);
}

TEST_CASE("global normalization preserves cross-band ordering") {
  HyperCube cube = ramp_cube(4, 4, 2);  // 32 values, indices below stay in range
  const HyperCube out = normalize(cube, NormalizeMode::Global);
  float lo = 1e9f, hi = -1e9f;
  for (float v : out.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo == doctest::Approx(-1.0f));
  CHECK(hi == doctest::Approx(1.0f));
  // global scaling is monotone across the whole cube
  CHECK((cube.data[3] < cube.data[20]) == (out.data[3] < out.data[20]));
}

TEST_CASE("synth dataset is deterministic and fully labelled") {
  SynthSpec spec;
  spec.height = 24;
  spec.width = 20;
  spec.bands = 6;
  spec.num_classes = 5;
  auto [cube_a, labels_a] = synth_dataset(spec, 31);
  auto [cube_b, labels_b] = synth_dataset(spec, 31);
  auto [cube_c, labels_c] = synth_dataset(spec, 32);

  CHECK(cube_a.data == cube_b.data);
  CHECK(labels_a.labels == labels_b.labels);
  CHECK(cube_a.data != cube_c.data);

  CHECK(cube_a.height == 24);
  CHECK(cube_a.width == 20);
  CHECK(cube_a.bands == 6);
  CHECK(labels_a.num_classes == 5);
  const auto counts = labels_a.class_counts();
  for (int k = 1; k <= 5; ++k) CHECK(counts[k] > 0);
  CHECK_NOTHROW(labels_a.validate());
  CHECK_NOTHROW(cube_a.validate());
}

TEST_CASE("synth class means separate in proportion to the requested distance") {
  SynthSpec spec;
  spec.height = 40;
  spec.width = 40;
  spec.bands = 8;
  spec.num_classes = 3;
  spec.spectral_separation = 2.0;
  spec.noise_level = 0.05;
  auto [cube, labels] = synth_dataset(spec, 4);

  std::vector<std::vector<double>> means(4, std::vector<double>(8, 0.0));
  std::vector<int64_t> n(4, 0);
  for (int r = 0; r < 40; ++r)
    for (int c = 0; c < 40; ++c) {
      const int k = labels.at(r, c);
      ++n[k];
      for (int b = 0; b < 8; ++b) means[k][b] += cube.at(r, c, b);
    }
  for (int k = 1; k <= 3; ++k)
    for (int b = 0; b < 8; ++b) means[k][b] /= static_cast<double>(n[k]);
  for (int i = 1; i <= 3; ++i)
    for (int j = i + 1; j <= 3; ++j) {
      double d2 = 0;
      for (int b = 0; b < 8; ++b) {
        const double d = means[i][b] - means[j][b];
        d2 += d * d;
      }
      CHECK(std::sqrt(d2) > 1.0);  // generated at separation 2, noise shrinks little
    }
}

TEST_CASE("cube validation rejects non-finite data") {
  HyperCube cube = ramp_cube(2, 2, 1);
  cube.data[2] = std::nanf("");
  CHECK_THROWS_AS(cube.validate(), ValidationError);
}
