#include "hsi/datacube.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

#include "hsi/rng.hpp"

namespace hsi {

namespace {

using json = nlohmann::ordered_json;

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file: " + path.string());
  in.seekg(0, std::ios::end);
  const std::streamoff len = in.tellg();
  in.seekg(0);
  std::vector<char> buf(static_cast<size_t>(len));
  in.read(buf.data(), len);
  if (!in) throw RuntimeError("short read: " + path.string());
  return buf;
}

void write_file(const std::filesystem::path& path, const void* data, size_t len) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot open for write: " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
  if (!out) throw RuntimeError("short write: " + path.string());
}

json parse_json_file(const std::filesystem::path& path) {
  const auto buf = read_file(path);
  json j = json::parse(buf.begin(), buf.end(), nullptr, false);
  if (j.is_discarded()) throw ValidationError("malformed JSON: " + path.string());
  return j;
}

// All payloads are little-endian on disk; this build assumes a little-endian
// host, which the formats below rely on for memcpy round-trips.
static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian");

}  // namespace

void HyperCube::validate() const {
  if (height <= 0 || width <= 0 || bands <= 0)
    throw ValidationError("cube dims must be positive");
  const size_t expect = static_cast<size_t>(height) * width * bands;
  if (data.size() != expect)
    throw ValidationError("cube data length " + std::to_string(data.size()) +
                          " != H*W*B = " + std::to_string(expect));
  if (!band_mask.empty()) {  // empty means identity
    if (band_mask.size() != static_cast<size_t>(bands))
      throw ValidationError("band_mask size mismatch");
    for (size_t i = 1; i < band_mask.size(); ++i)
      if (band_mask[i] <= band_mask[i - 1])
        throw ValidationError("band_mask must be strictly increasing");
  }
  for (size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      const int b = static_cast<int>(i / (static_cast<size_t>(height) * width));
      const int r = static_cast<int>((i / width) % height);
      const int c = static_cast<int>(i % width);
      throw ValidationError("non-finite value at (row " + std::to_string(r) +
                            ", col " + std::to_string(c) + ", band " +
                            std::to_string(b) + ")");
    }
    if (normalized && (data[i] < -1.0f || data[i] > 1.0f))
      throw ValidationError("normalized cube has value outside [-1, 1]");
  }
}

std::vector<int64_t> LabelMap::class_counts() const {
  std::vector<int64_t> counts(static_cast<size_t>(num_classes) + 1, 0);
  for (uint16_t v : labels) {
    if (v > num_classes) throw ValidationError("label value " + std::to_string(v) +
                                               " exceeds num_classes");
    counts[v]++;
  }
  return counts;
}

void LabelMap::validate() const {
  if (height <= 0 || width <= 0) throw ValidationError("label dims must be positive");
  if (num_classes < 1) throw ValidationError("num_classes must be >= 1");
  if (labels.size() != static_cast<size_t>(height) * width)
    throw ValidationError("label grid length mismatch");
  if (class_names.size() != static_cast<size_t>(num_classes))
    throw ValidationError("class_names size != num_classes");
  if (palette.size() != static_cast<size_t>(num_classes))
    throw ValidationError("palette size != num_classes");
  const auto counts = class_counts();
  for (int c = 1; c <= num_classes; ++c)
    if (counts[c] == 0)
      throw ValidationError("class " + std::to_string(c) + " (" +
                            class_names[c - 1] + ") has zero pixels");
}

HyperCube load_cube(const std::filesystem::path& header_path) {
  const json hdr = parse_json_file(header_path);
  HyperCube cube;
  try {
    cube.height = hdr.at("height").get<int>();
    cube.width = hdr.at("width").get<int>();
    cube.bands = hdr.at("bands").get<int>();
    if (hdr.at("dtype").get<std::string>() != "f32le")
      throw ValidationError("unsupported dtype (expected f32le)");
    if (hdr.at("interleave").get<std::string>() != "bsq")
      throw ValidationError("unsupported interleave (expected bsq)");
    if (hdr.contains("band_mask"))
      cube.band_mask = hdr.at("band_mask").get<std::vector<int>>();
    if (hdr.contains("normalized")) cube.normalized = hdr.at("normalized").get<bool>();
  } catch (const json::exception& e) {
    throw ValidationError("bad cube header " + header_path.string() + ": " + e.what());
  }
  if (cube.height <= 0 || cube.width <= 0 || cube.bands <= 0)
    throw ValidationError("cube dims must be positive: " + header_path.string());
  if (cube.band_mask.empty()) {
    cube.band_mask.resize(cube.bands);
    for (int b = 0; b < cube.bands; ++b) cube.band_mask[b] = b;
  }

  const auto payload_path =
      header_path.parent_path() / hdr.at("payload").get<std::string>();
  const auto payload = read_file(payload_path);
  const size_t expect = static_cast<size_t>(cube.height) * cube.width * cube.bands * 4;
  if (payload.size() != expect)
    throw ValidationError("payload " + payload_path.string() + " is " +
                          std::to_string(payload.size()) + " bytes, expected " +
                          std::to_string(expect));
  cube.data.resize(expect / 4);
  std::memcpy(cube.data.data(), payload.data(), payload.size());
  cube.validate();
  return cube;
}

void save_cube(const HyperCube& cube, const std::filesystem::path& header_path) {
  cube.validate();
  std::string stem = header_path.filename().string();
  if (stem.ends_with(".hdr.json")) stem.resize(stem.size() - 9);
  const std::string payload_name = stem + ".bin";

  json hdr;
  hdr["height"] = cube.height;
  hdr["width"] = cube.width;
  hdr["bands"] = cube.bands;
  hdr["dtype"] = "f32le";
  hdr["interleave"] = "bsq";
  hdr["payload"] = payload_name;
  std::vector<int> mask = cube.band_mask;
  if (mask.empty()) {
    mask.resize(cube.bands);
    for (int b = 0; b < cube.bands; ++b) mask[b] = b;
  }
  hdr["band_mask"] = mask;
  hdr["normalized"] = cube.normalized;
  const std::string text = hdr.dump(2) + "\n";
  write_file(header_path, text.data(), text.size());
  write_file(header_path.parent_path() / payload_name, cube.data.data(),
             cube.data.size() * 4);
}

std::filesystem::path resolve_cube_header(const std::filesystem::path& path) {
  if (path.filename().string().ends_with(".json")) return path;
  return std::filesystem::path(path.string() + ".hdr.json");
}

std::filesystem::path resolve_labels_sidecar(const std::filesystem::path& path) {
  if (path.filename().string().ends_with(".json")) return path;
  return std::filesystem::path(path.string() + ".gt.json");
}

LabelMap load_labels(const std::filesystem::path& sidecar_path) {
  const json meta = parse_json_file(sidecar_path);
  LabelMap lm;
  try {
    lm.height = meta.at("height").get<int>();
    lm.width = meta.at("width").get<int>();
    lm.num_classes = meta.at("num_classes").get<int>();
    lm.class_names = meta.at("class_names").get<std::vector<std::string>>();
    for (const auto& rgb : meta.at("palette")) {
      if (!rgb.is_array() || rgb.size() != 3)
        throw ValidationError("palette entries must be [r,g,b]");
      lm.palette.push_back({rgb[0].get<uint8_t>(), rgb[1].get<uint8_t>(),
                            rgb[2].get<uint8_t>()});
    }
  } catch (const json::exception& e) {
    throw ValidationError("bad label sidecar " + sidecar_path.string() + ": " +
                          e.what());
  }
  const auto payload_path =
      sidecar_path.parent_path() / meta.at("payload").get<std::string>();
  const auto payload = read_file(payload_path);
  const size_t expect = static_cast<size_t>(lm.height) * lm.width * 2;
  if (payload.size() != expect)
    throw ValidationError("label payload is " + std::to_string(payload.size()) +
                          " bytes, sidecar dims need " + std::to_string(expect));
  lm.labels.resize(expect / 2);
  std::memcpy(lm.labels.data(), payload.data(), payload.size());
  lm.validate();
  return lm;
}

void save_labels(const LabelMap& labels, const std::filesystem::path& sidecar_path) {
  labels.validate();
  std::string stem = sidecar_path.filename().string();
  if (stem.ends_with(".gt.json")) stem.resize(stem.size() - 8);
  const std::string payload_name = stem + ".gt.bin";

  json meta;
  meta["height"] = labels.height;
  meta["width"] = labels.width;
  meta["num_classes"] = labels.num_classes;
  meta["class_names"] = labels.class_names;
  json pal = json::array();
  for (const auto& rgb : labels.palette) pal.push_back({rgb[0], rgb[1], rgb[2]});
  meta["palette"] = pal;
  meta["payload"] = payload_name;
  const std::string text = meta.dump(2) + "\n";
  write_file(sidecar_path, text.data(), text.size());
  write_file(sidecar_path.parent_path() / payload_name, labels.labels.data(),
             labels.labels.size() * 2);
}

HyperCube drop_bands(const HyperCube& cube, const std::vector<int>& discard) {
  if (cube.normalized)
    throw ValidationError("drop_bands must run before normalize");
  std::set<int> seen;
  for (int idx : discard) {
    if (idx < 0 || idx >= cube.bands)
      throw ValidationError("discard index " + std::to_string(idx) +
                            " out of range [0, " + std::to_string(cube.bands) + ")");
    if (!seen.insert(idx).second)
      throw ValidationError("duplicate discard index " + std::to_string(idx));
  }
  HyperCube out;
  out.height = cube.height;
  out.width = cube.width;
  out.bands = cube.bands - static_cast<int>(discard.size());
  if (out.bands <= 0) throw ValidationError("cannot discard every band");
  out.normalized = false;
  const size_t plane = static_cast<size_t>(cube.height) * cube.width;
  out.data.reserve(plane * out.bands);
  for (int b = 0; b < cube.bands; ++b) {
    if (seen.count(b)) continue;
    out.band_mask.push_back(cube.band_mask.empty() ? b : cube.band_mask[b]);
    const float* src = cube.data.data() + plane * b;
    out.data.insert(out.data.end(), src, src + plane);
  }
  return out;
}

HyperCube normalize(const HyperCube& cube, NormalizeMode mode) {
  if (cube.normalized) throw ValidationError("cube is already normalized");
  HyperCube out = cube;
  out.normalized = true;
  const size_t plane = static_cast<size_t>(cube.height) * cube.width;

  auto map_range = [](float* vals, size_t n, float lo, float hi) {
    if (hi <= lo) {
      std::fill(vals, vals + n, 0.0f);
      return;
    }
    const float scale = 2.0f / (hi - lo);
    for (size_t i = 0; i < n; ++i)
      vals[i] = std::clamp((vals[i] - lo) * scale - 1.0f, -1.0f, 1.0f);
  };

  if (mode == NormalizeMode::Global) {
    const auto [lo, hi] = std::minmax_element(out.data.begin(), out.data.end());
    map_range(out.data.data(), out.data.size(), *lo, *hi);
  } else {
    for (int b = 0; b < out.bands; ++b) {
      float* vals = out.data.data() + plane * b;
      const auto [lo, hi] = std::minmax_element(vals, vals + plane);
      map_range(vals, plane, *lo, *hi);
    }
  }
  return out;
}

std::pair<HyperCube, LabelMap> synth_dataset(const SynthSpec& spec, uint64_t seed) {
  if (spec.num_classes < 2) throw ValidationError("synth needs K >= 2");
  if (spec.height <= 0 || spec.width <= 0 || spec.bands <= 0)
    throw ValidationError("synth dims must be positive");
  if (spec.region_granularity < 1)
    throw ValidationError("region_granularity must be >= 1");
  if (spec.noise_level < 0) throw ValidationError("noise_level must be >= 0");
  const int64_t pixels = static_cast<int64_t>(spec.height) * spec.width;
  const int64_t regions =
      static_cast<int64_t>(spec.num_classes) * spec.region_granularity;
  if (regions > pixels)
    throw ValidationError("infeasible spec: K * granularity > H * W");

  Rng rng(seed);
  const int K = spec.num_classes;
  const int B = spec.bands;
  const double sep = spec.spectral_separation;

  // Class means: classes spread along a shared offset axis plus per-band
  // wiggle, rescaled until every pair is at least `sep` apart.
  Rng mean_rng = rng.fork(1);
  std::vector<std::vector<double>> means(K, std::vector<double>(B));
  double spacing = sep;
  for (;;) {
    Rng wiggle = mean_rng.fork(0);
    for (int k = 0; k < K; ++k)
      for (int b = 0; b < B; ++b)
        means[k][b] = k * spacing + 0.25 * sep * (wiggle.next_double() - 0.5);
    double min_dist = std::numeric_limits<double>::infinity();
    for (int i = 0; i < K; ++i)
      for (int j = i + 1; j < K; ++j) {
        double d2 = 0;
        for (int b = 0; b < B; ++b) {
          const double d = means[i][b] - means[j][b];
          d2 += d * d;
        }
        min_dist = std::min(min_dist, std::sqrt(d2));
      }
    if (sep <= 0 || min_dist >= sep) break;
    spacing *= 1.5;
  }

  // Labels: nearest seed point wins; every class owns `granularity` seeds, so
  // regions are contiguous and every class is present.
  Rng seed_rng = rng.fork(2);
  struct SeedPoint {
    int row, col, cls;
  };
  std::vector<SeedPoint> seeds;
  std::set<std::pair<int, int>> taken;
  for (int k = 1; k <= K; ++k) {
    for (int g = 0; g < spec.region_granularity; ++g) {
      for (;;) {
        const int r = static_cast<int>(seed_rng.next_below(spec.height));
        const int c = static_cast<int>(seed_rng.next_below(spec.width));
        if (taken.insert({r, c}).second) {
          seeds.push_back({r, c, k});
          break;
        }
      }
    }
  }

  LabelMap lm;
  lm.height = spec.height;
  lm.width = spec.width;
  lm.num_classes = K;
  lm.labels.resize(pixels);
  for (int r = 0; r < spec.height; ++r) {
    for (int c = 0; c < spec.width; ++c) {
      int64_t best = std::numeric_limits<int64_t>::max();
      int cls = 0;
      for (const auto& s : seeds) {
        const int64_t dr = r - s.row, dc = c - s.col;
        const int64_t d2 = dr * dr + dc * dc;
        if (d2 < best) {
          best = d2;
          cls = s.cls;
        }
      }
      lm.at(r, c) = static_cast<uint16_t>(cls);
    }
  }
  for (int k = 1; k <= K; ++k) {
    lm.class_names.push_back("class_" + std::to_string(k));
    Rng color = rng.fork(Rng::mix_key(3, k));
    lm.palette.push_back({static_cast<uint8_t>(64 + color.next_below(192)),
                          static_cast<uint8_t>(64 + color.next_below(192)),
                          static_cast<uint8_t>(64 + color.next_below(192))});
  }

  HyperCube cube;
  cube.height = spec.height;
  cube.width = spec.width;
  cube.bands = B;
  cube.band_mask.resize(B);
  for (int b = 0; b < B; ++b) cube.band_mask[b] = b;
  cube.data.resize(pixels * static_cast<int64_t>(B));
  Rng noise_rng = rng.fork(4);
  for (int r = 0; r < spec.height; ++r) {
    for (int c = 0; c < spec.width; ++c) {
      const int k = lm.at(r, c) - 1;
      Rng px = noise_rng.fork(Rng::mix_key(r, c));
      for (int b = 0; b < B; ++b) {
        double v = means[k][b];
        if (spec.noise_level > 0) v += spec.noise_level * px.next_gaussian();
        cube.at(r, c, b) = static_cast<float>(v);
      }
    }
  }
  cube.validate();
  lm.validate();
  return {std::move(cube), std::move(lm)};
}

}  // namespace hsi
