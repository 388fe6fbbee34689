#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hsi/common.hpp"

namespace hsi {

/// Dense H x W x B grid of finite reals. Stored band-sequential (one H x W
/// plane per band), matching the on-disk payload and the channel-plane layout
/// the network consumes. Immutable by convention once constructed.
struct HyperCube {
  int height = 0;
  int width = 0;
  int bands = 0;
  std::vector<float> data;       // band-major: data[(b*H + r)*W + c]
  std::vector<int> band_mask;    // retained original band indices, ascending;
                                 // empty means identity 0..bands-1
  bool normalized = false;

  float at(int row, int col, int band) const {
    return data[(static_cast<size_t>(band) * height + row) * width + col];
  }
  float& at(int row, int col, int band) {
    return data[(static_cast<size_t>(band) * height + row) * width + col];
  }
  size_t size() const { return data.size(); }

  /// Checks dims, data length, finiteness and (when normalized) range.
  void validate() const;
};

/// Per-pixel class ids; 0 means unlabeled, 1..K are classes.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<uint16_t> labels;  // row-major
  int num_classes = 0;
  std::vector<std::string> class_names;               // size K
  std::vector<std::array<uint8_t, 3>> palette;        // size K

  uint16_t at(int row, int col) const {
    return labels[static_cast<size_t>(row) * width + col];
  }
  uint16_t& at(int row, int col) {
    return labels[static_cast<size_t>(row) * width + col];
  }

  /// Pixel count per class id 1..K (index 0 unused).
  std::vector<int64_t> class_counts() const;

  /// Checks label range and that every class 1..K has at least one pixel.
  void validate() const;
};

// On-disk formats:
//   cube    <name>.hdr.json {height,width,bands,dtype:"f32le",interleave:"bsq",
//                            payload:"<name>.bin", band_mask, normalized,
//                            wavelengths?}  +  <name>.bin (raw f32le, BSQ)
//   labels  <name>.gt.json  {height,width,num_classes,class_names,palette,
//                            payload:"<name>.gt.bin"}  +  raw u16le row-major
HyperCube load_cube(const std::filesystem::path& header_path);
void save_cube(const HyperCube& cube, const std::filesystem::path& header_path);

LabelMap load_labels(const std::filesystem::path& sidecar_path);
void save_labels(const LabelMap& labels, const std::filesystem::path& sidecar_path);

// Dataset prefixes are accepted anywhere a header path is: "data/toy" resolves
// to "data/toy.hdr.json" (cube) or "data/toy.gt.json" (labels).
std::filesystem::path resolve_cube_header(const std::filesystem::path& path);
std::filesystem::path resolve_labels_sidecar(const std::filesystem::path& path);

/// Removes the given band positions (0-based indices into the current band
/// list). band_mask keeps the surviving original indices.
HyperCube drop_bands(const HyperCube& cube, const std::vector<int>& discard);

enum class NormalizeMode { PerBand, Global };

/// Affine min-max map onto [-1, 1]; a constant band (or cube, in Global mode)
/// maps to 0.
HyperCube normalize(const HyperCube& cube, NormalizeMode mode = NormalizeMode::PerBand);

struct SynthSpec {
  int height = 64;
  int width = 64;
  int bands = 16;
  int num_classes = 4;
  int region_granularity = 3;   // seed regions per class
  double spectral_separation = 1.0;
  double noise_level = 0.1;     // gaussian sigma added per band
};

/// Deterministic desk-scale dataset: K class mean spectra with pairwise L2
/// distance >= spectral_separation, labels as contiguous nearest-seed regions
/// covering the full scene, per-band gaussian noise. Bit-identical for a
/// fixed seed.
std::pair<HyperCube, LabelMap> synth_dataset(const SynthSpec& spec, uint64_t seed);

}  // namespace hsi
