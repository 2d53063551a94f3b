// Procedural multi-domain segmentation scenes.
//
// A scene is a sky band above a horizon line, a ground band below it, and a
// handful of rectangles, ellipses and triangles for the object classes. The
// label map is the exact geometry used to paint the image. Domains differ in
// style (palette, texture) and in structure (horizon offset, object scale).
#pragma once

#include "metaseg/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace metaseg {

struct TaskSpec {
  std::size_t classes = 5;
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<std::string> class_names{"sky", "ground", "block", "blob", "spike"};

  // Throws std::invalid_argument when K < 2, H or W < 16, or H/W not
  // divisible by `downsampling`.
  void validate(std::size_t downsampling = 4) const;
};

struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;  // row-major H×W

  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  bool operator==(const LabelMap&) const = default;
};

using Rgb = std::array<double, 3>;

struct Texture {
  double amplitude = 0.08;           // peak deviation from the palette colour
  double correlation_length = 8.0;   // pixels between noise lattice points
};

struct Layout {
  double horizon_min = 0.30;  // fraction of image height
  double horizon_max = 0.55;
  std::size_t objects_min = 3;
  std::size_t objects_max = 6;
  double size_min = 0.15;  // fraction of min(H, W)
  double size_max = 0.35;
};

struct StructureShift {
  double offset = 0.0;  // horizon offset, fraction of image height
  double scale = 1.0;   // multiplies object sizes
};

struct DomainSpec {
  std::string id;
  std::vector<Rgb> palette;       // one per class
  std::vector<Texture> texture;   // one per class
  Layout layout;
  StructureShift shift;

  void validate(std::size_t classes) const;
  bool same_parameters(const DomainSpec& other) const;
};

struct Sample {
  Tensor image;  // 3×H×W in [0, 1]
  LabelMap label;
  std::string domain_id;
  std::uint64_t seed = 0;
};

DomainSpec default_domain_spec(const TaskSpec& task, std::string id = "domain-0");

// Deterministic in (spec, task, seed).
Sample generate_sample(const DomainSpec& spec, const TaskSpec& task,
                       std::uint64_t seed);

// n_domains specs sharing class semantics. Palette and texture deviate from
// the default spec in proportion to style_gap; horizon offset and object scale
// in proportion to structure_gap. Both gaps are expected in [0, 1].
std::vector<DomainSpec> make_domain_family(std::size_t n_domains, double style_gap,
                                           double structure_gap, std::uint64_t seed,
                                           const TaskSpec& task = {});

// Seed ranges of the reproducible split.
inline constexpr std::uint64_t kTrainSeedEnd = 800;
inline constexpr std::uint64_t kEvalSeedBegin = 800;
inline constexpr std::uint64_t kEvalSeedEnd = 1000;

// Reads an 8-bit RGB image and an 8-bit single-channel label PNG and resizes
// both to the task resolution (bilinear for the image, nearest for labels).
Sample ingest_pair(const std::filesystem::path& image_path,
                   const std::filesystem::path& label_path, const TaskSpec& task);

// Writes `<stem>_image.png` and `<stem>_label.png` into `dir`.
void export_sample(const Sample& sample, const std::filesystem::path& dir,
                   const std::string& stem);

}  // namespace metaseg
