// The five network components: content encoder, style encoder, generator,
// segmenter and the per-class critic bank.
//
// All forward passes are functional: they read parameters from a
// ParameterSet passed by const reference, so the same code evaluates the
// stored parameters, the intermediate set after the aggregate-loss step, or
// the set after the critic step.
#pragma once

#include "metaseg/domain.hpp"
#include "metaseg/tensor.hpp"

#include <array>
#include <filesystem>
#include <initializer_list>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace metaseg {

enum class Component { kContentEncoder, kStyleEncoder, kGenerator, kSegmenter, kCritic };

inline constexpr std::array<Component, 5> kAllComponents{
    Component::kContentEncoder, Component::kStyleEncoder, Component::kGenerator,
    Component::kSegmenter, Component::kCritic};

std::string_view component_name(Component c);  // "E_c", "E_s", "G", "S", "C"

struct ArchConfig {
  std::size_t kernel = 3;
  std::array<std::size_t, 3> encoder_channels{8, 16, 32};
  std::array<std::size_t, 2> decoder_channels{16, 16};
  std::size_t feature_channels = 32;  // per-pixel critic input width
  std::array<std::size_t, 2> style_channels{8, 16};
  std::size_t style_dim = 8;
  std::array<std::size_t, 2> generator_channels{16, 8};
  std::size_t critic_hidden = 32;

  static constexpr std::size_t kDownsampling = 4;
  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Component component;
    Tensor value;
  };

  void add(std::string name, Component component, Tensor value);

  const Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  std::size_t scalar_count(Component c) const;

  void set(std::size_t index, Tensor value);
  std::vector<std::size_t> indices(Component c) const;
  std::vector<Tensor> tensors(Component c) const;

  // Entries of the listed components only; used to prove that a forward pass
  // touches nothing else.
  ParameterSet subset(std::initializer_list<Component> components) const;
  // Every value replaced by a fresh tracked leaf.
  ParameterSet as_leaves() const;
  ParameterSet detached() const;
  bool bitwise_equal(const ParameterSet& other) const;
  bool bitwise_equal(const ParameterSet& other, Component c) const;
  bool all_finite() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct ContentCode {
  Tensor code;                  // c3 × H/4 × W/4
  std::array<Tensor, 2> skips;  // full and half resolution encoder features
};

struct Segmentation {
  Tensor logits;    // K×H×W
  Tensor features;  // c×H×W penultimate per-pixel features
};

ContentCode encode_content(const Tensor& image, const ParameterSet& params);
Tensor encode_style(const Tensor& image, const ParameterSet& params);  // {s}
// Output 3×H×W in (0, 1). Uses the content code only (no skips).
Tensor generate(const ContentCode& content, const Tensor& style,
                const ParameterSet& params);
Segmentation segment(const ContentCode& content, const ParameterSet& params);

// Critic k applied at every pixel: H×W map of non-negative scores.
Tensor critic_eval(const Tensor& features, std::size_t k, const ParameterSet& params);
// Critic k on a c×N matrix of feature columns: 1×N.
Tensor critic_columns(const Tensor& columns, std::size_t k, const ParameterSet& params);
std::size_t critic_count(const ParameterSet& params);

ParameterSet init_models(const TaskSpec& task, const ArchConfig& arch,
                         std::uint64_t seed);

struct CheckpointMeta {
  TaskSpec task;
  ArchConfig arch;
  std::uint64_t seed = 0;
  std::size_t iteration = 0;
};

// Layout: a header line, the byte length of a JSON manifest, the manifest
// (configs plus name/component/shape/byte offset of every parameter), then the
// raw little-endian float64 buffers.
void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     const ParameterSet& params);
std::pair<CheckpointMeta, ParameterSet> load_checkpoint(
    const std::filesystem::path& path);

}  // namespace metaseg
