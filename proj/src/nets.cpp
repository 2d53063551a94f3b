#include "metaseg/nets.hpp"

#include "metaseg/serialization.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace metaseg {

namespace {

Tensor conv(const Tensor& x, const ParameterSet& p, const std::string& name,
            std::size_t stride = 1) {
  const Tensor& w = p.get(name + ".weight");
  return conv2d(x, w, p.get(name + ".bias"), {stride, w.dim(2) / 2});
}

Tensor encoder_block(const Tensor& x, const ParameterSet& p, const std::string& name) {
  return relu(instance_norm(conv(x, p, name)));
}

Tensor cat(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat(parts, 0);
}

Tensor linear_columns(const Tensor& columns, const ParameterSet& p,
                      const std::string& name) {
  const Tensor& w = p.get(name + ".weight");
  const Tensor& b = p.get(name + ".bias");
  return add(matmul(w, columns), reshape(b, {b.size(), 1}));
}

}  // namespace

std::string_view component_name(Component c) {
  switch (c) {
    case Component::kContentEncoder: return "E_c";
    case Component::kStyleEncoder: return "E_s";
    case Component::kGenerator: return "G";
    case Component::kSegmenter: return "S";
    case Component::kCritic: return "C";
  }
  return "?";
}

void ArchConfig::validate() const {
  auto positive = [](std::size_t v) { return v > 0; };
  const bool ok = kernel % 2 == 1 && std::ranges::all_of(encoder_channels, positive) &&
                  std::ranges::all_of(decoder_channels, positive) &&
                  std::ranges::all_of(style_channels, positive) &&
                  std::ranges::all_of(generator_channels, positive) &&
                  feature_channels > 0 && style_dim > 0 && critic_hidden > 0;
  if (!ok) {
    throw std::invalid_argument(
        "ArchConfig: kernel must be odd and all widths positive");
  }
}

// ---------------------------------------------------------------------------

void ParameterSet::add(std::string name, Component component, Tensor value) {
  if (index_.contains(name)) {
    throw std::invalid_argument("ParameterSet: duplicate parameter " + name);
  }
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), component, std::move(value)});
}

const Tensor& ParameterSet::get(std::string_view name) const {
  return entries_[index_of(name)].value;
}

bool ParameterSet::contains(std::string_view name) const {
  return index_.find(name) != index_.end();
}

std::size_t ParameterSet::index_of(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::out_of_range("ParameterSet: no parameter named " + std::string(name));
  }
  return it->second;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

std::size_t ParameterSet::scalar_count(Component c) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.component == c) n += e.value.size();
  }
  return n;
}

void ParameterSet::set(std::size_t index, Tensor value) {
  auto& entry = entries_.at(index);
  if (value.shape() != entry.value.shape()) {
    throw ShapeError("ParameterSet::set: " + entry.name + " has shape " +
                     to_string(entry.value.shape()) + ", got " +
                     to_string(value.shape()));
  }
  entry.value = std::move(value);
}

std::vector<std::size_t> ParameterSet::indices(Component c) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].component == c) out.push_back(i);
  }
  return out;
}

std::vector<Tensor> ParameterSet::tensors(Component c) const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) {
    if (e.component == c) out.push_back(e.value);
  }
  return out;
}

ParameterSet ParameterSet::subset(std::initializer_list<Component> components) const {
  ParameterSet out;
  for (const auto& e : entries_) {
    if (std::find(components.begin(), components.end(), e.component) !=
        components.end()) {
      out.add(e.name, e.component, e.value);
    }
  }
  return out;
}

ParameterSet ParameterSet::as_leaves() const {
  ParameterSet out = *this;
  for (auto& e : out.entries_) e.value = e.value.as_leaf();
  return out;
}

ParameterSet ParameterSet::detached() const {
  ParameterSet out = *this;
  for (auto& e : out.entries_) e.value = e.value.detach();
  return out;
}

namespace {

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

bool ParameterSet::bitwise_equal(const ParameterSet& other) const {
  if (size() != other.size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    if (entries_[i].name != other.entries_[i].name ||
        !same_bits(entries_[i].value, other.entries_[i].value)) {
      return false;
    }
  }
  return true;
}

bool ParameterSet::bitwise_equal(const ParameterSet& other, Component c) const {
  for (std::size_t i : indices(c)) {
    if (!other.contains(entries_[i].name) ||
        !same_bits(entries_[i].value, other.get(entries_[i].name))) {
      return false;
    }
  }
  return indices(c).size() == other.indices(c).size();
}

bool ParameterSet::all_finite() const {
  for (const auto& e : entries_) {
    for (double v : e.value.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------

ContentCode encode_content(const Tensor& image, const ParameterSet& p) {
  if (image.ndim() != 3 || image.dim(0) != 3) {
    throw ShapeError("encode_content: expected a 3×H×W image, got shape " +
                     to_string(image.shape()));
  }
  const Tensor full = encoder_block(image, p, "E_c.block1");
  const Tensor half = encoder_block(avg_pool2x(full), p, "E_c.block2");
  const Tensor quarter = encoder_block(avg_pool2x(half), p, "E_c.block3");
  return {quarter, {full, half}};
}

Tensor encode_style(const Tensor& image, const ParameterSet& p) {
  if (image.ndim() != 3 || image.dim(0) != 3) {
    throw ShapeError("encode_style: expected a 3×H×W image, got shape " +
                     to_string(image.shape()));
  }
  const Tensor h1 = relu(conv(image, p, "E_s.conv1", 2));
  const Tensor h2 = relu(conv(h1, p, "E_s.conv2", 2));
  const Tensor pooled = reshape(global_avg_pool(h2), {h2.dim(0), 1});
  const Tensor style = linear_columns(pooled, p, "E_s.fc");
  return reshape(style, {style.size()});
}

Tensor generate(const ContentCode& content, const Tensor& style, const ParameterSet& p) {
  const Tensor& code = content.code;
  const std::size_t in_channels = p.get("G.conv1.weight").dim(1);
  if (code.ndim() != 3 || code.dim(0) >= in_channels ||
      style.shape() != Shape{in_channels - code.dim(0)}) {
    throw ShapeError("generate: content " + to_string(code.shape()) +
                     " incompatible with style " + to_string(style.shape()));
  }
  const Tensor style_map = broadcast_to(reshape(style, {style.size(), 1, 1}),
                                        {style.size(), code.dim(1), code.dim(2)});
  const Tensor h1 = relu(conv(cat(code, style_map), p, "G.conv1"));
  const Tensor h2 = relu(conv(upsample2x(h1), p, "G.conv2"));
  return sigmoid(conv(upsample2x(h2), p, "G.out"));
}

Segmentation segment(const ContentCode& content, const ParameterSet& p) {
  const auto& [full, half] = content.skips;
  if (content.code.ndim() != 3 || !full.defined() || !half.defined() ||
      half.dim(1) != 2 * content.code.dim(1) || full.dim(1) != 2 * half.dim(1)) {
    throw ShapeError("segment: inconsistent content code " +
                     to_string(content.code.shape()));
  }
  const Tensor d1 = relu(conv(cat(upsample2x(content.code), half), p, "S.dec1"));
  const Tensor d2 = relu(conv(cat(upsample2x(d1), full), p, "S.dec2"));
  const Tensor features = relu(conv(d2, p, "S.features"));
  const Tensor logits = conv(features, p, "S.logits");
  return {logits, features};
}

std::size_t critic_count(const ParameterSet& p) {
  std::size_t k = 0;
  while (p.contains("C." + std::to_string(k) + ".fc1.weight")) ++k;
  return k;
}

Tensor critic_columns(const Tensor& columns, std::size_t k, const ParameterSet& p) {
  const std::size_t count = critic_count(p);
  if (k >= count) {
    throw std::out_of_range("critic_eval: class " + std::to_string(k) +
                            " out of range for " + std::to_string(count) + " critics");
  }
  const std::string prefix = "C." + std::to_string(k);
  const Tensor hidden = relu(linear_columns(columns, p, prefix + ".fc1"));
  return softplus(linear_columns(hidden, p, prefix + ".fc2"));
}

Tensor critic_eval(const Tensor& features, std::size_t k, const ParameterSet& p) {
  if (features.ndim() != 3) {
    throw ShapeError("critic_eval: expected c×H×W features, got shape " +
                     to_string(features.shape()));
  }
  const std::size_t h = features.dim(1), w = features.dim(2);
  const Tensor columns = reshape(features, {features.dim(0), h * w});
  return reshape(critic_columns(columns, k, p), {h, w});
}

// ---------------------------------------------------------------------------

ParameterSet init_models(const TaskSpec& task, const ArchConfig& arch,
                         std::uint64_t seed) {
  arch.validate();
  task.validate(ArchConfig::kDownsampling);
  std::mt19937_64 rng(seed);
  ParameterSet params;

  auto add_conv = [&](const std::string& name, Component c, std::size_t out,
                      std::size_t in, std::size_t k) {
    const std::size_t fan_in = in * k * k;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    std::vector<double> w(out * fan_in);
    for (auto& v : w) v = dist(rng);
    params.add(name + ".weight", c, Tensor::from({out, in, k, k}, std::move(w)));
    params.add(name + ".bias", c, Tensor::zeros({out}));
  };
  auto add_linear = [&](const std::string& name, Component c, std::size_t out,
                        std::size_t in) {
    const std::size_t fan_in = in;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    std::vector<double> w(out * in);
    for (auto& v : w) v = dist(rng);
    params.add(name + ".weight", c, Tensor::from({out, in}, std::move(w)));
    params.add(name + ".bias", c, Tensor::zeros({out}));
  };

  const std::size_t k = arch.kernel;
  const auto& enc = arch.encoder_channels;
  const auto& dec = arch.decoder_channels;
  using enum Component;
  add_conv("E_c.block1", kContentEncoder, enc[0], 3, k);
  add_conv("E_c.block2", kContentEncoder, enc[1], enc[0], k);
  add_conv("E_c.block3", kContentEncoder, enc[2], enc[1], k);

  add_conv("E_s.conv1", kStyleEncoder, arch.style_channels[0], 3, k);
  add_conv("E_s.conv2", kStyleEncoder, arch.style_channels[1], arch.style_channels[0], k);
  add_linear("E_s.fc", kStyleEncoder, arch.style_dim, arch.style_channels[1]);

  const auto& gen = arch.generator_channels;
  add_conv("G.conv1", kGenerator, gen[0], enc[2] + arch.style_dim, k);
  add_conv("G.conv2", kGenerator, gen[1], gen[0], k);
  add_conv("G.out", kGenerator, 3, gen[1], k);

  add_conv("S.dec1", kSegmenter, dec[0], enc[2] + enc[1], k);
  add_conv("S.dec2", kSegmenter, dec[1], dec[0] + enc[0], k);
  add_conv("S.features", kSegmenter, arch.feature_channels, dec[1], 1);
  add_conv("S.logits", kSegmenter, task.classes, arch.feature_channels, 1);

  for (std::size_t c = 0; c < task.classes; ++c) {
    const std::string prefix = "C." + std::to_string(c);
    add_linear(prefix + ".fc1", kCritic, arch.critic_hidden, arch.feature_channels);
    add_linear(prefix + ".fc2", kCritic, 1, arch.critic_hidden);
  }
  return params;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kCheckpointMagic = "METASEG-CHECKPOINT 1";

Component component_from_name(std::string_view s) {
  for (auto c : kAllComponents) {
    if (component_name(c) == s) return c;
  }
  throw std::runtime_error("checkpoint: unknown component " + std::string(s));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     const ParameterSet& params) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint buffers are written little-endian");
  nlohmann::json manifest;
  manifest["task"] = meta.task;
  manifest["arch"] = meta.arch;
  manifest["seed"] = meta.seed;
  manifest["iteration"] = meta.iteration;
  auto& entries = manifest["parameters"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : params.entries()) {
    entries.push_back({{"name", e.name},
                       {"component", component_name(e.component)},
                       {"shape", e.value.shape()},
                       {"offset", offset}});
    offset += e.value.size() * sizeof(double);
  }
  const std::string text = manifest.dump(1);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << kCheckpointMagic << '\n' << text.size() << '\n' << text;
  for (const auto& e : params.entries()) {
    out.write(reinterpret_cast<const char*>(e.value.data().data()),
              static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

std::pair<CheckpointMeta, ParameterSet> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) {
    throw std::runtime_error(path.string() + " is not a metaseg checkpoint");
  }
  std::string length_line;
  std::getline(in, length_line);
  const std::size_t length = std::stoull(length_line);
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  const auto manifest = nlohmann::json::parse(text);

  CheckpointMeta meta;
  meta.task = manifest.at("task").get<TaskSpec>();
  meta.arch = manifest.at("arch").get<ArchConfig>();
  meta.seed = manifest.at("seed").get<std::uint64_t>();
  meta.iteration = manifest.at("iteration").get<std::size_t>();

  const auto data_start = in.tellg();
  ParameterSet params;
  for (const auto& e : manifest.at("parameters")) {
    const auto shape = e.at("shape").get<Shape>();
    std::vector<double> values(numel(shape));
    in.seekg(data_start + static_cast<std::streamoff>(e.at("offset").get<std::size_t>()));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint truncated: " + path.string());
    params.add(e.at("name").get<std::string>(),
               component_from_name(e.at("component").get<std::string>()),
               Tensor::from(shape, std::move(values)));
  }
  return {meta, params};
}

}  // namespace metaseg
