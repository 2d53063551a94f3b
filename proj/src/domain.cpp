#include "metaseg/domain.hpp"

#include "metaseg/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace metaseg {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Rgb base_colour(std::size_t k) {
  static const Rgb kBase[] = {{0.55, 0.70, 0.90},
                              {0.45, 0.40, 0.30},
                              {0.70, 0.30, 0.30},
                              {0.30, 0.65, 0.35},
                              {0.80, 0.75, 0.30}};
  if (k < std::size(kBase)) return kBase[k];
  std::mt19937_64 rng(splitmix64(k));
  return {uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8)};
}

Texture base_texture(std::size_t k) {
  if (k == 0) return {0.05, 16.0};
  if (k == 1) return {0.10, 4.0};
  return {0.08, 6.0};
}

// Smooth noise in [-1, 1]: bilinear interpolation of a random lattice.
class ValueNoise {
 public:
  ValueNoise(std::mt19937_64& rng, std::size_t height, std::size_t width,
             double spacing)
      : spacing_(std::max(spacing, 1.0)),
        rows_(static_cast<std::size_t>(std::ceil(height / spacing_)) + 2),
        cols_(static_cast<std::size_t>(std::ceil(width / spacing_)) + 2),
        lattice_(rows_ * cols_) {
    for (auto& v : lattice_) v = uniform(rng, -1.0, 1.0);
  }

  double operator()(double y, double x) const {
    const double gy = y / spacing_, gx = x / spacing_;
    const auto iy = static_cast<std::size_t>(gy), ix = static_cast<std::size_t>(gx);
    const double fy = gy - iy, fx = gx - ix;
    auto at = [&](std::size_t r, std::size_t c) { return lattice_[r * cols_ + c]; };
    const double top = at(iy, ix) * (1 - fx) + at(iy, ix + 1) * fx;
    const double bottom = at(iy + 1, ix) * (1 - fx) + at(iy + 1, ix + 1) * fx;
    return top * (1 - fy) + bottom * fy;
  }

 private:
  double spacing_;
  std::size_t rows_, cols_;
  std::vector<double> lattice_;
};

enum class ShapeKind { kRectangle, kEllipse, kTriangle };

}  // namespace

void TaskSpec::validate(std::size_t downsampling) const {
  if (classes < 2) throw std::invalid_argument("TaskSpec: need at least 2 classes");
  if (classes > 255) throw std::invalid_argument("TaskSpec: at most 255 classes");
  if (height < 16 || width < 16) {
    throw std::invalid_argument("TaskSpec: height and width must be >= 16");
  }
  if (height % downsampling || width % downsampling) {
    throw std::invalid_argument("TaskSpec: height and width must be divisible by " +
                                std::to_string(downsampling));
  }
  if (!class_names.empty() && class_names.size() != classes) {
    throw std::invalid_argument("TaskSpec: class_names has " +
                                std::to_string(class_names.size()) + " entries for " +
                                std::to_string(classes) + " classes");
  }
}

void DomainSpec::validate(std::size_t classes) const {
  if (palette.size() != classes || texture.size() != classes) {
    throw std::invalid_argument("DomainSpec " + id + ": palette/texture have " +
                                std::to_string(palette.size()) + "/" +
                                std::to_string(texture.size()) +
                                " entries but the task has " +
                                std::to_string(classes) + " classes");
  }
  const auto& l = layout;
  if (!(l.horizon_min <= l.horizon_max && l.horizon_min >= 0 && l.horizon_max <= 1)) {
    throw std::invalid_argument("DomainSpec " + id + ": bad horizon range");
  }
  if (l.objects_min > l.objects_max) {
    throw std::invalid_argument("DomainSpec " + id + ": bad object count range");
  }
  if (!(l.size_min > 0 && l.size_min <= l.size_max && l.size_max <= 1)) {
    throw std::invalid_argument("DomainSpec " + id + ": bad object size range");
  }
  if (!(shift.scale > 0)) {
    throw std::invalid_argument("DomainSpec " + id + ": structure scale must be > 0");
  }
}

bool DomainSpec::same_parameters(const DomainSpec& o) const {
  auto tex_eq = [](const Texture& a, const Texture& b) {
    return a.amplitude == b.amplitude && a.correlation_length == b.correlation_length;
  };
  const auto& a = layout;
  const auto& b = o.layout;
  return palette == o.palette &&
         std::equal(texture.begin(), texture.end(), o.texture.begin(), o.texture.end(),
                    tex_eq) &&
         a.horizon_min == b.horizon_min && a.horizon_max == b.horizon_max &&
         a.objects_min == b.objects_min && a.objects_max == b.objects_max &&
         a.size_min == b.size_min && a.size_max == b.size_max &&
         shift.offset == o.shift.offset && shift.scale == o.shift.scale;
}

DomainSpec default_domain_spec(const TaskSpec& task, std::string id) {
  DomainSpec spec;
  spec.id = std::move(id);
  for (std::size_t k = 0; k < task.classes; ++k) {
    spec.palette.push_back(base_colour(k));
    spec.texture.push_back(base_texture(k));
  }
  return spec;
}

Sample generate_sample(const DomainSpec& spec, const TaskSpec& task,
                       std::uint64_t seed) {
  task.validate(1);
  spec.validate(task.classes);
  const std::size_t H = task.height, W = task.width, K = task.classes;
  std::mt19937_64 rng(splitmix64(fnv1a(spec.id) ^ splitmix64(seed)));

  LabelMap label{H, W, std::vector<std::uint8_t>(H * W, 0)};
  const double horizon = std::clamp(
      H * (uniform(rng, spec.layout.horizon_min, spec.layout.horizon_max) +
           spec.shift.offset),
      0.1 * H, 0.9 * H);
  for (std::size_t y = 0; y < H; ++y) {
    if (y + 0.5 < horizon) continue;
    std::fill_n(label.labels.begin() + y * W, W, std::uint8_t{1});
  }

  if (K > 2) {
    const std::size_t object_classes = K - 2;
    const std::size_t count =
        uniform_index(rng, spec.layout.objects_min, spec.layout.objects_max);
    const double base = static_cast<double>(std::min(H, W));
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t k =
          2 + (j < object_classes ? j : uniform_index(rng, 0, object_classes - 1));
      const auto kind = static_cast<ShapeKind>((k - 2) % 3);
      const double size = std::clamp(
          uniform(rng, spec.layout.size_min, spec.layout.size_max) * spec.shift.scale *
              base,
          2.0, base);
      const double aspect = std::sqrt(uniform(rng, 0.6, 1.6));
      const double hw = 0.5 * size * aspect, hh = 0.5 * size / aspect;
      const double cx = uniform(rng, 0.0, static_cast<double>(W));
      const double cy = uniform(rng, horizon - 0.25 * size, static_cast<double>(H));
      for (std::size_t y = 0; y < H; ++y) {
        const double py = y + 0.5;
        if (py < cy - hh || py > cy + hh) continue;
        for (std::size_t x = 0; x < W; ++x) {
          const double px = x + 0.5;
          bool inside = false;
          switch (kind) {
            case ShapeKind::kRectangle:
              inside = std::abs(px - cx) <= hw;
              break;
            case ShapeKind::kEllipse: {
              const double dx = (px - cx) / hw, dy = (py - cy) / hh;
              inside = dx * dx + dy * dy <= 1.0;
              break;
            }
            case ShapeKind::kTriangle:
              inside = std::abs(px - cx) <= hw * (py - (cy - hh)) / (2 * hh);
              break;
          }
          if (inside) label.labels[y * W + x] = static_cast<std::uint8_t>(k);
        }
      }
    }
  }

  // One noise field per (class, channel); drawn for every class so the random
  // stream does not depend on which classes are visible.
  std::vector<ValueNoise> noise;
  noise.reserve(K * 3);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t c = 0; c < 3; ++c) {
      noise.emplace_back(rng, H, W, spec.texture[k].correlation_length);
    }
  }

  std::vector<double> image(3 * H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t k = label.labels[y * W + x];
      const double amp = spec.texture[k].amplitude;
      for (std::size_t c = 0; c < 3; ++c) {
        const double n = amp == 0.0 ? 0.0 : amp * noise[k * 3 + c](y + 0.5, x + 0.5);
        image[(c * H + y) * W + x] = std::clamp(spec.palette[k][c] + n, 0.0, 1.0);
      }
    }
  }
  return {Tensor::from({3, H, W}, std::move(image)), std::move(label), spec.id, seed};
}

std::vector<DomainSpec> make_domain_family(std::size_t n_domains, double style_gap,
                                           double structure_gap, std::uint64_t seed,
                                           const TaskSpec& task) {
  if (n_domains < 2) {
    throw std::invalid_argument("make_domain_family: need at least 2 domains, got " +
                                std::to_string(n_domains));
  }
  if (!(style_gap >= 0 && structure_gap >= 0)) {
    throw std::invalid_argument("make_domain_family: gaps must be non-negative");
  }
  std::mt19937_64 rng(splitmix64(seed ^ 0x5eedfa111eULL));
  std::vector<DomainSpec> family;
  for (std::size_t i = 0; i < n_domains; ++i) {
    DomainSpec spec = default_domain_spec(task, "domain-" + std::to_string(i));
    for (std::size_t k = 0; k < task.classes; ++k) {
      for (auto& channel : spec.palette[k]) {
        channel = std::clamp(channel + style_gap * 0.35 * uniform(rng, -1, 1), 0.0, 1.0);
      }
      auto& tex = spec.texture[k];
      tex.amplitude *= 1.0 + style_gap * uniform(rng, -0.5, 1.0);
      tex.correlation_length *= 1.0 + style_gap * 0.5 * uniform(rng, -1, 1);
    }
    spec.shift.offset = structure_gap * 0.15 * uniform(rng, -1, 1);
    spec.shift.scale = 1.0 + structure_gap * 0.4 * uniform(rng, -1, 1);
    family.push_back(std::move(spec));
  }
  return family;
}

namespace {

double bilinear(const Image8& img, std::size_t c, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, img.height - 1);
  const std::size_t x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - y0, fx = x - x0;
  auto at = [&](std::size_t r, std::size_t q) {
    return img.pixels[(r * img.width + q) * img.channels + c] / 255.0;
  };
  return (at(y0, x0) * (1 - fx) + at(y0, x1) * fx) * (1 - fy) +
         (at(y1, x0) * (1 - fx) + at(y1, x1) * fx) * fy;
}

}  // namespace

Sample ingest_pair(const std::filesystem::path& image_path,
                   const std::filesystem::path& label_path, const TaskSpec& task) {
  const Image8 img = read_png(image_path, 3);
  const Image8 lab = read_png(label_path, 1);
  if (img.width != lab.width || img.height != lab.height) {
    throw std::invalid_argument("ingest_pair: image is " + std::to_string(img.width) +
                                "x" + std::to_string(img.height) + " but label is " +
                                std::to_string(lab.width) + "x" +
                                std::to_string(lab.height));
  }
  std::set<int> bad;
  for (auto v : lab.pixels) {
    if (v >= task.classes) bad.insert(v);
  }
  if (!bad.empty()) {
    std::ostringstream os;
    os << "ingest_pair: label values out of range for " << task.classes
       << " classes:";
    for (int v : bad) os << ' ' << v;
    throw std::invalid_argument(os.str());
  }

  const std::size_t H = task.height, W = task.width;
  const double sy = static_cast<double>(img.height) / H;
  const double sx = static_cast<double>(img.width) / W;
  std::vector<double> image(3 * H * W);
  LabelMap label{H, W, std::vector<std::uint8_t>(H * W)};
  const bool same_size = img.height == H && img.width == W;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        image[(c * H + y) * W + x] =
            same_size ? img.pixels[(y * W + x) * 3 + c] / 255.0
                      : bilinear(img, c, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5);
      }
      const auto ly = std::min(static_cast<std::size_t>((y + 0.5) * sy), lab.height - 1);
      const auto lx = std::min(static_cast<std::size_t>((x + 0.5) * sx), lab.width - 1);
      label.labels[y * W + x] = lab.pixels[ly * lab.width + lx];
    }
  }
  return {Tensor::from({3, H, W}, std::move(image)), std::move(label),
          image_path.stem().string(), 0};
}

void export_sample(const Sample& sample, const std::filesystem::path& dir,
                   const std::string& stem) {
  const std::size_t H = sample.label.height, W = sample.label.width;
  Image8 rgb{W, H, 3, std::vector<std::uint8_t>(H * W * 3)};
  const auto d = sample.image.data();
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(d[(c * H + y) * W + x], 0.0, 1.0);
        rgb.pixels[(y * W + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  std::filesystem::create_directories(dir);
  write_png(dir / (stem + "_image.png"), rgb);
  write_png(dir / (stem + "_label.png"), Image8{W, H, 1, sample.label.labels});
}

}  // namespace metaseg
