#include "metaseg/losses.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace metaseg {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  }
}

void require_labels(const char* op, const LabelMap& label, std::size_t classes,
                    std::size_t height, std::size_t width) {
  if (label.height != height || label.width != width) {
    throw ShapeError(std::string(op) + ": label map " + std::to_string(label.height) +
                     "x" + std::to_string(label.width) + " does not match " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  for (auto v : label.labels) {
    if (v >= classes) {
      throw std::invalid_argument(std::string(op) + ": label " + std::to_string(v) +
                                  " out of range for " + std::to_string(classes) +
                                  " classes");
    }
  }
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {rec, perc, seg, critic, meta}) {
    if (!std::isfinite(v) || v < 0) {
      throw std::invalid_argument("LossWeights: weights must be finite and >= 0");
    }
  }
}

PerceptualExtractor::PerceptualExtractor(std::uint64_t seed)
    : style_levels_{0}, content_levels_{2} {
  std::mt19937_64 rng(seed);
  const std::size_t channels[] = {3, 8, 16, 32};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t in = channels[i], out = channels[i + 1];
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (in * 9)));
    std::vector<double> w(out * in * 9);
    for (auto& v : w) v = dist(rng);
    levels_.push_back({Tensor::from({out, in, 3, 3}, std::move(w)), Tensor::zeros({out})});
  }
}

PerceptualExtractor::PerceptualExtractor(std::vector<Level> levels,
                                         std::vector<std::size_t> style_levels,
                                         std::vector<std::size_t> content_levels)
    : levels_(std::move(levels)),
      style_levels_(std::move(style_levels)),
      content_levels_(std::move(content_levels)) {
  for (auto i : style_levels_) {
    if (i >= levels_.size()) throw std::invalid_argument("style level out of range");
  }
  for (auto i : content_levels_) {
    if (i >= levels_.size()) throw std::invalid_argument("content level out of range");
  }
}

std::vector<Tensor> PerceptualExtractor::features(const Tensor& image) const {
  std::vector<Tensor> out;
  Tensor h = image;
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    if (i > 0) h = avg_pool2x(h);
    const auto& l = levels_[i];
    h = relu(conv2d(h, l.weight, l.bias, {1, l.weight.dim(2) / 2}));
    out.push_back(h);
  }
  return out;
}

Tensor gram_matrix(const Tensor& features) {
  if (features.ndim() != 3) {
    throw ShapeError("gram_matrix: expected C×H×W, got shape " +
                     to_string(features.shape()));
  }
  const std::size_t c = features.dim(0), n = features.dim(1) * features.dim(2);
  const Tensor flat = reshape(features, {c, n});
  return scale(matmul(flat, false, flat, true), 1.0 / static_cast<double>(n));
}

Tensor recon_loss(const Tensor& x, const Tensor& x_hat) {
  require_same_shape("recon_loss", x, x_hat);
  return mean(abs(sub(x, x_hat)));
}

Tensor perceptual_loss(const Tensor& transferred, const Tensor& content_source,
                       const Tensor& style_source, const PerceptualExtractor& extractor) {
  require_same_shape("perceptual_loss", transferred, content_source);
  require_same_shape("perceptual_loss", transferred, style_source);
  const auto ft = extractor.features(transferred);
  const auto fc = extractor.features(content_source);
  const auto fs = extractor.features(style_source);
  Tensor total = Tensor::scalar(0.0);
  for (auto i : extractor.content_levels()) {
    total = add(total, mean(square(sub(ft[i], fc[i]))));
  }
  for (auto i : extractor.style_levels()) {
    total = add(total, mean(square(sub(gram_matrix(ft[i]), gram_matrix(fs[i])))));
  }
  return total;
}

Tensor seg_loss(const Tensor& logits, const LabelMap& label) {
  if (logits.ndim() != 3) {
    throw ShapeError("seg_loss: expected K×H×W logits, got shape " +
                     to_string(logits.shape()));
  }
  const std::size_t k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  require_labels("seg_loss", label, k, h, w);
  std::vector<double> onehot(k * h * w, 0.0);
  for (std::size_t i = 0; i < h * w; ++i) onehot[label.labels[i] * h * w + i] = 1.0;
  const Tensor picked =
      mul(log_softmax(logits, 0), Tensor::from(logits.shape(), std::move(onehot)));
  return scale(sum(picked), -1.0 / static_cast<double>(h * w));
}

Tensor agg_loss(const Tensor& l_rec, const Tensor& l_perc, const Tensor& l_seg,
                const LossWeights& w) {
  return add(add(scale(l_rec, w.rec), scale(l_perc, w.perc)), scale(l_seg, w.seg));
}

std::optional<Tensor> critic_class_loss(const Tensor& features, const LabelMap& label,
                                        std::size_t k, const ParameterSet& params) {
  if (features.ndim() != 3) {
    throw ShapeError("critic_class_loss: expected c×H×W features, got shape " +
                     to_string(features.shape()));
  }
  const std::size_t h = features.dim(1), w = features.dim(2);
  require_labels("critic_class_loss", label, critic_count(params), h, w);
  std::vector<std::size_t> pixels;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (label.labels[i] == k) pixels.push_back(i);
  }
  if (pixels.empty()) return std::nullopt;
  const Tensor columns =
      select_columns(reshape(features, {features.dim(0), h * w}), pixels);
  return mean(critic_columns(columns, k, params));
}

Tensor critic_loss(const Tensor& features, const LabelMap& label,
                   const ParameterSet& params) {
  if (label.labels.empty()) throw std::invalid_argument("critic_loss: empty label map");
  Tensor total;
  std::size_t present = 0;
  for (std::size_t k = 0; k < critic_count(params); ++k) {
    if (auto l = critic_class_loss(features, label, k, params)) {
      total = total.defined() ? add(total, *l) : *l;
      ++present;
    }
  }
  return scale(total, 1.0 / static_cast<double>(present));
}

Tensor meta_objective(const Tensor& l_seg_agg, const Tensor& l_seg_total,
                      const LossWeights& w) {
  return scale(tanh(sub(l_seg_agg, l_seg_total)), -w.meta);
}

}  // namespace metaseg
