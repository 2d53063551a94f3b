// Scalar objectives: reconstruction, perceptual, segmentation, their weighted
// aggregate, the class-specific critic loss and the meta objective.
#pragma once

#include "metaseg/domain.hpp"
#include "metaseg/nets.hpp"
#include "metaseg/tensor.hpp"

#include <optional>
#include <vector>

namespace metaseg {

struct LossWeights {
  double rec = 10.0;
  double perc = 1.0;
  double seg = 1.0;
  double critic = 0.1;
  double meta = 5e4;

  void validate() const;  // all finite and >= 0
  bool operator==(const LossWeights&) const = default;
};

// Frozen, seeded conv pyramid standing in for a pre-trained feature network.
// Level i is: 2×2 average pool (i > 0), conv (padding k/2), relu.
class PerceptualExtractor {
 public:
  struct Level {
    Tensor weight;  // O×C×k×k
    Tensor bias;    // O
  };

  // Three levels with 8/16/32 channels; Gram style term at level 0, raw
  // feature content term at level 2.
  explicit PerceptualExtractor(std::uint64_t seed);
  PerceptualExtractor(std::vector<Level> levels, std::vector<std::size_t> style_levels,
                      std::vector<std::size_t> content_levels);

  std::vector<Tensor> features(const Tensor& image) const;
  const std::vector<std::size_t>& style_levels() const { return style_levels_; }
  const std::vector<std::size_t>& content_levels() const { return content_levels_; }

 private:
  std::vector<Level> levels_;
  std::vector<std::size_t> style_levels_;
  std::vector<std::size_t> content_levels_;
};

// C×C Gram matrix of a C×H×W map, normalised by H·W.
Tensor gram_matrix(const Tensor& features);

Tensor recon_loss(const Tensor& x, const Tensor& x_hat);
Tensor perceptual_loss(const Tensor& transferred, const Tensor& content_source,
                       const Tensor& style_source, const PerceptualExtractor& extractor);
Tensor seg_loss(const Tensor& logits, const LabelMap& label);
Tensor agg_loss(const Tensor& l_rec, const Tensor& l_perc, const Tensor& l_seg,
                const LossWeights& w);

// Mean critic-k score over the pixels labelled k; empty when k is absent.
std::optional<Tensor> critic_class_loss(const Tensor& features, const LabelMap& label,
                                        std::size_t k, const ParameterSet& params);
// Mean of the per-class losses over classes present in the label map.
Tensor critic_loss(const Tensor& features, const LabelMap& label,
                   const ParameterSet& params);

// λ_meta · (−tanh(l_seg_agg − l_seg_total)).
Tensor meta_objective(const Tensor& l_seg_agg, const Tensor& l_seg_total,
                      const LossWeights& w);

}  // namespace metaseg
