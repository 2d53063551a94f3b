// Meta-test inference and segmentation metrics.
#pragma once

#include "metaseg/domain.hpp"
#include "metaseg/nets.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace metaseg {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);

  std::size_t classes() const { return k_; }
  // Pixels with ground truth `truth` predicted as `pred`.
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
  std::uint64_t total() const;
  std::uint64_t row_sum(std::size_t k) const;
  std::uint64_t col_sum(std::size_t k) const;

  ConfusionMatrix operator+(const ConfusionMatrix& other) const;
  bool operator==(const ConfusionMatrix&) const = default;

  std::string to_csv(const std::vector<std::string>& class_names = {}) const;

 private:
  friend ConfusionMatrix accumulate(const ConfusionMatrix&, const LabelMap&, const LabelMap&);
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

// Returns a new matrix; `cm` is left untouched.
ConfusionMatrix accumulate(const ConfusionMatrix& cm, const LabelMap& pred,
                           const LabelMap& truth);

struct EvalReport {
  std::vector<std::optional<double>> per_class_iou;
  double miou = 0;
  std::string domain_id;
  std::size_t samples = 0;
};

// Classes with an empty union are undefined and left out of the mean.
EvalReport iou_report(const ConfusionMatrix& cm);

// Argmax of the segmenter logits. Reads E_c and S only.
LabelMap infer(const Tensor& image, const ParameterSet& params);

struct EvalResult {
  EvalReport report;
  ConfusionMatrix confusion;
};

// Evaluates on `count` samples of the domain's held-out seed range.
EvalResult evaluate_domain(const DomainSpec& domain, const TaskSpec& task,
                           const ParameterSet& params, std::size_t count = 50);

std::string report_to_json(const EvalReport& report, int indent = 2);
EvalReport report_from_json(const std::string& text);

}  // namespace metaseg
