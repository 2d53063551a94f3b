#include "metaseg/eval.hpp"

#include <nlohmann/json.hpp>

#include <numeric>
#include <sstream>
#include <stdexcept>

namespace metaseg {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw std::invalid_argument("ConfusionMatrix: zero classes");
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t k) const {
  std::uint64_t s = 0;
  for (std::size_t j = 0; j < k_; ++j) s += at(k, j);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t k) const {
  std::uint64_t s = 0;
  for (std::size_t i = 0; i < k_; ++i) s += at(i, k);
  return s;
}

ConfusionMatrix ConfusionMatrix::operator+(const ConfusionMatrix& other) const {
  if (other.k_ != k_) {
    throw std::invalid_argument("ConfusionMatrix: adding " + std::to_string(k_) + " and " +
                                std::to_string(other.k_) + " classes");
  }
  ConfusionMatrix out = *this;
  for (std::size_t i = 0; i < counts_.size(); ++i) out.counts_[i] += other.counts_[i];
  return out;
}

std::string ConfusionMatrix::to_csv(const std::vector<std::string>& class_names) const {
  auto name = [&](std::size_t k) {
    return k < class_names.size() ? class_names[k] : std::to_string(k);
  };
  std::ostringstream out;
  out << "truth\\pred";
  for (std::size_t j = 0; j < k_; ++j) out << ',' << name(j);
  out << '\n';
  for (std::size_t i = 0; i < k_; ++i) {
    out << name(i);
    for (std::size_t j = 0; j < k_; ++j) out << ',' << at(i, j);
    out << '\n';
  }
  return out.str();
}

ConfusionMatrix accumulate(const ConfusionMatrix& cm, const LabelMap& pred,
                           const LabelMap& truth) {
  if (pred.height != truth.height || pred.width != truth.width ||
      pred.labels.size() != truth.labels.size()) {
    throw std::invalid_argument("accumulate: prediction " + std::to_string(pred.height) + "x" +
                                std::to_string(pred.width) + " vs ground truth " +
                                std::to_string(truth.height) + "x" +
                                std::to_string(truth.width));
  }
  ConfusionMatrix out = cm;
  const std::size_t k = cm.k_;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const std::size_t p = pred.labels[i], t = truth.labels[i];
    if (p >= k || t >= k) {
      throw std::invalid_argument("accumulate: label " + std::to_string(std::max(p, t)) +
                                  " out of range for " + std::to_string(k) + " classes");
    }
    ++out.counts_[t * k + p];
  }
  return out;
}

EvalReport iou_report(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::invalid_argument("iou_report: empty confusion matrix");
  EvalReport r;
  double sum = 0;
  std::size_t defined = 0;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    const std::uint64_t tp = cm.at(k, k);
    const std::uint64_t uni = cm.row_sum(k) + cm.col_sum(k) - tp;
    if (uni == 0) {
      r.per_class_iou.push_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(uni);
    r.per_class_iou.push_back(iou);
    sum += iou;
    ++defined;
  }
  if (defined == 0) throw std::invalid_argument("iou_report: no class has a defined IoU");
  r.miou = sum / static_cast<double>(defined);
  return r;
}

LabelMap infer(const Tensor& image, const ParameterSet& params) {
  NoGradGuard guard;
  const Tensor logits = segment(encode_content(image, params), params).logits;
  const std::size_t k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const auto v = logits.data();
  LabelMap out{h, w, std::vector<std::uint8_t>(h * w, 0)};
  for (std::size_t i = 0; i < h * w; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (v[c * h * w + i] > v[best * h * w + i]) best = c;
    }
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

EvalResult evaluate_domain(const DomainSpec& domain, const TaskSpec& task,
                           const ParameterSet& params, std::size_t count) {
  if (count == 0 || count > kEvalSeedEnd - kEvalSeedBegin) {
    throw std::invalid_argument("evaluate_domain: sample count must be in [1, " +
                                std::to_string(kEvalSeedEnd - kEvalSeedBegin) + "]");
  }
  ConfusionMatrix cm(task.classes);
  for (std::size_t i = 0; i < count; ++i) {
    const Sample s = generate_sample(domain, task, kEvalSeedBegin + i);
    cm = accumulate(cm, infer(s.image, params), s.label);
  }
  EvalResult r{iou_report(cm), cm};
  r.report.domain_id = domain.id;
  r.report.samples = count;
  return r;
}

std::string report_to_json(const EvalReport& report, int indent) {
  nlohmann::json j;
  j["domain_id"] = report.domain_id;
  j["samples"] = report.samples;
  j["miou"] = report.miou;
  auto& per = j["per_class_iou"] = nlohmann::json::array();
  for (const auto& v : report.per_class_iou) per.push_back(v ? nlohmann::json(*v) : nlohmann::json());
  return j.dump(indent);
}

EvalReport report_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  EvalReport r;
  r.domain_id = j.at("domain_id").get<std::string>();
  r.samples = j.at("samples").get<std::size_t>();
  r.miou = j.at("miou").get<double>();
  for (const auto& v : j.at("per_class_iou")) {
    r.per_class_iou.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  }
  return r;
}

}  // namespace metaseg
