// Config-driven experiments: single runs, the four-way ablation suite,
// metrics files and SVG plots.
#pragma once

#include "metaseg/domain.hpp"
#include "metaseg/eval.hpp"
#include "metaseg/nets.hpp"
#include "metaseg/trainer.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace metaseg {

enum class AblationMode { kBaseline, kNoDisent, kNoMeta, kFull };

inline constexpr std::array<AblationMode, 4> kAllModes{
    AblationMode::kBaseline, AblationMode::kNoDisent, AblationMode::kNoMeta,
    AblationMode::kFull};

std::string_view mode_name(AblationMode mode);  // baseline, no_disent, no_meta, full
AblationMode parse_mode(std::string_view name);  // throws ConfigError
AblationFlags flags_for(AblationMode mode);

struct FamilyConfig {
  std::size_t domains = 4;
  double style_gap = 0.5;
  double structure_gap = 0.3;
  std::uint64_t seed = 7;
};

struct ExperimentConfig {
  TaskSpec task;
  ArchConfig arch;
  FamilyConfig family;
  TrainerConfig trainer;
  AblationMode mode = AblationMode::kFull;
  std::string target_domain = "domain-3";
  // Empty means every family member except the target.
  std::vector<std::string> source_domains;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::filesystem::path output_dir = "runs/default";
  std::size_t eval_samples = 50;  // per domain

  void validate() const;  // throws ConfigError
};

nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const nlohmann::json& j);  // throws ConfigError
ExperimentConfig load_config(const std::filesystem::path& path);
// Hex FNV-1a of the canonical JSON of the fully resolved config.
std::string config_hash(const ExperimentConfig& config);

struct ResolvedDomains {
  std::vector<DomainSpec> sources;
  DomainSpec target;
};
ResolvedDomains resolve_domains(const ExperimentConfig& config);

struct RunManifest {
  std::string config_hash;
  std::string started;
  std::string finished;
  bool complete = false;
  std::string code_version;
  std::string error;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<std::filesystem::path> metrics;
  std::vector<std::filesystem::path> reports;
  std::vector<std::filesystem::path> plots;
};

nlohmann::json manifest_to_json(const RunManifest& manifest);

struct CellResult {
  AblationMode mode;
  std::uint64_t seed;
  EvalReport source;
  EvalReport target;
  std::filesystem::path directory;
};

// Trains one (mode, seed) cell into `dir` and evaluates it. Writes
// metrics.jsonl, eval.jsonl, checkpoints/, report_source.json,
// report_target.json, confusion_target.csv and curves.svg.
CellResult run_cell(const ExperimentConfig& config, AblationMode mode, std::uint64_t seed,
                    const std::filesystem::path& dir, RunManifest* manifest = nullptr);

// Runs the configured mode over the seed list into
// `<output_dir>/<mode>/seed-<s>/` and writes `<output_dir>/<mode>/manifest.json`.
RunManifest run(const ExperimentConfig& config);

struct SummaryRow {
  AblationMode mode;
  std::vector<std::uint64_t> seeds;
  std::vector<double> source_miou;
  std::vector<double> target_miou;
};

double mean_of(const std::vector<double>& v);
double stdev_of(const std::vector<double>& v);  // sample standard deviation
double median_of(std::vector<double> v);

struct Summary {
  std::vector<SummaryRow> rows;
  std::string csv() const;
  std::string text() const;
};

// All four modes over the seed list with shared data seeds; writes
// summary.csv, summary.txt and manifest.json under output_dir.
Summary ablation_suite(const ExperimentConfig& config);
// Rebuilds the summary from the per-seed report files of a finished suite.
Summary summary_from_reports(const std::filesystem::path& output_dir,
                             const std::vector<std::uint64_t>& seeds);

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);

struct EvalPoint {
  std::size_t iteration = 0;
  double source_miou = 0;
  double target_miou = 0;
};
std::vector<EvalPoint> read_eval_points(const std::filesystem::path& path);

// Loss curves of a metrics file, plus mIoU over checkpoints when an eval.jsonl
// sits next to it. Throws on an empty metrics file.
std::string render_plot(const std::vector<MetricsRecord>& records,
                        const std::vector<EvalPoint>& eval_points);
void plot(const std::filesystem::path& metrics_path, const std::filesystem::path& out_path);

std::string code_version();

}  // namespace metaseg
