// metaseg: train, ablate, evaluate and plot from the command line.
//
// Exit codes: 0 success, 1 runtime failure (I/O, bad files), 2 usage or
// config error, 3 training diverged.

#include "metaseg/eval.hpp"
#include "metaseg/experiment.hpp"
#include "metaseg/serialization.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace metaseg;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

struct Overrides {
  std::string config;
  std::string out;
  std::vector<std::uint64_t> seeds;
  std::string mode;
};

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = o.config.empty() ? config_from_json(nlohmann::json::object())
                                        : load_config(o.config);
  if (!o.out.empty()) c.output_dir = o.out;
  if (!o.seeds.empty()) c.seeds = o.seeds;
  if (!o.mode.empty()) c.mode = parse_mode(o.mode);
  c.validate();
  return c;
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned domain-generalized segmentation on procedural scenes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", code_version());

  Overrides o;
  auto add_common = [&o](CLI::App* sub, bool with_mode) {
    sub->add_option("--config", o.config, "JSON experiment config (defaults if omitted)")
        ->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Output directory (overrides output_dir)");
    sub->add_option("--seed", o.seeds, "Seed(s) to run instead of the config's seed list");
    if (with_mode) {
      sub->add_option("--mode", o.mode, "Ablation mode")
          ->check(CLI::IsMember({"baseline", "no_disent", "no_meta", "full"}));
    }
  };

  auto* run_cmd = app.add_subcommand("run", "Train and evaluate one ablation mode");
  add_common(run_cmd, true);

  auto* ablate_cmd = app.add_subcommand("ablate", "Run all four ablation modes and summarise");
  add_common(ablate_cmd, false);

  auto* config_cmd = app.add_subcommand("config", "Print the resolved config and its hash");
  add_common(config_cmd, true);

  std::string checkpoint, domain, report_out, csv_out;
  std::size_t samples = 50;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on one domain");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--config", o.config, "Config describing the domain family")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--domain", domain, "Domain id (default: the config's target)");
  eval_cmd->add_option("--samples", samples, "Number of held-out samples");
  eval_cmd->add_option("--out", report_out, "Report JSON path (default: stdout)");
  eval_cmd->add_option("--confusion", csv_out, "Also write the confusion matrix as CSV");

  std::string metrics_path, plot_out;
  auto* plot_cmd = app.add_subcommand("plot", "Render loss and mIoU curves as SVG");
  plot_cmd->add_option("metrics", metrics_path, "metrics.jsonl of a run")
      ->required()
      ->check(CLI::ExistingFile);
  plot_cmd->add_option("--out", plot_out, "SVG path")->required();

  std::size_t count = 8;
  std::uint64_t first_seed = 0;
  auto* gen_cmd = app.add_subcommand("gen-data", "Export procedural samples as PNG pairs");
  gen_cmd->add_option("--config", o.config, "Config describing the domain family")
      ->check(CLI::ExistingFile);
  gen_cmd->add_option("--domain", domain, "Domain id (default: every family member)");
  gen_cmd->add_option("--count", count, "Samples per domain");
  gen_cmd->add_option("--seed", first_seed, "First sample seed");
  gen_cmd->add_option("--out", o.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run_cmd) {
      const auto config = resolve(o);
      const auto manifest = run(config);
      std::cout << "run complete: " << manifest.reports.size() << " reports under "
                << (config.output_dir / std::string(mode_name(config.mode))).string() << "\n";
    } else if (*ablate_cmd) {
      const auto summary = ablation_suite(resolve(o));
      std::cout << summary.text();
    } else if (*config_cmd) {
      const auto config = resolve(o);
      std::cout << config_to_json(config).dump(2) << "\nhash " << config_hash(config) << "\n";
    } else if (*eval_cmd) {
      Overrides eo = o;
      const auto config = resolve(eo);
      const auto domains = resolve_domains(config);
      const auto [meta, params] = load_checkpoint(checkpoint);
      if (meta.task.classes != config.task.classes || meta.task.height != config.task.height ||
          meta.task.width != config.task.width) {
        throw ConfigError("checkpoint task does not match the config task");
      }
      std::optional<DomainSpec> chosen;
      if (domain.empty() || domain == domains.target.id) chosen = domains.target;
      for (const auto& d : domains.sources) {
        if (d.id == domain) chosen = d;
      }
      if (!chosen) throw ConfigError("unknown domain \"" + domain + "\"");
      const auto result = evaluate_domain(*chosen, config.task, params, samples);
      write_or_print(report_out, report_to_json(result.report) + "\n");
      if (!csv_out.empty()) write_or_print(csv_out, result.confusion.to_csv(config.task.class_names));
    } else if (*plot_cmd) {
      plot(metrics_path, plot_out);
    } else if (*gen_cmd) {
      const auto config = resolve({o.config, {}, {}, {}});
      const auto family = make_domain_family(config.family.domains, config.family.style_gap,
                                             config.family.structure_gap, config.family.seed,
                                             config.task);
      std::size_t written = 0;
      for (const auto& d : family) {
        if (!domain.empty() && d.id != domain) continue;
        for (std::size_t i = 0; i < count; ++i) {
          const auto s = generate_sample(d, config.task, first_seed + i);
          export_sample(s, fs::path(o.out) / d.id, "sample-" + std::to_string(first_seed + i));
          ++written;
        }
      }
      if (written == 0) throw ConfigError("unknown domain \"" + domain + "\"");
      std::cout << written << " samples written to " << o.out << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TrainingDiverged& e) {
    std::cerr << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
