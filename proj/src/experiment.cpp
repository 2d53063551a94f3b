#include "metaseg/experiment.hpp"

#include "metaseg/serialization.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#ifndef METASEG_VERSION
#define METASEG_VERSION "unknown"
#endif

namespace metaseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::string code_version() { return METASEG_VERSION; }

std::string_view mode_name(AblationMode mode) {
  switch (mode) {
    case AblationMode::kBaseline: return "baseline";
    case AblationMode::kNoDisent: return "no_disent";
    case AblationMode::kNoMeta: return "no_meta";
    case AblationMode::kFull: return "full";
  }
  return "?";
}

AblationMode parse_mode(std::string_view name) {
  for (auto m : kAllModes) {
    if (mode_name(m) == name) return m;
  }
  throw ConfigError("unknown ablation mode \"" + std::string(name) +
                    "\" (expected baseline, no_disent, no_meta or full)");
}

AblationFlags flags_for(AblationMode mode) {
  switch (mode) {
    case AblationMode::kBaseline: return {false, false};
    case AblationMode::kNoDisent: return {false, true};
    case AblationMode::kNoMeta: return {true, false};
    case AblationMode::kFull: return {true, true};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  try {
    task.validate(ArchConfig::kDownsampling);
    arch.validate();
    trainer.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (family.domains < 4) {
    throw ConfigError("family.domains must be >= 4 (three sources and a target)");
  }
  for (double g : {family.style_gap, family.structure_gap}) {
    if (!(g >= 0 && g <= 1)) throw ConfigError("family gaps must lie in [0, 1]");
  }
  if (seeds.empty()) throw ConfigError("seed list is empty");
  if (eval_samples == 0 || eval_samples > kEvalSeedEnd - kEvalSeedBegin) {
    throw ConfigError("eval_samples must be in [1, " +
                      std::to_string(kEvalSeedEnd - kEvalSeedBegin) + "]");
  }
  if (output_dir.empty()) throw ConfigError("output_dir is empty");

  std::set<std::string> ids;
  for (std::size_t i = 0; i < family.domains; ++i) ids.insert("domain-" + std::to_string(i));
  if (!ids.count(target_domain)) {
    throw ConfigError("target domain \"" + target_domain + "\" is not in the family");
  }
  std::set<std::string> seen;
  for (const auto& s : source_domains) {
    if (s == target_domain) {
      throw ConfigError("target domain \"" + s + "\" is listed among the source domains");
    }
    if (!ids.count(s)) throw ConfigError("source domain \"" + s + "\" is not in the family");
    if (!seen.insert(s).second) throw ConfigError("source domain \"" + s + "\" listed twice");
  }
  if (!source_domains.empty() && source_domains.size() < 3) {
    throw ConfigError("need at least 3 source domains");
  }
}

json config_to_json(const ExperimentConfig& c) {
  json t = c.trainer;
  // Both are set per cell from the mode and the seed list.
  t.erase("flags");
  t.erase("seed");
  return {{"task", c.task},
          {"arch", c.arch},
          {"family",
           {{"domains", c.family.domains},
            {"style_gap", c.family.style_gap},
            {"structure_gap", c.family.structure_gap},
            {"seed", c.family.seed}}},
          {"trainer", t},
          {"mode", std::string(mode_name(c.mode))},
          {"target_domain", c.target_domain},
          {"source_domains", c.source_domains},
          {"seeds", c.seeds},
          {"output_dir", c.output_dir.generic_string()},
          {"eval_samples", c.eval_samples}};
}

ExperimentConfig config_from_json(const json& j) {
  detail::reject_unknown(j, "config",
                         {"task", "arch", "family", "trainer", "mode", "target_domain",
                          "source_domains", "seeds", "output_dir", "eval_samples"});
  ExperimentConfig c;
  try {
    if (j.contains("task")) c.task = j.at("task").get<TaskSpec>();
    if (j.contains("arch")) c.arch = j.at("arch").get<ArchConfig>();
    if (j.contains("family")) {
      const auto& f = j.at("family");
      detail::reject_unknown(f, "family", {"domains", "style_gap", "structure_gap", "seed"});
      detail::read_opt(f, "domains", c.family.domains);
      detail::read_opt(f, "style_gap", c.family.style_gap);
      detail::read_opt(f, "structure_gap", c.family.structure_gap);
      detail::read_opt(f, "seed", c.family.seed);
    }
    if (j.contains("trainer")) {
      const auto& t = j.at("trainer");
      if (t.contains("flags")) {
        throw ConfigError("trainer.flags is derived from \"mode\"; set the mode instead");
      }
      if (t.contains("seed")) {
        throw ConfigError("trainer.seed is taken from \"seeds\"; set the seed list instead");
      }
      c.trainer = t.get<TrainerConfig>();
    }
    if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
    detail::read_opt(j, "target_domain", c.target_domain);
    detail::read_opt(j, "source_domains", c.source_domains);
    detail::read_opt(j, "seeds", c.seeds);
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    detail::read_opt(j, "eval_samples", c.eval_samples);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& config) {
  // json objects keep keys sorted, so the dump is canonical.
  const std::string text = config_to_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ResolvedDomains resolve_domains(const ExperimentConfig& config) {
  const auto family = make_domain_family(config.family.domains, config.family.style_gap,
                                         config.family.structure_gap, config.family.seed,
                                         config.task);
  ResolvedDomains r;
  bool found = false;
  for (const auto& d : family) {
    if (d.id == config.target_domain) {
      r.target = d;
      found = true;
      continue;
    }
    const auto& listed = config.source_domains;
    if (listed.empty() || std::find(listed.begin(), listed.end(), d.id) != listed.end()) {
      r.sources.push_back(d);
    }
  }
  if (!found) throw ConfigError("target domain " + config.target_domain + " not found");
  return r;
}

// ---------------------------------------------------------------------------
// Runs

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

struct Evaluation {
  EvalReport source;
  EvalResult target;
};

Evaluation evaluate_split(const ResolvedDomains& domains, const TaskSpec& task,
                          const ParameterSet& params, std::size_t samples) {
  ConfusionMatrix pooled(task.classes);
  for (const auto& d : domains.sources) {
    pooled = pooled + evaluate_domain(d, task, params, samples).confusion;
  }
  Evaluation e{iou_report(pooled), evaluate_domain(domains.target, task, params, samples)};
  e.source.domain_id = "source";
  e.source.samples = samples * domains.sources.size();
  return e;
}

}  // namespace

json manifest_to_json(const RunManifest& m) {
  auto paths = [](const std::vector<fs::path>& v) {
    json a = json::array();
    for (const auto& p : v) a.push_back(p.generic_string());
    return a;
  };
  json j = {{"config_hash", m.config_hash},
            {"started", m.started},
            {"finished", m.finished},
            {"complete", m.complete},
            {"code_version", m.code_version},
            {"checkpoints", paths(m.checkpoints)},
            {"metrics", paths(m.metrics)},
            {"reports", paths(m.reports)},
            {"plots", paths(m.plots)}};
  if (!m.error.empty()) j["error"] = m.error;
  return j;
}

CellResult run_cell(const ExperimentConfig& config, AblationMode mode, std::uint64_t seed,
                    const fs::path& dir, RunManifest* manifest) {
  const ResolvedDomains domains = resolve_domains(config);
  TrainerConfig tc = config.trainer;
  tc.flags = flags_for(mode);
  tc.seed = seed;

  fs::create_directories(dir / "checkpoints");
  const fs::path metrics_path = dir / "metrics.jsonl";
  const fs::path eval_path = dir / "eval.jsonl";
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
  std::ofstream eval_log(eval_path, std::ios::binary | std::ios::trunc);
  if (!metrics || !eval_log) throw std::runtime_error("cannot write into " + dir.string());

  std::optional<Evaluation> last;
  std::vector<fs::path> checkpoints;
  TrainHooks hooks;
  hooks.on_record = [&](const MetricsRecord& r) { metrics << json(r).dump() << '\n'; };
  hooks.on_checkpoint = [&](std::size_t iteration, const ParameterSet& params) {
    char name[32];
    std::snprintf(name, sizeof name, "iter-%06zu.ckpt", iteration);
    const fs::path path = dir / "checkpoints" / name;
    save_checkpoint(path, {config.task, config.arch, seed, iteration}, params);
    checkpoints.push_back(path);
    last = evaluate_split(domains, config.task, params, config.eval_samples);
    eval_log << json{{"iteration", iteration},
                     {"source_miou", last->source.miou},
                     {"target_miou", last->target.report.miou}}
                    .dump()
             << '\n';
    metrics.flush();
    eval_log.flush();
  };
  EpisodicTrainer trainer(config.task, config.arch, tc, domains.sources);
  trainer.run(hooks);
  metrics.close();
  eval_log.close();

  CellResult result{mode, seed, last->source, last->target.report, dir};
  const fs::path source_report = dir / "report_source.json";
  const fs::path target_report = dir / "report_target.json";
  const fs::path confusion = dir / "confusion_target.csv";
  const fs::path curves = dir / "curves.svg";
  write_text(source_report, report_to_json(result.source) + "\n");
  write_text(target_report, report_to_json(result.target) + "\n");
  write_text(confusion, last->target.confusion.to_csv(config.task.class_names));
  plot(metrics_path, curves);

  if (manifest) {
    manifest->checkpoints.insert(manifest->checkpoints.end(), checkpoints.begin(),
                                 checkpoints.end());
    manifest->metrics.push_back(metrics_path);
    manifest->metrics.push_back(eval_path);
    manifest->reports.insert(manifest->reports.end(), {source_report, target_report, confusion});
    manifest->plots.push_back(curves);
  }
  return result;
}

namespace {

fs::path cell_dir(const ExperimentConfig& c, AblationMode mode, std::uint64_t seed) {
  return c.output_dir / std::string(mode_name(mode)) / ("seed-" + std::to_string(seed));
}

std::vector<CellResult> run_mode(const ExperimentConfig& config, AblationMode mode,
                                 RunManifest& manifest, const fs::path& manifest_path) {
  std::vector<CellResult> cells;
  if (manifest_path.has_parent_path()) fs::create_directories(manifest_path.parent_path());
  write_text(manifest_path, manifest_to_json(manifest).dump(2) + "\n");
  try {
    for (auto seed : config.seeds) {
      cells.push_back(run_cell(config, mode, seed, cell_dir(config, mode, seed), &manifest));
    }
  } catch (const std::exception& e) {
    manifest.error = e.what();
    manifest.finished = utc_now();
    write_text(manifest_path, manifest_to_json(manifest).dump(2) + "\n");
    throw;
  }
  return cells;
}

RunManifest fresh_manifest(const ExperimentConfig& config) {
  RunManifest m;
  m.config_hash = config_hash(config);
  m.started = utc_now();
  m.code_version = code_version();
  return m;
}

}  // namespace

RunManifest run(const ExperimentConfig& config) {
  config.validate();
  RunManifest manifest = fresh_manifest(config);
  const fs::path path = config.output_dir / std::string(mode_name(config.mode)) / "manifest.json";
  run_mode(config, config.mode, manifest, path);
  manifest.complete = true;
  manifest.finished = utc_now();
  write_text(path, manifest_to_json(manifest).dump(2) + "\n");
  return manifest;
}

// ---------------------------------------------------------------------------
// Summaries

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stdev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

double median_of(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

std::string Summary::csv() const {
  std::ostringstream out;
  out << "mode,seeds,source_miou_mean,source_miou_std,target_miou_mean,target_miou_std,"
         "target_miou_median\n";
  for (const auto& r : rows) {
    out << mode_name(r.mode) << ',' << r.seeds.size() << ','
        << fmt("%.12g", mean_of(r.source_miou)) << ',' << fmt("%.12g", stdev_of(r.source_miou))
        << ',' << fmt("%.12g", mean_of(r.target_miou)) << ','
        << fmt("%.12g", stdev_of(r.target_miou)) << ','
        << fmt("%.12g", median_of(r.target_miou)) << '\n';
  }
  return out.str();
}

std::string Summary::text() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %5s  %-17s  %-17s  %s\n", "mode", "seeds",
                "source mIoU", "target mIoU", "target median");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-10s %5zu  %6.2f +- %-7.2f  %6.2f +- %-7.2f  %6.2f\n",
                  std::string(mode_name(r.mode)).c_str(), r.seeds.size(),
                  100 * mean_of(r.source_miou), 100 * stdev_of(r.source_miou),
                  100 * mean_of(r.target_miou), 100 * stdev_of(r.target_miou),
                  100 * median_of(r.target_miou));
    out << line;
  }
  return out.str();
}

namespace {

EvalReport read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing report " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return report_from_json(ss.str());
}

}  // namespace

Summary summary_from_reports(const fs::path& output_dir,
                             const std::vector<std::uint64_t>& seeds) {
  Summary s;
  for (auto mode : kAllModes) {
    SummaryRow row{mode, seeds, {}, {}};
    for (auto seed : seeds) {
      const fs::path dir =
          output_dir / std::string(mode_name(mode)) / ("seed-" + std::to_string(seed));
      row.source_miou.push_back(read_report(dir / "report_source.json").miou);
      row.target_miou.push_back(read_report(dir / "report_target.json").miou);
    }
    s.rows.push_back(std::move(row));
  }
  return s;
}

Summary ablation_suite(const ExperimentConfig& config) {
  config.validate();
  RunManifest manifest = fresh_manifest(config);
  const fs::path path = config.output_dir / "manifest.json";
  Summary summary;
  for (auto mode : kAllModes) {
    ExperimentConfig c = config;
    c.mode = mode;
    SummaryRow row{mode, config.seeds, {}, {}};
    for (const auto& cell : run_mode(c, mode, manifest, path)) {
      row.source_miou.push_back(cell.source.miou);
      row.target_miou.push_back(cell.target.miou);
    }
    summary.rows.push_back(std::move(row));
  }
  const fs::path csv = config.output_dir / "summary.csv";
  const fs::path txt = config.output_dir / "summary.txt";
  write_text(csv, summary.csv());
  write_text(txt, summary.text());
  manifest.reports.push_back(csv);
  manifest.reports.push_back(txt);
  manifest.complete = true;
  manifest.finished = utc_now();
  write_text(path, manifest_to_json(manifest).dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// Metrics files and plots

std::vector<MetricsRecord> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics file " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line).get<MetricsRecord>());
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

std::vector<EvalPoint> read_eval_points(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<EvalPoint> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    out.push_back({j.at("iteration").get<std::size_t>(), j.at("source_miou").get<double>(),
                   j.at("target_miou").get<double>()});
  }
  return out;
}

namespace {

struct Series {
  std::string label;
  std::string color;
  std::vector<std::pair<double, double>> points;
};

constexpr double kPanelW = 420, kPanelH = 220, kMarginL = 64, kMarginR = 16,
                 kMarginT = 28, kMarginB = 30;

void draw_panel(std::ostringstream& svg, double ox, double oy, const std::string& title,
                const std::vector<Series>& series) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double pw = kPanelW - kMarginL - kMarginR, ph = kPanelH - kMarginT - kMarginB;
  const double left = ox + kMarginL, top = oy + kMarginT;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };

  svg << "<g>\n<text x=\"" << fmt("%.1f", left) << "\" y=\"" << fmt("%.1f", oy + 18)
      << "\" font-size=\"13\">" << title << "</text>\n";
  svg << "<rect x=\"" << fmt("%.1f", left) << "\" y=\"" << fmt("%.1f", top) << "\" width=\""
      << fmt("%.1f", pw) << "\" height=\"" << fmt("%.1f", ph)
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
  auto label = [&](double x, double y, const char* anchor, const std::string& text) {
    svg << "<text x=\"" << fmt("%.1f", x) << "\" y=\"" << fmt("%.1f", y)
        << "\" font-size=\"10\" text-anchor=\"" << anchor << "\">" << text << "</text>\n";
  };
  label(left - 4, top + 4, "end", fmt("%.4g", y1));
  label(left - 4, top + ph, "end", fmt("%.4g", y0));
  label(left, top + ph + 14, "start", fmt("%.0f", x0));
  label(left + pw, top + ph + 14, "end", fmt("%.0f", x1));

  double legend_x = left + 6;
  for (const auto& s : series) {
    svg << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1\" points=\"";
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      if (i) svg << ' ';
      svg << fmt("%.2f", px(s.points[i].first)) << ',' << fmt("%.2f", py(s.points[i].second));
    }
    svg << "\"/>\n";
    if (series.size() > 1) {
      svg << "<text x=\"" << fmt("%.1f", legend_x) << "\" y=\"" << fmt("%.1f", top + 12)
          << "\" font-size=\"10\" fill=\"" << s.color << "\">" << s.label << "</text>\n";
      legend_x += 8.0 * static_cast<double>(s.label.size()) + 12;
    }
  }
  svg << "</g>\n";
}

}  // namespace

std::string render_plot(const std::vector<MetricsRecord>& records,
                        const std::vector<EvalPoint>& eval_points) {
  if (records.empty()) throw std::invalid_argument("plot: metrics file has no records");
  struct Field {
    const char* name;
    std::optional<double> (*get)(const MetricsRecord&);
  };
  const Field fields[] = {
      {"L_agg", [](const MetricsRecord& r) { return std::optional<double>(r.l_agg); }},
      {"L_seg", [](const MetricsRecord& r) { return std::optional<double>(r.l_seg); }},
      {"L_rec", [](const MetricsRecord& r) { return r.l_rec; }},
      {"L_perc", [](const MetricsRecord& r) { return r.l_perc; }},
      {"L_critic", [](const MetricsRecord& r) { return r.l_critic; }},
      {"meta objective (dL_seg)", [](const MetricsRecord& r) { return r.meta_objective; }},
  };
  std::vector<std::pair<std::string, std::vector<Series>>> panels;
  for (const auto& f : fields) {
    Series s{f.name, "#1f5fa8", {}};
    for (const auto& r : records) {
      if (r.aborted) continue;
      if (auto v = f.get(r); v && std::isfinite(*v)) {
        s.points.emplace_back(static_cast<double>(r.iteration), *v);
      }
    }
    if (!s.points.empty()) panels.push_back({f.name, {std::move(s)}});
  }
  if (!eval_points.empty()) {
    Series src{"source", "#1f5fa8", {}}, tgt{"target", "#c0392b", {}};
    for (const auto& p : eval_points) {
      src.points.emplace_back(static_cast<double>(p.iteration), p.source_miou);
      tgt.points.emplace_back(static_cast<double>(p.iteration), p.target_miou);
    }
    panels.push_back({"mIoU over checkpoints", {std::move(src), std::move(tgt)}});
  }

  const std::size_t cols = 2, rows = (panels.size() + cols - 1) / cols;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt("%.0f", cols * kPanelW)
      << "\" height=\"" << fmt("%.0f", static_cast<double>(rows) * kPanelH)
      << "\" font-family=\"sans-serif\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < panels.size(); ++i) {
    draw_panel(svg, static_cast<double>(i % cols) * kPanelW,
               static_cast<double>(i / cols) * kPanelH, panels[i].first, panels[i].second);
  }
  svg << "</svg>\n";
  return svg.str();
}

void plot(const fs::path& metrics_path, const fs::path& out_path) {
  const auto records = read_metrics(metrics_path);
  std::vector<EvalPoint> eval_points;
  const fs::path eval_path = metrics_path.parent_path() / "eval.jsonl";
  if (fs::exists(eval_path)) eval_points = read_eval_points(eval_path);
  const std::string svg = render_plot(records, eval_points);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_text(out_path, svg);
}

}  // namespace metaseg
