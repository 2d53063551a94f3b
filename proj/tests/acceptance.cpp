// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.
#include "metaseg/eval.hpp"
#include "metaseg/experiment.hpp"
#include "metaseg/losses.hpp"
#include "metaseg/trainer.hpp"

#include "primitive_cases.hpp"
#include "tiny_instance.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

using namespace metaseg;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

void fail(Outcome& o, const std::string& why) {
  o.pass = false;
  if (!o.detail.empty()) o.detail += "; ";
  o.detail += why;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// 1 ------------------------------------------------------------------------

Outcome primitive_gradients() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  double worst = 0;
  std::string worst_name;
  const auto cases = testing::primitive_cases();
  for (const auto& c : cases) {
    for (int i = 0; i < 100; ++i) {
      const auto inputs = c.make_inputs(rng);
      const auto f = testing::contracted(c, inputs, rng);
      const double err = testing::gradient_error(f, inputs);
      if (!(err < 1e-6)) fail(o, c.name + " instance " + std::to_string(i) + " err " + fmt("%.3g", err));
      if (err > worst) {
        worst = err;
        worst_name = c.name;
      }
    }
  }
  const double t = seconds_since(t0);
  if (t >= 60) fail(o, "took " + fmt("%.1f", t) + " s");
  o.detail = std::to_string(cases.size()) + " primitives x 100, worst rel err " +
             fmt("%.2e", worst) + " (" + worst_name + "), " + fmt("%.1f", t) + " s" +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// 2 ------------------------------------------------------------------------

double meta_value(const testing::TinyInstance& t, const ParameterSet& params) {
  static const PerceptualExtractor extractor(1234);
  const ParameterSet leaves = params.as_leaves();
  const auto outcome =
      support_forward(t.episode, leaves, t.config.weights, t.config.flags, extractor);
  const auto inner = inner_updates(outcome, t.episode, leaves, t.config);
  return query_losses(t.episode, inner, t.config.weights).meta.item();
}

Outcome meta_gradient() {
  Outcome o;
  const auto t0 = Clock::now();
  auto t = testing::tiny_instance();
  // Disentanglement is off, so E_s and G play no part and are left out.
  const ParameterSet params =
      t.params.subset({Component::kContentEncoder, Component::kSegmenter, Component::kCritic});
  if (params.scalar_count() > 50) fail(o, "instance has " + std::to_string(params.scalar_count()) + " parameters");

  const ParameterSet leaves = params.as_leaves();
  static const PerceptualExtractor extractor(1234);
  const auto outcome =
      support_forward(t.episode, leaves, t.config.weights, t.config.flags, extractor);
  const auto inner = inner_updates(outcome, t.episode, leaves, t.config);
  const auto query = query_losses(t.episode, inner, t.config.weights);
  const auto exact = critic_meta_gradient(t.episode, leaves, inner, query, t.config);

  const double h = 1e-4;
  double diff = 0, norm_exact = 0, norm_fd = 0;
  const auto critic = params.indices(Component::kCritic);
  for (std::size_t n = 0; n < critic.size(); ++n) {
    const std::size_t i = critic[n];
    const auto base = params.entries()[i].value.to_vector();
    for (std::size_t j = 0; j < base.size(); ++j) {
      auto shifted = [&](double d) {
        ParameterSet p = params;
        auto v = base;
        v[j] += d;
        p.set(i, Tensor::from(params.entries()[i].value.shape(), std::move(v)));
        return meta_value(t, p);
      };
      const double fd = (shifted(h) - shifted(-h)) / (2 * h);
      const double ex = exact[n].data()[j];
      diff += (fd - ex) * (fd - ex);
      norm_exact += ex * ex;
      norm_fd += fd * fd;
    }
  }
  const double rel = std::sqrt(diff) / std::max({std::sqrt(norm_exact), std::sqrt(norm_fd), 1e-30});
  const double secs = seconds_since(t0);
  if (!(norm_exact > 0)) fail(o, "exact meta-gradient is zero");
  if (!(rel < 1e-2)) fail(o, "rel err " + fmt("%.3g", rel));
  if (secs >= 60) fail(o, "took " + fmt("%.1f", secs) + " s");
  o.detail = std::to_string(params.scalar_count()) + " parameters (" +
             std::to_string(params.scalar_count(Component::kCritic)) + " critic), rel err " +
             fmt("%.2e", rel) + ", |grad| " + fmt("%.3g", std::sqrt(norm_exact)) + ", " +
             fmt("%.1f", secs) + " s" + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// 3 ------------------------------------------------------------------------

double critic_scalar(const ParameterSet& p, std::size_t k, const std::vector<double>& f) {
  const std::string prefix = "C." + std::to_string(k);
  const auto w1 = p.get(prefix + ".fc1.weight").data();
  const auto b1 = p.get(prefix + ".fc1.bias").data();
  const auto w2 = p.get(prefix + ".fc2.weight").data();
  double out = p.get(prefix + ".fc2.bias").data()[0];
  for (std::size_t j = 0; j < b1.size(); ++j) {
    double hidden = b1[j];
    for (std::size_t i = 0; i < f.size(); ++i) hidden += w1[j * f.size() + i] * f[i];
    out += w2[j] * std::max(hidden, 0.0);
  }
  return std::log1p(std::exp(out));
}

Outcome formulas() {
  Outcome o;
  const LossWeights w;
  const double agg = agg_loss(Tensor::scalar(1), Tensor::scalar(2), Tensor::scalar(3), w).item();
  if (agg != 15.0) fail(o, "aggregate loss " + fmt("%.17g", agg));

  TaskSpec task;
  ArchConfig arch;
  arch.feature_channels = 6;
  arch.critic_hidden = 7;
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-1, 1);
  std::uniform_int_distribution<int> cls(0, static_cast<int>(task.classes) - 1);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto params = init_models(task, arch, 100 + trial);
    std::vector<double> fv(6 * 64);
    for (auto& v : fv) v = u(rng);
    LabelMap y{8, 8, std::vector<std::uint8_t>(64)};
    for (auto& v : y.labels) v = static_cast<std::uint8_t>(cls(rng));
    const Tensor features = Tensor::from({6, 8, 8}, fv);
    for (std::size_t k = 0; k < task.classes; ++k) {
      double s = 0;
      std::size_t n = 0;
      for (std::size_t yy = 0; yy < 8; ++yy) {
        for (std::size_t xx = 0; xx < 8; ++xx) {
          if (y.at(yy, xx) != k) continue;
          std::vector<double> f(6);
          for (std::size_t c = 0; c < 6; ++c) f[c] = fv[(c * 8 + yy) * 8 + xx];
          s += critic_scalar(params, k, f);
          ++n;
        }
      }
      const auto l = critic_class_loss(features, y, k, params);
      if (l.has_value() != (n > 0)) {
        fail(o, "critic loss presence mismatch");
        continue;
      }
      if (n) worst = std::max(worst, std::abs(l->item() - s / static_cast<double>(n)));
    }
  }
  if (!(worst < 1e-12)) fail(o, "critic loss err " + fmt("%.3g", worst));

  const double zero = meta_objective(Tensor::scalar(0.8), Tensor::scalar(0.8), w).item();
  const double gap = meta_objective(Tensor::scalar(1.2), Tensor::scalar(0.7), w).item();
  const double expect = -w.meta * std::tanh(0.5);
  if (zero != 0.0) fail(o, "meta objective at equal inputs " + fmt("%.3g", zero));
  if (!(std::abs(gap - expect) <= 1e-9 * std::abs(expect))) {
    fail(o, "meta objective at gap 0.5 " + fmt("%.10g", gap));
  }
  o.detail = "L_agg(1,2,3) = " + fmt("%g", agg) + ", critic loss max err " + fmt("%.1e", worst) +
             ", meta(0.5) = " + fmt("%.2f", gap) + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// 4 ------------------------------------------------------------------------

Outcome degeneracies() {
  Outcome o;
  const TaskSpec task;
  const auto fam = make_domain_family(3, 0.5, 0.3, 7, task);
  const auto initial = init_models(task, {}, 0);
  const PerceptualExtractor extractor(1234);
  std::mt19937_64 rng(1);
  const Episode ep = sample_episode(fam, task, rng);

  {
    TrainerConfig c;
    c.weights.critic = 0;
    const ParameterSet leaves = initial.as_leaves();
    const auto out = support_forward(ep, leaves, c.weights, c.flags, extractor);
    const auto inner = inner_updates(out, ep, leaves, c);
    if (!inner.theta_full.bitwise_equal(inner.theta_tilde)) fail(o, "lambda_critic = 0 changed theta");
    if (inner.theta_tilde.bitwise_equal(initial)) fail(o, "lambda_critic = 0 case made no step");
  }
  auto critic_constant = [&](TrainerConfig c, const char* what) {
    c.iterations = 2;
    EpisodicTrainer tr(task, {}, c, fam, initial);
    tr.run();
    if (!tr.params().bitwise_equal(initial, Component::kCritic)) fail(o, std::string(what) + " moved C");
  };
  {
    TrainerConfig c;
    c.weights.meta = 0;
    critic_constant(c, "lambda_meta = 0");
    c = TrainerConfig{};
    c.flags.meta = false;
    critic_constant(c, "meta off");
  }
  {
    TrainerConfig c;
    c.alpha = 0;
    c.iterations = 1;
    EpisodicTrainer tr(task, {}, c, fam, initial);
    tr.run();
    if (!tr.params().bitwise_equal(initial)) fail(o, "alpha = 0 changed parameters");
  }
  if (o.pass) o.detail = "lambda_critic = 0, lambda_meta = 0, meta off, alpha = 0 all exact";
  return o;
}

// 5 ------------------------------------------------------------------------

Outcome trend(const fs::path& out_dir) {
  Outcome o;
  ExperimentConfig config;
  config.output_dir = out_dir;
  config.validate();
  fs::remove_all(out_dir);
  Summary summary;
  double slowest = 0;
  for (auto mode : kAllModes) {
    SummaryRow row{mode, config.seeds, {}, {}};
    for (auto seed : config.seeds) {
      const auto t0 = Clock::now();
      const auto cell = run_cell(config, mode, seed,
                                 out_dir / std::string(mode_name(mode)) /
                                     ("seed-" + std::to_string(seed)));
      const double secs = seconds_since(t0);
      slowest = std::max(slowest, secs);
      std::printf("  trend %-9s seed %llu: target %.4f source %.4f (%.0f s)\n",
                  std::string(mode_name(mode)).c_str(), static_cast<unsigned long long>(seed),
                  cell.target.miou, cell.source.miou, secs);
      std::fflush(stdout);
      if (secs > 900) fail(o, std::string(mode_name(mode)) + " run took " + fmt("%.0f", secs) + " s");
      row.source_miou.push_back(cell.source.miou);
      row.target_miou.push_back(cell.target.miou);
    }
    summary.rows.push_back(std::move(row));
  }
  std::ofstream(out_dir / "summary.csv") << summary.csv();
  std::ofstream(out_dir / "summary.txt") << summary.text();
  std::printf("%s", summary.text().c_str());

  auto med = [&](AblationMode m) {
    for (const auto& r : summary.rows) {
      if (r.mode == m) return median_of(r.target_miou);
    }
    return std::nan("");
  };
  const double base = med(AblationMode::kBaseline), nd = med(AblationMode::kNoDisent),
               nm = med(AblationMode::kNoMeta), full = med(AblationMode::kFull);
  if (!(full >= base)) fail(o, "full < baseline");
  if (!(nd >= base)) fail(o, "no_disent < baseline");
  if (!(full >= nm)) fail(o, "full < no_meta");
  if (!(full - base > 0)) fail(o, "full - baseline <= 0");
  o.detail = "median target mIoU baseline " + fmt("%.4f", base) + ", no_disent " +
             fmt("%.4f", nd) + ", no_meta " + fmt("%.4f", nm) + ", full " + fmt("%.4f", full) +
             ", slowest run " + fmt("%.0f", slowest) + " s" +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// 6 ------------------------------------------------------------------------

Outcome inference_invariance() {
  Outcome o;
  const TaskSpec task;
  const auto fam = make_domain_family(4, 0.5, 0.3, 7, task);
  const auto params = init_models(task, {}, 3);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> noise(0, 10);
  ParameterSet noisy = params, poisoned = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = params.entries()[i];
    if (e.component == Component::kContentEncoder || e.component == Component::kSegmenter) continue;
    auto v = e.value.to_vector();
    for (auto& x : v) x += noise(rng);
    noisy.set(i, Tensor::from(e.value.shape(), v));
    std::fill(v.begin(), v.end(), std::nan(""));
    poisoned.set(i, Tensor::from(e.value.shape(), v));
  }
  const auto restricted = params.subset({Component::kContentEncoder, Component::kSegmenter});
  std::size_t images = 0;
  for (const auto& d : fam) {
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Sample x = generate_sample(d, task, kEvalSeedBegin + s);
      const LabelMap ref = infer(x.image, params);
      if (infer(x.image, noisy) != ref || infer(x.image, poisoned) != ref ||
          infer(x.image, restricted) != ref) {
        fail(o, "prediction changed on " + d.id);
      }
      ++images;
    }
  }
  if (o.pass) {
    o.detail = std::to_string(images) +
               " images identical under noise, NaN and removal of E_s, G, C";
  }
  return o;
}

// 7 ------------------------------------------------------------------------

Outcome determinism(const fs::path& scratch) {
  Outcome o;
  ExperimentConfig config;
  config.trainer.iterations = 20;
  config.trainer.checkpoint_interval = 10;
  config.eval_samples = 5;
  config.seeds = {1};
  std::vector<std::string> files;
  for (auto mode : {AblationMode::kFull, AblationMode::kBaseline}) {
    config.mode = mode;
    for (const char* run_name : {"a", "b"}) {
      config.output_dir = scratch / run_name;
      fs::remove_all(config.output_dir);
      run(config);
    }
    const fs::path cell = fs::path(std::string(mode_name(mode))) / "seed-1";
    for (const char* f : {"metrics.jsonl", "eval.jsonl", "report_source.json",
                          "report_target.json", "confusion_target.csv", "curves.svg"}) {
      const std::string a = slurp(scratch / "a" / cell / f);
      const std::string b = slurp(scratch / "b" / cell / f);
      if (a.empty() || a != b) fail(o, (cell / f).string() + " differs");
      files.push_back(f);
    }
  }
  if (o.pass) o.detail = std::to_string(files.size()) + " output files byte-identical across repeated runs";
  return o;
}

// 8 ------------------------------------------------------------------------

Outcome iou_oracle() {
  Outcome o;
  std::mt19937_64 rng(8);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 6)(rng);
    const std::size_t h = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const std::size_t w = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    // Fewer labels than classes in play leaves some classes undefined.
    const std::size_t used = std::uniform_int_distribution<std::size_t>(1, k)(rng);
    std::uniform_int_distribution<int> label(0, static_cast<int>(used) - 1);
    ConfusionMatrix cm(k);
    std::vector<std::set<std::size_t>> truth_sets(k), pred_sets(k);
    std::size_t offset = 0;
    const int maps = std::uniform_int_distribution<int>(1, 3)(rng);
    for (int m = 0; m < maps; ++m) {
      LabelMap p{h, w, std::vector<std::uint8_t>(h * w)}, t = p;
      for (auto& v : p.labels) v = static_cast<std::uint8_t>(label(rng));
      for (auto& v : t.labels) v = static_cast<std::uint8_t>(label(rng));
      cm = accumulate(cm, p, t);
      for (std::size_t i = 0; i < h * w; ++i) {
        truth_sets[t.labels[i]].insert(offset + i);
        pred_sets[p.labels[i]].insert(offset + i);
      }
      offset += h * w;
    }
    const EvalReport r = iou_report(cm);
    double sum = 0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<std::size_t> inter, uni;
      std::set_intersection(truth_sets[c].begin(), truth_sets[c].end(), pred_sets[c].begin(),
                            pred_sets[c].end(), std::back_inserter(inter));
      std::set_union(truth_sets[c].begin(), truth_sets[c].end(), pred_sets[c].begin(),
                     pred_sets[c].end(), std::back_inserter(uni));
      if (uni.empty()) {
        if (r.per_class_iou[c].has_value()) fail(o, "class with empty union reported");
        continue;
      }
      const double iou = static_cast<double>(inter.size()) / static_cast<double>(uni.size());
      if (!r.per_class_iou[c]) {
        fail(o, "defined class reported undefined");
        continue;
      }
      worst = std::max(worst, std::abs(*r.per_class_iou[c] - iou));
      sum += iou;
      ++defined;
    }
    worst = std::max(worst, std::abs(r.miou - sum / static_cast<double>(defined)));
  }
  if (!(worst <= 1e-12)) fail(o, "max err " + fmt("%.3g", worst));
  o.detail = "1000 instances, max err " + fmt("%.1e", worst) + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  fs::path scratch = fs::temp_directory_path() / "metaseg-acceptance";
  fs::path trend_dir = "acceptance-trend";
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 8));
  app.add_option("--scratch", scratch, "scratch directory for the determinism runs");
  app.add_option("--trend-dir", trend_dir, "output directory of the ablation suite");
  CLI11_PARSE(app, argc, argv);

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> check;
  };
  const std::vector<Criterion> criteria{
      {1, "primitive gradients", primitive_gradients},
      {2, "critic meta-gradient", meta_gradient},
      {3, "formula exactness", formulas},
      {4, "degeneracy contracts", degeneracies},
      {5, "ablation trend", [&] { return trend(trend_dir); }},
      {6, "inference invariance", inference_invariance},
      {7, "determinism", [&] { return determinism(scratch); }},
      {8, "iou oracle", iou_oracle},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures ? 1 : 0;
}
