#include "metaseg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

namespace metaseg {

namespace {

bool finite(const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool finite(const std::vector<Tensor>& ts) {
  return std::all_of(ts.begin(), ts.end(), [](const Tensor& t) { return finite(t); });
}

std::vector<Tensor> all_values(const ParameterSet& params) {
  std::vector<Tensor> out;
  for (const auto& e : params.entries()) out.push_back(e.value);
  return out;
}

std::vector<std::size_t> content_and_segmenter(const ParameterSet& params) {
  auto idx = params.indices(Component::kContentEncoder);
  const auto seg = params.indices(Component::kSegmenter);
  idx.insert(idx.end(), seg.begin(), seg.end());
  return idx;
}

// theta - step * grad, evaluated as plain numbers.
Tensor plain_step(const Tensor& theta, const Tensor& grad, double step) {
  std::vector<double> v(theta.size());
  const auto t = theta.data();
  const auto g = grad.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = t[i] - step * g[i];
  return Tensor::from(theta.shape(), std::move(v));
}

// Mean critic loss over the two support images, evaluated under `params`.
Tensor support_critic_loss(const Episode& ep, const ParameterSet& params) {
  const auto seg_a = segment(encode_content(ep.support_a.image, params), params);
  const auto seg_b = segment(encode_content(ep.support_b.image, params), params);
  return scale(add(critic_loss(seg_a.features, ep.support_a.label, params),
                   critic_loss(seg_b.features, ep.support_b.label, params)),
               0.5);
}

Tensor query_seg_loss(const Episode& ep, const ParameterSet& params) {
  return seg_loss(segment(encode_content(ep.query.image, params), params).logits,
                  ep.query.label);
}

}  // namespace

void TrainerConfig::validate() const {
  if (!(alpha >= 0) || !std::isfinite(alpha)) {
    throw std::invalid_argument("TrainerConfig: alpha must be finite and >= 0");
  }
  if (iterations == 0) throw std::invalid_argument("TrainerConfig: iterations must be > 0");
  if (!(critic_lr >= 0) || !(adam_lr_ratio >= 0)) {
    throw std::invalid_argument("TrainerConfig: learning rates must be >= 0");
  }
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 &&
        adam_epsilon > 0)) {
    throw std::invalid_argument("TrainerConfig: invalid Adam hyper-parameters");
  }
  if (!(meta_fd_step > 0)) {
    throw std::invalid_argument("TrainerConfig: meta_fd_step must be > 0");
  }
  weights.validate();
}

Episode sample_episode(const std::vector<DomainSpec>& domains, const TaskSpec& task,
                       std::mt19937_64& rng, std::size_t iteration) {
  const std::size_t n = domains.size();
  if (n < 3) {
    throw std::invalid_argument(
        "sample_episode: need at least 3 source domains (two support, one query), got " +
        std::to_string(n));
  }
  auto pick = [&rng](std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(0, hi - 1)(rng);
  };
  const std::size_t a = pick(n);
  std::size_t b = pick(n - 1);
  if (b >= a) ++b;
  std::size_t c = pick(n - 2);
  for (std::size_t taken : {std::min(a, b), std::max(a, b)}) {
    if (c >= taken) ++c;
  }
  std::uniform_int_distribution<std::uint64_t> seed_dist(0, kTrainSeedEnd - 1);
  const std::uint64_t sa = seed_dist(rng), sb = seed_dist(rng), sc = seed_dist(rng);
  return {generate_sample(domains[a], task, sa), generate_sample(domains[b], task, sb),
          generate_sample(domains[c], task, sc), iteration};
}

SupportOutcome support_forward(const Episode& ep, const ParameterSet& params,
                               const LossWeights& weights, const AblationFlags& flags,
                               const PerceptualExtractor& extractor) {
  const Tensor& xa = ep.support_a.image;
  const Tensor& xb = ep.support_b.image;
  const ContentCode ca = encode_content(xa, params);
  const ContentCode cb = encode_content(xb, params);
  const Segmentation seg_a = segment(ca, params);
  const Segmentation seg_b = segment(cb, params);

  SupportOutcome out;
  Tensor seg_total = add(seg_loss(seg_a.logits, ep.support_a.label),
                         seg_loss(seg_b.logits, ep.support_b.label));
  std::size_t seg_terms = 2;

  if (flags.disentanglement) {
    const Tensor sa = encode_style(xa, params);
    const Tensor sb = encode_style(xb, params);
    const Tensor rec_a = generate(ca, sa, params);
    const Tensor rec_b = generate(cb, sb, params);
    const Tensor a2b = generate(ca, sb, params);
    const Tensor b2a = generate(cb, sa, params);
    out.l_rec = scale(add(recon_loss(xa, rec_a), recon_loss(xb, rec_b)), 0.5);
    out.l_perc = scale(add(perceptual_loss(a2b, xa, xb, extractor),
                           perceptual_loss(b2a, xb, xa, extractor)),
                       0.5);
    // Swapped images keep the geometry of their content source.
    const Segmentation seg_a2b = segment(encode_content(a2b, params), params);
    const Segmentation seg_b2a = segment(encode_content(b2a, params), params);
    seg_total = add(seg_total, add(seg_loss(seg_a2b.logits, ep.support_a.label),
                                   seg_loss(seg_b2a.logits, ep.support_b.label)));
    seg_terms += 2;
  } else {
    out.l_rec = Tensor{};
    out.l_perc = Tensor{};
  }
  out.l_seg = scale(seg_total, 1.0 / static_cast<double>(seg_terms));
  out.l_agg = flags.disentanglement
                  ? agg_loss(out.l_rec, out.l_perc, out.l_seg, weights)
                  : scale(out.l_seg, weights.seg);

  if (flags.meta) {
    out.l_critic = scale(add(critic_loss(seg_a.features, ep.support_a.label, params),
                             critic_loss(seg_b.features, ep.support_b.label, params)),
                         0.5);
  }
  return out;
}

InnerUpdate inner_updates(const SupportOutcome& outcome, const Episode& ep,
                          const ParameterSet& params, const TrainerConfig& config) {
  InnerUpdate r;
  const auto leaves = all_values(params);
  {
    auto g = backward(outcome.l_agg, leaves, false);
    r.agg_gradient = std::move(g.grads);
    r.agg_reached = std::move(g.reached);
  }
  if (!finite(r.agg_gradient)) {
    r.aborted = true;
    r.note = "non-finite gradient of the aggregate loss";
    return r;
  }

  // theta_tilde: fresh leaves for every parameter the aggregate loss reaches;
  // the others (the critic bank, and E_s/G without disentanglement) keep
  // their incoming leaves.
  r.theta_tilde = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!r.agg_reached[i]) continue;
    r.theta_tilde.set(i, plain_step(leaves[i], r.agg_gradient[i], config.alpha).as_leaf());
  }

  r.theta_full = r.theta_tilde;
  if (!config.flags.meta) return r;

  const auto idx = content_and_segmenter(r.theta_tilde);
  std::vector<Tensor> wrt;
  for (auto i : idx) wrt.push_back(r.theta_tilde.entries()[i].value);
  const Tensor critic_term =
      scale(support_critic_loss(ep, r.theta_tilde), config.weights.critic);
  const auto g = backward(critic_term, wrt, /*create_graph=*/true);
  if (!finite(g.grads)) {
    r.aborted = true;
    r.note = "non-finite gradient of the critic loss";
    return r;
  }
  for (std::size_t j = 0; j < idx.size(); ++j) {
    r.theta_full.set(idx[j], sub(wrt[j], scale(g.grads[j], config.alpha)));
  }
  return r;
}

QueryLosses query_losses(const Episode& ep, const InnerUpdate& inner,
                         const LossWeights& weights) {
  QueryLosses q;
  {
    NoGradGuard guard;
    q.seg_agg = query_seg_loss(ep, inner.theta_tilde);
  }
  q.seg_total = query_seg_loss(ep, inner.theta_full);
  q.meta = meta_objective(q.seg_agg, q.seg_total, weights);
  return q;
}

std::vector<Tensor> critic_meta_gradient(const Episode& ep, const ParameterSet& params,
                                         const InnerUpdate& inner,
                                         const QueryLosses& query,
                                         const TrainerConfig& config) {
  const auto critic = params.tensors(Component::kCritic);
  if (config.meta_gradient == MetaGradientMode::kExact) {
    if (!query.meta.tracked()) {
      std::vector<Tensor> zeros;
      for (const auto& c : critic) zeros.push_back(Tensor::zeros(c.shape()));
      return zeros;
    }
    return backward(query.meta, critic).grads;
  }

  // d meta / dC = lambda_meta sech²(gap) · (−alpha lambda_critic)
  //               · d/dC <v, grad_theta_tilde L_critic>,   v = grad_theta_full L_total
  // with the inner product replaced by a central difference along v.
  const auto idx = content_and_segmenter(inner.theta_full);
  ParameterSet full = inner.theta_full.detached();
  std::vector<Tensor> full_leaves;
  for (auto i : idx) {
    full.set(i, full.entries()[i].value.as_leaf());
    full_leaves.push_back(full.entries()[i].value);
  }
  const auto v = backward(query_seg_loss(ep, full), full_leaves).grads;
  double norm = 0;
  for (const auto& t : v) {
    for (double x : t.data()) norm += x * x;
  }
  norm = std::sqrt(norm);
  std::vector<Tensor> out;
  if (norm == 0.0) {
    for (const auto& c : critic) out.push_back(Tensor::zeros(c.shape()));
    return out;
  }
  const double eps = config.meta_fd_step / norm;
  auto shifted = [&](double sign) {
    ParameterSet p = inner.theta_tilde.detached();
    for (std::size_t j = 0; j < idx.size(); ++j) {
      p.set(idx[j], plain_step(p.entries()[idx[j]].value, v[j], -sign * eps));
    }
    // Critic entries must be the original leaves.
    for (auto i : params.indices(Component::kCritic)) p.set(i, params.entries()[i].value);
    return support_critic_loss(ep, p);
  };
  const Tensor difference = sub(shifted(1.0), shifted(-1.0));
  const double gap = query.seg_agg.item() - query.seg_total.item();
  const double sech2 = 1.0 - std::tanh(gap) * std::tanh(gap);
  const double coef = config.weights.meta * sech2 * (-config.alpha * config.weights.critic) /
                      (2.0 * eps);
  for (auto& g : backward(difference, critic).grads) out.push_back(scale(g, coef));
  return out;
}

MetricsRecord query_and_meta_update(const Episode& ep, const SupportOutcome& outcome,
                                    const ParameterSet& params, const InnerUpdate& inner,
                                    TrainingState& state, const TrainerConfig& config) {
  MetricsRecord rec;
  rec.iteration = state.iteration;
  rec.l_seg = outcome.l_seg.item();
  rec.l_agg = outcome.l_agg.item();
  if (outcome.l_rec.defined()) rec.l_rec = outcome.l_rec.item();
  if (outcome.l_perc.defined()) rec.l_perc = outcome.l_perc.item();
  if (outcome.l_critic.defined()) rec.l_critic = outcome.l_critic.item();

  ParameterSet next = state.params;
  const auto critic_idx = params.indices(Component::kCritic);

  if (config.flags.meta) {
    const QueryLosses q = query_losses(ep, inner, config.weights);
    rec.query_seg_agg = q.seg_agg.item();
    rec.query_seg_total = q.seg_total.item();
    rec.meta_objective = q.meta.item();
    const auto grads = critic_meta_gradient(ep, params, inner, q, config);
    if (finite(grads)) {
      NoGradGuard guard;
      for (std::size_t j = 0; j < critic_idx.size(); ++j) {
        const std::size_t i = critic_idx[j];
        next.set(i, plain_step(state.params.entries()[i].value, grads[j], config.critic_lr));
      }
    } else {
      rec.note = "non-finite meta-gradient; critic update skipped";
    }
  }

  const ParameterSet& committed = config.flags.meta ? inner.theta_full : inner.theta_tilde;
  for (auto i : content_and_segmenter(params)) {
    next.set(i, committed.entries()[i].value.detach());
  }

  // Adam on the aggregate-loss gradient for E_s and G.
  auto& opt = state.optimizer;
  opt.first_moment.resize(params.size());
  opt.second_moment.resize(params.size());
  ++opt.step;
  const double lr = config.alpha * config.adam_lr_ratio;
  const double bc1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(opt.step));
  for (Component c : {Component::kStyleEncoder, Component::kGenerator}) {
    for (auto i : params.indices(c)) {
      if (!inner.agg_reached[i]) continue;
      const auto g = inner.agg_gradient[i].data();
      auto& m = opt.first_moment[i];
      auto& v = opt.second_moment[i];
      if (m.empty()) {
        m.assign(g.size(), 0.0);
        v.assign(g.size(), 0.0);
      }
      const auto theta = state.params.entries()[i].value.data();
      std::vector<double> updated(g.size());
      for (std::size_t j = 0; j < g.size(); ++j) {
        m[j] = config.adam_beta1 * m[j] + (1 - config.adam_beta1) * g[j];
        v[j] = config.adam_beta2 * v[j] + (1 - config.adam_beta2) * g[j] * g[j];
        updated[j] = theta[j] - lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config.adam_epsilon);
      }
      next.set(i, Tensor::from(state.params.entries()[i].value.shape(), std::move(updated)));
    }
  }

  state.params = std::move(next);
  return rec;
}

// ---------------------------------------------------------------------------

EpisodicTrainer::EpisodicTrainer(TaskSpec task, ArchConfig arch, TrainerConfig config,
                                 std::vector<DomainSpec> domains)
    : EpisodicTrainer(task, arch, config, domains, init_models(task, arch, config.seed)) {}

EpisodicTrainer::EpisodicTrainer(TaskSpec task, ArchConfig arch, TrainerConfig config,
                                 std::vector<DomainSpec> domains, ParameterSet initial)
    : task_(std::move(task)),
      arch_(arch),
      config_(std::move(config)),
      domains_(std::move(domains)),
      extractor_(config_.perceptual_seed) {
  config_.validate();
  task_.validate(ArchConfig::kDownsampling);
  if (domains_.size() < 3) {
    throw std::invalid_argument("EpisodicTrainer: need at least 3 source domains");
  }
  for (const auto& d : domains_) d.validate(task_.classes);
  state_.params = initial.detached();
  state_.rng.seed(config_.seed ^ 0x9e3779b97f4a7c15ULL);
}

MetricsRecord EpisodicTrainer::step() {
  const auto start = std::chrono::steady_clock::now();
  const Episode ep = sample_episode(domains_, task_, state_.rng, state_.iteration);
  const ParameterSet theta = state_.params.as_leaves();
  const SupportOutcome outcome =
      support_forward(ep, theta, config_.weights, config_.flags, extractor_);
  const InnerUpdate inner = inner_updates(outcome, ep, theta, config_);

  MetricsRecord rec;
  if (inner.aborted) {
    rec.iteration = state_.iteration;
    rec.l_seg = outcome.l_seg.item();
    rec.l_agg = outcome.l_agg.item();
    rec.aborted = true;
    rec.note = inner.note;
    if (++state_.aborted_streak > config_.max_aborted_streak) {
      throw TrainingDiverged("training diverged: " +
                             std::to_string(state_.aborted_streak) +
                             " consecutive aborted iterations (last: " + inner.note + ")");
    }
  } else {
    rec = query_and_meta_update(ep, outcome, theta, inner, state_, config_);
    state_.aborted_streak = 0;
  }
  ++state_.iteration;
  if (config_.record_wall_time) {
    rec.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  return rec;
}

std::vector<MetricsRecord> EpisodicTrainer::run(const TrainHooks& hooks) {
  std::vector<MetricsRecord> history;
  history.reserve(config_.iterations);
  while (state_.iteration < config_.iterations) {
    history.push_back(step());
    if (hooks.on_record) hooks.on_record(history.back());
    const bool last = state_.iteration == config_.iterations;
    if (hooks.on_checkpoint &&
        (last || (config_.checkpoint_interval > 0 &&
                  state_.iteration % config_.checkpoint_interval == 0))) {
      hooks.on_checkpoint(state_.iteration, state_.params);
    }
  }
  return history;
}

TrainResult train(const TrainerConfig& config, const std::vector<DomainSpec>& domains,
                  const TaskSpec& task, const ArchConfig& arch, const TrainHooks& hooks) {
  EpisodicTrainer trainer(task, arch, config, domains);
  auto history = trainer.run(hooks);
  return {trainer.params(), std::move(history)};
}

}  // namespace metaseg
