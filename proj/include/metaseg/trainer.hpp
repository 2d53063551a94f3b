// Episodic meta-training.
//
// Each iteration samples two support domains and a distinct query domain,
// then:
//   1. support stage: disentanglement + segmentation losses on the support
//      pair, combined into the aggregate loss;
//   2. theta_tilde = theta - alpha * grad(aggregate loss)           (plain step)
//      theta_full  = theta_tilde - alpha * grad(lambda_critic * critic loss
//                                              evaluated at theta_tilde)
//      The second step is recorded differentiably so the critic parameters
//      receive gradients through it;
//   3. query stage: segmentation loss of (E_c, S) under theta_tilde and under
//      theta_full on the query sample, combined into the meta objective, which
//      updates the critic bank only;
//   4. commit: E_c and S take theta_full, E_s and G take an Adam step on the
//      aggregate-loss gradient, C takes the meta step.
#pragma once

#include "metaseg/domain.hpp"
#include "metaseg/losses.hpp"
#include "metaseg/nets.hpp"

#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace metaseg {

struct AblationFlags {
  bool disentanglement = true;
  bool meta = true;
  bool operator==(const AblationFlags&) const = default;
};

enum class MetaGradientMode {
  kExact,             // backpropagate through the critic step (second order)
  kFiniteDifference,  // Hessian-vector product by central differences
};

struct TrainerConfig {
  double alpha = 0.01;          // step size of both inner updates
  double adam_lr_ratio = 0.1;   // Adam step size for E_s and G, relative to alpha
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double critic_lr = 1e-4;
  LossWeights weights;
  std::size_t iterations = 5000;
  std::uint64_t seed = 0;
  std::uint64_t perceptual_seed = 1234;
  std::size_t checkpoint_interval = 1000;
  AblationFlags flags;
  MetaGradientMode meta_gradient = MetaGradientMode::kExact;
  double meta_fd_step = 1e-4;
  std::size_t max_aborted_streak = 100;
  bool record_wall_time = false;

  void validate() const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Episode {
  Sample support_a;
  Sample support_b;
  Sample query;
  std::size_t iteration = 0;
};

struct SupportOutcome {
  Tensor l_rec;     // undefined when disentanglement is off
  Tensor l_perc;    // undefined when disentanglement is off
  Tensor l_seg;
  Tensor l_agg;
  Tensor l_critic;  // at the incoming parameters; undefined when meta is off
};

struct InnerUpdate {
  ParameterSet theta_tilde;
  ParameterSet theta_full;
  std::vector<Tensor> agg_gradient;  // per parameter, aligned with the set
  std::vector<bool> agg_reached;
  bool aborted = false;
  std::string note;
};

struct QueryLosses {
  Tensor seg_agg;    // constant
  Tensor seg_total;  // tracked through the critic step
  Tensor meta;
};

struct OptimizerState {
  std::vector<std::vector<double>> first_moment;   // per parameter; empty if unused
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
};

struct MetricsRecord {
  std::size_t iteration = 0;
  std::optional<double> l_rec;
  std::optional<double> l_perc;
  double l_seg = 0;
  double l_agg = 0;
  std::optional<double> l_critic;
  std::optional<double> query_seg_agg;
  std::optional<double> query_seg_total;
  std::optional<double> meta_objective;
  std::optional<double> wall_time;
  bool aborted = false;
  std::string note;
};

struct TrainingState {
  ParameterSet params;
  OptimizerState optimizer;
  std::mt19937_64 rng;
  std::size_t iteration = 0;
  std::size_t aborted_streak = 0;
};

// Needs at least three domains; support domains differ, and the query domain
// differs from both.
Episode sample_episode(const std::vector<DomainSpec>& domains, const TaskSpec& task,
                       std::mt19937_64& rng, std::size_t iteration = 0);

// `params` should be tracked leaves so the losses can be differentiated.
SupportOutcome support_forward(const Episode& episode, const ParameterSet& params,
                               const LossWeights& weights, const AblationFlags& flags,
                               const PerceptualExtractor& extractor);

InnerUpdate inner_updates(const SupportOutcome& outcome, const Episode& episode,
                          const ParameterSet& params, const TrainerConfig& config);

QueryLosses query_losses(const Episode& episode, const InnerUpdate& inner,
                         const LossWeights& weights);

// Gradient of the meta objective with respect to the critic parameters of
// `params` (the same leaves used to build `inner`).
std::vector<Tensor> critic_meta_gradient(const Episode& episode,
                                         const ParameterSet& params,
                                         const InnerUpdate& inner,
                                         const QueryLosses& query,
                                         const TrainerConfig& config);

// Applies the query stage and commits new parameters into `state`.
MetricsRecord query_and_meta_update(const Episode& episode, const SupportOutcome& outcome,
                                    const ParameterSet& params, const InnerUpdate& inner,
                                    TrainingState& state, const TrainerConfig& config);

struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_record;
  // Called every checkpoint_interval iterations and after the last one.
  std::function<void(std::size_t iteration, const ParameterSet&)> on_checkpoint;
};

class EpisodicTrainer {
 public:
  EpisodicTrainer(TaskSpec task, ArchConfig arch, TrainerConfig config,
                  std::vector<DomainSpec> domains);
  EpisodicTrainer(TaskSpec task, ArchConfig arch, TrainerConfig config,
                  std::vector<DomainSpec> domains, ParameterSet initial);

  MetricsRecord step();
  std::vector<MetricsRecord> run(const TrainHooks& hooks = {});

  const ParameterSet& params() const { return state_.params; }
  const TrainingState& state() const { return state_; }
  const TrainerConfig& config() const { return config_; }
  const TaskSpec& task() const { return task_; }
  const ArchConfig& arch() const { return arch_; }

 private:
  TaskSpec task_;
  ArchConfig arch_;
  TrainerConfig config_;
  std::vector<DomainSpec> domains_;
  PerceptualExtractor extractor_;
  TrainingState state_;
};

struct TrainResult {
  ParameterSet params;
  std::vector<MetricsRecord> history;
};

TrainResult train(const TrainerConfig& config, const std::vector<DomainSpec>& domains,
                  const TaskSpec& task, const ArchConfig& arch = {},
                  const TrainHooks& hooks = {});

}  // namespace metaseg
