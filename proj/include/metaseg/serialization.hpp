// JSON conversions for configuration and record types.
//
// Readers fill missing keys from the defaults of the target struct and reject
// unknown keys, so a partial config file overrides only what it names.
#pragma once

#include "metaseg/domain.hpp"
#include "metaseg/losses.hpp"
#include "metaseg/nets.hpp"
#include "metaseg/trainer.hpp"

#include <nlohmann/json.hpp>

#include <set>
#include <stdexcept>
#include <string>

namespace metaseg {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const char* what,
                           std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
  const std::set<std::string> names(known.begin(), known.end());
  for (const auto& [key, value] : j.items()) {
    if (!names.count(key)) {
      throw ConfigError(std::string(what) + ": unknown key \"" + key + "\"");
    }
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      it->get_to(out);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad value for \"") + key + "\": " + e.what());
    }
  }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = {{"classes", t.classes},
       {"height", t.height},
       {"width", t.width},
       {"class_names", t.class_names}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
  detail::reject_unknown(j, "task", {"classes", "height", "width", "class_names"});
  detail::read_opt(j, "classes", t.classes);
  detail::read_opt(j, "height", t.height);
  detail::read_opt(j, "width", t.width);
  if (j.contains("class_names")) {
    detail::read_opt(j, "class_names", t.class_names);
  } else if (t.class_names.size() != t.classes) {
    t.class_names.clear();
    for (std::size_t k = 0; k < t.classes; ++k) t.class_names.push_back("class" + std::to_string(k));
  }
}

inline void to_json(nlohmann::json& j, const ArchConfig& a) {
  j = {{"kernel", a.kernel},
       {"encoder_channels", a.encoder_channels},
       {"decoder_channels", a.decoder_channels},
       {"feature_channels", a.feature_channels},
       {"style_channels", a.style_channels},
       {"style_dim", a.style_dim},
       {"generator_channels", a.generator_channels},
       {"critic_hidden", a.critic_hidden}};
}

inline void from_json(const nlohmann::json& j, ArchConfig& a) {
  detail::reject_unknown(j, "arch",
                         {"kernel", "encoder_channels", "decoder_channels",
                          "feature_channels", "style_channels", "style_dim",
                          "generator_channels", "critic_hidden"});
  detail::read_opt(j, "kernel", a.kernel);
  detail::read_opt(j, "encoder_channels", a.encoder_channels);
  detail::read_opt(j, "decoder_channels", a.decoder_channels);
  detail::read_opt(j, "feature_channels", a.feature_channels);
  detail::read_opt(j, "style_channels", a.style_channels);
  detail::read_opt(j, "style_dim", a.style_dim);
  detail::read_opt(j, "generator_channels", a.generator_channels);
  detail::read_opt(j, "critic_hidden", a.critic_hidden);
}

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"rec", w.rec}, {"perc", w.perc}, {"seg", w.seg}, {"critic", w.critic},
       {"meta", w.meta}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  detail::reject_unknown(j, "weights", {"rec", "perc", "seg", "critic", "meta"});
  detail::read_opt(j, "rec", w.rec);
  detail::read_opt(j, "perc", w.perc);
  detail::read_opt(j, "seg", w.seg);
  detail::read_opt(j, "critic", w.critic);
  detail::read_opt(j, "meta", w.meta);
}

inline void to_json(nlohmann::json& j, const AblationFlags& f) {
  j = {{"disentanglement", f.disentanglement}, {"meta", f.meta}};
}

inline void from_json(const nlohmann::json& j, AblationFlags& f) {
  detail::reject_unknown(j, "flags", {"disentanglement", "meta"});
  detail::read_opt(j, "disentanglement", f.disentanglement);
  detail::read_opt(j, "meta", f.meta);
}

NLOHMANN_JSON_SERIALIZE_ENUM(MetaGradientMode, {
                                                   {MetaGradientMode::kExact, "exact"},
                                                   {MetaGradientMode::kFiniteDifference,
                                                    "finite_difference"},
                                               })

inline void to_json(nlohmann::json& j, const TrainerConfig& c) {
  j = {{"alpha", c.alpha},
       {"adam_lr_ratio", c.adam_lr_ratio},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_epsilon", c.adam_epsilon},
       {"critic_lr", c.critic_lr},
       {"weights", c.weights},
       {"iterations", c.iterations},
       {"seed", c.seed},
       {"perceptual_seed", c.perceptual_seed},
       {"checkpoint_interval", c.checkpoint_interval},
       {"flags", c.flags},
       {"meta_gradient", c.meta_gradient},
       {"meta_fd_step", c.meta_fd_step},
       {"max_aborted_streak", c.max_aborted_streak},
       {"record_wall_time", c.record_wall_time}};
}

inline void from_json(const nlohmann::json& j, TrainerConfig& c) {
  detail::reject_unknown(
      j, "trainer",
      {"alpha", "adam_lr_ratio", "adam_beta1", "adam_beta2", "adam_epsilon", "critic_lr",
       "weights", "iterations", "seed", "perceptual_seed", "checkpoint_interval", "flags",
       "meta_gradient", "meta_fd_step", "max_aborted_streak", "record_wall_time"});
  detail::read_opt(j, "alpha", c.alpha);
  detail::read_opt(j, "adam_lr_ratio", c.adam_lr_ratio);
  detail::read_opt(j, "adam_beta1", c.adam_beta1);
  detail::read_opt(j, "adam_beta2", c.adam_beta2);
  detail::read_opt(j, "adam_epsilon", c.adam_epsilon);
  detail::read_opt(j, "critic_lr", c.critic_lr);
  if (j.contains("weights")) from_json(j.at("weights"), c.weights);
  detail::read_opt(j, "iterations", c.iterations);
  detail::read_opt(j, "seed", c.seed);
  detail::read_opt(j, "perceptual_seed", c.perceptual_seed);
  detail::read_opt(j, "checkpoint_interval", c.checkpoint_interval);
  if (j.contains("flags")) from_json(j.at("flags"), c.flags);
  detail::read_opt(j, "meta_gradient", c.meta_gradient);
  detail::read_opt(j, "meta_fd_step", c.meta_fd_step);
  detail::read_opt(j, "max_aborted_streak", c.max_aborted_streak);
  detail::read_opt(j, "record_wall_time", c.record_wall_time);
}

inline void to_json(nlohmann::json& j, const MetricsRecord& r) {
  j = nlohmann::json::object();
  j["iteration"] = r.iteration;
  auto put = [&j](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  put("l_rec", r.l_rec);
  put("l_perc", r.l_perc);
  j["l_seg"] = r.l_seg;
  j["l_agg"] = r.l_agg;
  put("l_critic", r.l_critic);
  put("query_seg_agg", r.query_seg_agg);
  put("query_seg_total", r.query_seg_total);
  put("meta_objective", r.meta_objective);
  put("wall_time", r.wall_time);
  if (r.aborted) j["aborted"] = true;
  if (!r.note.empty()) j["note"] = r.note;
}

inline void from_json(const nlohmann::json& j, MetricsRecord& r) {
  r = MetricsRecord{};
  r.iteration = j.at("iteration").get<std::size_t>();
  auto get = [&j](const char* key, std::optional<double>& v) {
    if (auto it = j.find(key); it != j.end() && it->is_number()) v = it->get<double>();
  };
  get("l_rec", r.l_rec);
  get("l_perc", r.l_perc);
  r.l_seg = j.value("l_seg", 0.0);
  r.l_agg = j.value("l_agg", 0.0);
  get("l_critic", r.l_critic);
  get("query_seg_agg", r.query_seg_agg);
  get("query_seg_total", r.query_seg_total);
  get("meta_objective", r.meta_objective);
  get("wall_time", r.wall_time);
  r.aborted = j.value("aborted", false);
  r.note = j.value("note", std::string{});
}

}  // namespace metaseg
