#include "respalloc/run_config.hpp"

#include <fstream>
#include <set>

#include "respalloc/errors.hpp"

namespace resp {

namespace {

// Tracks which keys a parser consumed; leftovers are an error.
class StrictView {
 public:
  StrictView(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ParseError(path_ + ": expected an object");
  }

  template <typename T>
  void opt(const char* key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    try {
      out = it->get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path_ + "." + key + ": " + e.what());
    }
  }

  void opt_vec2(const char* key, Eigen::Vector2d& out) {
    std::vector<double> v{out.x(), out.y()};
    opt(key, v);
    if (v.size() != 2) throw ParseError(path_ + "." + key + ": expected 2 numbers");
    out = Eigen::Vector2d(v[0], v[1]);
  }

  void opt_activation(const char* key, Activation& out) {
    std::string name = to_string(out);
    opt(key, name);
    try {
      out = activation_from_string(name);
    } catch (const InvalidInputError& e) {
      throw ParseError(path_ + "." + key + ": " + e.what());
    }
  }

  const nlohmann::json* child(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      (void)v;
      if (!seen_.count(k)) throw ParseError(path_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_corridor(const nlohmann::json& j, CorridorConfig& c) {
  StrictView v(j, "corridor");
  v.opt("x_gap_min", c.x_gap_min);
  v.opt("x_gap_max", c.x_gap_max);
  v.opt("speed_min", c.speed_min);
  v.opt("speed_max", c.speed_max);
  v.opt_vec2("mode_mean_a", c.mode_mean_a);
  v.opt_vec2("mode_mean_b", c.mode_mean_b);
  v.opt("mode_std", c.mode_std);
  v.opt("skew_slope", c.skew_slope);
  v.opt("mixture_weight", c.mixture_weight);
  v.opt("u_des_mag", c.u_des_mag);
  v.finish();
}

void parse_intersection(const nlohmann::json& j, IntersectionConfig& c) {
  StrictView v(j, "intersection");
  v.opt("lane_offset", c.lane_offset);
  v.opt("spawn_radius", c.spawn_radius);
  v.opt("exit_radius", c.exit_radius);
  v.opt("target_speed", c.target_speed);
  v.opt("speed_jitter", c.speed_jitter);
  v.opt("gain", c.gain);
  v.opt("u_bound", c.u_bound);
  v.opt("dt", c.dt);
  v.opt("episode_steps", c.episode_steps);
  v.opt("max_agents", c.max_agents);
  v.opt("yield_zone", c.yield_zone);
  v.opt("conflict_radius", c.conflict_radius);
  v.opt("stop_margin", c.stop_margin);
  v.opt("brake_accel", c.brake_accel);
  v.opt("headway_s", c.headway_s);
  v.opt("t_history", c.t_history);
  v.opt("slice_stride", c.slice_stride);
  v.opt("horizon", c.horizon);
  v.finish();
}

void parse_policy(const nlohmann::json& j, DesiredPolicy& p) {
  StrictView v(j, "policy");
  v.opt("kind", p.kind);
  v.opt("magnitude", p.magnitude);
  v.opt("target_speed", p.target_speed);
  v.opt("gain", p.gain);
  v.opt("u_bound", p.u_bound);
  v.finish();
}

void parse_encoder(const nlohmann::json& j, EncoderConfig& e) {
  StrictView v(j, "model.encoder");
  v.opt("kind", e.kind);
  v.opt("d_model", e.d_model);
  v.opt("layers", e.layers);
  v.opt("heads", e.heads);
  v.opt("ff_hidden", e.ff_hidden);
  v.opt("mlp_hidden", e.mlp_hidden);
  v.opt("activation", e.activation);
  v.opt("layer_norm", e.layer_norm);
  v.opt("agent_aware", e.agent_aware);
  v.opt("n_max", e.n_max);
  v.opt("t_max", e.t_max);
  v.finish();
}

void parse_model(const nlohmann::json& j, CVAEConfig& m) {
  StrictView v(j, "model");
  if (const auto* enc = v.child("encoder")) parse_encoder(*enc, m.encoder);
  v.opt("d_z", m.d_z);
  v.opt("latent", m.latent);
  v.opt("n_categories", m.n_categories);
  v.opt("decoder_output", m.decoder_output);
  v.opt_activation("activation", m.activation);
  if (const auto* rc = v.child("recon")) {
    StrictView rv(*rc, "model.recon");
    rv.opt("sigma", m.recon.sigma);
    rv.opt("learn_sigma", m.recon.learn_sigma);
    rv.finish();
  }
  v.opt("head_hidden", m.head_hidden);
  v.opt("u_embed", m.u_embed);
  v.finish();
}

void parse_train(const nlohmann::json& j, TrainConfig& t) {
  StrictView v(j, "train");
  v.opt("learning_rate", t.learning_rate);
  v.opt("epochs", t.epochs);
  v.opt("batch_size", t.batch_size);
  if (const auto* b = v.child("beta")) {
    StrictView bv(*b, "train.beta");
    bv.opt("start_epoch", t.beta.start_epoch);
    bv.opt("end_epoch", t.beta.end_epoch);
    bv.opt("max_beta", t.beta.max_beta);
    bv.finish();
    t.beta_set = true;
  }
  v.opt("adam_b1", t.adam_b1);
  v.opt("adam_b2", t.adam_b2);
  v.opt("adam_eps", t.adam_eps);
  v.opt("clip_norm", t.clip_norm);
  v.opt("checkpoint_every", t.checkpoint_every);
  v.finish();
}

void parse_filter(const nlohmann::json& j, FilterConfig& f) {
  StrictView v(j, "filter");
  v.opt("beta1", f.beta1);
  v.opt("beta2", f.beta2);
  v.opt("u_bound", f.u_bound);
  v.opt_activation("activation", f.activation);
  v.opt("act_tol", f.act_tol);
  if (const auto* b = v.child("barrier")) {
    StrictView bv(*b, "filter.barrier");
    bv.opt("d_min", f.barrier.d_min);
    bv.opt("sigma", f.barrier.sigma);
    bv.opt("alpha0", f.barrier.alpha0);
    bv.finish();
  }
  if (const auto* q = v.child("qp")) {
    StrictView qv(*q, "filter.qp");
    qv.opt("tol", f.qp.tol);
    qv.opt("max_iter", f.qp.max_iter);
    qv.opt("pd_floor", f.qp.pd_floor);
    qv.finish();
  }
  v.finish();
}

void parse_eval(const nlohmann::json& j, RunConfig& c) {
  StrictView v(j, "eval");
  v.opt("horizon", c.eval.horizon);
  v.opt("dt", c.eval.dt);
  v.opt("n_samples", c.eval.n_samples);
  v.opt("best_of_k", c.eval.best_of_k);
  v.opt("seeds", c.eval_seeds);
  v.opt("density_bins", c.density_bins);
  v.opt("density_samples", c.density_samples);
  v.finish();
}

}  // namespace

bool RunConfig::valid() const {
  if (dataset != "corridor" && dataset != "intersection") return false;
  if (corridor_count < 1 || intersection_episodes < 1) return false;
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) return false;
  if (eval.horizon < 0 || eval.dt <= 0.0 || eval.n_samples < 1) return false;
  if (eval_seeds < 1 || density_bins < 1 || density_samples < 1) return false;
  return corridor.valid() && intersection.valid() && policy.valid() && model.valid() &&
         train.valid() && filter.valid();
}

RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  StrictView v(j, "config");
  v.opt("seed", c.seed);
  v.opt("out_dir", c.out_dir);
  v.opt("dataset", c.dataset);
  v.opt("corridor_count", c.corridor_count);
  v.opt("intersection_episodes", c.intersection_episodes);
  v.opt("test_fraction", c.test_fraction);
  if (const auto* x = v.child("corridor")) parse_corridor(*x, c.corridor);
  if (const auto* x = v.child("intersection")) parse_intersection(*x, c.intersection);
  if (const auto* x = v.child("policy")) parse_policy(*x, c.policy);
  if (const auto* x = v.child("model")) parse_model(*x, c.model);
  if (const auto* x = v.child("train")) parse_train(*x, c.train);
  if (const auto* x = v.child("filter")) parse_filter(*x, c.filter);
  if (const auto* x = v.child("eval")) parse_eval(*x, c);
  v.finish();
  if (!c.valid()) throw ParseError("config: semantic validation failed");
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_run_config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("load_run_config: ") + e.what());
  }
  return parse_run_config(j);
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["dataset"] = c.dataset;
  j["corridor_count"] = c.corridor_count;
  j["intersection_episodes"] = c.intersection_episodes;
  j["test_fraction"] = c.test_fraction;
  j["corridor"] = {
      {"x_gap_min", c.corridor.x_gap_min},
      {"x_gap_max", c.corridor.x_gap_max},
      {"speed_min", c.corridor.speed_min},
      {"speed_max", c.corridor.speed_max},
      {"mode_mean_a", {c.corridor.mode_mean_a.x(), c.corridor.mode_mean_a.y()}},
      {"mode_mean_b", {c.corridor.mode_mean_b.x(), c.corridor.mode_mean_b.y()}},
      {"mode_std", c.corridor.mode_std},
      {"skew_slope", c.corridor.skew_slope},
      {"mixture_weight", c.corridor.mixture_weight},
      {"u_des_mag", c.corridor.u_des_mag},
  };
  j["intersection"] = {
      {"lane_offset", c.intersection.lane_offset},
      {"spawn_radius", c.intersection.spawn_radius},
      {"exit_radius", c.intersection.exit_radius},
      {"target_speed", c.intersection.target_speed},
      {"speed_jitter", c.intersection.speed_jitter},
      {"gain", c.intersection.gain},
      {"u_bound", c.intersection.u_bound},
      {"dt", c.intersection.dt},
      {"episode_steps", c.intersection.episode_steps},
      {"max_agents", c.intersection.max_agents},
      {"yield_zone", c.intersection.yield_zone},
      {"conflict_radius", c.intersection.conflict_radius},
      {"stop_margin", c.intersection.stop_margin},
      {"brake_accel", c.intersection.brake_accel},
      {"headway_s", c.intersection.headway_s},
      {"t_history", c.intersection.t_history},
      {"slice_stride", c.intersection.slice_stride},
      {"horizon", c.intersection.horizon},
  };
  j["policy"] = {
      {"kind", c.policy.kind},           {"magnitude", c.policy.magnitude},
      {"target_speed", c.policy.target_speed}, {"gain", c.policy.gain},
      {"u_bound", c.policy.u_bound},
  };
  j["model"] = {
      {"encoder",
       {
           {"kind", c.model.encoder.kind},
           {"d_model", c.model.encoder.d_model},
           {"layers", c.model.encoder.layers},
           {"heads", c.model.encoder.heads},
           {"ff_hidden", c.model.encoder.ff_hidden},
           {"mlp_hidden", c.model.encoder.mlp_hidden},
           {"activation", c.model.encoder.activation},
           {"layer_norm", c.model.encoder.layer_norm},
           {"agent_aware", c.model.encoder.agent_aware},
           {"n_max", c.model.encoder.n_max},
           {"t_max", c.model.encoder.t_max},
       }},
      {"d_z", c.model.d_z},
      {"latent", c.model.latent},
      {"n_categories", c.model.n_categories},
      {"decoder_output", c.model.decoder_output},
      {"activation", to_string(c.model.activation)},
      {"recon", {{"sigma", c.model.recon.sigma}, {"learn_sigma", c.model.recon.learn_sigma}}},
      {"head_hidden", c.model.head_hidden},
      {"u_embed", c.model.u_embed},
  };
  j["train"] = {
      {"learning_rate", c.train.learning_rate},
      {"epochs", c.train.epochs},
      {"batch_size", c.train.batch_size},
      {"adam_b1", c.train.adam_b1},
      {"adam_b2", c.train.adam_b2},
      {"adam_eps", c.train.adam_eps},
      {"clip_norm", c.train.clip_norm},
      {"checkpoint_every", c.train.checkpoint_every},
  };
  if (c.train.beta_set) {
    j["train"]["beta"] = {{"start_epoch", c.train.beta.start_epoch},
                          {"end_epoch", c.train.beta.end_epoch},
                          {"max_beta", c.train.beta.max_beta}};
  }
  j["filter"] = {
      {"beta1", c.filter.beta1},
      {"beta2", c.filter.beta2},
      {"u_bound", c.filter.u_bound},
      {"activation", to_string(c.filter.activation)},
      {"act_tol", c.filter.act_tol},
      {"barrier",
       {{"d_min", c.filter.barrier.d_min},
        {"sigma", c.filter.barrier.sigma},
        {"alpha0", c.filter.barrier.alpha0}}},
      {"qp",
       {{"tol", c.filter.qp.tol},
        {"max_iter", c.filter.qp.max_iter},
        {"pd_floor", c.filter.qp.pd_floor}}},
  };
  j["eval"] = {
      {"horizon", c.eval.horizon},   {"dt", c.eval.dt},
      {"n_samples", c.eval.n_samples}, {"best_of_k", c.eval.best_of_k},
      {"seeds", c.eval_seeds},       {"density_bins", c.density_bins},
      {"density_samples", c.density_samples},
  };
  return j;
}

}  // namespace resp
