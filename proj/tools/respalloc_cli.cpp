// Command-line driver: dataset generation, training, evaluation, and a
// standalone filter probe, all from one JSON run configuration.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "respalloc/checkpoint.hpp"
#include "respalloc/dataset_io.hpp"
#include "respalloc/errors.hpp"
#include "respalloc/evaluation.hpp"
#include "respalloc/run_config.hpp"
#include "respalloc/training.hpp"

namespace fs = std::filesystem;
using namespace resp;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct CommonArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

RunConfig resolve_config(const CommonArgs& args) {
  RunConfig cfg = args.config.empty() ? RunConfig{} : load_run_config(args.config);
  if (args.seed) cfg.seed = *args.seed;
  if (!args.out.empty()) cfg.out_dir = args.out;
  if (!cfg.valid()) throw InvalidInputError("run config failed validation");
  return cfg;
}

void archive_config(const RunConfig& cfg, const std::string& name = "config.json") {
  fs::create_directories(cfg.out_dir);
  const std::string path = (fs::path(cfg.out_dir) / name).string();
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << to_json(cfg).dump(2) << '\n';
}

// Copies trained parameters into a freshly registered store; every slice must
// match by name and shape or the checkpoint belongs to a different config.
void adopt_params(ParamStore& dst, const ParamStore& src) {
  const auto& a = dst.slices();
  const auto& b = src.slices();
  if (a.size() != b.size())
    throw ParseError("checkpoint incompatible: expected " + std::to_string(a.size()) +
                     " parameter slices, found " + std::to_string(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].rows != b[i].rows || a[i].cols != b[i].cols)
      throw ParseError("checkpoint incompatible at slice '" + b[i].name + "'");
  }
  dst.flat() = src.flat();
}

void adopt_scene_dims(RunConfig& cfg, const Dataset& ds) {
  if (ds.data.empty()) throw InvalidInputError("dataset is empty");
  const long n_max = ds.data.front().seq.n_max;
  const long t_max = ds.data.front().seq.t_max;
  if (cfg.model.encoder.n_max != n_max || cfg.model.encoder.t_max != t_max) {
    std::cout << "note: encoder dims set from dataset (n_max=" << n_max << ", t_max=" << t_max
              << ")\n";
    cfg.model.encoder.n_max = n_max;
    cfg.model.encoder.t_max = t_max;
  }
}

// ---- generate ---------------------------------------------------------------

int cmd_generate(const CommonArgs& args) {
  RunConfig cfg = resolve_config(args);
  archive_config(cfg);
  Rng rng(cfg.seed);
  const fs::path out(cfg.out_dir);

  if (cfg.dataset == "corridor") {
    GammaSidecar sidecar;
    Dataset ds = gen_corridor_dataset(cfg.corridor, cfg.corridor_count, cfg.filter, rng, &sidecar);
    auto [train_ds, test_ds] = split_by_episode(ds, cfg.test_fraction, rng);
    save_dataset((out / "train.jsonl").string(), train_ds);
    save_dataset((out / "test.jsonl").string(), test_ds);
    save_gamma_sidecar((out / "gamma_sidecar.jsonl").string(), sidecar);
    std::cout << "corridor dataset: " << ds.data.size() << " data (" << train_ds.data.size()
              << " train / " << test_ds.data.size() << " test)\n";
    return 0;
  }

  std::vector<TrackTable> episodes;
  Dataset ds = gen_intersection_dataset(cfg.intersection, cfg.intersection_episodes, rng,
                                        &episodes);
  auto [train_ds, test_ds] = split_by_episode(ds, cfg.test_fraction, rng);
  save_dataset((out / "train.jsonl").string(), train_ds);
  save_dataset((out / "test.jsonl").string(), test_ds);

  fs::create_directories(out / "tracks");
  for (std::size_t e = 0; e < episodes.size(); ++e)
    write_tracks_csv((out / "tracks" / ("episode_" + std::to_string(e) + ".csv")).string(),
                     episodes[e]);

  // Separation scan: closest approach between any agent pair at any frame.
  double min_dist = std::numeric_limits<double>::infinity();
  long violations = 0;
  for (const TrackTable& table : episodes) {
    std::map<long, std::vector<Eigen::Vector2d>> by_frame;
    for (const auto& [id, recs] : table)
      for (const TrackRecord& r : recs) by_frame[r.frame_id].emplace_back(r.x, r.y);
    for (const auto& [frame, ps] : by_frame)
      for (std::size_t i = 0; i < ps.size(); ++i)
        for (std::size_t j = i + 1; j < ps.size(); ++j) {
          const double d = (ps[i] - ps[j]).norm();
          min_dist = std::min(min_dist, d);
          violations += d < cfg.filter.barrier.d_min ? 1 : 0;
        }
  }
  std::cout << "intersection dataset: " << episodes.size() << " episodes, " << ds.data.size()
            << " data (" << train_ds.data.size() << " train / " << test_ds.data.size()
            << " test)\n";
  std::cout << "closest approach " << min_dist << " m, d_min violations " << violations << "\n";
  return 0;
}

// ---- train ------------------------------------------------------------------

int cmd_train(const CommonArgs& args, const std::string& data_path,
              const std::string& resume_path) {
  RunConfig cfg = resolve_config(args);
  Dataset train_ds = load_dataset(data_path);
  adopt_scene_dims(cfg, train_ds);
  archive_config(cfg);
  const fs::path out(cfg.out_dir);

  CVAEModel model = make_cvae(cfg.model);
  long epochs_done = 0;
  if (!resume_path.empty()) {
    Checkpoint ck = load_checkpoint(resume_path);
    adopt_params(model.params, ck.params);
    epochs_done = ck.meta.value("epochs_done", 0L);
    std::cout << "resumed from " << resume_path << " at epoch " << epochs_done << "\n";
  } else {
    Rng init_rng = Rng(cfg.seed).split(0);
    init_cvae(model, init_rng);
  }

  TrainConfig tcfg = cfg.train;
  if (epochs_done >= tcfg.epochs)
    throw InvalidInputError("checkpoint already covers the configured epochs");
  // Keep the beta ramp anchored to absolute epoch numbers across resumes.
  BetaSchedule beta = tcfg.resolved_beta();
  beta.start_epoch -= static_cast<double>(epochs_done);
  beta.end_epoch -= static_cast<double>(epochs_done);
  tcfg.beta = beta;
  tcfg.beta_set = true;
  tcfg.epochs = cfg.train.epochs - epochs_done;
  if (tcfg.checkpoint_every > 0) tcfg.checkpoint_dir = out.string();

  Rng train_rng = Rng(cfg.seed).split(1);
  TrainResult result = train(model, train_ds, tcfg, cfg.filter, train_rng);

  const std::string log_path = (out / "train_log.csv").string();
  const bool append = epochs_done > 0 && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path);
  if (!append) log << "epoch,loss,kl,nll,mean_epsilon,beta,skipped,wall_s\n";
  log.precision(17);
  for (const EpochLog& e : result.history)
    log << epochs_done + e.epoch << ',' << e.loss << ',' << e.kl << ',' << e.nll << ','
        << e.mean_epsilon << ',' << e.beta << ',' << e.skipped << ',' << e.wall_s << '\n';

  Checkpoint ck;
  ck.meta["epochs_done"] = cfg.train.epochs;
  ck.meta["final_loss"] = result.history.back().loss;
  ck.meta["config"] = to_json(cfg);
  ck.params = model.params;
  save_checkpoint((out / "checkpoint.json").string(), ck);

  std::cout << "trained " << result.history.size() << " epochs: loss "
            << result.history.front().loss << " -> " << result.history.back().loss << "\n";
  std::cout << "checkpoint: " << (out / "checkpoint.json").string() << "\n";
  return 0;
}

// ---- eval -------------------------------------------------------------------

const std::vector<std::string> kSweepActivations = {"none", "softmax", "clip_zero",
                                                    "clip_neg_beta", "tanh"};

std::unique_ptr<CVAEModel> load_model(const CVAEConfig& mc, const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  auto model = std::make_unique<CVAEModel>(make_cvae(mc));
  adopt_params(model->params, ck.params);
  return model;
}

int cmd_eval(const CommonArgs& args, const std::string& data_path,
             const std::string& checkpoint_path, bool ablation_sweep,
             std::optional<long> samples) {
  RunConfig cfg = resolve_config(args);
  Dataset test_ds = load_dataset(data_path);
  adopt_scene_dims(cfg, test_ds);
  archive_config(cfg, "eval_config.json");
  const fs::path out(cfg.out_dir);

  RolloutConfig rcfg = cfg.eval;
  if (samples) rcfg.n_samples = *samples;
  std::vector<std::uint64_t> seeds;
  for (long i = 0; i < cfg.eval_seeds; ++i) seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));

  std::vector<std::unique_ptr<CVAEModel>> owned;
  std::vector<NamedModel> rows;
  if (ablation_sweep) {
    if (!fs::is_directory(checkpoint_path))
      throw InvalidInputError("--ablation-sweep expects --checkpoint to name a directory of "
                              "per-activation checkpoints");
    for (const std::string& name : kSweepActivations) {
      CVAEConfig mc = cfg.model;
      mc.decoder_output = "gamma";
      mc.activation = activation_from_string(name);
      owned.push_back(load_model(mc, (fs::path(checkpoint_path) / (name + ".json")).string()));
      rows.push_back({name, owned.back().get()});
    }
    CVAEConfig mc = cfg.model;
    mc.decoder_output = "direct_u";
    owned.push_back(load_model(mc, (fs::path(checkpoint_path) / "direct_u.json").string()));
    rows.push_back({"direct_u", owned.back().get()});
  } else {
    owned.push_back(load_model(cfg.model, checkpoint_path));
    const std::string name = cfg.model.decoder_output == "direct_u"
                                 ? "direct_u"
                                 : "resp_" + to_string(cfg.model.activation);
    rows.push_back({name, owned.back().get()});
  }
  rows.push_back({"u_desired", nullptr});

  bool have_futures = false;
  for (const SceneDatum& d : test_ds.data) have_futures |= d.future.size() > 0;
  if (have_futures) {
    std::vector<MetricRow> table =
        compare_baselines(test_ds, rows, cfg.policy, rcfg, cfg.filter, seeds);
    write_metrics_csv((out / "metrics.csv").string(), table);
    std::cout << "model,ade_mean,ade_std,miss_mean,miss_std\n";
    for (const MetricRow& r : table)
      std::cout << r.name << ',' << r.ade_mean << ',' << r.ade_std << ',' << r.miss_mean << ','
                << r.miss_std << '\n';
    std::cout << "metrics: " << (out / "metrics.csv").string() << "\n";
  } else {
    std::cout << "dataset carries no futures; skipping rollout metrics\n";
  }

  // Figure exports for the two-agent corridor: gamma density over the gap
  // axis and the u_x cross-section for agent 0.
  const bool corridor = test_ds.metadata.value("generator", "") == "corridor";
  if (!ablation_sweep && corridor && owned.front()->cfg.decoder_output == "gamma") {
    const CVAEModel& model = *owned.front();
    Rng fig_rng = Rng(cfg.seed).split(2);

    const long n_slices = 5;
    Eigen::VectorXd axis(n_slices);
    std::vector<SceneSequence> scenes;
    for (long i = 0; i < n_slices; ++i) {
      const double lo = cfg.corridor.x_gap_min, hi = cfg.corridor.x_gap_max;
      const double gap = lo + (hi - lo) * (static_cast<double>(i) + 0.5) / n_slices;
      CorridorConfig cc = cfg.corridor;
      cc.x_gap_min = cc.x_gap_max = gap;
      Dataset one = gen_corridor_dataset(cc, 1, cfg.filter, fig_rng);
      scenes.push_back(one.data.front().seq);
      axis[i] = gap;
    }
    DensityGrid grid =
        gamma_density_grid(model, scenes, axis, "x_gap", /*agent=*/0, cfg.density_bins,
                           cfg.density_samples, cfg.filter, fig_rng, -0.25, 1.25);
    std::ofstream dj((out / "density.json").string());
    dj << to_json(grid).dump(2) << '\n';

    CrossSection cs = control_cross_section(
        test_ds, &model, cfg.filter, /*agent=*/0, /*component=*/0,
        [](const SceneDatum& d) {
          return d.seq.current_states[1].position.x() - d.seq.current_states[0].position.x();
        },
        "x_gap", /*samples_per_datum=*/4, fig_rng);
    std::ofstream cj((out / "cross_section.json").string());
    cj << to_json(cs).dump(2) << '\n';
    std::cout << "figure exports: density.json, cross_section.json\n";
  }
  return 0;
}

// ---- filter probe -----------------------------------------------------------

Eigen::VectorXd parse_gamma_list(const std::string& text, long n) {
  if (text.empty()) return Eigen::VectorXd::Constant(n, 0.5);
  std::vector<double> vals;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      vals.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw InvalidInputError("--gamma: cannot parse '" + item + "'");
    }
  }
  if (static_cast<long>(vals.size()) != n)
    throw InvalidInputError("--gamma: expected " + std::to_string(n) + " values");
  return Eigen::Map<Eigen::VectorXd>(vals.data(), n);
}

int cmd_filter(const CommonArgs& args, const std::string& scene_path, const std::string& gamma_str,
               bool gamma_sweep) {
  RunConfig cfg = resolve_config(args);
  TrackTable table = load_tracks_csv(scene_path);
  if (table.empty()) throw InvalidInputError("scene file has no tracks");

  std::vector<AgentPhysState> states;
  std::vector<double> headings;
  std::vector<long> ids;
  for (const auto& [id, recs] : table) {
    const TrackRecord& r = recs.back();
    AgentPhysState st;
    st.position = {r.x, r.y};
    st.velocity = {r.vx, r.vy};
    states.push_back(st);
    headings.push_back(r.psi_rad);
    ids.push_back(id);
  }
  const long n = static_cast<long>(states.size());

  Eigen::MatrixXd u_des = cfg.policy.eval(states, headings);
  Eigen::VectorXd u_des_flat(2 * n);
  for (long a = 0; a < n; ++a) u_des_flat.segment<2>(2 * a) = u_des.row(a).transpose();

  std::cout << "agents: " << n << ", constraint rows: " << n * (n - 1) / 2 << "\n";

  auto run_once = [&](const Eigen::VectorXd& g) {
    ResponsibilityVector rv;
    rv.gamma = g;
    return project(u_des_flat, states, rv, cfg.filter);
  };

  nlohmann::json out_doc;
  if (gamma_sweep) {
    if (n != 2) throw InvalidInputError("--gamma-sweep needs a two-agent scene");
    std::cout << "gamma1,dev_agent0,dev_agent1,epsilon\n";
    nlohmann::json sweep = nlohmann::json::array();
    for (int k = 1; k <= 19; ++k) {
      const double g1 = 0.05 * k;
      FilterResult fr = run_once(Eigen::Vector2d(g1, 1.0 - g1));
      const double d0 = (fr.u.segment<2>(0) - u_des_flat.segment<2>(0)).norm();
      const double d1 = (fr.u.segment<2>(2) - u_des_flat.segment<2>(2)).norm();
      std::cout << g1 << ',' << d0 << ',' << d1 << ',' << fr.epsilon << '\n';
      sweep.push_back({{"gamma1", g1}, {"dev0", d0}, {"dev1", d1}, {"epsilon", fr.epsilon}});
    }
    out_doc["sweep"] = sweep;
  } else {
    const Eigen::VectorXd g = parse_gamma_list(gamma_str, n);
    FilterResult fr = run_once(g);
    out_doc["epsilon"] = fr.epsilon;
    out_doc["gamma"] = std::vector<double>(g.data(), g.data() + g.size());
    nlohmann::json agents = nlohmann::json::array();
    for (long a = 0; a < n; ++a) {
      std::cout << "agent " << ids[a] << ": u = [" << fr.u(2 * a) << ", " << fr.u(2 * a + 1)
                << "], u_des = [" << u_des_flat(2 * a) << ", " << u_des_flat(2 * a + 1) << "]\n";
      agents.push_back({{"id", ids[a]},
                        {"u", {fr.u(2 * a), fr.u(2 * a + 1)}},
                        {"u_des", {u_des_flat(2 * a), u_des_flat(2 * a + 1)}}});
    }
    out_doc["agents"] = agents;
    std::cout << "epsilon = " << fr.epsilon << ", active pairs:";
    for (const auto& [i, j] : fr.active_pairs) std::cout << " (" << i << "," << j << ")";
    std::cout << "\n";
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& [i, j] : fr.active_pairs) pairs.push_back({i, j});
    out_doc["active_pairs"] = pairs;
  }

  if (!args.out.empty()) {
    fs::create_directories(cfg.out_dir);
    const std::string path = (fs::path(cfg.out_dir) / "filter.json").string();
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << out_doc.dump(2) << '\n';
    std::cout << "wrote " << path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"responsibility-allocation CBF filter: data, training, evaluation"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string data_path, checkpoint_path, scene_path, gamma_str;
  bool ablation_sweep = false, gamma_sweep = false;
  std::optional<long> samples;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "run configuration JSON file");
    sub->add_option("--out", common.out, "output directory (overrides config)");
    sub->add_option("--seed", common.seed, "seed override");
  };

  CLI::App* generate = app.add_subcommand("generate", "generate a synthetic dataset");
  add_common(generate);

  CLI::App* train_cmd = app.add_subcommand("train", "train a model on a dataset archive");
  add_common(train_cmd);
  train_cmd->add_option("--data", data_path, "training dataset (train.jsonl)")->required();
  train_cmd->add_option("--checkpoint", checkpoint_path, "resume from this checkpoint");

  CLI::App* eval_cmd = app.add_subcommand("eval", "rollout metrics and figure exports");
  add_common(eval_cmd);
  eval_cmd->add_option("--data", data_path, "test dataset (test.jsonl)")->required();
  eval_cmd->add_option("--checkpoint", checkpoint_path,
                       "checkpoint file (or directory with --ablation-sweep)")
      ->required();
  eval_cmd->add_flag("--ablation-sweep", ablation_sweep,
                     "evaluate every activation plus both baselines");
  eval_cmd->add_option("--samples", samples, "rollout samples per scene");

  CLI::App* filter_cmd = app.add_subcommand("filter", "run the safety filter on a scene");
  add_common(filter_cmd);
  filter_cmd->add_option("--scene", scene_path, "track CSV; last frame is the current state")
      ->required();
  filter_cmd->add_option("--gamma", gamma_str, "comma-separated responsibilities (default 0.5)");
  filter_cmd->add_flag("--gamma-sweep", gamma_sweep, "sweep gamma over a two-agent scene");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (generate->parsed()) return cmd_generate(common);
    if (train_cmd->parsed()) return cmd_train(common, data_path, checkpoint_path);
    if (eval_cmd->parsed())
      return cmd_eval(common, data_path, checkpoint_path, ablation_sweep, samples);
    if (filter_cmd->parsed()) return cmd_filter(common, scene_path, gamma_str, gamma_sweep);
  } catch (const InvalidInputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ConvexityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return kExitValidation;
}
