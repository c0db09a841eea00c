#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "respalloc/cvae.hpp"
#include "respalloc/datagen.hpp"
#include "respalloc/evaluation.hpp"
#include "respalloc/training.hpp"

namespace resp {

// One document drives a whole run: data generation, model, training, filter,
// and evaluation. Parsing is strict — unknown keys raise ParseError so typos
// cannot silently fall back to defaults.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  std::string dataset = "corridor";  // corridor | intersection
  long corridor_count = 10000;
  long intersection_episodes = 60;
  double test_fraction = 0.2;
  CorridorConfig corridor;
  IntersectionConfig intersection;
  DesiredPolicy policy;

  CVAEConfig model;
  TrainConfig train;
  FilterConfig filter;

  RolloutConfig eval;
  long eval_seeds = 3;
  long density_bins = 40;
  long density_samples = 1000;

  bool valid() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json to_json(const RunConfig& c);

}  // namespace resp
