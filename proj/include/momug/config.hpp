#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "momug/embedder.hpp"
#include "momug/metrics.hpp"
#include "momug/model.hpp"
#include "momug/sampling.hpp"
#include "momug/training.hpp"

namespace momug {

// Everything a pipeline run reads. Subsystem seeds are split from `seed`.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig pretrain;
  TrainConfig train;
  SampleConfig sample;
  EmbedderConfig embedder;
  EmbedderTrainConfig embedder_train;
  EvalConfig eval;

  void validate() const;
};

// Published values for the unified stage; desk-scale values for base pretraining.
RunConfig default_run_config();

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const SampleConfig& c);
nlohmann::json to_json(const RunConfig& c);

ModelConfig model_config_from_json(const nlohmann::json& j);

// Overlays `j` on `base`. Every violation (unknown key, wrong type) is
// collected and reported together as "path: problem" lines in one config_error.
RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base = default_run_config());
RunConfig load_run_config(const std::string& path);

DecodeKind parse_decode_kind(const std::string& name);
std::string decode_kind_name(DecodeKind kind);

}  // namespace momug
