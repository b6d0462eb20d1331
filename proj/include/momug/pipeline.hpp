#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "momug/config.hpp"
#include "momug/corpus.hpp"
#include "momug/metrics.hpp"

namespace momug {

// One function per CLI subcommand. Each validates every input before the
// first file is written and returns a JSON summary for stdout.

nlohmann::json to_json(const MetricReport& r);

// Records of generated or edited motions: corpus pair records with type "motion".
struct MotionRecord {
  std::string caption;
  Mat<double> frames;  // raw (denormalized) features
};
void write_motion_outputs(const std::vector<MotionRecord>& motions, const std::string& jsonl_path,
                          const nlohmann::json& extra = nlohmann::json::object());
// Reads "motion" or corpus "pair" records; a "stats" record is skipped.
std::vector<MotionRecord> read_motion_records(const std::string& path);
// foo.jsonl -> foo.csv, anything else gets ".csv" appended.
std::string csv_path_for(const std::string& jsonl_path);
void write_motion_csv(const Mat<double>& frames, const std::string& path);

struct GenCorpusOptions {
  std::uint64_t seed = 0;
  int count = 2000;
  int d_motion = 8;
  std::string out;
};
nlohmann::json run_gen_corpus(const GenCorpusOptions& o);

struct PretrainOptions {
  std::string corpus;
  std::string out;
  RunConfig config;
  bool quiet = false;
};
nlohmann::json run_pretrain_base(const PretrainOptions& o);

struct TrainOptions {
  std::string corpus;
  std::string base;
  std::string out_dir;
  RunConfig config;
  bool quiet = false;
};
// Writes out_dir/train_log.jsonl, periodic out_dir/step_NNNNNN.ckpt and out_dir/final.ckpt.
nlohmann::json run_train(const TrainOptions& o);

struct SampleOptions {
  std::string ckpt;
  std::string caption;
  std::string out;  // JSONL; the CSV lands next to it
  RunConfig config;  // sample section
};
nlohmann::json run_sample(const SampleOptions& o);

struct CaptionOptions {
  std::string ckpt;
  std::string motion_file;
  std::string out;
  RunConfig config;
};
nlohmann::json run_caption(const CaptionOptions& o);

struct InpaintOptions {
  std::string ckpt;
  std::string motion_file;
  int index = 0;  // which record of motion_file
  std::string mask;
  std::string caption;
  std::string out;
  RunConfig config;
};
nlohmann::json run_inpaint(const InpaintOptions& o);

struct TrainEmbedderOptions {
  std::string corpus;
  std::string out;
  RunConfig config;
  bool quiet = false;
};
nlohmann::json run_train_embedder(const TrainEmbedderOptions& o);

struct EvalOptions {
  std::string ckpt;
  std::string embedder;
  std::string corpus;
  std::string split = "test";
  std::string out;
  RunConfig config;
};
// The report holds only deterministic content (no paths, no timings).
nlohmann::json run_eval(const EvalOptions& o);

}  // namespace momug
