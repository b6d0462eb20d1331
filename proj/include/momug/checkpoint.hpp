#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "momug/corpus.hpp"
#include "momug/embedder.hpp"
#include "momug/model.hpp"
#include "momug/schedule.hpp"

namespace momug {

// Container layout, all integers little-endian:
//   "MOMUG1"                       6 bytes
//   u32 version
//   u64 n, n bytes of JSON         config, tag, vocabulary, seed lineage
//   u32 tensor count, per tensor:  u32 name_len, name, u32 ndim, u64 dims[ndim], f32 values (row-major)
//   u32 T, f64 betas[T]            T = 0 when no schedule is stored
//   u32 d, f64 mean[d], f64 std[d], u32 bins, per bin i32 length, i32 count
inline constexpr char kCheckpointMagic[6] = {'M', 'O', 'M', 'U', 'G', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointContainer {
  nlohmann::json header;
  std::vector<std::pair<std::string, Mat<float>>> tensors;
  std::vector<double> betas;
  CorpusStats stats;
};

void write_container(const CheckpointContainer& c, const std::string& path);
// Refuses unknown magic or version with version_mismatch.
CheckpointContainer read_container(const std::string& path);

struct ModelCheckpoint {
  std::string tag;  // "base" or "finetuned"
  ModelState<float> state;
  NoiseSchedule schedule;
  Vocabulary vocab;
  CorpusStats stats;
  nlohmann::json lineage;  // seeds and config that produced the weights
};

void save_model_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
ModelCheckpoint load_model_checkpoint(const std::string& path);

struct EmbedderCheckpoint {
  JointEmbedder embedder;
  Vocabulary vocab;
  CorpusStats stats;
  nlohmann::json lineage;
};

// Embedder weights are stored at 32 bits like every other tensor.
void save_embedder_checkpoint(const EmbedderCheckpoint& ckpt, const std::string& path);
EmbedderCheckpoint load_embedder_checkpoint(const std::string& path);

}  // namespace momug
