#include "momug/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "momug/config.hpp"
#include "momug/error.hpp"

namespace momug {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

namespace {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <typename T>
  T pod() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    require(static_cast<std::size_t>(in_.gcount()) == n, ErrorCode::parse_error,
            "checkpoint " + path_ + " is truncated");
  }
  // Guards allocations against corrupt length fields.
  std::uint64_t bounded(std::uint64_t n, std::uint64_t limit, const char* what) {
    require(n <= limit, ErrorCode::parse_error, "checkpoint " + path_ + ": implausible " + what);
    return n;
  }

 private:
  std::istream& in_;
  std::string path_;
};

constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

json vocab_json(const Vocabulary& v) { return v.words(); }

Vocabulary vocab_from(const json& j) {
  require(j.is_array(), ErrorCode::parse_error, "checkpoint vocabulary must be an array");
  return Vocabulary(j.get<std::vector<std::string>>());
}

// Copies stored tensors into a skeleton by name, checking names and shapes.
template <typename Real>
void fill(std::vector<NamedTensor<Real>> slots, const CheckpointContainer& c, std::set<std::string>& used) {
  std::map<std::string, const Mat<float>*> by_name;
  for (const auto& [name, m] : c.tensors) by_name[name] = &m;
  for (auto& slot : slots) {
    const auto it = by_name.find(slot.name);
    require(it != by_name.end(), ErrorCode::state_mismatch, "checkpoint lacks tensor " + slot.name);
    const Mat<float>& m = *it->second;
    require(m.rows() == slot.tensor->rows() && m.cols() == slot.tensor->cols(), ErrorCode::shape_mismatch,
            "checkpoint tensor " + slot.name + " has an unexpected shape");
    *slot.tensor = m.template cast<Real>();
    used.insert(slot.name);
  }
}

void reject_extra(const CheckpointContainer& c, const std::set<std::string>& used) {
  for (const auto& [name, m] : c.tensors)
    require(used.count(name) == 1, ErrorCode::state_mismatch, "checkpoint has unexpected tensor " + name);
}

template <typename Real>
void add_tensors(CheckpointContainer& c, const std::vector<NamedTensor<Real>>& ts) {
  for (const auto& t : ts) c.tensors.emplace_back(t.name, t.tensor->template cast<float>());
}

}  // namespace

void write_container(const CheckpointContainer& c, const std::string& path) {
  // Write to a sibling file first so a failure never leaves a half checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::io_error, "cannot open " + tmp + " for writing");
    Writer w(out);
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.pod<std::uint32_t>(kCheckpointVersion);
    const std::string text = c.header.dump();
    w.pod<std::uint64_t>(text.size());
    w.bytes(text.data(), text.size());

    w.pod<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, m] : c.tensors) {
      w.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
      w.bytes(name.data(), name.size());
      w.pod<std::uint32_t>(2);
      w.pod<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
      w.pod<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
      w.bytes(m.data(), sizeof(float) * static_cast<std::size_t>(m.size()));
    }

    w.pod<std::uint32_t>(static_cast<std::uint32_t>(c.betas.size()));
    w.bytes(c.betas.data(), sizeof(double) * c.betas.size());

    const auto d = static_cast<std::uint32_t>(c.stats.mean.size());
    require(c.stats.std.size() == d, ErrorCode::invalid_argument, "stats mean/std lengths differ");
    w.pod<std::uint32_t>(d);
    w.bytes(c.stats.mean.data(), sizeof(double) * d);
    w.bytes(c.stats.std.data(), sizeof(double) * d);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(c.stats.length_histogram.size()));
    for (const auto& [len, count] : c.stats.length_histogram) {
      w.pod<std::int32_t>(len);
      w.pod<std::int32_t>(count);
    }
    out.flush();
    require(out.good(), ErrorCode::io_error, "failed writing " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorCode::io_error, "cannot move checkpoint into place at " + path + ": " + ec.message());
}

CheckpointContainer read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::io_error, "cannot open checkpoint " + path);
  Reader r(in, path);
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic);
  require(in.gcount() == sizeof magic && std::memcmp(magic, kCheckpointMagic, sizeof magic) == 0,
          ErrorCode::version_mismatch, path + " is not a MOMUG1 checkpoint");
  const auto version = r.pod<std::uint32_t>();
  require(version == kCheckpointVersion, ErrorCode::version_mismatch,
          "checkpoint " + path + " has format version " + std::to_string(version) + ", this build reads " +
              std::to_string(kCheckpointVersion));

  CheckpointContainer c;
  const auto n = r.bounded(r.pod<std::uint64_t>(), std::uint64_t{1} << 30, "header length");
  std::string text(n, '\0');
  r.bytes(text.data(), n);
  try {
    c.header = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::parse_error, "checkpoint " + path + " header: " + e.what());
  }

  const auto count = r.bounded(r.pod<std::uint32_t>(), 1u << 20, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.bounded(r.pod<std::uint32_t>(), 4096, "tensor name length");
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    const auto ndim = r.pod<std::uint32_t>();
    require(ndim == 2, ErrorCode::parse_error, "checkpoint tensor " + name + " is not 2-d");
    const auto rows = r.bounded(r.pod<std::uint64_t>(), kMaxElements, "tensor rows");
    const auto cols = r.bounded(r.pod<std::uint64_t>(), kMaxElements, "tensor cols");
    r.bounded(rows * cols, kMaxElements, "tensor size");
    Mat<float> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    r.bytes(m.data(), sizeof(float) * rows * cols);
    c.tensors.emplace_back(std::move(name), std::move(m));
  }

  c.betas.resize(r.bounded(r.pod<std::uint32_t>(), 1u << 20, "schedule length"));
  r.bytes(c.betas.data(), sizeof(double) * c.betas.size());

  const auto d = r.bounded(r.pod<std::uint32_t>(), 1u << 16, "stats width");
  c.stats.mean.resize(d);
  c.stats.std.resize(d);
  r.bytes(c.stats.mean.data(), sizeof(double) * d);
  r.bytes(c.stats.std.data(), sizeof(double) * d);
  const auto bins = r.bounded(r.pod<std::uint32_t>(), 1u << 20, "histogram size");
  for (std::uint32_t i = 0; i < bins; ++i) {
    const auto len = r.pod<std::int32_t>();
    c.stats.length_histogram[len] = r.pod<std::int32_t>();
  }
  require(in.peek() == std::char_traits<char>::eof(), ErrorCode::parse_error,
          "checkpoint " + path + " has trailing bytes");
  return c;
}

void save_model_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
  CheckpointContainer c;
  c.header = {{"kind", "model"},
              {"tag", ckpt.tag},
              {"model", to_json(ckpt.state.config)},
              {"vocab", vocab_json(ckpt.vocab)},
              {"lineage", ckpt.lineage.is_null() ? json::object() : ckpt.lineage}};
  auto state = ckpt.state;
  add_tensors(c, named_tensors(state.base));
  add_tensors(c, named_tensors(state.adapters));
  c.betas.assign(ckpt.schedule.beta.begin() + 1, ckpt.schedule.beta.end());
  c.stats = ckpt.stats;
  write_container(c, path);
}

ModelCheckpoint load_model_checkpoint(const std::string& path) {
  const CheckpointContainer c = read_container(path);
  require(c.header.value("kind", "") == "model", ErrorCode::state_mismatch, path + " is not a model checkpoint");
  ModelCheckpoint ckpt;
  try {
    ckpt.tag = c.header.at("tag").get<std::string>();
    ckpt.vocab = vocab_from(c.header.at("vocab"));
    ckpt.lineage = c.header.value("lineage", json::object());
  } catch (const json::exception& e) {
    fail(ErrorCode::parse_error, "checkpoint " + path + " header: " + e.what());
  }
  const ModelConfig config = model_config_from_json(c.header.at("model"));
  require(config.vocab_size == ckpt.vocab.size(), ErrorCode::state_mismatch,
          "checkpoint vocabulary size disagrees with its model config");
  // Skeleton with the right shapes; every value is overwritten below.
  ckpt.state = init_state<float>(config, 0);
  std::set<std::string> used;
  fill(named_tensors(ckpt.state.base), c, used);
  fill(named_tensors(ckpt.state.adapters), c, used);
  reject_extra(c, used);
  ckpt.schedule = schedule_from_betas(c.betas);
  require(ckpt.schedule.steps == config.diffusion_steps, ErrorCode::state_mismatch,
          "checkpoint schedule length disagrees with diffusion_steps");
  ckpt.stats = c.stats;
  return ckpt;
}

void save_embedder_checkpoint(const EmbedderCheckpoint& ckpt, const std::string& path) {
  const auto& e = ckpt.embedder.config;
  CheckpointContainer c;
  c.header = {{"kind", "embedder"},
              {"embedder",
               {{"vocab_size", e.vocab_size},
                {"d_motion", e.d_motion},
                {"d_emb", e.d_emb},
                {"d_text", e.d_text},
                {"hidden", e.hidden},
                {"kernel", e.kernel}}},
              {"vocab", vocab_json(ckpt.vocab)},
              {"lineage", ckpt.lineage.is_null() ? json::object() : ckpt.lineage}};
  auto copy = ckpt.embedder;
  add_tensors(c, named_tensors(copy));
  c.stats = ckpt.stats;
  write_container(c, path);
}

EmbedderCheckpoint load_embedder_checkpoint(const std::string& path) {
  const CheckpointContainer c = read_container(path);
  require(c.header.value("kind", "") == "embedder", ErrorCode::state_mismatch,
          path + " is not an embedder checkpoint");
  EmbedderCheckpoint ckpt;
  EmbedderConfig config;
  try {
    const json& j = c.header.at("embedder");
    config.vocab_size = j.at("vocab_size").get<int>();
    config.d_motion = j.at("d_motion").get<int>();
    config.d_emb = j.at("d_emb").get<int>();
    config.d_text = j.at("d_text").get<int>();
    config.hidden = j.at("hidden").get<int>();
    config.kernel = j.at("kernel").get<int>();
    ckpt.vocab = vocab_from(c.header.at("vocab"));
    ckpt.lineage = c.header.value("lineage", json::object());
  } catch (const json::exception& e) {
    fail(ErrorCode::parse_error, "checkpoint " + path + " header: " + e.what());
  }
  ckpt.embedder = init_embedder(config, 0);
  std::set<std::string> used;
  fill(named_tensors(ckpt.embedder), c, used);
  reject_extra(c, used);
  ckpt.stats = c.stats;
  return ckpt;
}

}  // namespace momug
