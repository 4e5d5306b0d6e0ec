#pragma once

// Operational layer: configuration, ingestion, training, spread evaluation,
// latency benchmarking and the /v1 HTTP API.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "uisearch/encoder.hpp"
#include "uisearch/index.hpp"
#include "uisearch/learning.hpp"
#include "uisearch/query.hpp"
#include "uisearch/ui_graph.hpp"

namespace httplib {
class Server;
}

namespace uisearch::service {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AppConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path model_path = "data/model.ckpt";
  std::filesystem::path index_path = "data/index.bin";
  index::EmbedderStrategy embedder = index::EmbedderStrategy::BuiltinHashed;
  std::uint64_t embedder_seed = 17;
  index::Metric structural_metric = index::Metric::Cosine;
  query::PlannerConfig planner;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string log_level = "info";
  std::size_t cache_size = 256;  // 0 disables the result cache
  std::size_t neighbors = 5;
  learn::TrainConfig train;
  nn::EncoderConfig encoder;

  // Relative paths are resolved against `base`. Throws ConfigError.
  static AppConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
  static AppConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void validate() const;
  index::SemEmbedder make_embedder() const { return index::SemEmbedder(embedder, embedder_seed); }
};

// ---- record pipeline ----

struct StageTimes {
  double graph_ms = 0;
  double encode_ms = 0;
  double index_ms = 0;
};

// Manifest -> graph -> structural embedding, semantic embedding, counts,
// intent probabilities, optional visual vector.
index::ScreenRecord make_record(const graph::DetectionManifest& m, const nn::EncoderModel& model,
                                const index::SemEmbedder& embedder, StageTimes* times = nullptr);

index::IndexOptions index_options(const nn::EncoderModel& model, index::Metric metric = index::Metric::Cosine);

// ---- ingest ----

struct SkippedFile {
  std::string file;
  std::string reason;
};

struct IngestReport {
  std::size_t screens_seen = 0;
  std::size_t screens_indexed = 0;
  std::vector<SkippedFile> skipped;
  double wall_ms = 0;
  StageTimes stages;
};

nlohmann::json to_json(const IngestReport& r);

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Every *.json file of `dir` in name order. Failures are recorded and
// skipped; the index is sealed at the end.
IngestReport ingest_dir(const std::filesystem::path& dir, const nn::EncoderModel& model,
                        const index::SemEmbedder& embedder, index::HybridIndex& idx);
// In-memory manifests, same contract; skipped entries are labelled by id.
IngestReport ingest_manifests(const std::vector<graph::DetectionManifest>& manifests,
                              const nn::EncoderModel& model, const index::SemEmbedder& embedder,
                              index::HybridIndex& idx);

// Loads the checkpoint, extends the index at config.index_path (or starts
// a new one), rebuilds the IVF and saves.
IngestReport cmd_ingest(const std::filesystem::path& dir, const AppConfig& cfg);

// ---- train ----

struct TrainRunOptions {
  bool resume = false;
  std::filesystem::path log_path;  // default: model_path + ".log.jsonl"
};

// Reads manifests from corpus_dir, trains, writes the checkpoint (with
// optimizer state) and one JSON line per epoch.
learn::TrainResult cmd_train(const std::filesystem::path& corpus_dir, const AppConfig& cfg,
                             const TrainRunOptions& opts = {});

std::vector<learn::TrainingExample> training_examples(const std::vector<graph::DetectionManifest>& ms,
                                                      const nn::EncoderModel& model);

// ---- spread ----

learn::SpreadReport index_spread(const index::HybridIndex& idx);
std::string spread_csv(const learn::SpreadReport& r);
std::string spread_svg(const learn::SpreadReport& r);

// Writes spread.json, spread.csv and spread.svg into out_dir. Throws
// std::invalid_argument for fewer than two screens.
learn::SpreadReport cmd_eval_spread(const index::HybridIndex& idx, const std::filesystem::path& out_dir);

// ---- bench ----

struct SuiteEntry {
  std::string kind;
  std::string text;
  bool approximate = false;  // structural stage through the IVF index
};

class SuiteError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// JSON lines {"kind": ..., "query": ..., "approximate": bool?}; blank lines and lines starting
// with '#' are ignored.
std::vector<SuiteEntry> parse_suite(std::string_view text);
std::vector<SuiteEntry> load_suite(const std::filesystem::path& path);

struct Percentiles {
  double p50 = 0, p90 = 0, p95 = 0, p99 = 0;
};

// Nearest-rank percentiles.
Percentiles percentiles(std::vector<double> samples);

struct KindReport {
  std::string kind;
  std::size_t queries = 0;
  Percentiles cold;
  Percentiles warm;
};

struct BenchReport {
  std::size_t corpus_size = 0;
  std::size_t repeats = 0;
  std::vector<KindReport> kinds;  // in first-appearance order
  // True when every repeat returned the same ranked ids and scores.
  bool deterministic = true;

  const KindReport* find(std::string_view kind) const;
};

nlohmann::json to_json(const BenchReport& r);

struct BenchOptions {
  std::size_t repeats = 5;  // warm runs per query after the cold one
  query::PlannerConfig planner;
};

// Cold: the first execution of each query. Warm: the following repeats.
BenchReport cmd_bench(const index::HybridIndex& idx, const std::vector<SuiteEntry>& suite,
                      const BenchOptions& opts = {}, const nn::EncoderModel* model = nullptr,
                      const index::SemEmbedder& embedder = index::SemEmbedder{});

// ---- HTTP ----

// LRU map from canonical query text to a serialized result body.
class ResultCache {
 public:
  explicit ResultCache(std::size_t capacity) : capacity_(capacity) {}

  std::optional<std::string> get(const std::string& key);
  void put(const std::string& key, std::string value);
  void clear();
  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  std::uint64_t hits() const { return hits_; }
  std::uint64_t lookups() const { return lookups_; }
  double hit_rate() const { return lookups_ ? static_cast<double>(hits_) / static_cast<double>(lookups_) : 0.0; }

 private:
  using Entry = std::pair<std::string, std::string>;
  std::size_t capacity_;
  std::list<Entry> order_;
  std::unordered_map<std::string, std::list<Entry>::iterator> map_;
  std::uint64_t hits_ = 0;
  std::uint64_t lookups_ = 0;
  mutable std::mutex mu_;
};

struct Snapshot {
  index::HybridIndex index;
  std::optional<learn::SpreadReport> spread;
  std::uint64_t version = 0;
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

// Request handlers independent of the transport. Readers work on the
// snapshot current at entry; mutations build a copy and swap it in.
class Service {
 public:
  Service(std::shared_ptr<const nn::EncoderModel> model, index::HybridIndex idx, AppConfig cfg);

  std::shared_ptr<const Snapshot> snapshot() const;
  void replace_index(index::HybridIndex idx);

  Response query(const nlohmann::json& request);
  Response screen(const std::string& id) const;
  Response add_screen(const std::string& body);
  Response stats() const;
  Response healthz() const;

  const ResultCache& cache() const { return cache_; }
  const AppConfig& config() const { return cfg_; }

  // Registers the /v1 routes.
  void mount(httplib::Server& server);

 private:
  Response query_text(const std::string& text, std::optional<query::Strategy> forced);
  void install(std::shared_ptr<Snapshot> s);

  std::shared_ptr<const nn::EncoderModel> model_;
  AppConfig cfg_;
  index::SemEmbedder embedder_;
  mutable std::mutex snap_mu_;
  std::shared_ptr<const Snapshot> snap_;
  std::mutex mutate_mu_;
  std::atomic<bool> rebuilding_{false};
  ResultCache cache_;
};

// Loads model and index from the config and serves until interrupted.
int cmd_serve(const AppConfig& cfg);

}  // namespace uisearch::service
