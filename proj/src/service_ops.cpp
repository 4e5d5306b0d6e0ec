#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "uisearch/service.hpp"
#include "uisearch/synthgen.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace uisearch::service {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::vector<float> as_floats(const nn::Vec& v) {
  std::vector<float> out(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(v[i]);
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<fs::path> manifest_files(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IngestError("not a readable directory: " + dir.string());
  std::vector<fs::path> files;
  for (fs::directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec))
    if (it->is_regular_file() && it->path().extension() == ".json") files.push_back(it->path());
  if (ec) throw IngestError("cannot list " + dir.string() + ": " + ec.message());
  std::sort(files.begin(), files.end());
  return files;
}

const std::set<std::string> kLogLevels = {"trace", "debug", "info", "warn", "error", "critical", "off"};

std::string_view embedder_name(index::EmbedderStrategy s) {
  return s == index::EmbedderStrategy::BuiltinHashed ? "builtin" : "external";
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, _] : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* x) { return k == x; }))
      throw ConfigError("unknown key '" + k + "' in " + where);
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

}  // namespace

// ---- config ----

AppConfig AppConfig::from_json(const json& j, const fs::path& base) {
  AppConfig c;
  reject_unknown(j,
                 {"data_dir", "model_path", "index_path", "embedder", "structural_metric", "planner", "server",
                  "log_level", "train", "encoder"},
                 "config");
  auto path = [&](const char* key, fs::path& out) {
    std::string s;
    read(j, key, s, "config");
    if (!s.empty()) out = s;
    if (out.is_relative() && !base.empty()) out = base / out;
  };
  path("data_dir", c.data_dir);
  path("model_path", c.model_path);
  path("index_path", c.index_path);
  if (j.contains("embedder")) {
    const auto& e = j["embedder"];
    reject_unknown(e, {"strategy", "seed"}, "embedder");
    std::string s = "builtin";
    read(e, "strategy", s, "embedder");
    if (s == "builtin") c.embedder = index::EmbedderStrategy::BuiltinHashed;
    else if (s == "external") c.embedder = index::EmbedderStrategy::ExternalPrecomputed;
    else throw ConfigError("embedder.strategy must be 'builtin' or 'external', got '" + s + "'");
    read(e, "seed", c.embedder_seed, "embedder");
  }
  if (j.contains("structural_metric")) {
    std::string s;
    read(j, "structural_metric", s, "config");
    auto m = index::parse_metric(s);
    if (!m) throw ConfigError("unknown structural_metric '" + s + "'");
    c.structural_metric = *m;
  }
  if (j.contains("planner")) {
    const auto& p = j["planner"];
    reject_unknown(p, {"metadata_first_threshold", "max_overfetch", "approximate", "nprobe"}, "planner");
    read(p, "metadata_first_threshold", c.planner.metadata_first_threshold, "planner");
    read(p, "max_overfetch", c.planner.max_overfetch, "planner");
    read(p, "approximate", c.planner.approximate, "planner");
    read(p, "nprobe", c.planner.nprobe, "planner");
  }
  if (j.contains("server")) {
    const auto& s = j["server"];
    reject_unknown(s, {"host", "port", "cache_size", "neighbors"}, "server");
    read(s, "host", c.host, "server");
    read(s, "port", c.port, "server");
    read(s, "cache_size", c.cache_size, "server");
    read(s, "neighbors", c.neighbors, "server");
  }
  read(j, "log_level", c.log_level, "config");
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t,
                   {"batch", "epochs", "lr", "weight_decay", "tau", "lambda_intent", "lambda_recon", "pos_start",
                    "pos_end", "neg_start", "neg_end", "seed"},
                   "train");
    read(t, "batch", c.train.batch, "train");
    read(t, "epochs", c.train.epochs, "train");
    read(t, "lr", c.train.lr, "train");
    read(t, "weight_decay", c.train.weight_decay, "train");
    read(t, "tau", c.train.loss.tau, "train");
    read(t, "lambda_intent", c.train.loss.lambda_intent, "train");
    read(t, "lambda_recon", c.train.loss.lambda_recon, "train");
    read(t, "pos_start", c.train.pos_start, "train");
    read(t, "pos_end", c.train.pos_end, "train");
    read(t, "neg_start", c.train.neg_start, "train");
    read(t, "neg_end", c.train.neg_end, "train");
    read(t, "seed", c.train.seed, "train");
  }
  if (j.contains("encoder")) {
    const auto& e = j["encoder"];
    reject_unknown(e, {"hidden", "heads", "gcn_out", "dropout", "seed"}, "encoder");
    read(e, "hidden", c.encoder.hidden, "encoder");
    read(e, "heads", c.encoder.heads, "encoder");
    read(e, "gcn_out", c.encoder.gcn_out, "encoder");
    read(e, "dropout", c.encoder.dropout, "encoder");
    read(e, "seed", c.encoder.seed, "encoder");
    c.encoder.proj_in = c.encoder.gcn_out;
  }
  c.validate();
  return c;
}

AppConfig AppConfig::load(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

json AppConfig::to_json() const {
  return {
      {"data_dir", data_dir.string()},
      {"model_path", model_path.string()},
      {"index_path", index_path.string()},
      {"embedder", {{"strategy", embedder_name(embedder)}, {"seed", embedder_seed}}},
      {"structural_metric", index::metric_name(structural_metric)},
      {"planner",
       {{"metadata_first_threshold", planner.metadata_first_threshold},
        {"max_overfetch", planner.max_overfetch},
        {"approximate", planner.approximate},
        {"nprobe", planner.nprobe}}},
      {"server", {{"host", host}, {"port", port}, {"cache_size", cache_size}, {"neighbors", neighbors}}},
      {"log_level", log_level},
      {"train",
       {{"batch", train.batch},
        {"epochs", train.epochs},
        {"lr", train.lr},
        {"weight_decay", train.weight_decay},
        {"tau", train.loss.tau},
        {"lambda_intent", train.loss.lambda_intent},
        {"lambda_recon", train.loss.lambda_recon},
        {"pos_start", train.pos_start},
        {"pos_end", train.pos_end},
        {"neg_start", train.neg_start},
        {"neg_end", train.neg_end},
        {"seed", train.seed}}},
      {"encoder",
       {{"hidden", encoder.hidden},
        {"heads", encoder.heads},
        {"gcn_out", encoder.gcn_out},
        {"dropout", encoder.dropout},
        {"seed", encoder.seed}}},
  };
}

void AppConfig::validate() const {
  if (port < 1 || port > 65535) throw ConfigError("server.port must be in [1, 65535], got " + std::to_string(port));
  if (host.empty()) throw ConfigError("server.host must not be empty");
  if (!kLogLevels.count(log_level)) throw ConfigError("unknown log_level '" + log_level + "'");
  if (!(planner.metadata_first_threshold > 0 && planner.metadata_first_threshold < 1))
    throw ConfigError("planner.metadata_first_threshold must be in (0, 1)");
  if (planner.max_overfetch < 1) throw ConfigError("planner.max_overfetch must be >= 1");
  if (data_dir.empty() || model_path.empty() || index_path.empty()) throw ConfigError("paths must not be empty");
  try {
    train.validate();
    encoder.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

// ---- record pipeline ----

index::ScreenRecord make_record(const graph::DetectionManifest& m, const nn::EncoderModel& model,
                                const index::SemEmbedder& embedder, StageTimes* times) {
  auto t0 = Clock::now();
  const auto g = graph::build_graph(m, model.vocab);
  const double graph_ms = ms_since(t0);
  t0 = Clock::now();
  const auto emb = nn::forward(model, g);
  index::ScreenRecord rec;
  rec.screen_id = m.screen_id;
  rec.structural = as_floats(emb.g);
  rec.semantic = embedder.embed_screen(m, g);
  rec.intent_probs = as_floats(nn::predict_intent(model, emb.g));
  rec.counts = m.type_counts();
  rec.visual = m.visual_vec;
  rec.manifest_json = graph::dump_manifest(m);
  if (times) {
    times->graph_ms += graph_ms;
    times->encode_ms += ms_since(t0);
  }
  return rec;
}

index::IndexOptions index_options(const nn::EncoderModel& model, index::Metric metric) {
  index::IndexOptions o;
  o.structural_metric = metric;
  o.structural_dim = static_cast<std::size_t>(model.config.embedding_dim());
  o.intent_labels = model.intent_labels;
  return o;
}

// ---- ingest ----

json to_json(const IngestReport& r) {
  json skipped = json::array();
  for (const auto& s : r.skipped) skipped.push_back({{"file", s.file}, {"reason", s.reason}});
  return {{"screens_seen", r.screens_seen},
          {"screens_indexed", r.screens_indexed},
          {"skipped", skipped},
          {"wall_ms", r.wall_ms},
          {"stages", {{"graph_ms", r.stages.graph_ms}, {"encode_ms", r.stages.encode_ms}, {"index_ms", r.stages.index_ms}}}};
}

namespace {

void ingest_one(const graph::DetectionManifest& m, const std::string& name, const nn::EncoderModel& model,
                const index::SemEmbedder& embedder, index::HybridIndex& idx, IngestReport& rep) {
  if (idx.find(m.screen_id)) {
    rep.skipped.push_back({name, "duplicate id"});
    return;
  }
  try {
    auto rec = make_record(m, model, embedder, &rep.stages);
    const auto t0 = Clock::now();
    idx.add(std::move(rec));
    rep.stages.index_ms += ms_since(t0);
    ++rep.screens_indexed;
  } catch (const std::exception& e) {
    rep.skipped.push_back({name, e.what()});
  }
}

void finish(index::HybridIndex& idx, IngestReport& rep, Clock::time_point start) {
  const auto t0 = Clock::now();
  idx.seal();
  rep.stages.index_ms += ms_since(t0);
  rep.wall_ms = ms_since(start);
  for (const auto& s : rep.skipped) spdlog::warn("skipped {}: {}", s.file, s.reason);
}

}  // namespace

IngestReport ingest_dir(const fs::path& dir, const nn::EncoderModel& model, const index::SemEmbedder& embedder,
                        index::HybridIndex& idx) {
  const auto start = Clock::now();
  IngestReport rep;
  for (const auto& file : manifest_files(dir)) {
    ++rep.screens_seen;
    const std::string name = file.filename().string();
    graph::DetectionManifest m;
    try {
      m = graph::load_manifest(read_file(file));
    } catch (const std::exception& e) {
      rep.skipped.push_back({name, std::string("malformed: ") + e.what()});
      continue;
    }
    ingest_one(m, name, model, embedder, idx, rep);
  }
  finish(idx, rep, start);
  return rep;
}

IngestReport ingest_manifests(const std::vector<graph::DetectionManifest>& manifests, const nn::EncoderModel& model,
                              const index::SemEmbedder& embedder, index::HybridIndex& idx) {
  const auto start = Clock::now();
  IngestReport rep;
  for (const auto& m : manifests) {
    ++rep.screens_seen;
    ingest_one(m, m.screen_id, model, embedder, idx, rep);
  }
  finish(idx, rep, start);
  return rep;
}

IngestReport cmd_ingest(const fs::path& dir, const AppConfig& cfg) {
  if (!fs::exists(cfg.model_path)) throw IngestError("missing checkpoint: " + cfg.model_path.string());
  const auto model = nn::load_checkpoint(cfg.model_path);
  index::HybridIndex idx = fs::exists(cfg.index_path) ? index::HybridIndex::load(cfg.index_path)
                                                      : index::HybridIndex(index_options(model, cfg.structural_metric));
  auto rep = ingest_dir(dir, model, cfg.make_embedder(), idx);
  if (!idx.empty()) idx.build_ivf();
  if (cfg.index_path.has_parent_path()) fs::create_directories(cfg.index_path.parent_path());
  idx.save(cfg.index_path);
  return rep;
}

// ---- train ----

std::vector<learn::TrainingExample> training_examples(const std::vector<graph::DetectionManifest>& ms,
                                                      const nn::EncoderModel& model) {
  std::vector<learn::TrainingExample> out;
  out.reserve(ms.size());
  for (const auto& m : ms) {
    learn::TrainingExample ex{graph::build_graph(m, model.vocab), std::nullopt};
    if (m.intent_label) ex.intent = model.intent_index(*m.intent_label);
    out.push_back(std::move(ex));
  }
  return out;
}

learn::TrainResult cmd_train(const fs::path& corpus_dir, const AppConfig& cfg, const TrainRunOptions& opts) {
  std::vector<graph::DetectionManifest> ms;
  for (const auto& file : manifest_files(corpus_dir)) {
    try {
      ms.push_back(graph::load_manifest(read_file(file)));
    } catch (const std::exception& e) {
      spdlog::warn("skipped {}: {}", file.filename().string(), e.what());
    }
  }
  if (ms.empty()) throw IngestError("no readable manifests in " + corpus_dir.string());

  std::optional<nn::OptimizerState> optimizer;
  nn::EncoderModel model;
  if (opts.resume) {
    if (!fs::exists(cfg.model_path)) throw IngestError("missing checkpoint: " + cfg.model_path.string());
    model = nn::load_checkpoint(cfg.model_path, &optimizer);
    if (!optimizer) throw IngestError("checkpoint has no optimizer state to resume from");
  } else {
    model = nn::init_model(cfg.encoder, graph::TypeVocabulary::from_corpus(ms), synth::intent_labels());
  }
  const auto examples = training_examples(ms, model);

  const fs::path log_path = opts.log_path.empty() ? fs::path(cfg.model_path.string() + ".log.jsonl") : opts.log_path;
  if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path, opts.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());

  auto result = learn::train(examples, std::move(model), cfg.train, optimizer, [&](const learn::EpochLog& e) {
    log << learn::to_json(e).dump() << '\n';
    log.flush();
    spdlog::info("epoch {} loss {:.4f} (contrastive {:.4f}, intent {:.4f}, recon {:.4f})", e.epoch, e.total,
                 e.contrastive, e.intent, e.recon);
  });
  if (cfg.model_path.has_parent_path()) fs::create_directories(cfg.model_path.parent_path());
  nn::save_checkpoint(cfg.model_path, result.model, &result.optimizer);
  return result;
}

// ---- spread ----

learn::SpreadReport index_spread(const index::HybridIndex& idx) {
  if (idx.size() < 2) throw std::invalid_argument("spread needs at least 2 indexed screens, have " + std::to_string(idx.size()));
  return learn::embedding_spread(idx.structural().data(), idx.structural().dim());
}

std::string spread_csv(const learn::SpreadReport& r) {
  std::string out = "bin_lo,bin_hi,count\n";
  const double w = 2.0 / static_cast<double>(learn::kSpreadBins);
  for (std::size_t i = 0; i < learn::kSpreadBins; ++i)
    out += fmt::format("{:.2f},{:.2f},{}\n", -1.0 + w * static_cast<double>(i), -1.0 + w * static_cast<double>(i + 1),
                       r.bins[i]);
  return out;
}

std::string spread_svg(const learn::SpreadReport& r) {
  constexpr double W = 640, H = 320, pad = 40;
  const double plot_w = W - 2 * pad, plot_h = H - 2 * pad;
  const auto peak = std::max<std::uint64_t>(1, *std::max_element(r.bins.begin(), r.bins.end()));
  const double bw = plot_w / static_cast<double>(learn::kSpreadBins);
  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      W, H, W, H);
  for (std::size_t i = 0; i < learn::kSpreadBins; ++i) {
    const double h = plot_h * static_cast<double>(r.bins[i]) / static_cast<double>(peak);
    out += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"#4a7ab5\"/>\n",
                       pad + bw * static_cast<double>(i), pad + plot_h - h, bw * 0.9, h);
  }
  out += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", pad, pad + plot_h,
                     pad + plot_w);
  out += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"12\">-1</text>\n", pad - 6, H - pad + 16);
  out += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"12\">0</text>\n", pad + plot_w / 2 - 3, H - pad + 16);
  out += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"12\">1</text>\n", pad + plot_w - 3, H - pad + 16);
  out += fmt::format("<text x=\"{}\" y=\"24\" font-size=\"14\">pairwise cosine: mean {:.3f}, std {:.3f}, {} pairs{}</text>\n",
                     pad, r.mean, r.std, r.pairs, r.sampled ? " (sampled)" : "");
  if (r.collapsed())
    out += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"16\" fill=\"#c0392b\">collapse: std below {}</text>\n",
                       pad + 10, pad + 20, learn::kCollapseStd);
  out += "</svg>\n";
  return out;
}

learn::SpreadReport cmd_eval_spread(const index::HybridIndex& idx, const fs::path& out_dir) {
  const auto r = index_spread(idx);
  fs::create_directories(out_dir);
  auto write = [&](const char* name, const std::string& text) {
    std::ofstream out(out_dir / name, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + (out_dir / name).string());
  };
  write("spread.json", learn::to_json(r).dump(2) + "\n");
  write("spread.csv", spread_csv(r));
  write("spread.svg", spread_svg(r));
  return r;
}

// ---- bench ----

std::vector<SuiteEntry> parse_suite(std::string_view text) {
  std::vector<SuiteEntry> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string_view::npos || line[first] == '#') continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw SuiteError(fmt::format("line {}: {}", line_no, e.what()));
    }
    if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string() || !j.contains("query") ||
        !j["query"].is_string())
      throw SuiteError(fmt::format("line {}: expected {{\"kind\": string, \"query\": string}}", line_no));
    SuiteEntry e{j["kind"].get<std::string>(), j["query"].get<std::string>()};
    if (e.kind.empty()) throw SuiteError(fmt::format("line {}: empty kind", line_no));
    if (j.contains("approximate")) {
      if (!j["approximate"].is_boolean()) throw SuiteError(fmt::format("line {}: approximate must be a boolean", line_no));
      e.approximate = j["approximate"].get<bool>();
    }
    out.push_back(std::move(e));
  }
  if (out.empty()) throw SuiteError("query suite is empty");
  return out;
}

std::vector<SuiteEntry> load_suite(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw SuiteError(e.what());
  }
  return parse_suite(text);
}

Percentiles percentiles(std::vector<double> samples) {
  if (samples.empty()) throw std::invalid_argument("no samples");
  std::sort(samples.begin(), samples.end());
  auto at = [&](double p) {
    const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(samples.size())));
    return samples[std::clamp<std::size_t>(rank, 1, samples.size()) - 1];
  };
  return {at(50), at(90), at(95), at(99)};
}

const KindReport* BenchReport::find(std::string_view kind) const {
  for (const auto& k : kinds)
    if (k.kind == kind) return &k;
  return nullptr;
}

json to_json(const BenchReport& r) {
  auto pj = [](const Percentiles& p) { return json{{"p50", p.p50}, {"p90", p.p90}, {"p95", p.p95}, {"p99", p.p99}}; };
  json kinds = json::array();
  for (const auto& k : r.kinds)
    kinds.push_back({{"kind", k.kind}, {"queries", k.queries}, {"cold_ms", pj(k.cold)}, {"warm_ms", pj(k.warm)}});
  return {{"corpus_size", r.corpus_size}, {"repeats", r.repeats}, {"deterministic", r.deterministic}, {"kinds", kinds}};
}

BenchReport cmd_bench(const index::HybridIndex& idx, const std::vector<SuiteEntry>& suite, const BenchOptions& opts,
                      const nn::EncoderModel* model, const index::SemEmbedder& embedder) {
  if (suite.empty()) throw SuiteError("query suite is empty");
  const query::Context ctx{&idx, model, embedder};
  BenchReport rep;
  rep.corpus_size = idx.size();
  rep.repeats = opts.repeats;

  struct Samples {
    std::vector<double> cold, warm;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Samples> by_kind;

  using Answer = std::vector<std::pair<std::string, double>>;
  auto answer = [](const query::QueryResult& r) {
    Answer a;
    for (const auto& row : r.rows) a.emplace_back(row.screen_id, row.score);
    return a;
  };

  for (const auto& e : suite) {
    if (!by_kind.count(e.kind)) order.push_back(e.kind);
    auto& s = by_kind[e.kind];
    auto cfg = opts.planner;
    cfg.approximate = cfg.approximate || e.approximate;

    auto t0 = Clock::now();
    const auto first = query::run(e.text, ctx, cfg);
    s.cold.push_back(ms_since(t0));
    const Answer expected = answer(first);
    for (std::size_t i = 0; i < opts.repeats; ++i) {
      t0 = Clock::now();
      const auto again = query::run(e.text, ctx, cfg);
      s.warm.push_back(ms_since(t0));
      if (answer(again) != expected) rep.deterministic = false;
    }
  }
  for (const auto& kind : order) {
    const auto& s = by_kind[kind];
    KindReport k;
    k.kind = kind;
    k.queries = s.cold.size();
    k.cold = percentiles(s.cold);
    k.warm = s.warm.empty() ? k.cold : percentiles(s.warm);
    rep.kinds.push_back(std::move(k));
  }
  return rep;
}

}  // namespace uisearch::service
