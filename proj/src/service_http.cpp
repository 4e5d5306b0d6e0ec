#include <chrono>
#include <csignal>
#include <filesystem>

#include <spdlog/spdlog.h>

#include "uisearch/service.hpp"

#include <httplib.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace uisearch::service {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string_view parse_kind_name(query::ParseError::Kind k) {
  switch (k) {
    case query::ParseError::Kind::Syntax: return "syntax";
    case query::ParseError::Kind::UnknownType: return "unknown_type";
    case query::ParseError::Kind::DuplicateMode: return "duplicate_mode";
    case query::ParseError::Kind::InvalidValue: return "invalid_value";
  }
  return "syntax";
}

Response error(int status, std::string_view type, const std::string& message, double total_ms, json extra = {}) {
  json e = {{"type", type}, {"message", message}};
  if (extra.is_object())
    for (auto& [k, v] : extra.items()) e[k] = v;
  return {status, {{"error", e}, {"timing_ms", {{"total", total_ms}}}}};
}

std::optional<learn::SpreadReport> maybe_spread(const index::HybridIndex& idx) {
  if (idx.size() < 2) return std::nullopt;
  return index_spread(idx);
}

}  // namespace

// ---- cache ----

std::optional<std::string> ResultCache::get(const std::string& key) {
  std::lock_guard lock(mu_);
  if (capacity_ == 0) return std::nullopt;
  ++lookups_;
  auto it = map_.find(key);
  if (it == map_.end()) return std::nullopt;
  ++hits_;
  order_.splice(order_.begin(), order_, it->second);
  return it->second->second;
}

void ResultCache::put(const std::string& key, std::string value) {
  std::lock_guard lock(mu_);
  if (capacity_ == 0) return;
  if (auto it = map_.find(key); it != map_.end()) {
    it->second->second = std::move(value);
    order_.splice(order_.begin(), order_, it->second);
    return;
  }
  order_.emplace_front(key, std::move(value));
  map_[key] = order_.begin();
  if (order_.size() > capacity_) {
    map_.erase(order_.back().first);
    order_.pop_back();
  }
}

void ResultCache::clear() {
  std::lock_guard lock(mu_);
  order_.clear();
  map_.clear();
}

std::size_t ResultCache::size() const {
  std::lock_guard lock(mu_);
  return order_.size();
}

// ---- service ----

Service::Service(std::shared_ptr<const nn::EncoderModel> model, index::HybridIndex idx, AppConfig cfg)
    : model_(std::move(model)), cfg_(std::move(cfg)), embedder_(cfg_.make_embedder()), cache_(cfg_.cache_size) {
  if (!idx.sealed()) idx.seal();
  auto s = std::make_shared<Snapshot>();
  s->spread = maybe_spread(idx);
  s->index = std::move(idx);
  install(std::move(s));
}

std::shared_ptr<const Snapshot> Service::snapshot() const {
  std::lock_guard lock(snap_mu_);
  return snap_;
}

void Service::install(std::shared_ptr<Snapshot> s) {
  {
    std::lock_guard lock(snap_mu_);
    s->version = snap_ ? snap_->version + 1 : 1;
    snap_ = std::move(s);
  }
  cache_.clear();
}

void Service::replace_index(index::HybridIndex idx) {
  std::lock_guard mutate(mutate_mu_);
  rebuilding_ = true;
  if (!idx.sealed()) idx.seal();
  auto s = std::make_shared<Snapshot>();
  s->spread = maybe_spread(idx);
  s->index = std::move(idx);
  install(std::move(s));
  rebuilding_ = false;
}

Response Service::query(const json& request) {
  const auto t0 = Clock::now();
  if (!request.is_object() || !request.contains("text") || !request["text"].is_string())
    return error(400, "request", "body must be a JSON object with a string field 'text'", ms_since(t0));
  std::optional<query::Strategy> forced;
  if (request.contains("strategy") && !request["strategy"].is_null()) {
    if (!request["strategy"].is_string())
      return error(400, "request", "'strategy' must be a string", ms_since(t0));
    forced = query::parse_strategy(request["strategy"].get<std::string>());
    if (!forced)
      return error(400, "request",
                   "unknown strategy '" + request["strategy"].get<std::string>() +
                       "'; expected vector-only, metadata-only, metadata-first or vector-first",
                   ms_since(t0));
  }
  return query_text(request["text"].get<std::string>(), forced);
}

Response Service::query_text(const std::string& text, std::optional<query::Strategy> forced) {
  const auto t0 = Clock::now();
  const auto snap = snapshot();
  query::QueryAst ast;
  try {
    ast = query::parse(text);
  } catch (const query::ParseError& e) {
    return error(400, "parse", e.detail(), ms_since(t0),
                 {{"kind", parse_kind_name(e.kind())}, {"offset", e.offset()}, {"query", text}});
  }
  const double parse_ms = ms_since(t0);
  if (snap->index.empty()) return error(503, "unavailable", "the index is empty", ms_since(t0));

  const std::string key = std::to_string(snap->version) + '\n' + (forced ? std::string(query::strategy_name(*forced)) : "") +
                          '\n' + query::print(ast);
  if (auto hit = cache_.get(key)) {
    json body = json::parse(*hit);
    body["query"] = text;
    body["cached"] = true;
    body["timing_ms"] = {{"parse", parse_ms}, {"plan", 0.0}, {"filter", 0.0}, {"vector", 0.0}, {"fuse", 0.0},
                         {"total", ms_since(t0)}};
    return {200, body};
  }

  const query::Context ctx{&snap->index, model_.get(), embedder_};
  try {
    auto tp = Clock::now();
    const auto plan = forced ? query::plan_forced(ast, snap->index, *forced, cfg_.planner)
                             : query::plan(ast, snap->index, cfg_.planner);
    const double plan_ms = ms_since(tp);
    auto result = query::execute(ast, ctx, plan);
    result.query = text;
    result.timing_ms.parse = parse_ms;
    result.timing_ms.plan = plan_ms;
    json body = query::to_json(result);
    body["cached"] = false;
    body["timing_ms"]["total"] = ms_since(t0);
    cache_.put(key, body.dump());
    return {200, body};
  } catch (const query::UnresolvedRefError& e) {
    return error(400, "unresolved_ref", e.what(), ms_since(t0), {{"query", text}});
  } catch (const query::QueryError& e) {
    return error(400, "query", e.what(), ms_since(t0), {{"query", text}});
  } catch (const std::invalid_argument& e) {
    return error(400, "query", e.what(), ms_since(t0), {{"query", text}});
  }
}

Response Service::screen(const std::string& id) const {
  const auto t0 = Clock::now();
  const auto snap = snapshot();
  const auto& idx = snap->index;
  const auto doc = idx.find(id);
  if (!doc) return error(404, "not_found", "unknown screen_id '" + id + "'", ms_since(t0));

  json counts = json::object();
  const auto& c = idx.metadata().counts(*doc);
  for (auto t : graph::all_element_types())
    if (int n = c[static_cast<std::size_t>(t)]) counts[std::string(graph::type_name(t))] = n;
  json intents = json::object();
  const auto probs = idx.intent_probs(*doc);
  std::size_t best = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    intents[idx.options().intent_labels[i]] = probs[i];
    if (probs[i] > probs[best]) best = i;
  }

  json neighbors = json::array();
  if (cfg_.neighbors > 0 && idx.size() > 1) {
    const auto hits = idx.structural().search(idx.structural().vector(*doc), std::min(cfg_.neighbors + 1, idx.size()));
    for (const auto& h : hits) {
      if (h.doc == *doc) continue;
      if (neighbors.size() == cfg_.neighbors) break;
      neighbors.push_back({{"screen_id", idx.id(h.doc)},
                           {"score", query::map_score(idx.structural().metric(), h.score)}});
    }
  }

  json body = {
      {"screen_id", id},
      {"manifest", json::parse(idx.manifest_json(*doc))},
      {"metadata",
       {{"counts", counts},
        {"total", idx.metadata().total(*doc)},
        {"intent", intents},
        {"top_intent", probs.empty() ? json(nullptr) : json(idx.options().intent_labels[best])},
        {"has_visual", idx.visual_dim() > 0 && idx.has_visual(*doc)}}},
      {"neighbors", neighbors},
  };
  body["timing_ms"] = {{"total", ms_since(t0)}};
  return {200, body};
}

Response Service::add_screen(const std::string& raw) {
  const auto t0 = Clock::now();
  graph::DetectionManifest m;
  try {
    m = graph::load_manifest(raw);
  } catch (const graph::ManifestError& e) {
    return error(400, "manifest", e.what(), ms_since(t0), {{"where", e.where()}});
  } catch (const std::exception& e) {
    return error(400, "manifest", e.what(), ms_since(t0));
  }
  std::unique_lock mutate(mutate_mu_, std::try_to_lock);
  if (!mutate.owns_lock()) return error(503, "unavailable", "the index is rebuilding; retry later", ms_since(t0));
  const auto snap = snapshot();
  if (snap->index.find(m.screen_id))
    return error(409, "duplicate", "screen_id '" + m.screen_id + "' is already indexed", ms_since(t0));
  if (!model_) return error(503, "unavailable", "no model loaded", ms_since(t0));

  rebuilding_ = true;
  struct Reset {
    std::atomic<bool>& flag;
    ~Reset() { flag = false; }
  } reset{rebuilding_};

  StageTimes st;
  index::ScreenRecord rec;
  try {
    rec = make_record(m, *model_, embedder_, &st);
  } catch (const std::exception& e) {
    return error(400, "manifest", e.what(), ms_since(t0));
  }
  const auto ti = Clock::now();
  auto next = std::make_shared<Snapshot>();
  next->index = snap->index;
  try {
    next->index.add(std::move(rec));
  } catch (const index::DuplicateIdError& e) {
    return error(409, "duplicate", e.what(), ms_since(t0));
  } catch (const std::invalid_argument& e) {
    return error(400, "manifest", e.what(), ms_since(t0));
  }
  next->index.seal();
  next->spread = maybe_spread(next->index);
  st.index_ms = ms_since(ti);
  const std::size_t size = next->index.size();
  install(std::move(next));
  json body = {{"screen_id", m.screen_id},
               {"size", size},
               {"timing_ms",
                {{"graph", st.graph_ms}, {"encode", st.encode_ms}, {"index", st.index_ms}, {"total", ms_since(t0)}}}};
  return {201, body};
}

Response Service::stats() const {
  const auto t0 = Clock::now();
  const auto snap = snapshot();
  const auto& idx = snap->index;
  const auto mem = idx.memory();
  const json spread = snap->spread ? learn::to_json(*snap->spread) : json(nullptr);
  json body = {
      {"size", idx.size()},
      {"snapshot_version", snap->version},
      {"rebuilding", rebuilding_.load()},
      {"memory",
       {{"n", mem.n},
        {"dim", mem.dim},
        {"dense_families", mem.dense_families},
        {"dense_bytes", mem.dense_bytes},
        {"quantized_bytes", mem.quantized_bytes},
        {"metadata_bytes", mem.metadata_bytes}}},
      {"spread", spread},
      {"intent_labels", idx.options().intent_labels},
      {"ivf", {{"present", idx.has_ivf()}, {"fresh", idx.ivf_fresh()}, {"nlist", idx.has_ivf() ? idx.ivf()->nlist() : 0}}},
      {"cache",
       {{"size", cache_.size()},
        {"capacity", cache_.capacity()},
        {"hits", cache_.hits()},
        {"lookups", cache_.lookups()},
        {"hit_rate", cache_.hit_rate()}}},
  };
  body["timing_ms"] = {{"total", ms_since(t0)}};
  return {200, body};
}

Response Service::healthz() const {
  const auto t0 = Clock::now();
  const auto snap = snapshot();
  json body = {{"status", "ok"}, {"size", snap->index.size()}, {"snapshot_version", snap->version},
               {"model_loaded", model_ != nullptr}};
  body["timing_ms"] = {{"total", ms_since(t0)}};
  return {200, body};
}

void Service::mount(httplib::Server& server) {
  auto reply = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server.Post("/v1/query", [this, reply](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::parse_error& e) {
      reply(res, error(400, "request", std::string("invalid JSON: ") + e.what(), 0.0));
      return;
    }
    reply(res, query(body));
  });
  server.Get(R"(/v1/screens/(.+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, screen(req.matches[1].str()));
  });
  server.Post("/v1/screens", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, add_screen(req.body));
  });
  server.Get("/v1/stats", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, stats()); });
  server.Get("/v1/healthz", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, healthz()); });
  server.set_error_handler([reply](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    if (res.status == 404) reply(res, error(404, "not_found", "no route for " + req.method + " " + req.path, 0.0));
  });
  server.set_exception_handler([reply](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    spdlog::error("handler failed: {}", what);
    reply(res, error(500, "internal", what, 0.0));
  });
}

// ---- serve ----

namespace {
httplib::Server* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}
}  // namespace

int cmd_serve(const AppConfig& cfg) {
  if (!fs::exists(cfg.model_path)) {
    spdlog::error("missing checkpoint: {}", cfg.model_path.string());
    return 1;
  }
  auto model = std::make_shared<const nn::EncoderModel>(nn::load_checkpoint(cfg.model_path));
  index::HybridIndex idx = fs::exists(cfg.index_path) ? index::HybridIndex::load(cfg.index_path)
                                                      : index::HybridIndex(index_options(*model, cfg.structural_metric));
  spdlog::info("loaded {} screens from {}", idx.size(), cfg.index_path.string());
  Service svc(model, std::move(idx), cfg);
  httplib::Server server;
  svc.mount(server);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  spdlog::info("listening on http://{}:{}/v1", cfg.host, cfg.port);
  const bool ok = server.listen(cfg.host, cfg.port);
  g_server = nullptr;
  if (!ok) {
    spdlog::error("cannot bind {}:{}", cfg.host, cfg.port);
    return 1;
  }
  return 0;
}

}  // namespace uisearch::service
