#include "uisearch/query.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <queue>

namespace uisearch::query {

namespace {

using index::DocId;
using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::size_t slot(Modality m) { return static_cast<std::size_t>(m); }

}  // namespace

// ---- fusion ----

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::Structural: return "structural";
    case Modality::Visual: return "visual";
    case Modality::Semantic: return "semantic";
    case Modality::Intent: return "intent";
    case Modality::Text: return "text";
  }
  return "?";
}

Modality modality_of(Mode m) {
  switch (m) {
    case Mode::Structural: return Modality::Structural;
    case Mode::Visual: return Modality::Visual;
    case Mode::Semantic: return Modality::Semantic;
  }
  return Modality::Structural;
}

std::size_t FusionWeights::count() const { return static_cast<std::size_t>(std::count(active.begin(), active.end(), true)); }

FusionWeights fusion_weights(const QueryAst& ast) {
  FusionWeights w;
  std::array<std::optional<double>, kNumModalities> given{};
  auto mark = [&](Modality m, std::optional<double> weight) {
    w.active[slot(m)] = true;
    given[slot(m)] = weight;
  };
  for (const auto& c : ast.clauses) {
    if (auto* s = std::get_if<SimilarTo>(&c)) mark(modality_of(s->mode), s->weight);
    if (auto* s = std::get_if<IntentClause>(&c)) mark(Modality::Intent, s->weight);
    if (auto* s = std::get_if<TextMatch>(&c)) mark(Modality::Text, s->weight);
  }
  double explicit_sum = 0;
  std::size_t n_explicit = 0, n_missing = 0;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (!w.active[m]) continue;
    if (given[m]) {
      explicit_sum += *given[m];
      ++n_explicit;
    } else {
      ++n_missing;
    }
  }
  if (n_explicit + n_missing == 0) return w;
  double share = 1.0;
  if (n_missing > 0 && n_explicit > 0)
    share = explicit_sum < 1.0 ? (1.0 - explicit_sum) / static_cast<double>(n_missing)
                               : explicit_sum / static_cast<double>(n_explicit);
  double total = 0;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (!w.active[m]) continue;
    w.lambda[m] = given[m] ? *given[m] : share;
    total += w.lambda[m];
  }
  for (auto& l : w.lambda) l /= total;
  return w;
}

double fuse(const std::array<double, kNumModalities>& scores, const FusionWeights& w) {
  if (w.count() == 0) throw FusionError("no active modality to fuse");
  double rho = 0;
  for (std::size_t m = 0; m < kNumModalities; ++m)
    if (w.active[m]) rho += w.lambda[m] * scores[m];
  return rho;
}

double map_score(index::Metric metric, double raw) {
  switch (metric) {
    case index::Metric::Euclidean: return 1.0 / (1.0 + std::max(0.0, raw));
    case index::Metric::Cosine:
    case index::Metric::InnerProduct: return std::clamp((1.0 + raw) / 2.0, 0.0, 1.0);
  }
  return 0;
}

// ---- planning ----

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::VectorOnly: return "vector-only";
    case Strategy::MetadataOnly: return "metadata-only";
    case Strategy::MetadataFirst: return "metadata-first";
    case Strategy::VectorFirst: return "vector-first";
  }
  return "?";
}

std::optional<Strategy> parse_strategy(std::string_view s) {
  for (auto st : {Strategy::VectorOnly, Strategy::MetadataOnly, Strategy::MetadataFirst, Strategy::VectorFirst})
    if (strategy_name(st) == s) return st;
  return std::nullopt;
}

double predicate_selectivity(const index::MetadataIndex& meta, const Predicate& p) {
  const double s = meta.selectivity(p.pred);
  return p.negated ? 1.0 - s : s;
}

namespace {

QueryPlan base_plan(const QueryAst& ast, const index::HybridIndex& idx, const PlannerConfig& cfg) {
  QueryPlan p;
  const auto preds = ast.predicates();
  std::vector<double> sel(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) sel[i] = predicate_selectivity(idx.metadata(), preds[i]);
  p.predicate_order.resize(preds.size());
  std::iota(p.predicate_order.begin(), p.predicate_order.end(), std::size_t{0});
  std::stable_sort(p.predicate_order.begin(), p.predicate_order.end(),
                   [&](std::size_t a, std::size_t b) { return sel[a] < sel[b]; });
  for (double s : sel) p.selectivity *= s;
  const auto w = fusion_weights(ast);
  p.approximate = cfg.approximate && w.is_active(Modality::Structural) && idx.ivf_fresh();
  if (p.approximate) p.nprobe = cfg.nprobe ? std::min(cfg.nprobe, idx.ivf()->nlist()) : idx.ivf()->default_nprobe();
  return p;
}

void estimate_cost(QueryPlan& p, const QueryAst& ast, const index::HybridIndex& idx) {
  const auto w = fusion_weights(ast);
  const double n = static_cast<double>(idx.size());
  const double d = static_cast<double>(idx.structural().dim());
  const double k = static_cast<double>(ast.limit);
  const double np = static_cast<double>(p.predicate_order.size());
  double vec = 0;
  for (auto m : {Modality::Structural, Modality::Visual, Modality::Semantic, Modality::Text})
    if (w.is_active(m)) vec += 1;
  const double per_doc = d * vec + (w.is_active(Modality::Intent) ? 1 : 0) + np;
  double scan = n * d;
  if (p.approximate) {
    const double nl = static_cast<double>(idx.ivf()->nlist());
    scan = (nl + static_cast<double>(p.nprobe) * n / std::max(1.0, nl)) * d;
  }
  const double lookup = np * std::log2(n + 1);
  switch (p.strategy) {
    case Strategy::MetadataOnly: p.estimated_cost = lookup + p.selectivity * n * (ast.has_scoring() ? per_doc : 1); break;
    case Strategy::MetadataFirst: p.estimated_cost = lookup + p.selectivity * n * per_doc; break;
    case Strategy::VectorFirst:
    case Strategy::VectorOnly:
      p.estimated_cost = scan + k * static_cast<double>(p.overfetch) * per_doc / std::max(p.selectivity, 1e-9);
      break;
  }
}

}  // namespace

QueryPlan plan(const QueryAst& ast, const index::HybridIndex& idx, const PlannerConfig& cfg) {
  QueryPlan p = base_plan(ast, idx, cfg);
  const bool preds = !p.predicate_order.empty();
  if (!ast.has_scoring()) {
    p.strategy = Strategy::MetadataOnly;
  } else if (!preds) {
    p.strategy = Strategy::VectorOnly;
  } else if (p.selectivity < cfg.metadata_first_threshold) {
    p.strategy = Strategy::MetadataFirst;
  } else {
    p.strategy = Strategy::VectorFirst;
    p.overfetch = std::min<std::size_t>(cfg.max_overfetch, static_cast<std::size_t>(std::ceil(2.0 / p.selectivity)));
  }
  if (p.strategy != Strategy::VectorOnly && p.strategy != Strategy::VectorFirst) {
    p.approximate = false;
    p.nprobe = 0;
  }
  estimate_cost(p, ast, idx);
  return p;
}

QueryPlan plan_forced(const QueryAst& ast, const index::HybridIndex& idx, Strategy s, const PlannerConfig& cfg) {
  QueryPlan p = base_plan(ast, idx, cfg);
  p.strategy = s;
  if (s == Strategy::VectorFirst && p.selectivity > 0)
    p.overfetch = std::min<std::size_t>(cfg.max_overfetch, static_cast<std::size_t>(std::ceil(2.0 / p.selectivity)));
  else if (s == Strategy::VectorFirst)
    p.overfetch = cfg.max_overfetch;
  if (s != Strategy::VectorOnly && s != Strategy::VectorFirst) {
    p.approximate = false;
    p.nprobe = 0;
  }
  estimate_cost(p, ast, idx);
  return p;
}

// ---- execution ----

namespace {

struct Scorer {
  const index::HybridIndex& idx;
  FusionWeights w;
  std::vector<float> structural, visual, semantic, text;
  std::size_t intent = 0;

  double modality(Modality m, DocId d) const {
    switch (m) {
      case Modality::Structural: return map_score(idx.structural().metric(), idx.structural().score(structural, d));
      case Modality::Visual:
        return idx.has_visual(d) ? map_score(index::Metric::Cosine, index::dot(visual, idx.visual(d))) : 0.0;
      case Modality::Semantic: return map_score(index::Metric::Cosine, index::dot(semantic, idx.semantic().vector(d)));
      case Modality::Text: return map_score(index::Metric::Cosine, index::dot(text, idx.semantic().vector(d)));
      case Modality::Intent: return std::clamp(static_cast<double>(idx.intent_probs(d)[intent]), 0.0, 1.0);
    }
    return 0;
  }

  // Fills the breakdown, reusing a precomputed score for `known`.
  double fused(DocId d, std::array<double, kNumModalities>& br, std::optional<Modality> known = {},
               double known_score = 0) const {
    br.fill(0);
    if (w.count() == 0) return 1.0;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      if (!w.active[m]) continue;
      const auto mod = static_cast<Modality>(m);
      br[m] = known && *known == mod ? known_score : modality(mod, d);
    }
    return fuse(br, w);
  }
};

std::vector<float> as_floats(const Eigen::VectorXd& v) {
  std::vector<float> out(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(v[i]);
  return out;
}

struct Resolved {
  std::optional<DocId> doc;
  std::optional<graph::DetectionManifest> manifest;
  std::optional<graph::UiGraph> graph;
};

Resolved resolve_ref(const Context& ctx, const std::string& ref) {
  Resolved r;
  if (auto d = ctx.index->find(ref)) {
    r.doc = d;
    return r;
  }
  const auto first = ref.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && ref[first] == '{') {
    try {
      r.manifest = graph::load_manifest(ref);
    } catch (const std::exception& e) {
      throw UnresolvedRefError(std::string("inline manifest is invalid: ") + e.what());
    }
    r.graph = graph::build_graph(*r.manifest, ctx.model ? ctx.model->vocab : graph::TypeVocabulary{});
    return r;
  }
  throw UnresolvedRefError("unknown screen_id '" + ref + "'");
}

Scorer make_scorer(const QueryAst& ast, const Context& ctx) {
  const auto& idx = *ctx.index;
  Scorer sc{idx, fusion_weights(ast), {}, {}, {}, {}, 0};
  for (const auto& c : ast.clauses) {
    if (auto* s = std::get_if<SimilarTo>(&c)) {
      const Resolved r = resolve_ref(ctx, s->ref);
      switch (s->mode) {
        case Mode::Structural:
          if (r.doc) {
            auto v = idx.structural().vector(*r.doc);
            sc.structural.assign(v.begin(), v.end());
          } else {
            if (!ctx.model) throw UnresolvedRefError("inline manifest references need a loaded model");
            const auto emb = nn::forward(*ctx.model, *r.graph);
            if (static_cast<std::size_t>(emb.g.size()) != idx.structural().dim())
              throw QueryError("model embedding dimension does not match the index");
            sc.structural = idx.structural().prepare(as_floats(emb.g));
          }
          break;
        case Mode::Visual:
          if (idx.visual_dim() == 0) throw QueryError("the index holds no visual vectors");
          if (r.doc) {
            if (!idx.has_visual(*r.doc)) throw QueryError("screen '" + s->ref + "' has no visual vector");
            auto v = idx.visual(*r.doc);
            sc.visual.assign(v.begin(), v.end());
          } else {
            if (!r.manifest->visual_vec) throw QueryError("inline manifest has no visual_vec");
            if (r.manifest->visual_vec->size() != idx.visual_dim())
              throw QueryError("inline visual_vec has dimension " + std::to_string(r.manifest->visual_vec->size()) +
                               ", expected " + std::to_string(idx.visual_dim()));
            sc.visual = *r.manifest->visual_vec;
            index::normalize(sc.visual);
          }
          break;
        case Mode::Semantic:
          if (r.doc) {
            auto v = idx.semantic().vector(*r.doc);
            sc.semantic.assign(v.begin(), v.end());
          } else {
            sc.semantic = idx.semantic().prepare(ctx.embedder.embed_screen(*r.manifest, *r.graph));
          }
          break;
      }
    } else if (auto* ic = std::get_if<IntentClause>(&c)) {
      auto i = idx.intent_index(ic->label);
      if (!i) {
        std::string known;
        for (const auto& l : idx.options().intent_labels) known += (known.empty() ? "" : ", ") + l;
        throw QueryError("unknown intent label '" + ic->label + "'; known labels: " + known);
      }
      sc.intent = *i;
    } else if (auto* t = std::get_if<TextMatch>(&c)) {
      sc.text = idx.semantic().prepare(ctx.embedder.embed_text(t->text));
    }
  }
  return sc;
}

struct Ranked {
  double score;
  DocId doc;
  std::array<double, kNumModalities> breakdown;
};

// Keeps the k best under (score desc, id asc); top() is the worst kept.
class TopK {
 public:
  TopK(const index::HybridIndex& idx, std::size_t k) : idx_(idx), k_(k), heap_(Cmp{&idx}) {}

  void offer(Ranked r) {
    if (heap_.size() < k_) {
      heap_.push(std::move(r));
    } else if (better(idx_, r, heap_.top())) {
      heap_.pop();
      heap_.push(std::move(r));
    }
  }
  bool full() const { return heap_.size() >= k_; }
  double worst() const { return heap_.top().score; }

  std::vector<Ranked> take() {
    std::vector<Ranked> out;
    while (!heap_.empty()) {
      out.push_back(heap_.top());
      heap_.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

  static bool better(const index::HybridIndex& idx, const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    return idx.id(a.doc) < idx.id(b.doc);
  }

 private:
  struct Cmp {
    const index::HybridIndex* idx;
    bool operator()(const Ranked& a, const Ranked& b) const { return better(*idx, a, b); }
  };
  const index::HybridIndex& idx_;
  std::size_t k_;
  std::priority_queue<Ranked, std::vector<Ranked>, Cmp> heap_;
};

struct Filter {
  const index::MetadataIndex& meta;
  std::vector<Predicate> preds;  // in evaluation order

  bool passes(DocId d) const {
    for (const auto& p : preds)
      if (meta.matches(d, p.pred) == p.negated) return false;
    return true;
  }

  index::IdSet survivors() const {
    if (preds.empty()) return meta.all();
    const auto& first = preds.front();
    index::IdSet base;
    if (!first.negated) {
      base = meta.filter(first.pred);
    } else if (first.pred.op == index::CountOp::Has) {
      auto q = first.pred;
      q.op = index::CountOp::NotHas;
      base = meta.filter(q);
    } else {
      const auto hit = meta.filter(first.pred);
      const auto all = meta.all();
      std::set_difference(all.begin(), all.end(), hit.begin(), hit.end(), std::back_inserter(base));
    }
    index::IdSet out;
    out.reserve(base.size());
    for (DocId d : base) {
      bool ok = true;
      for (std::size_t i = 1; i < preds.size() && ok; ++i) ok = meta.matches(d, preds[i].pred) != preds[i].negated;
      if (ok) out.push_back(d);
    }
    return out;
  }
};

std::vector<ResultRow> to_rows(const index::HybridIndex& idx, const std::vector<Ranked>& ranked) {
  std::vector<ResultRow> rows;
  rows.reserve(ranked.size());
  for (std::size_t i = 0; i < ranked.size(); ++i)
    rows.push_back({idx.id(ranked[i].doc), ranked[i].score, ranked[i].breakdown, i + 1});
  return rows;
}

void check_context(const Context& ctx) {
  if (!ctx.index) throw QueryError("no index loaded");
  if (ctx.index->empty()) throw QueryError("query on an empty index");
  if (!ctx.index->sealed()) throw QueryError("index is not sealed");
}

std::optional<Modality> primary_modality(const FusionWeights& w) {
  std::optional<Modality> best;
  for (std::size_t m = 0; m < kNumModalities; ++m)
    if (w.active[m] && (!best || w.lambda[m] > w[*best])) best = static_cast<Modality>(m);
  return best;
}

}  // namespace

QueryResult execute(const QueryAst& ast, const Context& ctx, const QueryPlan& plan) {
  check_context(ctx);
  const auto& idx = *ctx.index;
  QueryResult res;
  res.query = print(ast);
  res.plan = plan;

  auto t0 = Clock::now();
  const Scorer sc = make_scorer(ast, ctx);
  res.weights = sc.w;
  res.timing_ms.fuse += ms_since(t0);

  const auto all_preds = ast.predicates();
  Filter filter{idx.metadata(), {}};
  if (plan.predicate_order.size() == all_preds.size()) {
    for (auto i : plan.predicate_order) filter.preds.push_back(all_preds[i]);
  } else {
    filter.preds = all_preds;
  }
  TopK top(idx, ast.limit);
  const std::size_t n = idx.size();

  const bool metadata_path = plan.strategy == Strategy::MetadataOnly || plan.strategy == Strategy::MetadataFirst ||
                             sc.w.count() == 0;
  if (metadata_path) {
    t0 = Clock::now();
    const auto ids = filter.survivors();
    res.timing_ms.filter += ms_since(t0);
    t0 = Clock::now();
    for (DocId d : ids) {
      Ranked r{0, d, {}};
      r.score = sc.fused(d, r.breakdown);
      top.offer(r);
    }
    res.timing_ms.fuse += ms_since(t0);
    res.rows = to_rows(idx, top.take());
    return res;
  }

  const Modality primary = *primary_modality(sc.w);
  const std::size_t start = std::min(n, ast.limit * std::max<std::size_t>(1, plan.overfetch));

  if (plan.approximate && primary == Modality::Structural && idx.ivf_fresh()) {
    const std::size_t nprobe = plan.nprobe ? plan.nprobe : idx.ivf()->default_nprobe();
    for (std::size_t fetch = start;; fetch = std::min(n, fetch * 2)) {
      t0 = Clock::now();
      const auto hits = idx.ivf()->search(sc.structural, fetch, nprobe, idx.structural());
      res.timing_ms.vector += ms_since(t0);
      TopK round(idx, ast.limit);
      for (const auto& h : hits) {
        t0 = Clock::now();
        const bool ok = filter.passes(h.doc);
        res.timing_ms.filter += ms_since(t0);
        if (!ok) continue;
        t0 = Clock::now();
        Ranked r{0, h.doc, {}};
        r.score = sc.fused(h.doc, r.breakdown);
        round.offer(r);
        res.timing_ms.fuse += ms_since(t0);
      }
      if (round.full() || hits.size() < fetch || fetch >= n) {
        res.rows = to_rows(idx, round.take());
        return res;
      }
    }
  }

  // Exact: primary scores for every screen, then candidates in primary order
  // until no unseen screen can beat the k-th fused score.
  t0 = Clock::now();
  std::vector<double> prim(n);
  for (DocId d = 0; d < n; ++d) prim[d] = sc.modality(primary, d);
  std::vector<DocId> order(n);
  std::iota(order.begin(), order.end(), DocId{0});
  auto by_primary = [&](DocId a, DocId b) {
    if (prim[a] != prim[b]) return prim[a] > prim[b];
    return a < b;
  };
  res.timing_ms.vector += ms_since(t0);

  double rest = 0;
  for (std::size_t m = 0; m < kNumModalities; ++m)
    if (sc.w.active[m] && static_cast<Modality>(m) != primary) rest += sc.w.lambda[m];
  const double lp = sc.w[primary];

  std::size_t done = 0;
  for (std::size_t fetch = start;; fetch = std::min(n, fetch * 2)) {
    t0 = Clock::now();
    std::partial_sort(order.begin() + static_cast<std::ptrdiff_t>(done), order.begin() + static_cast<std::ptrdiff_t>(fetch),
                      order.end(), by_primary);
    res.timing_ms.vector += ms_since(t0);
    for (std::size_t i = done; i < fetch; ++i) {
      const DocId d = order[i];
      auto tf = Clock::now();
      const bool ok = filter.passes(d);
      res.timing_ms.filter += ms_since(tf);
      if (!ok) continue;
      tf = Clock::now();
      Ranked r{0, d, {}};
      r.score = sc.fused(d, r.breakdown, primary, prim[d]);
      top.offer(r);
      res.timing_ms.fuse += ms_since(tf);
    }
    done = fetch;
    if (done >= n) break;
    const double bound = lp * prim[order[done - 1]] + rest;
    if (top.full() && top.worst() > bound + 1e-12) break;
  }
  res.rows = to_rows(idx, top.take());
  return res;
}

QueryResult run(std::string_view text, const Context& ctx, const PlannerConfig& cfg) {
  auto t0 = Clock::now();
  const QueryAst ast = parse(text);
  const double parse_ms = ms_since(t0);
  check_context(ctx);
  t0 = Clock::now();
  const QueryPlan p = plan(ast, *ctx.index, cfg);
  const double plan_ms = ms_since(t0);
  QueryResult r = execute(ast, ctx, p);
  r.query = std::string(text);
  r.timing_ms.parse = parse_ms;
  r.timing_ms.plan = plan_ms;
  return r;
}

std::vector<ResultRow> reference(const QueryAst& ast, const Context& ctx) {
  check_context(ctx);
  const auto& idx = *ctx.index;
  const Scorer sc = make_scorer(ast, ctx);
  const auto preds = ast.predicates();
  std::vector<Ranked> all;
  for (DocId d = 0; d < idx.size(); ++d) {
    const auto& counts = idx.metadata().counts(d);
    int total = 0;
    for (int c : counts) total += c;
    bool ok = true;
    for (const auto& p : preds) ok = ok && (p.pred.matches(counts, total) != p.negated);
    if (!ok) continue;
    Ranked r{0, d, {}};
    r.score = sc.fused(d, r.breakdown);
    all.push_back(r);
  }
  std::sort(all.begin(), all.end(), [&](const Ranked& a, const Ranked& b) { return TopK::better(idx, a, b); });
  if (all.size() > ast.limit) all.resize(ast.limit);
  return to_rows(idx, all);
}

nlohmann::json to_json(const QueryPlan& p) {
  return {{"strategy", strategy_name(p.strategy)},
          {"estimated_cost", p.estimated_cost},
          {"selectivity", p.selectivity},
          {"predicate_order", p.predicate_order},
          {"overfetch", p.overfetch},
          {"approximate", p.approximate},
          {"nprobe", p.nprobe}};
}

nlohmann::json to_json(const QueryResult& r) {
  nlohmann::json weights = nlohmann::json::object();
  for (std::size_t m = 0; m < kNumModalities; ++m)
    if (r.weights.active[m]) weights[std::string(modality_name(static_cast<Modality>(m)))] = r.weights.lambda[m];
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json br = nlohmann::json::object();
    for (std::size_t m = 0; m < kNumModalities; ++m)
      if (r.weights.active[m]) br[std::string(modality_name(static_cast<Modality>(m)))] = row.breakdown[m];
    rows.push_back({{"screen_id", row.screen_id}, {"score", row.score}, {"breakdown", br}, {"rank", row.rank}});
  }
  nlohmann::json plan = to_json(r.plan);
  plan["weights"] = weights;
  return {{"query", r.query},
          {"plan", plan},
          {"results", rows},
          {"timing_ms",
           {{"parse", r.timing_ms.parse},
            {"plan", r.timing_ms.plan},
            {"filter", r.timing_ms.filter},
            {"vector", r.timing_ms.vector},
            {"fuse", r.timing_ms.fuse}}}};
}

}  // namespace uisearch::query
