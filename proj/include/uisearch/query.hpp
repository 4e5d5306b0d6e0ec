#pragma once

// Conjunctive query language over the hybrid index: parser, printer,
// cost-based planner, fusion of per-modality scores and execution.

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "uisearch/encoder.hpp"
#include "uisearch/index.hpp"

namespace uisearch::query {

enum class Mode : std::uint8_t { Structural, Visual, Semantic };

std::string_view mode_name(Mode m);

struct Predicate {
  index::MetaPredicate pred;
  bool negated = false;
  bool operator==(const Predicate&) const = default;
};

struct SimilarTo {
  std::string ref;
  Mode mode = Mode::Structural;
  std::optional<double> weight;
  bool operator==(const SimilarTo&) const = default;
};

struct IntentClause {
  std::string label;
  std::optional<double> weight;
  bool operator==(const IntentClause&) const = default;
};

struct TextMatch {
  std::string text;
  std::optional<double> weight;
  bool operator==(const TextMatch&) const = default;
};

using Clause = std::variant<Predicate, SimilarTo, IntentClause, TextMatch>;

inline constexpr std::size_t kDefaultLimit = 10;
inline constexpr std::size_t kMaxLimit = 10000;

struct QueryAst {
  std::vector<Clause> clauses;
  std::size_t limit = kDefaultLimit;
  bool operator==(const QueryAst&) const = default;

  std::vector<Predicate> predicates() const;
  bool has_scoring() const;
};

class ParseError : public std::runtime_error {
 public:
  enum class Kind { Syntax, UnknownType, DuplicateMode, InvalidValue };
  ParseError(Kind kind, std::size_t offset, const std::string& message);
  Kind kind() const { return kind_; }
  std::size_t offset() const { return offset_; }
  const std::string& detail() const { return detail_; }

 private:
  Kind kind_;
  std::size_t offset_;
  std::string detail_;
};

QueryAst parse(std::string_view text);
// Canonical text; parse(print(a)) == a.
std::string print(const QueryAst& ast);

// Fused modalities. Metadata predicates only filter.
enum class Modality : std::uint8_t { Structural, Visual, Semantic, Intent, Text };
inline constexpr std::size_t kNumModalities = 5;

std::string_view modality_name(Modality m);
Modality modality_of(Mode m);

struct FusionWeights {
  std::array<double, kNumModalities> lambda{};
  std::array<bool, kNumModalities> active{};

  double operator[](Modality m) const { return lambda[static_cast<std::size_t>(m)]; }
  bool is_active(Modality m) const { return active[static_cast<std::size_t>(m)]; }
  std::size_t count() const;
};

class FusionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unweighted modalities share what the explicit weights leave of 1 (or the
// mean explicit weight when nothing is left); the result is renormalized.
FusionWeights fusion_weights(const QueryAst& ast);
// Scores of inactive modalities are ignored. Throws FusionError when nothing
// is active.
double fuse(const std::array<double, kNumModalities>& scores, const FusionWeights& w);

// Raw similarity to [0, 1].
double map_score(index::Metric metric, double raw);

enum class Strategy : std::uint8_t { VectorOnly, MetadataOnly, MetadataFirst, VectorFirst };

std::string_view strategy_name(Strategy s);
std::optional<Strategy> parse_strategy(std::string_view s);

struct PlannerConfig {
  double metadata_first_threshold = 0.05;
  std::size_t max_overfetch = 10;
  // Use the IVF index for the structural vector stage when it is fresh.
  bool approximate = false;
  std::size_t nprobe = 0;  // 0 = index default
};

struct QueryPlan {
  Strategy strategy = Strategy::VectorOnly;
  double selectivity = 1.0;
  double estimated_cost = 0;
  // Indices into QueryAst::predicates(), most selective first.
  std::vector<std::size_t> predicate_order;
  std::size_t overfetch = 1;
  bool approximate = false;
  std::size_t nprobe = 0;
  bool operator==(const QueryPlan&) const = default;
};

double predicate_selectivity(const index::MetadataIndex& meta, const Predicate& p);
QueryPlan plan(const QueryAst& ast, const index::HybridIndex& idx, const PlannerConfig& cfg = {});
// Same statistics and cost model, strategy fixed by the caller.
QueryPlan plan_forced(const QueryAst& ast, const index::HybridIndex& idx, Strategy s,
                      const PlannerConfig& cfg = {});

class QueryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reference could not be resolved to an indexed screen or a valid manifest.
class UnresolvedRefError : public QueryError {
 public:
  using QueryError::QueryError;
};

struct Context {
  const index::HybridIndex* index = nullptr;
  // Needed only for inline manifest references.
  const nn::EncoderModel* model = nullptr;
  index::SemEmbedder embedder{};
};

struct ResultRow {
  std::string screen_id;
  double score = 0;
  std::array<double, kNumModalities> breakdown{};
  std::size_t rank = 0;
};

struct Timings {
  double parse = 0, plan = 0, filter = 0, vector = 0, fuse = 0;
};

struct QueryResult {
  std::string query;
  QueryPlan plan;
  FusionWeights weights;
  std::vector<ResultRow> rows;
  Timings timing_ms;
};

// Ranked by fused score descending, then screen id ascending; at most
// ast.limit rows. Exact vector search reproduces `reference` whatever the
// strategy.
QueryResult execute(const QueryAst& ast, const Context& ctx, const QueryPlan& plan);
// parse + plan + execute, with timings.
QueryResult run(std::string_view text, const Context& ctx, const PlannerConfig& cfg = {});
// Exhaustive semantics: filter by every predicate, score every survivor,
// sort, truncate.
std::vector<ResultRow> reference(const QueryAst& ast, const Context& ctx);

nlohmann::json to_json(const QueryPlan& p);
nlohmann::json to_json(const QueryResult& r);

}  // namespace uisearch::query
