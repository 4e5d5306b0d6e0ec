#pragma once

// Seeded synthetic screen corpora built from layout templates, and a
// brute-force search oracle used as the reference for the query engine.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "uisearch/index.hpp"
#include "uisearch/query.hpp"
#include "uisearch/ui_graph.hpp"

namespace uisearch::synth {

enum class Arrangement : std::uint8_t { Column, Row, Grid };

// Region coordinates are fractions of the screen.
struct ElementRecipe {
  graph::ElementType type = graph::ElementType::Label;
  double x0 = 0, y0 = 0, x1 = 1, y1 = 1;
  Arrangement arrangement = Arrangement::Column;
  int columns = 1;  // grid only
  double w = 0.1, h = 0.05;
  int count_min = 1;
  int count_max = 1;
  int count_default = 1;
  std::vector<std::string> texts;
};

struct Jitter {
  double position_sigma = 0.02;  // fraction of screen width / height
  double size_sigma = 0.02;
  double drop_prob = 0.1;
  double extra_prob = 0.2;
  bool vary_counts = true;

  static Jitter none() { return {0, 0, 0, 0, false}; }
};

struct TemplateSpec {
  std::string intent_label;
  double width = 1280;
  double height = 800;
  std::vector<ElementRecipe> elements;
  Jitter jitter;
  std::uint64_t seed = 0;
};

inline constexpr int kVisualGrid = 8;

const std::vector<std::string>& intent_labels();
// login, checkout, dashboard, settings, search-results, data-entry.
std::vector<TemplateSpec> default_templates();

nlohmann::json to_json(const TemplateSpec& t);
TemplateSpec template_from_json(const nlohmann::json& j);
std::vector<TemplateSpec> load_templates(const std::filesystem::path& dir);
void write_templates(const std::filesystem::path& dir, const std::vector<TemplateSpec>& specs);

// Noise-free layout at default counts.
graph::DetectionManifest prototype(const TemplateSpec& spec, const std::string& screen_id = "prototype");

// Screen i of the template; ids look like "login_00012".
graph::DetectionManifest generate_one(const TemplateSpec& spec, std::size_t i);
std::vector<graph::DetectionManifest> generate(const TemplateSpec& spec, std::size_t n);
// per_template screens of every template, template by template.
std::vector<graph::DetectionManifest> generate_corpus(const std::vector<TemplateSpec>& specs,
                                                      std::size_t per_template);

// 8 x 8 occupancy grid of the non-window elements, row-major.
std::vector<float> visual_occupancy(const graph::DetectionManifest& m);

// ---- oracle ----

struct OracleDoc {
  std::string screen_id;
  std::vector<float> structural;
  std::vector<float> semantic;
  std::optional<std::vector<float>> visual;
  index::TypeCounts counts{};
  std::vector<float> intent_probs;
};

struct OracleCorpus {
  index::Metric structural_metric = index::Metric::Cosine;
  std::vector<std::string> intent_labels;
  std::vector<OracleDoc> docs;
};

struct OracleHit {
  std::string screen_id;
  double score = 0;
  bool operator==(const OracleHit&) const = default;
};

// Linear scan: every predicate on every screen, every active modality on
// every survivor, total order (score desc, id asc), truncation to the limit.
// References must be screen ids present in the corpus.
std::vector<OracleHit> oracle_search(const OracleCorpus& corpus, const query::QueryAst& ast,
                                     const index::SemEmbedder& embedder = index::SemEmbedder{});

}  // namespace uisearch::synth
