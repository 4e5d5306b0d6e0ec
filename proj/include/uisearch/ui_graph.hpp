#pragma once

// Detection manifests and the attributed spatial graph built from them.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace uisearch::graph {

enum class ElementType : std::uint8_t {
  Label,
  Button,
  Dropdown,
  Table,
  MenuItem,
  RadioButton,
  Icon,
  Links,
  CheckBox,
  OptionsButton,
  WindowName,
  IconButton,
  TextBox,
  DatePicker,
  Window,
};

inline constexpr std::size_t kNumElementTypes = 15;
inline constexpr std::size_t kFeatureDim = 16;
inline constexpr std::size_t kOneHotSlots = 9;
inline constexpr double kDefaultConfidenceThreshold = 0.25;

const std::array<ElementType, kNumElementTypes>& all_element_types();
std::string_view type_name(ElementType t);
// Case-insensitive; accepts the canonical names ("TextBox", "textbox").
std::optional<ElementType> parse_element_type(std::string_view name);
bool is_interactive(ElementType t);
// Comma-separated list of the canonical names, for diagnostics.
std::string valid_type_list();

struct BBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x_min + x_max); }
  double cy() const { return 0.5 * (y_min + y_max); }
  bool operator==(const BBox&) const = default;
};

double iou(const BBox& a, const BBox& b);
double center_distance(const BBox& a, const BBox& b);

struct Detection {
  ElementType type = ElementType::Label;
  BBox bbox;
  double confidence = 1.0;
  std::optional<std::string> text;
  bool operator==(const Detection&) const = default;
};

struct DetectionManifest {
  std::string screen_id;
  double width = 0;
  double height = 0;
  std::vector<Detection> elements;
  std::optional<std::vector<float>> visual_vec;
  std::optional<std::vector<float>> semantic_vec;
  std::optional<std::string> intent_label;
  bool operator==(const DetectionManifest&) const = default;

  std::array<int, kNumElementTypes> type_counts() const;
};

// Raised for malformed manifest text or invariant violations. `where`
// names the offending location ("line 3, column 14" or "elements[2].bbox").
class ManifestError : public std::runtime_error {
 public:
  ManifestError(std::string where, const std::string& what)
      : std::runtime_error(where.empty() ? what : where + ": " + what),
        where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

inline constexpr int kManifestSchemaVersion = 1;

struct LoadOptions {
  double confidence_threshold = kDefaultConfidenceThreshold;
};

DetectionManifest load_manifest(std::string_view raw, const LoadOptions& opts = {});
std::string dump_manifest(const DetectionManifest& m);

// Clamps every box to the screen and checks all manifest invariants.
// Detections below the confidence threshold are dropped.
void validate_and_clamp(DetectionManifest& m, const LoadOptions& opts = {});

// Which element types receive a one-hot slot. Fixed from corpus frequency.
class TypeVocabulary {
 public:
  TypeVocabulary();  // first nine types in canonical order
  explicit TypeVocabulary(std::array<ElementType, kOneHotSlots> slots);

  // Nine most frequent types across the corpus, ties broken alphabetically.
  static TypeVocabulary from_corpus(std::span<const DetectionManifest> corpus);

  std::optional<std::size_t> slot(ElementType t) const;
  const std::array<ElementType, kOneHotSlots>& slots() const { return slots_; }
  bool operator==(const TypeVocabulary&) const = default;

 private:
  std::array<ElementType, kOneHotSlots> slots_;
};

struct ScreenDims {
  double width = 0;
  double height = 0;
  double diagonal() const;
  double distance_threshold() const { return 0.25 * diagonal(); }
};

struct Node {
  std::size_t id = 0;
  ElementType type = ElementType::Label;
  BBox bbox;
  std::string text;
};

struct Edge {
  std::size_t i = 0;
  std::size_t j = 0;
  double weight = 0;
};

inline constexpr double kIouThreshold = 0.1;
inline constexpr double kWeightDistance = 0.6;
inline constexpr double kWeightType = 0.3;
inline constexpr double kWeightIou = 0.1;

// Dense row-major matrices; graphs are small (tens of nodes).
struct UiGraph {
  std::vector<Node> nodes;
  std::vector<double> features;   // |V| x 16
  std::vector<double> adjacency;  // |V| x |V|, symmetric, zero diagonal
  std::vector<Edge> edges;        // undirected, i < j
  ScreenDims dims;

  std::size_t num_nodes() const { return nodes.size(); }
  double feature(std::size_t node, std::size_t col) const {
    return features[node * kFeatureDim + col];
  }
  double adj(std::size_t i, std::size_t j) const { return adjacency[i * nodes.size() + j]; }
  double density() const;
  double interactive_fraction() const;
};

std::vector<double> extract_features(const DetectionManifest& m, const TypeVocabulary& vocab);
bool edge_criterion(const BBox& a, const BBox& b, const ScreenDims& dims);
double edge_weight(const BBox& a, ElementType ta, const BBox& b, ElementType tb,
                   const ScreenDims& dims);
UiGraph build_graph(const DetectionManifest& m, const TypeVocabulary& vocab = {});

}  // namespace uisearch::graph
