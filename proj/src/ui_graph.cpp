#include "uisearch/ui_graph.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include <json.hpp>

namespace uisearch::graph {

namespace {

using nlohmann::json;

constexpr std::array<ElementType, kNumElementTypes> kAllTypes = {
    ElementType::Label,      ElementType::Button,        ElementType::Dropdown,
    ElementType::Table,      ElementType::MenuItem,      ElementType::RadioButton,
    ElementType::Icon,       ElementType::Links,         ElementType::CheckBox,
    ElementType::OptionsButton, ElementType::WindowName, ElementType::IconButton,
    ElementType::TextBox,    ElementType::DatePicker,    ElementType::Window,
};

constexpr std::array<std::string_view, kNumElementTypes> kTypeNames = {
    "Label",  "Button",        "Dropdown",   "Table",      "MenuItem",
    "RadioButton", "Icon",     "Links",      "CheckBox",   "OptionsButton",
    "WindowName", "IconButton", "TextBox",   "DatePicker", "Window",
};

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string line_col(std::string_view raw, std::size_t byte) {
  byte = std::min(byte, raw.size());
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte; ++i) {
    if (raw[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

double require_number(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ManifestError(where, std::string("missing field '") + key + "'");
  if (!it->is_number()) throw ManifestError(where + "." + key, "expected a number");
  return it->get<double>();
}

std::vector<float> float_array(const json& v, const std::string& where) {
  if (!v.is_array()) throw ManifestError(where, "expected an array of numbers");
  std::vector<float> out;
  out.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number())
      throw ManifestError(where + "[" + std::to_string(i) + "]", "expected a number");
    double x = v[i].get<double>();
    if (!std::isfinite(x))
      throw ManifestError(where + "[" + std::to_string(i) + "]", "value is not finite");
    out.push_back(static_cast<float>(x));
  }
  return out;
}

bool carries_text(ElementType t) {
  return t == ElementType::Label || t == ElementType::TextBox || t == ElementType::WindowName ||
         t == ElementType::Window;
}

}  // namespace

const std::array<ElementType, kNumElementTypes>& all_element_types() { return kAllTypes; }

std::string_view type_name(ElementType t) { return kTypeNames[static_cast<std::size_t>(t)]; }

std::optional<ElementType> parse_element_type(std::string_view name) {
  const std::string key = lower(name);
  for (std::size_t i = 0; i < kNumElementTypes; ++i)
    if (lower(kTypeNames[i]) == key) return kAllTypes[i];
  return std::nullopt;
}

bool is_interactive(ElementType t) {
  switch (t) {
    case ElementType::Button:
    case ElementType::Dropdown:
    case ElementType::MenuItem:
    case ElementType::RadioButton:
    case ElementType::Links:
    case ElementType::CheckBox:
    case ElementType::OptionsButton:
    case ElementType::IconButton:
    case ElementType::TextBox:
    case ElementType::DatePicker:
      return true;
    default:
      return false;
  }
}

std::string valid_type_list() {
  std::string out;
  for (auto n : kTypeNames) {
    if (!out.empty()) out += ", ";
    out += n;
  }
  return out;
}

double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double center_distance(const BBox& a, const BBox& b) {
  return std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
}

std::array<int, kNumElementTypes> DetectionManifest::type_counts() const {
  std::array<int, kNumElementTypes> counts{};
  for (const auto& e : elements) ++counts[static_cast<std::size_t>(e.type)];
  return counts;
}

void validate_and_clamp(DetectionManifest& m, const LoadOptions& opts) {
  if (m.screen_id.empty()) throw ManifestError("screen_id", "must be a non-empty string");
  if (!(m.width > 0)) throw ManifestError("width", "must be > 0");
  if (!(m.height > 0)) throw ManifestError("height", "must be > 0");

  std::vector<Detection> kept;
  kept.reserve(m.elements.size());
  for (std::size_t i = 0; i < m.elements.size(); ++i) {
    auto& d = m.elements[i];
    const std::string where = "elements[" + std::to_string(i) + "] (" +
                              std::string(type_name(d.type)) + ")";
    auto& b = d.bbox;
    if (!std::isfinite(b.x_min) || !std::isfinite(b.y_min) || !std::isfinite(b.x_max) ||
        !std::isfinite(b.y_max))
      throw ManifestError(where, "bbox has non-finite coordinates");
    if (!(b.x_min < b.x_max)) throw ManifestError(where, "bbox requires x_min < x_max");
    if (!(b.y_min < b.y_max)) throw ManifestError(where, "bbox requires y_min < y_max");
    if (!(d.confidence >= 0.0 && d.confidence <= 1.0))
      throw ManifestError(where, "confidence must lie in [0,1]");

    b.x_min = std::clamp(b.x_min, 0.0, m.width);
    b.x_max = std::clamp(b.x_max, 0.0, m.width);
    b.y_min = std::clamp(b.y_min, 0.0, m.height);
    b.y_max = std::clamp(b.y_max, 0.0, m.height);
    if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max))
      throw ManifestError(where, "bbox lies outside the screen");

    if (d.confidence < opts.confidence_threshold) continue;
    kept.push_back(std::move(d));
  }
  m.elements = std::move(kept);
}

DetectionManifest load_manifest(std::string_view raw, const LoadOptions& opts) {
  json doc;
  try {
    doc = json::parse(raw.begin(), raw.end());
  } catch (const json::parse_error& e) {
    // nlohmann reports the byte just past the offending token.
    const std::size_t at = e.byte > 0 ? e.byte - 1 : 0;
    throw ManifestError(line_col(raw, at), "malformed manifest JSON");
  }
  if (!doc.is_object()) throw ManifestError("", "manifest must be a JSON object");

  if (auto it = doc.find("schema_version"); it != doc.end()) {
    if (!it->is_number_integer() || it->get<int>() != kManifestSchemaVersion)
      throw ManifestError("schema_version", "unsupported schema version (expected " +
                                                std::to_string(kManifestSchemaVersion) + ")");
  }

  DetectionManifest m;
  auto sid = doc.find("screen_id");
  if (sid == doc.end() || !sid->is_string())
    throw ManifestError("screen_id", "missing or not a string");
  m.screen_id = sid->get<std::string>();
  m.width = require_number(doc, "width", "");
  m.height = require_number(doc, "height", "");

  auto els = doc.find("elements");
  if (els == doc.end() || !els->is_array())
    throw ManifestError("elements", "missing or not an array");
  for (std::size_t i = 0; i < els->size(); ++i) {
    const auto& e = (*els)[i];
    const std::string where = "elements[" + std::to_string(i) + "]";
    if (!e.is_object()) throw ManifestError(where, "expected an object");
    Detection d;
    auto t = e.find("type");
    if (t == e.end() || !t->is_string()) throw ManifestError(where + ".type", "missing or not a string");
    auto parsed = parse_element_type(t->get<std::string>());
    if (!parsed)
      throw ManifestError(where + ".type", "unknown element type '" + t->get<std::string>() +
                                               "' (valid: " + valid_type_list() + ")");
    d.type = *parsed;
    auto bb = e.find("bbox");
    if (bb == e.end() || !bb->is_array() || bb->size() != 4)
      throw ManifestError(where + ".bbox", "expected [x_min, y_min, x_max, y_max]");
    for (std::size_t k = 0; k < 4; ++k)
      if (!(*bb)[k].is_number()) throw ManifestError(where + ".bbox", "coordinates must be numbers");
    d.bbox = {(*bb)[0].get<double>(), (*bb)[1].get<double>(), (*bb)[2].get<double>(),
              (*bb)[3].get<double>()};
    if (auto c = e.find("confidence"); c != e.end()) {
      if (!c->is_number()) throw ManifestError(where + ".confidence", "expected a number");
      d.confidence = c->get<double>();
    }
    if (auto tx = e.find("text"); tx != e.end() && !tx->is_null()) {
      if (!tx->is_string()) throw ManifestError(where + ".text", "expected a string");
      d.text = tx->get<std::string>();
    }
    m.elements.push_back(std::move(d));
  }

  if (auto v = doc.find("visual_vec"); v != doc.end() && !v->is_null())
    m.visual_vec = float_array(*v, "visual_vec");
  if (auto v = doc.find("semantic_vec"); v != doc.end() && !v->is_null())
    m.semantic_vec = float_array(*v, "semantic_vec");
  if (auto v = doc.find("intent_label"); v != doc.end() && !v->is_null()) {
    if (!v->is_string()) throw ManifestError("intent_label", "expected a string");
    m.intent_label = v->get<std::string>();
  }

  validate_and_clamp(m, opts);
  return m;
}

std::string dump_manifest(const DetectionManifest& m) {
  json doc;
  doc["schema_version"] = kManifestSchemaVersion;
  doc["screen_id"] = m.screen_id;
  doc["width"] = m.width;
  doc["height"] = m.height;
  json els = json::array();
  for (const auto& e : m.elements) {
    json j;
    j["type"] = type_name(e.type);
    j["bbox"] = {e.bbox.x_min, e.bbox.y_min, e.bbox.x_max, e.bbox.y_max};
    j["confidence"] = e.confidence;
    if (e.text) j["text"] = *e.text;
    els.push_back(std::move(j));
  }
  doc["elements"] = std::move(els);
  if (m.visual_vec) doc["visual_vec"] = *m.visual_vec;
  if (m.semantic_vec) doc["semantic_vec"] = *m.semantic_vec;
  if (m.intent_label) doc["intent_label"] = *m.intent_label;
  return doc.dump();
}

TypeVocabulary::TypeVocabulary() {
  std::copy_n(kAllTypes.begin(), kOneHotSlots, slots_.begin());
}

TypeVocabulary::TypeVocabulary(std::array<ElementType, kOneHotSlots> slots) : slots_(slots) {}

TypeVocabulary TypeVocabulary::from_corpus(std::span<const DetectionManifest> corpus) {
  std::array<long, kNumElementTypes> freq{};
  for (const auto& m : corpus)
    for (const auto& e : m.elements) ++freq[static_cast<std::size_t>(e.type)];
  std::array<ElementType, kNumElementTypes> order = kAllTypes;
  std::sort(order.begin(), order.end(), [&](ElementType a, ElementType b) {
    const auto fa = freq[static_cast<std::size_t>(a)];
    const auto fb = freq[static_cast<std::size_t>(b)];
    if (fa != fb) return fa > fb;
    return type_name(a) < type_name(b);
  });
  std::array<ElementType, kOneHotSlots> slots{};
  std::copy_n(order.begin(), kOneHotSlots, slots.begin());
  return TypeVocabulary(slots);
}

std::optional<std::size_t> TypeVocabulary::slot(ElementType t) const {
  for (std::size_t i = 0; i < kOneHotSlots; ++i)
    if (slots_[i] == t) return i;
  return std::nullopt;
}

double ScreenDims::diagonal() const { return std::sqrt(width * width + height * height); }

double UiGraph::density() const {
  const double n = static_cast<double>(nodes.size());
  if (nodes.size() < 2) return 0.0;
  return 2.0 * static_cast<double>(edges.size()) / (n * (n - 1.0));
}

double UiGraph::interactive_fraction() const {
  if (nodes.empty()) return 0.0;
  std::size_t k = 0;
  for (const auto& n : nodes) k += is_interactive(n.type) ? 1 : 0;
  return static_cast<double>(k) / static_cast<double>(nodes.size());
}

std::vector<double> extract_features(const DetectionManifest& m, const TypeVocabulary& vocab) {
  const double W = m.width, H = m.height;
  std::vector<double> x(m.elements.size() * kFeatureDim, 0.0);
  for (std::size_t i = 0; i < m.elements.size(); ++i) {
    const auto& e = m.elements[i];
    double* row = &x[i * kFeatureDim];
    const double w = e.bbox.width(), h = e.bbox.height();
    row[0] = e.bbox.cx() / W;
    row[1] = e.bbox.cy() / H;
    row[2] = w / W;
    row[3] = h / H;
    row[4] = (w * h) / (W * H);
    row[5] = std::clamp(w / h, 0.0, 10.0) / 10.0;
    if (auto s = vocab.slot(e.type)) row[6 + *s] = 1.0;
    row[15] = is_interactive(e.type) ? 1.0 : 0.0;
  }
  return x;
}

bool edge_criterion(const BBox& a, const BBox& b, const ScreenDims& dims) {
  return center_distance(a, b) < dims.distance_threshold() || iou(a, b) > kIouThreshold;
}

double edge_weight(const BBox& a, ElementType ta, const BBox& b, ElementType tb,
                   const ScreenDims& dims) {
  const double dist_sim = std::max(0.0, 1.0 - center_distance(a, b) / dims.distance_threshold());
  const double type_sim = ta == tb ? 1.0 : 0.0;
  return kWeightDistance * dist_sim + kWeightType * type_sim + kWeightIou * iou(a, b);
}

UiGraph build_graph(const DetectionManifest& m, const TypeVocabulary& vocab) {
  if (m.elements.empty()) throw ManifestError(m.screen_id, "cannot build a graph from an empty manifest");
  UiGraph g;
  g.dims = {m.width, m.height};
  const std::size_t n = m.elements.size();
  g.nodes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = m.elements[i];
    Node node{i, e.type, e.bbox, std::string(type_name(e.type))};
    if (carries_text(e.type) && e.text) node.text = *e.text;
    g.nodes.push_back(std::move(node));
  }
  g.features = extract_features(m, vocab);
  g.adjacency.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto& a = m.elements[i];
      const auto& b = m.elements[j];
      if (!edge_criterion(a.bbox, b.bbox, g.dims)) continue;
      const double w = edge_weight(a.bbox, a.type, b.bbox, b.type, g.dims);
      g.adjacency[i * n + j] = w;
      g.adjacency[j * n + i] = w;
      g.edges.push_back({i, j, w});
    }
  }
  return g;
}

}  // namespace uisearch::graph
