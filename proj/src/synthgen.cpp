#include "uisearch/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <unordered_map>

namespace uisearch::synth {

namespace {

using graph::ElementType;
namespace fs = std::filesystem;

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ElementRecipe recipe(ElementType t, double x0, double y0, double x1, double y1, Arrangement a, double w,
                     double h, int lo, int hi, int def, std::vector<std::string> texts = {}, int columns = 1) {
  return {t, x0, y0, x1, y1, a, columns, w, h, lo, hi, def, std::move(texts)};
}

TemplateSpec make(std::string label, std::string title, std::uint64_t seed, std::vector<ElementRecipe> body) {
  TemplateSpec t;
  t.intent_label = std::move(label);
  t.seed = seed;
  t.elements.push_back(recipe(ElementType::Window, 0, 0, 1, 1, Arrangement::Row, 1, 1, 1, 1, 1));
  t.elements.push_back(
      recipe(ElementType::WindowName, 0.02, 0.01, 0.4, 0.06, Arrangement::Row, 0.3, 0.04, 1, 1, 1, {std::move(title)}));
  for (auto& r : body) t.elements.push_back(std::move(r));
  return t;
}

std::string_view arrangement_name(Arrangement a) {
  switch (a) {
    case Arrangement::Column: return "column";
    case Arrangement::Row: return "row";
    case Arrangement::Grid: return "grid";
  }
  return "column";
}

Arrangement parse_arrangement(const std::string& s) {
  if (s == "column") return Arrangement::Column;
  if (s == "row") return Arrangement::Row;
  if (s == "grid") return Arrangement::Grid;
  throw std::invalid_argument("unknown arrangement '" + s + "'");
}

// Slot centre as a fraction of the screen; slots are laid out for count_max.
std::pair<double, double> slot_centre(const ElementRecipe& r, int slot) {
  const int cap = std::max(1, r.count_max);
  switch (r.arrangement) {
    case Arrangement::Column: {
      const double pitch = (r.y1 - r.y0) / cap;
      return {(r.x0 + r.x1) / 2, r.y0 + (slot + 0.5) * pitch};
    }
    case Arrangement::Row: {
      const double pitch = (r.x1 - r.x0) / cap;
      return {r.x0 + (slot + 0.5) * pitch, (r.y0 + r.y1) / 2};
    }
    case Arrangement::Grid: {
      const int cols = std::max(1, r.columns);
      const int rows = (cap + cols - 1) / cols;
      return {r.x0 + (slot % cols + 0.5) * (r.x1 - r.x0) / cols, r.y0 + (slot / cols + 0.5) * (r.y1 - r.y0) / rows};
    }
  }
  return {0.5, 0.5};
}

graph::BBox clamp_box(double cx, double cy, double bw, double bh, double W, double H) {
  bw = std::clamp(bw, 2.0, W);
  bh = std::clamp(bh, 2.0, H);
  double x0 = std::clamp(cx - bw / 2, 0.0, W - bw);
  double y0 = std::clamp(cy - bh / 2, 0.0, H - bh);
  return {x0, y0, x0 + bw, y0 + bh};
}

graph::DetectionManifest build(const TemplateSpec& spec, const Jitter& jit, std::mt19937_64& rng, std::string id) {
  graph::DetectionManifest m;
  m.screen_id = std::move(id);
  m.width = spec.width;
  m.height = spec.height;
  m.intent_label = spec.intent_label;
  const double W = spec.width, H = spec.height;
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const bool noisy = jit.position_sigma > 0 || jit.size_sigma > 0 || jit.drop_prob > 0 || jit.extra_prob > 0;

  for (const auto& r : spec.elements) {
    int count = r.count_default;
    if (jit.vary_counts) count = std::uniform_int_distribution<int>(r.count_min, r.count_max)(rng);
    for (int s = 0; s < count; ++s) {
      const bool keep = r.type == ElementType::Window || (s == 0 && r.count_min >= 1);
      if (!keep && jit.drop_prob > 0 && u01(rng) < jit.drop_prob) continue;
      graph::Detection d;
      d.type = r.type;
      if (r.type == ElementType::Window) {
        d.bbox = {0, 0, W, H};
      } else {
        auto [fx, fy] = slot_centre(r, s);
        double cx = fx * W, cy = fy * H, bw = r.w * W, bh = r.h * H;
        if (jit.position_sigma > 0) {
          cx += gauss(rng) * jit.position_sigma * W;
          cy += gauss(rng) * jit.position_sigma * H;
        }
        if (jit.size_sigma > 0) {
          bw = std::max(0.005 * W, bw + gauss(rng) * jit.size_sigma * W);
          bh = std::max(0.005 * H, bh + gauss(rng) * jit.size_sigma * H);
        }
        d.bbox = clamp_box(cx, cy, bw, bh, W, H);
      }
      d.confidence = noisy ? 0.6 + 0.4 * u01(rng) : 1.0;
      if (!r.texts.empty()) d.text = r.texts[static_cast<std::size_t>(s) % r.texts.size()];
      m.elements.push_back(std::move(d));
    }
  }
  static const ElementType kDecor[] = {ElementType::Icon, ElementType::Label, ElementType::Links};
  for (int extra = 0; extra < 3 && jit.extra_prob > 0 && u01(rng) < jit.extra_prob; ++extra) {
    graph::Detection d;
    d.type = kDecor[std::uniform_int_distribution<int>(0, 2)(rng)];
    const double bw = (d.type == ElementType::Icon ? 0.03 : 0.09) * W;
    const double bh = (d.type == ElementType::Icon ? 0.045 : 0.03) * H;
    d.bbox = clamp_box(u01(rng) * W, u01(rng) * H, bw, bh, W, H);
    d.confidence = 0.6 + 0.4 * u01(rng);
    if (d.type == ElementType::Label) d.text = "note";
    m.elements.push_back(std::move(d));
  }
  m.visual_vec = visual_occupancy(m);
  graph::validate_and_clamp(m);
  return m;
}

std::string screen_id(const std::string& label, std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "_%05zu", i);
  return label + buf;
}

}  // namespace

const std::vector<std::string>& intent_labels() {
  static const std::vector<std::string> labels = {"login",    "checkout",       "dashboard",
                                                  "settings", "search-results", "data-entry"};
  return labels;
}

std::vector<TemplateSpec> default_templates() {
  using A = Arrangement;
  using T = ElementType;
  std::vector<TemplateSpec> out;
  out.push_back(make("login", "Sign in", 101,
                     {recipe(T::Icon, 0.45, 0.2, 0.55, 0.3, A::Row, 0.06, 0.09, 1, 1, 1),
                      recipe(T::TextBox, 0.38, 0.34, 0.62, 0.5, A::Column, 0.22, 0.05, 2, 2, 2,
                             {"user name", "password"}),
                      recipe(T::CheckBox, 0.38, 0.52, 0.42, 0.56, A::Row, 0.02, 0.03, 1, 1, 1),
                      recipe(T::Button, 0.4, 0.58, 0.6, 0.64, A::Row, 0.09, 0.06, 1, 2, 1),
                      recipe(T::Links, 0.38, 0.66, 0.62, 0.7, A::Row, 0.1, 0.03, 1, 2, 1)}));
  out.push_back(make("checkout", "Checkout", 102,
                     {recipe(T::Label, 0.05, 0.12, 0.3, 0.9, A::Column, 0.2, 0.035, 5, 8, 6,
                             {"Subtotal", "Shipping", "Tax", "Discount", "Total", "Card ending", "Billing address",
                              "Delivery date"}),
                      recipe(T::Table, 0.35, 0.12, 0.95, 0.7, A::Row, 0.58, 0.5, 1, 1, 1),
                      recipe(T::RadioButton, 0.35, 0.75, 0.65, 0.8, A::Row, 0.025, 0.035, 2, 4, 3),
                      recipe(T::Button, 0.7, 0.88, 0.95, 0.95, A::Row, 0.1, 0.05, 1, 2, 1)}));
  out.push_back(make("dashboard", "Dashboard", 103,
                     {recipe(T::MenuItem, 0.0, 0.1, 0.12, 0.95, A::Column, 0.11, 0.05, 6, 9, 7),
                      recipe(T::Icon, 0.15, 0.1, 0.98, 0.35, A::Grid, 0.03, 0.05, 8, 12, 10, {}, 6),
                      recipe(T::Table, 0.15, 0.4, 0.98, 0.98, A::Grid, 0.38, 0.25, 2, 4, 3, {}, 2),
                      recipe(T::IconButton, 0.8, 0.01, 0.98, 0.07, A::Row, 0.03, 0.045, 3, 5, 4)}));
  out.push_back(make("settings", "Settings", 104,
                     {recipe(T::MenuItem, 0.0, 0.1, 0.16, 0.5, A::Column, 0.14, 0.05, 4, 6, 5),
                      recipe(T::CheckBox, 0.2, 0.12, 0.24, 0.45, A::Column, 0.025, 0.035, 4, 6, 5),
                      recipe(T::TextBox, 0.28, 0.12, 0.5, 0.45, A::Column, 0.2, 0.05, 3, 5, 4,
                             {"display name", "email", "phone", "time zone", "language"}),
                      recipe(T::Dropdown, 0.2, 0.48, 0.5, 0.54, A::Row, 0.13, 0.05, 2, 3, 2),
                      recipe(T::OptionsButton, 0.52, 0.12, 0.56, 0.18, A::Row, 0.03, 0.045, 1, 1, 1)}));
  out.push_back(make("search-results", "Search results", 105,
                     {recipe(T::IconButton, 0.71, 0.08, 0.76, 0.14, A::Row, 0.035, 0.05, 1, 1, 1),
                      recipe(T::Links, 0.03, 0.16, 0.48, 0.98, A::Column, 0.4, 0.025, 14, 20, 17),
                      recipe(T::Label, 0.52, 0.16, 0.97, 0.98, A::Column, 0.42, 0.025, 14, 20, 17,
                             {"result snippet", "matching result", "item description"}),
                      recipe(T::Icon, 0.2, 0.08, 0.7, 0.14, A::Row, 0.03, 0.05, 1, 2, 1)}));
  out.push_back(make("data-entry", "New record", 106,
                     {recipe(T::Label, 0.02, 0.1, 0.98, 0.95, A::Grid, 0.14, 0.03, 10, 14, 12,
                             {"First name", "Last name", "Employee id", "Department", "Start date", "Manager",
                              "Phone", "Email", "Office", "Notes", "Title", "Location", "Grade", "Cost centre"},
                             4),
                      recipe(T::DatePicker, 0.05, 0.9, 0.4, 0.97, A::Row, 0.14, 0.045, 1, 3, 2),
                      recipe(T::Dropdown, 0.55, 0.9, 0.95, 0.97, A::Row, 0.14, 0.045, 2, 4, 3),
                      recipe(T::TextBox, 0.02, 0.14, 0.98, 0.88, A::Grid, 0.16, 0.045, 7, 9, 8,
                             {"first name", "last name", "id", "department", "manager", "phone", "email", "office",
                              "notes"},
                             4)}));
  return out;
}

nlohmann::json to_json(const TemplateSpec& t) {
  nlohmann::json els = nlohmann::json::array();
  for (const auto& r : t.elements) {
    els.push_back({{"type", graph::type_name(r.type)},
                   {"region", {r.x0, r.y0, r.x1, r.y1}},
                   {"arrangement", arrangement_name(r.arrangement)},
                   {"columns", r.columns},
                   {"size", {r.w, r.h}},
                   {"count", {{"min", r.count_min}, {"max", r.count_max}, {"default", r.count_default}}},
                   {"texts", r.texts}});
  }
  return {{"intent_label", t.intent_label},
          {"width", t.width},
          {"height", t.height},
          {"seed", t.seed},
          {"jitter",
           {{"position_sigma", t.jitter.position_sigma},
            {"size_sigma", t.jitter.size_sigma},
            {"drop_prob", t.jitter.drop_prob},
            {"extra_prob", t.jitter.extra_prob},
            {"vary_counts", t.jitter.vary_counts}}},
          {"elements", els}};
}

TemplateSpec template_from_json(const nlohmann::json& j) {
  TemplateSpec t;
  t.intent_label = j.at("intent_label").get<std::string>();
  t.width = j.at("width").get<double>();
  t.height = j.at("height").get<double>();
  t.seed = j.at("seed").get<std::uint64_t>();
  const auto& jt = j.at("jitter");
  t.jitter = {jt.at("position_sigma").get<double>(), jt.at("size_sigma").get<double>(),
              jt.at("drop_prob").get<double>(), jt.at("extra_prob").get<double>(), jt.at("vary_counts").get<bool>()};
  for (const auto& e : j.at("elements")) {
    ElementRecipe r;
    const auto name = e.at("type").get<std::string>();
    auto ty = graph::parse_element_type(name);
    if (!ty) throw std::invalid_argument("unknown element type '" + name + "' in template " + t.intent_label);
    r.type = *ty;
    const auto& reg = e.at("region");
    r.x0 = reg.at(0).get<double>();
    r.y0 = reg.at(1).get<double>();
    r.x1 = reg.at(2).get<double>();
    r.y1 = reg.at(3).get<double>();
    r.arrangement = parse_arrangement(e.at("arrangement").get<std::string>());
    r.columns = e.at("columns").get<int>();
    r.w = e.at("size").at(0).get<double>();
    r.h = e.at("size").at(1).get<double>();
    r.count_min = e.at("count").at("min").get<int>();
    r.count_max = e.at("count").at("max").get<int>();
    r.count_default = e.at("count").at("default").get<int>();
    r.texts = e.value("texts", std::vector<std::string>{});
    if (r.count_min < 0 || r.count_min > r.count_max || r.count_default < r.count_min ||
        r.count_default > r.count_max)
      throw std::invalid_argument("inconsistent count range for " + name + " in template " + t.intent_label);
    t.elements.push_back(std::move(r));
  }
  return t;
}

std::vector<TemplateSpec> load_templates(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<TemplateSpec> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    out.push_back(template_from_json(nlohmann::json::parse(in)));
  }
  std::sort(out.begin(), out.end(), [](const TemplateSpec& a, const TemplateSpec& b) { return a.seed < b.seed; });
  return out;
}

void write_templates(const fs::path& dir, const std::vector<TemplateSpec>& specs) {
  fs::create_directories(dir);
  for (const auto& t : specs) {
    std::ofstream out(dir / (t.intent_label + ".json"));
    out << to_json(t).dump(2) << "\n";
  }
}

graph::DetectionManifest prototype(const TemplateSpec& spec, const std::string& id) {
  std::mt19937_64 rng(spec.seed);
  return build(spec, Jitter::none(), rng, id);
}

graph::DetectionManifest generate_one(const TemplateSpec& spec, std::size_t i) {
  std::mt19937_64 rng(mix64(spec.seed ^ fnv1a(spec.intent_label)) + i);
  return build(spec, spec.jitter, rng, screen_id(spec.intent_label, i));
}

std::vector<graph::DetectionManifest> generate(const TemplateSpec& spec, std::size_t n) {
  std::vector<graph::DetectionManifest> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_one(spec, i));
  return out;
}

std::vector<graph::DetectionManifest> generate_corpus(const std::vector<TemplateSpec>& specs,
                                                      std::size_t per_template) {
  std::vector<graph::DetectionManifest> out;
  out.reserve(specs.size() * per_template);
  for (const auto& s : specs)
    for (std::size_t i = 0; i < per_template; ++i) out.push_back(generate_one(s, i));
  return out;
}

std::vector<float> visual_occupancy(const graph::DetectionManifest& m) {
  std::vector<double> grid(kVisualGrid * kVisualGrid, 0.0);
  const double cw = m.width / kVisualGrid, ch = m.height / kVisualGrid;
  for (const auto& e : m.elements) {
    if (e.type == ElementType::Window) continue;
    for (int r = 0; r < kVisualGrid; ++r) {
      const double oy = std::min(e.bbox.y_max, (r + 1) * ch) - std::max(e.bbox.y_min, r * ch);
      if (oy <= 0) continue;
      for (int c = 0; c < kVisualGrid; ++c) {
        const double ox = std::min(e.bbox.x_max, (c + 1) * cw) - std::max(e.bbox.x_min, c * cw);
        if (ox > 0) grid[static_cast<std::size_t>(r * kVisualGrid + c)] += ox * oy / (cw * ch);
      }
    }
  }
  std::vector<float> out(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) out[i] = static_cast<float>(std::min(1.0, grid[i]));
  return out;
}

// ---- oracle ----

namespace {

bool holds(const query::Predicate& p, const index::TypeCounts& counts) {
  int v = 0;
  if (p.pred.type) {
    v = counts[static_cast<std::size_t>(*p.pred.type)];
  } else {
    for (int c : counts) v += c;
  }
  bool r = false;
  switch (p.pred.op) {
    case index::CountOp::Eq: r = v == p.pred.lo; break;
    case index::CountOp::Lt: r = v < p.pred.lo; break;
    case index::CountOp::Le: r = v <= p.pred.lo; break;
    case index::CountOp::Gt: r = v > p.pred.lo; break;
    case index::CountOp::Ge: r = v >= p.pred.lo; break;
    case index::CountOp::Between: r = p.pred.lo <= v && v <= p.pred.hi; break;
    case index::CountOp::Has: r = v != 0; break;
    case index::CountOp::NotHas: r = v == 0; break;
  }
  return p.negated ? !r : r;
}

std::vector<float> unit(std::vector<float> v) {
  index::normalize(v);
  return v;
}

}  // namespace

std::vector<OracleHit> oracle_search(const OracleCorpus& corpus, const query::QueryAst& ast,
                                     const index::SemEmbedder& embedder) {
  using query::Modality;
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < corpus.docs.size(); ++i) by_id.emplace(corpus.docs[i].screen_id, i);
  const bool cosine = corpus.structural_metric == index::Metric::Cosine;
  auto lookup = [&](const std::string& ref) -> const OracleDoc& {
    auto it = by_id.find(ref);
    if (it == by_id.end()) throw query::UnresolvedRefError("unknown screen_id '" + ref + "'");
    return corpus.docs[it->second];
  };

  std::vector<float> q_struct, q_vis, q_sem, q_text;
  std::size_t q_intent = 0;
  for (const auto& c : ast.clauses) {
    if (auto* s = std::get_if<query::SimilarTo>(&c)) {
      const auto& d = lookup(s->ref);
      if (s->mode == query::Mode::Structural) q_struct = cosine ? unit(d.structural) : d.structural;
      if (s->mode == query::Mode::Semantic) q_sem = unit(d.semantic);
      if (s->mode == query::Mode::Visual) {
        if (!d.visual) throw query::QueryError("screen '" + s->ref + "' has no visual vector");
        q_vis = unit(*d.visual);
      }
    } else if (auto* ic = std::get_if<query::IntentClause>(&c)) {
      auto it = std::find(corpus.intent_labels.begin(), corpus.intent_labels.end(), ic->label);
      if (it == corpus.intent_labels.end()) throw query::QueryError("unknown intent label '" + ic->label + "'");
      q_intent = static_cast<std::size_t>(it - corpus.intent_labels.begin());
    } else if (auto* t = std::get_if<query::TextMatch>(&c)) {
      q_text = unit(embedder.embed_text(t->text));
    }
  }
  const auto w = query::fusion_weights(ast);
  const auto preds = ast.predicates();

  std::vector<OracleHit> hits;
  for (const auto& d : corpus.docs) {
    if (!std::all_of(preds.begin(), preds.end(), [&](const auto& p) { return holds(p, d.counts); })) continue;
    double rho = 0;
    if (w.count() == 0) {
      rho = 1.0;
    } else {
      for (std::size_t m = 0; m < query::kNumModalities; ++m) {
        if (!w.active[m]) continue;
        double s = 0;
        switch (static_cast<Modality>(m)) {
          case Modality::Structural: {
            const auto v = cosine ? unit(d.structural) : d.structural;
            const double raw = corpus.structural_metric == index::Metric::Euclidean ? index::l2_distance(q_struct, v)
                                                                                    : index::dot(q_struct, v);
            s = query::map_score(corpus.structural_metric, raw);
            break;
          }
          case Modality::Visual:
            s = d.visual ? query::map_score(index::Metric::Cosine, index::dot(q_vis, unit(*d.visual))) : 0.0;
            break;
          case Modality::Semantic:
            s = query::map_score(index::Metric::Cosine, index::dot(q_sem, unit(d.semantic)));
            break;
          case Modality::Text:
            s = query::map_score(index::Metric::Cosine, index::dot(q_text, unit(d.semantic)));
            break;
          case Modality::Intent:
            s = std::clamp(static_cast<double>(d.intent_probs.at(q_intent)), 0.0, 1.0);
            break;
        }
        rho += w.lambda[m] * s;
      }
    }
    hits.push_back({d.screen_id, rho});
  }
  std::sort(hits.begin(), hits.end(), [](const OracleHit& a, const OracleHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.screen_id < b.screen_id;
  });
  if (hits.size() > ast.limit) hits.resize(ast.limit);
  return hits;
}

}  // namespace uisearch::synth
