#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "../support/fixtures.hpp"
#include "uisearch/ui_graph.hpp"

using namespace uisearch::graph;
using uisearch::testkit::det;
using uisearch::testkit::random_manifest;

namespace {

DetectionManifest screen(double w, double h) {
  DetectionManifest m;
  m.screen_id = "s";
  m.width = w;
  m.height = h;
  return m;
}

// Independent restatement of the edge rule for the pairwise oracle.
bool oracle_edge(const BBox& a, const BBox& b, double W, double H) {
  const double dx = (a.x_min + a.x_max) / 2 - (b.x_min + b.x_max) / 2;
  const double dy = (a.y_min + a.y_max) / 2 - (b.y_min + b.y_max) / 2;
  const double d = std::sqrt(dx * dx + dy * dy);
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
  return d < 0.25 * std::sqrt(W * W + H * H) || inter / uni > 0.1;
}

}  // namespace

TEST(Manifest, MinimalSingleButton) {
  const auto m = load_manifest(
      R"({"screen_id":"a","width":1920,"height":1080,"elements":[{"type":"Button","bbox":[0,0,100,50],"confidence":0.9}]})");
  ASSERT_EQ(m.elements.size(), 1u);
  EXPECT_EQ(m.elements[0].type, ElementType::Button);
  EXPECT_EQ(m.elements[0].bbox, (BBox{0, 0, 100, 50}));
}

TEST(Manifest, InvertedBoxNamesElement) {
  try {
    load_manifest(
        R"({"screen_id":"a","width":100,"height":100,"elements":[{"type":"Label","bbox":[1,1,5,5]},{"type":"Button","bbox":[50,0,10,20]}]})");
    FAIL() << "expected rejection";
  } catch (const ManifestError& e) {
    EXPECT_NE(std::string(e.what()).find("elements[1]"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("Button"), std::string::npos);
  }
}

TEST(Manifest, ClampsToScreen) {
  const auto m = load_manifest(
      R"({"screen_id":"a","width":1920,"height":1080,"elements":[{"type":"Icon","bbox":[1900,1000,2000,1200]}]})");
  EXPECT_EQ(m.elements[0].bbox, (BBox{1900, 1000, 1920, 1080}));
}

TEST(Manifest, SyntaxErrorCarriesLineAndColumn) {
  try {
    load_manifest("{\n  \"screen_id\": \"a\",\n  \"width\": ,\n}");
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_NE(e.where().find("line 3"), std::string::npos) << e.where();
  }
}

TEST(Manifest, MissingFieldNamesPath) {
  try {
    load_manifest(R"({"screen_id":"a","width":10,"height":10,"elements":[{"type":"Label"}]})");
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.where(), "elements[0].bbox");
  }
}

TEST(Manifest, UnknownTypeListsValidTypes) {
  try {
    load_manifest(R"({"screen_id":"a","width":10,"height":10,"elements":[{"type":"Widget","bbox":[0,0,1,1]}]})");
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_NE(std::string(e.what()).find("DatePicker"), std::string::npos);
  }
}

TEST(Manifest, LowConfidenceDropped) {
  const auto m = load_manifest(
      R"({"screen_id":"a","width":10,"height":10,"elements":[{"type":"Label","bbox":[0,0,1,1],"confidence":0.2},{"type":"Label","bbox":[0,0,1,1],"confidence":0.25}]})");
  EXPECT_EQ(m.elements.size(), 1u);
}

TEST(Manifest, RejectsBadSchemaVersionAndDims) {
  EXPECT_THROW(load_manifest(R"({"schema_version":2,"screen_id":"a","width":10,"height":10,"elements":[]})"),
               ManifestError);
  EXPECT_THROW(load_manifest(R"({"screen_id":"a","width":0,"height":10,"elements":[]})"), ManifestError);
  EXPECT_THROW(load_manifest(R"({"screen_id":"a","width":10,"height":10,"elements":[{"type":"Label","bbox":[0,0,1,1],"confidence":1.5}]})"),
               ManifestError);
}

TEST(Manifest, DumpRoundTrip) {
  std::mt19937_64 rng(3);
  auto m = random_manifest(rng, 12);
  m.elements[0].text = "hello";
  m.visual_vec = std::vector<float>{0.5f, 0.25f};
  m.intent_label = "login";
  EXPECT_EQ(load_manifest(dump_manifest(m)), m);
}

TEST(Features, HalfScreenButton) {
  auto m = screen(1920, 1080);
  m.elements.push_back(det(ElementType::Button, 0, 0, 960, 540));
  const auto x = extract_features(m, TypeVocabulary{});
  ASSERT_EQ(x.size(), kFeatureDim);
  EXPECT_DOUBLE_EQ(x[0], 0.25);
  EXPECT_DOUBLE_EQ(x[1], 0.25);
  EXPECT_DOUBLE_EQ(x[2], 0.5);
  EXPECT_DOUBLE_EQ(x[3], 0.5);
  EXPECT_DOUBLE_EQ(x[4], 0.25);
  EXPECT_NEAR(x[5], (960.0 / 540.0) / 10.0, 1e-12);
  EXPECT_NEAR(x[5], 0.178, 1e-3);
  EXPECT_DOUBLE_EQ(x[15], 1.0);
}

TEST(Features, FullScreenWindow) {
  auto m = screen(800, 600);
  m.elements.push_back(det(ElementType::Window, 0, 0, 800, 600));
  const auto x = extract_features(m, TypeVocabulary{});
  EXPECT_DOUBLE_EQ(x[0], 0.5);
  EXPECT_DOUBLE_EQ(x[1], 0.5);
  EXPECT_DOUBLE_EQ(x[2], 1.0);
  EXPECT_DOUBLE_EQ(x[3], 1.0);
  EXPECT_DOUBLE_EQ(x[4], 1.0);
  EXPECT_DOUBLE_EQ(x[15], 0.0);
}

TEST(Features, TypeOutsideVocabularyHasZeroOneHot) {
  auto m = screen(100, 100);
  m.elements.push_back(det(ElementType::DatePicker, 10, 10, 30, 20));
  const auto x = extract_features(m, TypeVocabulary{});
  for (std::size_t c = 6; c < 15; ++c) EXPECT_EQ(x[c], 0.0);
  EXPECT_DOUBLE_EQ(x[0], 0.2);
  EXPECT_DOUBLE_EQ(x[15], 1.0);
}

TEST(Features, AspectClampedAndRangesHold) {
  auto m = screen(1000, 1000);
  m.elements.push_back(det(ElementType::Label, 0, 0, 1000, 5));
  const auto x = extract_features(m, TypeVocabulary{});
  EXPECT_DOUBLE_EQ(x[5], 1.0);
  std::mt19937_64 rng(11);
  for (int r = 0; r < 50; ++r) {
    const auto rm = random_manifest(rng, 20);
    const auto f = extract_features(rm, TypeVocabulary{});
    for (std::size_t i = 0; i < rm.elements.size(); ++i) {
      int ones = 0;
      for (std::size_t c = 0; c < kFeatureDim; ++c) {
        EXPECT_GE(f[i * kFeatureDim + c], 0.0);
        EXPECT_LE(f[i * kFeatureDim + c], 1.0);
        if (c >= 6 && c < 15 && f[i * kFeatureDim + c] != 0) ++ones;
      }
      EXPECT_LE(ones, 1);
    }
  }
}

TEST(Vocabulary, TopNineWithAlphabeticalTies) {
  std::vector<DetectionManifest> corpus(1, screen(100, 100));
  auto& els = corpus[0].elements;
  for (int i = 0; i < 5; ++i) els.push_back(det(ElementType::Window, 0, 0, 1, 1));
  for (int i = 0; i < 3; ++i) els.push_back(det(ElementType::TextBox, 0, 0, 1, 1));
  els.push_back(det(ElementType::Table, 0, 0, 1, 1));
  const auto v = TypeVocabulary::from_corpus(corpus);
  EXPECT_EQ(v.slots()[0], ElementType::Window);
  EXPECT_EQ(v.slots()[1], ElementType::TextBox);
  EXPECT_EQ(v.slots()[2], ElementType::Table);
  // Remaining zero-frequency types fill alphabetically: Button, CheckBox, ...
  EXPECT_EQ(v.slots()[3], ElementType::Button);
  EXPECT_EQ(v.slots()[4], ElementType::CheckBox);
  EXPECT_EQ(v.slots()[5], ElementType::DatePicker);
}

TEST(EdgeCriterion, DistanceThreshold) {
  const ScreenDims dims{1000, 1000};
  EXPECT_NEAR(dims.distance_threshold(), 353.5533905932738, 1e-9);
  EXPECT_TRUE(edge_criterion({0, 0, 10, 10}, {300, 0, 310, 10}, dims));
  EXPECT_FALSE(edge_criterion({0, 0, 10, 10}, {400, 0, 410, 10}, dims));
  EXPECT_TRUE(edge_criterion({700, 700, 990, 990}, {700, 700, 990, 990}, {10000, 10000}));
}

TEST(EdgeWeight, ArithmeticCases) {
  const ScreenDims dims{1000, 1000};
  const double half = dims.distance_threshold() / 2;
  const BBox a{0, 0, 10, 10};
  const BBox b{half, 0, half + 10, 10};
  EXPECT_DOUBLE_EQ(edge_weight(a, ElementType::Button, a, ElementType::Button, dims), 1.0);
  EXPECT_NEAR(edge_weight(a, ElementType::Button, b, ElementType::Button, dims), 0.6, 1e-12);
  EXPECT_NEAR(edge_weight(a, ElementType::Button, b, ElementType::Label, dims), 0.3, 1e-12);
}

TEST(Graph, SingleElement) {
  auto m = screen(100, 100);
  m.elements.push_back(det(ElementType::Button, 0, 0, 10, 10));
  const auto g = build_graph(m);
  EXPECT_EQ(g.num_nodes(), 1u);
  EXPECT_TRUE(g.edges.empty());
  EXPECT_EQ(g.features.size(), kFeatureDim);
  EXPECT_EQ(g.adj(0, 0), 0.0);
}

TEST(Graph, EmptyManifestRejected) {
  EXPECT_THROW(build_graph(screen(100, 100)), ManifestError);
}

TEST(Graph, OverlappingButtons) {
  auto m = screen(2000, 2000);
  m.elements.push_back(det(ElementType::Button, 100, 100, 200, 150));
  m.elements.push_back(det(ElementType::Button, 120, 110, 220, 160));
  const auto g = build_graph(m);
  ASSERT_EQ(g.edges.size(), 1u);
  // centres 22.36 apart, IoU = 80*40 / (2*5000 - 3200)
  const double d = std::sqrt(20.0 * 20 + 10.0 * 10);
  const double theta = 0.25 * std::sqrt(2.0) * 2000;
  const double iou = 3200.0 / 6800.0;
  EXPECT_NEAR(g.edges[0].weight, 0.6 * (1 - d / theta) + 0.3 + 0.1 * iou, 1e-12);
  EXPECT_EQ(g.adj(0, 1), g.adj(1, 0));
}

TEST(Graph, NodeTextRules) {
  auto m = screen(100, 100);
  m.elements.push_back(det(ElementType::Label, 0, 0, 10, 10));
  m.elements[0].text = "Username";
  m.elements.push_back(det(ElementType::Button, 0, 0, 10, 10));
  m.elements[1].text = "ignored";
  m.elements.push_back(det(ElementType::TextBox, 0, 0, 10, 10));
  const auto g = build_graph(m);
  EXPECT_EQ(g.nodes[0].text, "Username");
  EXPECT_EQ(g.nodes[1].text, "Button");
  EXPECT_EQ(g.nodes[2].text, "TextBox");
}

TEST(GraphProperty, EdgesMatchPairwiseOracle) {
  std::mt19937_64 rng(5);
  for (int r = 0; r < 100; ++r) {
    const auto m = random_manifest(rng, 1 + r % 50);
    const auto g = build_graph(m);
    const std::size_t n = g.num_nodes();
    std::size_t expected = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_EQ(g.adj(i, j), g.adj(j, i));
        if (i == j) {
          EXPECT_EQ(g.adj(i, i), 0.0);
          continue;
        }
        const bool e = oracle_edge(m.elements[i].bbox, m.elements[j].bbox, m.width, m.height);
        EXPECT_EQ(g.adj(i, j) > 0, e);
        if (e) {
          EXPECT_GT(g.adj(i, j), 0.0);
          EXPECT_LE(g.adj(i, j), 1.0);
        }
        if (e && i < j) ++expected;
      }
    EXPECT_EQ(g.edges.size(), expected);
  }
}

TEST(GraphProperty, SymmetricRules) {
  std::mt19937_64 rng(8);
  for (int r = 0; r < 200; ++r) {
    const auto m = random_manifest(rng, 2);
    const auto& a = m.elements[0];
    const auto& b = m.elements[1];
    const ScreenDims dims{m.width, m.height};
    EXPECT_EQ(edge_criterion(a.bbox, b.bbox, dims), edge_criterion(b.bbox, a.bbox, dims));
    EXPECT_DOUBLE_EQ(edge_weight(a.bbox, a.type, b.bbox, b.type, dims),
                     edge_weight(b.bbox, b.type, a.bbox, a.type, dims));
  }
}

TEST(GraphProperty, UniformRescaleInvariant) {
  std::mt19937_64 rng(13);
  for (int r = 0; r < 30; ++r) {
    // Power-of-two scale keeps the arithmetic exact.
    const auto m = random_manifest(rng, 15);
    auto s = m;
    s.width *= 4;
    s.height *= 4;
    for (auto& e : s.elements) {
      e.bbox.x_min *= 4;
      e.bbox.x_max *= 4;
      e.bbox.y_min *= 4;
      e.bbox.y_max *= 4;
    }
    const auto g1 = build_graph(m), g2 = build_graph(s);
    ASSERT_EQ(g1.edges.size(), g2.edges.size());
    for (std::size_t k = 0; k < g1.edges.size(); ++k) EXPECT_NEAR(g1.edges[k].weight, g2.edges[k].weight, 1e-12);
    for (std::size_t k = 0; k < g1.features.size(); ++k) EXPECT_NEAR(g1.features[k], g2.features[k], 1e-12);
  }
}

TEST(GraphProperty, TranslationMovesOnlyCentres) {
  std::mt19937_64 rng(21);
  for (int r = 0; r < 30; ++r) {
    auto m = random_manifest(rng, 10, 1000, 1000);
    for (auto& e : m.elements) {
      e.bbox.x_max = e.bbox.x_min + (e.bbox.x_max - e.bbox.x_min) * 0.5;
      e.bbox.y_max = e.bbox.y_min + (e.bbox.y_max - e.bbox.y_min) * 0.5;
      e.bbox.x_min *= 0.5;
      e.bbox.x_max *= 0.5;
      e.bbox.y_min *= 0.5;
      e.bbox.y_max *= 0.5;
    }
    auto t = m;
    for (auto& e : t.elements) {
      e.bbox.x_min += 64;
      e.bbox.x_max += 64;
      e.bbox.y_min += 32;
      e.bbox.y_max += 32;
    }
    const auto g1 = build_graph(m), g2 = build_graph(t);
    ASSERT_EQ(g1.edges.size(), g2.edges.size());
    for (std::size_t k = 0; k < g1.edges.size(); ++k) EXPECT_NEAR(g1.edges[k].weight, g2.edges[k].weight, 1e-9);
    for (std::size_t i = 0; i < g1.num_nodes(); ++i)
      for (std::size_t c = 2; c < kFeatureDim; ++c) EXPECT_NEAR(g1.feature(i, c), g2.feature(i, c), 1e-12);
  }
}
