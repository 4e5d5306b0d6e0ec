#pragma once

#include <cmath>
#include <random>
#include <string>

#include "uisearch/ui_graph.hpp"

namespace uisearch::testkit {

// Random boxes scattered over a screen; every type equally likely.
inline graph::DetectionManifest random_manifest(std::mt19937_64& rng, std::size_t n, double w = 1280,
                                                double h = 800, std::string id = "rand") {
  graph::DetectionManifest m;
  m.screen_id = std::move(id);
  m.width = w;
  m.height = h;
  std::uniform_real_distribution<double> ux(0, w), uy(0, h), us(0.03, 0.3);
  std::uniform_int_distribution<int> ut(0, static_cast<int>(graph::kNumElementTypes) - 1);
  for (std::size_t i = 0; i < n; ++i) {
    graph::Detection d;
    d.type = static_cast<graph::ElementType>(ut(rng));
    const double bw = us(rng) * w, bh = us(rng) * h;
    const double x = std::min(ux(rng), w - bw), y = std::min(uy(rng), h - bh);
    d.bbox = {x, y, x + bw, y + bh};
    d.confidence = 0.9;
    m.elements.push_back(d);
  }
  return m;
}

inline graph::Detection det(graph::ElementType t, double x0, double y0, double x1, double y1) {
  graph::Detection d;
  d.type = t;
  d.bbox = {x0, y0, x1, y1};
  return d;
}

}  // namespace uisearch::testkit
