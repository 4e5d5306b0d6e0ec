// Acceptance harness: one PASS/FAIL line per criterion.
//
//   acceptance [--only name,name] [--model checkpoint]
//
// --model skips training and loads a previously trained encoder.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "encoder_layers.hpp"
#include "support/corpus.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/random_query.hpp"
#include "uisearch/encoder.hpp"
#include "uisearch/index.hpp"
#include "uisearch/learning.hpp"
#include "uisearch/query.hpp"
#include "uisearch/service.hpp"
#include "uisearch/synthgen.hpp"
#include "uisearch/ui_graph.hpp"

#include <httplib.h>

using namespace uisearch;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... xs) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, xs...);
  return buf;
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---- shared fixtures ----

std::optional<fs::path> g_model_path;

struct Trained {
  nn::EncoderModel model;
  std::vector<graph::DetectionManifest> manifests;
  index::HybridIndex idx;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained out;
    out.manifests = synth::generate_corpus(synth::default_templates(), 100);
    if (g_model_path) {
      out.model = nn::load_checkpoint(*g_model_path);
    } else {
      auto init = nn::init_model(nn::EncoderConfig{}, graph::TypeVocabulary::from_corpus(out.manifests),
                                 synth::intent_labels());
      const auto examples = service::training_examples(out.manifests, init);
      learn::TrainConfig cfg;
      cfg.epochs = 30;
      const auto t0 = Clock::now();
      auto res = learn::train(examples, std::move(init), cfg, std::nullopt, [&](const learn::EpochLog& e) {
        std::cerr << fmt("  epoch %2d  loss %.4f  positives %zu  %.1fs\n", e.epoch, e.total, e.positives,
                         seconds_since(t0));
      });
      out.model = std::move(res.model);
      const auto ckpt = fs::temp_directory_path() / "uisearch_acceptance_model.ckpt";
      nn::save_checkpoint(ckpt, out.model);
      std::cerr << "  trained model saved to " << ckpt << "\n";
    }
    out.idx = index::HybridIndex(service::index_options(out.model));
    const index::SemEmbedder emb;
    for (const auto& m : out.manifests) out.idx.add(service::make_record(m, out.model, emb));
    out.idx.seal();
    return out;
  }();
  return t;
}

// 20,000 screens cycling through the templates, encoded by the trained model.
const std::vector<index::ScreenRecord>& pool() {
  static const std::vector<index::ScreenRecord> p = [] {
    const auto& t = trained();
    const auto specs = synth::default_templates();
    const index::SemEmbedder emb;
    std::vector<index::ScreenRecord> out;
    out.reserve(20000);
    const auto t0 = Clock::now();
    for (std::size_t i = 0; i < 20000; ++i) {
      out.push_back(service::make_record(synth::generate_one(specs[i % specs.size()], 1000 + i / specs.size()),
                                         t.model, emb));
      if ((i + 1) % 5000 == 0) std::cerr << fmt("  encoded %zu screens  %.1fs\n", i + 1, seconds_since(t0));
    }
    return out;
  }();
  return p;
}

index::HybridIndex index_of(std::size_t n) {
  index::HybridIndex idx(service::index_options(trained().model));
  const auto& p = pool();
  for (std::size_t i = 0; i < n; ++i) idx.add(p[i]);
  idx.seal();
  return idx;
}

synth::OracleCorpus oracle_of(const index::HybridIndex& idx, std::size_t n) {
  synth::OracleCorpus o;
  o.structural_metric = idx.options().structural_metric;
  o.intent_labels = idx.options().intent_labels;
  const auto& p = pool();
  for (std::size_t i = 0; i < n; ++i)
    o.docs.push_back({p[i].screen_id, p[i].structural, p[i].semantic, p[i].visual, p[i].counts, p[i].intent_probs});
  return o;
}

std::vector<std::string> ids_of(const index::HybridIndex& idx) {
  std::vector<std::string> ids;
  for (index::DocId d = 0; d < idx.size(); ++d) ids.push_back(idx.id(d));
  return ids;
}

using Ranked = std::vector<std::pair<std::string, double>>;

Ranked ranked(const std::vector<query::ResultRow>& rows) {
  Ranked out;
  for (const auto& r : rows) out.emplace_back(r.screen_id, r.score);
  return out;
}

Ranked ranked(const std::vector<synth::OracleHit>& hits) {
  Ranked out;
  for (const auto& h : hits) out.emplace_back(h.screen_id, h.score);
  return out;
}

// ---- criteria ----

Outcome parameter_budget() {
  const auto c = nn::count_parameters(nn::init_model(nn::EncoderConfig{}));
  const bool ok = c.gat1 == 9728 && c.gat2 == 263680 && c.gcn == 32832 && c.projection == 12448 && c.core() == 318688;
  return {ok, fmt("gat1 %zu, gat2 %zu, gcn %zu, projection %zu, core %zu", c.gat1, c.gat2, c.gcn, c.projection,
                  c.core())};
}

Outcome memory_formula() {
  const auto r = index::report_memory(20000, 128, 2);
  const std::size_t expected = std::size_t{20000} * 128 * 4 * 2;
  const bool ok = expected == 20480000 && r.dense_bytes == expected && r.dense_bytes_per_family == expected / 2 &&
                  r.dense_bytes_per_family == 4 * r.quantized_bytes;
  return {ok, fmt("dense %zu bytes (%.1f MB), per family %zu, quantized %zu", r.dense_bytes, r.dense_bytes / 1e6,
                  r.dense_bytes_per_family, r.quantized_bytes)};
}

nn::Mat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0, 1);
  nn::Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

nn::EncoderConfig grad_config(std::uint64_t seed) {
  nn::EncoderConfig c;
  c.hidden = 8;
  c.heads = 2;
  c.gcn_out = 4;
  c.proj_in = 4;
  c.proj_hidden = 6;
  c.proj_out = 3;
  c.num_intents = 3;
  c.seed = seed;
  return c;
}

void perturb(nn::EncoderModel& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 0.1);
  nn::for_each_tensor(m.params, [&](const char*, nn::Mat& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += g(rng);
  });
}

graph::UiGraph random_graph(std::mt19937_64& rng, std::size_t n, bool one_family = false) {
  auto m = testkit::random_manifest(rng, n);
  if (one_family)
    for (auto& e : m.elements) e.type = graph::ElementType::Button;
  return graph::build_graph(m);
}

// Every encoder tensor against a random linear functional of (g, p, node_z).
void check_encoder(nn::EncoderModel& model, const graph::UiGraph& g, const nn::ForwardOptions& opts,
                   std::mt19937_64& rng, testkit::GradCheckResult& res) {
  const nn::Vec cg = random_mat(model.config.embedding_dim(), 1, rng).col(0);
  const nn::Vec cp = random_mat(model.config.proj_out, 1, rng).col(0);
  const nn::Mat cz = random_mat(static_cast<Eigen::Index>(g.num_nodes()), model.config.gcn_out, rng);
  nn::ForwardTrace t;
  nn::forward(model, g, opts, &t);
  auto grads = model.params.zeros_like();
  nn::backward(model, t, {cg, cp, cz}, grads);
  auto probe = [&] {
    nn::ForwardTrace tr;
    const auto e = nn::forward(model, g, opts, &tr);
    return std::make_pair(cg.dot(e.g) + cp.dot(e.p) + (cz.array() * e.node_z.array()).sum(),
                          tr.activation_signature());
  };
  std::vector<const nn::Mat*> ana;
  nn::for_each_tensor(grads, [&](const char*, const nn::Mat& m) { ana.push_back(&m); });
  std::size_t k = 0;
  nn::for_each_tensor(model.params, [&](const char* name, nn::Mat& p) {
    const nn::Mat& a = *ana[k++];
    if (std::string(name).rfind("intent", 0) == 0) return;
    testkit::check_coordinates(p, a, testkit::all_coords(p), probe, name, res);
  });
}

Outcome gradient_fidelity() {
  std::mt19937_64 rng(2024);
  std::map<std::string, testkit::GradCheckResult> parts;

  // Whole encoder, eval and dropout modes, graphs of 2..10 nodes.
  for (std::size_t n : {2u, 5u, 7u, 10u}) {
    auto model = nn::init_model(grad_config(n));
    perturb(model, 100 + n);
    const auto g = random_graph(rng, n);
    check_encoder(model, g, {}, rng, parts["encoder"]);
    model.config.dropout = 0.3;
    check_encoder(model, g, {true, n, 1}, rng, parts["encoder+dropout"]);
  }

  // GAT and LayerNorm in isolation, including input gradients.
  {
    const auto g = random_graph(rng, 9);
    const Eigen::Index n = 9, in = 5, heads = 3, dh = 4;
    nn::GatLayer layer{random_mat(in, heads * dh, rng), random_mat(heads, dh, rng), random_mat(heads, dh, rng),
                       random_mat(1, heads * dh, rng)};
    nn::Mat x = random_mat(n, in, rng);
    const nn::Mat c = random_mat(n, heads * dh, rng);
    nn::ForwardTrace t;
    t.neighbours.resize(n, n);
    t.log_weight = nn::Mat::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        const double a = g.adj(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
        t.neighbours(i, j) = i == j || a > 0;
        if (i != j && a > 0) t.log_weight(i, j) = std::log(a);
      }
    nn::ForwardTrace::Gat rec;
    nn::detail::gat_forward(layer, x, t, rec);
    nn::GatLayer grad{nn::Mat::Zero(in, heads * dh), nn::Mat::Zero(heads, dh), nn::Mat::Zero(heads, dh),
                      nn::Mat::Zero(1, heads * dh)};
    const nn::Mat dx = nn::detail::gat_backward(layer, t, rec, c, grad);
    auto probe = [&] {
      nn::ForwardTrace::Gat r;
      nn::detail::gat_forward(layer, x, t, r);
      std::uint64_t h = 1469598103934665603ULL;
      for (const auto& raw : r.raw)
        for (Eigen::Index i = 0; i < raw.size(); ++i) h = (h ^ (raw.data()[i] > 0 ? 1u : 2u)) * 1099511628211ULL;
      return std::make_pair((r.output.array() * c.array()).sum(), h);
    };
    auto& res = parts["gat"];
    testkit::check_coordinates(layer.weight, grad.weight, testkit::all_coords(layer.weight), probe, "weight", res);
    testkit::check_coordinates(layer.att_src, grad.att_src, testkit::all_coords(layer.att_src), probe, "att_src", res);
    testkit::check_coordinates(layer.att_dst, grad.att_dst, testkit::all_coords(layer.att_dst), probe, "att_dst", res);
    testkit::check_coordinates(layer.bias, grad.bias, testkit::all_coords(layer.bias), probe, "bias", res);
    testkit::check_coordinates(x, dx, testkit::all_coords(x), probe, "input", res);

    nn::LayerNorm ln{random_mat(1, 6, rng), random_mat(1, 6, rng)};
    nn::Mat y = random_mat(7, 6, rng);
    const nn::Mat cy = random_mat(7, 6, rng);
    nn::ForwardTrace::Norm nrec;
    nn::detail::layernorm_forward(ln, y, nrec);
    nn::LayerNorm lgrad{nn::Mat::Zero(1, 6), nn::Mat::Zero(1, 6)};
    const nn::Mat dy = nn::detail::layernorm_backward(ln, nrec, cy, lgrad);
    auto lprobe = [&] {
      nn::ForwardTrace::Norm r;
      return std::make_pair((nn::detail::layernorm_forward(ln, y, r).array() * cy.array()).sum(), std::uint64_t{0});
    };
    auto& lres = parts["layernorm"];
    testkit::check_coordinates(ln.gamma, lgrad.gamma, testkit::all_coords(ln.gamma), lprobe, "gamma", lres);
    testkit::check_coordinates(ln.beta, lgrad.beta, testkit::all_coords(ln.beta), lprobe, "beta", lres);
    testkit::check_coordinates(y, dy, testkit::all_coords(y), lprobe, "input", lres);
  }

  // Intent head.
  {
    auto model = nn::init_model(grad_config(3));
    nn::Mat g = random_mat(model.config.embedding_dim(), 1, rng);
    const nn::Vec c = random_mat(model.config.num_intents, 1, rng).col(0);
    auto grads = model.params.zeros_like();
    const nn::Vec dg = nn::intent_backward(model, g.col(0), c, grads);
    auto probe = [&] { return std::make_pair(c.dot(nn::intent_logits(model, g.col(0))), std::uint64_t{0}); };
    auto& res = parts["intent-head"];
    testkit::check_coordinates(model.params.intent.weight, grads.intent.weight,
                               testkit::all_coords(model.params.intent.weight), probe, "weight", res);
    testkit::check_coordinates(model.params.intent.bias, grads.intent.bias,
                               testkit::all_coords(model.params.intent.bias), probe, "bias", res);
    testkit::check_coordinates(g, dg, testkit::all_coords(g), probe, "g", res);
  }

  // Each loss term against its own input.
  {
    nn::Mat p = random_mat(8, 5, rng);
    for (Eigen::Index i = 0; i < p.rows(); ++i) p.row(i).normalize();
    learn::PairLabels l;
    l.positives = {{0, 1}, {1, 0}, {2, 7}, {3, 4}, {5, 6}};
    const auto r = learn::contrastive_loss(p, l, 0.1);
    testkit::check_coordinates(
        p, r.grad, testkit::all_coords(p),
        [&] { return std::make_pair(learn::contrastive_loss(p, l, 0.1).loss, std::uint64_t{0}); }, "projected",
        parts["contrastive"]);

    const auto g = random_graph(rng, 10);
    nn::Mat z = random_mat(10, 4, rng);
    const auto rr = learn::reconstruction_loss(z, g);
    testkit::check_coordinates(
        z, rr.grad, testkit::all_coords(z),
        [&] { return std::make_pair(learn::reconstruction_loss(z, g).loss, std::uint64_t{0}); }, "node_z",
        parts["reconstruction"]);

    nn::Mat logits = random_mat(6, 1, rng);
    const auto ri = learn::intent_cross_entropy(logits.col(0), 4);
    testkit::check_coordinates(
        logits, ri.grad, testkit::all_coords(logits),
        [&] { return std::make_pair(learn::intent_cross_entropy(logits.col(0), 4).loss, std::uint64_t{0}); },
        "logits", parts["intent-ce"]);
  }

  // Composite objective through every parameter, each term isolated and all together.
  {
    std::vector<learn::TrainingExample> corpus;
    for (std::size_t i = 0; i < 4; ++i) corpus.push_back({random_graph(rng, 3 + 2 * i, i % 2 == 0), i % 3});
    std::vector<const learn::TrainingExample*> batch;
    for (const auto& e : corpus) batch.push_back(&e);
    struct Term {
      const char* name;
      double tau, li, lr;
    };
    for (const auto& term : {Term{"total:contrastive", 0.1, 0.0, 0.0}, Term{"total:all", 0.1, 0.5, 0.5}}) {
      auto model = nn::init_model(grad_config(11));
      perturb(model, 12);
      learn::LossConfig cfg;
      cfg.tau = term.tau;
      cfg.lambda_intent = term.li;
      cfg.lambda_recon = term.lr;
      nn::ForwardOptions opts;
      opts.train = true;
      opts.step = 4;
      const auto bl = learn::total_loss(model, batch, 0.55, 0.5, cfg, opts);
      auto probe = [&] {
        const auto b = learn::total_loss(model, batch, 0.55, 0.5, cfg, opts);
        std::uint64_t sig = 0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
          nn::ForwardTrace t;
          auto o = opts;
          o.slot = i;
          nn::forward(model, batch[i]->graph, o, &t);
          sig = sig * 1099511628211ULL ^ t.activation_signature();
        }
        return std::make_pair(b.total, sig);
      };
      std::vector<const nn::Mat*> ana;
      nn::for_each_tensor(bl.grads, [&](const char*, const nn::Mat& m) { ana.push_back(&m); });
      std::size_t k = 0;
      nn::for_each_tensor(model.params, [&](const char* name, nn::Mat& p) {
        testkit::check_coordinates(p, *ana[k++], testkit::all_coords(p), probe, name, parts[term.name]);
      });
    }
  }

  bool ok = true;
  std::ostringstream os;
  double worst = 0;
  std::size_t checked = 0, skipped = 0;
  for (const auto& [name, r] : parts) {
    ok = ok && r.max_rel < 1e-4 && r.checked > 0 && r.checked >= 10 * r.skipped;
    worst = std::max(worst, r.max_rel);
    checked += r.checked;
    skipped += r.skipped;
    if (r.max_rel >= 1e-4) os << "; " << name << " " << r.worst;
  }
  return {ok, fmt("%zu groups, %zu coordinates (%zu skipped at kinks), max rel err %.2e", parts.size(), checked,
                  skipped, worst) + os.str()};
}

// Restated edge rule and weight, computed from raw boxes.
std::optional<double> oracle_edge(const graph::Detection& a, const graph::Detection& b, double W, double H) {
  const double acx = 0.5 * (a.bbox.x_min + a.bbox.x_max), acy = 0.5 * (a.bbox.y_min + a.bbox.y_max);
  const double bcx = 0.5 * (b.bbox.x_min + b.bbox.x_max), bcy = 0.5 * (b.bbox.y_min + b.bbox.y_max);
  const double d = std::hypot(acx - bcx, acy - bcy);
  const double ix = std::max(0.0, std::min(a.bbox.x_max, b.bbox.x_max) - std::max(a.bbox.x_min, b.bbox.x_min));
  const double iy = std::max(0.0, std::min(a.bbox.y_max, b.bbox.y_max) - std::max(a.bbox.y_min, b.bbox.y_min));
  const double inter = ix * iy;
  const double area_a = (a.bbox.x_max - a.bbox.x_min) * (a.bbox.y_max - a.bbox.y_min);
  const double area_b = (b.bbox.x_max - b.bbox.x_min) * (b.bbox.y_max - b.bbox.y_min);
  const double uni = area_a + area_b - inter;
  const double io = uni > 0 ? inter / uni : 0.0;
  const double theta = 0.25 * std::sqrt(W * W + H * H);
  if (!(d < theta || io > 0.1)) return std::nullopt;
  return 0.6 * std::max(0.0, 1.0 - d / theta) + 0.3 * (a.type == b.type ? 1.0 : 0.0) + 0.1 * io;
}

Outcome graph_oracle() {
  const auto ms = synth::generate_corpus(synth::default_templates(), 84);
  std::size_t screens = 0, pairs = 0, edges = 0, mismatches = 0;
  for (std::size_t s = 0; s < 500; ++s) {
    const auto& m = ms[s];
    const auto g = graph::build_graph(m);
    ++screens;
    const std::size_t n = m.elements.size();
    std::map<std::pair<std::size_t, std::size_t>, double> want;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        ++pairs;
        if (auto w = oracle_edge(m.elements[i], m.elements[j], m.width, m.height)) want[{i, j}] = *w;
      }
    std::map<std::pair<std::size_t, std::size_t>, double> got;
    for (const auto& e : g.edges) got[{e.i, e.j}] = e.weight;
    edges += want.size();
    if (got != want) ++mismatches;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const auto it = want.find({std::min(i, j), std::max(i, j)});
        const double w = i == j || it == want.end() ? 0.0 : it->second;
        if (g.adj(i, j) != w) ++mismatches;
      }
  }
  return {mismatches == 0 && screens == 500,
          fmt("%zu screens, %zu pairs, %zu edges, %zu mismatches", screens, pairs, edges, mismatches)};
}

double cosine(std::span<const float> a, std::span<const float> b) {
  double s = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  return s / std::sqrt(aa * bb);
}

Outcome anti_collapse() {
  const auto& t = trained();
  const auto spread = service::index_spread(t.idx);
  double within = 0, cross = 0;
  std::size_t nw = 0, nc = 0;
  const auto& flat = t.idx.structural();
  for (index::DocId i = 0; i < flat.size(); ++i)
    for (index::DocId j = i + 1; j < flat.size(); ++j) {
      const double c = cosine(flat.vector(i), flat.vector(j));
      if (t.manifests[i].intent_label == t.manifests[j].intent_label) {
        within += c;
        ++nw;
      } else {
        cross += c;
        ++nc;
      }
    }
  within /= static_cast<double>(nw);
  cross /= static_cast<double>(nc);
  const bool ok = spread.std >= 0.08 && spread.mean <= 0.5 && within - cross >= 0.1;
  return {ok, fmt("%zu screens: std %.4f (>= 0.08), mean %.4f (<= 0.5), within %.4f - cross %.4f = %.4f (>= 0.1)",
                  flat.size(), spread.std, spread.mean, within, cross, within - cross)};
}

Outcome retrieval_sanity() {
  const auto& t = trained();
  const index::SemEmbedder emb;
  std::mt19937_64 rng(31);
  std::vector<std::size_t> order(t.manifests.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t ok = 0;
  double worst = 0;
  for (std::size_t k = 0; k < 200; ++k) {
    const auto& m = t.manifests[order[k]];
    const auto rec = service::make_record(m, t.model, emb);
    const auto hits = t.idx.structural().search(rec.structural, 1);
    const double err = std::abs(hits[0].score - 1.0);
    worst = std::max(worst, err);
    const auto res = query::run("FIND WHERE similar_to(\"" + m.screen_id + "\") LIMIT 1",
                                {&t.idx, &t.model, emb});
    if (t.idx.id(hits[0].doc) == m.screen_id && err <= 1e-6 && res.rows.size() == 1 &&
        res.rows[0].screen_id == m.screen_id && std::abs(res.rows[0].score - 1.0) <= 1e-6)
      ++ok;
  }
  return {ok == 200, fmt("%zu / 200 probes at rank 1, max |cos - 1| %.2e", ok, worst)};
}

Outcome ann_quality() {
  auto idx = index_of(5000);
  idx.build_ivf();
  const auto& flat = idx.structural();
  const auto& ivf = *idx.ivf();
  std::vector<std::vector<float>> decoded(flat.size());
  for (std::size_t l = 0; l < ivf.nlist(); ++l)
    for (std::size_t s = 0; s < ivf.posting_ids(l).size(); ++s)
      decoded[ivf.posting_ids(l)[s]] = ivf.decode(l, s);

  std::mt19937_64 rng(41);
  const auto& specs = synth::default_templates();
  const index::SemEmbedder emb;
  double recall = 0, full_recall = 0;
  const int queries = 200;
  for (int q = 0; q < queries; ++q) {
    // Unseen screens as queries.
    const auto m = synth::generate_one(specs[q % specs.size()], 50000 + q);
    const auto v = flat.prepare(service::make_record(m, trained().model, emb).structural);
    const auto exact = flat.search(v, 10);
    const auto approx = ivf.search(v, 10, ivf.default_nprobe(), flat);
    std::set<index::DocId> truth;
    for (const auto& h : exact) truth.insert(h.doc);
    for (const auto& h : approx) recall += truth.count(h.doc) ? 1 : 0;

    std::vector<index::Hit> all;
    for (index::DocId d = 0; d < flat.size(); ++d) all.push_back({d, index::dot(v, decoded[d])});
    std::sort(all.begin(), all.end(), [&](const index::Hit& a, const index::Hit& b) { return flat.before(a, b); });
    all.resize(10);
    std::set<index::DocId> qtruth;
    for (const auto& h : all) qtruth.insert(h.doc);
    for (const auto& h : ivf.search(v, 10, ivf.nlist(), flat)) full_recall += qtruth.count(h.doc) ? 1 : 0;
  }
  recall /= queries * 10.0;
  full_recall /= queries * 10.0;
  return {recall >= 0.9 && full_recall == 1.0,
          fmt("n=%zu nlist=%zu nprobe=%zu: recall@10 %.4f (>= 0.9); at nprobe=nlist %.4f (== 1.0)", flat.size(),
              ivf.nlist(), ivf.default_nprobe(), recall, full_recall)};
}

Outcome planner_equivalence() {
  const auto idx = index_of(1000);
  const auto oracle = oracle_of(idx, 1000);
  const auto ids = ids_of(idx);
  const query::Context ctx{&idx, &trained().model, index::SemEmbedder{}};
  std::mt19937_64 rng(51);
  const query::Strategy all[] = {query::Strategy::VectorOnly, query::Strategy::MetadataOnly,
                                 query::Strategy::MetadataFirst, query::Strategy::VectorFirst};
  std::size_t agree = 0, rows = 0;
  std::map<query::Strategy, std::size_t> chosen;
  for (int q = 0; q < 50; ++q) {
    const auto ast = testkit::random_hybrid(rng, ids, idx.options().intent_labels);
    ++chosen[query::plan(ast, idx).strategy];
    const auto want = ranked(synth::oracle_search(oracle, ast));
    bool same = true;
    for (auto s : all) same = same && ranked(query::execute(ast, ctx, query::plan_forced(ast, idx, s)).rows) == want;
    agree += same ? 1 : 0;
    rows += want.size();
  }
  std::string planned;
  for (const auto& [s, n] : chosen) planned += fmt(" %s=%zu", std::string(query::strategy_name(s)).c_str(), n);
  return {agree == 50, fmt("%zu / 50 queries identical under all four strategies and the oracle (%zu rows; planner chose%s)",
                           agree, rows, planned.c_str())};
}

bool oracle_predicate(const query::Predicate& p, const index::TypeCounts& c) {
  const int v = p.pred.type ? c[static_cast<std::size_t>(*p.pred.type)] : std::accumulate(c.begin(), c.end(), 0);
  bool r = false;
  switch (p.pred.op) {
    case index::CountOp::Eq: r = v == p.pred.lo; break;
    case index::CountOp::Lt: r = v < p.pred.lo; break;
    case index::CountOp::Le: r = v <= p.pred.lo; break;
    case index::CountOp::Gt: r = v > p.pred.lo; break;
    case index::CountOp::Ge: r = v >= p.pred.lo; break;
    case index::CountOp::Between: r = p.pred.lo <= v && v <= p.pred.hi; break;
    case index::CountOp::Has: r = v > 0; break;
    case index::CountOp::NotHas: r = v == 0; break;
  }
  return r != p.negated;
}

Outcome metadata_oracle() {
  const auto idx = index_of(1000);
  const query::Context ctx{&idx, nullptr, index::SemEmbedder{}};
  const auto& p = pool();
  std::mt19937_64 rng(61);
  auto run_ids = [&](const query::QueryAst& ast) {
    std::set<std::string> s;
    for (const auto& r : query::execute(ast, ctx, query::plan(ast, idx)).rows) s.insert(r.screen_id);
    return s;
  };
  std::size_t agree = 0, complement = 0, monotone = 0, nonempty = 0;
  for (int i = 0; i < 200; ++i) {
    const auto pred = testkit::random_predicate(rng);
    query::QueryAst ast;
    ast.limit = query::kMaxLimit;
    ast.clauses.emplace_back(pred);
    std::set<std::string> want;
    for (std::size_t d = 0; d < 1000; ++d)
      if (oracle_predicate(pred, p[d].counts)) want.insert(p[d].screen_id);
    const auto got = run_ids(ast);
    agree += got == want ? 1 : 0;
    nonempty += want.empty() || want.size() == 1000 ? 0 : 1;

    auto neg = pred;
    neg.negated = !neg.negated;
    query::QueryAst nast = ast;
    nast.clauses = {neg};
    const auto other = run_ids(nast);
    std::vector<std::string> both;
    std::set_intersection(got.begin(), got.end(), other.begin(), other.end(), std::back_inserter(both));
    complement += both.empty() && got.size() + other.size() == 1000 ? 1 : 0;

    query::QueryAst narrower = ast;
    narrower.clauses.emplace_back(testkit::random_predicate(rng));
    const auto sub = run_ids(narrower);
    monotone += std::includes(got.begin(), got.end(), sub.begin(), sub.end()) ? 1 : 0;
  }
  return {agree == 200 && complement == 200 && monotone == 200,
          fmt("oracle %zu / 200 (%zu non-trivial), complement %zu / 200, conjunction anti-monotone %zu / 200", agree,
              nonempty, complement, monotone)};
}

std::vector<service::SuiteEntry> latency_suite(const std::vector<std::string>& ids) {
  std::vector<service::SuiteEntry> s;
  const char* metadata[] = {"count(textbox) BETWEEN 2 AND 4", "has(table)", "count(button) >= 3",
                            "NOT has(datepicker)", "count(any) > 20"};
  const char* words[] = {"password", "checkout total", "search results", "save settings", "name email"};
  const auto& labels = synth::intent_labels();
  for (std::size_t i = 0; i < 10; ++i) {
    const auto ref = "similar_to(\"" + ids[(i * 997) % ids.size()] + "\")";
    s.push_back({"metadata", std::string("FIND WHERE ") + metadata[i % 5] + " LIMIT 10", false});
    s.push_back({"structural", "FIND WHERE " + ref + " LIMIT 10", false});
    s.push_back({"hybrid", std::string("FIND WHERE ") + metadata[i % 5] + " AND " + ref + " AND intent(\"" +
                               labels[i % labels.size()] + "\") AND text ~ \"" + words[i % 5] + "\" LIMIT 10",
                 false});
  }
  return s;
}

std::vector<service::SuiteEntry> ivf_suite(const std::vector<std::string>& ids) {
  std::vector<service::SuiteEntry> s;
  for (std::size_t i = 0; i < 20; ++i)
    s.push_back({"ivf", "FIND WHERE similar_to(\"" + ids[(i * 241) % ids.size()] + "\") LIMIT 10", true});
  return s;
}

Outcome latency_ordering() {
  auto big = index_of(20000);
  big.build_ivf();
  auto small = index_of(5000);
  small.build_ivf();
  const auto shared_ids = ids_of(small);
  service::BenchOptions opts;
  opts.repeats = 20;
  const auto rep = service::cmd_bench(big, latency_suite(shared_ids), opts, &trained().model);
  const auto ivf_big = service::cmd_bench(big, ivf_suite(shared_ids), opts, &trained().model);
  const auto ivf_small = service::cmd_bench(small, ivf_suite(shared_ids), opts, &trained().model);
  const double meta = rep.find("metadata")->warm.p50;
  const double structural = rep.find("structural")->warm.p50;
  const double hybrid = rep.find("hybrid")->warm.p50;
  const double ratio = ivf_big.find("ivf")->warm.p50 / ivf_small.find("ivf")->warm.p50;
  const bool ok = meta < structural && structural < hybrid && ratio < 3.0 && rep.deterministic &&
                  ivf_big.deterministic && ivf_small.deterministic;
  return {ok, fmt("n=20000 warm P50: metadata %.3f ms < structural %.3f ms < hybrid %.3f ms; IVF P50 20k %.3f ms / "
                  "5k %.3f ms = %.2f (< 3.0)",
                  meta, structural, hybrid, ivf_big.find("ivf")->warm.p50, ivf_small.find("ivf")->warm.p50, ratio)};
}

json comparable(const query::QueryResult& r) {
  auto j = query::to_json(r);
  j.erase("timing_ms");
  return j;
}

Outcome persistence() {
  auto idx = index_of(2000);
  idx.build_ivf();
  const auto path = fs::temp_directory_path() / "uisearch_acceptance_index.bin";
  idx.save(path);
  const auto back = index::HybridIndex::load(path);
  fs::remove(path);
  const auto ids = ids_of(idx);
  const auto& model = trained().model;
  std::mt19937_64 rng(71);
  std::size_t same = 0, approx = 0;
  for (int q = 0; q < 50; ++q) {
    query::QueryAst ast;
    switch (q % 4) {
      case 0: ast = testkit::random_metadata(rng, 2); ast.limit = 50; break;
      case 1: ast = testkit::random_hybrid(rng, ids, idx.options().intent_labels, {true, 0, 0, 0, 0, 0, 0}); break;
      default: ast = testkit::random_hybrid(rng, ids, idx.options().intent_labels); break;
    }
    query::PlannerConfig cfg;
    cfg.approximate = q % 4 == 3;
    const auto text = query::print(ast);
    const auto a = query::run(text, {&idx, &model, index::SemEmbedder{}}, cfg);
    const auto b = query::run(text, {&back, &model, index::SemEmbedder{}}, cfg);
    approx += a.plan.approximate ? 1 : 0;
    same += a.plan == b.plan && ranked(a.rows) == ranked(b.rows) && comparable(a) == comparable(b) ? 1 : 0;
  }
  return {same == 50 && back.size() == idx.size() && back.ivf_fresh(),
          fmt("%zu / 50 queries identical after save/load (%zu via IVF), %zu screens", same, approx, back.size())};
}

// ---- secondary ----

struct LocalServer {
  httplib::Server http;
  std::thread thread;
  int port = 0;
  explicit LocalServer(service::Service& svc) {
    svc.mount(http);
    port = http.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { http.listen_after_bind(); });
    http.wait_until_ready();
  }
  ~LocalServer() {
    http.stop();
    thread.join();
  }
};

Outcome form_round_trip() {
  auto idx = index_of(600);
  const auto ids = ids_of(idx);
  auto model = std::make_shared<const nn::EncoderModel>(trained().model);
  service::AppConfig cfg;
  cfg.cache_size = 0;
  service::Service svc(model, std::move(idx), cfg);
  LocalServer server(svc);
  httplib::Client cl("127.0.0.1", server.port);
  std::mt19937_64 rng(81);
  auto strip = [](std::string body) {
    auto j = json::parse(body);
    j.erase("timing_ms");
    j.erase("cached");
    return j.dump();
  };
  std::size_t parsed = 0, identical = 0;
  for (int i = 0; i < 200; ++i) {
    // A form state is a clause list; the form serializes it canonically,
    // a user may type the same query with different spacing and case.
    const auto ast = i % 3 == 0 ? testkit::random_metadata(rng, 3)
                                : testkit::random_hybrid(rng, ids, synth::intent_labels());
    const auto text = query::print(ast);
    const std::string typed = "find  where " + text.substr(std::string("FIND WHERE ").size());
    if (query::parse(text) == ast) ++parsed;
    const auto a = cl.Post("/v1/query", json{{"text", text}}.dump(), "application/json");
    const auto b = cl.Post("/v1/query", json{{"text", typed}}.dump(), "application/json");
    if (a && b && a->status == 200 && b->status == 200) {
      auto ja = json::parse(a->body), jb = json::parse(b->body);
      ja.erase("query");
      jb.erase("query");
      if (strip(ja.dump()) == strip(jb.dump())) ++identical;
    }
  }
  return {parsed == 200 && identical == 200,
          fmt("%zu / 200 serialized forms reparse to the same query, %zu / 200 payloads identical", parsed, identical)};
}

Outcome collapse_warning() {
  index::IndexOptions o;
  o.intent_labels = synth::intent_labels();
  index::HybridIndex flat_idx(o);
  for (int i = 0; i < 20; ++i) {
    auto rec = pool()[static_cast<std::size_t>(i)];
    std::fill(rec.structural.begin(), rec.structural.end(), 0.3f);
    rec.structural[0] += 1e-4f * static_cast<float>(i);
    flat_idx.add(rec);
  }
  flat_idx.seal();
  auto model = std::make_shared<const nn::EncoderModel>(trained().model);
  service::AppConfig cfg;
  service::Service collapsed(model, std::move(flat_idx), cfg);
  service::Service healthy(model, trained().idx, cfg);
  const auto a = collapsed.stats().body["spread"];
  const auto b = healthy.stats().body["spread"];
  const bool warn_a = a.at("collapse").get<bool>() && service::spread_svg(learn::spread_from_json(a)).find("collapse:") != std::string::npos;
  const bool warn_b = b.at("collapse").get<bool>() || service::spread_svg(learn::spread_from_json(b)).find("collapse:") != std::string::npos;
  return {warn_a && !warn_b, fmt("degenerate index std %.4f flagged: %s; trained index std %.4f flagged: %s",
                                 a.at("std").get<double>(), warn_a ? "yes" : "no", b.at("std").get<double>(),
                                 warn_b ? "yes" : "no")};
}

struct Criterion {
  const char* name;
  bool primary;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<std::string> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string s; std::getline(ss, s, ',');) only.insert(s);
    } else if (a == "--model" && i + 1 < argc) {
      g_model_path = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--only name,name] [--model checkpoint]\n";
      return 2;
    }
  }

  const std::vector<Criterion> criteria = {
      {"parameter-budget", true, parameter_budget},
      {"memory-formula", true, memory_formula},
      {"gradient-fidelity", true, gradient_fidelity},
      {"graph-oracle", true, graph_oracle},
      {"anti-collapse", true, anti_collapse},
      {"retrieval-sanity", true, retrieval_sanity},
      {"ann-quality", true, ann_quality},
      {"planner-equivalence", true, planner_equivalence},
      {"metadata-oracle", true, metadata_oracle},
      {"latency-ordering", true, latency_ordering},
      {"persistence", true, persistence},
      {"form-round-trip", false, form_round_trip},
      {"collapse-warning", false, collapse_warning},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.name)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << (c.primary ? "primary" : "secondary") << "] " << c.name
              << ": " << o.detail << fmt(" (%.1fs)", seconds_since(t0)) << std::endl;
    if (!o.pass && c.primary) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
