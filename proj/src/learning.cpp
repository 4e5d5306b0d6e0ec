#include "uisearch/learning.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

namespace uisearch::learn {

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::set<graph::ElementType> type_set(const graph::UiGraph& g) {
  std::set<graph::ElementType> s;
  for (const auto& n : g.nodes) s.insert(n.type);
  return s;
}

}  // namespace

void SimilarityWeights::validate() const {
  for (double w : {type, size, density, interactive})
    if (w < 0) throw std::invalid_argument("similarity weights must be nonnegative");
  if (std::abs(type + size + density + interactive - 1.0) > 1e-9)
    throw std::invalid_argument("similarity weights must sum to 1");
}

double multilevel_similarity(const graph::UiGraph& a, const graph::UiGraph& b,
                             const SimilarityWeights& w) {
  if (a.nodes.empty() || b.nodes.empty())
    throw std::invalid_argument("multilevel_similarity: graphs must be nonempty");
  const auto ta = type_set(a), tb = type_set(b);
  std::size_t inter = 0;
  for (auto t : ta) inter += tb.count(t);
  const double jaccard = static_cast<double>(inter) / static_cast<double>(ta.size() + tb.size() - inter);
  const double na = static_cast<double>(a.num_nodes()), nb = static_cast<double>(b.num_nodes());
  const double size_ratio = std::min(na, nb) / std::max(na, nb);
  const double dens = 1.0 - std::abs(a.density() - b.density());
  const double inter_sim = 1.0 - std::abs(a.interactive_fraction() - b.interactive_fraction());
  return w.type * jaccard + w.size * size_ratio + w.density * dens + w.interactive * inter_sim;
}

Mat similarity_matrix(std::span<const graph::UiGraph* const> graphs, const SimilarityWeights& w) {
  const auto n = static_cast<Eigen::Index>(graphs.size());
  Mat s = Mat::Identity(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = multilevel_similarity(*graphs[static_cast<std::size_t>(i)],
                                             *graphs[static_cast<std::size_t>(j)], w);
      s(i, j) = v;
      s(j, i) = v;
    }
  return s;
}

PairLabels mine_pairs(const Mat& similarity, double theta_pos, double theta_neg) {
  PairLabels out;
  out.similarity = similarity;
  const auto n = similarity.rows();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double s = similarity(i, j);
      if (s > theta_pos)
        out.positives.emplace_back(static_cast<int>(i), static_cast<int>(j));
      else if (s < theta_neg)
        out.negatives.emplace_back(static_cast<int>(i), static_cast<int>(j));
    }
  return out;
}

LossGrad contrastive_loss(const Mat& projected, const PairLabels& labels, double tau) {
  const auto b = projected.rows();
  LossGrad out;
  out.grad = Mat::Zero(b, projected.cols());
  if (labels.positives.empty() || b < 2) return out;

  const Mat logits = projected * projected.transpose() / tau;
  // Row-wise softmax over k != i.
  Mat soft = Mat::Zero(b, b);
  Vec log_z(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < b; ++k)
      if (k != i) mx = std::max(mx, logits(i, k));
    double sum = 0;
    for (Eigen::Index k = 0; k < b; ++k)
      if (k != i) sum += std::exp(logits(i, k) - mx);
    log_z(i) = mx + std::log(sum);
    for (Eigen::Index k = 0; k < b; ++k)
      if (k != i) soft(i, k) = std::exp(logits(i, k) - log_z(i));
  }

  const double inv = 1.0 / static_cast<double>(labels.positives.size());
  Mat d_logits = Mat::Zero(b, b);
  for (auto [i, j] : labels.positives) {
    out.loss += (log_z(i) - logits(i, j)) * inv;
    d_logits.row(i) += soft.row(i) * inv;
    d_logits(i, j) -= inv;
  }
  out.grad = (d_logits + d_logits.transpose()) * projected / tau;
  return out;
}

LossGrad reconstruction_loss(const Mat& node_z, const graph::UiGraph& g) {
  const auto n = node_z.rows();
  LossGrad out;
  out.grad = Mat::Zero(n, node_z.cols());
  if (n < 2) return out;
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  const Mat logits = node_z * node_z.transpose();
  Mat coeff = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double y = g.adj(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) > 0 ? 1.0 : 0.0;
      const double l = logits(i, j);
      out.loss += (softplus(l) - y * l) / pairs;
      const double dl = (sigmoid(l) - y) / pairs;
      coeff(i, j) = dl;
      coeff(j, i) = dl;
    }
  out.grad = coeff * node_z;
  return out;
}

LossGrad intent_cross_entropy(const Vec& logits, std::size_t label) {
  const double mx = logits.maxCoeff();
  const double log_z = mx + std::log((logits.array() - mx).exp().sum());
  LossGrad out;
  out.loss = log_z - logits(static_cast<Eigen::Index>(label));
  Vec p = (logits.array() - log_z).exp();
  p(static_cast<Eigen::Index>(label)) -= 1.0;
  out.grad = p;
  return out;
}

BatchLoss total_loss(const nn::EncoderModel& model, std::span<const TrainingExample* const> batch,
                     double theta_pos, double theta_neg, const LossConfig& cfg,
                     const nn::ForwardOptions& opts) {
  const std::size_t b = batch.size();
  std::vector<nn::ForwardTrace> traces(b);
  std::vector<nn::GraphEmbedding> embs(b);
  std::vector<const graph::UiGraph*> graphs(b);
  for (std::size_t i = 0; i < b; ++i) {
    nn::ForwardOptions o = opts;
    o.slot = i;
    embs[i] = nn::forward(model, batch[i]->graph, o, &traces[i]);
    graphs[i] = &batch[i]->graph;
  }

  BatchLoss out;
  out.grads = model.params.zeros_like();

  Mat projected(static_cast<Eigen::Index>(b), model.config.proj_out);
  for (std::size_t i = 0; i < b; ++i) projected.row(static_cast<Eigen::Index>(i)) = embs[i].p.transpose();
  const PairLabels labels = mine_pairs(similarity_matrix(graphs, cfg.similarity), theta_pos, theta_neg);
  out.positives = labels.positives.size();
  out.negatives = labels.negatives.size();
  const LossGrad con = contrastive_loss(projected, labels, cfg.tau);
  out.contrastive = con.loss;

  std::size_t labelled = 0, recon_graphs = 0;
  for (std::size_t i = 0; i < b; ++i) {
    labelled += batch[i]->intent ? 1 : 0;
    recon_graphs += graphs[i]->num_nodes() >= 2 ? 1 : 0;
  }

  for (std::size_t i = 0; i < b; ++i) {
    nn::EmbeddingGrad up;
    up.d_p = con.grad.row(static_cast<Eigen::Index>(i)).transpose();
    if (cfg.lambda_intent != 0 && batch[i]->intent) {
      const Vec logits = nn::intent_logits(model, embs[i].g);
      const LossGrad ce = intent_cross_entropy(logits, *batch[i]->intent);
      const double scale = 1.0 / static_cast<double>(labelled);
      out.intent += ce.loss * scale;
      up.d_g = nn::intent_backward(model, embs[i].g, ce.grad * (cfg.lambda_intent * scale), out.grads);
    }
    if (cfg.lambda_recon != 0 && graphs[i]->num_nodes() >= 2) {
      const LossGrad rec = reconstruction_loss(embs[i].node_z, *graphs[i]);
      const double scale = 1.0 / static_cast<double>(recon_graphs);
      out.recon += rec.loss * scale;
      up.d_node_z = rec.grad * (cfg.lambda_recon * scale);
    }
    nn::backward(model, traces[i], up, out.grads);
  }
  out.total = out.contrastive + cfg.lambda_intent * out.intent + cfg.lambda_recon * out.recon;
  return out;
}

void TrainConfig::validate() const {
  if (batch < 2) throw std::invalid_argument("TrainConfig: batch must be at least 2");
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be positive");
  if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (!(loss.tau > 0)) throw std::invalid_argument("TrainConfig: tau must be positive");
  for (int e : {0, epochs - 1}) {
    const double p = theta_pos(e), n = theta_neg(e);
    if (!(0 <= n && n < p && p <= 1))
      throw std::invalid_argument("TrainConfig: thresholds must satisfy 0 <= theta_neg < theta_pos <= 1");
  }
  loss.similarity.validate();
}

double TrainConfig::theta_pos(int epoch) const {
  if (epochs <= 1) return pos_start;
  return pos_start + (pos_end - pos_start) * static_cast<double>(epoch) / (epochs - 1);
}

double TrainConfig::theta_neg(int epoch) const {
  if (epochs <= 1) return neg_start;
  return neg_start + (neg_end - neg_start) * static_cast<double>(epoch) / (epochs - 1);
}

nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},         {"L_total", e.total},     {"L_con", e.contrastive},
          {"L_intent", e.intent},     {"L_recon", e.recon},     {"theta_pos", e.theta_pos},
          {"theta_neg", e.theta_neg}, {"wall_ms", e.wall_ms},   {"positives", e.positives}};
}

TrainResult train(std::span<const TrainingExample> corpus, nn::EncoderModel model,
                  const TrainConfig& cfg, std::optional<nn::OptimizerState> resume,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (corpus.size() < cfg.batch)
    throw std::invalid_argument("train: corpus (" + std::to_string(corpus.size()) +
                                ") is smaller than the batch size (" + std::to_string(cfg.batch) + ")");

  nn::OptimizerState opt;
  if (resume) {
    opt = std::move(*resume);
  } else {
    opt.m = model.params.zeros_like();
    opt.v = model.params.zeros_like();
  }

  TrainResult result;
  std::vector<std::size_t> order(corpus.size());
  const int first = static_cast<int>(opt.epoch);
  const int last = cfg.run_epochs > 0 ? std::min(cfg.epochs, first + cfg.run_epochs) : cfg.epochs;
  for (int epoch = first; epoch < last; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    EpochLog log;
    log.epoch = epoch;
    log.theta_pos = cfg.theta_pos(epoch);
    log.theta_neg = cfg.theta_neg(epoch);
    std::size_t batches = 0;
    std::vector<const TrainingExample*> batch;
    for (std::size_t start = 0; start + 1 < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      if (end - start < 2) break;
      batch.clear();
      for (std::size_t k = start; k < end; ++k) batch.push_back(&corpus[order[k]]);

      nn::ForwardOptions fo;
      fo.train = true;
      fo.step = opt.step;
      BatchLoss bl = total_loss(model, batch, log.theta_pos, log.theta_neg, cfg.loss, fo);
      log.total += bl.total;
      log.contrastive += bl.contrastive;
      log.intent += bl.intent;
      log.recon += bl.recon;
      log.positives += bl.positives;
      ++batches;

      ++opt.step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
      std::vector<nn::Mat*> ms, vs, gs;
      nn::for_each_tensor(opt.m, [&](const char*, nn::Mat& m) { ms.push_back(&m); });
      nn::for_each_tensor(opt.v, [&](const char*, nn::Mat& m) { vs.push_back(&m); });
      nn::for_each_tensor(bl.grads, [&](const char*, nn::Mat& m) { gs.push_back(&m); });
      std::size_t k = 0;
      nn::for_each_tensor(model.params, [&](const char*, nn::Mat& p) {
        nn::Mat& m = *ms[k];
        nn::Mat& v = *vs[k];
        const nn::Mat& g = *gs[k];
        ++k;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        p -= cfg.lr * cfg.weight_decay * p;
        p.array() -= cfg.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
      });
    }
    if (batches > 0) {
      const double inv = 1.0 / static_cast<double>(batches);
      log.total *= inv;
      log.contrastive *= inv;
      log.intent *= inv;
      log.recon *= inv;
    }
    opt.epoch = static_cast<std::uint32_t>(epoch + 1);
    log.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  result.model = std::move(model);
  result.optimizer = std::move(opt);
  return result;
}

SpreadReport embedding_spread(std::span<const float> rows, std::size_t dim, std::uint64_t seed) {
  if (dim == 0 || rows.size() % dim != 0)
    throw std::invalid_argument("embedding_spread: data is not a whole number of rows");
  const std::size_t n = rows.size() / dim;
  if (n < 2) throw std::invalid_argument("embedding_spread: need at least two embeddings");

  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t d = 0; d < dim; ++d) s += double(rows[i * dim + d]) * rows[i * dim + d];
    norms[i] = std::sqrt(s);
  }
  auto cosine = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (std::size_t d = 0; d < dim; ++d) s += double(rows[i * dim + d]) * rows[j * dim + d];
    const double denom = norms[i] * norms[j];
    return denom > 0 ? std::clamp(s / denom, -1.0, 1.0) : 0.0;
  };

  SpreadReport r;
  double mean = 0, m2 = 0;
  auto record = [&](double c) {
    ++r.pairs;
    const double delta = c - mean;
    mean += delta / static_cast<double>(r.pairs);
    m2 += delta * (c - mean);
    auto bin = static_cast<std::size_t>((c + 1.0) / 2.0 * kSpreadBins);
    r.bins[std::min(bin, kSpreadBins - 1)]++;
  };
  if (n <= kExhaustiveSpreadLimit) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) record(cosine(i, j));
  } else {
    r.sampled = true;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    while (r.pairs < kSampledPairs) {
      const std::size_t i = pick(rng), j = pick(rng);
      if (i != j) record(cosine(i, j));
    }
  }
  r.mean = mean;
  r.std = std::sqrt(std::max(0.0, m2 / static_cast<double>(r.pairs)));
  return r;
}

nlohmann::json to_json(const SpreadReport& r) {
  return {{"mean", r.mean}, {"std", r.std}, {"bins", r.bins}, {"pairs", r.pairs},
          {"sampled", r.sampled}, {"collapse", r.collapsed()}};
}

SpreadReport spread_from_json(const nlohmann::json& j) {
  SpreadReport r;
  r.mean = j.at("mean").get<double>();
  r.std = j.at("std").get<double>();
  const auto& bins = j.at("bins");
  if (!bins.is_array() || bins.size() != kSpreadBins)
    throw std::invalid_argument("spread report: bins must have 50 entries");
  for (std::size_t i = 0; i < kSpreadBins; ++i) r.bins[i] = bins[i].get<std::uint64_t>();
  r.pairs = j.value("pairs", std::uint64_t{0});
  r.sampled = j.value("sampled", false);
  return r;
}

}  // namespace uisearch::learn
