#pragma once

// Multi-level layout similarity, contrastive / multi-task objectives,
// curriculum training and embedding-spread evaluation.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "uisearch/encoder.hpp"
#include "uisearch/ui_graph.hpp"

namespace uisearch::learn {

using nn::Mat;
using nn::Vec;

struct SimilarityWeights {
  double type = 0.25;
  double size = 0.25;
  double density = 0.25;
  double interactive = 0.25;
  void validate() const;
};

// Weighted sum of type Jaccard, node-count ratio, 1-|density gap| and
// 1-|interactive-fraction gap|. Symmetric, 1 on identical graphs.
double multilevel_similarity(const graph::UiGraph& a, const graph::UiGraph& b,
                             const SimilarityWeights& w = {});
Mat similarity_matrix(std::span<const graph::UiGraph* const> graphs, const SimilarityWeights& w = {});

struct PairLabels {
  Mat similarity;
  std::vector<std::pair<int, int>> positives;  // ordered pairs, i != j
  std::vector<std::pair<int, int>> negatives;
};

PairLabels mine_pairs(const Mat& similarity, double theta_pos, double theta_neg);

struct LossGrad {
  double loss = 0;
  Mat grad;  // same shape as the differentiated input
};

// InfoNCE over positive pairs; the denominator runs over every k != i in
// the batch. Rows of `projected` are unit vectors. No positives: zero loss.
LossGrad contrastive_loss(const Mat& projected, const PairLabels& labels, double tau);

// Mean binary cross-entropy of sigmoid(z_i . z_j) against edge presence
// over unordered node pairs. Single-node graphs have no pairs (loss 0).
LossGrad reconstruction_loss(const Mat& node_z, const graph::UiGraph& g);

// Softmax cross-entropy; grad is d loss / d logits.
LossGrad intent_cross_entropy(const Vec& logits, std::size_t label);

struct TrainingExample {
  graph::UiGraph graph;
  std::optional<std::size_t> intent;
};

struct LossConfig {
  double tau = 0.1;
  double lambda_intent = 0.5;
  double lambda_recon = 0.5;
  SimilarityWeights similarity;
};

struct BatchLoss {
  double total = 0;
  double contrastive = 0;
  double intent = 0;
  double recon = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  nn::EncoderParams grads;
};

// Forward + backward over one batch. Intent loss averages over labelled
// rows; reconstruction averages over graphs with at least two nodes.
BatchLoss total_loss(const nn::EncoderModel& model, std::span<const TrainingExample* const> batch,
                     double theta_pos, double theta_neg, const LossConfig& cfg,
                     const nn::ForwardOptions& opts = {});

struct TrainConfig {
  std::size_t batch = 32;
  int epochs = 30;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  LossConfig loss;
  double pos_start = 0.8;
  double pos_end = 0.6;
  double neg_start = 0.3;
  double neg_end = 0.4;
  std::uint64_t seed = 7;
  // Stop after this many epochs in one call (0: run to `epochs`). The
  // schedule still spans `epochs`, so a later resume continues it exactly.
  int run_epochs = 0;

  void validate() const;
  // Linear schedules from start (epoch 0) to end (last epoch).
  double theta_pos(int epoch) const;
  double theta_neg(int epoch) const;
};

struct EpochLog {
  int epoch = 0;
  double total = 0;
  double contrastive = 0;
  double intent = 0;
  double recon = 0;
  double theta_pos = 0;
  double theta_neg = 0;
  double wall_ms = 0;
  std::size_t positives = 0;
};

nlohmann::json to_json(const EpochLog& e);

struct TrainResult {
  nn::EncoderModel model;
  nn::OptimizerState optimizer;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// AdamW with decoupled weight decay. Resuming continues from the
// optimizer's recorded epoch. Throws std::invalid_argument when the corpus
// is smaller than one batch.
TrainResult train(std::span<const TrainingExample> corpus, nn::EncoderModel model,
                  const TrainConfig& cfg, std::optional<nn::OptimizerState> resume = std::nullopt,
                  const EpochCallback& on_epoch = {});

inline constexpr std::size_t kSpreadBins = 50;
inline constexpr double kCollapseStd = 0.02;
inline constexpr std::size_t kExhaustiveSpreadLimit = 5000;
inline constexpr std::size_t kSampledPairs = 1000000;

struct SpreadReport {
  double mean = 0;
  double std = 0;
  std::array<std::uint64_t, kSpreadBins> bins{};  // uniform over [-1, 1]
  std::uint64_t pairs = 0;
  bool sampled = false;

  bool collapsed() const { return std < kCollapseStd; }
};

// Pairwise cosine statistics over row-major `n x dim` embeddings. Beyond
// 5,000 rows a seeded sample of 1e6 pairs is used.
SpreadReport embedding_spread(std::span<const float> rows, std::size_t dim, std::uint64_t seed = 1);

nlohmann::json to_json(const SpreadReport& r);
SpreadReport spread_from_json(const nlohmann::json& j);

}  // namespace uisearch::learn
