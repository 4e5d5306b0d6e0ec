#pragma once

// Graph encoder: GAT -> GAT -> GCN -> mean/max pooling -> projection head,
// with an intent classifier over the pooled embedding. Everything runs in
// double precision so analytic gradients can be checked against finite
// differences; checkpoints store 32-bit floats.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "uisearch/ui_graph.hpp"

namespace uisearch::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct EncoderConfig {
  int in_dim = 16;
  int hidden = 512;
  int heads = 4;
  int gcn_out = 64;
  int proj_in = 64;
  int proj_hidden = 128;
  int proj_out = 32;
  double dropout = 0.1;
  int num_intents = 6;
  std::uint64_t seed = 42;

  int head_dim() const { return hidden / heads; }
  int embedding_dim() const { return 2 * gcn_out; }
  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct GatLayer {
  Mat weight;    // in x hidden (heads concatenated)
  Mat att_src;   // heads x head_dim
  Mat att_dst;   // heads x head_dim
  Mat bias;      // 1 x hidden
};

struct LayerNorm {
  Mat gamma;  // 1 x dim
  Mat beta;   // 1 x dim
};

struct Linear {
  Mat weight;  // in x out
  Mat bias;    // 1 x out
};

struct EncoderParams {
  GatLayer gat1;
  LayerNorm ln1;
  GatLayer gat2;
  LayerNorm ln2;
  Linear gcn;
  Linear proj1;
  Linear proj2;
  Linear intent;

  // Same shapes, all zeros.
  EncoderParams zeros_like() const;
  void set_zero();
  void add_scaled(const EncoderParams& other, double scale);
  std::size_t size() const;
};

// Visits every tensor in checkpoint order.
template <class P, class F>
void for_each_tensor(P& p, F&& f) {
  f("gat1.weight", p.gat1.weight);
  f("gat1.att_src", p.gat1.att_src);
  f("gat1.att_dst", p.gat1.att_dst);
  f("gat1.bias", p.gat1.bias);
  f("ln1.gamma", p.ln1.gamma);
  f("ln1.beta", p.ln1.beta);
  f("gat2.weight", p.gat2.weight);
  f("gat2.att_src", p.gat2.att_src);
  f("gat2.att_dst", p.gat2.att_dst);
  f("gat2.bias", p.gat2.bias);
  f("ln2.gamma", p.ln2.gamma);
  f("ln2.beta", p.ln2.beta);
  f("gcn.weight", p.gcn.weight);
  f("gcn.bias", p.gcn.bias);
  f("proj1.weight", p.proj1.weight);
  f("proj1.bias", p.proj1.bias);
  f("proj2.weight", p.proj2.weight);
  f("proj2.bias", p.proj2.bias);
  f("intent.weight", p.intent.weight);
  f("intent.bias", p.intent.bias);
}

struct EncoderModel {
  EncoderConfig config;
  graph::TypeVocabulary vocab;
  std::vector<std::string> intent_labels;
  EncoderParams params;

  std::optional<std::size_t> intent_index(const std::string& label) const;
};

struct ParameterCounts {
  std::size_t gat1 = 0;
  std::size_t gat2 = 0;
  std::size_t gcn = 0;
  std::size_t projection = 0;
  std::size_t core() const { return gat1 + gat2 + gcn + projection; }
};

// Glorot-uniform weights from cfg.seed, zero biases, unit LayerNorm gains.
// Intent labels default to "intent_<i>" when not supplied.
EncoderModel init_model(const EncoderConfig& cfg, graph::TypeVocabulary vocab = {},
                        std::vector<std::string> intent_labels = {});
ParameterCounts count_parameters(const EncoderModel& model);

struct GraphEmbedding {
  Vec g;       // [mean || max] of node states, 2 * gcn_out
  Vec p;       // projected, unit norm
  Mat node_z;  // |V| x gcn_out
};

struct ForwardOptions {
  bool train = false;
  std::uint64_t step = 0;  // dropout key
  std::uint64_t slot = 0;  // position in batch, dropout key
};

// Intermediate activations recorded by forward for backward.
struct ForwardTrace {
  struct Gat {
    Mat input;
    Mat h;                     // input * weight
    std::vector<Mat> alpha;    // per head, |V| x |V|, zero off-neighbourhood
    std::vector<Mat> raw;      // per head, s_i + t_j before LeakyReLU
    Mat output;
  };
  struct Norm {
    Mat xhat;
    Vec inv_std;
  };

  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> neighbours;
  Mat log_weight;
  Gat gat1, gat2;
  Norm ln1, ln2;
  Mat relu1, relu2;   // post-ReLU activations
  Mat drop1, drop2;   // dropout multipliers (all ones in eval mode)
  Mat gcn_norm_adj;   // D^-1/2 (A + I) D^-1/2
  Mat gcn_input;      // post-dropout layer-2 states
  Mat gcn_agg;        // norm_adj * gcn_input
  Mat z;
  std::vector<Eigen::Index> argmax;
  Vec mean;
  Vec h1;
  Vec q;
  double q_norm = 0;
  Vec p;
  bool recorded = false;

  // Hash of every piecewise-linear branch taken; equal signatures mean the
  // forward passes lie in the same linear region.
  std::uint64_t activation_signature() const;
};

GraphEmbedding forward(const EncoderModel& model, const graph::UiGraph& g,
                       const ForwardOptions& opts = {}, ForwardTrace* trace = nullptr);

struct EmbeddingGrad {
  Vec d_g;       // empty means zero
  Vec d_p;       // empty means zero
  Mat d_node_z;  // empty means zero
};

// Accumulates parameter gradients into `grads`. Throws std::logic_error if
// the trace was not recorded.
void backward(const EncoderModel& model, const ForwardTrace& trace, const EmbeddingGrad& upstream,
              EncoderParams& grads);

// Sigmoid of pairwise inner products of node embeddings.
Mat reconstruct_adjacency(const Mat& node_z);

Vec intent_logits(const EncoderModel& model, const Vec& g);
Vec softmax(const Vec& logits);
Vec predict_intent(const EncoderModel& model, const Vec& g);
// Gradient of the intent head; accumulates head grads, returns d loss / d g.
Vec intent_backward(const EncoderModel& model, const Vec& g, const Vec& d_logits,
                    EncoderParams& grads);

// AdamW moments persisted alongside a checkpoint for resumption.
struct OptimizerState {
  std::uint64_t step = 0;
  std::uint32_t epoch = 0;
  EncoderParams m;
  EncoderParams v;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const EncoderModel& model,
                     const OptimizerState* optimizer = nullptr);
EncoderModel load_checkpoint(const std::filesystem::path& path,
                             std::optional<OptimizerState>* optimizer = nullptr);

}  // namespace uisearch::nn
