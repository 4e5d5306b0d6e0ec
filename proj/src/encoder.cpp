#include "uisearch/encoder.hpp"

#include "encoder_layers.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace uisearch::nn {

namespace {


std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based uniform in [0,1) keyed by (seed, step, layer, slot, index).
double keyed_uniform(std::uint64_t seed, std::uint64_t step, std::uint64_t layer,
                     std::uint64_t slot, std::uint64_t index) {
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ step);
  h = mix64(h ^ (layer << 32 | (slot & 0xffffffffULL)));
  h = mix64(h ^ index);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

Mat dropout_mask(const EncoderConfig& cfg, const ForwardOptions& opts, std::uint64_t layer,
                 Eigen::Index rows, Eigen::Index cols) {
  if (!opts.train || cfg.dropout <= 0.0) return Mat::Ones(rows, cols);
  const double keep_scale = 1.0 / (1.0 - cfg.dropout);
  Mat mask(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      const auto idx = static_cast<std::uint64_t>(i * cols + j);
      mask(i, j) = keyed_uniform(cfg.seed, opts.step, layer, opts.slot, idx) < cfg.dropout
                       ? 0.0
                       : keep_scale;
    }
  return mask;
}

void glorot(Mat& m, Eigen::Index rows, Eigen::Index cols, double fan_in, double fan_out,
            std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  m.resize(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
}

void init_gat(GatLayer& l, int in, const EncoderConfig& cfg, std::mt19937_64& rng) {
  glorot(l.weight, in, cfg.hidden, in, cfg.hidden, rng);
  glorot(l.att_src, cfg.heads, cfg.head_dim(), cfg.head_dim(), 1, rng);
  glorot(l.att_dst, cfg.heads, cfg.head_dim(), cfg.head_dim(), 1, rng);
  l.bias = Mat::Zero(1, cfg.hidden);
}

void init_linear(Linear& l, int in, int out, std::mt19937_64& rng) {
  glorot(l.weight, in, out, in, out, rng);
  l.bias = Mat::Zero(1, out);
}

std::size_t gat_count(const GatLayer& l) {
  return static_cast<std::size_t>(l.weight.size() + l.att_src.size() + l.att_dst.size() +
                                  l.bias.size());
}

std::size_t linear_count(const Linear& l) {
  return static_cast<std::size_t>(l.weight.size() + l.bias.size());
}

}  // namespace

namespace detail {

void gat_forward(const GatLayer& layer, const Mat& x, const ForwardTrace& t,
                 ForwardTrace::Gat& out) {
  const Eigen::Index n = x.rows();
  const Eigen::Index heads = layer.att_src.rows();
  const Eigen::Index dh = layer.att_src.cols();
  out.input = x;
  out.h = x * layer.weight;
  out.output.resize(n, heads * dh);
  out.alpha.assign(static_cast<std::size_t>(heads), Mat());
  out.raw.assign(static_cast<std::size_t>(heads), Mat());
  for (Eigen::Index h = 0; h < heads; ++h) {
    const auto hh = out.h.middleCols(h * dh, dh);
    const Vec s = hh * layer.att_src.row(h).transpose();
    const Vec d = hh * layer.att_dst.row(h).transpose();
    Mat& raw = out.raw[static_cast<std::size_t>(h)];
    Mat& alpha = out.alpha[static_cast<std::size_t>(h)];
    raw.resize(n, n);
    alpha = Mat::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      double row_max = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j) {
        raw(i, j) = s(i) + d(j);
        if (!t.neighbours(i, j)) continue;
        const double r = raw(i, j);
        const double e = (r > 0 ? r : kLeakySlope * r) + t.log_weight(i, j);
        alpha(i, j) = e;
        row_max = std::max(row_max, e);
      }
      double sum = 0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (!t.neighbours(i, j)) continue;
        alpha(i, j) = std::exp(alpha(i, j) - row_max);
        sum += alpha(i, j);
      }
      alpha.row(i) /= sum;
    }
    out.output.middleCols(h * dh, dh) = alpha * hh;
  }
  out.output.rowwise() += layer.bias.row(0);
}

// Returns d loss / d input.
Mat gat_backward(const GatLayer& layer, const ForwardTrace& t, const ForwardTrace::Gat& rec,
                 const Mat& dy, GatLayer& grad) {
  const Eigen::Index n = rec.input.rows();
  const Eigen::Index heads = layer.att_src.rows();
  const Eigen::Index dh = layer.att_src.cols();
  grad.bias += dy.colwise().sum();
  Mat dh_all = Mat::Zero(n, heads * dh);
  for (Eigen::Index h = 0; h < heads; ++h) {
    const auto hh = rec.h.middleCols(h * dh, dh);
    const auto dout = dy.middleCols(h * dh, dh);
    const Mat& alpha = rec.alpha[static_cast<std::size_t>(h)];
    const Mat& raw = rec.raw[static_cast<std::size_t>(h)];
    const Mat dalpha = dout * hh.transpose();
    dh_all.middleCols(h * dh, dh) += alpha.transpose() * dout;
    Vec ds = Vec::Zero(n), dd = Vec::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      double dot = 0;
      for (Eigen::Index j = 0; j < n; ++j)
        if (t.neighbours(i, j)) dot += alpha(i, j) * dalpha(i, j);
      for (Eigen::Index j = 0; j < n; ++j) {
        if (!t.neighbours(i, j)) continue;
        const double de = alpha(i, j) * (dalpha(i, j) - dot);
        const double du = de * (raw(i, j) > 0 ? 1.0 : kLeakySlope);
        ds(i) += du;
        dd(j) += du;
      }
    }
    grad.att_src.row(h) += ds.transpose() * hh;
    grad.att_dst.row(h) += dd.transpose() * hh;
    dh_all.middleCols(h * dh, dh) += ds * layer.att_src.row(h) + dd * layer.att_dst.row(h);
  }
  grad.weight += rec.input.transpose() * dh_all;
  return dh_all * layer.weight.transpose();
}

Mat layernorm_forward(const LayerNorm& ln, const Mat& x, ForwardTrace::Norm& rec) {
  const Eigen::Index n = x.rows();
  const double d = static_cast<double>(x.cols());
  rec.xhat.resize(n, x.cols());
  rec.inv_std.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).sum() / d;
    const double var = (x.row(i).array() - mu).square().sum() / d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    rec.inv_std(i) = inv;
    rec.xhat.row(i) = (x.row(i).array() - mu) * inv;
  }
  Mat y = rec.xhat.array().rowwise() * ln.gamma.row(0).array();
  y.rowwise() += ln.beta.row(0);
  return y;
}

Mat layernorm_backward(const LayerNorm& ln, const ForwardTrace::Norm& rec, const Mat& dy,
                       LayerNorm& grad) {
  grad.gamma += (dy.array() * rec.xhat.array()).colwise().sum().matrix();
  grad.beta += dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * ln.gamma.row(0).array();
  const double d = static_cast<double>(dy.cols());
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).sum() / d;
    const double m2 = dxhat.row(i).dot(rec.xhat.row(i)) / d;
    dx.row(i) = rec.inv_std(i) * (dxhat.row(i).array() - m1 - rec.xhat.row(i).array() * m2);
  }
  return dx;
}

}  // namespace detail

using detail::gat_backward;
using detail::gat_forward;
using detail::kLeakySlope;
using detail::layernorm_backward;
using detail::layernorm_forward;

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("EncoderConfig: " + msg); };
  if (in_dim <= 0) fail("in_dim must be positive");
  if (hidden <= 0) fail("hidden must be positive");
  if (heads <= 0) fail("heads must be positive");
  if (hidden % heads != 0)
    fail("hidden (" + std::to_string(hidden) + ") must be divisible by heads (" +
         std::to_string(heads) + ")");
  if (gcn_out <= 0) fail("gcn_out must be positive");
  if (proj_in != gcn_out) fail("proj_in must equal gcn_out");
  if (proj_hidden <= 0 || proj_out <= 0) fail("projection dims must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0,1)");
  if (num_intents <= 0) fail("num_intents must be positive");
}

EncoderParams EncoderParams::zeros_like() const {
  EncoderParams z = *this;
  z.set_zero();
  return z;
}

void EncoderParams::set_zero() {
  for_each_tensor(*this, [](const char*, Mat& m) { m.setZero(); });
}

void EncoderParams::add_scaled(const EncoderParams& other, double scale) {
  std::vector<const Mat*> src;
  for_each_tensor(other, [&](const char*, const Mat& m) { src.push_back(&m); });
  std::size_t k = 0;
  for_each_tensor(*this, [&](const char*, Mat& m) { m += scale * *src[k++]; });
}

std::size_t EncoderParams::size() const {
  std::size_t n = 0;
  for_each_tensor(*this, [&](const char*, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

std::optional<std::size_t> EncoderModel::intent_index(const std::string& label) const {
  for (std::size_t i = 0; i < intent_labels.size(); ++i)
    if (intent_labels[i] == label) return i;
  return std::nullopt;
}

EncoderModel init_model(const EncoderConfig& cfg, graph::TypeVocabulary vocab,
                        std::vector<std::string> intent_labels) {
  cfg.validate();
  if (intent_labels.empty()) {
    for (int i = 0; i < cfg.num_intents; ++i) intent_labels.push_back("intent_" + std::to_string(i));
  }
  if (static_cast<int>(intent_labels.size()) != cfg.num_intents)
    throw std::invalid_argument("EncoderConfig: num_intents does not match the intent label list");

  EncoderModel model;
  model.config = cfg;
  model.vocab = vocab;
  model.intent_labels = std::move(intent_labels);
  std::mt19937_64 rng(cfg.seed);
  auto& p = model.params;
  init_gat(p.gat1, cfg.in_dim, cfg, rng);
  p.ln1 = {Mat::Ones(1, cfg.hidden), Mat::Zero(1, cfg.hidden)};
  init_gat(p.gat2, cfg.hidden, cfg, rng);
  p.ln2 = {Mat::Ones(1, cfg.hidden), Mat::Zero(1, cfg.hidden)};
  init_linear(p.gcn, cfg.hidden, cfg.gcn_out, rng);
  init_linear(p.proj1, cfg.proj_in, cfg.proj_hidden, rng);
  init_linear(p.proj2, cfg.proj_hidden, cfg.proj_out, rng);
  init_linear(p.intent, cfg.embedding_dim(), cfg.num_intents, rng);
  return model;
}

ParameterCounts count_parameters(const EncoderModel& model) {
  const auto& p = model.params;
  return {gat_count(p.gat1), gat_count(p.gat2), linear_count(p.gcn),
          linear_count(p.proj1) + linear_count(p.proj2)};
}

std::uint64_t ForwardTrace::activation_signature() const {
  std::uint64_t h = 0x84222325cbf29ce4ULL;
  auto feed = [&h](std::uint64_t v) { h = mix64(h ^ v); };
  auto feed_signs = [&](const Mat& m) {
    std::uint64_t word = 0;
    int bits = 0;
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      word = (word << 1) | (m.data()[k] > 0 ? 1u : 0u);
      if (++bits == 64) {
        feed(word);
        word = 0;
        bits = 0;
      }
    }
    feed(word);
  };
  for (const auto* rec : {&gat1, &gat2})
    for (const auto& raw : rec->raw) feed_signs(neighbours.select(raw, -1.0));
  feed_signs(relu1);
  feed_signs(relu2);
  feed_signs(h1);
  for (auto a : argmax) feed(static_cast<std::uint64_t>(a));
  return h;
}

GraphEmbedding forward(const EncoderModel& model, const graph::UiGraph& g,
                       const ForwardOptions& opts, ForwardTrace* trace) {
  const auto& cfg = model.config;
  const auto& p = model.params;
  const Eigen::Index n = static_cast<Eigen::Index>(g.num_nodes());
  if (n == 0) throw std::invalid_argument("forward: graph has no nodes");
  if (static_cast<int>(graph::kFeatureDim) != cfg.in_dim)
    throw std::invalid_argument("forward: feature width " + std::to_string(graph::kFeatureDim) +
                                " does not match in_dim " + std::to_string(cfg.in_dim));
  if (g.features.size() != static_cast<std::size_t>(n) * graph::kFeatureDim)
    throw std::invalid_argument("forward: feature matrix has the wrong size");

  ForwardTrace local;
  ForwardTrace& t = trace ? *trace : local;

  Mat x(n, cfg.in_dim);
  Mat adj(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < cfg.in_dim; ++c)
      x(i, c) = g.feature(static_cast<std::size_t>(i), static_cast<std::size_t>(c));
    for (Eigen::Index j = 0; j < n; ++j)
      adj(i, j) = g.adj(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  }

  t.neighbours.resize(n, n);
  t.log_weight = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const bool nb = i == j || adj(i, j) > 0;
      t.neighbours(i, j) = nb;
      if (nb && i != j) t.log_weight(i, j) = std::log(adj(i, j));
    }

  gat_forward(p.gat1, x, t, t.gat1);
  Mat a1 = layernorm_forward(p.ln1, t.gat1.output, t.ln1);
  t.relu1 = a1.cwiseMax(0.0);
  t.drop1 = dropout_mask(cfg, opts, 1, n, cfg.hidden);
  const Mat in2 = t.relu1.cwiseProduct(t.drop1);

  gat_forward(p.gat2, in2, t, t.gat2);
  Mat a2 = layernorm_forward(p.ln2, t.gat2.output, t.ln2);
  t.relu2 = a2.cwiseMax(0.0);
  t.drop2 = dropout_mask(cfg, opts, 2, n, cfg.hidden);
  t.gcn_input = t.relu2.cwiseProduct(t.drop2);

  Mat a_hat = adj + Mat::Identity(n, n);
  const Vec deg = a_hat.rowwise().sum();
  const Vec inv_sqrt = deg.array().rsqrt();
  t.gcn_norm_adj = inv_sqrt.asDiagonal() * a_hat * inv_sqrt.asDiagonal();
  t.gcn_agg = t.gcn_norm_adj * t.gcn_input;
  t.z = t.gcn_agg * p.gcn.weight;
  t.z.rowwise() += p.gcn.bias.row(0);

  const Eigen::Index d = cfg.gcn_out;
  t.mean = t.z.colwise().mean().transpose();
  Vec mx(d);
  t.argmax.assign(static_cast<std::size_t>(d), 0);
  for (Eigen::Index c = 0; c < d; ++c) {
    Eigen::Index best = 0;
    t.z.col(c).maxCoeff(&best);
    t.argmax[static_cast<std::size_t>(c)] = best;
    mx(c) = t.z(best, c);
  }

  t.h1 = (t.mean.transpose() * p.proj1.weight + p.proj1.bias).transpose();
  const Vec r = t.h1.cwiseMax(0.0);
  t.q = (r.transpose() * p.proj2.weight + p.proj2.bias).transpose();
  t.q_norm = t.q.norm();
  t.p = t.q / t.q_norm;
  t.recorded = true;

  GraphEmbedding out;
  out.g.resize(2 * d);
  out.g << t.mean, mx;
  out.p = t.p;
  out.node_z = t.z;
  return out;
}

void backward(const EncoderModel& model, const ForwardTrace& t, const EmbeddingGrad& up,
              EncoderParams& grads) {
  if (!t.recorded) throw std::logic_error("backward: no recorded forward state");
  const auto& p = model.params;
  const Eigen::Index n = t.z.rows();
  const Eigen::Index d = t.z.cols();

  Vec d_mean = Vec::Zero(d);
  Mat dz = up.d_node_z.size() ? up.d_node_z : Mat::Zero(n, d);
  if (up.d_g.size()) {
    d_mean += up.d_g.head(d);
    for (Eigen::Index c = 0; c < d; ++c) dz(t.argmax[static_cast<std::size_t>(c)], c) += up.d_g(d + c);
  }
  if (up.d_p.size()) {
    const Vec dq = (up.d_p - t.p * t.p.dot(up.d_p)) / t.q_norm;
    const Vec r = t.h1.cwiseMax(0.0);
    grads.proj2.weight += r * dq.transpose();
    grads.proj2.bias += dq.transpose();
    Vec dh1 = p.proj2.weight * dq;
    for (Eigen::Index k = 0; k < dh1.size(); ++k)
      if (t.h1(k) <= 0) dh1(k) = 0;
    grads.proj1.weight += t.mean * dh1.transpose();
    grads.proj1.bias += dh1.transpose();
    d_mean += p.proj1.weight * dh1;
  }
  dz.rowwise() += (d_mean / static_cast<double>(n)).transpose();

  grads.gcn.bias += dz.colwise().sum();
  grads.gcn.weight += t.gcn_agg.transpose() * dz;
  Mat d_in = t.gcn_norm_adj.transpose() * (dz * p.gcn.weight.transpose());

  Mat da2 = d_in.cwiseProduct(t.drop2);
  da2 = (t.relu2.array() > 0).select(da2, 0.0);
  Mat dg2 = layernorm_backward(p.ln2, t.ln2, da2, grads.ln2);
  Mat d_in2 = gat_backward(p.gat2, t, t.gat2, dg2, grads.gat2);

  Mat da1 = d_in2.cwiseProduct(t.drop1);
  da1 = (t.relu1.array() > 0).select(da1, 0.0);
  Mat dg1 = layernorm_backward(p.ln1, t.ln1, da1, grads.ln1);
  gat_backward(p.gat1, t, t.gat1, dg1, grads.gat1);
}

Mat reconstruct_adjacency(const Mat& node_z) {
  const Mat logits = node_z * node_z.transpose();
  return logits.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

Vec intent_logits(const EncoderModel& model, const Vec& g) {
  return (g.transpose() * model.params.intent.weight + model.params.intent.bias).transpose();
}

Vec softmax(const Vec& logits) {
  const double mx = logits.maxCoeff();
  Vec e = (logits.array() - mx).exp();
  return e / e.sum();
}

Vec predict_intent(const EncoderModel& model, const Vec& g) { return softmax(intent_logits(model, g)); }

Vec intent_backward(const EncoderModel& model, const Vec& g, const Vec& d_logits,
                    EncoderParams& grads) {
  grads.intent.weight += g * d_logits.transpose();
  grads.intent.bias += d_logits.transpose();
  return model.params.intent.weight * d_logits;
}

}  // namespace uisearch::nn
