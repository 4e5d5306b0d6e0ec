#include "uisearch/index.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "binary_io.hpp"

namespace uisearch::index {

namespace {

std::vector<Hit> take_top(std::vector<Hit> hits, std::size_t k, const FlatIndex& order) {
  auto cmp = [&order](const Hit& a, const Hit& b) { return order.before(a, b); };
  if (k < hits.size()) {
    std::nth_element(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), cmp);
    hits.resize(k);
  }
  std::sort(hits.begin(), hits.end(), cmp);
  return hits;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::Cosine: return "cosine";
    case Metric::Euclidean: return "euclidean";
    case Metric::InnerProduct: return "inner_product";
  }
  return "?";
}

std::optional<Metric> parse_metric(std::string_view name) {
  if (name == "cosine") return Metric::Cosine;
  if (name == "euclidean" || name == "l2") return Metric::Euclidean;
  if (name == "inner_product" || name == "ip") return Metric::InnerProduct;
  return std::nullopt;
}

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

double l2_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

void normalize(std::span<float> v) {
  double s = 0;
  for (float x : v) s += static_cast<double>(x) * x;
  if (s <= 0) return;
  const double inv = 1.0 / std::sqrt(s);
  for (float& x : v) x = static_cast<float>(x * inv);
}

// ---- flat ----

FlatIndex::FlatIndex(std::size_t dim, Metric metric) : dim_(dim), metric_(metric) {
  if (dim == 0) throw std::invalid_argument("index dimension must be positive");
}

void FlatIndex::add(std::string id, std::span<const float> v) {
  if (v.size() != dim_)
    throw std::invalid_argument("vector has dimension " + std::to_string(v.size()) + ", expected " +
                                std::to_string(dim_));
  const auto at = data_.size();
  data_.insert(data_.end(), v.begin(), v.end());
  if (metric_ == Metric::Cosine) normalize(std::span<float>(data_.data() + at, dim_));
  ids_.push_back(std::move(id));
}

std::vector<float> FlatIndex::prepare(std::span<const float> q) const {
  if (q.size() != dim_)
    throw std::invalid_argument("query has dimension " + std::to_string(q.size()) + ", expected " +
                                std::to_string(dim_));
  std::vector<float> out(q.begin(), q.end());
  if (metric_ == Metric::Cosine) normalize(out);
  return out;
}

double FlatIndex::score(std::span<const float> prepared, DocId doc) const {
  return metric_ == Metric::Euclidean ? l2_distance(prepared, vector(doc)) : dot(prepared, vector(doc));
}

bool FlatIndex::before(const Hit& a, const Hit& b) const {
  if (a.score != b.score) return metric_ == Metric::Euclidean ? a.score < b.score : a.score > b.score;
  return ids_[a.doc] < ids_[b.doc];
}

std::vector<Hit> FlatIndex::search(std::span<const float> q, std::size_t k) const {
  if (k < 1) throw std::invalid_argument("k must be at least 1");
  if (ids_.empty()) throw std::invalid_argument("search on an empty index");
  const auto pq = prepare(q);
  std::vector<Hit> hits(ids_.size());
  for (DocId d = 0; d < ids_.size(); ++d) hits[d] = {d, score(pq, d)};
  return take_top(std::move(hits), k, *this);
}

std::vector<Hit> FlatIndex::search_subset(std::span<const float> q, std::span<const DocId> docs,
                                          std::size_t k) const {
  if (k < 1) throw std::invalid_argument("k must be at least 1");
  const auto pq = prepare(q);
  std::vector<Hit> hits;
  hits.reserve(docs.size());
  for (DocId d : docs) hits.push_back({d, score(pq, d)});
  return take_top(std::move(hits), k, *this);
}

std::vector<ScoredId> FlatIndex::resolve(std::span<const Hit> hits) const {
  std::vector<ScoredId> out;
  out.reserve(hits.size());
  for (const auto& h : hits) out.push_back({ids_[h.doc], h.score});
  return out;
}

// ---- scalar quantizer ----

void ScalarQuantizer::train(std::span<const float> rows, std::size_t dim) {
  vmin.assign(dim, 0.0f);
  scale.assign(dim, 0.0f);
  const std::size_t n = dim ? rows.size() / dim : 0;
  if (n == 0) return;
  std::vector<float> vmax(dim);
  for (std::size_t d = 0; d < dim; ++d) vmin[d] = vmax[d] = rows[d];
  for (std::size_t i = 1; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d) {
      vmin[d] = std::min(vmin[d], rows[i * dim + d]);
      vmax[d] = std::max(vmax[d], rows[i * dim + d]);
    }
  for (std::size_t d = 0; d < dim; ++d) scale[d] = (vmax[d] - vmin[d]) / 255.0f;
}

std::uint8_t ScalarQuantizer::encode_one(std::size_t d, float v) const {
  if (scale[d] <= 0) return 0;
  const double c = std::round((static_cast<double>(v) - vmin[d]) / scale[d]);
  return static_cast<std::uint8_t>(std::clamp(c, 0.0, 255.0));
}

void ScalarQuantizer::encode(std::span<const float> v, std::span<std::uint8_t> out) const {
  for (std::size_t d = 0; d < v.size(); ++d) out[d] = encode_one(d, v[d]);
}

std::vector<float> ScalarQuantizer::decode(std::span<const std::uint8_t> codes) const {
  std::vector<float> out(codes.size());
  for (std::size_t d = 0; d < codes.size(); ++d) out[d] = decode_one(d, codes[d]);
  return out;
}

// ---- k-means ----

std::vector<float> kmeans(std::span<const float> rows, std::size_t dim, std::size_t k,
                          const KMeansOptions& opts, std::vector<std::uint32_t>* assignment) {
  using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::size_t n = rows.size() / dim;
  if (k == 0 || n == 0) throw std::invalid_argument("kmeans needs k >= 1 and at least one point");
  k = std::min(k, n);
  Eigen::Map<const RowMat> X(rows.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  const Eigen::VectorXf xnorm = X.rowwise().squaredNorm();

  std::mt19937_64 rng(opts.seed);
  RowMat C(k, dim);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  C.row(0) = X.row(static_cast<Eigen::Index>(first));
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (X.row(static_cast<Eigen::Index>(i)) - C.row(static_cast<Eigen::Index>(c - 1)))
                           .cast<double>()
                           .squaredNorm();
      d2[i] = std::min(d2[i], d);
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double r = std::uniform_real_distribution<double>(0, total)(rng);
      for (pick = 0; pick + 1 < n; ++pick) {
        r -= d2[pick];
        if (r < 0) break;
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    C.row(static_cast<Eigen::Index>(c)) = X.row(static_cast<Eigen::Index>(pick));
  }

  std::vector<std::uint32_t> assign(n, 0);
  std::vector<float> best(n, 0);
  auto assign_all = [&] {
    const Eigen::VectorXf cnorm = C.rowwise().squaredNorm();
    const RowMat dots = X * C.transpose();
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t arg = 0;
      float bd = std::numeric_limits<float>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const float d = xnorm(static_cast<Eigen::Index>(i)) - 2 * dots(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) +
                        cnorm(static_cast<Eigen::Index>(c));
        if (d < bd) {
          bd = d;
          arg = static_cast<std::uint32_t>(c);
        }
      }
      if (arg != assign[i]) changed = true;
      assign[i] = arg;
      best[i] = bd;
    }
    return changed;
  };

  assign_all();
  for (std::size_t it = 0; it < opts.iterations; ++it) {
    RowMat sum = RowMat::Zero(k, dim);
    std::vector<std::size_t> cnt(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sum.row(assign[i]) += X.row(static_cast<Eigen::Index>(i));
      ++cnt[assign[i]];
    }
    std::vector<char> taken(n, 0);
    for (std::size_t c = 0; c < k; ++c) {
      if (cnt[c] > 0) {
        C.row(static_cast<Eigen::Index>(c)) = sum.row(static_cast<Eigen::Index>(c)) / static_cast<float>(cnt[c]);
        continue;
      }
      std::size_t far = 0;
      float fd = -1;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i] && best[i] > fd) {
          fd = best[i];
          far = i;
        }
      taken[far] = 1;
      C.row(static_cast<Eigen::Index>(c)) = X.row(static_cast<Eigen::Index>(far));
    }
    if (!assign_all() && std::all_of(cnt.begin(), cnt.end(), [](std::size_t x) { return x > 0; })) break;
  }
  if (assignment) *assignment = assign;
  return std::vector<float>(C.data(), C.data() + C.size());
}

// ---- IVF ----

IvfIndex IvfIndex::build(const FlatIndex& source, const KMeansOptions& opts) {
  if (source.size() == 0) throw std::invalid_argument("cannot build IVF over an empty index");
  IvfIndex ivf;
  ivf.dim_ = source.dim();
  ivf.size_ = source.size();
  ivf.metric_ = source.metric();
  ivf.nlist_ = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(source.size()))));
  std::vector<std::uint32_t> assign;
  ivf.centroids_ = kmeans(source.data(), ivf.dim_, ivf.nlist_, opts, &assign);
  ivf.nlist_ = ivf.centroids_.size() / ivf.dim_;
  std::vector<float> residuals(source.data().begin(), source.data().end());
  for (DocId d = 0; d < source.size(); ++d)
    for (std::size_t k = 0; k < ivf.dim_; ++k) residuals[d * ivf.dim_ + k] -= ivf.centroids_[assign[d] * ivf.dim_ + k];
  ivf.sq_.train(residuals, ivf.dim_);
  ivf.lists_.resize(ivf.nlist_);
  for (DocId d = 0; d < source.size(); ++d) {
    auto& pl = ivf.lists_[assign[d]];
    pl.ids.push_back(d);
    const auto at = pl.codes.size();
    pl.codes.resize(at + ivf.dim_);
    ivf.sq_.encode(std::span<const float>(residuals.data() + d * ivf.dim_, ivf.dim_),
                   std::span<std::uint8_t>(pl.codes.data() + at, ivf.dim_));
  }
  return ivf;
}

std::size_t IvfIndex::default_nprobe() const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(nlist_)))));
}

std::optional<std::size_t> IvfIndex::list_of(DocId doc) const {
  for (std::size_t l = 0; l < lists_.size(); ++l)
    if (std::find(lists_[l].ids.begin(), lists_[l].ids.end(), doc) != lists_[l].ids.end()) return l;
  return std::nullopt;
}

std::vector<float> IvfIndex::decode(std::size_t list, std::size_t slot) const {
  std::vector<float> out(dim_);
  const float* c = centroids_.data() + list * dim_;
  const std::uint8_t* q = lists_[list].codes.data() + slot * dim_;
  for (std::size_t d = 0; d < dim_; ++d) out[d] = c[d] + sq_.decode_one(d, q[d]);
  return out;
}

std::vector<Hit> IvfIndex::search(std::span<const float> prepared, std::size_t k, std::size_t nprobe,
                                  const FlatIndex& ids) const {
  if (k < 1) throw std::invalid_argument("k must be at least 1");
  if (prepared.size() != dim_) throw std::invalid_argument("query dimension mismatch");
  nprobe = std::clamp<std::size_t>(nprobe, 1, nlist_);
  std::vector<std::pair<double, std::size_t>> cd(nlist_);
  for (std::size_t c = 0; c < nlist_; ++c)
    cd[c] = {l2_distance(prepared, std::span<const float>(centroids_.data() + c * dim_, dim_)), c};
  std::partial_sort(cd.begin(), cd.begin() + static_cast<std::ptrdiff_t>(nprobe), cd.end());

  std::vector<Hit> hits;
  std::vector<float> dec(dim_);
  for (std::size_t p = 0; p < nprobe; ++p) {
    const auto& pl = lists_[cd[p].second];
    for (std::size_t s = 0; s < pl.ids.size(); ++s) {
      const std::uint8_t* c = pl.codes.data() + s * dim_;
      const float* cen = centroids_.data() + cd[p].second * dim_;
      for (std::size_t d = 0; d < dim_; ++d) dec[d] = cen[d] + sq_.decode_one(d, c[d]);
      const double sc = metric_ == Metric::Euclidean ? l2_distance(prepared, dec) : dot(prepared, dec);
      hits.push_back({pl.ids[s], sc});
    }
  }
  return take_top(std::move(hits), k, ids);
}

// ---- metadata ----

std::string_view count_op_name(CountOp op) {
  switch (op) {
    case CountOp::Eq: return "=";
    case CountOp::Lt: return "<";
    case CountOp::Le: return "<=";
    case CountOp::Gt: return ">";
    case CountOp::Ge: return ">=";
    case CountOp::Between: return "BETWEEN";
    case CountOp::Has: return "has";
    case CountOp::NotHas: return "NOT has";
  }
  return "?";
}

void MetaPredicate::validate() const {
  if (op == CountOp::Between && lo > hi)
    throw std::invalid_argument("BETWEEN bounds are reversed: " + std::to_string(lo) + " > " +
                                std::to_string(hi));
}

bool MetaPredicate::matches(const TypeCounts& counts, int total) const {
  const int v = type ? counts[static_cast<std::size_t>(*type)] : total;
  switch (op) {
    case CountOp::Eq: return v == lo;
    case CountOp::Lt: return v < lo;
    case CountOp::Le: return v <= lo;
    case CountOp::Gt: return v > lo;
    case CountOp::Ge: return v >= lo;
    case CountOp::Between: return v >= lo && v <= hi;
    case CountOp::Has: return v > 0;
    case CountOp::NotHas: return v == 0;
  }
  return false;
}

void MetadataIndex::add(DocId doc, const TypeCounts& counts) {
  if (doc != counts_.size()) throw std::invalid_argument("metadata documents must be added in order");
  counts_.push_back(counts);
  totals_.push_back(std::accumulate(counts.begin(), counts.end(), 0));
  for (std::size_t t = 0; t < graph::kNumElementTypes; ++t) {
    inverted_[t][counts[t]].push_back(doc);
    if (counts[t] > 0) presence_[t].push_back(doc);
  }
  sealed_ = false;
}

void MetadataIndex::seal() {
  const auto n = counts_.size();
  for (std::size_t t = 0; t < graph::kNumElementTypes; ++t) {
    auto& l = sorted_[t];
    l.clear();
    l.reserve(n);
    for (DocId d = 0; d < n; ++d) l.emplace_back(counts_[d][t], d);
    std::sort(l.begin(), l.end());
  }
  sorted_totals_.clear();
  sorted_totals_.reserve(n);
  for (DocId d = 0; d < n; ++d) sorted_totals_.emplace_back(totals_[d], d);
  std::sort(sorted_totals_.begin(), sorted_totals_.end());
  sealed_ = true;
}

void MetadataIndex::require_sealed() const {
  if (!sealed_) throw std::logic_error("metadata index queried before seal()");
}

const MetadataIndex::SortedList& MetadataIndex::sorted_for(const MetaPredicate& p) const {
  return p.type ? sorted_[static_cast<std::size_t>(*p.type)] : sorted_totals_;
}

std::pair<std::size_t, std::size_t> MetadataIndex::count_range(const MetaPredicate& p) const {
  const auto& l = sorted_for(p);
  auto pos = [&l](long long c) {
    if (c <= std::numeric_limits<int>::min()) return std::size_t{0};
    if (c > std::numeric_limits<int>::max()) return l.size();
    return static_cast<std::size_t>(
        std::lower_bound(l.begin(), l.end(), std::pair<int, DocId>{static_cast<int>(c), 0}) - l.begin());
  };
  const long long lo = p.lo, hi = p.hi;
  std::size_t a = 0, b = l.size();
  switch (p.op) {
    case CountOp::Eq: a = pos(lo); b = pos(lo + 1); break;
    case CountOp::Lt: b = pos(lo); break;
    case CountOp::Le: b = pos(lo + 1); break;
    case CountOp::Gt: a = pos(lo + 1); break;
    case CountOp::Ge: a = pos(lo); break;
    case CountOp::Between: a = pos(lo); b = pos(hi + 1); break;
    case CountOp::Has: a = pos(1); break;
    case CountOp::NotHas: b = pos(1); break;
  }
  if (b < a) b = a;
  return {a, b};
}

std::size_t MetadataIndex::match_count(const MetaPredicate& p) const {
  require_sealed();
  p.validate();
  const auto [a, b] = count_range(p);
  return b - a;
}

double MetadataIndex::selectivity(const MetaPredicate& p) const {
  if (counts_.empty()) return 0.0;
  return static_cast<double>(match_count(p)) / static_cast<double>(counts_.size());
}

IdSet MetadataIndex::filter(const MetaPredicate& p) const {
  require_sealed();
  p.validate();
  if (p.type) {
    const auto t = static_cast<std::size_t>(*p.type);
    if (p.op == CountOp::Eq) {
      auto it = inverted_[t].find(p.lo);
      return it == inverted_[t].end() ? IdSet{} : it->second;
    }
    if (p.op == CountOp::Has) return presence_[t];
    if (p.op == CountOp::NotHas) {
      IdSet out;
      out.reserve(counts_.size() - presence_[t].size());
      auto it = presence_[t].begin();
      for (DocId d = 0; d < counts_.size(); ++d) {
        if (it != presence_[t].end() && *it == d) {
          ++it;
          continue;
        }
        out.push_back(d);
      }
      return out;
    }
  }
  const auto& l = sorted_for(p);
  const auto [a, b] = count_range(p);
  IdSet out;
  out.reserve(b - a);
  for (std::size_t i = a; i < b; ++i) out.push_back(l[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

bool MetadataIndex::matches(DocId doc, const MetaPredicate& p) const {
  return p.matches(counts_[doc], totals_[doc]);
}

IdSet MetadataIndex::all() const {
  IdSet out(counts_.size());
  std::iota(out.begin(), out.end(), DocId{0});
  return out;
}

// ---- semantic embedding ----

SemEmbedder::SemEmbedder(EmbedderStrategy strategy, std::uint64_t seed, std::size_t dim)
    : strategy_(strategy), seed_(seed), dim_(dim) {
  if (dim == 0) throw std::invalid_argument("embedding dimension must be positive");
}

std::vector<float> SemEmbedder::embed_text(std::string_view text) const {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));

  std::vector<double> acc(dim_, 0.0);
  std::sort(tokens.begin(), tokens.end());
  for (std::size_t i = 0; i < tokens.size();) {
    std::size_t j = i;
    while (j < tokens.size() && tokens[j] == tokens[i]) ++j;
    const double tf = static_cast<double>(j - i);
    std::mt19937_64 rng(mix64(seed_ ^ fnv1a(tokens[i])));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t d = 0; d < dim_; ++d) acc[d] += tf * gauss(rng);
    i = j;
  }
  std::vector<float> out(dim_, 0.0f);
  double s = 0;
  for (double v : acc) s += v * v;
  if (s <= 0) {
    out[0] = 1.0f;
    return out;
  }
  const double inv = 1.0 / std::sqrt(s);
  for (std::size_t d = 0; d < dim_; ++d) out[d] = static_cast<float>(acc[d] * inv);
  return out;
}

std::vector<float> SemEmbedder::embed_screen(const graph::DetectionManifest& m, const graph::UiGraph& g) const {
  if (strategy_ == EmbedderStrategy::BuiltinHashed) return embed_text(screen_text(g));
  if (!m.semantic_vec)
    throw std::invalid_argument("screen " + m.screen_id + " has no semantic_vec for the external embedder");
  if (m.semantic_vec->size() != dim_)
    throw std::invalid_argument("screen " + m.screen_id + ": semantic_vec has dimension " +
                                std::to_string(m.semantic_vec->size()) + ", expected " + std::to_string(dim_));
  auto v = *m.semantic_vec;
  normalize(v);
  return v;
}

std::string screen_text(const graph::UiGraph& g) {
  std::string out;
  for (const auto& n : g.nodes) {
    if (!out.empty()) out.push_back(' ');
    out += n.text;
  }
  return out;
}

MemoryReport report_memory(std::size_t n, std::size_t dim, std::size_t dense_families) {
  MemoryReport r;
  r.n = n;
  r.dim = dim;
  r.dense_families = dense_families;
  r.dense_bytes_per_family = n * dim * sizeof(float);
  r.dense_bytes = r.dense_bytes_per_family * dense_families;
  r.quantized_bytes = n * dim;
  r.metadata_bytes = n * graph::kNumElementTypes * sizeof(std::int32_t);
  return r;
}

// ---- hybrid ----

HybridIndex::HybridIndex(IndexOptions opts)
    : opts_(std::move(opts)),
      structural_(opts_.structural_dim, opts_.structural_metric),
      semantic_(opts_.semantic_dim, Metric::Cosine) {}

void HybridIndex::add(ScreenRecord rec) {
  if (rec.screen_id.empty()) throw std::invalid_argument("screen_id must not be empty");
  if (by_id_.count(rec.screen_id)) throw DuplicateIdError("duplicate screen_id: " + rec.screen_id);
  if (rec.structural.size() != structural_.dim())
    throw std::invalid_argument("structural vector has dimension " + std::to_string(rec.structural.size()) +
                                ", expected " + std::to_string(structural_.dim()));
  if (rec.semantic.size() != semantic_.dim())
    throw std::invalid_argument("semantic vector has dimension " + std::to_string(rec.semantic.size()) +
                                ", expected " + std::to_string(semantic_.dim()));
  if (rec.visual) {
    if (rec.visual->empty()) throw std::invalid_argument("visual vector is empty");
    if (visual_dim_ != 0 && rec.visual->size() != visual_dim_)
      throw std::invalid_argument("visual vector has dimension " + std::to_string(rec.visual->size()) +
                                  ", expected " + std::to_string(visual_dim_));
  }
  const auto ni = opts_.intent_labels.size();
  if (!rec.intent_probs.empty() && rec.intent_probs.size() != ni)
    throw std::invalid_argument("intent distribution has " + std::to_string(rec.intent_probs.size()) +
                                " entries, expected " + std::to_string(ni));
  for (int c : rec.counts)
    if (c < 0) throw std::invalid_argument("element counts must be non-negative");

  const auto doc = static_cast<DocId>(size());
  structural_.add(rec.screen_id, rec.structural);
  semantic_.add(rec.screen_id, rec.semantic);
  if (rec.visual && visual_dim_ == 0) {
    visual_dim_ = rec.visual->size();
    visual_.assign(std::size_t{doc} * visual_dim_, 0.0f);
  }
  if (visual_dim_ != 0) {
    if (rec.visual) {
      visual_.insert(visual_.end(), rec.visual->begin(), rec.visual->end());
      normalize(std::span<float>(visual_.data() + std::size_t{doc} * visual_dim_, visual_dim_));
    } else {
      visual_.resize(visual_.size() + visual_dim_, 0.0f);
    }
  }
  visual_present_.push_back(rec.visual ? 1 : 0);
  if (rec.intent_probs.empty())
    intent_.resize(intent_.size() + ni, 0.0f);
  else
    intent_.insert(intent_.end(), rec.intent_probs.begin(), rec.intent_probs.end());
  manifests_.push_back(std::move(rec.manifest_json));
  metadata_.add(doc, rec.counts);
  by_id_.emplace(std::move(rec.screen_id), doc);
}

void HybridIndex::seal() { metadata_.seal(); }

void HybridIndex::build_ivf(const KMeansOptions& opts) {
  ivf_ = std::make_shared<const IvfIndex>(IvfIndex::build(structural_, opts));
}

std::optional<DocId> HybridIndex::find(std::string_view screen_id) const {
  auto it = by_id_.find(std::string(screen_id));
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> HybridIndex::intent_index(std::string_view label) const {
  for (std::size_t i = 0; i < opts_.intent_labels.size(); ++i)
    if (opts_.intent_labels[i] == label) return i;
  return std::nullopt;
}

MemoryReport HybridIndex::memory() const { return report_memory(size(), structural_.dim(), 2); }

namespace {

constexpr std::string_view kIndexMagic{"UISINDX\x01", 8};
constexpr std::uint32_t kIndexVersion = 1;

void put_floats(io::Writer& w, std::span<const float> v) {
  for (float x : v) w.put<float>(x);
}

void get_floats(io::Reader& r, std::size_t n, std::vector<float>& out) {
  if (r.remaining() < n * sizeof(float)) throw io::FormatError("unexpected end of data");
  out.reserve(out.size() + n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(r.get<float>());
}

}  // namespace

void HybridIndex::save(const std::filesystem::path& path) const {
  if (!sealed()) throw std::logic_error("index must be sealed before saving");
  io::Writer w;
  w.put_bytes(kIndexMagic);
  w.put<std::uint32_t>(kIndexVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(opts_.structural_metric));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(structural_.dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(semantic_.dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(visual_dim_));
  w.put<std::uint64_t>(size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(opts_.intent_labels.size()));
  for (const auto& l : opts_.intent_labels) w.put_string(l);
  for (DocId d = 0; d < size(); ++d) {
    w.put_string(id(d));
    put_floats(w, structural_.vector(d));
    put_floats(w, semantic_.vector(d));
    w.put<std::uint8_t>(visual_present_[d]);
    if (visual_dim_) put_floats(w, visual(d));
    for (int c : metadata_.counts(d)) w.put<std::int32_t>(c);
    put_floats(w, intent_probs(d));
    w.put_string(manifests_[d]);
  }
  const auto ivf = ivf_;
  const bool write_ivf = ivf && ivf->size() == size();
  w.put<std::uint8_t>(write_ivf ? 1 : 0);
  if (write_ivf) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ivf->nlist_));
    put_floats(w, ivf->sq_.vmin);
    put_floats(w, ivf->sq_.scale);
    put_floats(w, ivf->centroids_);
    for (const auto& pl : ivf->lists_) {
      w.put<std::uint32_t>(static_cast<std::uint32_t>(pl.ids.size()));
      for (DocId id : pl.ids) w.put<std::uint32_t>(id);
      w.put_bytes(std::string_view(reinterpret_cast<const char*>(pl.codes.data()), pl.codes.size()));
    }
  }
  w.finish_to_file(path);
}

HybridIndex HybridIndex::load(const std::filesystem::path& path) {
  std::string file;
  try {
    file = io::read_file(path);
  } catch (const std::exception& e) {
    throw IndexFormatError(e.what());
  }
  if (file.size() < kIndexMagic.size() + 4 || std::string_view(file).substr(0, kIndexMagic.size()) != kIndexMagic)
    throw IndexFormatError(path.string() + ": not an index file");
  {
    io::Reader head(std::string_view(file).substr(kIndexMagic.size(), 4));
    const auto version = head.get<std::uint32_t>();
    if (version != kIndexVersion)
      throw IndexFormatError(path.string() + ": unsupported index version " + std::to_string(version) +
                             " (expected " + std::to_string(kIndexVersion) + ")");
  }
  try {
    io::Reader r(io::checked_payload(file));
    r.get_bytes(kIndexMagic.size());
    r.get<std::uint32_t>();
    IndexOptions opts;
    const auto metric = r.get<std::uint8_t>();
    if (metric > static_cast<std::uint8_t>(Metric::InnerProduct)) throw io::FormatError("bad metric");
    opts.structural_metric = static_cast<Metric>(metric);
    opts.structural_dim = r.get<std::uint32_t>();
    opts.semantic_dim = r.get<std::uint32_t>();
    const std::size_t vdim = r.get<std::uint32_t>();
    const auto n = r.get<std::uint64_t>();
    const auto nl = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < nl; ++i) opts.intent_labels.push_back(r.get_string());
    if (opts.structural_dim == 0 || opts.semantic_dim == 0) throw io::FormatError("zero dimension");

    HybridIndex ix(opts);
    ix.visual_dim_ = vdim;
    for (std::uint64_t d = 0; d < n; ++d) {
      auto sid = r.get_string();
      if (ix.by_id_.count(sid)) throw io::FormatError("duplicate screen_id " + sid);
      get_floats(r, opts.structural_dim, ix.structural_.data_);
      get_floats(r, opts.semantic_dim, ix.semantic_.data_);
      ix.structural_.ids_.push_back(sid);
      ix.semantic_.ids_.push_back(sid);
      ix.visual_present_.push_back(r.get<std::uint8_t>());
      if (vdim) get_floats(r, vdim, ix.visual_);
      TypeCounts counts{};
      for (auto& c : counts) c = r.get<std::int32_t>();
      get_floats(r, nl, ix.intent_);
      ix.manifests_.push_back(r.get_string());
      ix.metadata_.add(static_cast<DocId>(d), counts);
      ix.by_id_.emplace(std::move(sid), static_cast<DocId>(d));
    }
    ix.metadata_.seal();
    if (r.get<std::uint8_t>()) {
      auto ivf = std::make_shared<IvfIndex>();
      ivf->dim_ = opts.structural_dim;
      ivf->size_ = n;
      ivf->metric_ = opts.structural_metric;
      ivf->nlist_ = r.get<std::uint32_t>();
      get_floats(r, ivf->dim_, ivf->sq_.vmin);
      get_floats(r, ivf->dim_, ivf->sq_.scale);
      get_floats(r, ivf->nlist_ * ivf->dim_, ivf->centroids_);
      ivf->lists_.resize(ivf->nlist_);
      std::size_t seen = 0;
      for (auto& pl : ivf->lists_) {
        const auto cnt = r.get<std::uint32_t>();
        for (std::uint32_t i = 0; i < cnt; ++i) {
          const auto id = r.get<std::uint32_t>();
          if (id >= n) throw io::FormatError("posting id out of range");
          pl.ids.push_back(id);
        }
        const auto codes = r.get_bytes(std::size_t{cnt} * ivf->dim_);
        pl.codes.assign(codes.begin(), codes.end());
        seen += cnt;
      }
      if (seen != n) throw io::FormatError("posting lists do not cover the index");
      ix.ivf_ = std::move(ivf);
    }
    if (!r.at_end()) throw io::FormatError("trailing bytes after index");
    return ix;
  } catch (const io::FormatError& e) {
    throw IndexFormatError(path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw IndexFormatError(path.string() + ": " + e.what());
  }
}

}  // namespace uisearch::index
