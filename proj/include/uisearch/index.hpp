#pragma once

// Hybrid store: exact flat vector search, IVF over 8-bit scalar-quantized
// codes, and inverted / sorted / boolean metadata indices over per-type
// element counts.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <map>
#include <vector>

#include "uisearch/ui_graph.hpp"

namespace uisearch::index {

inline constexpr std::size_t kEmbeddingDim = 128;

using DocId = std::uint32_t;
// Sorted ascending, no duplicates.
using IdSet = std::vector<DocId>;

enum class Metric : std::uint8_t { Cosine, Euclidean, InnerProduct };

std::string_view metric_name(Metric m);
std::optional<Metric> parse_metric(std::string_view name);

class DuplicateIdError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// For cosine and inner product `score` is a similarity (higher first); for
// euclidean it is the raw distance (lower first).
struct Hit {
  DocId doc = 0;
  double score = 0;
  bool operator==(const Hit&) const = default;
};

struct ScoredId {
  std::string screen_id;
  double score = 0;
  bool operator==(const ScoredId&) const = default;
};

// Sequential double accumulation; used by every scoring path so that
// independent implementations agree bit for bit.
double dot(std::span<const float> a, std::span<const float> b);
double l2_distance(std::span<const float> a, std::span<const float> b);
void normalize(std::span<float> v);

class FlatIndex {
 public:
  explicit FlatIndex(std::size_t dim = kEmbeddingDim, Metric metric = Metric::Cosine);

  // Cosine stores the L2-normalized vector.
  void add(std::string id, std::span<const float> v);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  Metric metric() const { return metric_; }
  const std::string& id(DocId doc) const { return ids_[doc]; }
  std::span<const float> vector(DocId doc) const { return {data_.data() + std::size_t{doc} * dim_, dim_}; }
  const std::vector<float>& data() const { return data_; }

  // Validates the dimension and normalizes for cosine.
  std::vector<float> prepare(std::span<const float> q) const;
  double score(std::span<const float> prepared, DocId doc) const;
  // True when a ranks strictly before b: metric order, then screen id.
  bool before(const Hit& a, const Hit& b) const;

  // Exact top-k. Throws std::invalid_argument for k < 1 or an empty index.
  std::vector<Hit> search(std::span<const float> q, std::size_t k) const;
  // Exact top-k restricted to `docs`.
  std::vector<Hit> search_subset(std::span<const float> q, std::span<const DocId> docs,
                                 std::size_t k) const;
  std::vector<ScoredId> resolve(std::span<const Hit> hits) const;

 private:
  friend class HybridIndex;
  std::size_t dim_;
  Metric metric_;
  std::vector<std::string> ids_;
  std::vector<float> data_;
};

// Per-dimension affine 8-bit codes: v ~ min + code * scale.
struct ScalarQuantizer {
  std::vector<float> vmin;
  std::vector<float> scale;

  void train(std::span<const float> rows, std::size_t dim);
  std::uint8_t encode_one(std::size_t d, float v) const;
  float decode_one(std::size_t d, std::uint8_t code) const { return vmin[d] + static_cast<float>(code) * scale[d]; }
  void encode(std::span<const float> v, std::span<std::uint8_t> out) const;
  std::vector<float> decode(std::span<const std::uint8_t> codes) const;
};

struct KMeansOptions {
  std::size_t iterations = 25;
  std::uint64_t seed = 1234;
};

// k-means++ seeding, Lloyd iterations, empty clusters re-seeded from the
// point farthest from its centroid. Returns k x dim centroids.
std::vector<float> kmeans(std::span<const float> rows, std::size_t dim, std::size_t k,
                          const KMeansOptions& opts, std::vector<std::uint32_t>* assignment = nullptr);

class IvfIndex {
 public:
  IvfIndex() = default;

  // nlist = ceil(sqrt(n)). Codes hold each stored vector's residual
  // against its list centroid.
  static IvfIndex build(const FlatIndex& source, const KMeansOptions& opts = {});

  std::size_t nlist() const { return nlist_; }
  std::size_t size() const { return size_; }
  std::size_t dim() const { return dim_; }
  Metric metric() const { return metric_; }
  std::size_t default_nprobe() const;
  const ScalarQuantizer& quantizer() const { return sq_; }
  const std::vector<float>& centroids() const { return centroids_; }
  const std::vector<DocId>& posting_ids(std::size_t list) const { return lists_[list].ids; }
  std::span<const std::uint8_t> code(std::size_t list, std::size_t slot) const {
    return {&lists_[list].codes[slot * dim_], dim_};
  }
  std::optional<std::size_t> list_of(DocId doc) const;
  // Reconstructed vector: centroid + dequantized residual.
  std::vector<float> decode(std::size_t list, std::size_t slot) const;

  // Top-k among the nprobe nearest clusters, scored on dequantized codes.
  // `ids` supplies screen ids for tie-breaking (the source flat index).
  std::vector<Hit> search(std::span<const float> prepared, std::size_t k, std::size_t nprobe,
                          const FlatIndex& ids) const;

 private:
  friend class HybridIndex;
  struct PostingList {
    std::vector<DocId> ids;
    std::vector<std::uint8_t> codes;
  };
  std::size_t dim_ = 0;
  std::size_t size_ = 0;
  std::size_t nlist_ = 0;
  Metric metric_ = Metric::Cosine;
  std::vector<float> centroids_;
  std::vector<PostingList> lists_;
  ScalarQuantizer sq_;
};

enum class CountOp : std::uint8_t { Eq, Lt, Le, Gt, Ge, Between, Has, NotHas };

std::string_view count_op_name(CountOp op);

// `type` empty means the total element count ("any").
struct MetaPredicate {
  std::optional<graph::ElementType> type;
  CountOp op = CountOp::Has;
  int lo = 0;
  int hi = 0;
  bool operator==(const MetaPredicate&) const = default;

  // Throws std::invalid_argument for lo > hi.
  void validate() const;
  bool matches(const std::array<int, graph::kNumElementTypes>& counts, int total) const;
};

using TypeCounts = std::array<int, graph::kNumElementTypes>;

class MetadataIndex {
 public:
  void add(DocId doc, const TypeCounts& counts);
  // Rebuilds the sorted lists. Queries require a sealed index.
  void seal();
  bool sealed() const { return sealed_; }

  std::size_t size() const { return counts_.size(); }
  const TypeCounts& counts(DocId doc) const { return counts_[doc]; }
  int total(DocId doc) const { return totals_[doc]; }

  IdSet filter(const MetaPredicate& p) const;
  std::size_t match_count(const MetaPredicate& p) const;
  double selectivity(const MetaPredicate& p) const;
  bool matches(DocId doc, const MetaPredicate& p) const;
  IdSet all() const;

 private:
  using SortedList = std::vector<std::pair<int, DocId>>;
  const SortedList& sorted_for(const MetaPredicate& p) const;
  std::pair<std::size_t, std::size_t> count_range(const MetaPredicate& p) const;
  void require_sealed() const;

  std::vector<TypeCounts> counts_;
  std::vector<int> totals_;
  std::array<std::map<int, IdSet>, graph::kNumElementTypes> inverted_;
  std::array<SortedList, graph::kNumElementTypes> sorted_;
  SortedList sorted_totals_;
  std::array<IdSet, graph::kNumElementTypes> presence_;
  bool sealed_ = true;
};

enum class EmbedderStrategy : std::uint8_t { BuiltinHashed, ExternalPrecomputed };

// Text embedding. The builtin strategy hashes lowercase alphanumeric tokens
// to seeded Gaussian directions and sums them by term frequency.
class SemEmbedder {
 public:
  explicit SemEmbedder(EmbedderStrategy strategy = EmbedderStrategy::BuiltinHashed,
                       std::uint64_t seed = 17, std::size_t dim = kEmbeddingDim);

  EmbedderStrategy strategy() const { return strategy_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t dim() const { return dim_; }

  // Unit vector; empty text maps to the first basis direction.
  std::vector<float> embed_text(std::string_view text) const;
  // External strategy reads the manifest's semantic_vec; builtin embeds the
  // concatenated node texts.
  std::vector<float> embed_screen(const graph::DetectionManifest& m, const graph::UiGraph& g) const;

 private:
  EmbedderStrategy strategy_;
  std::uint64_t seed_;
  std::size_t dim_;
};

std::string screen_text(const graph::UiGraph& g);

struct MemoryReport {
  std::size_t n = 0;
  std::size_t dim = 0;
  std::size_t dense_families = 0;
  std::size_t dense_bytes_per_family = 0;
  std::size_t dense_bytes = 0;
  std::size_t quantized_bytes = 0;
  std::size_t metadata_bytes = 0;
};

// n * dim * 4 bytes per dense float family, n * dim bytes for 8-bit codes,
// n * |T| * 4 bytes for the count tables.
MemoryReport report_memory(std::size_t n, std::size_t dim = kEmbeddingDim,
                           std::size_t dense_families = 2);

struct ScreenRecord {
  std::string screen_id;
  std::vector<float> structural;
  std::vector<float> semantic;
  std::optional<std::vector<float>> visual;
  TypeCounts counts{};
  std::vector<float> intent_probs;
  std::string manifest_json;
};

struct IndexOptions {
  Metric structural_metric = Metric::Cosine;
  std::size_t structural_dim = kEmbeddingDim;
  std::size_t semantic_dim = kEmbeddingDim;
  std::vector<std::string> intent_labels;
};

class IndexFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class HybridIndex {
 public:
  explicit HybridIndex(IndexOptions opts = {});

  // Validates the whole record before touching any family. Throws
  // DuplicateIdError or std::invalid_argument. Leaves the index unsealed
  // and marks any IVF stale.
  void add(ScreenRecord rec);
  void seal();
  bool sealed() const { return metadata_.sealed(); }

  void build_ivf(const KMeansOptions& opts = {});
  bool has_ivf() const { return ivf_ != nullptr; }
  bool ivf_fresh() const { return ivf_ && ivf_->size() == size(); }
  const IvfIndex* ivf() const { return ivf_.get(); }

  std::size_t size() const { return structural_.size(); }
  bool empty() const { return size() == 0; }
  const std::string& id(DocId doc) const { return structural_.id(doc); }
  std::optional<DocId> find(std::string_view screen_id) const;

  const IndexOptions& options() const { return opts_; }
  const FlatIndex& structural() const { return structural_; }
  const FlatIndex& semantic() const { return semantic_; }
  const MetadataIndex& metadata() const { return metadata_; }

  std::size_t visual_dim() const { return visual_dim_; }
  bool has_visual(DocId doc) const { return visual_present_[doc] != 0; }
  std::span<const float> visual(DocId doc) const {
    return {visual_.data() + std::size_t{doc} * visual_dim_, visual_dim_};
  }
  std::span<const float> intent_probs(DocId doc) const {
    return {intent_.data() + std::size_t{doc} * opts_.intent_labels.size(), opts_.intent_labels.size()};
  }
  std::optional<std::size_t> intent_index(std::string_view label) const;
  const std::string& manifest_json(DocId doc) const { return manifests_[doc]; }

  MemoryReport memory() const;

  // Versioned binary container with CRC trailer; written atomically.
  void save(const std::filesystem::path& path) const;
  // Throws IndexFormatError on version mismatch, checksum failure or a
  // truncated file; never returns a partial index.
  static HybridIndex load(const std::filesystem::path& path);

 private:
  IndexOptions opts_;
  FlatIndex structural_;
  FlatIndex semantic_;
  std::size_t visual_dim_ = 0;
  std::vector<float> visual_;
  std::vector<std::uint8_t> visual_present_;
  std::vector<float> intent_;
  std::vector<std::string> manifests_;
  MetadataIndex metadata_;
  std::unordered_map<std::string, DocId> by_id_;
  std::shared_ptr<const IvfIndex> ivf_;
};

}  // namespace uisearch::index
