#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rsid/common.hpp"
#include "rsid/data.hpp"

namespace rsid::gaoq {

enum class Method { gaoq, hkmeans_local, rq_kmeans };

Method method_from_string(const std::string& name);
std::string method_name(Method m);

struct QuantizerConfig {
  /// Branching factors b_1..b_{L-1}; the final level is auto-sized to give
  /// every item within a prefix its own code.
  std::vector<std::size_t> branching;
  /// Anchor counts g_l for aligned levels (index 0 = level 2). Empty means
  /// g_l = b_l; the last (auto-sized) level always sizes its anchor set to
  /// the largest prefix population.
  std::vector<std::size_t> anchors;
  std::size_t kmeans_iters = 50;
  std::uint64_t seed = 0;
  Method method = Method::gaoq;
  int threads = 1;

  void validate() const;
};

/// b_1 ~ b_2 with b_1*b_2 ~ N/15.
std::vector<std::size_t> default_branching(std::size_t item_count);

struct BalancedKMeansResult {
  std::vector<std::int32_t> assignment;  // point -> cluster
  std::vector<double> centroids;         // clusters x dim, row-major
  std::vector<std::size_t> sizes;
  std::size_t clusters = 0;
  std::size_t dim = 0;

  std::span<const double> centroid(std::size_t c) const {
    return {centroids.data() + c * dim, dim};
  }
};

/// K-means under the constraint that cluster sizes differ by at most one.
/// Assignment is greedy capacity-constrained Lloyd iterations followed by a
/// swap-improvement pass, so on return no single swap of two points (or
/// balance-preserving move) reduces the total squared distance to the final
/// centroids.
BalancedKMeansResult balanced_kmeans(std::span<const double> points,
                                     std::size_t n, std::size_t dim,
                                     std::size_t clusters, std::size_t iters,
                                     Rng& rng);

/// Total squared distance of points to their assigned centroids.
double partition_cost(std::span<const double> points, std::size_t n,
                      std::size_t dim, const BalancedKMeansResult& result);

struct AnchorSet {
  std::size_t level = 0;
  std::size_t dim = 0;
  std::size_t count = 0;
  std::vector<double> vectors;  // count x dim, unit rows
  double max_abs_cos = 0.0;     // achieved pairwise bound

  std::span<const double> anchor(std::size_t k) const {
    return {vectors.data() + k * dim, dim};
  }
};

/// Approximately orthonormal anchor directions. g <= D uses the Q factor of
/// a random Gaussian matrix; g > D spreads unit vectors by iterated pairwise
/// repulsion until the max |cos| stops improving by 1e-6.
AnchorSet ortho_anchors(std::size_t count, std::size_t dim, Rng& rng);

/// Exact injective assignment of rows to columns for a rows x cols matrix
/// (rows <= cols). Returns row -> column. With maximize=true entries are
/// similarities, otherwise costs.
std::vector<std::size_t> hungarian(std::span<const double> matrix,
                                   std::size_t rows, std::size_t cols,
                                   bool maximize);

struct LevelAssignment {
  std::vector<std::int32_t> child_of_point;
  std::vector<double> child_centroids;   // children x dim
  std::vector<std::int32_t> anchor_of_child;
  std::size_t children = 0;
  std::size_t dim = 0;
};

/// One GAOQ step under a single parent: balanced partition into `branching`
/// children, residualize child centroids against the parent centroid, then
/// Hungarian-match residual directions to the shared anchor set (maximizing
/// cosine similarity). Zero-norm residuals contribute an all-zero row.
LevelAssignment gaoq_level(std::span<const double> points, std::size_t n,
                           std::size_t dim,
                           std::span<const double> parent_centroid,
                           std::size_t branching, std::size_t iters,
                           const AnchorSet& anchors, Rng& rng);

struct TreeNode {
  std::size_t level = 0;          // 1-based; root is level 0
  std::ptrdiff_t parent = -1;     // index into CodeBook::nodes
  std::vector<double> centroid;
  std::vector<std::int32_t> members;  // item ids
  std::int32_t code = -1;             // level-l code carried by this node
};

struct CodeBook {
  Method method = Method::gaoq;
  std::size_t levels = 0;
  std::size_t dim = 0;
  QuantizerConfig config;
  std::vector<std::size_t> level_alphabet;   // per level
  std::vector<AnchorSet> anchor_sets;        // aligned levels only (gaoq)
  std::vector<TreeNode> nodes;               // nodes[0] is the root
  std::vector<double> rq_centroids;          // rq only: concatenated levels
  std::vector<std::size_t> rq_level_offsets; // rq only
  /// Exact-duplicate embedding groups detected during coding (item ids).
  std::vector<std::vector<std::int32_t>> duplicate_groups;
};

struct SidTable {
  std::size_t levels = 0;
  std::vector<std::int32_t> codes;       // items x levels, row-major
  std::vector<std::size_t> alphabet;     // per-level alphabet sizes
  std::vector<std::string> item_tokens;  // row -> item token

  std::size_t item_count() const {
    return levels == 0 ? 0 : codes.size() / levels;
  }
  std::span<const std::int32_t> sid(std::size_t item) const {
    return {codes.data() + item * levels, levels};
  }
};

struct QuantizeResult {
  CodeBook codebook;
  SidTable sids;
};

QuantizeResult quantize(const EmbeddingMatrix& embeddings,
                        const QuantizerConfig& config);
QuantizeResult quantize_gaoq(const EmbeddingMatrix& embeddings,
                             QuantizerConfig config);
QuantizeResult quantize_hkmeans_local(const EmbeddingMatrix& embeddings,
                                      QuantizerConfig config);
QuantizeResult quantize_rq_kmeans(const EmbeddingMatrix& embeddings,
                                  QuantizerConfig config);

/// RQ reconstruction error: sum over items of ||z - sum_l centroid_l||^2.
/// Only meaningful for rq_kmeans codebooks.
double rq_reconstruction_error(const EmbeddingMatrix& embeddings,
                               const CodeBook& codebook,
                               const SidTable& sids);

/// TSV: item token, comma-separated codes. Header line carries alphabets.
void write_sid_table(const SidTable& sids, const std::string& path);
SidTable read_sid_table(const std::string& path);

void write_codebook(const CodeBook& codebook, const std::string& path);

}  // namespace rsid::gaoq
