#include "rsid/gaoq.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace rsid::gaoq {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sq_dist(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t d = 0; d < dim; ++d) {
    const double diff = a[d] - b[d];
    s += diff * diff;
  }
  return s;
}

double dot(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t d = 0; d < dim; ++d) s += a[d] * b[d];
  return s;
}

double norm(const double* a, std::size_t dim) {
  return std::sqrt(dot(a, a, dim));
}

/// cos with either argument zero-norm defined as 0.
double safe_cosine(const double* a, const double* b, std::size_t dim) {
  const double na = norm(a, dim);
  const double nb = norm(b, dim);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b, dim) / (na * nb);
}

std::vector<double> kmeanspp_init(std::span<const double> points,
                                  std::size_t n, std::size_t dim,
                                  std::size_t k, Rng& rng) {
  std::vector<double> centers(k * dim);
  std::vector<double> d2(n, kInf);
  std::vector<bool> taken(n, false);

  std::size_t first = rng.next_index(n);
  std::copy_n(points.data() + first * dim, dim, centers.begin());
  taken[first] = true;

  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d =
          sq_dist(points.data() + i * dim, centers.data() + (c - 1) * dim, dim);
      if (d < d2[i]) d2[i] = d;
      total += d2[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      double threshold = rng.next_double() * total;
      for (std::size_t i = 0; i < n; ++i) {
        threshold -= d2[i];
        if (threshold <= 0.0) {
          pick = i;
          break;
        }
      }
      if (pick == n) {
        for (std::size_t i = n; i-- > 0;) {
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    }
    if (pick == n) {
      // All remaining mass is on duplicates of chosen centers; take the
      // first point not yet used so k distinct slots still fill.
      for (std::size_t i = 0; i < n; ++i) {
        if (!taken[i]) {
          pick = i;
          break;
        }
      }
      if (pick == n) pick = 0;
    }
    std::copy_n(points.data() + pick * dim, dim, centers.begin() + c * dim);
    taken[pick] = true;
  }
  return centers;
}

/// Greedy capacity-constrained assignment: points ranked by how much they
/// lose if denied their nearest centroid (second-best minus best distance,
/// largest first), each taking the nearest cluster with remaining capacity.
std::vector<std::int32_t> greedy_balanced_assign(
    std::span<const double> points, std::size_t n, std::size_t dim,
    const std::vector<double>& centroids, std::size_t k) {
  const std::size_t lo = n / k;
  const std::size_t extras = n % k;

  std::vector<double> dist(n * k);
  std::vector<double> priority(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = kInf, second = kInf;
    for (std::size_t c = 0; c < k; ++c) {
      const double d =
          sq_dist(points.data() + i * dim, centroids.data() + c * dim, dim);
      dist[i * k + c] = d;
      if (d < best) {
        second = best;
        best = d;
      } else if (d < second) {
        second = d;
      }
    }
    priority[i] = (k == 1) ? 0.0 : second - best;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (priority[a] != priority[b]) return priority[a] > priority[b];
    return a < b;
  });

  std::vector<std::int32_t> assign(n, -1);
  std::vector<std::size_t> counts(k, 0);
  std::size_t extras_used = 0;
  for (const std::size_t i : order) {
    double best = kInf;
    std::size_t best_c = k;
    for (std::size_t c = 0; c < k; ++c) {
      const bool admissible =
          counts[c] < lo || (counts[c] == lo && extras_used < extras);
      if (!admissible) continue;
      const double d = dist[i * k + c];
      if (d < best) {
        best = d;
        best_c = c;
      }
    }
    assign[i] = static_cast<std::int32_t>(best_c);
    if (++counts[best_c] > lo) ++extras_used;
  }
  return assign;
}

void recompute_means(std::span<const double> points, std::size_t n,
                     std::size_t dim, const std::vector<std::int32_t>& assign,
                     std::size_t k, std::vector<double>& centroids,
                     std::vector<std::size_t>& sizes) {
  centroids.assign(k * dim, 0.0);
  sizes.assign(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = static_cast<std::size_t>(assign[i]);
    ++sizes[c];
    const double* p = points.data() + i * dim;
    double* mu = centroids.data() + c * dim;
    for (std::size_t d = 0; d < dim; ++d) mu[d] += p[d];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (sizes[c] == 0) continue;
    double* mu = centroids.data() + c * dim;
    for (std::size_t d = 0; d < dim; ++d) mu[d] /= static_cast<double>(sizes[c]);
  }
}

/// One sweep of local moves against fixed centroids: swaps of any two
/// points in different clusters, plus single moves from a large cluster to
/// a small one (which keep sizes within one of each other). Returns whether
/// anything was applied.
bool improvement_sweep(std::span<const double> points, std::size_t n,
                       std::size_t dim, std::vector<std::int32_t>& assign,
                       const std::vector<double>& centroids, std::size_t k,
                       std::vector<std::size_t>& sizes) {
  const std::size_t lo = n / k;
  std::vector<double> dist(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c)
      dist[i * k + c] =
          sq_dist(points.data() + i * dim, centroids.data() + c * dim, dim);

  bool changed = false;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = static_cast<std::size_t>(assign[i]);
    // Balance-preserving move.
    if (sizes[a] > lo) {
      double best_gain = -1e-12;
      std::size_t best_c = k;
      for (std::size_t c = 0; c < k; ++c) {
        if (c == a || sizes[c] >= lo + (n % k ? 1u : 0u)) continue;
        if (sizes[c] >= sizes[a]) continue;
        const double gain = dist[i * k + a] - dist[i * k + c];
        if (gain > best_gain + 1e-12) {
          best_gain = gain;
          best_c = c;
        }
      }
      if (best_c < k && best_gain > 1e-12) {
        --sizes[a];
        ++sizes[best_c];
        assign[i] = static_cast<std::int32_t>(best_c);
        changed = true;
        continue;
      }
    }
    // Swaps with later points.
    for (std::size_t j = i + 1; j < n; ++j) {
      const std::size_t ca = static_cast<std::size_t>(assign[i]);
      const std::size_t cb = static_cast<std::size_t>(assign[j]);
      if (ca == cb) continue;
      const double before = dist[i * k + ca] + dist[j * k + cb];
      const double after = dist[i * k + cb] + dist[j * k + ca];
      if (after + 1e-12 * (1.0 + before) < before) {
        std::swap(assign[i], assign[j]);
        changed = true;
      }
    }
  }
  return changed;
}

}  // namespace

BalancedKMeansResult balanced_kmeans(std::span<const double> points,
                                     std::size_t n, std::size_t dim,
                                     std::size_t clusters, std::size_t iters,
                                     Rng& rng) {
  if (clusters == 0) throw Error("balanced_kmeans: cluster count must be >= 1");
  if (n < clusters)
    throw Error("balanced_kmeans: " + std::to_string(n) + " points for " +
                std::to_string(clusters) + " clusters");
  if (iters == 0) throw Error("balanced_kmeans: iters must be >= 1");

  BalancedKMeansResult result;
  result.clusters = clusters;
  result.dim = dim;

  if (clusters == n) {
    result.assignment.resize(n);
    std::iota(result.assignment.begin(), result.assignment.end(), 0);
    result.centroids.assign(points.begin(), points.begin() + n * dim);
    result.sizes.assign(n, 1);
    return result;
  }

  // Lloyd phase with a few k-means++ restarts; the cheapest run is kept and
  // polished. Restarts sidestep the rare bad init basin (e.g. a diagonal
  // split of well-separated groups).
  constexpr std::size_t kRestarts = 3;
  std::vector<std::int32_t> assign;
  std::vector<double> centroids;
  std::vector<std::size_t> sizes;
  double best_cost = kInf;
  for (std::size_t restart = 0; restart < kRestarts; ++restart) {
    std::vector<double> c = kmeanspp_init(points, n, dim, clusters, rng);
    std::vector<std::int32_t> a =
        greedy_balanced_assign(points, n, dim, c, clusters);
    for (std::size_t it = 1; it < iters; ++it) {
      recompute_means(points, n, dim, a, clusters, c, sizes);
      auto next = greedy_balanced_assign(points, n, dim, c, clusters);
      if (next == a) break;
      a = std::move(next);
    }
    recompute_means(points, n, dim, a, clusters, c, sizes);
    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      cost += sq_dist(points.data() + i * dim,
                      c.data() + static_cast<std::size_t>(a[i]) * dim, dim);
    if (cost < best_cost) {
      best_cost = cost;
      assign = std::move(a);
      centroids = std::move(c);
    }
  }

  // Polish to a fixed point: no swap (or balance-preserving move) improves
  // the cost against centroids that are the member means.
  constexpr std::size_t kMaxPolishRounds = 200;
  for (std::size_t round = 0; round < kMaxPolishRounds; ++round) {
    recompute_means(points, n, dim, assign, clusters, centroids, sizes);
    if (!improvement_sweep(points, n, dim, assign, centroids, clusters, sizes))
      break;
  }
  recompute_means(points, n, dim, assign, clusters, centroids, sizes);

  result.assignment = std::move(assign);
  result.centroids = std::move(centroids);
  result.sizes = std::move(sizes);
  return result;
}

double partition_cost(std::span<const double> points, std::size_t n,
                      std::size_t dim, const BalancedKMeansResult& result) {
  double cost = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    cost += sq_dist(points.data() + i * dim,
                    result.centroids.data() +
                        static_cast<std::size_t>(result.assignment[i]) * dim,
                    dim);
  return cost;
}

namespace {

double max_abs_pairwise_cos(const std::vector<double>& rows, std::size_t g,
                            std::size_t dim) {
  double worst = 0.0;
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = i + 1; j < g; ++j)
      worst = std::max(worst, std::abs(safe_cosine(rows.data() + i * dim,
                                                   rows.data() + j * dim, dim)));
  return worst;
}

}  // namespace

AnchorSet ortho_anchors(std::size_t count, std::size_t dim, Rng& rng) {
  if (count == 0 || dim == 0)
    throw Error("ortho_anchors: count and dim must be >= 1");
  AnchorSet set;
  set.dim = dim;
  set.count = count;
  set.vectors.resize(count * dim);

  if (dim == 1) {
    for (std::size_t k = 0; k < count; ++k)
      set.vectors[k] = (k % 2 == 0) ? 1.0 : -1.0;
    set.max_abs_cos = count > 1 ? 1.0 : 0.0;
    return set;
  }

  if (count <= dim) {
    // Q factor of a random Gaussian dim x count matrix via modified
    // Gram-Schmidt, run twice for orthogonality near machine precision.
    for (std::size_t k = 0; k < count; ++k) {
      double* row = set.vectors.data() + k * dim;
      while (true) {
        for (std::size_t d = 0; d < dim; ++d) row[d] = rng.next_gaussian();
        for (int pass = 0; pass < 2; ++pass) {
          for (std::size_t j = 0; j < k; ++j) {
            const double* prev = set.vectors.data() + j * dim;
            const double proj = dot(row, prev, dim);
            for (std::size_t d = 0; d < dim; ++d) row[d] -= proj * prev[d];
          }
        }
        const double len = norm(row, dim);
        if (len > 1e-9) {
          for (std::size_t d = 0; d < dim; ++d) row[d] /= len;
          break;
        }
      }
    }
    set.max_abs_cos = max_abs_pairwise_cos(set.vectors, count, dim);
    return set;
  }

  // Overcomplete case: spread unit vectors by repulsion along every pair,
  // descending the p-frame potential sum |cos|^(2p) with p ramped 1 -> 4 so
  // the late phases approximate the max pairwise |cos| directly.
  for (std::size_t k = 0; k < count; ++k) {
    double* row = set.vectors.data() + k * dim;
    double len = 0.0;
    while (len < 1e-9) {
      for (std::size_t d = 0; d < dim; ++d) row[d] = rng.next_gaussian();
      len = norm(row, dim);
    }
    for (std::size_t d = 0; d < dim; ++d) row[d] /= len;
  }

  std::vector<double> best = set.vectors;
  double best_cos = max_abs_pairwise_cos(set.vectors, count, dim);
  const std::size_t sweeps_per_phase = std::clamp<std::size_t>(
      count > 0 ? 400000 / (count * count) : 4000, 300, 4000);
  std::vector<double> grad(count * dim);
  for (const int p : {1, 2, 4}) {
    double step = 0.3;
    std::size_t stale = 0;
    for (std::size_t sweep = 0; sweep < sweeps_per_phase; ++sweep) {
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t j = i + 1; j < count; ++j) {
          const double* vi = set.vectors.data() + i * dim;
          const double* vj = set.vectors.data() + j * dim;
          const double c = dot(vi, vj, dim);
          double w = c;
          for (int q = 1; q < 2 * p - 1; ++q) w *= c;  // c^(2p-1)
          for (std::size_t d = 0; d < dim; ++d) {
            grad[i * dim + d] += w * vj[d];
            grad[j * dim + d] += w * vi[d];
          }
        }
      }
      for (std::size_t i = 0; i < count; ++i) {
        double* vi = set.vectors.data() + i * dim;
        for (std::size_t d = 0; d < dim; ++d) vi[d] -= step * grad[i * dim + d];
        const double len = norm(vi, dim);
        if (len > 0)
          for (std::size_t d = 0; d < dim; ++d) vi[d] /= len;
      }
      const double current = max_abs_pairwise_cos(set.vectors, count, dim);
      if (current < best_cos - 1e-6) {
        best_cos = current;
        best = set.vectors;
        stale = 0;
      } else {
        if (current < best_cos) {
          best_cos = current;
          best = set.vectors;
        }
        if (++stale >= 300) break;  // improvement below 1e-6
      }
      step *= 0.9995;
    }
  }
  set.vectors = std::move(best);
  set.max_abs_cos = best_cos;
  return set;
}

std::vector<std::size_t> hungarian(std::span<const double> matrix,
                                   std::size_t rows, std::size_t cols,
                                   bool maximize) {
  if (rows == 0 || cols == 0) throw Error("hungarian: empty matrix");
  if (rows > cols)
    throw Error("hungarian: rows (" + std::to_string(rows) +
                ") exceed columns (" + std::to_string(cols) + ")");
  for (const double v : matrix)
    if (!std::isfinite(v)) throw Error("hungarian: non-finite entry");

  // Jonker-Volgenant style shortest augmenting paths; minimizes, so flip
  // the sign for similarity matrices.
  auto cost = [&](std::size_t r, std::size_t c) {
    const double v = matrix[r * cols + c];
    return maximize ? -v : v;
  };

  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> p(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, kInf);
    std::vector<bool> used(cols + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> result(rows, cols);
  for (std::size_t j = 1; j <= cols; ++j)
    if (p[j] != 0) result[p[j] - 1] = j - 1;
  return result;
}

LevelAssignment gaoq_level(std::span<const double> points, std::size_t n,
                           std::size_t dim,
                           std::span<const double> parent_centroid,
                           std::size_t branching, std::size_t iters,
                           const AnchorSet& anchors, Rng& rng) {
  if (n == 0) throw Error("gaoq_level: empty parent");
  const std::size_t b = std::min(branching, n);
  if (b > anchors.count)
    throw Error("gaoq_level: branching exceeds anchor count");

  LevelAssignment out;
  out.dim = dim;
  out.children = b;
  if (b == n) {
    out.child_of_point.resize(n);
    std::iota(out.child_of_point.begin(), out.child_of_point.end(), 0);
    out.child_centroids.assign(points.begin(), points.begin() + n * dim);
  } else {
    auto km = balanced_kmeans(points, n, dim, b, iters, rng);
    out.child_of_point = std::move(km.assignment);
    out.child_centroids = std::move(km.centroids);
  }

  std::vector<double> similarity(b * anchors.count);
  std::size_t zero_residuals = 0;
  std::vector<double> residual(dim);
  for (std::size_t j = 0; j < b; ++j) {
    for (std::size_t d = 0; d < dim; ++d)
      residual[d] = out.child_centroids[j * dim + d] - parent_centroid[d];
    if (norm(residual.data(), dim) == 0.0) ++zero_residuals;
    for (std::size_t k = 0; k < anchors.count; ++k)
      similarity[j * anchors.count + k] =
          safe_cosine(residual.data(), anchors.anchor(k).data(), dim);
  }
  if (zero_residuals > 0)
    std::cerr << "[rsid] warning: " << zero_residuals
              << " zero-norm residual(s) at level " << anchors.level
              << "; matched on all-zero similarity rows\n";

  const auto match = hungarian(similarity, b, anchors.count, /*maximize=*/true);
  out.anchor_of_child.resize(b);
  for (std::size_t j = 0; j < b; ++j)
    out.anchor_of_child[j] = static_cast<std::int32_t>(match[j]);
  return out;
}

void QuantizerConfig::validate() const {
  for (const std::size_t b : branching)
    if (b < 2) throw Error("branching factors must be >= 2");
  if (!anchors.empty()) {
    if (anchors.size() != branching.size() - (branching.empty() ? 0 : 1))
      throw Error("anchor counts must cover levels 2..L-1 (one per aligned "
                  "prefix level)");
    for (std::size_t i = 0; i < anchors.size(); ++i)
      if (anchors[i] < branching[i + 1])
        throw Error("anchor count must be >= branching at the same level");
  }
  if (kmeans_iters == 0) throw Error("kmeans_iters must be >= 1");
}

std::vector<std::size_t> default_branching(std::size_t item_count) {
  if (item_count < 8) {
    return {std::max<std::size_t>(2, std::min<std::size_t>(item_count, 2))};
  }
  const double target = static_cast<double>(item_count) / 15.0;
  std::size_t b = static_cast<std::size_t>(std::llround(std::sqrt(target)));
  b = std::max<std::size_t>(2, b);
  if (b * b > item_count) b = std::max<std::size_t>(2, item_count / 2);
  if (b * b > item_count) return {std::max<std::size_t>(2, b)};
  return {b, b};
}

namespace {

struct Tree {
  std::vector<TreeNode> nodes;            // nodes[0] = root
  std::vector<std::vector<std::size_t>> level_nodes;  // per level (0..L)
};

std::vector<double> to_double(const EmbeddingMatrix& m) {
  std::vector<double> out(m.values.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<double>(m.values[i]);
  return out;
}

std::vector<double> gather(const std::vector<double>& data, std::size_t dim,
                           const std::vector<std::int32_t>& ids) {
  std::vector<double> out(ids.size() * dim);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(data.data() + static_cast<std::size_t>(ids[i]) * dim, dim,
                out.data() + i * dim);
  return out;
}

/// Shared partition pipeline for GAOQ and locally-indexed HKMeans: a
/// balanced tree whose last level splits every prefix into singletons.
/// Per-parent RNG streams are derived from (seed, level, parent ordinal) so
/// results do not depend on scheduling.
Tree build_balanced_tree(const std::vector<double>& data, std::size_t n,
                         std::size_t dim, const QuantizerConfig& config) {
  const std::size_t prefix_levels = config.branching.size();
  Tree tree;
  tree.level_nodes.resize(prefix_levels + 2);

  TreeNode root;
  root.level = 0;
  root.parent = -1;
  root.centroid.assign(dim, 0.0);
  root.members.resize(n);
  std::iota(root.members.begin(), root.members.end(), 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d)
      root.centroid[d] += data[i * dim + d] / static_cast<double>(n);
  tree.nodes.push_back(std::move(root));
  tree.level_nodes[0].push_back(0);

  for (std::size_t level = 1; level <= prefix_levels; ++level) {
    const std::size_t b = config.branching[level - 1];
    const auto& parents = tree.level_nodes[level - 1];
    std::vector<std::vector<TreeNode>> partial(parents.size());

    parallel_for(parents.size(), config.threads, [&](std::size_t lo,
                                                     std::size_t hi) {
      for (std::size_t pi = lo; pi < hi; ++pi) {
        const TreeNode& parent = tree.nodes[parents[pi]];
        const auto& members = parent.members;
        const std::size_t b_eff = std::min(b, members.size());
        const auto pts = gather(data, dim, members);
        Rng rng(derive_seed(config.seed, level, pi));

        std::vector<std::int32_t> assign;
        std::vector<double> centroids;
        if (b_eff == members.size()) {
          assign.resize(members.size());
          std::iota(assign.begin(), assign.end(), 0);
          centroids = pts;
        } else {
          auto km = balanced_kmeans(pts, members.size(), dim, b_eff,
                                    config.kmeans_iters, rng);
          assign = std::move(km.assignment);
          centroids = std::move(km.centroids);
        }
        std::vector<TreeNode> children(b_eff);
        for (std::size_t c = 0; c < b_eff; ++c) {
          children[c].level = level;
          children[c].centroid.assign(centroids.begin() + c * dim,
                                      centroids.begin() + (c + 1) * dim);
        }
        for (std::size_t i = 0; i < members.size(); ++i)
          children[static_cast<std::size_t>(assign[i])].members.push_back(
              members[i]);
        partial[pi] = std::move(children);
      }
    });

    for (std::size_t pi = 0; pi < parents.size(); ++pi) {
      for (auto& child : partial[pi]) {
        child.parent = static_cast<std::ptrdiff_t>(parents[pi]);
        tree.level_nodes[level].push_back(tree.nodes.size());
        tree.nodes.push_back(std::move(child));
      }
    }
  }

  // Final level: one singleton child per member item, in item order.
  const std::size_t last = prefix_levels + 1;
  for (const std::size_t pid : tree.level_nodes[prefix_levels]) {
    const auto members = tree.nodes[pid].members;  // copy: nodes will grow
    for (const std::int32_t item : members) {
      TreeNode leaf;
      leaf.level = last;
      leaf.parent = static_cast<std::ptrdiff_t>(pid);
      leaf.members = {item};
      leaf.centroid.assign(
          data.begin() + static_cast<std::size_t>(item) * dim,
          data.begin() + static_cast<std::size_t>(item) * dim + dim);
      tree.level_nodes[last].push_back(tree.nodes.size());
      tree.nodes.push_back(std::move(leaf));
    }
  }
  return tree;
}

/// Group children of one parent whose centroids are exactly equal.
std::vector<std::vector<std::size_t>> duplicate_children(
    const std::vector<TreeNode>& nodes, const std::vector<std::size_t>& kids,
    std::size_t dim) {
  std::map<std::vector<double>, std::vector<std::size_t>> by_centroid;
  for (const std::size_t id : kids)
    by_centroid[nodes[id].centroid].push_back(id);
  std::vector<std::vector<std::size_t>> groups;
  for (auto& [_, ids] : by_centroid)
    if (ids.size() > 1) groups.push_back(std::move(ids));
  (void)dim;
  return groups;
}

void assemble_sids(const EmbeddingMatrix& embeddings, CodeBook& book,
                   SidTable& sids) {
  const std::size_t n = embeddings.rows;
  sids.levels = book.levels;
  sids.alphabet = book.level_alphabet;
  sids.codes.assign(n * book.levels, -1);
  sids.item_tokens = embeddings.row_tokens;
  if (sids.item_tokens.empty()) {
    sids.item_tokens.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      sids.item_tokens[i] = "row" + std::to_string(i);
  }
  for (const TreeNode& node : book.nodes) {
    if (node.level == 0) continue;
    for (const std::int32_t item : node.members)
      sids.codes[static_cast<std::size_t>(item) * book.levels +
                 (node.level - 1)] = node.code;
  }
}

QuantizeResult quantize_tree(const EmbeddingMatrix& embeddings,
                             QuantizerConfig config, bool aligned) {
  config.validate();
  const std::size_t n = embeddings.rows;
  const std::size_t dim = embeddings.dim;
  if (n == 0) throw Error("quantize: empty embedding matrix");
  if (config.branching.empty()) config.branching = default_branching(n);
  std::size_t capacity = 1;
  for (const std::size_t b : config.branching) {
    if (capacity > n / b) {
      capacity = n + 1;
      break;
    }
    capacity *= b;
  }
  if (n < capacity)
    throw Error("quantize: N=" + std::to_string(n) +
                " is below the prefix capacity of the branching factors");

  const auto data = to_double(embeddings);
  Tree tree = build_balanced_tree(data, n, dim, config);
  const std::size_t levels = config.branching.size() + 1;

  CodeBook book;
  book.method = aligned ? Method::gaoq : Method::hkmeans_local;
  book.levels = levels;
  book.dim = dim;
  book.config = config;
  book.level_alphabet.resize(levels);
  book.level_alphabet[0] = config.branching[0];

  // Level-1 codes are the cluster indices themselves: clustering in the
  // original space is already globally defined.
  {
    const auto& kids = tree.level_nodes[1];
    for (std::size_t c = 0; c < kids.size(); ++c)
      tree.nodes[kids[c]].code = static_cast<std::int32_t>(c);
  }

  std::size_t max_leaf_fanout = 1;
  for (const std::size_t pid : tree.level_nodes[levels - 1])
    max_leaf_fanout = std::max(max_leaf_fanout, tree.nodes[pid].members.size());

  for (std::size_t level = 2; level <= levels; ++level) {
    const bool final_level = (level == levels);
    const std::size_t b = final_level ? max_leaf_fanout
                                      : config.branching[level - 1];
    const std::size_t g =
        final_level ? max_leaf_fanout
                    : (config.anchors.empty() ? b : config.anchors[level - 2]);
    book.level_alphabet[level - 1] = aligned ? g : b;

    AnchorSet anchors;
    if (aligned) {
      Rng anchor_rng(derive_seed(config.seed, 0xA17C0211ull, level));
      anchors = ortho_anchors(g, dim, anchor_rng);
      anchors.level = level;
    }

    const auto& parents = tree.level_nodes[level - 1];
    std::vector<std::vector<std::pair<std::size_t, std::int32_t>>> coded(
        parents.size());
    std::atomic<std::size_t> zero_residuals{0};

    parallel_for(parents.size(), config.threads, [&](std::size_t lo,
                                                     std::size_t hi) {
      for (std::size_t pi = lo; pi < hi; ++pi) {
        const std::size_t pid = parents[pi];
        std::vector<std::size_t> kids;
        for (const std::size_t cid : tree.level_nodes[level])
          if (tree.nodes[cid].parent == static_cast<std::ptrdiff_t>(pid))
            kids.push_back(cid);
        auto& out = coded[pi];
        out.reserve(kids.size());
        if (!aligned) {
          for (std::size_t c = 0; c < kids.size(); ++c)
            out.emplace_back(kids[c], static_cast<std::int32_t>(c));
          continue;
        }
        // Residualize against the parent and match to the shared anchors.
        std::vector<double> similarity(kids.size() * g);
        std::vector<double> residual(dim);
        const auto& mu = tree.nodes[pid].centroid;
        for (std::size_t c = 0; c < kids.size(); ++c) {
          const auto& child_mu = tree.nodes[kids[c]].centroid;
          for (std::size_t d = 0; d < dim; ++d)
            residual[d] = child_mu[d] - mu[d];
          if (norm(residual.data(), dim) == 0.0) ++zero_residuals;
          for (std::size_t k = 0; k < g; ++k)
            similarity[c * g + k] =
                safe_cosine(residual.data(), anchors.anchor(k).data(), dim);
        }
        const auto match =
            hungarian(similarity, kids.size(), g, /*maximize=*/true);
        for (std::size_t c = 0; c < kids.size(); ++c)
          out.emplace_back(kids[c], static_cast<std::int32_t>(match[c]));
      }
    });

    if (zero_residuals.load() > 0)
      std::cerr << "[rsid] warning: " << zero_residuals.load()
                << " zero-norm residual(s) at level " << level
                << "; matched on all-zero similarity rows\n";

    for (std::size_t pi = 0; pi < parents.size(); ++pi) {
      for (const auto& [cid, code] : coded[pi]) tree.nodes[cid].code = code;

      // Exact-duplicate children: pin anchor order to item-ID order so ties
      // resolve the same way on every run.
      std::vector<std::size_t> kid_ids;
      for (const auto& [cid, _] : coded[pi]) kid_ids.push_back(cid);
      for (const auto& group :
           duplicate_children(tree.nodes, kid_ids, dim)) {
        std::vector<std::size_t> sorted_by_item = group;
        std::sort(sorted_by_item.begin(), sorted_by_item.end(),
                  [&](std::size_t a, std::size_t b2) {
                    return tree.nodes[a].members.front() <
                           tree.nodes[b2].members.front();
                  });
        std::vector<std::int32_t> codes;
        for (const std::size_t id : group) codes.push_back(tree.nodes[id].code);
        std::sort(codes.begin(), codes.end());
        std::vector<std::int32_t> items;
        for (std::size_t k = 0; k < group.size(); ++k) {
          tree.nodes[sorted_by_item[k]].code = codes[k];
          items.push_back(tree.nodes[sorted_by_item[k]].members.front());
        }
        if (final_level) book.duplicate_groups.push_back(std::move(items));
      }
    }
    if (aligned) book.anchor_sets.push_back(std::move(anchors));
  }

  if (!book.duplicate_groups.empty())
    std::cerr << "[rsid] warning: " << book.duplicate_groups.size()
              << " exact-duplicate embedding group(s); codes assigned in "
                 "item-ID order\n";

  book.nodes = std::move(tree.nodes);
  QuantizeResult result;
  result.codebook = std::move(book);
  assemble_sids(embeddings, result.codebook, result.sids);
  return result;
}

}  // namespace

QuantizeResult quantize_gaoq(const EmbeddingMatrix& embeddings,
                             QuantizerConfig config) {
  config.method = Method::gaoq;
  return quantize_tree(embeddings, std::move(config), /*aligned=*/true);
}

QuantizeResult quantize_hkmeans_local(const EmbeddingMatrix& embeddings,
                                      QuantizerConfig config) {
  config.method = Method::hkmeans_local;
  return quantize_tree(embeddings, std::move(config), /*aligned=*/false);
}

QuantizeResult quantize_rq_kmeans(const EmbeddingMatrix& embeddings,
                                  QuantizerConfig config) {
  config.method = Method::rq_kmeans;
  config.validate();
  const std::size_t n = embeddings.rows;
  const std::size_t dim = embeddings.dim;
  if (n == 0) throw Error("quantize: empty embedding matrix");
  if (config.branching.empty()) config.branching = default_branching(n);
  for (const std::size_t b : config.branching)
    if (b > n) throw Error("quantize: branching exceeds N");

  const std::size_t stages = config.branching.size();
  const std::size_t levels = stages + 1;

  CodeBook book;
  book.method = Method::rq_kmeans;
  book.levels = levels;
  book.dim = dim;
  book.config = config;
  book.level_alphabet.resize(levels);

  std::vector<double> residuals = to_double(embeddings);
  std::vector<std::int32_t> codes(n * levels, 0);

  for (std::size_t stage = 0; stage < stages; ++stage) {
    const std::size_t k = config.branching[stage];
    Rng rng(derive_seed(config.seed, stage + 1, 0x52514bull));
    std::vector<double> centroids =
        kmeanspp_init(residuals, n, dim, k, rng);
    std::vector<std::int32_t> assign(n, 0);

    for (std::size_t it = 0; it < config.kmeans_iters; ++it) {
      bool moved = false;
      for (std::size_t i = 0; i < n; ++i) {
        double best = kInf;
        std::int32_t best_c = 0;
        for (std::size_t c = 0; c < k; ++c) {
          const double d = sq_dist(residuals.data() + i * dim,
                                   centroids.data() + c * dim, dim);
          if (d < best) {
            best = d;
            best_c = static_cast<std::int32_t>(c);
          }
        }
        if (assign[i] != best_c) moved = true;
        assign[i] = best_c;
      }
      std::vector<std::size_t> sizes;
      recompute_means(residuals, n, dim, assign, k, centroids, sizes);
      // Reseed empty clusters to the current farthest point.
      for (std::size_t c = 0; c < k; ++c) {
        if (sizes[c] != 0) continue;
        double far = -1.0;
        std::size_t far_i = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = sq_dist(
              residuals.data() + i * dim,
              centroids.data() + static_cast<std::size_t>(assign[i]) * dim,
              dim);
          if (d > far) {
            far = d;
            far_i = i;
          }
        }
        std::copy_n(residuals.data() + far_i * dim, dim,
                    centroids.begin() + c * dim);
        sizes[c] = 1;
        moved = true;
      }
      if (!moved) break;
    }

    for (std::size_t i = 0; i < n; ++i) {
      codes[i * levels + stage] = assign[i];
      const double* mu =
          centroids.data() + static_cast<std::size_t>(assign[i]) * dim;
      for (std::size_t d = 0; d < dim; ++d) residuals[i * dim + d] -= mu[d];
    }
    book.rq_level_offsets.push_back(book.rq_centroids.size());
    book.rq_centroids.insert(book.rq_centroids.end(), centroids.begin(),
                             centroids.end());
    book.level_alphabet[stage] = k;
  }

  // Duplicate-prefix counter level, in item-ID order.
  std::map<std::vector<std::int32_t>, std::vector<std::size_t>> by_prefix;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::int32_t> prefix(codes.begin() + i * levels,
                                     codes.begin() + i * levels + stages);
    by_prefix[std::move(prefix)].push_back(i);
  }
  std::size_t max_group = 1;
  for (auto& [_, items] : by_prefix) {
    max_group = std::max(max_group, items.size());
    for (std::size_t k = 0; k < items.size(); ++k)
      codes[items[k] * levels + stages] = static_cast<std::int32_t>(k);
    if (items.size() > 1) {
      std::vector<std::int32_t> group(items.begin(), items.end());
      book.duplicate_groups.push_back(std::move(group));
    }
  }
  book.level_alphabet[stages] = max_group;

  QuantizeResult result;
  result.codebook = std::move(book);
  result.sids.levels = levels;
  result.sids.alphabet = result.codebook.level_alphabet;
  result.sids.codes = std::move(codes);
  result.sids.item_tokens = embeddings.row_tokens;
  if (result.sids.item_tokens.empty()) {
    result.sids.item_tokens.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      result.sids.item_tokens[i] = "row" + std::to_string(i);
  }
  return result;
}

QuantizeResult quantize(const EmbeddingMatrix& embeddings,
                        const QuantizerConfig& config) {
  switch (config.method) {
    case Method::gaoq:
      return quantize_gaoq(embeddings, config);
    case Method::hkmeans_local:
      return quantize_hkmeans_local(embeddings, config);
    case Method::rq_kmeans:
      return quantize_rq_kmeans(embeddings, config);
  }
  throw Error("quantize: unknown method");
}

double rq_reconstruction_error(const EmbeddingMatrix& embeddings,
                               const CodeBook& codebook,
                               const SidTable& sids) {
  if (codebook.method != Method::rq_kmeans)
    throw Error("rq_reconstruction_error: codebook is not rq-kmeans");
  const std::size_t dim = codebook.dim;
  const std::size_t stages = codebook.rq_level_offsets.size();
  double total = 0.0;
  std::vector<double> recon(dim);
  for (std::size_t i = 0; i < embeddings.rows; ++i) {
    std::fill(recon.begin(), recon.end(), 0.0);
    for (std::size_t l = 0; l < stages; ++l) {
      const double* mu =
          codebook.rq_centroids.data() + codebook.rq_level_offsets[l] +
          static_cast<std::size_t>(sids.sid(i)[l]) * dim;
      for (std::size_t d = 0; d < dim; ++d) recon[d] += mu[d];
    }
    const auto row = embeddings.row(i);
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = static_cast<double>(row[d]) - recon[d];
      total += diff * diff;
    }
  }
  return total;
}

Method method_from_string(const std::string& name) {
  if (name == "gaoq") return Method::gaoq;
  if (name == "hkmeans" || name == "hkmeans-local") return Method::hkmeans_local;
  if (name == "rqkmeans" || name == "rq-kmeans") return Method::rq_kmeans;
  throw Error("unknown quantizer method: " + name);
}

std::string method_name(Method m) {
  switch (m) {
    case Method::gaoq: return "gaoq";
    case Method::hkmeans_local: return "hkmeans";
    case Method::rq_kmeans: return "rqkmeans";
  }
  return "?";
}

void write_sid_table(const SidTable& sids, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path);
  const std::size_t n = sids.item_count();
  for (std::size_t i = 0; i < n; ++i) {
    out << sids.item_tokens[i] << '\t';
    const auto code = sids.sid(i);
    for (std::size_t l = 0; l < sids.levels; ++l) {
      if (l) out << ',';
      out << code[l];
    }
    out << '\n';
  }
  if (!out) throw Error("write failed: " + path);
}

SidTable read_sid_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open: " + path);
  SidTable sids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw Error(path + ": line " + std::to_string(line_no) +
                  " is missing the token<TAB>codes separator");
    sids.item_tokens.push_back(line.substr(0, tab));
    std::vector<std::int32_t> code;
    std::stringstream ss(line.substr(tab + 1));
    std::string part;
    while (std::getline(ss, part, ',')) {
      try {
        std::size_t used = 0;
        const long v = std::stol(part, &used);
        if (used != part.size() || v < 0) throw Error("");
        code.push_back(static_cast<std::int32_t>(v));
      } catch (const std::exception&) {
        throw Error(path + ": line " + std::to_string(line_no) +
                    ": bad code value '" + part + "'");
      }
    }
    if (sids.levels == 0) {
      sids.levels = code.size();
      sids.alphabet.assign(sids.levels, 0);
    } else if (code.size() != sids.levels) {
      throw Error(path + ": line " + std::to_string(line_no) +
                  " has a different code length");
    }
    for (std::size_t l = 0; l < sids.levels; ++l)
      sids.alphabet[l] = std::max(sids.alphabet[l],
                                  static_cast<std::size_t>(code[l]) + 1);
    sids.codes.insert(sids.codes.end(), code.begin(), code.end());
  }
  if (sids.levels == 0) throw Error(path + ": no SIDs");
  return sids;
}

void write_codebook(const CodeBook& book, const std::string& path) {
  nlohmann::json j;
  j["method"] = method_name(book.method);
  j["levels"] = book.levels;
  j["dim"] = book.dim;
  j["branching"] = book.config.branching;
  j["kmeans_iters"] = book.config.kmeans_iters;
  j["seed"] = book.config.seed;
  j["level_alphabet"] = book.level_alphabet;

  nlohmann::json anchors = nlohmann::json::array();
  for (const auto& set : book.anchor_sets) {
    nlohmann::json a;
    a["level"] = set.level;
    a["count"] = set.count;
    a["max_abs_cos"] = set.max_abs_cos;
    a["vectors"] = set.vectors;
    anchors.push_back(std::move(a));
  }
  j["anchor_sets"] = std::move(anchors);

  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& node : book.nodes) {
    nlohmann::json nj;
    nj["level"] = node.level;
    nj["parent"] = node.parent;
    nj["code"] = node.code;
    nj["centroid"] = node.centroid;
    nj["members"] = node.members;
    nodes.push_back(std::move(nj));
  }
  j["tree"] = std::move(nodes);

  if (!book.rq_centroids.empty()) {
    j["rq_centroids"] = book.rq_centroids;
    j["rq_level_offsets"] = book.rq_level_offsets;
  }
  j["duplicate_groups"] = book.duplicate_groups;

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw Error("write failed: " + path);
}

}  // namespace rsid::gaoq
