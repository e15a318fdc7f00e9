#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "rsid/gaoq.hpp"
#include "test_util.hpp"

using namespace rsid;
using namespace rsid::gaoq;

namespace {

// Brute-force oracle: best total over all injective row->column maps.
double brute_force_assignment(const std::vector<double>& m, std::size_t rows,
                              std::size_t cols, bool maximize) {
  std::vector<std::size_t> perm(cols);
  std::iota(perm.begin(), perm.end(), 0);
  double best = maximize ? -1e300 : 1e300;
  do {
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) total += m[r * cols + perm[r]];
    best = maximize ? std::max(best, total) : std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double assignment_total(const std::vector<double>& m, std::size_t rows,
                        std::size_t cols,
                        const std::vector<std::size_t>& assign) {
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) total += m[r * cols + assign[r]];
  return total;
}

}  // namespace

TEST_CASE("hungarian: identity similarity gives the identity assignment") {
  const std::vector<double> m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  const auto assign = hungarian(m, 3, 3, true);
  CHECK(assign == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("hungarian matches brute force on all small {0,1,2} matrices") {
  // Every 2x2 matrix (81) and a dense sweep of 3x3 matrices.
  for (int code = 0; code < 81; ++code) {
    std::vector<double> m(4);
    int c = code;
    for (auto& v : m) {
      v = c % 3;
      c /= 3;
    }
    for (const bool maximize : {false, true}) {
      const auto assign = hungarian(m, 2, 2, maximize);
      CHECK(assignment_total(m, 2, 2, assign) ==
            doctest::Approx(brute_force_assignment(m, 2, 2, maximize)));
    }
  }
  for (int code = 0; code < 19683; code += 7) {  // every 7th 3x3 matrix
    std::vector<double> m(9);
    int c = code;
    for (auto& v : m) {
      v = c % 3;
      c /= 3;
    }
    for (const bool maximize : {false, true}) {
      const auto assign = hungarian(m, 3, 3, maximize);
      CHECK(assignment_total(m, 3, 3, assign) ==
            doctest::Approx(brute_force_assignment(m, 3, 3, maximize)));
    }
  }
}

TEST_CASE("hungarian: rectangular case from hand enumeration") {
  // All 12 injective 2->4 maps enumerated by hand: best total is 0.9+0.7.
  const std::vector<double> m = {0.9, 0.1, 0.2, 0.3, 0.8, 0.7, 0.1, 0.2};
  const auto assign = hungarian(m, 2, 4, true);
  CHECK(assign == std::vector<std::size_t>{0, 1});
  CHECK(assignment_total(m, 2, 4, assign) == doctest::Approx(1.6));
  CHECK(brute_force_assignment(m, 2, 4, true) == doctest::Approx(1.6));
}

TEST_CASE("hungarian rejects bad input") {
  CHECK_THROWS_AS(hungarian(std::vector<double>{1, 2}, 2, 1, true), Error);
  const std::vector<double> nan_m = {1.0, std::nan("")};
  CHECK_THROWS_AS(hungarian(nan_m, 1, 2, true), Error);
}

TEST_CASE("balanced_kmeans: long thin rectangle splits along the long axis") {
  // 3 possible balanced 2-2 partitions; the oracle picks the cheapest.
  const std::vector<double> pts = {0, 0, 10, 0, 0, 1, 10, 1};
  Rng rng(7);
  const auto result = balanced_kmeans(pts, 4, 2, 2, 20, rng);
  CHECK(result.sizes == std::vector<std::size_t>{2, 2});
  CHECK(result.assignment[0] == result.assignment[2]);  // x = 0 pair
  CHECK(result.assignment[1] == result.assignment[3]);  // x = 10 pair
  CHECK(result.assignment[0] != result.assignment[1]);

  // Enumerated oracle: cost of {02|13} = 4 * 0.5^2 = 1, the other two
  // pairings cost 4 * 5^2 = 100 and 4 * (25 + 0.25) >= 100.
  CHECK(partition_cost(pts, 4, 2, result) == doctest::Approx(1.0));
}

TEST_CASE("balanced_kmeans: n=5 b=2 forces sizes {3,2}") {
  std::vector<double> pts;
  Rng data_rng(3);
  for (int i = 0; i < 10; ++i) pts.push_back(data_rng.next_gaussian());
  Rng rng(1);
  const auto result = balanced_kmeans(pts, 5, 2, 2, 20, rng);
  std::vector<std::size_t> sizes = result.sizes;
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<std::size_t>{2, 3});
}

TEST_CASE("balanced_kmeans: b = n puts every point in its own cluster") {
  std::vector<double> pts = {0, 0, 1, 1, 2, 2};
  Rng rng(1);
  const auto result = balanced_kmeans(pts, 3, 2, 3, 10, rng);
  CHECK(result.sizes == std::vector<std::size_t>{1, 1, 1});
  CHECK(partition_cost(pts, 3, 2, result) == doctest::Approx(0.0));
}

TEST_CASE("balanced_kmeans rejects n < b") {
  std::vector<double> pts = {0, 1};
  Rng rng(1);
  CHECK_THROWS_AS(balanced_kmeans(pts, 2, 1, 3, 10, rng), Error);
}

TEST_CASE("balanced_kmeans invariants on random instances") {
  Rng meta(99);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 10 + meta.next_index(50);
    const std::size_t dim = 1 + meta.next_index(4);
    const std::size_t b = 2 + meta.next_index(std::min<std::size_t>(n - 1, 6));
    std::vector<double> pts(n * dim);
    for (auto& p : pts) p = meta.next_gaussian();
    Rng rng(trial);
    const auto result = balanced_kmeans(pts, n, dim, b, 30, rng);

    // Balance.
    const auto [lo, hi] =
        std::minmax_element(result.sizes.begin(), result.sizes.end());
    CHECK(*hi - *lo <= 1);

    // Centroids are member means.
    std::vector<double> mean(b * dim, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < dim; ++d)
        mean[result.assignment[i] * dim + d] +=
            pts[i * dim + d] / static_cast<double>(
                                   result.sizes[result.assignment[i]]);
    for (std::size_t i = 0; i < b * dim; ++i)
      CHECK(mean[i] == doctest::Approx(result.centroids[i]).epsilon(1e-9));

    // Local optimality at the final centroids: no swap improves.
    auto d2 = [&](std::size_t i, std::size_t c) {
      double s = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = pts[i * dim + d] - result.centroids[c * dim + d];
        s += diff * diff;
      }
      return s;
    };
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const auto a = result.assignment[i];
        const auto c = result.assignment[j];
        if (a == c) continue;
        const double before = d2(i, a) + d2(j, c);
        const double after = d2(i, c) + d2(j, a);
        CHECK(after >= before - 1e-7 * (1.0 + before));
      }
    }
  }
}

TEST_CASE("ortho_anchors: QR branch is orthonormal") {
  Rng rng(11);
  const auto set = ortho_anchors(3, 3, rng);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < 3; ++d)
        dot += set.vectors[i * 3 + d] * set.vectors[j * 3 + d];
      CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-6);
    }
  }
  CHECK(set.max_abs_cos < 1e-6);
}

TEST_CASE("ortho_anchors: 1-D overcomplete pair is {+1, -1}") {
  Rng rng(5);
  const auto set = ortho_anchors(2, 1, rng);
  CHECK(set.vectors[0] == doctest::Approx(1.0));
  CHECK(set.vectors[1] == doctest::Approx(-1.0));
}

TEST_CASE("ortho_anchors: 3 vectors in the plane reach the 120-degree optimum") {
  Rng rng(17);
  const auto set = ortho_anchors(3, 2, rng);
  CHECK(set.max_abs_cos <= 0.5 + 1e-3);
  for (std::size_t k = 0; k < 3; ++k) {
    double norm = 0.0;
    for (std::size_t d = 0; d < 2; ++d)
      norm += set.vectors[k * 2 + d] * set.vectors[k * 2 + d];
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

namespace {

AnchorSet fixed_anchors(std::vector<std::vector<double>> rows) {
  AnchorSet set;
  set.count = rows.size();
  set.dim = rows[0].size();
  for (const auto& r : rows)
    set.vectors.insert(set.vectors.end(), r.begin(), r.end());
  return set;
}

}  // namespace

TEST_CASE("gaoq_level: single child takes the argmax anchor") {
  const auto anchors = fixed_anchors({{1, 0}, {0, 1}});
  const std::vector<double> pts = {3.0, 4.0};   // one point
  const std::vector<double> parent = {3.0, 0.0};
  Rng rng(1);
  const auto level = gaoq_level(pts, 1, 2, parent, 1, 10, anchors, rng);
  // Residual (0, 4) points at anchor 1.
  CHECK(level.anchor_of_child == std::vector<std::int32_t>{1});
}

TEST_CASE("gaoq_level: residuals equal to anchors give the identity pairing") {
  const auto anchors = fixed_anchors({{1, 0}, {0, 1}});
  const std::vector<double> parent = {5.0, 5.0};
  // Two tight clusters at parent + e1 and parent + e2.
  std::vector<double> pts;
  for (const double eps : {-0.01, 0.01}) {
    pts.push_back(6.0);
    pts.push_back(5.0 + eps);
  }
  for (const double eps : {-0.01, 0.01}) {
    pts.push_back(5.0 + eps);
    pts.push_back(6.0);
  }
  Rng rng(3);
  const auto level = gaoq_level(pts, 4, 2, parent, 2, 20, anchors, rng);
  // Child along e1 must take anchor 0, child along e2 anchor 1, whatever
  // cluster enumeration order came out of k-means.
  std::map<int, int> anchor_of_point;
  for (int i = 0; i < 4; ++i)
    anchor_of_point[i] = level.anchor_of_child[level.child_of_point[i]];
  CHECK(anchor_of_point[0] == 0);
  CHECK(anchor_of_point[1] == 0);
  CHECK(anchor_of_point[2] == 1);
  CHECK(anchor_of_point[3] == 1);
}

TEST_CASE("gaoq_level: congruent children under mirrored parents share indices") {
  // Two parents far apart, each with children at parent +/- v. The cosine
  // rows of the residuals are identical, so Hungarian must pick the same
  // anchor for the +v child of both parents, for any seed.
  Rng anchor_rng(23);
  const auto anchors = ortho_anchors(2, 4, anchor_rng);
  const std::vector<double> v = {1.0, 2.0, -0.5, 0.25};

  std::vector<std::vector<std::int32_t>> plus_anchor(2);
  for (int parent_id = 0; parent_id < 2; ++parent_id) {
    std::vector<double> mu(4, parent_id == 0 ? 0.0 : 100.0);
    std::vector<double> pts;
    for (const double sign : {+1.0, +1.0, -1.0, -1.0})
      for (std::size_t d = 0; d < 4; ++d)
        pts.push_back(mu[d] + sign * v[d]);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      const auto level = gaoq_level(pts, 4, 4, mu, 2, 20, anchors, rng);
      plus_anchor[parent_id].push_back(
          level.anchor_of_child[level.child_of_point[0]]);
    }
  }
  CHECK(plus_anchor[0] == plus_anchor[1]);
}

namespace {

/// 4 well-separated pairs in the plane; pair-mates nearly coincide.
EmbeddingMatrix pair_data() {
  EmbeddingMatrix m;
  m.rows = 8;
  m.dim = 2;
  const double centers[4][2] = {{0, 0}, {40, 0}, {0, 40}, {40, 40}};
  for (int p = 0; p < 4; ++p) {
    for (int s = 0; s < 2; ++s) {
      m.values.push_back(static_cast<float>(centers[p][0] + 0.1 * s));
      m.values.push_back(static_cast<float>(centers[p][1] - 0.1 * s));
    }
  }
  for (int i = 0; i < 8; ++i) m.row_tokens.push_back("i" + std::to_string(i));
  return m;
}

}  // namespace

TEST_CASE("quantize_gaoq: separated pairs share prefixes, all SIDs unique") {
  const auto data = pair_data();
  QuantizerConfig config;
  config.branching = {2, 2};
  config.seed = 5;
  const auto result = quantize_gaoq(data, config);
  REQUIRE(result.sids.levels == 3);
  REQUIRE(result.sids.item_count() == 8);

  std::set<std::vector<std::int32_t>> seen;
  for (std::size_t i = 0; i < 8; ++i) {
    const auto sid = result.sids.sid(i);
    seen.insert({sid.begin(), sid.end()});
  }
  CHECK(seen.size() == 8);

  // Pair-mates (2i, 2i+1) share the two prefix codes.
  for (std::size_t p = 0; p < 4; ++p) {
    CHECK(result.sids.sid(2 * p)[0] == result.sids.sid(2 * p + 1)[0]);
    CHECK(result.sids.sid(2 * p)[1] == result.sids.sid(2 * p + 1)[1]);
  }
}

TEST_CASE("quantize_gaoq: N = b_1 single prefix level") {
  auto data = testutil::random_embeddings(6, 3, 21);
  QuantizerConfig config;
  config.branching = {6};
  const auto result = quantize_gaoq(data, config);
  REQUIRE(result.sids.levels == 2);
  std::set<std::int32_t> first;
  for (std::size_t i = 0; i < 6; ++i) {
    first.insert(result.sids.sid(i)[0]);
    CHECK(result.sids.sid(i)[1] == 0);  // singleton prefixes
  }
  CHECK(first.size() == 6);
}

TEST_CASE("quantizers are deterministic given (embeddings, config, seed)") {
  const auto data = testutil::random_embeddings(64, 6, 33);
  for (const Method method :
       {Method::gaoq, Method::hkmeans_local, Method::rq_kmeans}) {
    QuantizerConfig config;
    config.branching = {4, 2};
    config.seed = 9;
    config.method = method;
    const auto a = quantize(data, config);
    const auto b = quantize(data, config);
    CHECK(a.sids.codes == b.sids.codes);
  }
}

TEST_CASE("gaoq and hkmeans-local build identical trees up to relabeling") {
  const auto data = testutil::random_embeddings(60, 5, 44);
  QuantizerConfig config;
  config.branching = {3, 2};
  config.seed = 17;
  const auto g = quantize_gaoq(data, config);
  const auto h = quantize_hkmeans_local(data, config);

  // Compare per-level partitions as sets of member sets.
  for (std::size_t level = 1; level <= 2; ++level) {
    std::set<std::vector<std::int32_t>> gs, hs;
    for (const auto& node : g.codebook.nodes)
      if (node.level == level) gs.insert(node.members);
    for (const auto& node : h.codebook.nodes)
      if (node.level == level) hs.insert(node.members);
    CHECK(gs == hs);
  }
  // Level-1 codes are the cluster order itself, so they agree exactly.
  for (std::size_t i = 0; i < 60; ++i)
    CHECK(g.sids.sid(i)[0] == h.sids.sid(i)[0]);
}

TEST_CASE("quantize threads do not change the result") {
  const auto data = testutil::random_embeddings(80, 4, 55);
  QuantizerConfig config;
  config.branching = {4, 2};
  config.seed = 2;
  config.threads = 1;
  const auto seq = quantize_gaoq(data, config);
  config.threads = 4;
  const auto par = quantize_gaoq(data, config);
  CHECK(seq.sids.codes == par.sids.codes);
}

TEST_CASE("quantize_rq_kmeans: index collapse when data equals centroids") {
  // 4 distinct points, b_1 = 4: level-1 reconstructs exactly, so level-2
  // residuals are all zero and collapse to one effective code.
  EmbeddingMatrix m;
  m.rows = 4;
  m.dim = 2;
  m.values = {0, 0, 10, 0, 0, 10, 10, 10};
  m.row_tokens = {"a", "b", "c", "d"};
  QuantizerConfig config;
  config.branching = {4, 2};
  config.seed = 3;
  const auto result = quantize_rq_kmeans(m, config);
  std::set<std::int32_t> level2;
  for (std::size_t i = 0; i < 4; ++i) level2.insert(result.sids.sid(i)[1]);
  CHECK(level2.size() == 1);
  CHECK(rq_reconstruction_error(m, result.codebook, result.sids) ==
        doctest::Approx(0.0));
}

TEST_CASE("quantize_rq_kmeans: one level with b = N has zero distortion") {
  const auto data = testutil::random_embeddings(8, 3, 77);
  QuantizerConfig config;
  config.branching = {8};
  const auto result = quantize_rq_kmeans(data, config);
  CHECK(rq_reconstruction_error(data, result.codebook, result.sids) ==
        doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("quantize_rq_kmeans: reconstruction error non-increasing in depth") {
  const auto data = testutil::random_embeddings(100, 6, 88);
  double previous = 1e300;
  for (std::size_t levels = 1; levels <= 3; ++levels) {
    QuantizerConfig config;
    config.branching.assign(levels, 4);
    config.seed = 10;
    const auto result = quantize_rq_kmeans(data, config);
    const double err =
        rq_reconstruction_error(data, result.codebook, result.sids);
    CHECK(err <= previous + 1e-9);
    previous = err;
  }
}

TEST_CASE("SID table TSV round-trip") {
  testutil::TempDir dir("sids");
  const auto data = testutil::random_embeddings(30, 4, 5);
  QuantizerConfig config;
  config.branching = {3};
  config.seed = 1;
  const auto result = quantize_gaoq(data, config);
  const std::string path = dir.file("sids.tsv");
  write_sid_table(result.sids, path);
  const auto back = read_sid_table(path);
  CHECK(back.levels == result.sids.levels);
  CHECK(back.codes == result.sids.codes);
  CHECK(back.item_tokens == result.sids.item_tokens);
}

TEST_CASE("quantize rejects impossible configurations") {
  const auto data = testutil::random_embeddings(10, 2, 1);
  QuantizerConfig config;
  config.branching = {4, 4};  // capacity 16 > 10
  CHECK_THROWS_AS(quantize_gaoq(data, config), Error);

  config.branching = {1};
  CHECK_THROWS_AS(quantize_gaoq(data, config), Error);
}

TEST_CASE("default branching heuristic tracks N/15") {
  const auto b = default_branching(15000);
  REQUIRE(b.size() == 2);
  const double product = static_cast<double>(b[0] * b[1]);
  CHECK(product >= 15000.0 / 20.0);
  CHECK(product <= 15000.0 / 10.0);
}

TEST_CASE("quantize with empty branching falls back to the N/15 heuristic") {
  const auto data = testutil::random_embeddings(90, 4, 66);
  QuantizerConfig config;
  config.seed = 8;
  const auto result = quantize_gaoq(data, config);
  CHECK(result.codebook.config.branching == default_branching(90));
  std::set<std::vector<std::int32_t>> seen;
  for (std::size_t i = 0; i < 90; ++i) {
    const auto sid = result.sids.sid(i);
    seen.insert({sid.begin(), sid.end()});
  }
  CHECK(seen.size() == 90);
}

TEST_CASE("exact duplicate embeddings stay unique and are reported") {
  EmbeddingMatrix m;
  m.rows = 6;
  m.dim = 2;
  m.values = {0, 0, 0, 0,          // items 0 and 1 identical
              40, 0, 40.5, 0,
              0, 40, 0, 40.5};
  for (int i = 0; i < 6; ++i) m.row_tokens.push_back("i" + std::to_string(i));

  QuantizerConfig config;
  config.branching = {3};
  config.seed = 12;
  const auto result = quantize_gaoq(m, config);

  std::set<std::vector<std::int32_t>> seen;
  for (std::size_t i = 0; i < 6; ++i) {
    const auto sid = result.sids.sid(i);
    seen.insert({sid.begin(), sid.end()});
  }
  CHECK(seen.size() == 6);

  REQUIRE(result.codebook.duplicate_groups.size() == 1);
  CHECK(result.codebook.duplicate_groups[0] ==
        std::vector<std::int32_t>{0, 1});
  // Within the duplicate group, the lower item ID takes the lower code.
  CHECK(result.sids.sid(0)[1] < result.sids.sid(1)[1]);
}

TEST_CASE("underfull parents use as many children as they have members") {
  // With N >= prod(b_l) and balanced splits, prefix parents are never
  // underfull inside quantize; the clamp lives in the public level op.
  Rng anchor_rng(91);
  const auto anchors = ortho_anchors(3, 4, anchor_rng);
  const std::vector<double> parent = {0, 0, 0, 0};
  const std::vector<double> pts = {1, 0, 0, 0, 0, 2, 0, 0};  // two points
  Rng rng(6);
  const auto level = gaoq_level(pts, 2, 4, parent, 3, 10, anchors, rng);
  CHECK(level.children == 2);
  CHECK(level.anchor_of_child.size() == 2);
  CHECK(level.anchor_of_child[0] != level.anchor_of_child[1]);
  for (const auto a : level.anchor_of_child) {
    CHECK(a >= 0);
    CHECK(a < 3);  // drawn from the shared level anchor set
  }
}
