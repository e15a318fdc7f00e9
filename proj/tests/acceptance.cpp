// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Each check pins its thresholds in code; oracles are enumerated
// in place (permutation brute force, random partitions, finite
// differences, exact bound enumeration).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rsid/common.hpp"
#include "rsid/data.hpp"
#include "rsid/diagnostics.hpp"
#include "rsid/famae.hpp"
#include "rsid/gaoq.hpp"
#include "test_util.hpp"

using namespace rsid;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

#define REQUIRE_OR(cond, msg)                \
  do {                                       \
    if (!(cond)) return {false, msg};        \
  } while (0)

// --------------------------------------------------------------------------
// 1. Hungarian exactness vs permutation brute force
// --------------------------------------------------------------------------

double brute_force_best(const std::vector<double>& m, std::size_t rows,
                        std::size_t cols) {
  std::vector<std::size_t> perm(cols);
  std::iota(perm.begin(), perm.end(), 0);
  double best = -1e300;
  do {
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) total += m[r * cols + perm[r]];
    best = std::max(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Outcome criterion_hungarian() {
  Rng rng(101);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t rows = 1 + rng.next_index(7);
    const std::size_t cols = rows + rng.next_index(9 - rows + 1);
    std::vector<double> m(rows * cols);
    for (auto& v : m) v = rng.next_double() * 2.0 - 1.0;
    const auto assign = gaoq::hungarian(m, rows, cols, /*maximize=*/true);
    double total = 0.0;
    std::set<std::size_t> used;
    for (std::size_t r = 0; r < rows; ++r) {
      total += m[r * cols + assign[r]];
      used.insert(assign[r]);
    }
    REQUIRE_OR(used.size() == rows, "assignment not injective");
    const double best = brute_force_best(m, rows, cols);
    REQUIRE_OR(std::abs(total - best) <= 1e-9 * (1.0 + std::abs(best)),
               "suboptimal assignment in trial " + std::to_string(trial));
  }
  return {true, "500/500 equal to brute force"};
}

// --------------------------------------------------------------------------
// 2. Balance invariant + cost vs a random balanced partition
// --------------------------------------------------------------------------

Outcome criterion_balance() {
  Rng rng(202);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 2 + rng.next_index(31);
    const std::size_t n = b + rng.next_index(2000 - b + 1);
    const std::size_t dim = 2 + rng.next_index(6);
    std::vector<double> pts(n * dim);
    for (auto& p : pts) p = rng.next_gaussian();

    Rng km_rng(trial);
    const auto result =
        gaoq::balanced_kmeans(pts, n, dim, b, 20, km_rng);
    const auto [lo, hi] =
        std::minmax_element(result.sizes.begin(), result.sizes.end());
    REQUIRE_OR(*hi - *lo <= 1,
               "imbalanced sizes in trial " + std::to_string(trial));
    const double cost = gaoq::partition_cost(pts, n, dim, result);

    // Random balanced partition baseline: shuffle, deal round-robin.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[rng.next_index(i)]);
    gaoq::BalancedKMeansResult random_part;
    random_part.clusters = b;
    random_part.dim = dim;
    random_part.assignment.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      random_part.assignment[order[i]] = static_cast<std::int32_t>(i % b);
    random_part.centroids.assign(b * dim, 0.0);
    std::vector<std::size_t> sizes(b, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(random_part.assignment[i]);
      ++sizes[c];
      for (std::size_t d = 0; d < dim; ++d)
        random_part.centroids[c * dim + d] += pts[i * dim + d];
    }
    for (std::size_t c = 0; c < b; ++c)
      for (std::size_t d = 0; d < dim; ++d)
        random_part.centroids[c * dim + d] /= static_cast<double>(sizes[c]);
    const double random_cost = gaoq::partition_cost(pts, n, dim, random_part);
    REQUIRE_OR(cost <= random_cost + 1e-9,
               "cost above random baseline in trial " + std::to_string(trial));
  }
  return {true, "200/200 balanced and at or below the random baseline"};
}

// --------------------------------------------------------------------------
// 3. Anchor orthonormality
// --------------------------------------------------------------------------

Outcome criterion_anchors() {
  Rng rng(303);
  for (const auto& [g, d] : std::vector<std::pair<std::size_t, std::size_t>>{
           {2, 4}, {3, 3}, {8, 8}, {16, 64}, {40, 640}}) {
    const auto set = gaoq::ortho_anchors(g, d, rng);
    for (std::size_t i = 0; i < g; ++i) {
      for (std::size_t j = 0; j < g; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k)
          dot += set.vectors[i * d + k] * set.vectors[j * d + k];
        const double expect = i == j ? 1.0 : 0.0;
        REQUIRE_OR(std::abs(dot - expect) <= 1e-4,
                   "gram deviation at g=" + std::to_string(g));
      }
    }
  }
  const auto mercedes = gaoq::ortho_anchors(3, 2, rng);
  REQUIRE_OR(mercedes.max_abs_cos <= 0.501,
             "g=3,D=2 max |cos| = " + std::to_string(mercedes.max_abs_cos));
  return {true, "Q factors orthonormal to 1e-4; 3-in-2 reaches |cos| <= 0.501"};
}

// --------------------------------------------------------------------------
// 4. Global-alignment soundness (and hkmeans-local counterexample)
// --------------------------------------------------------------------------

EmbeddingMatrix mirrored_parent_data(std::size_t parents,
                                     std::size_t per_child, std::size_t dim,
                                     double parent_scale, Rng& jitter_rng) {
  // Parents on scaled basis directions; both children at parent +/- v.
  EmbeddingMatrix m;
  m.dim = dim;
  std::vector<double> v(dim, 0.0);
  v[dim - 1] = 0.7;
  v[dim - 2] = -0.5;
  for (std::size_t p = 0; p < parents; ++p) {
    for (const double sign : {+1.0, -1.0}) {
      for (std::size_t i = 0; i < per_child; ++i) {
        for (std::size_t d = 0; d < dim; ++d) {
          const double parent = (d == p) ? parent_scale : 0.0;
          m.values.push_back(static_cast<float>(
              parent + sign * v[d] + 1e-3 * jitter_rng.next_gaussian()));
        }
        m.row_tokens.push_back("p" + std::to_string(p) +
                               (sign > 0 ? "+" : "-") + std::to_string(i));
      }
    }
  }
  m.rows = m.row_tokens.size();
  return m;
}

/// Returns true when all +v children share one level-2 code and all -v
/// children share another across every parent.
bool globally_consistent(const gaoq::SidTable& sids, std::size_t parents,
                         std::size_t per_child) {
  std::set<std::int32_t> plus_codes, minus_codes;
  for (std::size_t p = 0; p < parents; ++p) {
    const std::size_t base = p * 2 * per_child;
    // All items of one child must agree internally first.
    for (std::size_t i = 0; i < per_child; ++i) {
      if (sids.sid(base + i)[1] != sids.sid(base)[1]) return false;
      if (sids.sid(base + per_child + i)[1] !=
          sids.sid(base + per_child)[1])
        return false;
    }
    plus_codes.insert(sids.sid(base)[1]);
    minus_codes.insert(sids.sid(base + per_child)[1]);
  }
  return plus_codes.size() == 1 && minus_codes.size() == 1 &&
         *plus_codes.begin() != *minus_codes.begin();
}

Outcome criterion_alignment() {
  Rng jitter(404);
  const std::size_t parents = 8, per_child = 8, dim = 16;
  const auto data = mirrored_parent_data(parents, per_child, dim, 50.0, jitter);

  std::size_t gaoq_ok = 0, hkm_fail = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    gaoq::QuantizerConfig config;
    config.branching = {parents, 2};
    config.seed = seed;
    const auto g = gaoq::quantize_gaoq(data, config);
    if (globally_consistent(g.sids, parents, per_child)) ++gaoq_ok;
    const auto h = gaoq::quantize_hkmeans_local(data, config);
    if (!globally_consistent(h.sids, parents, per_child)) ++hkm_fail;
  }
  REQUIRE_OR(gaoq_ok == 20,
             "gaoq consistent for only " + std::to_string(gaoq_ok) +
                 "/20 seeds");
  REQUIRE_OR(hkm_fail >= 1, "hkmeans-local never failed");
  return {true, "gaoq 20/20 consistent; hkmeans-local inconsistent for " +
                    std::to_string(hkm_fail) + "/20 seeds"};
}

// --------------------------------------------------------------------------
// 5/6. Hierarchical Gaussian mixture with shared residual directions
// --------------------------------------------------------------------------

struct MixtureData {
  EmbeddingMatrix embeddings;
  std::vector<std::size_t> parent_of_item;
  std::vector<std::size_t> direction_of_item;
  std::size_t parents = 0, directions = 0, per_cell = 0;
};

MixtureData shared_direction_mixture(std::size_t parents,
                                     std::size_t directions,
                                     std::size_t per_cell, std::size_t dim,
                                     double parent_scale, Rng& rng) {
  MixtureData data;
  data.parents = parents;
  data.directions = directions;
  data.per_cell = per_cell;
  data.embeddings.dim = dim;
  for (std::size_t p = 0; p < parents; ++p) {
    for (std::size_t r = 0; r < directions; ++r) {
      for (std::size_t i = 0; i < per_cell; ++i) {
        for (std::size_t d = 0; d < dim; ++d) {
          double v = 0.02 * rng.next_gaussian();
          if (d == p) v += parent_scale;           // parent direction
          if (d == parents + r) v += 1.0;          // shared residual
          data.embeddings.values.push_back(static_cast<float>(v));
        }
        data.parent_of_item.push_back(p);
        data.direction_of_item.push_back(r);
        data.embeddings.row_tokens.push_back(
            "i" + std::to_string(data.embeddings.row_tokens.size()));
      }
    }
  }
  data.embeddings.rows = data.embeddings.row_tokens.size();
  return data;
}

Outcome criterion_ambiguity() {
  Rng rng(505);
  const auto mix = shared_direction_mixture(16, 8, 32, 32, 3.0, rng);

  gaoq::QuantizerConfig config;
  config.branching = {16, 8};
  config.seed = 1;
  const auto g = gaoq::quantize_gaoq(mix.embeddings, config);
  const auto h = gaoq::quantize_hkmeans_local(mix.embeddings, config);

  const auto gc = diag::intra_code_cosine(g.sids, mix.embeddings, 2);
  const auto hc = diag::intra_code_cosine(h.sids, mix.embeddings, 2);
  REQUIRE_OR(gc.codes_used >= 8 && hc.codes_used >= 8, "missing level-2 codes");
  REQUIRE_OR(gc.mean >= 2.0 * hc.mean,
             "gaoq " + std::to_string(gc.mean) + " vs hkmeans " +
                 std::to_string(hc.mean));
  std::ostringstream os;
  os << "intra-code cosine gaoq " << gc.mean << " >= 2x hkmeans " << hc.mean;
  return {true, os.str()};
}

Outcome criterion_predictability() {
  Rng rng(606);
  const auto mix = shared_direction_mixture(16, 8, 32, 32, 3.0, rng);

  gaoq::QuantizerConfig config;
  config.branching = {16, 8};
  config.seed = 2;
  const auto g = gaoq::quantize_gaoq(mix.embeddings, config);
  const auto h = gaoq::quantize_hkmeans_local(mix.embeddings, config);
  const auto r = gaoq::quantize_rq_kmeans(mix.embeddings, config);

  double g_sum = 0.0, r_sum = 0.0;
  for (std::size_t l = 1; l <= g.sids.levels; ++l)
    g_sum += diag::prefix_conditional_entropy(g.sids, l);
  for (std::size_t l = 1; l <= r.sids.levels; ++l)
    r_sum += diag::prefix_conditional_entropy(r.sids, l);
  REQUIRE_OR(g_sum <= r_sum + 1e-9,
             "gaoq chain " + std::to_string(g_sum) + " above rq " +
                 std::to_string(r_sum));

  // Histories share the target's residual direction but come from other
  // parents.
  diag::SidCorpus corpus;
  for (int pair = 0; pair < 2000; ++pair) {
    const std::size_t r_dir = rng.next_index(mix.directions);
    const std::size_t target_parent = rng.next_index(mix.parents);
    auto item_at = [&](std::size_t parent, std::size_t dir) {
      const std::size_t cell = parent * mix.directions + dir;
      return static_cast<std::int32_t>(cell * mix.per_cell +
                                       rng.next_index(mix.per_cell));
    };
    corpus.targets.push_back(item_at(target_parent, r_dir));
    std::vector<std::int32_t> history;
    for (int k = 0; k < 3; ++k) {
      std::size_t parent = rng.next_index(mix.parents);
      while (parent == target_parent) parent = rng.next_index(mix.parents);
      history.push_back(item_at(parent, r_dir));
    }
    corpus.histories.push_back(std::move(history));
  }
  const auto g_overlap = diag::sid_overlap(g.sids, corpus);
  const auto h_overlap = diag::sid_overlap(h.sids, corpus);
  REQUIRE_OR(g_overlap.per_level[1] >= h_overlap.per_level[1],
             "level-2 overlap gaoq " + std::to_string(g_overlap.per_level[1]) +
                 " below hkmeans " + std::to_string(h_overlap.per_level[1]));
  std::ostringstream os;
  os << "chain gaoq " << g_sum << " <= rq " << r_sum << "; level-2 overlap "
     << g_overlap.per_level[1] << " >= " << h_overlap.per_level[1];
  return {true, os.str()};
}

// --------------------------------------------------------------------------
// 7. Proposition bound by exact enumeration
// --------------------------------------------------------------------------

Outcome criterion_bound() {
  Rng rng(707);
  for (int trial = 0; trial < 100; ++trial) {
    auto inst = diag::random_bound_instance(rng);
    const auto check = diag::check_sufficiency_bound(inst);
    REQUIRE_OR(check.holds, "bound violated in trial " + std::to_string(trial));
    REQUIRE_OR(std::abs(check.gap - check.kl_sum) <= 1e-9,
               "gap != weighted KL in trial " + std::to_string(trial));
    diag::use_exact_predictor(inst);
    const auto tight = diag::check_sufficiency_bound(inst);
    REQUIRE_OR(tight.holds && std::abs(tight.gap) <= 1e-9,
               "not tight at q=p in trial " + std::to_string(trial));
  }
  return {true, "100/100 hold; gap = weighted KL; tight at q = p"};
}

// --------------------------------------------------------------------------
// 8. Gradient correctness (32-bit) vs double finite differences
// --------------------------------------------------------------------------

ItemTable acceptance_items(std::size_t n, std::vector<std::size_t> vocabs,
                           bool bijective_field1 = false) {
  ItemTable table;
  table.item_count = n;
  vocabs[0] = n;
  table.schema.vocab_sizes = vocabs;
  for (std::size_t k = 0; k < vocabs.size(); ++k)
    table.schema.field_names.push_back("f" + std::to_string(k));
  table.vocab_tokens.resize(vocabs.size());
  for (std::size_t i = 0; i < n; ++i) {
    table.vocab_tokens[0].push_back("i" + std::to_string(i));
    table.item_index["i" + std::to_string(i)] = static_cast<std::int32_t>(i);
    table.values.push_back(static_cast<std::int32_t>(i));
    for (std::size_t k = 1; k < vocabs.size(); ++k) {
      const std::size_t value = bijective_field1 && k == 1
                                    ? i
                                    : (i * (2 * k + 1)) % vocabs[k];
      table.values.push_back(static_cast<std::int32_t>(value));
    }
  }
  for (std::size_t k = 1; k < vocabs.size(); ++k)
    for (std::size_t v = 0; v < vocabs[k]; ++v)
      table.vocab_tokens[k].push_back("t" + std::to_string(v));
  return table;
}

Outcome criterion_gradients() {
  const auto items = acceptance_items(6, {0, 4, 3});
  famae::ModelConfig config;
  config.dim = 8;
  config.heads = 2;
  config.ffn_dim = 16;
  config.layers = 2;
  config.dropout = 0.0;
  config.negatives = 0;
  config.max_len = 8;
  config.seed = 808;
  const auto params = famae::init_params<float>(config, items.schema);

  const std::vector<std::int32_t> h1 = {0, 2, 4};
  const std::vector<std::int32_t> h2 = {5, 1};
  std::vector<famae::BatchWindow> batch = {{std::span(h1), 3},
                                           {std::span(h2), 2}};
  std::vector<famae::MaskSample> masks(2);
  masks[0].masked_fields = {0, 1, 2};
  masks[1].masked_fields = {1};

  auto grads = famae::zeros_like(params);
  famae::famae_loss(items, std::span<const famae::BatchWindow>(batch),
                    std::span<const famae::MaskSample>(masks), params, &grads);
  std::vector<float> analytic;
  famae::for_each_tensor(grads, [&](const std::string&,
                                    const std::vector<std::size_t>&,
                                    std::vector<float>& v) {
    analytic.insert(analytic.end(), v.begin(), v.end());
  });

  // The oracle evaluates the loss on a float64 twin, so finite-difference
  // noise sits far below the float32 gradients under test. Components whose
  // absolute deviation is inside the float32 rounding floor (1e-5) are not
  // scored against the relative bound.
  auto twin = famae::cast_params<double>(params);
  std::vector<std::vector<double>*> tensors;
  famae::for_each_tensor(twin, [&](const std::string&,
                                   const std::vector<std::size_t>&,
                                   std::vector<double>& v) {
    tensors.push_back(&v);
  });

  double worst = 0.0;
  std::size_t checked = 0, index = 0;
  for (auto* tensor : tensors) {
    for (auto& value : *tensor) {
      const double saved = value;
      const double step = 1e-3 * std::max(std::abs(saved), 1e-2);
      value = saved + step;
      const double up = famae::famae_loss(
          items, std::span<const famae::BatchWindow>(batch),
          std::span<const famae::MaskSample>(masks), twin, nullptr);
      value = saved - step;
      const double down = famae::famae_loss(
          items, std::span<const famae::BatchWindow>(batch),
          std::span<const famae::MaskSample>(masks), twin, nullptr);
      value = saved;
      const double fd = (up - down) / (2.0 * step);
      const double an = static_cast<double>(analytic[index++]);
      if (std::abs(fd - an) <= 1e-5) continue;
      worst = std::max(worst, std::abs(fd - an) /
                                  std::max(std::abs(fd), std::abs(an)));
      ++checked;
    }
  }
  REQUIRE_OR(worst <= 1e-3,
             "max relative error " + std::to_string(worst));
  std::ostringstream os;
  os << "max relative error " << worst << " over " << index
     << " parameters (" << checked << " above the rounding floor)";
  return {true, os.str()};
}

// --------------------------------------------------------------------------
// 9. Metrics sanity on synthetic datasets
// --------------------------------------------------------------------------

Outcome criterion_metrics() {
  // Copy task: each user repeats one item, so the last history item is the
  // target. Metric 1 must move from chance (K/N) to >= 0.8.
  const std::size_t n = 500;
  const auto items = acceptance_items(n, {0, 10});
  SequenceStore store;
  store.max_len = 8;
  for (std::size_t i = 0; i < n; ++i) {
    store.sequences.push_back(
        std::vector<std::int32_t>(6, static_cast<std::int32_t>(i)));
    store.user_tokens.push_back("u" + std::to_string(i));
  }

  famae::ModelConfig config;
  config.dim = 32;
  config.heads = 4;
  config.ffn_dim = 64;
  config.layers = 2;
  config.dropout = 0.0;
  config.negatives = 0;
  config.max_len = 8;
  config.seed = 909;

  const auto split = leave_one_out_split(store);
  const auto untrained = famae::init_params<float>(config, items.schema);
  const double before =
      famae::metric_collaborative(items, split.test, untrained, 10, 2);
  REQUIRE_OR(std::abs(before - 10.0 / 500.0) <= 0.01,
             "untrained recall@10 = " + std::to_string(before));

  famae::TrainConfig tc;
  tc.lr = 3e-3;
  tc.epochs = 30;
  tc.patience = 30;
  tc.batch_size = 128;
  tc.eval_k = 10;
  tc.threads = 2;
  const auto trained = famae::train(items, store, config, tc);
  const double after =
      famae::metric_collaborative(items, split.test, trained.params, 10, 2);
  REQUIRE_OR(after >= 0.8, "trained metric1 recall@10 = " +
                               std::to_string(after));

  // Discriminative task: field 1 determines the item (bijective), so
  // Metric 2 must reach >= 0.8 once trained.
  const auto bij_items = acceptance_items(n, {0, n}, /*bijective_field1=*/true);
  SequenceStore bij_store;
  bij_store.max_len = 8;
  Rng seq_rng(910);
  for (std::size_t u = 0; u < n; ++u) {
    // Item u appears as the training target (position 2) and the test
    // target, so every (item-ID, field) pair receives supervision.
    std::vector<std::int32_t> seq;
    seq.push_back(static_cast<std::int32_t>(seq_rng.next_index(n)));
    seq.push_back(static_cast<std::int32_t>(u));
    seq.push_back(static_cast<std::int32_t>(seq_rng.next_index(n)));
    seq.push_back(static_cast<std::int32_t>(u));
    bij_store.sequences.push_back(std::move(seq));
    bij_store.user_tokens.push_back("u" + std::to_string(u));
  }
  famae::ModelConfig bij_config = config;
  bij_config.seed = 911;
  famae::TrainConfig bij_tc = tc;
  bij_tc.epochs = 30;
  const auto bij = famae::train(bij_items, bij_store, bij_config, bij_tc);
  const auto bij_split = leave_one_out_split(bij_store);
  const double metric2 = famae::metric_discriminative(
      bij_items, bij_split.test, bij.params, 10, 2);
  REQUIRE_OR(metric2 >= 0.8, "metric2 recall@10 = " + std::to_string(metric2));

  std::ostringstream os;
  os << "metric1 " << before << " -> " << after << "; metric2 " << metric2;
  return {true, os.str()};
}

// --------------------------------------------------------------------------
// 10. Entropy machinery
// --------------------------------------------------------------------------

Outcome criterion_entropy() {
  Rng rng(1010);
  // Chain rule + decomposition on random corpora.
  for (int trial = 0; trial < 20; ++trial) {
    gaoq::SidTable sids;
    sids.levels = 3;
    sids.alphabet = {4, 5, 3};
    const std::size_t n = 60 + rng.next_index(200);
    for (std::size_t i = 0; i < n; ++i) {
      sids.codes.push_back(static_cast<std::int32_t>(rng.next_index(4)));
      sids.codes.push_back(static_cast<std::int32_t>(rng.next_index(5)));
      sids.codes.push_back(static_cast<std::int32_t>(rng.next_index(3)));
      sids.item_tokens.push_back("i" + std::to_string(i));
    }
    double chain = 0.0;
    for (std::size_t l = 1; l <= 3; ++l)
      chain += diag::prefix_conditional_entropy(sids, l);
    REQUIRE_OR(std::abs(chain - diag::joint_entropy(sids)) <= 1e-9,
               "chain rule off in trial " + std::to_string(trial));
    for (std::size_t l = 1; l <= 3; ++l) {
      const auto check = diag::entropy_decomposition_check(sids, l);
      REQUIRE_OR(std::abs(check.residual) <= 1e-9,
                 "decomposition off in trial " + std::to_string(trial));
    }
  }

  // Balanced level-1 marginal entropy on uniform data.
  auto data = testutil::random_embeddings(960, 8, 3);
  gaoq::QuantizerConfig config;
  config.branching = {8, 4};
  config.seed = 4;
  const auto result = gaoq::quantize_gaoq(data, config);
  const double h1 = diag::marginal_entropy(result.sids, 1);
  REQUIRE_OR(h1 >= 0.95 * std::log(8.0),
             "level-1 entropy " + std::to_string(h1));
  std::ostringstream os;
  os << "identities exact; H(c_1) = " << h1 << " >= 0.95 ln 8";
  return {true, os.str()};
}

// --------------------------------------------------------------------------
// 11. Determinism and round-trips
// --------------------------------------------------------------------------

Outcome criterion_determinism() {
  testutil::TempDir dir("acc_det");

  // Quantizer: same seed -> byte-identical SID tables.
  const auto data = testutil::random_embeddings(128, 8, 11);
  gaoq::QuantizerConfig config;
  config.branching = {8, 4};
  config.seed = 31;
  const auto a = gaoq::quantize_gaoq(data, config);
  const auto b = gaoq::quantize_gaoq(data, config);
  gaoq::write_sid_table(a.sids, dir.file("a.tsv"));
  gaoq::write_sid_table(b.sids, dir.file("b.tsv"));
  REQUIRE_OR(testutil::read_file(dir.file("a.tsv")) ==
                 testutil::read_file(dir.file("b.tsv")),
             "sid tables differ across runs");

  // Training: same seed, sequential mode -> byte-identical checkpoints.
  const auto items = acceptance_items(12, {0, 3});
  SequenceStore store;
  store.max_len = 8;
  for (int u = 0; u < 6; ++u) {
    std::vector<std::int32_t> seq;
    for (int t = 0; t < 5; ++t) seq.push_back((u + 2 * t) % 12);
    store.sequences.push_back(std::move(seq));
    store.user_tokens.push_back("u" + std::to_string(u));
  }
  famae::ModelConfig mc;
  mc.dim = 8;
  mc.heads = 2;
  mc.ffn_dim = 16;
  mc.layers = 1;
  mc.max_len = 8;
  mc.dropout = 0.1;
  mc.seed = 77;
  famae::TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 8;
  tc.threads = 1;
  const auto t1 = famae::train(items, store, mc, tc);
  const auto t2 = famae::train(items, store, mc, tc);
  famae::save_checkpoint(t1.params, dir.file("a.rsic"));
  famae::save_checkpoint(t2.params, dir.file("b.rsic"));
  REQUIRE_OR(testutil::read_file(dir.file("a.rsic")) ==
                 testutil::read_file(dir.file("b.rsic")),
             "checkpoints differ across runs");

  // Bit-exact file round-trips.
  auto m = testutil::random_embeddings(33, 7, 5);
  m.values[0] = -0.0f;
  m.values[1] = 1e-44f;  // subnormal
  write_embeddings(m, dir.file("m.rsid"));
  const auto back = read_embeddings(dir.file("m.rsid"));
  REQUIRE_OR(std::memcmp(back.values.data(), m.values.data(),
                         m.values.size() * sizeof(float)) == 0,
             "embedding round-trip not bit-exact");
  const auto ck = famae::load_checkpoint(dir.file("a.rsic"));
  famae::save_checkpoint(ck, dir.file("c.rsic"));
  REQUIRE_OR(testutil::read_file(dir.file("a.rsic")) ==
                 testutil::read_file(dir.file("c.rsic")),
             "checkpoint round-trip not byte-identical");
  return {true, "byte-identical artifacts; bit-exact round-trips"};
}

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "Hungarian exactness vs brute force", 5.0, criterion_hungarian},
      {2, "balanced k-means balance and cost", 30.0, criterion_balance},
      {3, "anchor orthonormality", 5.0, criterion_anchors},
      {4, "global-alignment soundness", 10.0, criterion_alignment},
      {5, "intra-code ambiguity reduction", 60.0, criterion_ambiguity},
      {6, "prefix predictability and SID overlap", 60.0,
       criterion_predictability},
      {7, "predictive-sufficiency bound", 10.0, criterion_bound},
      {8, "gradient correctness (32-bit)", 30.0, criterion_gradients},
      {9, "task-aware metrics on synthetic data", 300.0, criterion_metrics},
      {10, "entropy machinery", 10.0, criterion_entropy},
      {11, "determinism and round-trips", 60.0, criterion_determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = c.run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    if (elapsed > c.budget_seconds) {
      outcome.pass = false;
      outcome.detail += " [over budget " + std::to_string(c.budget_seconds) +
                        "s]";
    }
    std::printf("[%s] criterion %2d: %s (%.2fs) %s\n",
                outcome.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), elapsed,
                outcome.detail.c_str());
    std::fflush(stdout);
    if (!outcome.pass) ++failures;
  }
  if (failures > 0) {
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("all %zu criteria passed\n", criteria.size());
  return 0;
}
