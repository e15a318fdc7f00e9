#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rsid/common.hpp"
#include "rsid/data.hpp"
#include "rsid/gaoq.hpp"

namespace rsid::diag {

/// Plug-in entropy of the observed level-l codes, in nats. Levels are
/// 1-based.
double marginal_entropy(const gaoq::SidTable& sids, std::size_t level);

/// H(c_l | C_<l): prefix-weighted plug-in conditional entropy. Level 1
/// reduces to the marginal.
double prefix_conditional_entropy(const gaoq::SidTable& sids,
                                  std::size_t level);

/// Plug-in entropy of the full code tuple.
double joint_entropy(const gaoq::SidTable& sids);

/// Number of distinct prefixes C_<l observed (1 for level 1).
std::size_t observed_prefixes(const gaoq::SidTable& sids, std::size_t level);

struct IntraCodeCosine {
  double mean = 0.0;         // NaN when no code value has >= 2 members
  std::size_t codes_used = 0;
};

/// Unweighted mean, over level-l code values with >= 2 members, of the mean
/// pairwise cosine between raw item embeddings sharing that value.
IntraCodeCosine intra_code_cosine(const gaoq::SidTable& sids,
                                  const EmbeddingMatrix& embeddings,
                                  std::size_t level);

/// (history items, target item) pairs over rows of one SidTable.
struct SidCorpus {
  std::vector<std::vector<std::int32_t>> histories;
  std::vector<std::int32_t> targets;
};

struct OverlapReport {
  std::vector<double> per_level;
  double overall = 0.0;       // mean of the per-level ratios
  std::size_t pairs_used = 0;
  std::size_t pairs_skipped = 0;  // empty histories
};

/// Per level l: fraction of pairs whose target code c_l also appears at
/// level l in some history item's SID.
OverlapReport sid_overlap(const gaoq::SidTable& sids, const SidCorpus& corpus);

struct EntropyReport {
  std::vector<double> marginal;       // per level, nats
  std::vector<double> prefix_cond;    // per level, nats
  std::vector<std::size_t> alphabet;
  std::vector<std::size_t> prefixes;  // observed prefix counts
  double joint = 0.0;
};
EntropyReport entropy_report(const gaoq::SidTable& sids);

/// Numeric check of the decomposition H(z|c_l) = H(z|c_l,C_<l) +
/// I(z;C_<l|c_l) with z taken as the (unique) full code tuple.
struct DecompositionCheck {
  double ambiguity = 0.0;        // H(z | c_l)
  double refined = 0.0;          // H(z | c_l, C_<l)
  double prefix_information = 0.0;  // I(z; C_<l | c_l)
  double residual = 0.0;         // ambiguity - refined - prefix_information
};
DecompositionCheck entropy_decomposition_check(const gaoq::SidTable& sids,
                                               std::size_t level);

/// Fully enumerable toy problem for the predictive-sufficiency bound: a
/// joint over (input, field values), a deterministic encoder input -> hidden
/// state, a stochastic predictor per field, and mask weights.
struct BoundInstance {
  std::size_t input_count = 0;
  std::size_t hidden_count = 0;
  std::vector<std::size_t> encoder;            // input -> hidden
  std::vector<std::size_t> vocab_sizes;        // per field
  std::vector<double> joint;  // p(input, f_1..f_J), input-major, fields
                              // mixed-radix with field J-1 fastest
  std::vector<std::vector<double>> predictor;  // per field: hidden x V_k
  std::vector<double> weights;                 // w_k >= 0

  std::size_t field_count() const { return vocab_sizes.size(); }
  std::size_t atom_count() const;
  void validate() const;
};

struct BoundCheck {
  double lhs = 0.0;     // sum_k w_k I(h; f_k)
  double rhs = 0.0;     // sum_k w_k H(f_k) - expected loss
  double gap = 0.0;     // lhs - rhs
  double kl_sum = 0.0;  // sum_k w_k E_h[KL(p_k || q_k)]
  bool holds = false;   // lhs >= rhs - 1e-9 and gap == kl_sum within 1e-9
};

/// Exact enumeration of both sides of the mask-weighted mutual-information
/// lower bound, plus the cross-entropy-decomposition identity that the gap
/// equals the weighted expected KL divergence.
BoundCheck check_sufficiency_bound(const BoundInstance& instance);

/// Random enumerable instance (joint, encoder, stochastic predictor).
BoundInstance random_bound_instance(Rng& rng, std::size_t max_inputs = 6,
                                    std::size_t max_fields = 3,
                                    std::size_t max_vocab = 4);

/// Replace the predictor with the exact conditional p_k(f_k | h), making the
/// bound tight.
void use_exact_predictor(BoundInstance& instance);

/// Dominant FLOP counts with unit constants. Throws on 64-bit overflow.
struct FamaeShape {
  std::uint64_t seq_len = 32;
  std::uint64_t fields = 5;
  std::uint64_t dim = 128;
  std::uint64_t layers = 2;
};
std::uint64_t famae_flops(const FamaeShape& s);

struct GaoqShape {
  std::uint64_t items = 0;
  std::uint64_t dim = 0;
  std::vector<std::uint64_t> branching;  // b_1..b_L
  std::vector<std::uint64_t> anchors;    // g_2..g_L (empty: g_l = b_l)
  std::vector<std::uint64_t> iters;      // I_1..I_L (empty: 50 each)
};
std::uint64_t gaoq_flops(const GaoqShape& s);

struct T5Shape {
  std::uint64_t enc_len = 32;
  std::uint64_t dec_len = 4;
  std::uint64_t dim = 128;
  std::uint64_t enc_layers = 4;
  std::uint64_t dec_layers = 4;
};
std::uint64_t t5_flops(const T5Shape& s);

/// JSON report for the diagnose command:
/// {levels:[{H_marginal, H_prefix_cond, intra_cosine, overlap}],
///  joint_entropy, pairs_used, prefixes_observed}. `bits` converts
/// entropies from nats.
std::string report_json(const EntropyReport& entropy,
                        const std::vector<double>& intra_cosine,
                        const OverlapReport* overlap, bool bits);

}  // namespace rsid::diag
