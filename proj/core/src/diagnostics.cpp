#include "rsid/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace rsid::diag {

namespace {

double entropy_of_counts(const std::unordered_map<std::int64_t, std::size_t>&
                             counts,
                         std::size_t total) {
  double h = 0.0;
  for (const auto& [_, c] : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

void require_level(const gaoq::SidTable& sids, std::size_t level) {
  if (sids.item_count() == 0) throw Error("empty SID table");
  if (level < 1 || level > sids.levels)
    throw Error("level " + std::to_string(level) + " out of range (1.." +
                std::to_string(sids.levels) + ")");
}

/// Key for a code prefix c_1..c_{len}; codes fit in 20 bits each here.
std::vector<std::int32_t> prefix_of(const gaoq::SidTable& sids,
                                    std::size_t item, std::size_t len) {
  const auto sid = sids.sid(item);
  return {sid.begin(), sid.begin() + len};
}

}  // namespace

double marginal_entropy(const gaoq::SidTable& sids, std::size_t level) {
  require_level(sids, level);
  const std::size_t n = sids.item_count();
  std::unordered_map<std::int64_t, std::size_t> counts;
  for (std::size_t i = 0; i < n; ++i) ++counts[sids.sid(i)[level - 1]];
  return entropy_of_counts(counts, n);
}

double prefix_conditional_entropy(const gaoq::SidTable& sids,
                                  std::size_t level) {
  require_level(sids, level);
  if (level == 1) return marginal_entropy(sids, 1);
  const std::size_t n = sids.item_count();
  std::map<std::vector<std::int32_t>,
           std::unordered_map<std::int64_t, std::size_t>>
      by_prefix;
  for (std::size_t i = 0; i < n; ++i)
    ++by_prefix[prefix_of(sids, i, level - 1)][sids.sid(i)[level - 1]];
  double h = 0.0;
  for (const auto& [_, counts] : by_prefix) {
    std::size_t total = 0;
    for (const auto& [__, c] : counts) total += c;
    const double weight = static_cast<double>(total) / static_cast<double>(n);
    h += weight * entropy_of_counts(counts, total);
  }
  return h;
}

double joint_entropy(const gaoq::SidTable& sids) {
  require_level(sids, 1);
  const std::size_t n = sids.item_count();
  std::map<std::vector<std::int32_t>, std::size_t> counts;
  for (std::size_t i = 0; i < n; ++i)
    ++counts[prefix_of(sids, i, sids.levels)];
  double h = 0.0;
  for (const auto& [_, c] : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(n);
    h -= p * std::log(p);
  }
  return h;
}

std::size_t observed_prefixes(const gaoq::SidTable& sids, std::size_t level) {
  require_level(sids, level);
  if (level == 1) return 1;
  std::map<std::vector<std::int32_t>, bool> seen;
  for (std::size_t i = 0; i < sids.item_count(); ++i)
    seen[prefix_of(sids, i, level - 1)] = true;
  return seen.size();
}

IntraCodeCosine intra_code_cosine(const gaoq::SidTable& sids,
                                  const EmbeddingMatrix& embeddings,
                                  std::size_t level) {
  require_level(sids, level);
  if (embeddings.rows != sids.item_count())
    throw Error("intra_code_cosine: embeddings and SID table disagree on N");

  std::unordered_map<std::int64_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < sids.item_count(); ++i)
    groups[sids.sid(i)[level - 1]].push_back(i);

  const std::size_t dim = embeddings.dim;
  std::vector<double> norms(embeddings.rows, 0.0);
  for (std::size_t i = 0; i < embeddings.rows; ++i) {
    double s = 0.0;
    const auto row = embeddings.row(i);
    for (std::size_t d = 0; d < dim; ++d)
      s += static_cast<double>(row[d]) * static_cast<double>(row[d]);
    norms[i] = std::sqrt(s);
  }

  IntraCodeCosine out;
  double sum = 0.0;
  for (const auto& [_, members] : groups) {
    if (members.size() < 2) continue;
    double code_sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < members.size(); ++a) {
      const auto ra = embeddings.row(members[a]);
      for (std::size_t b = a + 1; b < members.size(); ++b) {
        const auto rb = embeddings.row(members[b]);
        double d = 0.0;
        for (std::size_t k = 0; k < dim; ++k)
          d += static_cast<double>(ra[k]) * static_cast<double>(rb[k]);
        const double den = norms[members[a]] * norms[members[b]];
        code_sum += den == 0.0 ? 0.0 : d / den;
        ++pairs;
      }
    }
    sum += code_sum / static_cast<double>(pairs);
    ++out.codes_used;
  }
  if (out.codes_used == 0) {
    std::cerr << "[rsid] warning: no level-" << level
              << " code has >= 2 members; intra-code cosine undefined\n";
    out.mean = std::numeric_limits<double>::quiet_NaN();
  } else {
    out.mean = sum / static_cast<double>(out.codes_used);
  }
  return out;
}

OverlapReport sid_overlap(const gaoq::SidTable& sids, const SidCorpus& corpus) {
  if (corpus.targets.size() != corpus.histories.size())
    throw Error("sid_overlap: histories and targets disagree");
  if (corpus.targets.empty()) throw Error("sid_overlap: empty corpus");

  OverlapReport report;
  report.per_level.assign(sids.levels, 0.0);
  for (std::size_t p = 0; p < corpus.targets.size(); ++p) {
    const auto& hist = corpus.histories[p];
    if (hist.empty()) {
      ++report.pairs_skipped;
      continue;
    }
    const auto target = sids.sid(static_cast<std::size_t>(corpus.targets[p]));
    for (std::size_t l = 0; l < sids.levels; ++l) {
      bool hit = false;
      for (const std::int32_t h : hist) {
        if (sids.sid(static_cast<std::size_t>(h))[l] == target[l]) {
          hit = true;
          break;
        }
      }
      if (hit) report.per_level[l] += 1.0;
    }
    ++report.pairs_used;
  }
  if (report.pairs_used == 0) throw Error("sid_overlap: all pairs skipped");
  double total = 0.0;
  for (auto& v : report.per_level) {
    v /= static_cast<double>(report.pairs_used);
    total += v;
  }
  report.overall = total / static_cast<double>(sids.levels);
  return report;
}

EntropyReport entropy_report(const gaoq::SidTable& sids) {
  EntropyReport rep;
  rep.alphabet = sids.alphabet;
  for (std::size_t l = 1; l <= sids.levels; ++l) {
    rep.marginal.push_back(marginal_entropy(sids, l));
    rep.prefix_cond.push_back(prefix_conditional_entropy(sids, l));
    rep.prefixes.push_back(observed_prefixes(sids, l));
  }
  rep.joint = joint_entropy(sids);
  return rep;
}

DecompositionCheck entropy_decomposition_check(const gaoq::SidTable& sids,
                                               std::size_t level) {
  require_level(sids, level);
  const std::size_t n = sids.item_count();

  // z = full code tuple; distributions are plug-in over items.
  // H(z|c_l), H(z|c_l,C_<l) and I(z;C_<l|c_l) = H(z|c_l) - H(z|c_l,C_<l)
  // would be circular, so compute I from its own definition:
  // I = sum_{c_l} p(c_l) sum_{z,prefix} p(z,prefix|c_l)
  //        log [ p(z,prefix|c_l) / (p(z|c_l) p(prefix|c_l)) ].
  // Since z determines the prefix, the tables below stay small.
  using Key = std::vector<std::int32_t>;
  std::map<std::int32_t, std::size_t> code_count;
  std::map<std::pair<std::int32_t, Key>, std::size_t> code_z;       // (c_l, z)
  std::map<std::pair<std::int32_t, Key>, std::size_t> code_prefix;  // (c_l, C_<l)

  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t c = sids.sid(i)[level - 1];
    const Key z = prefix_of(sids, i, sids.levels);
    const Key prefix = prefix_of(sids, i, level - 1);
    ++code_count[c];
    ++code_z[{c, z}];
    ++code_prefix[{c, prefix}];
  }

  DecompositionCheck out;
  // H(z | c_l)
  for (const auto& [key, cnt] : code_z) {
    const double p_joint = static_cast<double>(cnt) / n;
    const double p_cond =
        static_cast<double>(cnt) / code_count.at(key.first);
    out.ambiguity -= p_joint * std::log(p_cond);
  }
  // H(z | c_l, C_<l): condition on (c_l, prefix); z determines both, so the
  // cell count of (c_l, prefix, z) equals the (c_l, z) count.
  for (const auto& [key, cnt] : code_z) {
    const Key prefix(key.second.begin(), key.second.begin() + (level - 1));
    const double p_joint = static_cast<double>(cnt) / n;
    const double p_cond = static_cast<double>(cnt) /
                          code_prefix.at({key.first, prefix});
    out.refined -= p_joint * std::log(p_cond);
  }
  // I(z; C_<l | c_l) from its definition.
  for (const auto& [key, cnt] : code_z) {
    const Key prefix(key.second.begin(), key.second.begin() + (level - 1));
    const double nc = static_cast<double>(code_count.at(key.first));
    const double p_joint = static_cast<double>(cnt) / n;
    const double p_zp_given_c = static_cast<double>(cnt) / nc;
    const double p_z_given_c = static_cast<double>(cnt) / nc;
    const double p_p_given_c =
        static_cast<double>(code_prefix.at({key.first, prefix})) / nc;
    out.prefix_information +=
        p_joint * std::log(p_zp_given_c / (p_z_given_c * p_p_given_c));
  }
  out.residual = out.ambiguity - out.refined - out.prefix_information;
  return out;
}

std::size_t BoundInstance::atom_count() const {
  std::size_t atoms = input_count;
  for (const std::size_t v : vocab_sizes) atoms *= v;
  return atoms;
}

void BoundInstance::validate() const {
  if (input_count == 0 || vocab_sizes.empty())
    throw Error("bound instance: empty input or field set");
  if (encoder.size() != input_count)
    throw Error("bound instance: encoder size mismatch");
  for (const std::size_t h : encoder)
    if (h >= hidden_count) throw Error("bound instance: encoder out of range");
  const std::size_t atoms = atom_count();
  if (atoms > 10000)
    throw Error("bound instance: " + std::to_string(atoms) +
                " atoms exceed the enumerable limit (10000)");
  if (joint.size() != atoms)
    throw Error("bound instance: joint table size mismatch");
  double total = 0.0;
  for (const double p : joint) {
    if (p < 0) throw Error("bound instance: negative probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw Error("bound instance: joint does not sum to 1");
  if (predictor.size() != field_count() || weights.size() != field_count())
    throw Error("bound instance: predictor/weights size mismatch");
  for (std::size_t k = 0; k < field_count(); ++k) {
    if (weights[k] < 0) throw Error("bound instance: negative weight");
    if (predictor[k].size() != hidden_count * vocab_sizes[k])
      throw Error("bound instance: predictor table size mismatch");
  }
}

BoundCheck check_sufficiency_bound(const BoundInstance& inst) {
  inst.validate();
  const std::size_t J = inst.field_count();
  const std::size_t atoms = inst.atom_count();
  std::size_t field_span = 1;  // product of vocab sizes
  for (const std::size_t v : inst.vocab_sizes) field_span *= v;

  // Decode an atom index into (input, field values).
  auto decode = [&](std::size_t atom, std::size_t& input,
                    std::vector<std::size_t>& fields) {
    input = atom / field_span;
    std::size_t rest = atom % field_span;
    for (std::size_t k = J; k-- > 0;) {
      fields[k] = rest % inst.vocab_sizes[k];
      rest /= inst.vocab_sizes[k];
    }
  };

  // Exact marginals: p(h), p(f_k), p(h, f_k).
  std::vector<double> p_hidden(inst.hidden_count, 0.0);
  std::vector<std::vector<double>> p_field(J);
  std::vector<std::vector<double>> p_hf(J);
  for (std::size_t k = 0; k < J; ++k) {
    p_field[k].assign(inst.vocab_sizes[k], 0.0);
    p_hf[k].assign(inst.hidden_count * inst.vocab_sizes[k], 0.0);
  }
  std::size_t input = 0;
  std::vector<std::size_t> fields(J);
  double expected_loss = 0.0;
  for (std::size_t atom = 0; atom < atoms; ++atom) {
    const double p = inst.joint[atom];
    if (p == 0.0) continue;
    decode(atom, input, fields);
    const std::size_t h = inst.encoder[input];
    p_hidden[h] += p;
    for (std::size_t k = 0; k < J; ++k) {
      p_field[k][fields[k]] += p;
      p_hf[k][h * inst.vocab_sizes[k] + fields[k]] += p;
      const double q = inst.predictor[k][h * inst.vocab_sizes[k] + fields[k]];
      if (q <= 0.0)
        throw Error("bound instance: predictor assigns zero mass to an "
                    "observed outcome");
      expected_loss += inst.weights[k] * p * (-std::log(q));
    }
  }

  BoundCheck out;
  double weighted_field_entropy = 0.0;
  for (std::size_t k = 0; k < J; ++k) {
    double mi = 0.0;
    for (std::size_t h = 0; h < inst.hidden_count; ++h) {
      for (std::size_t v = 0; v < inst.vocab_sizes[k]; ++v) {
        const double pj = p_hf[k][h * inst.vocab_sizes[k] + v];
        if (pj == 0.0) continue;
        mi += pj * std::log(pj / (p_hidden[h] * p_field[k][v]));
      }
    }
    out.lhs += inst.weights[k] * mi;
    double hk = 0.0;
    for (const double pv : p_field[k])
      if (pv > 0.0) hk -= pv * std::log(pv);
    weighted_field_entropy += inst.weights[k] * hk;

    // E_h[KL(p_k(.|h) || q_k(.|h))], exact.
    double kl = 0.0;
    for (std::size_t h = 0; h < inst.hidden_count; ++h) {
      if (p_hidden[h] == 0.0) continue;
      for (std::size_t v = 0; v < inst.vocab_sizes[k]; ++v) {
        const double pj = p_hf[k][h * inst.vocab_sizes[k] + v];
        if (pj == 0.0) continue;
        const double p_cond = pj / p_hidden[h];
        const double q = inst.predictor[k][h * inst.vocab_sizes[k] + v];
        kl += p_hidden[h] * p_cond * std::log(p_cond / q);
      }
    }
    out.kl_sum += inst.weights[k] * kl;
  }
  out.rhs = weighted_field_entropy - expected_loss;
  out.gap = out.lhs - out.rhs;
  out.holds = out.lhs >= out.rhs - 1e-9 && std::abs(out.gap - out.kl_sum) <= 1e-9;
  return out;
}

BoundInstance random_bound_instance(Rng& rng, std::size_t max_inputs,
                                    std::size_t max_fields,
                                    std::size_t max_vocab) {
  BoundInstance inst;
  inst.input_count = 2 + rng.next_index(std::max<std::size_t>(1, max_inputs - 1));
  inst.hidden_count = 1 + rng.next_index(inst.input_count);
  inst.encoder.resize(inst.input_count);
  for (auto& h : inst.encoder) h = rng.next_index(inst.hidden_count);
  const std::size_t J = 1 + rng.next_index(max_fields);
  inst.vocab_sizes.resize(J);
  for (auto& v : inst.vocab_sizes) v = 2 + rng.next_index(max_vocab - 1);

  inst.joint.resize(inst.atom_count());
  double total = 0.0;
  for (auto& p : inst.joint) {
    p = rng.next_double();
    if (rng.next_double() < 0.2) p = 0.0;  // sparse support
    total += p;
  }
  if (total == 0.0) {
    inst.joint[0] = 1.0;
  } else {
    for (auto& p : inst.joint) p /= total;
  }

  inst.predictor.resize(J);
  for (std::size_t k = 0; k < J; ++k) {
    inst.predictor[k].resize(inst.hidden_count * inst.vocab_sizes[k]);
    for (std::size_t h = 0; h < inst.hidden_count; ++h) {
      double row_total = 0.0;
      for (std::size_t v = 0; v < inst.vocab_sizes[k]; ++v) {
        const double x = 0.05 + rng.next_double();
        inst.predictor[k][h * inst.vocab_sizes[k] + v] = x;
        row_total += x;
      }
      for (std::size_t v = 0; v < inst.vocab_sizes[k]; ++v)
        inst.predictor[k][h * inst.vocab_sizes[k] + v] /= row_total;
    }
  }
  inst.weights.resize(J);
  for (auto& w : inst.weights) w = rng.next_double();
  return inst;
}

void use_exact_predictor(BoundInstance& inst) {
  const std::size_t J = inst.field_count();
  std::size_t field_span = 1;
  for (const std::size_t v : inst.vocab_sizes) field_span *= v;

  std::vector<double> p_hidden(inst.hidden_count, 0.0);
  std::vector<std::vector<double>> p_hf(J);
  for (std::size_t k = 0; k < J; ++k)
    p_hf[k].assign(inst.hidden_count * inst.vocab_sizes[k], 0.0);

  std::vector<std::size_t> fields(J);
  for (std::size_t atom = 0; atom < inst.joint.size(); ++atom) {
    const double p = inst.joint[atom];
    if (p == 0.0) continue;
    const std::size_t input = atom / field_span;
    std::size_t rest = atom % field_span;
    for (std::size_t k = J; k-- > 0;) {
      fields[k] = rest % inst.vocab_sizes[k];
      rest /= inst.vocab_sizes[k];
    }
    const std::size_t h = inst.encoder[input];
    p_hidden[h] += p;
    for (std::size_t k = 0; k < J; ++k)
      p_hf[k][h * inst.vocab_sizes[k] + fields[k]] += p;
  }
  for (std::size_t k = 0; k < J; ++k) {
    for (std::size_t h = 0; h < inst.hidden_count; ++h) {
      for (std::size_t v = 0; v < inst.vocab_sizes[k]; ++v) {
        double q;
        if (p_hidden[h] == 0.0) {
          q = 1.0 / static_cast<double>(inst.vocab_sizes[k]);
        } else {
          q = p_hf[k][h * inst.vocab_sizes[k] + v] / p_hidden[h];
          // Keep unobserved outcomes at tiny positive mass so logs stay
          // finite; they carry zero joint probability so nothing changes.
          if (q == 0.0) q = 1e-300;
        }
        inst.predictor[k][h * inst.vocab_sizes[k] + v] = q;
      }
    }
  }
}

namespace {

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r;
  if (__builtin_mul_overflow(a, b, &r))
    throw Error("FLOP estimate overflows 64 bits");
  return r;
}

std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r;
  if (__builtin_add_overflow(a, b, &r))
    throw Error("FLOP estimate overflows 64 bits");
  return r;
}

}  // namespace

std::uint64_t famae_flops(const FamaeShape& s) {
  if (s.seq_len == 0 || s.fields == 0 || s.dim == 0 || s.layers == 0)
    throw Error("famae_flops: dimensions must be positive");
  const std::uint64_t fusion = checked_mul(checked_mul(s.seq_len, s.fields), s.dim);
  const std::uint64_t attn = checked_mul(checked_mul(s.seq_len, s.seq_len), s.dim);
  const std::uint64_t proj = checked_mul(checked_mul(s.seq_len, s.dim), s.dim);
  return checked_add(fusion, checked_mul(s.layers, checked_add(attn, proj)));
}

std::uint64_t gaoq_flops(const GaoqShape& s) {
  if (s.items == 0 || s.dim == 0 || s.branching.empty())
    throw Error("gaoq_flops: dimensions must be positive");
  std::vector<std::uint64_t> anchors = s.anchors;
  if (anchors.empty())
    anchors.assign(s.branching.begin() + 1, s.branching.end());
  if (anchors.size() != s.branching.size() - 1)
    throw Error("gaoq_flops: anchors must cover levels 2..L");
  std::vector<std::uint64_t> iters = s.iters;
  if (iters.empty()) iters.assign(s.branching.size(), 50);
  if (iters.size() != s.branching.size())
    throw Error("gaoq_flops: iters must cover every level");

  std::uint64_t total = 0;
  std::uint64_t parents = 1;  // P_{l-1}
  for (std::size_t l = 0; l < s.branching.size(); ++l) {
    const std::uint64_t b = s.branching[l];
    total = checked_add(total, checked_mul(checked_mul(iters[l], s.items),
                                           checked_mul(b, s.dim)));
    if (l >= 1) {
      const std::uint64_t g = anchors[l - 1];
      total = checked_add(total, checked_mul(parents, checked_mul(b, s.dim)));
      total = checked_add(total, checked_mul(s.dim, checked_mul(g, g)));
      const std::uint64_t match =
          checked_add(checked_mul(b, checked_mul(g, s.dim)),
                      checked_mul(b, checked_mul(b, b)));
      total = checked_add(total, checked_mul(parents, match));
    }
    parents = checked_mul(parents, b);
  }
  return total;
}

std::uint64_t t5_flops(const T5Shape& s) {
  if (s.dim == 0 || s.enc_len == 0 || s.dec_len == 0)
    throw Error("t5_flops: dimensions must be positive");
  const std::uint64_t enc_attn =
      checked_mul(checked_mul(s.enc_len, s.enc_len), s.dim);
  const std::uint64_t enc_proj = checked_mul(checked_mul(s.enc_len, s.dim), s.dim);
  const std::uint64_t enc = checked_mul(s.enc_layers, checked_add(enc_attn, enc_proj));

  const std::uint64_t dec_self =
      checked_mul(checked_mul(s.dec_len, s.dec_len), s.dim);
  const std::uint64_t cross =
      checked_mul(checked_mul(s.dec_len, s.enc_len), s.dim);
  const std::uint64_t dec_proj =
      checked_mul(checked_add(s.dec_len, s.enc_len), checked_mul(s.dim, s.dim));
  const std::uint64_t dec =
      checked_mul(s.dec_layers,
                  checked_add(checked_add(dec_self, cross), dec_proj));
  return checked_add(enc, dec);
}

std::string report_json(const EntropyReport& entropy,
                        const std::vector<double>& intra_cosine,
                        const OverlapReport* overlap, bool bits) {
  const double unit = bits ? std::log(2.0) : 1.0;
  nlohmann::json j;
  nlohmann::json levels = nlohmann::json::array();
  for (std::size_t l = 0; l < entropy.marginal.size(); ++l) {
    nlohmann::json lv;
    lv["level"] = l + 1;
    lv["H_marginal"] = entropy.marginal[l] / unit;
    lv["H_prefix_cond"] = entropy.prefix_cond[l] / unit;
    lv["alphabet"] = entropy.alphabet[l];
    lv["prefixes_observed"] = entropy.prefixes[l];
    if (l < intra_cosine.size() && !std::isnan(intra_cosine[l]))
      lv["intra_cosine"] = intra_cosine[l];
    else
      lv["intra_cosine"] = nullptr;
    if (overlap != nullptr)
      lv["overlap"] = overlap->per_level[l];
    else
      lv["overlap"] = nullptr;
    levels.push_back(std::move(lv));
  }
  j["levels"] = std::move(levels);
  j["joint_entropy"] = entropy.joint / unit;
  j["units"] = bits ? "bits" : "nats";
  if (overlap != nullptr) {
    j["overlap_overall"] = overlap->overall;
    j["pairs_used"] = overlap->pairs_used;
    j["pairs_skipped"] = overlap->pairs_skipped;
  } else {
    j["pairs_used"] = 0;
  }
  j["prefixes_observed"] = entropy.prefixes;
  return j.dump(2);
}

}  // namespace rsid::diag
