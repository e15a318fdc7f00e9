#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rsid/common.hpp"
#include "rsid/data.hpp"

namespace rsid::famae {

struct ModelConfig {
  std::size_t dim = 128;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 512;
  double dropout = 0.1;
  /// Per-field loss weights alpha_k; empty means all 1.
  std::vector<double> field_weights;
  /// Sampled-softmax negative count; 0 forces the full softmax.
  std::size_t negatives = 128;
  /// Vocabularies at or below this size always use the full softmax.
  std::size_t full_softmax_limit = 1024;
  std::size_t max_len = 32;
  std::uint64_t seed = 0;

  void validate(std::size_t field_count) const;
  double field_weight(std::size_t field) const;
};

template <class T>
struct LayerParams {
  std::vector<T> ln1_gamma, ln1_beta;
  std::vector<T> wq, bq, wk, bk, wv, bv, wo, bo;
  std::vector<T> ln2_gamma, ln2_beta;
  std::vector<T> w1, b1, w2, b2;
};

/// All learnable tensors of the encoder. Field embedding tables double as
/// the output softmax embeddings (the predictive distribution scores
/// against the same rows the inputs are looked up from).
template <class T>
struct EncoderParams {
  ModelConfig config;
  FieldSchema schema;
  std::vector<std::vector<T>> field_embeddings;  // per field, |V_k| x D
  std::vector<T> mask_tokens;                    // J x D
  std::vector<T> positions;                      // max_len x D
  std::vector<LayerParams<T>> layers;
  std::vector<T> final_ln_gamma, final_ln_beta;

  std::span<const T> embedding(std::size_t field, std::size_t value) const {
    return {field_embeddings[field].data() + value * config.dim, config.dim};
  }
};

using EncoderParameters = EncoderParams<float>;

template <class T>
EncoderParams<T> init_params(const ModelConfig& config,
                             const FieldSchema& schema);
template <class T>
EncoderParams<T> zeros_like(const EncoderParams<T>& params);

template <class U, class T>
EncoderParams<U> cast_params(const EncoderParams<T>& params) {
  EncoderParams<U> out;
  out.config = params.config;
  out.schema = params.schema;
  out.mask_tokens.assign(params.mask_tokens.begin(), params.mask_tokens.end());
  out.positions.assign(params.positions.begin(), params.positions.end());
  out.field_embeddings.resize(params.field_embeddings.size());
  for (std::size_t k = 0; k < params.field_embeddings.size(); ++k)
    out.field_embeddings[k].assign(params.field_embeddings[k].begin(),
                                   params.field_embeddings[k].end());
  out.layers.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& a = params.layers[l];
    auto& b = out.layers[l];
    auto cp = [](const std::vector<T>& src, std::vector<U>& dst) {
      dst.assign(src.begin(), src.end());
    };
    cp(a.ln1_gamma, b.ln1_gamma); cp(a.ln1_beta, b.ln1_beta);
    cp(a.wq, b.wq); cp(a.bq, b.bq); cp(a.wk, b.wk); cp(a.bk, b.bk);
    cp(a.wv, b.wv); cp(a.bv, b.bv); cp(a.wo, b.wo); cp(a.bo, b.bo);
    cp(a.ln2_gamma, b.ln2_gamma); cp(a.ln2_beta, b.ln2_beta);
    cp(a.w1, b.w1); cp(a.b1, b.b1); cp(a.w2, b.w2); cp(a.b2, b.b2);
  }
  out.final_ln_gamma.assign(params.final_ln_gamma.begin(),
                            params.final_ln_gamma.end());
  out.final_ln_beta.assign(params.final_ln_beta.begin(),
                           params.final_ln_beta.end());
  return out;
}

/// Visit every tensor as (name, shape, data). Order is the serialization
/// order of checkpoints.
template <class T, class Fn>
void for_each_tensor(EncoderParams<T>& p, Fn&& fn) {
  const std::size_t d = p.config.dim;
  const std::size_t f = p.config.ffn_dim;
  using Shape = std::vector<std::size_t>;
  for (std::size_t k = 0; k < p.field_embeddings.size(); ++k)
    fn("field_embeddings." + std::to_string(k),
       Shape{p.schema.vocab_sizes[k], d}, p.field_embeddings[k]);
  fn("mask_tokens", Shape{p.schema.field_count(), d}, p.mask_tokens);
  fn("positions", Shape{p.config.max_len, d}, p.positions);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& lay = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    fn(pre + "ln1_gamma", Shape{d}, lay.ln1_gamma);
    fn(pre + "ln1_beta", Shape{d}, lay.ln1_beta);
    fn(pre + "wq", Shape{d, d}, lay.wq);
    fn(pre + "bq", Shape{d}, lay.bq);
    fn(pre + "wk", Shape{d, d}, lay.wk);
    fn(pre + "bk", Shape{d}, lay.bk);
    fn(pre + "wv", Shape{d, d}, lay.wv);
    fn(pre + "bv", Shape{d}, lay.bv);
    fn(pre + "wo", Shape{d, d}, lay.wo);
    fn(pre + "bo", Shape{d}, lay.bo);
    fn(pre + "ln2_gamma", Shape{d}, lay.ln2_gamma);
    fn(pre + "ln2_beta", Shape{d}, lay.ln2_beta);
    fn(pre + "w1", Shape{d, f}, lay.w1);
    fn(pre + "b1", Shape{f}, lay.b1);
    fn(pre + "w2", Shape{f, d}, lay.w2);
    fn(pre + "b2", Shape{d}, lay.b2);
  }
  fn("final_ln_gamma", Shape{d}, p.final_ln_gamma);
  fn("final_ln_beta", Shape{d}, p.final_ln_beta);
}

/// Fields masked on the target item. Indices are 0-based and sorted.
struct MaskSample {
  std::vector<std::size_t> masked_fields;

  bool contains(std::size_t field) const {
    for (const std::size_t m : masked_fields)
      if (m == field) return true;
    return false;
  }
};

/// Two-level masking: K uniform on {1..J}, then a uniform K-subset.
MaskSample sample_mask(std::size_t field_count, Rng& rng);

/// Input token for an item: p_t plus the sum of per-field embeddings, with
/// masked fields replaced by their field-specific mask token. History
/// positions use an empty mask.
template <class T>
std::vector<T> build_target_input(std::span<const std::int32_t> item_fields,
                                  const MaskSample& mask,
                                  const EncoderParams<T>& params,
                                  std::size_t position);

/// softmax_v( sqrt(D) * cos(h, E_k[v]) ) over the full vocabulary of the
/// field. Throws on zero-norm h or embedding rows.
template <class T>
std::vector<T> predictive_distribution(const EncoderParams<T>& params,
                                       std::size_t field,
                                       std::span<const T> hidden);

/// Same but restricted to an explicit candidate list (sampled softmax).
template <class T>
std::vector<T> predictive_distribution(const EncoderParams<T>& params,
                                       std::size_t field,
                                       std::span<const T> hidden,
                                       std::span<const std::int32_t> candidates);

/// Uniform sample without replacement from [0, vocab) \ {target}.
std::vector<std::int32_t> sample_negatives(std::size_t vocab,
                                           std::int32_t target,
                                           std::size_t count, Rng& rng);

struct BatchWindow {
  std::span<const std::int32_t> history;
  std::int32_t target = 0;
};

struct LossOptions {
  /// Dropout is applied only when a dropout_rng is supplied.
  Rng* dropout_rng = nullptr;
  /// Negative sampling source; nullptr forces the full softmax everywhere.
  Rng* negative_rng = nullptr;
  int threads = 1;
  /// Set when a window produced a non-finite loss.
  mutable std::ptrdiff_t bad_window = -1;
};

/// Batch-mean FAMAE loss with explicit masks (one per window). When grads
/// is non-null it accumulates d(loss)/d(params).
template <class T>
double famae_loss(const ItemTable& items, std::span<const BatchWindow> batch,
                  std::span<const MaskSample> masks,
                  const EncoderParams<T>& params,
                  std::type_identity_t<EncoderParams<T>>* grads,
                  const LossOptions& opts = {});

/// Spec-shaped variant: samples one mask per window from rng.
template <class T>
double famae_loss(const ItemTable& items, std::span<const BatchWindow> batch,
                  const EncoderParams<T>& params,
                  std::type_identity_t<EncoderParams<T>>* grads, Rng& rng,
                  const LossOptions& opts = {});

/// h_T for one window in eval mode (no dropout).
template <class T>
std::vector<T> encode_target_hidden(const ItemTable& items,
                                    const BatchWindow& window,
                                    const MaskSample& mask,
                                    const EncoderParams<T>& params);

/// Metric 1: Recall@K of the item-ID field under full-field masking.
double metric_collaborative(const ItemTable& items, const WindowSet& eval,
                            const EncoderParameters& params, std::size_t k,
                            int threads = 1);

/// Metric 2: Recall@K of the item-ID field when only that field is masked.
double metric_discriminative(const ItemTable& items, const WindowSet& eval,
                             const EncoderParameters& params, std::size_t k,
                             int threads = 1);

/// Row i = concat of the item's field embeddings in schema order (J*D).
EmbeddingMatrix extract_item_representations(const EncoderParameters& params,
                                             const ItemTable& items);

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-5;
  std::size_t batch_size = 2048;
  std::size_t epochs = 500;
  std::size_t patience = 3;
  std::size_t eval_k = 10;   // early stopping watches Metric 1 Recall@K
  std::size_t stride = 1;
  int threads = 1;
  bool holdout = true;       // leave-one-out validation/test split
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double metric1 = -1.0;  // negative when no validation split exists
  double metric2 = -1.0;
  double lr = 0.0;
};

struct TrainResult {
  EncoderParameters params;
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;  // 1-based; 0 when early stopping never ran
  bool diverged = false;
  std::string divergence_note;
};

/// AdamW + cosine LR schedule + early stopping on validation Metric 1.
/// Deterministic for a fixed seed and thread count; divergence aborts and
/// returns the last good parameters.
TrainResult train(const ItemTable& items, const SequenceStore& sequences,
                  const ModelConfig& config, const TrainConfig& train_config);

/// Checkpoint container: "RSIC" magic, version, tensor count, payload
/// byte count, float32 payload, JSON manifest (config, schema, tensors).
void save_checkpoint(const EncoderParameters& params, const std::string& path);
EncoderParameters load_checkpoint(const std::string& path);

}  // namespace rsid::famae
