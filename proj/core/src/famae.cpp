#include "rsid/famae.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace rsid::famae {

void ModelConfig::validate(std::size_t field_count) const {
  if (dim == 0 || layers == 0 || heads == 0 || ffn_dim == 0)
    throw Error("model config: dimensions must be positive");
  if (dim % heads != 0)
    throw Error("model config: dim must be divisible by heads");
  if (dropout < 0.0 || dropout >= 1.0)
    throw Error("model config: dropout must be in [0, 1)");
  if (max_len < 2) throw Error("model config: max_len must be >= 2");
  if (!field_weights.empty()) {
    if (field_weights.size() != field_count)
      throw Error("model config: field_weights must have one entry per field");
    for (const double w : field_weights)
      if (w < 0.0) throw Error("model config: field weights must be >= 0");
  }
}

double ModelConfig::field_weight(std::size_t field) const {
  return field_weights.empty() ? 1.0 : field_weights[field];
}

namespace {

template <class T>
void fill_gaussian(std::vector<T>& v, Rng& rng, double scale) {
  for (auto& x : v) x = static_cast<T>(rng.next_gaussian() * scale);
}

}  // namespace

template <class T>
EncoderParams<T> init_params(const ModelConfig& config,
                             const FieldSchema& schema) {
  config.validate(schema.field_count());
  if (schema.field_count() == 0) throw Error("init_params: empty schema");

  EncoderParams<T> p;
  p.config = config;
  p.schema = schema;
  const std::size_t d = config.dim;
  const std::size_t f = config.ffn_dim;

  p.field_embeddings.resize(schema.field_count());
  for (std::size_t k = 0; k < schema.field_count(); ++k)
    p.field_embeddings[k].resize(schema.vocab_sizes[k] * d);
  p.mask_tokens.resize(schema.field_count() * d);
  p.positions.resize(config.max_len * d);
  p.layers.resize(config.layers);
  for (auto& lay : p.layers) {
    lay.ln1_gamma.assign(d, T(1));
    lay.ln1_beta.assign(d, T(0));
    lay.wq.resize(d * d);
    lay.bq.assign(d, T(0));
    lay.wk.resize(d * d);
    lay.bk.assign(d, T(0));
    lay.wv.resize(d * d);
    lay.bv.assign(d, T(0));
    lay.wo.resize(d * d);
    lay.bo.assign(d, T(0));
    lay.ln2_gamma.assign(d, T(1));
    lay.ln2_beta.assign(d, T(0));
    lay.w1.resize(d * f);
    lay.b1.assign(f, T(0));
    lay.w2.resize(f * d);
    lay.b2.assign(d, T(0));
  }
  p.final_ln_gamma.assign(d, T(1));
  p.final_ln_beta.assign(d, T(0));

  Rng rng(derive_seed(config.seed, 0x1217u));
  constexpr double kInitScale = 0.02;
  for (auto& table : p.field_embeddings) fill_gaussian(table, rng, kInitScale);
  fill_gaussian(p.mask_tokens, rng, kInitScale);
  fill_gaussian(p.positions, rng, kInitScale);
  for (auto& lay : p.layers) {
    fill_gaussian(lay.wq, rng, kInitScale);
    fill_gaussian(lay.wk, rng, kInitScale);
    fill_gaussian(lay.wv, rng, kInitScale);
    fill_gaussian(lay.wo, rng, kInitScale);
    fill_gaussian(lay.w1, rng, kInitScale);
    fill_gaussian(lay.w2, rng, kInitScale);
  }
  return p;
}

template <class T>
EncoderParams<T> zeros_like(const EncoderParams<T>& params) {
  EncoderParams<T> z = params;
  for_each_tensor(z, [](const std::string&, const std::vector<std::size_t>&,
                        std::vector<T>& v) {
    std::fill(v.begin(), v.end(), T(0));
  });
  return z;
}

MaskSample sample_mask(std::size_t field_count, Rng& rng) {
  if (field_count == 0) throw Error("sample_mask: field count must be >= 1");
  const std::size_t k = 1 + rng.next_index(field_count);
  // Partial Fisher-Yates for a uniform K-subset.
  std::vector<std::size_t> pool(field_count);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.next_index(field_count - i);
    std::swap(pool[i], pool[j]);
  }
  MaskSample sample;
  sample.masked_fields.assign(pool.begin(), pool.begin() + k);
  std::sort(sample.masked_fields.begin(), sample.masked_fields.end());
  return sample;
}

// ---------------------------------------------------------------------------
// Dense kernels
// ---------------------------------------------------------------------------

namespace {

constexpr double kLnEps = 1e-5;

// y[S,N] = x[S,K] * w[K,N] + b
template <class T>
void affine_forward(const T* x, const T* w, const T* b, T* y, std::size_t s_len,
                    std::size_t k_len, std::size_t n_len) {
  for (std::size_t s = 0; s < s_len; ++s) {
    T* ys = y + s * n_len;
    std::copy_n(b, n_len, ys);
    const T* xs = x + s * k_len;
    for (std::size_t k = 0; k < k_len; ++k) {
      const T a = xs[k];
      const T* wk = w + k * n_len;
      for (std::size_t n = 0; n < n_len; ++n) ys[n] += a * wk[n];
    }
  }
}

// dx += dy * w^T; dw += x^T * dy; db += column sums of dy
template <class T>
void affine_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db,
                     std::size_t s_len, std::size_t k_len, std::size_t n_len) {
  for (std::size_t s = 0; s < s_len; ++s) {
    const T* dys = dy + s * n_len;
    const T* xs = x + s * k_len;
    T* dxs = dx + s * k_len;
    for (std::size_t n = 0; n < n_len; ++n) db[n] += dys[n];
    for (std::size_t k = 0; k < k_len; ++k) {
      const T* wk = w + k * n_len;
      T* dwk = dw + k * n_len;
      const T a = xs[k];
      T acc = T(0);
      for (std::size_t n = 0; n < n_len; ++n) {
        acc += dys[n] * wk[n];
        dwk[n] += a * dys[n];
      }
      dxs[k] += acc;
    }
  }
}

template <class T>
void layernorm_forward(const T* x, const T* gamma, const T* beta, T* xhat,
                       T* invstd, T* y, std::size_t s_len, std::size_t d) {
  for (std::size_t s = 0; s < s_len; ++s) {
    const T* xs = x + s * d;
    T mean = T(0);
    for (std::size_t i = 0; i < d; ++i) mean += xs[i];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      const T c = xs[i] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    invstd[s] = inv;
    T* xh = xhat + s * d;
    T* ys = y + s * d;
    for (std::size_t i = 0; i < d; ++i) {
      xh[i] = (xs[i] - mean) * inv;
      ys[i] = gamma[i] * xh[i] + beta[i];
    }
  }
}

// dx += LN'(dy); dgamma/dbeta accumulate
template <class T>
void layernorm_backward(const T* xhat, const T* invstd, const T* gamma,
                        const T* dy, T* dx, T* dgamma, T* dbeta,
                        std::size_t s_len, std::size_t d) {
  std::vector<T> dxhat(d);
  for (std::size_t s = 0; s < s_len; ++s) {
    const T* xh = xhat + s * d;
    const T* dys = dy + s * d;
    T m1 = T(0), m2 = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      dxhat[i] = dys[i] * gamma[i];
      m1 += dxhat[i];
      m2 += dxhat[i] * xh[i];
      dgamma[i] += dys[i] * xh[i];
      dbeta[i] += dys[i];
    }
    m1 /= static_cast<T>(d);
    m2 /= static_cast<T>(d);
    T* dxs = dx + s * d;
    for (std::size_t i = 0; i < d; ++i)
      dxs[i] += invstd[s] * (dxhat[i] - m1 - xh[i] * m2);
  }
}

template <class T>
struct LayerCache {
  std::vector<T> xin;              // S x D residual-stream input
  std::vector<T> xhat1, y1;        // S x D
  std::vector<T> invstd1;          // S
  std::vector<T> q, k, v;          // S x D
  std::vector<T> probs;            // H x S x S
  std::vector<T> ao;               // S x D, heads concatenated, pre-Wo
  std::vector<T> proj;             // S x D, after Wo, pre-dropout
  std::vector<T> drop1;            // S x D
  std::vector<T> xmid;             // S x D, post-attention residual
  std::vector<T> xhat2, y2;        // S x D
  std::vector<T> invstd2;          // S
  std::vector<T> fpre, fact;       // S x F
  std::vector<T> fout;             // S x D, pre-dropout
  std::vector<T> drop2;            // S x D
};

template <class T>
struct ForwardCache {
  std::size_t seq = 0;
  std::vector<T> x0;      // S x D post-dropout inputs
  std::vector<T> drop0;   // S x D
  std::vector<LayerCache<T>> layers;
  std::vector<T> xhatf, yfinal;  // S x D
  std::vector<T> invstdf;        // S
};

struct DropoutCtx {
  double rate = 0.0;
  std::uint64_t seed = 0;
  bool active = false;
};

template <class T>
void fill_dropout(std::vector<T>& factors, Rng& rng, double rate) {
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& f : factors)
    f = rng.next_double() < rate ? T(0) : keep;
}

template <class T>
void attention_forward(const EncoderParams<T>& p, LayerCache<T>& c,
                       std::size_t s_len) {
  const std::size_t d = p.config.dim;
  const std::size_t heads = p.config.heads;
  const std::size_t dh = d / heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  c.probs.assign(heads * s_len * s_len, T(0));
  c.ao.assign(s_len * d, T(0));
  std::vector<T> scores(s_len);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t s = 0; s < s_len; ++s) {
      const T* qs = c.q.data() + s * d + off;
      T maxv = -std::numeric_limits<T>::infinity();
      for (std::size_t t = 0; t < s_len; ++t) {
        const T* kt = c.k.data() + t * d + off;
        T acc = T(0);
        for (std::size_t i = 0; i < dh; ++i) acc += qs[i] * kt[i];
        scores[t] = acc * inv_sqrt;
        maxv = std::max(maxv, scores[t]);
      }
      T denom = T(0);
      T* ps = c.probs.data() + (h * s_len + s) * s_len;
      for (std::size_t t = 0; t < s_len; ++t) {
        ps[t] = std::exp(scores[t] - maxv);
        denom += ps[t];
      }
      for (std::size_t t = 0; t < s_len; ++t) ps[t] /= denom;
      T* aos = c.ao.data() + s * d + off;
      for (std::size_t t = 0; t < s_len; ++t) {
        const T* vt = c.v.data() + t * d + off;
        const T w = ps[t];
        for (std::size_t i = 0; i < dh; ++i) aos[i] += w * vt[i];
      }
    }
  }
}

template <class T>
void attention_backward(const EncoderParams<T>& p, const LayerCache<T>& c,
                        const T* dao, T* dq, T* dk, T* dv, std::size_t s_len) {
  const std::size_t d = p.config.dim;
  const std::size_t heads = p.config.heads;
  const std::size_t dh = d / heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  std::vector<T> dprobs(s_len);
  std::vector<T> dscores(s_len);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t s = 0; s < s_len; ++s) {
      const T* daos = dao + s * d + off;
      const T* ps = c.probs.data() + (h * s_len + s) * s_len;
      T inner = T(0);
      for (std::size_t t = 0; t < s_len; ++t) {
        const T* vt = c.v.data() + t * d + off;
        T acc = T(0);
        for (std::size_t i = 0; i < dh; ++i) acc += daos[i] * vt[i];
        dprobs[t] = acc;
        inner += ps[t] * acc;
        T* dvt = dv + t * d + off;
        for (std::size_t i = 0; i < dh; ++i) dvt[i] += ps[t] * daos[i];
      }
      for (std::size_t t = 0; t < s_len; ++t)
        dscores[t] = ps[t] * (dprobs[t] - inner);
      T* dqs = dq + s * d + off;
      const T* qs = c.q.data() + s * d + off;
      for (std::size_t t = 0; t < s_len; ++t) {
        const T g = dscores[t] * inv_sqrt;
        const T* kt = c.k.data() + t * d + off;
        T* dkt = dk + t * d + off;
        for (std::size_t i = 0; i < dh; ++i) {
          dqs[i] += g * kt[i];
          dkt[i] += g * qs[i];
        }
      }
    }
  }
}

/// Input tokens, encoder stack, final layer norm.
template <class T>
void forward_window(const ItemTable& items, const BatchWindow& w,
                    const MaskSample& mask, const EncoderParams<T>& p,
                    const DropoutCtx& drop, ForwardCache<T>& fc) {
  const std::size_t d = p.config.dim;
  const std::size_t f = p.config.ffn_dim;
  const std::size_t s_len = w.history.size() + 1;
  if (w.history.empty()) throw Error("window has no history items");
  if (s_len > p.config.max_len)
    throw Error("window length exceeds max_len");
  fc.seq = s_len;

  Rng drop_rng(drop.seed);
  const bool dropping = drop.active && drop.rate > 0.0;

  fc.x0.assign(s_len * d, T(0));
  for (std::size_t s = 0; s < s_len; ++s) {
    const bool is_target = (s + 1 == s_len);
    const std::int32_t item = is_target
                                  ? w.target
                                  : w.history[s];
    T* xs = fc.x0.data() + s * d;
    const T* pos = p.positions.data() + s * d;
    std::copy_n(pos, d, xs);
    for (std::size_t k = 0; k < p.schema.field_count(); ++k) {
      const T* e;
      if (is_target && mask.contains(k)) {
        e = p.mask_tokens.data() + k * d;
      } else {
        const std::int32_t value =
            items.field_value(static_cast<std::size_t>(item), k);
        if (value < 0 ||
            static_cast<std::size_t>(value) >= p.schema.vocab_sizes[k])
          throw Error("field value out of vocabulary");
        e = p.field_embeddings[k].data() +
            static_cast<std::size_t>(value) * d;
      }
      for (std::size_t i = 0; i < d; ++i) xs[i] += e[i];
    }
  }
  if (dropping) {
    fc.drop0.resize(s_len * d);
    fill_dropout(fc.drop0, drop_rng, drop.rate);
    for (std::size_t i = 0; i < s_len * d; ++i) fc.x0[i] *= fc.drop0[i];
  } else {
    fc.drop0.clear();
  }

  fc.layers.resize(p.config.layers);
  std::vector<T> x = fc.x0;
  for (std::size_t l = 0; l < p.config.layers; ++l) {
    auto& c = fc.layers[l];
    const auto& lay = p.layers[l];
    c.xin = x;
    c.xhat1.resize(s_len * d);
    c.invstd1.resize(s_len);
    c.y1.resize(s_len * d);
    layernorm_forward(c.xin.data(), lay.ln1_gamma.data(), lay.ln1_beta.data(),
                      c.xhat1.data(), c.invstd1.data(), c.y1.data(), s_len, d);
    c.q.resize(s_len * d);
    c.k.resize(s_len * d);
    c.v.resize(s_len * d);
    affine_forward(c.y1.data(), lay.wq.data(), lay.bq.data(), c.q.data(),
                   s_len, d, d);
    affine_forward(c.y1.data(), lay.wk.data(), lay.bk.data(), c.k.data(),
                   s_len, d, d);
    affine_forward(c.y1.data(), lay.wv.data(), lay.bv.data(), c.v.data(),
                   s_len, d, d);
    attention_forward(p, c, s_len);
    c.proj.resize(s_len * d);
    affine_forward(c.ao.data(), lay.wo.data(), lay.bo.data(), c.proj.data(),
                   s_len, d, d);
    if (dropping) {
      c.drop1.resize(s_len * d);
      fill_dropout(c.drop1, drop_rng, drop.rate);
    }
    c.xmid.resize(s_len * d);
    for (std::size_t i = 0; i < s_len * d; ++i) {
      const T o = dropping ? c.proj[i] * c.drop1[i] : c.proj[i];
      c.xmid[i] = c.xin[i] + o;
    }
    c.xhat2.resize(s_len * d);
    c.invstd2.resize(s_len);
    c.y2.resize(s_len * d);
    layernorm_forward(c.xmid.data(), lay.ln2_gamma.data(), lay.ln2_beta.data(),
                      c.xhat2.data(), c.invstd2.data(), c.y2.data(), s_len, d);
    c.fpre.resize(s_len * f);
    affine_forward(c.y2.data(), lay.w1.data(), lay.b1.data(), c.fpre.data(),
                   s_len, d, f);
    c.fact = c.fpre;
    for (auto& v : c.fact) v = std::max(v, T(0));
    c.fout.resize(s_len * d);
    affine_forward(c.fact.data(), lay.w2.data(), lay.b2.data(), c.fout.data(),
                   s_len, f, d);
    if (dropping) {
      c.drop2.resize(s_len * d);
      fill_dropout(c.drop2, drop_rng, drop.rate);
    }
    x.resize(s_len * d);
    for (std::size_t i = 0; i < s_len * d; ++i) {
      const T o = dropping ? c.fout[i] * c.drop2[i] : c.fout[i];
      x[i] = c.xmid[i] + o;
    }
  }

  fc.xhatf.resize(s_len * d);
  fc.invstdf.resize(s_len);
  fc.yfinal.resize(s_len * d);
  layernorm_forward(x.data(), p.final_ln_gamma.data(), p.final_ln_beta.data(),
                    fc.xhatf.data(), fc.invstdf.data(), fc.yfinal.data(),
                    s_len, d);
}

template <class T>
void backward_window(const ItemTable& items, const BatchWindow& w,
                     const MaskSample& mask, const EncoderParams<T>& p,
                     const ForwardCache<T>& fc, const std::vector<T>& dh,
                     EncoderParams<T>& grads) {
  const std::size_t d = p.config.dim;
  const std::size_t f = p.config.ffn_dim;
  const std::size_t s_len = fc.seq;
  const bool dropping = !fc.drop0.empty();

  // d(final LN output): zero except at the target position.
  std::vector<T> dy(s_len * d, T(0));
  std::copy_n(dh.data(), d, dy.data() + (s_len - 1) * d);

  std::vector<T> dx(s_len * d, T(0));
  layernorm_backward(fc.xhatf.data(), fc.invstdf.data(),
                     p.final_ln_gamma.data(), dy.data(), dx.data(),
                     grads.final_ln_gamma.data(), grads.final_ln_beta.data(),
                     s_len, d);

  std::vector<T> dxmid(s_len * d), dy2(s_len * d), dfpre(s_len * f);
  std::vector<T> dfact(s_len * f), dfout(s_len * d), dproj(s_len * d);
  std::vector<T> dao(s_len * d), dq(s_len * d), dk(s_len * d), dv(s_len * d);
  std::vector<T> dy1(s_len * d), dxin(s_len * d);

  for (std::size_t l = p.config.layers; l-- > 0;) {
    const auto& c = fc.layers[l];
    const auto& lay = p.layers[l];
    auto& glay = grads.layers[l];

    // FFN branch.
    for (std::size_t i = 0; i < s_len * d; ++i)
      dfout[i] = dropping ? dx[i] * c.drop2[i] : dx[i];
    std::fill(dfact.begin(), dfact.end(), T(0));
    affine_backward(c.fact.data(), lay.w2.data(), dfout.data(), dfact.data(),
                    glay.w2.data(), glay.b2.data(), s_len, f, d);
    for (std::size_t i = 0; i < s_len * f; ++i)
      dfpre[i] = c.fpre[i] > T(0) ? dfact[i] : T(0);
    std::fill(dy2.begin(), dy2.end(), T(0));
    affine_backward(c.y2.data(), lay.w1.data(), dfpre.data(), dy2.data(),
                    glay.w1.data(), glay.b1.data(), s_len, d, f);
    dxmid = dx;  // residual path
    layernorm_backward(c.xhat2.data(), c.invstd2.data(), lay.ln2_gamma.data(),
                       dy2.data(), dxmid.data(), glay.ln2_gamma.data(),
                       glay.ln2_beta.data(), s_len, d);

    // Attention branch.
    for (std::size_t i = 0; i < s_len * d; ++i)
      dproj[i] = dropping ? dxmid[i] * c.drop1[i] : dxmid[i];
    std::fill(dao.begin(), dao.end(), T(0));
    affine_backward(c.ao.data(), lay.wo.data(), dproj.data(), dao.data(),
                    glay.wo.data(), glay.bo.data(), s_len, d, d);
    std::fill(dq.begin(), dq.end(), T(0));
    std::fill(dk.begin(), dk.end(), T(0));
    std::fill(dv.begin(), dv.end(), T(0));
    attention_backward(p, c, dao.data(), dq.data(), dk.data(), dv.data(),
                       s_len);
    std::fill(dy1.begin(), dy1.end(), T(0));
    affine_backward(c.y1.data(), lay.wq.data(), dq.data(), dy1.data(),
                    glay.wq.data(), glay.bq.data(), s_len, d, d);
    affine_backward(c.y1.data(), lay.wk.data(), dk.data(), dy1.data(),
                    glay.wk.data(), glay.bk.data(), s_len, d, d);
    affine_backward(c.y1.data(), lay.wv.data(), dv.data(), dy1.data(),
                    glay.wv.data(), glay.bv.data(), s_len, d, d);
    dxin = dxmid;  // residual path
    layernorm_backward(c.xhat1.data(), c.invstd1.data(), lay.ln1_gamma.data(),
                       dy1.data(), dxin.data(), glay.ln1_gamma.data(),
                       glay.ln1_beta.data(), s_len, d);
    dx = dxin;
  }

  // Embedding sum: position + per-field tables / mask tokens.
  for (std::size_t s = 0; s < s_len; ++s) {
    const bool is_target = (s + 1 == s_len);
    const std::int32_t item = is_target ? w.target : w.history[s];
    const T* dxs = dx.data() + s * d;
    std::vector<T> g(d);
    for (std::size_t i = 0; i < d; ++i)
      g[i] = dropping ? dxs[i] * fc.drop0[s * d + i] : dxs[i];
    T* dpos = grads.positions.data() + s * d;
    for (std::size_t i = 0; i < d; ++i) dpos[i] += g[i];
    for (std::size_t k = 0; k < p.schema.field_count(); ++k) {
      T* dst;
      if (is_target && mask.contains(k)) {
        dst = grads.mask_tokens.data() + k * d;
      } else {
        const std::int32_t value =
            items.field_value(static_cast<std::size_t>(item), k);
        dst = grads.field_embeddings[k].data() +
              static_cast<std::size_t>(value) * d;
      }
      for (std::size_t i = 0; i < d; ++i) dst[i] += g[i];
    }
  }
}

/// Softmax over sqrt(D)*cos(h, E_k[c]) for candidates; accumulates dh and
/// row gradients when grads != nullptr. Returns the negative log-likelihood
/// of candidate 0 (the target).
template <class T>
T cosine_softmax_nll(const EncoderParams<T>& p, std::size_t field,
                     std::span<const T> h,
                     std::span<const std::int32_t> candidates, T scale,
                     std::vector<T>* dh, EncoderParams<T>* grads) {
  const std::size_t d = p.config.dim;
  const T sqrt_d = static_cast<T>(std::sqrt(static_cast<double>(d)));
  T h_norm_sq = T(0);
  for (std::size_t i = 0; i < d; ++i) h_norm_sq += h[i] * h[i];
  const T h_norm = std::sqrt(h_norm_sq);
  if (h_norm == T(0))
    throw Error("predictive distribution: zero-norm hidden state");

  const std::size_t n = candidates.size();
  std::vector<T> cosines(n), norms(n), logits(n);
  T maxv = -std::numeric_limits<T>::infinity();
  for (std::size_t c = 0; c < n; ++c) {
    const T* e = p.field_embeddings[field].data() +
                 static_cast<std::size_t>(candidates[c]) * d;
    T dot = T(0), nrm = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      dot += h[i] * e[i];
      nrm += e[i] * e[i];
    }
    norms[c] = std::sqrt(nrm);
    if (norms[c] == T(0))
      throw Error("predictive distribution: zero-norm embedding row " +
                  std::to_string(candidates[c]) + " in field " +
                  std::to_string(field));
    cosines[c] = dot / (h_norm * norms[c]);
    logits[c] = sqrt_d * cosines[c];
    maxv = std::max(maxv, logits[c]);
  }
  T denom = T(0);
  std::vector<T> probs(n);
  for (std::size_t c = 0; c < n; ++c) {
    probs[c] = std::exp(logits[c] - maxv);
    denom += probs[c];
  }
  for (std::size_t c = 0; c < n; ++c) probs[c] /= denom;
  const T nll = -std::log(probs[0]);

  if (grads != nullptr && dh != nullptr) {
    for (std::size_t c = 0; c < n; ++c) {
      const T dlogit = scale * (probs[c] - (c == 0 ? T(1) : T(0)));
      if (dlogit == T(0)) continue;
      const T dcos = sqrt_d * dlogit;
      const T* e = p.field_embeddings[field].data() +
                   static_cast<std::size_t>(candidates[c]) * d;
      T* de = grads->field_embeddings[field].data() +
              static_cast<std::size_t>(candidates[c]) * d;
      const T inv_he = T(1) / (h_norm * norms[c]);
      const T inv_h2 = cosines[c] / (h_norm * h_norm);
      const T inv_e2 = cosines[c] / (norms[c] * norms[c]);
      for (std::size_t i = 0; i < d; ++i) {
        (*dh)[i] += dcos * (e[i] * inv_he - h[i] * inv_h2);
        de[i] += dcos * (h[i] * inv_he - e[i] * inv_e2);
      }
    }
  }
  return nll;
}

/// Pre-drawn per-window randomness so batch evaluation can run on any
/// thread count with identical results.
struct WorkItem {
  MaskSample mask;
  // Per masked field: explicit candidates (target first), or empty for the
  // full softmax.
  std::vector<std::vector<std::int32_t>> candidates;
  std::uint64_t dropout_seed = 0;
};

template <class T>
double loss_on_batch(const ItemTable& items, std::span<const BatchWindow> batch,
                     const std::vector<WorkItem>& work,
                     const EncoderParams<T>& params, EncoderParams<T>* grads,
                     const LossOptions& opts, bool dropout_active) {
  const std::size_t batch_size = batch.size();
  const int threads = resolve_threads(opts.threads);
  const std::size_t chunks =
      std::min<std::size_t>(static_cast<std::size_t>(threads), batch_size);

  std::vector<double> chunk_loss(chunks, 0.0);
  std::vector<EncoderParams<T>> chunk_grads;
  if (grads != nullptr && chunks > 1) {
    chunk_grads.reserve(chunks - 1);
    for (std::size_t c = 1; c < chunks; ++c)
      chunk_grads.push_back(zeros_like(params));
  }
  std::vector<std::exception_ptr> errors(chunks);
  std::atomic<std::ptrdiff_t> bad_window{-1};

  const std::size_t chunk_len = (batch_size + chunks - 1) / chunks;
  parallel_for(chunks, threads, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t c = c0; c < c1; ++c) {
      const std::size_t begin = c * chunk_len;
      const std::size_t end = std::min(batch_size, begin + chunk_len);
      EncoderParams<T>* g =
          grads == nullptr ? nullptr : (c == 0 ? grads : &chunk_grads[c - 1]);
      try {
        ForwardCache<T> fc;
        for (std::size_t w = begin; w < end; ++w) {
          const WorkItem& item = work[w];
          DropoutCtx drop{params.config.dropout, item.dropout_seed,
                          dropout_active};
          forward_window(items, batch[w], item.mask, params, drop, fc);
          std::span<const T> h{fc.yfinal.data() + (fc.seq - 1) *
                                   params.config.dim,
                               params.config.dim};
          std::vector<T> dh(params.config.dim, T(0));
          double window_loss = 0.0;
          for (std::size_t m = 0; m < item.mask.masked_fields.size(); ++m) {
            const std::size_t field = item.mask.masked_fields[m];
            const double alpha = params.config.field_weight(field);
            if (alpha == 0.0) continue;
            const std::int32_t target_value = items.field_value(
                static_cast<std::size_t>(batch[w].target), field);
            const auto& cand = item.candidates[m];
            const T scale =
                static_cast<T>(alpha / static_cast<double>(batch_size));
            T nll;
            if (cand.empty()) {
              std::vector<std::int32_t> full(params.schema.vocab_sizes[field]);
              full[0] = target_value;
              std::int32_t fill = 0;
              for (std::size_t i = 1; i < full.size(); ++i) {
                if (fill == target_value) ++fill;
                full[i] = fill++;
              }
              nll = cosine_softmax_nll(params, field, h, full, scale, &dh, g);
            } else {
              nll = cosine_softmax_nll(params, field, h, cand, scale, &dh, g);
            }
            window_loss += alpha * static_cast<double>(nll);
          }
          if (!std::isfinite(window_loss)) {
            std::ptrdiff_t expected = -1;
            bad_window.compare_exchange_strong(
                expected, static_cast<std::ptrdiff_t>(w));
          }
          chunk_loss[c] += window_loss;
          if (g != nullptr)
            backward_window(items, batch[w], item.mask, params, fc, dh, *g);
        }
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  });

  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  if (bad_window.load() >= 0) {
    opts.bad_window = bad_window.load();
    throw Error("non-finite loss in window #" +
                std::to_string(bad_window.load()));
  }

  if (grads != nullptr) {
    for (auto& cg : chunk_grads) {
      auto dst = std::vector<std::vector<T>*>{};
      for_each_tensor(*grads, [&](const std::string&,
                                  const std::vector<std::size_t>&,
                                  std::vector<T>& v) { dst.push_back(&v); });
      std::size_t idx = 0;
      for_each_tensor(cg, [&](const std::string&,
                              const std::vector<std::size_t>&,
                              std::vector<T>& v) {
        auto& out = *dst[idx++];
        for (std::size_t i = 0; i < v.size(); ++i) out[i] += v[i];
      });
    }
  }
  double total = 0.0;
  for (const double l : chunk_loss) total += l;
  return total / static_cast<double>(batch_size);
}

template <class T>
std::vector<WorkItem> make_work_items(const ItemTable& items,
                                      std::span<const BatchWindow> batch,
                                      std::span<const MaskSample> masks,
                                      const EncoderParams<T>& params,
                                      const LossOptions& opts) {
  std::vector<WorkItem> work(batch.size());
  for (std::size_t w = 0; w < batch.size(); ++w) {
    work[w].mask = masks[w];
    work[w].candidates.resize(masks[w].masked_fields.size());
    for (std::size_t m = 0; m < masks[w].masked_fields.size(); ++m) {
      const std::size_t field = masks[w].masked_fields[m];
      const std::size_t vocab = params.schema.vocab_sizes[field];
      const bool full = opts.negative_rng == nullptr ||
                        params.config.negatives == 0 ||
                        vocab <= params.config.full_softmax_limit ||
                        params.config.negatives + 1 >= vocab;
      if (!full) {
        const std::int32_t target_value = items.field_value(
            static_cast<std::size_t>(batch[w].target), field);
        auto negs = sample_negatives(vocab, target_value,
                                     params.config.negatives,
                                     *opts.negative_rng);
        auto& cand = work[w].candidates[m];
        cand.reserve(negs.size() + 1);
        cand.push_back(target_value);
        cand.insert(cand.end(), negs.begin(), negs.end());
      }
    }
    if (opts.dropout_rng != nullptr)
      work[w].dropout_seed = opts.dropout_rng->next_u64();
  }
  return work;
}

}  // namespace

template <class T>
std::vector<T> build_target_input(std::span<const std::int32_t> item_fields,
                                  const MaskSample& mask,
                                  const EncoderParams<T>& params,
                                  std::size_t position) {
  const std::size_t d = params.config.dim;
  if (position >= params.config.max_len)
    throw Error("position exceeds max_len");
  if (item_fields.size() != params.schema.field_count())
    throw Error("field vector length mismatch");
  std::vector<T> out(params.positions.begin() + position * d,
                     params.positions.begin() + (position + 1) * d);
  for (std::size_t k = 0; k < item_fields.size(); ++k) {
    const T* e;
    if (mask.contains(k)) {
      e = params.mask_tokens.data() + k * d;
    } else {
      const std::int32_t value = item_fields[k];
      if (value < 0 ||
          static_cast<std::size_t>(value) >= params.schema.vocab_sizes[k])
        throw Error("field value out of vocabulary");
      e = params.field_embeddings[k].data() + static_cast<std::size_t>(value) * d;
    }
    for (std::size_t i = 0; i < d; ++i) out[i] += e[i];
  }
  return out;
}

template <class T>
std::vector<T> predictive_distribution(const EncoderParams<T>& params,
                                       std::size_t field,
                                       std::span<const T> hidden,
                                       std::span<const std::int32_t> candidates) {
  const std::size_t d = params.config.dim;
  const T sqrt_d = static_cast<T>(std::sqrt(static_cast<double>(d)));
  T h_norm = T(0);
  for (std::size_t i = 0; i < d; ++i) h_norm += hidden[i] * hidden[i];
  h_norm = std::sqrt(h_norm);
  if (h_norm == T(0))
    throw Error("predictive distribution: zero-norm hidden state");

  std::vector<T> logits(candidates.size());
  T maxv = -std::numeric_limits<T>::infinity();
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const T* e = params.field_embeddings[field].data() +
                 static_cast<std::size_t>(candidates[c]) * d;
    T dot = T(0), nrm = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      dot += hidden[i] * e[i];
      nrm += e[i] * e[i];
    }
    nrm = std::sqrt(nrm);
    if (nrm == T(0))
      throw Error("predictive distribution: zero-norm embedding row " +
                  std::to_string(candidates[c]) + " in field " +
                  std::to_string(field));
    logits[c] = sqrt_d * dot / (h_norm * nrm);
    maxv = std::max(maxv, logits[c]);
  }
  std::vector<T> probs(candidates.size());
  T denom = T(0);
  for (std::size_t c = 0; c < probs.size(); ++c) {
    probs[c] = std::exp(logits[c] - maxv);
    denom += probs[c];
  }
  for (auto& v : probs) v /= denom;
  return probs;
}

template <class T>
std::vector<T> predictive_distribution(const EncoderParams<T>& params,
                                       std::size_t field,
                                       std::span<const T> hidden) {
  if (field >= params.schema.field_count())
    throw Error("predictive distribution: field out of range");
  std::vector<std::int32_t> all(params.schema.vocab_sizes[field]);
  std::iota(all.begin(), all.end(), 0);
  return predictive_distribution(params, field, hidden,
                                 std::span<const std::int32_t>(all));
}

std::vector<std::int32_t> sample_negatives(std::size_t vocab,
                                           std::int32_t target,
                                           std::size_t count, Rng& rng) {
  if (vocab < 2) throw Error("sample_negatives: vocabulary too small");
  count = std::min(count, vocab - 1);
  std::unordered_set<std::int32_t> seen;
  std::vector<std::int32_t> out;
  out.reserve(count);
  while (out.size() < count) {
    // Uniform over [0, vocab) \ {target}.
    std::int32_t v = static_cast<std::int32_t>(rng.next_index(vocab - 1));
    if (v >= target) ++v;
    if (seen.insert(v).second) out.push_back(v);
  }
  return out;
}

template <class T>
double famae_loss(const ItemTable& items, std::span<const BatchWindow> batch,
                  std::span<const MaskSample> masks,
                  const EncoderParams<T>& params,
                  std::type_identity_t<EncoderParams<T>>* grads,
                  const LossOptions& opts) {
  if (batch.empty()) throw Error("famae_loss: empty batch");
  if (masks.size() != batch.size())
    throw Error("famae_loss: one mask per window required");
  const auto work = make_work_items(items, batch, masks, params, opts);
  return loss_on_batch(items, batch, work, params, grads, opts,
                       opts.dropout_rng != nullptr);
}

template <class T>
double famae_loss(const ItemTable& items, std::span<const BatchWindow> batch,
                  const EncoderParams<T>& params,
                  std::type_identity_t<EncoderParams<T>>* grads, Rng& rng,
                  const LossOptions& opts) {
  std::vector<MaskSample> masks(batch.size());
  for (auto& m : masks) m = sample_mask(params.schema.field_count(), rng);
  return famae_loss(items, batch, std::span<const MaskSample>(masks), params,
                    grads, opts);
}

template <class T>
std::vector<T> encode_target_hidden(const ItemTable& items,
                                    const BatchWindow& window,
                                    const MaskSample& mask,
                                    const EncoderParams<T>& params) {
  ForwardCache<T> fc;
  DropoutCtx drop{};
  forward_window(items, window, mask, params, drop, fc);
  const std::size_t d = params.config.dim;
  return {fc.yfinal.begin() + (fc.seq - 1) * d,
          fc.yfinal.begin() + fc.seq * d};
}

namespace {

double recall_at_k(const ItemTable& items, const WindowSet& eval,
                   const EncoderParameters& params, std::size_t k, int threads,
                   bool mask_all_fields) {
  if (eval.count() == 0) throw Error("metric: empty eval split");
  const std::size_t j = params.schema.field_count();
  if (items.schema.field_count() != j ||
      items.schema.vocab_sizes != params.schema.vocab_sizes)
    throw Error("metric: item table and parameters disagree on the schema");
  MaskSample mask;
  if (mask_all_fields) {
    mask.masked_fields.resize(j);
    std::iota(mask.masked_fields.begin(), mask.masked_fields.end(), 0);
  } else {
    mask.masked_fields = {0};
  }

  const std::size_t d = params.config.dim;
  const std::size_t vocab = params.schema.vocab_sizes[0];
  const auto& table = params.field_embeddings[0];
  std::vector<float> row_norms(vocab);
  for (std::size_t v = 0; v < vocab; ++v) {
    float s = 0.0f;
    for (std::size_t i = 0; i < d; ++i)
      s += table[v * d + i] * table[v * d + i];
    row_norms[v] = std::sqrt(s);
  }

  std::atomic<std::size_t> hits{0};
  std::vector<std::exception_ptr> errors(
      static_cast<std::size_t>(resolve_threads(threads)));
  std::atomic<std::size_t> error_slot{0};
  parallel_for(eval.count(), threads, [&](std::size_t lo, std::size_t hi) {
    try {
      std::size_t local_hits = 0;
      for (std::size_t w = lo; w < hi; ++w) {
        BatchWindow bw{eval.history_of(w), eval.targets[w]};
        const auto h = encode_target_hidden(items, bw, mask, params);
        float h_norm = 0.0f;
        for (std::size_t i = 0; i < d; ++i) h_norm += h[i] * h[i];
        h_norm = std::sqrt(h_norm);
        // Rank the item-ID vocabulary by cosine; lower index wins ties.
        const std::size_t target =
            static_cast<std::size_t>(items.field_value(
                static_cast<std::size_t>(eval.targets[w]), 0));
        auto score = [&](std::size_t v) -> float {
          if (h_norm == 0.0f || row_norms[v] == 0.0f) return 0.0f;
          float dot = 0.0f;
          for (std::size_t i = 0; i < d; ++i) dot += h[i] * table[v * d + i];
          return dot / (h_norm * row_norms[v]);
        };
        const float target_score = score(target);
        std::size_t rank = 0;
        for (std::size_t v = 0; v < vocab && rank < k; ++v) {
          if (v == target) continue;
          const float s = score(v);
          if (s > target_score || (s == target_score && v < target)) ++rank;
        }
        if (rank < k) ++local_hits;
      }
      hits += local_hits;
    } catch (...) {
      errors[error_slot++ % errors.size()] = std::current_exception();
    }
  });
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return static_cast<double>(hits.load()) /
         static_cast<double>(eval.count());
}

}  // namespace

double metric_collaborative(const ItemTable& items, const WindowSet& eval,
                            const EncoderParameters& params, std::size_t k,
                            int threads) {
  return recall_at_k(items, eval, params, k, threads, /*mask_all_fields=*/true);
}

double metric_discriminative(const ItemTable& items, const WindowSet& eval,
                             const EncoderParameters& params, std::size_t k,
                             int threads) {
  return recall_at_k(items, eval, params, k, threads,
                     /*mask_all_fields=*/false);
}

EmbeddingMatrix extract_item_representations(const EncoderParameters& params,
                                             const ItemTable& items) {
  const std::size_t j = params.schema.field_count();
  const std::size_t d = params.config.dim;
  if (items.schema.field_count() != j)
    throw Error("extract: item table and parameters disagree on field count");
  for (std::size_t k = 0; k < j; ++k)
    if (items.schema.vocab_sizes[k] != params.schema.vocab_sizes[k])
      throw Error("extract: vocabulary of field " + std::to_string(k) +
                  " has " + std::to_string(items.schema.vocab_sizes[k]) +
                  " tokens, checkpoint expects " +
                  std::to_string(params.schema.vocab_sizes[k]));

  EmbeddingMatrix m;
  m.rows = items.item_count;
  m.dim = j * d;
  m.values.resize(m.rows * m.dim);
  m.row_tokens.resize(m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    m.row_tokens[i] = items.item_token(i);
    float* row = m.values.data() + i * m.dim;
    for (std::size_t k = 0; k < j; ++k) {
      const std::int32_t value = items.field_value(i, k);
      const float* e = params.field_embeddings[k].data() +
                       static_cast<std::size_t>(value) * d;
      std::copy_n(e, d, row + k * d);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<float>*> tensor_list(EncoderParameters& p) {
  std::vector<std::vector<float>*> out;
  for_each_tensor(p, [&](const std::string&, const std::vector<std::size_t>&,
                         std::vector<float>& v) { out.push_back(&v); });
  return out;
}

std::vector<BatchWindow> to_batch(const WindowSet& windows,
                                  std::span<const std::size_t> ids) {
  std::vector<BatchWindow> out;
  out.reserve(ids.size());
  for (const std::size_t id : ids)
    out.push_back({windows.history_of(id), windows.targets[id]});
  return out;
}

}  // namespace

TrainResult train(const ItemTable& items, const SequenceStore& sequences,
                  const ModelConfig& config, const TrainConfig& tc) {
  config.validate(items.schema.field_count());
  if (sequences.sequences.empty()) throw Error("train: no sequences");
  if (tc.batch_size == 0) throw Error("train: batch_size must be >= 1");

  SplitWindows split;
  if (tc.holdout) {
    split = leave_one_out_split(sequences, tc.stride);
  } else {
    split.train = enumerate_windows(sequences, tc.stride);
  }
  if (split.train.count() == 0 && tc.epochs > 0)
    throw Error("train: no training windows (sequences too short?)");

  TrainResult result;
  result.params = init_params<float>(config, items.schema);

  auto params_ptrs = tensor_list(result.params);
  EncoderParameters grads = zeros_like(result.params);
  EncoderParameters adam_m = zeros_like(result.params);
  EncoderParameters adam_v = zeros_like(result.params);
  auto grads_ptrs = tensor_list(grads);
  auto m_ptrs = tensor_list(adam_m);
  auto v_ptrs = tensor_list(adam_v);

  const std::size_t n_train = split.train.count();
  const std::size_t batches_per_epoch =
      (n_train + tc.batch_size - 1) / tc.batch_size;
  const std::size_t total_steps = std::max<std::size_t>(
      1, tc.epochs * batches_per_epoch);

  EncoderParameters best = result.params;
  double best_metric = -1.0;
  std::size_t best_epoch = 0;
  std::size_t stale_evals = 0;
  std::size_t step = 0;

  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    EncoderParameters epoch_start = result.params;
    Rng epoch_rng(derive_seed(config.seed, 0xE70C5ull, epoch));

    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n_train; i > 1; --i) {
      const std::size_t j = epoch_rng.next_index(i);
      std::swap(order[i - 1], order[j]);
    }

    double epoch_loss = 0.0;
    double current_lr = tc.lr;
    bool diverged = false;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t begin = b * tc.batch_size;
      const std::size_t end = std::min(n_train, begin + tc.batch_size);
      const auto batch = to_batch(
          split.train, std::span<const std::size_t>(order.data() + begin,
                                                    end - begin));
      current_lr =
          tc.lr * 0.5 *
          (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                          static_cast<double>(total_steps)));

      for (auto* g : grads_ptrs) std::fill(g->begin(), g->end(), 0.0f);
      LossOptions opts;
      opts.dropout_rng = config.dropout > 0.0 ? &epoch_rng : nullptr;
      opts.negative_rng = &epoch_rng;
      opts.threads = tc.threads;
      double loss;
      try {
        loss = famae_loss(items, std::span<const BatchWindow>(batch),
                          result.params, &grads, epoch_rng, opts);
      } catch (const Error& e) {
        if (opts.bad_window >= 0) {
          result.diverged = true;
          result.divergence_note = e.what();
          result.params = best_epoch > 0 ? best : epoch_start;
          diverged = true;
          break;
        }
        throw;
      }
      epoch_loss += loss * static_cast<double>(batch.size());

      ++step;
      const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      for (std::size_t t = 0; t < params_ptrs.size(); ++t) {
        auto& pv = *params_ptrs[t];
        auto& gv = *grads_ptrs[t];
        auto& mv = *m_ptrs[t];
        auto& vv = *v_ptrs[t];
        for (std::size_t i = 0; i < pv.size(); ++i) {
          const double g = gv[i];
          mv[i] = static_cast<float>(kBeta1 * mv[i] + (1.0 - kBeta1) * g);
          vv[i] = static_cast<float>(kBeta2 * vv[i] + (1.0 - kBeta2) * g * g);
          const double mhat = mv[i] / bc1;
          const double vhat = vv[i] / bc2;
          pv[i] = static_cast<float>(
              pv[i] - current_lr * (mhat / (std::sqrt(vhat) + kAdamEps) +
                                    tc.weight_decay * pv[i]));
        }
      }
    }
    if (diverged) break;

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = epoch_loss / static_cast<double>(n_train);
    stats.lr = current_lr;
    if (split.valid.count() > 0) {
      stats.metric1 = metric_collaborative(items, split.valid, result.params,
                                           tc.eval_k, tc.threads);
      stats.metric2 = metric_discriminative(items, split.valid, result.params,
                                            tc.eval_k, tc.threads);
    }
    result.history.push_back(stats);

    if (split.valid.count() > 0) {
      if (stats.metric1 > best_metric) {
        best_metric = stats.metric1;
        best = result.params;
        best_epoch = epoch;
        stale_evals = 0;
      } else {
        ++stale_evals;
        if (stale_evals >= tc.patience) break;
      }
    }
  }

  if (!result.diverged && best_epoch > 0) {
    result.params = best;
    result.best_epoch = best_epoch;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'R', 'S', 'I', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v & 0xffffffffu));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw Error("truncated checkpoint reading " + what);
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& in, const std::string& what) {
  const std::uint64_t lo = get_u32(in, what);
  const std::uint64_t hi = get_u32(in, what);
  return lo | (hi << 32);
}

}  // namespace

void save_checkpoint(const EncoderParameters& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path);

  nlohmann::json manifest;
  manifest["config"] = {
      {"dim", params.config.dim},
      {"layers", params.config.layers},
      {"heads", params.config.heads},
      {"ffn_dim", params.config.ffn_dim},
      {"dropout", params.config.dropout},
      {"field_weights", params.config.field_weights},
      {"negatives", params.config.negatives},
      {"full_softmax_limit", params.config.full_softmax_limit},
      {"max_len", params.config.max_len},
      {"seed", params.config.seed},
  };
  manifest["schema"] = {
      {"field_names", params.schema.field_names},
      {"vocab_sizes", params.schema.vocab_sizes},
  };

  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::uint32_t count = 0;
  std::uint64_t payload_bytes = 0;
  for_each_tensor(
      const_cast<EncoderParameters&>(params),
      [&](const std::string& name, const std::vector<std::size_t>& shape,
          std::vector<float>& v) {
        nlohmann::json t;
        t["name"] = name;
        t["shape"] = shape;
        t["dtype"] = "f32";
        t["offset"] = offset;
        t["size"] = v.size();
        tensors.push_back(std::move(t));
        offset += v.size();
        payload_bytes += v.size() * 4;
        ++count;
      });
  manifest["tensors"] = std::move(tensors);

  out.write(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, count);
  put_u64(out, payload_bytes);
  for_each_tensor(const_cast<EncoderParameters&>(params),
                  [&](const std::string&, const std::vector<std::size_t>&,
                      std::vector<float>& v) {
                    out.write(reinterpret_cast<const char*>(v.data()),
                              static_cast<std::streamsize>(v.size() * 4));
                  });
  const std::string text = manifest.dump();
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("write failed: " + path);
}

EncoderParameters load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw Error(path + ": bad magic");
  const std::uint32_t version = get_u32(in, "version");
  if (version != kCheckpointVersion)
    throw Error(path + ": unsupported checkpoint version");
  const std::uint32_t count = get_u32(in, "tensor count");
  const std::uint64_t payload_bytes = get_u64(in, "payload size");
  std::vector<float> payload(payload_bytes / 4);
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload_bytes));
  if (static_cast<std::uint64_t>(in.gcount()) != payload_bytes)
    throw Error(path + ": truncated payload");
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  nlohmann::json manifest = nlohmann::json::parse(text, nullptr, false);
  if (manifest.is_discarded()) throw Error(path + ": malformed manifest");

  ModelConfig config;
  const auto& jc = manifest.at("config");
  config.dim = jc.at("dim").get<std::size_t>();
  config.layers = jc.at("layers").get<std::size_t>();
  config.heads = jc.at("heads").get<std::size_t>();
  config.ffn_dim = jc.at("ffn_dim").get<std::size_t>();
  config.dropout = jc.at("dropout").get<double>();
  config.field_weights = jc.at("field_weights").get<std::vector<double>>();
  config.negatives = jc.at("negatives").get<std::size_t>();
  config.full_softmax_limit = jc.at("full_softmax_limit").get<std::size_t>();
  config.max_len = jc.at("max_len").get<std::size_t>();
  config.seed = jc.at("seed").get<std::uint64_t>();

  FieldSchema schema;
  schema.field_names =
      manifest.at("schema").at("field_names").get<std::vector<std::string>>();
  schema.vocab_sizes =
      manifest.at("schema").at("vocab_sizes").get<std::vector<std::size_t>>();

  EncoderParameters params = init_params<float>(config, schema);
  std::size_t expected = 0;
  std::vector<std::pair<std::string, std::vector<float>*>> slots;
  for_each_tensor(params, [&](const std::string& name,
                              const std::vector<std::size_t>&,
                              std::vector<float>& v) {
    slots.emplace_back(name, &v);
    ++expected;
  });
  if (expected != count)
    throw Error(path + ": manifest lists " + std::to_string(count) +
                " tensors, model needs " + std::to_string(expected));

  for (const auto& t : manifest.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    const std::size_t offset = t.at("offset").get<std::size_t>();
    const std::size_t size = t.at("size").get<std::size_t>();
    auto it = std::find_if(slots.begin(), slots.end(),
                           [&](const auto& s) { return s.first == name; });
    if (it == slots.end()) throw Error(path + ": unknown tensor " + name);
    if (it->second->size() != size)
      throw Error(path + ": tensor " + name + " has size " +
                  std::to_string(size) + ", expected " +
                  std::to_string(it->second->size()));
    if (offset + size > payload.size())
      throw Error(path + ": tensor " + name + " exceeds the payload");
    std::copy_n(payload.data() + offset, size, it->second->data());
  }
  return params;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

template EncoderParams<float> init_params<float>(const ModelConfig&,
                                                 const FieldSchema&);
template EncoderParams<double> init_params<double>(const ModelConfig&,
                                                   const FieldSchema&);
template EncoderParams<float> zeros_like<float>(const EncoderParams<float>&);
template EncoderParams<double> zeros_like<double>(const EncoderParams<double>&);
template std::vector<float> build_target_input<float>(
    std::span<const std::int32_t>, const MaskSample&,
    const EncoderParams<float>&, std::size_t);
template std::vector<double> build_target_input<double>(
    std::span<const std::int32_t>, const MaskSample&,
    const EncoderParams<double>&, std::size_t);
template std::vector<float> predictive_distribution<float>(
    const EncoderParams<float>&, std::size_t, std::span<const float>);
template std::vector<double> predictive_distribution<double>(
    const EncoderParams<double>&, std::size_t, std::span<const double>);
template std::vector<float> predictive_distribution<float>(
    const EncoderParams<float>&, std::size_t, std::span<const float>,
    std::span<const std::int32_t>);
template std::vector<double> predictive_distribution<double>(
    const EncoderParams<double>&, std::size_t, std::span<const double>,
    std::span<const std::int32_t>);
template double famae_loss<float>(const ItemTable&,
                                  std::span<const BatchWindow>,
                                  std::span<const MaskSample>,
                                  const EncoderParams<float>&,
                                  EncoderParams<float>*, const LossOptions&);
template double famae_loss<double>(const ItemTable&,
                                   std::span<const BatchWindow>,
                                   std::span<const MaskSample>,
                                   const EncoderParams<double>&,
                                   EncoderParams<double>*, const LossOptions&);
template double famae_loss<float>(const ItemTable&,
                                  std::span<const BatchWindow>,
                                  const EncoderParams<float>&,
                                  EncoderParams<float>*, Rng&,
                                  const LossOptions&);
template double famae_loss<double>(const ItemTable&,
                                   std::span<const BatchWindow>,
                                   const EncoderParams<double>&,
                                   EncoderParams<double>*, Rng&,
                                   const LossOptions&);
template std::vector<float> encode_target_hidden<float>(
    const ItemTable&, const BatchWindow&, const MaskSample&,
    const EncoderParams<float>&);
template std::vector<double> encode_target_hidden<double>(
    const ItemTable&, const BatchWindow&, const MaskSample&,
    const EncoderParams<double>&);

}  // namespace rsid::famae
