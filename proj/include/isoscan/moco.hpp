#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "isoscan/degradation.hpp"
#include "isoscan/nnops.hpp"
#include "isoscan/optim.hpp"
#include "isoscan/volume.hpp"

namespace isoscan {

struct EncoderConfig {
  int channels = 16;  // C_e
  int blocks = 8;
  int embed_dim = 64;  // L_D

  void validate() const {
    if (channels < 1 || blocks < 1 || embed_dim < 1)
      throw std::invalid_argument("EncoderConfig: sizes must be >= 1");
  }
};

struct EncoderCache {
  NdArray x4;
  struct Block {
    NdArray in, conv_out, bn_out;
    BatchNormCache bn;
  };
  std::vector<Block> blocks;
  NdArray feat;    // input of the average pool
  NdArray pooled;  // (C_e)
  NdArray raw;     // pre-normalization embedding
  double norm = 0.0;
};

// Degradation encoder: a stem convolution into C_e channels, then identical
// residual blocks (conv -> BN -> ReLU, skip added after the ReLU), global
// average pooling and a linear head. Embeddings are L2-normalized.
struct DegradationEncoder {
  EncoderConfig cfg;
  ParamStore store;
  Conv3d stem;
  std::vector<Conv3d> convs;
  std::vector<BatchNorm3d> bns;
  Linear head;

  explicit DegradationEncoder(const EncoderConfig& config, std::uint64_t seed = 1) : cfg(config) {
    cfg.validate();
    Rng rng(derive_seed(seed, "encoder.init"));
    stem = Conv3d(store, "stem", 1, cfg.channels, rng);
    for (int i = 0; i < cfg.blocks; ++i) {
      const std::string prefix = "block" + std::to_string(i);
      convs.emplace_back(store, prefix + ".conv", cfg.channels, cfg.channels, rng);
      bns.emplace_back(store, prefix + ".bn", cfg.channels);
    }
    head = Linear(store, "head", cfg.channels, cfg.embed_dim, rng);
  }

  NdArray encode(const NdArray& x, bool training, EncoderCache* cache = nullptr) {
    if (x.rank() != 3) throw std::invalid_argument("encode: rank-3 subvolume required");
    if (x.dim(0) < 4 || x.dim(1) < 8 || x.dim(2) < 8)
      throw std::invalid_argument("encode: subvolume must be at least (4,8,8)");
    EncoderCache local;
    EncoderCache& c = cache ? *cache : local;
    c.x4 = NdArray({x.dim(0), 1, x.dim(1), x.dim(2)}, x.values());
    NdArray t = stem.forward(c.x4);
    c.blocks.resize(convs.size());
    for (std::size_t i = 0; i < convs.size(); ++i) {
      auto& bc = c.blocks[i];
      bc.in = t;
      bc.conv_out = convs[i].forward(t);
      bc.bn_out = bns[i].forward(bc.conv_out, training, &bc.bn);
      t = bc.in + relu(bc.bn_out);
    }
    c.feat = t;
    c.pooled = global_avg_pool(t);
    c.raw = head.forward(c.pooled);
    double n2 = 0.0;
    for (std::size_t i = 0; i < c.raw.size(); ++i) n2 += c.raw[i] * c.raw[i];
    c.norm = std::max(std::sqrt(n2), 1e-12);
    NdArray e(c.raw.shape());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = c.raw[i] / c.norm;
    return e;
  }

  // Accumulates parameter gradients; returns d/dx (rank-3).
  NdArray encode_backward(EncoderCache& c, const NdArray& dembed) {
    // e = raw / ||raw||
    NdArray e(c.raw.shape());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = c.raw[i] / c.norm;
    double dot = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) dot += e[i] * dembed[i];
    NdArray draw(c.raw.shape());
    for (std::size_t i = 0; i < e.size(); ++i) draw[i] = (dembed[i] - e[i] * dot) / c.norm;

    NdArray dpooled = head.backward(c.pooled, draw);
    NdArray dt = global_avg_pool_backward(c.feat.shape(), dpooled);
    for (std::size_t i = convs.size(); i-- > 0;) {
      auto& bc = c.blocks[i];
      NdArray drelu = relu_backward(bc.bn_out, dt);
      NdArray dconv = bns[i].backward(bc.bn, drelu);
      NdArray din = convs[i].backward(bc.in, dconv);
      dt += din;  // skip path
    }
    NdArray dx4 = stem.backward(c.x4, dt);
    return NdArray({dx4.dim(0), dx4.dim(2), dx4.dim(3)}, std::move(dx4.values()));
  }
};

// ---------------------------------------------------------------------------
// Momentum contrast
// ---------------------------------------------------------------------------

struct MocoState {
  DegradationEncoder query;
  DegradationEncoder key;
  double momentum = 0.999;
  double tau = 0.07;

  explicit MocoState(const EncoderConfig& cfg, std::uint64_t seed = 1)
      : query(cfg, seed), key(cfg, seed) {  // same seed: key starts equal to query
    if (momentum <= 0.0 || momentum >= 1.0)
      throw std::invalid_argument("MocoState: momentum must be in (0,1)");
  }
};

// key_w <- m*key_w + (1-m)*query_w for every trainable parameter. BN running
// buffers follow the key encoder's own forward passes.
inline void momentum_update(MocoState& s) {
  for (std::size_t i = 0; i < s.query.store.count(); ++i) {
    const Param& q = s.query.store.param(i);
    Param& k = s.key.store.param(i);
    if (!q.trainable) continue;
    for (std::size_t j = 0; j < q.value.size(); ++j)
      k.value[j] = s.momentum * k.value[j] + (1.0 - s.momentum) * q.value[j];
  }
}

// InfoNCE over a batch: positives on the diagonal, the other N-1 keys are
// negatives. Sum (not mean) over the batch. Optionally returns d/dq.
inline double info_nce(const NdArray& q, const NdArray& k, double tau, NdArray* dq = nullptr) {
  if (q.rank() != 2 || !q.same_shape(k)) throw std::invalid_argument("info_nce: (N, L) q/k required");
  const int N = q.dim(0), L = q.dim(1);
  if (N < 2) throw std::invalid_argument("info_nce: batch must be >= 2");
  if (tau <= 0.0) throw std::invalid_argument("info_nce: tau must be positive");

  if (dq) *dq = NdArray(q.shape());
  std::vector<double> logits(N), probs(N);
  double loss = 0.0;
  for (int i = 0; i < N; ++i) {
    double max_l = -1e300;
    for (int j = 0; j < N; ++j) {
      double dot = 0.0;
      for (int l = 0; l < L; ++l) dot += q.at2(i, l) * k.at2(j, l);
      logits[j] = dot / tau;
      max_l = std::max(max_l, logits[j]);
    }
    double z = 0.0;
    for (int j = 0; j < N; ++j) {
      probs[j] = std::exp(logits[j] - max_l);
      z += probs[j];
    }
    for (int j = 0; j < N; ++j) probs[j] /= z;
    loss += -(logits[i] - max_l - std::log(z));
    if (dq) {
      for (int j = 0; j < N; ++j) {
        const double coef = (probs[j] - (j == i ? 1.0 : 0.0)) / tau;
        for (int l = 0; l < L; ++l) dq->at2(i, l) += coef * k.at2(j, l);
      }
    }
  }
  return loss;
}

// One MoCo training step over a batch of parent volumes (one degradation
// profile each): sample a positive pair per volume, encode (key branch gets
// no gradient), InfoNCE, Adam on the query encoder, EMA to the key encoder.
inline double moco_train_step(const std::vector<Volume>& parents, int df, int dy, int dx,
                              MocoState& state, AdamState& adam, double lr,
                              std::uint64_t step_seed) {
  const int N = static_cast<int>(parents.size());
  if (N < 2) throw std::invalid_argument("moco_train_step: batch must be >= 2");
  const int L = state.query.cfg.embed_dim;

  NdArray Q({N, L}), K({N, L});
  std::vector<EncoderCache> caches(N);
  for (int i = 0; i < N; ++i) {
    auto [sub_q, sub_k] =
        sample_moco_pair(parents[i], df, dy, dx, derive_seed(step_seed, "moco.sample", i));
    NdArray qe = state.query.encode(to_ndarray(sub_q), true, &caches[i]);
    NdArray ke = state.key.encode(to_ndarray(sub_k), true);
    for (int l = 0; l < L; ++l) {
      Q.at2(i, l) = qe[l];
      K.at2(i, l) = ke[l];
    }
  }

  NdArray dQ;
  const double loss = info_nce(Q, K, state.tau, &dQ);

  state.query.store.zero_grads();
  for (int i = 0; i < N; ++i) {
    NdArray drow({L});
    for (int l = 0; l < L; ++l) drow[l] = dQ.at2(i, l);
    state.query.encode_backward(caches[i], drow);
  }
  adam_step(state.query.store, adam, lr);
  momentum_update(state);
  return loss;
}

}  // namespace isoscan
