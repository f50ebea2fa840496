#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "isoscan/diffcore.hpp"

namespace isoscan {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  long long step = 0;
  std::vector<NdArray> m, v;  // first/second moments, aligned with store entries

  void init(const ParamStore& store) {
    step = 0;
    m.clear();
    v.clear();
    for (std::size_t i = 0; i < store.count(); ++i) {
      m.emplace_back(store.param(i).value.shape());
      v.emplace_back(store.param(i).value.shape());
    }
  }
};

// One bias-corrected Adam update from the accumulated gradients. Buffers
// (non-trainable entries) are left untouched.
inline void adam_step(ParamStore& store, AdamState& st, double lr) {
  if (st.m.size() != store.count())
    throw std::invalid_argument("adam_step: state not initialized for this store");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < store.count(); ++i) {
    Param& p = store.param(i);
    if (!p.trainable) continue;
    NdArray& m = st.m[i];
    NdArray& v = st.v[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = st.cfg.beta1 * m[j] + (1.0 - st.cfg.beta1) * g;
      v[j] = st.cfg.beta2 * v[j] + (1.0 - st.cfg.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.value[j] -= lr * mhat / (std::sqrt(vhat) + st.cfg.eps);
    }
  }
}

// Linear ramp 0 -> base_lr over the warmup epochs, then cosine annealing.
struct Schedule {
  double base_lr = 5e-5;
  int warmup_epochs = 10;
  int total_epochs = 200;

  void validate() const {
    if (warmup_epochs < 0 || total_epochs <= warmup_epochs)
      throw std::invalid_argument("Schedule: need 0 <= warmup < total");
    if (base_lr <= 0.0) throw std::invalid_argument("Schedule: base_lr must be positive");
  }
};

inline double lr_at(int epoch, const Schedule& s) {
  s.validate();
  if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
  if (epoch < s.warmup_epochs)
    return s.base_lr * static_cast<double>(epoch) / static_cast<double>(s.warmup_epochs);
  const double t = static_cast<double>(epoch - s.warmup_epochs) /
                   static_cast<double>(s.total_epochs - s.warmup_epochs);
  return s.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace isoscan
