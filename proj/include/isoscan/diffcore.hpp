#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "isoscan/common.hpp"
#include "isoscan/nd_array.hpp"

namespace isoscan {

// A differentiable operation as seen by the gradient checker: a pure forward
// map and its vector-Jacobian product. Layers in the repo keep their own
// cache-passing forward/backward signatures; tests adapt them into DiffOps.
struct DiffOp {
  std::string name;
  // inputs -> outputs
  std::function<std::vector<NdArray>(const std::vector<NdArray>&)> forward;
  // (inputs, output cotangents) -> input cotangents
  std::function<std::vector<NdArray>(const std::vector<NdArray>&,
                                     const std::vector<NdArray>&)>
      backward;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_arg = 0;
  std::size_t worst_coord = 0;
  bool finite = true;  // false if forward produced a non-finite value at a perturbed point
};

// Central-difference check of op.backward against op.forward. Outputs are
// scalarized through a fixed random projection r, so the analytic gradient
// is backward(point, r) and the numeric one is d<r, f(x)>/dx per coordinate.
inline GradCheckReport gradcheck_report(const DiffOp& op, std::vector<NdArray> point,
                                        double eps = 1e-5, std::uint64_t seed = 17) {
  if (eps < 1e-6 || eps > 1e-3)
    throw std::invalid_argument("gradcheck: eps must lie in [1e-6, 1e-3]");
  for (const auto& a : point)
    if (!a.all_finite()) throw std::invalid_argument("gradcheck: non-finite input");

  const std::vector<NdArray> base_out = op.forward(point);
  Rng rng(derive_seed(seed, "gradcheck.projection"));
  std::vector<NdArray> proj;
  proj.reserve(base_out.size());
  for (const auto& o : base_out) {
    NdArray r(o.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = rng.normal();
    proj.push_back(std::move(r));
  }

  const auto scalarize = [&](const std::vector<NdArray>& outs) {
    double s = 0.0;
    for (std::size_t k = 0; k < outs.size(); ++k)
      for (std::size_t i = 0; i < outs[k].size(); ++i) s += proj[k][i] * outs[k][i];
    return s;
  };

  const std::vector<NdArray> analytic = op.backward(point, proj);
  if (analytic.size() != point.size())
    throw std::runtime_error("gradcheck: backward returned wrong arity for " + op.name);

  GradCheckReport report;
  for (std::size_t a = 0; a < point.size(); ++a) {
    for (std::size_t i = 0; i < point[a].size(); ++i) {
      const double saved = point[a][i];
      point[a][i] = saved + eps;
      const double fp = scalarize(op.forward(point));
      point[a][i] = saved - eps;
      const double fm = scalarize(op.forward(point));
      point[a][i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.finite = false;
        report.worst_arg = a;
        report.worst_coord = i;
        report.max_rel_err = std::numeric_limits<double>::infinity();
        return report;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double an = analytic[a][i];
      const double denom = std::max({std::fabs(an), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(an - numeric) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_arg = a;
        report.worst_coord = i;
      }
    }
  }
  return report;
}

inline double gradcheck(const DiffOp& op, const std::vector<NdArray>& point,
                        double eps = 1e-5, std::uint64_t seed = 17) {
  return gradcheck_report(op, point, eps, seed).max_rel_err;
}

// ---------------------------------------------------------------------------
// Parameter store: named parameter values with matching cotangent
// accumulators. Mutated only by the single training thread.
// ---------------------------------------------------------------------------

struct Param {
  NdArray value;
  NdArray grad;
  bool trainable = true;  // false for buffers (e.g. batch-norm running stats)
};

class ParamStore {
public:
  Param& add(const std::string& name, NdArray init, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    auto p = std::make_unique<Param>();
    p->grad = NdArray(init.shape());
    p->value = std::move(init);
    p->trainable = trainable;
    index_.emplace(name, entries_.size());
    names_.push_back(name);
    entries_.push_back(std::move(p));
    return *entries_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Param& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
    return *entries_[it->second];
  }
  const Param& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
    return *entries_[it->second];
  }

  std::size_t count() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Param& param(std::size_t i) { return *entries_[i]; }
  const Param& param(std::size_t i) const { return *entries_[i]; }

  void zero_grads() {
    for (auto& p : entries_) p->grad.fill(0.0);
  }

  // Trainable scalar count (reported parameter count of a model).
  std::size_t total_trainable() const {
    std::size_t n = 0;
    for (const auto& p : entries_)
      if (p->trainable) n += p->value.size();
    return n;
  }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& p : entries_) n += p->value.size();
    return n;
  }

  // Order-sensitive FNV-1a over the exact value bits; used to assert that a
  // frozen store was not touched.
  std::uint64_t value_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto mix = [&h](const unsigned char* bytes, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      mix(reinterpret_cast<const unsigned char*>(names_[i].data()), names_[i].size());
      const auto& v = entries_[i]->value;
      mix(reinterpret_cast<const unsigned char*>(v.data()), v.size() * sizeof(double));
    }
    return h;
  }

private:
  std::vector<std::string> names_;
  std::vector<std::unique_ptr<Param>> entries_;  // unique_ptr: stable addresses
  std::unordered_map<std::string, std::size_t> index_;
};

inline void zero_grads(ParamStore& store) { store.zero_grads(); }

}  // namespace isoscan
