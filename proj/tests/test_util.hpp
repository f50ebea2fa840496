#pragma once

#include <functional>
#include <string>
#include <vector>

#include "isoscan/diffcore.hpp"

namespace isoscan::testutil {

// Adapts a store-backed computation into a DiffOp whose argument list is
// [explicit inputs..., trainable params in store order...], so gradcheck
// covers parameter gradients too.
inline DiffOp store_diffop(
    std::string name, ParamStore& store,
    std::function<std::vector<NdArray>(const std::vector<NdArray>&)> fwd,
    std::function<std::vector<NdArray>(const std::vector<NdArray>&, const std::vector<NdArray>&)>
        bwd,
    std::size_t n_inputs) {
  ParamStore* sp = &store;
  auto set_params = [sp, n_inputs](const std::vector<NdArray>& point) {
    std::size_t k = n_inputs;
    for (std::size_t i = 0; i < sp->count(); ++i) {
      if (!sp->param(i).trainable) continue;
      sp->param(i).value = point[k++];
    }
  };
  auto inputs_of = [n_inputs](const std::vector<NdArray>& point) {
    return std::vector<NdArray>(point.begin(), point.begin() + n_inputs);
  };
  DiffOp op;
  op.name = std::move(name);
  op.forward = [set_params, inputs_of, fwd](const std::vector<NdArray>& point) {
    set_params(point);
    return fwd(inputs_of(point));
  };
  op.backward = [sp, set_params, inputs_of, bwd](const std::vector<NdArray>& point,
                                                 const std::vector<NdArray>& dy) {
    set_params(point);
    sp->zero_grads();
    std::vector<NdArray> din = bwd(inputs_of(point), dy);
    for (std::size_t i = 0; i < sp->count(); ++i)
      if (sp->param(i).trainable) din.push_back(sp->param(i).grad);
    return din;
  };
  return op;
}

// The matching gradcheck point: [explicit inputs..., trainable param values...].
inline std::vector<NdArray> store_point(const ParamStore& store, std::vector<NdArray> inputs) {
  for (std::size_t i = 0; i < store.count(); ++i)
    if (store.param(i).trainable) inputs.push_back(store.param(i).value);
  return inputs;
}

}  // namespace isoscan::testutil
