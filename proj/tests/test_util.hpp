#pragma once

#include "tstereo/nn.hpp"

#include <functional>

namespace tstereo::testing {

/// Central finite differences against the analytic gradient of a scalar loss.
/// `make_loss` must rebuild the graph from the current parameter values.
/// Returns the worst relative error over all checked entries.
template <typename S>
double fdGradCheck(std::vector<Var<S>> params, const std::function<Var<S>()>& make_loss,
                   double step = 1e-5, Index max_entries_per_param = 64) {
  for (auto& p : params) p.zeroGrad();
  Var<S> loss = make_loss();
  loss.backward();
  std::vector<Tensor<S>> grads;
  for (auto& p : params)
    grads.push_back(p.node()->grad_ready ? p.grad() : Tensor<S>::zeros(p.shape()));

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const Index n = p.value().numel();
    const Index stride = std::max<Index>(1, n / max_entries_per_param);
    for (Index i = 0; i < n; i += stride) {
      const S saved = p.valueMut()[i];
      p.valueMut()[i] = saved + static_cast<S>(step);
      const double lp = make_loss().value()[0];
      p.valueMut()[i] = saved - static_cast<S>(step);
      const double lm = make_loss().value()[0];
      p.valueMut()[i] = saved;
      const double fd = (lp - lm) / (2.0 * step);
      const double an = grads[pi][i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

template <typename S>
Tensor<S> randomTensor(Shape shape, std::mt19937& rng, S sigma = S(1)) {
  Tensor<S> t(std::move(shape));
  t.setRandomNormal(rng, sigma);
  return t;
}

/// Fetches a registered parameter by its qualified name.
template <typename S>
Var<S> param(const ParamRegistry<S>& reg, const std::string& name) {
  for (auto& [n, v] : reg.params())
    if (n == name) return v;
  throw std::runtime_error("no parameter named " + name);
}

}  // namespace tstereo::testing
