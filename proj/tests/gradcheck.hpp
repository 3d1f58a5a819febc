// Central finite-difference gradient checker (test-only oracle).
// Runs at double precision, h = 1e-5. Independent of the autodiff path:
// it perturbs leaf values and re-evaluates the loss with the tape disabled.

#ifndef BATRFST_TESTS_GRADCHECK_HPP_
#define BATRFST_TESTS_GRADCHECK_HPP_

#include <cmath>
#include <functional>
#include <vector>

#include "batrfst/tensor.hpp"

namespace gradcheck {

struct result {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// `leaves` are the requires_grad tensors the loss is differentiated against;
// `loss_fn` rebuilds the scalar loss from the leaves' current values.
inline result check(std::vector<batr::tensor<double>*> leaves,
                    const std::function<batr::tensor<double>()>& loss_fn, double h = 1e-5) {
  for (auto* p : leaves) {
    p->set_requires_grad(true);
    p->zero_grad();
  }
  batr::tensor<double> loss = loss_fn();
  batr::backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto* p : leaves) analytic.push_back(p->grad());

  result res;
  batr::no_grad_guard ng;
  for (std::size_t pi = 0; pi < leaves.size(); ++pi) {
    auto& vals = leaves[pi]->mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double orig = vals[i];
      vals[i] = orig + h;
      double lp = loss_fn().value();
      vals[i] = orig - h;
      double lm = loss_fn().value();
      vals[i] = orig;
      double fd = (lp - lm) / (2.0 * h);
      double ad = analytic[pi][i];
      double denom = std::max({std::fabs(fd), std::fabs(ad), 1e-3});
      res.max_rel_error = std::max(res.max_rel_error, std::fabs(fd - ad) / denom);
      ++res.checked;
    }
  }
  for (auto* p : leaves) p->zero_grad();
  return res;
}

}  // namespace gradcheck

#endif  // BATRFST_TESTS_GRADCHECK_HPP_
