#ifndef ACDIS_TESTS_TEST_UTIL_HPP_
#define ACDIS_TESTS_TEST_UTIL_HPP_

#include <cmath>
#include <functional>

#include "acdis/autodiff.hpp"
#include "acdis/common.hpp"
#include "acdis/tensor.hpp"

namespace acdis {
namespace testing {

inline Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng,
                            double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Max relative error between the analytic gradient of build(x) at x0 and
// central finite differences.
inline double fd_max_rel_err(
    const std::function<ad::Var(const ad::Var&)>& build, const Tensor& x0,
    double h = 1e-5) {
  ad::Var x = ad::leaf(x0.clone(), true);
  ad::Var loss = build(x);
  ad::backward(loss);
  Tensor grad = x->grad.defined() ? x->grad : Tensor::zeros(x0.shape());
  double max_rel = 0.0;
  for (std::int64_t i = 0; i < x0.size(); ++i) {
    Tensor xp = x0.clone();
    xp[i] += h;
    const double fp = build(ad::constant(xp))->value.item();
    Tensor xm = x0.clone();
    xm[i] -= h;
    const double fm = build(ad::constant(xm))->value.item();
    const double fd = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(grad[i]), std::abs(fd), 1e-6});
    max_rel = std::max(max_rel, std::abs(grad[i] - fd) / denom);
  }
  return max_rel;
}

}  // namespace testing
}  // namespace acdis

#endif  // ACDIS_TESTS_TEST_UTIL_HPP_
