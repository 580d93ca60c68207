#include "malsf/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace malsf {

GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor> xs, double eps) {
  if (eps < 1e-7 || eps > 1e-3) {
    throw std::invalid_argument("grad_check: eps must be in [1e-7, 1e-3]");
  }
  for (auto& x : xs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    GraphScope scope(g);
    Tensor loss = f(xs);
    g.backward(loss);
    for (auto& x : xs) {
      analytic.push_back(x.has_grad() ? x.grad() : std::vector<double>(x.data().size(), 0.0));
      x.zero_grad();
    }
  }

  GradCheckResult res;
  for (size_t xi = 0; xi < xs.size(); ++xi) {
    auto& data = xs[xi].data();
    for (size_t e = 0; e < data.size(); ++e) {
      const double orig = data[e];
      data[e] = orig + eps;
      const double fp = f(xs).value();
      data[e] = orig - eps;
      const double fm = f(xs).value();
      data[e] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[xi][e];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_input = static_cast<int>(xi);
        res.worst_element = static_cast<int64_t>(e);
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace malsf
