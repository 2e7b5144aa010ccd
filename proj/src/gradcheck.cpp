#include "ssrseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ssrseg {

GradCheckResult finite_diff_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> params, double step) {
  if (!(step > 0.0)) throw ConfigError("finite_diff_check: step must be positive");
  for (auto& p : params) {
    if (!p.is_leaf() || !p.requires_grad()) {
      throw ContractError("finite_diff_check: parameters must be leaves requiring grad");
    }
    p.zero_grad();
  }

  const Tensor<double> base = f();
  const double base_value = base.item();
  backward(base);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  const double again = f().item();
  if (again != base_value) {
    throw OracleError("finite_diff_check: f is not deterministic (" + std::to_string(base_value) +
                      " vs " + std::to_string(again) + ")");
  }

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const std::vector<double> original(p.data().begin(), p.data().end());
    std::vector<double> probe = original;
    for (std::size_t i = 0; i < original.size(); ++i) {
      probe[i] = original[i] + step;
      p.set_leaf_data(probe);
      const double up = f().item();
      probe[i] = original[i] - step;
      p.set_leaf_data(probe);
      const double down = f().item();
      probe[i] = original[i];

      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      ++result.coordinates;
      if (err > result.max_rel_error || result.coordinates == 1) {
        result.max_rel_error = err;
        result.worst_param = pi;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
    p.set_leaf_data(original);
  }
  return result;
}

}  // namespace ssrseg
