#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "parabart/ops.hpp"

namespace parabart {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  std::size_t checked = 0;
  double tolerance = 0.0;
  std::string failure;  // set when a non-finite value shows up

  bool passed() const { return failure.empty() && max_rel_error < tolerance; }
};

/// Relative-error denominator floor; below it the comparison is effectively
/// absolute.
inline constexpr double kGradCheckFloor = 1e-4;

/// Compares analytic gradients of `op` against central differences with
/// step h, in double precision. Non-scalar outputs are reduced with a fixed
/// random projection so every output element contributes.
inline GradCheckReport grad_check(const std::function<TensorD(const std::vector<TensorD>&)>& op,
                                  const std::vector<TensorD>& inputs, double tolerance,
                                  double h = 1e-5, std::uint64_t projection_seed = 17) {
  GradCheckReport report;
  report.tolerance = tolerance;
  std::vector<double> projection;
  auto scalarize = [&](const TensorD& out) {
    if (out.numel() == 1 && out.rank() == 0) return out;
    if (projection.size() != out.numel()) {
      std::mt19937_64 rng(projection_seed);
      std::uniform_real_distribution<double> dist(-1.0, 1.0);
      projection.resize(out.numel());
      for (auto& w : projection) w = dist(rng);
    }
    return sum(mul(out, TensorD::from_data(out.shape(), projection)));
  };
  auto fresh = [&](bool with_grad) {
    std::vector<TensorD> copies;
    for (const auto& in : inputs) {
      copies.push_back(TensorD::from_data(in.shape(), std::vector<double>(in.data().begin(), in.data().end()),
                                          with_grad));
    }
    return copies;
  };

  auto leaves = fresh(true);
  TensorD loss = scalarize(op(leaves));
  if (!std::isfinite(loss.item())) {
    report.failure = "non-finite loss at the unperturbed point";
    return report;
  }
  loss.backward();

  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t e = 0; e < inputs[i].numel(); ++e) {
      auto plus = fresh(false);
      auto minus = fresh(false);
      plus[i].mutable_data()[e] += h;
      minus[i].mutable_data()[e] -= h;
      const double fp = scalarize(op(plus)).item();
      const double fm = scalarize(op(minus)).item();
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = leaves[i].has_grad() ? leaves[i].grad()[e] : 0.0;
      if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
        report.failure = "non-finite gradient at input " + std::to_string(i) + " element " + std::to_string(e);
        return report;
      }
      const double denom = std::max({std::abs(numeric), std::abs(analytic), kGradCheckFloor});
      const double rel = std::abs(numeric - analytic) / denom;
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = i;
        report.worst_element = e;
      }
    }
  }
  return report;
}

}  // namespace parabart
