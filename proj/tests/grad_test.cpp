#include <gtest/gtest.h>

#include "parabart/grad_suite.hpp"

using namespace parabart;

class OpGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradients, MatchCentralDifferences) {
  for (const auto& c : op_gradient_cases(GetParam())) {
    EXPECT_TRUE(c.report.passed()) << c.name << ": max rel error " << c.report.max_rel_error << " at input "
                                   << c.report.worst_input << " element " << c.report.worst_element << " "
                                   << c.report.failure;
    EXPECT_GT(c.report.checked, 0u) << c.name;
  }
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, OpGradients, ::testing::Range<std::uint64_t>(1, 11));

TEST(CompositeGradient, FullLossOnTwoPairBatch) {
  const auto c = composite_gradient_case(3);
  EXPECT_TRUE(c.report.passed()) << c.report.max_rel_error << " " << c.report.failure;
  EXPECT_GT(c.report.checked, 500u);
}

TEST(GradCheck, SoftmaxCrossEntropyComposite) {
  std::mt19937_64 rng(9);
  auto logits = detail::random_tensor({3, 5}, rng, -2, 2);
  std::vector<std::int32_t> t{4, 0, 2};
  auto r = grad_check([t](const std::vector<TensorD>& x) { return cross_entropy(x[0], t); }, {logits}, 1e-5);
  EXPECT_TRUE(r.passed()) << r.max_rel_error;
}

TEST(GradCheck, DetectsAWrongGradient) {
  // exp(x) with derivative deliberately reported as 2*exp(x)
  auto bogus = [](const std::vector<TensorD>& x) {
    std::vector<double> out;
    for (double v : x[0].data()) out.push_back(std::exp(v));
    return detail::record<double>(x[0].shape(), std::move(out), "bogus", {x[0]}, [](Node<double>& self) {
      auto g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2 * self.grad[i] * self.data[i];
    });
  };
  auto r = grad_check(bogus, {TensorD::from_data({3}, {0.1, 0.2, 0.3})}, 1e-5);
  EXPECT_FALSE(r.passed());
  EXPECT_GT(r.max_rel_error, 0.4);
}

TEST(GradCheck, ReportsNonFiniteValues) {
  // Overflows to inf; debug builds raise instead of returning a report.
  try {
    auto r = grad_check([](const std::vector<TensorD>& x) { return mul(x[0], x[0]); },
                        {TensorD::from_data({2}, {1.0, 1e200})}, 1e-5);
    EXPECT_FALSE(r.passed());
    EXPECT_FALSE(r.failure.empty());
  } catch (const NumericError&) {
  }
}
