#include <gtest/gtest.h>

#include "metacoop/oracles.hpp"

using namespace metacoop;

namespace {

void expect_all(const std::vector<CheckResult>& checks) {
    ASSERT_FALSE(checks.empty());
    for (const auto& c : checks) {
        EXPECT_TRUE(c.passed) << c.name << ": worst " << c.worst << " tolerance " << c.tolerance << ' ' << c.detail;
    }
}

}  // namespace

TEST(Oracles, RelativeErrorConventions) {
    const std::vector<double> a{1.0, -2.0, 0.0}, b{1.0, -2.0, 0.0}, c{1.0, -2.0, 1e-9};
    EXPECT_EQ(relative_error(a, b), 0.0);
    EXPECT_EQ(max_relative_error(a, b), 0.0);
    // entries below the floor are measured against the floor, not themselves
    EXPECT_NEAR(max_relative_error(a, c), 1e-9 / 1e-8, 1e-15);
    EXPECT_THROW(relative_error(a, std::vector<double>{1.0}), ShapeError);
}

TEST(Oracles, NumericGradientOfQuadratic) {
    auto f = [](const std::vector<Array>& in) { return in[0][0] * in[0][0] + 3.0 * in[0][1]; };
    const Array g = numeric_gradient(f, {Array::matrix(1, 2, {2.0, 5.0})}, 0, 1e-5);
    EXPECT_NEAR(g[0], 4.0, 1e-9);
    EXPECT_NEAR(g[1], 3.0, 1e-9);
}

TEST(Oracles, EveryOpMatchesFiniteDifferences) { expect_all(check_op_gradients()); }

TEST(Oracles, OpListCoversEveryDifferentiableKind) {
    // Leaf is the only op without a VJP to check
    EXPECT_EQ(oracle::op_cases().size(), static_cast<std::size_t>(Op::BroadcastScalar));
}

TEST(Oracles, HigherDerivativesMatchClosedForms) { expect_all(check_higher_derivatives()); }

TEST(Oracles, MetaGradientsMatchFiniteDifferences) {
    const auto checks = check_meta_gradients();
    EXPECT_EQ(checks.size(), 5u);
    EXPECT_LE(count_params(oracle_model(5), Partition::FeatureExtractor) + count_params(oracle_model(5), Partition::MetaHead) +
                  count_params(oracle_model(5), Partition::CoHead),
              20u);
    expect_all(checks);
}

TEST(Oracles, MetaGradientsAcrossSeeds) {
    for (std::uint64_t seed : {41u, 42u, 43u}) expect_all(check_meta_gradients(seed));
}

TEST(Oracles, FreezeInvariant) { expect_all({check_freeze_invariant(100)}); }

TEST(Oracles, GammaCollapse) { expect_all({check_gamma_collapse()}); }

TEST(Oracles, DescentIdentity) { expect_all(check_descent_identity(20, 50)); }

TEST(Oracles, DiagnosticsProperties) { expect_all(check_diagnostics_properties()); }

TEST(Oracles, SelftestGroupsAllPass) {
    const auto groups = run_selftest();
    EXPECT_EQ(groups.size(), 6u);
    for (const auto& g : groups) EXPECT_TRUE(g.passed()) << g.name;
}
