#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "metacoop/autodiff.hpp"
#include "metacoop/oracles.hpp"
#include "metacoop/rng.hpp"

using namespace metacoop;

namespace {

Var scalar_leaf(Graph& g, double v) { return g.leaf(Array::matrix(1, 1, {v})); }

std::vector<double> values_of(const Var& v) { return v.value().data(); }

}  // namespace

TEST(Array, ShapeMustMatchPayload) {
    EXPECT_THROW(Array(Shape{2, 2}, std::vector<double>{1.0, 2.0, 3.0}), ShapeError);
    EXPECT_THROW(Array::matrix({{1.0, 2.0}, {3.0}}), ShapeError);
    const Array a = Array::matrix({{1.0, 2.0}, {3.0, 4.0}});
    EXPECT_EQ(a.rows(), 2u);
    EXPECT_EQ(a.at(1, 0), 3.0);
    EXPECT_THROW(Array::scalar(1.0).rows(), ShapeError);
    EXPECT_THROW(a.item(), ShapeError);
}

TEST(Array, EqualityIsBitwise) {
    EXPECT_FALSE(Array::scalar(0.0) == Array::scalar(-0.0));
    EXPECT_TRUE(Array::scalar(1.5) == Array::scalar(1.5));
    EXPECT_FALSE(Array::column({1.0, 2.0}) == Array::matrix(1, 2, {1.0, 2.0}));
}

TEST(Ops, ReluOfMixedSigns) {
    Graph g;
    const Var y = g.relu(Var::constant(Array::matrix(1, 3, {-1.0, 0.0, 2.0})));
    EXPECT_EQ(values_of(y), (std::vector<double>{0.0, 0.0, 2.0}));
}

TEST(Ops, MeanReduce) {
    Graph g;
    EXPECT_EQ(g.mean(Var::constant(Array::matrix(1, 2, {2.0, 4.0}))).value().item(), 3.0);
}

TEST(Ops, MatmulByHand) {
    Graph g;
    const Var y = g.matmul(Var::constant(Array::matrix({{1.0, 2.0}})), Var::constant(Array::matrix({{3.0}, {4.0}})));
    EXPECT_EQ(y.shape(), (Shape{1, 1}));
    EXPECT_EQ(y.value().item(), 11.0);
}

TEST(Ops, TransposedMatmulsAgree) {
    Graph g;
    const Array a = Array::matrix({{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}});
    const Array b = Array::matrix({{1.0, 0.5, -1.0}, {2.0, 0.0, 1.0}});
    const Var nt = g.matmul_nt(Var::constant(a), Var::constant(b));
    const Var tn = g.matmul_tn(Var::constant(a), Var::constant(b));
    EXPECT_EQ(nt.value(), g.matmul(Var::constant(a), g.transpose(Var::constant(b))).value());
    EXPECT_EQ(tn.value(), g.matmul(g.transpose(Var::constant(a)), Var::constant(b)).value());
    EXPECT_EQ(tn.shape(), (Shape{3, 3}));
}

TEST(Ops, SoftmaxCrossEntropyIsStableForLargeLogits) {
    Graph g;
    const Var z = Var::constant(Array::matrix({{1000.0, 0.0}, {0.0, 1000.0}}));
    const double loss = g.softmax_xent(z, std::vector<int>{0, 0}).value().item();
    EXPECT_NEAR(loss, 500.0, 1e-9);
}

TEST(Ops, SoftmaxCrossEntropyRejectsBadLabels) {
    Graph g;
    const Var z = Var::constant(Array::matrix({{0.0, 1.0}}));
    EXPECT_THROW(g.softmax_xent(z, std::vector<int>{2}), ShapeError);
    EXPECT_THROW(g.softmax_xent(z, std::vector<int>{0, 1}), ShapeError);
}

TEST(Ops, ShapeMismatchThrows) {
    Graph g;
    const Var a = Var::constant(Array(Shape{2, 3}));
    const Var b = Var::constant(Array(Shape{2, 2}));
    EXPECT_THROW(g.matmul(a, b), ShapeError);
    EXPECT_THROW(g.add(a, b), ShapeError);
    EXPECT_THROW(g.add_bias(a, Var::constant(Array(Shape{1, 2}))), ShapeError);
    EXPECT_THROW(g.slice_rows(a, 1, 2), ShapeError);
    EXPECT_THROW(g.broadcast_rows(a, 3), ShapeError);
}

TEST(Ops, NonFiniteOutputThrows) {
    Graph g;
    const Var big = Var::constant(Array::matrix(1, 1, {1e200}));
    EXPECT_THROW(g.square(big), NumericError);
    EXPECT_THROW(g.leaf(Array::scalar(std::numeric_limits<double>::quiet_NaN())), NumericError);
}

TEST(Ops, ConcatSliceAndPadRoundTrip) {
    Graph g;
    const Var a = Var::constant(Array::matrix({{1.0, 2.0}}));
    const Var b = Var::constant(Array::matrix({{3.0, 4.0}, {5.0, 6.0}}));
    const std::vector<Var> parts{a, b};
    const Var c = g.concat_rows(parts);
    EXPECT_EQ(c.shape(), (Shape{3, 2}));
    EXPECT_EQ(g.slice_rows(c, 1, 2).value(), b.value());
    const Var p = g.pad_rows(b, 1, 4);
    EXPECT_EQ(values_of(p), (std::vector<double>{0, 0, 3, 4, 5, 6, 0, 0}));
}

TEST(Gradient, SquareAtThree) {
    Graph g;
    const Var x = scalar_leaf(g, 3.0);
    const auto d = g.gradient(g.sum(g.square(x)), std::span(&x, 1), false);
    EXPECT_EQ(d[0].value().item(), 6.0);
}

TEST(Gradient, SecondDerivativeOfCubeAtTwo) {
    Graph g;
    const Var x = scalar_leaf(g, 2.0);
    const Var cube = g.sum(g.mul(g.square(x), x));
    const Var d1 = g.gradient(cube, std::span(&x, 1), true)[0];
    EXPECT_TRUE(d1.tracked());
    const Var d2 = g.gradient(g.sum(d1), std::span(&x, 1), false)[0];
    EXPECT_DOUBLE_EQ(d2.value().item(), 12.0);
}

TEST(Gradient, ReluSubgradientAtZeroIsZero) {
    Graph g;
    const Var x = g.leaf(Array::matrix(1, 3, {-1.0, 0.0, 2.0}));
    const auto d = g.gradient(g.sum(g.relu(x)), std::span(&x, 1), false);
    EXPECT_EQ(values_of(d[0]), (std::vector<double>{0.0, 0.0, 1.0}));
}

TEST(Gradient, UnreachedParameterGetsExplicitZero) {
    Graph g;
    const Var x = scalar_leaf(g, 1.5);
    const Var unused = g.leaf(Array(Shape{2, 3}, 7.0));
    const std::vector<Var> wrt{x, unused};
    const auto d = g.gradient(g.sum(g.square(x)), wrt, false);
    EXPECT_EQ(d[1].value(), Array(Shape{2, 3}));
    EXPECT_FALSE(d[1].tracked());
}

TEST(Gradient, DetachBlocksFlow) {
    Graph g;
    const Var x = g.leaf(Array::matrix(1, 2, {1.0, -3.0}));
    const Var dx = detach(x);
    EXPECT_EQ(dx.value(), x.value());
    EXPECT_FALSE(dx.tracked());
    const auto d = g.gradient(g.sum(g.square(dx)), std::span(&x, 1), false);
    EXPECT_EQ(d[0].value(), Array(Shape{1, 2}));
}

TEST(Gradient, LossMustBeScalar) {
    Graph g;
    const Var x = g.leaf(Array::matrix(1, 2, {1.0, 2.0}));
    EXPECT_THROW(g.gradient(g.square(x), std::span(&x, 1), false), ShapeError);
}

TEST(Gradient, FrozenGraphRefuses) {
    Graph g(Graph::Mode::Frozen);
    const Var x = g.leaf(Array::matrix(1, 1, {1.0}));
    EXPECT_FALSE(x.tracked());
    EXPECT_EQ(g.node_count(), 0u);
    EXPECT_THROW(g.gradient(g.sum(x), std::span(&x, 1), false), std::logic_error);
}

TEST(Gradient, WithoutCreateGraphAppendsNothing) {
    Graph g;
    const Var x = g.leaf(Array::matrix(2, 2, {1.0, -2.0, 0.5, 3.0}));
    const Var loss = g.sum(g.square(g.relu(x)));
    const std::size_t before = g.node_count();
    (void)g.gradient(loss, std::span(&x, 1), false);
    EXPECT_EQ(g.node_count(), before);
    (void)g.gradient(loss, std::span(&x, 1), true);
    EXPECT_GT(g.node_count(), before);
}

TEST(Gradient, InputsPrecedeNodes) {
    Graph g;
    const Var x = g.leaf(Array::matrix(1, 2, {0.3, -0.7}));
    const Var y = g.mul(g.square(x), x);
    const Var d = g.gradient(g.sum(y), std::span(&x, 1), true)[0];
    EXPECT_LT(x.node(), y.node());
    EXPECT_LT(y.node(), d.node());
}

TEST(Gradient, RandomSmallMlpMatchesFiniteDifferences) {
    // 1 -> 2 -> 1 net: 5 parameters
    Rng rng(99);
    std::vector<Array> params{oracle::random_array(rng, {1, 2}), oracle::random_array(rng, {1, 2}),
                              oracle::random_array(rng, {2, 1}), Array(Shape{1, 1}, 0.0)};
    params[3][0] = rng.uniform(-1.0, 1.0);
    const Array x = Array::column({-1.3, 0.4, 2.2});
    const Array y = Array::column({0.5, -0.2, 1.0});
    auto loss = [&](Graph& g, const std::vector<Var>& p) {
        const Var h = g.relu(g.add_bias(g.matmul(Var::constant(x), p[0]), p[1]));
        const Var out = g.add_bias(g.matmul(h, p[2]), p[3]);
        return g.mean(g.square(g.sub(out, Var::constant(y))));
    };
    Graph g;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(g.leaf(p));
    const auto grads = g.gradient(loss(g, leaves), leaves, false);
    auto f = [&](const std::vector<Array>& in) {
        Graph fg(Graph::Mode::Frozen);
        std::vector<Var> vs;
        for (const auto& a : in) vs.push_back(Var::constant(a));
        return loss(fg, vs).value().item();
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Array fd = numeric_gradient(f, params, i, 1e-5);
        EXPECT_LT(max_relative_error(grads[i].value().values(), fd.values()), 1e-4) << "parameter " << i;
    }
}

TEST(Gradient, IdenticalSequencesAreBitwiseIdentical) {
    auto once = [] {
        Rng rng(5);
        Graph g;
        const Var a = g.leaf(oracle::random_array(rng, {7, 5}));
        const Var b = g.leaf(oracle::random_array(rng, {5, 3}));
        const Var loss = g.softmax_xent(g.matmul(a, b), std::vector<int>{0, 1, 2, 0, 1, 2, 0});
        const std::vector<Var> wrt{a, b};
        return g.gradient(loss, wrt, false);
    };
    const auto first = once(), second = once();
    for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(first[i].value(), second[i].value());
}

TEST(Gradient, MixingGraphsIsRejected) {
    Graph g1, g2;
    const Var a = g1.leaf(Array::matrix(1, 1, {1.0}));
    EXPECT_THROW(g2.square(a), std::invalid_argument);
}

TEST(Tally, CountsNamedEvents) {
    Graph g;
    EXPECT_EQ(g.tally_count("x"), 0u);
    g.tally("x");
    g.tally("x");
    g.tally("y");
    EXPECT_EQ(g.tally_count("x"), 2u);
    EXPECT_EQ(g.tally_count("y"), 1u);
}
