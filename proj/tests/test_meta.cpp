#include <cmath>

#include <gtest/gtest.h>

#include "metacoop/meta.hpp"
#include "metacoop/oracles.hpp"

using namespace metacoop;

namespace {

MetaConfig config(Method m, double gamma = 0.2) {
    MetaConfig c;
    c.method = m;
    c.gamma = gamma;
    return c;
}

std::vector<Task> sine_batch(std::uint64_t seed, std::size_t n = 4, std::size_t k = 5) {
    std::vector<Task> out;
    const Rng root(seed);
    for (std::size_t i = 0; i < n; ++i) {
        Rng r = root.split(i);
        out.push_back(sample_sine_task(r, k, 10 * k));
    }
    return out;
}

double outer_value(const ParamSet& p, std::span<const Task> tasks, const MetaConfig& cfg) {
    Graph g;
    return build_outer_loss(g, bind(g, p), tasks, cfg).total.value().item();
}

ParamSet scalar_model(double w) {
    auto layout = std::make_shared<std::vector<ParamInfo>>(std::vector<ParamInfo>{
        {"fe.0.w", Partition::FeatureExtractor, {1, 1}},
        {"fe.0.b", Partition::FeatureExtractor, {1, 1}},
        {"head.w", Partition::MetaHead, {1, 1}},
        {"head.b", Partition::MetaHead, {1, 1}}});
    return ParamSet(layout, {Array::matrix(1, 1, {w}), Array(Shape{1, 1}), Array::matrix(1, 1, {1.0}), Array(Shape{1, 1})});
}

}  // namespace

TEST(MetaConfig, Validation) {
    MetaConfig c;
    EXPECT_NO_THROW(c.validate());
    c.inner_steps = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = MetaConfig{};
    c.outer_lr = 0.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = MetaConfig{};
    c.gamma = -0.1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = MetaConfig{};
    c.task_batch = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_EQ(parse_method("noise"), Method::Noise);
    EXPECT_THROW(parse_method("reptile"), std::invalid_argument);
    EXPECT_EQ(parse_optimizer("sgd"), OptimizerKind::Sgd);
}

TEST(InnerAdapt, ZeroStepSizeIsIdentity) {
    const ParamSet p = init_params(MlpSpec{}, 0);
    MetaConfig cfg = config(Method::Cml);
    cfg.inner_lr = 0.0;
    Graph g;
    const AdaptedParams a = inner_adapt(g, bind(g, p), sine_batch(1)[0], cfg);
    EXPECT_TRUE(bitwise_equal(values_of(a.params), p));
}

TEST(InnerAdapt, ScalarHandComputation) {
    // prediction 1 * relu(2 w), loss (2w - 0)^2, gradient 8 at w = 1
    Task t;
    t.support = Split{Array::column({2.0}), Array::column({0.0}), nullptr};
    t.query = t.support;
    MetaConfig cfg = config(Method::Maml);
    Graph g;
    const AdaptedParams a = inner_adapt(g, bind(g, scalar_model(1.0)), t, cfg);
    EXPECT_DOUBLE_EQ(a.params.at("fe.0.w").value().item(), 0.92);
}

TEST(InnerAdapt, CmlLeavesCoHeadBitwise) {
    const ParamSet p = init_params(MlpSpec{}, 2);
    Graph g;
    const ParamVars meta = bind(g, p);
    const AdaptedParams a = inner_adapt(g, meta, sine_batch(2)[0], config(Method::Cml));
    for (std::size_t i : p.indices(Partition::CoHead)) EXPECT_EQ(a.params[i].value(), p[i]);
    EXPECT_EQ(checksum(values_of(a.params), Partition::CoHead), checksum(p, Partition::CoHead));
}

TEST(InnerAdapt, ClMovesCoHead) {
    const ParamSet p = init_params(MlpSpec{}, 3);
    Graph g;
    const AdaptedParams a = inner_adapt(g, bind(g, p), sine_batch(3)[0], config(Method::Cl));
    double delta = 0.0;
    for (std::size_t i : p.indices(Partition::CoHead)) {
        for (std::size_t k = 0; k < p[i].size(); ++k) delta += std::abs(a.params[i].value()[k] - p[i][k]);
    }
    EXPECT_GT(delta, 0.0);
}

TEST(InnerAdapt, ClWithZeroGammaDoesNotMoveCoHead) {
    const ParamSet p = init_params(MlpSpec{}, 3);
    Graph g;
    const AdaptedParams a = inner_adapt(g, bind(g, p), sine_batch(3)[0], config(Method::Cl, 0.0));
    for (std::size_t i : p.indices(Partition::CoHead)) EXPECT_EQ(a.params[i].value(), p[i]);
}

TEST(OuterLoss, ZeroStepQueryEqualsSupportIsPlainLoss) {
    const ParamSet p = init_params(MlpSpec{}, 4);
    Task t = sine_batch(4, 1)[0];
    t.query = t.support;
    MetaConfig cfg = config(Method::Maml);
    cfg.inner_lr = 0.0;
    Graph g;
    const ParamVars v = bind(g, p);
    const double plain = task_loss(g, forward_meta(g, v, Var::constant(t.support.inputs)).output, t.support, t.kind).value().item();
    EXPECT_EQ(maml_outer_loss(g, v, std::span(&t, 1), cfg).value().item(), plain);
}

TEST(OuterLoss, IdenticalTasksDoubleTheLoss) {
    const ParamSet p = init_params(MlpSpec{}, 5);
    const Task t = sine_batch(5, 1)[0];
    const std::vector<Task> two{t, t};
    for (Method m : {Method::Maml, Method::Cml, Method::Cl, Method::Noise}) {
        const MetaConfig cfg = config(m);
        EXPECT_EQ(outer_value(p, two, cfg), 2.0 * outer_value(p, std::span(&t, 1), cfg)) << method_name(m);
    }
}

TEST(OuterLoss, CmlWithZeroGammaEqualsMaml) {
    const ParamSet p = init_params(MlpSpec{}, 6);
    const auto tasks = sine_batch(6);
    Graph g;
    const ParamVars v = bind(g, p);
    const double maml = maml_outer_loss(g, v, tasks, config(Method::Maml)).value().item();
    const double cml = cml_outer_loss(g, v, tasks, config(Method::Cml, 0.0)).value().item();
    EXPECT_EQ(maml, cml);
}

TEST(OuterLoss, MethodMismatchThrows) {
    const ParamSet p = init_params(MlpSpec{}, 6);
    const auto tasks = sine_batch(6, 1);
    Graph g;
    const ParamVars v = bind(g, p);
    EXPECT_THROW(cml_outer_loss(g, v, tasks, config(Method::Cl)), std::invalid_argument);
    EXPECT_THROW(noise_outer_loss(g, v, tasks, config(Method::Cml)), std::invalid_argument);
    EXPECT_THROW(build_outer_loss(g, v, {}, config(Method::Cml)), std::invalid_argument);
}

TEST(OuterGradient, FirstOrderCmlHeadGradientMatchesMaml) {
    const ParamSet p = init_params(MlpSpec{}, 7);
    const auto tasks = sine_batch(7);
    MetaConfig maml_cfg = config(Method::Maml), cml_cfg = config(Method::Cml, 0.7);
    maml_cfg.second_order = cml_cfg.second_order = false;
    const OuterGradient maml = outer_gradient(p, tasks, maml_cfg);
    const OuterGradient cml = outer_gradient(p, tasks, cml_cfg);
    double fe_diff = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.partition(i) == Partition::MetaHead) EXPECT_EQ(cml.grads[i], maml.grads[i]) << p.name(i);
        if (p.partition(i) == Partition::CoHead) EXPECT_EQ(maml.grads[i], Array(p[i].shape())) << p.name(i);
        if (p.partition(i) == Partition::FeatureExtractor) {
            for (std::size_t k = 0; k < p[i].size(); ++k) fe_diff += std::abs(cml.grads[i][k] - maml.grads[i][k]);
        }
    }
    EXPECT_GT(fe_diff, 0.0);
}

TEST(OuterGradient, SecondOrderCoTermReachesHeadThroughAdaptedFeatures) {
    // the co loss is taken at the adapted features, which depend on the head
    const ParamSet p = init_params(MlpSpec{}, 7);
    const auto tasks = sine_batch(7);
    const OuterGradient maml = outer_gradient(p, tasks, config(Method::Maml));
    const OuterGradient cml = outer_gradient(p, tasks, config(Method::Cml, 0.7));
    for (std::size_t i : p.indices(Partition::MetaHead)) EXPECT_NE(cml.grads[i], maml.grads[i]) << p.name(i);
}

TEST(OuterGradient, CoHeadGradientMatchesFiniteDifferences) {
    const ParamSet p = oracle_model(21);
    const auto tasks = oracle_batch(22);
    const MetaConfig cfg = config(Method::Cml);
    const OuterGradient og = outer_gradient(p, tasks, cfg);
    const std::vector<Array> values(p.values().begin(), p.values().end());
    auto f = [&](const std::vector<Array>& v) { return outer_value(p.rebind(v), tasks, cfg); };
    for (std::size_t i : p.indices(Partition::CoHead)) {
        const Array fd = numeric_gradient(f, values, i, 1e-4);
        EXPECT_LT(max_relative_error(og.grads[i].values(), fd.values()), 1e-3) << p.name(i);
    }
}

TEST(OuterGradient, FirstOrderFlagDropsSecondOrderTerm) {
    // one inner step on the scalar model: first-order gradient is the query
    // gradient at the adapted point, taken as-is
    Task t;
    t.support = Split{Array::column({2.0}), Array::column({0.0}), nullptr};
    t.query = Split{Array::column({1.0}), Array::column({0.5}), nullptr};
    MetaConfig cfg = config(Method::Maml);
    cfg.second_order = false;
    const OuterGradient og = outer_gradient(scalar_model(1.0), std::span(&t, 1), cfg);
    Graph g;
    const AdaptedParams a = inner_adapt(g, bind(g, scalar_model(1.0)), t, cfg);
    const ParamSet adapted = values_of(a.params);
    Graph h;
    const ParamVars av = bind(h, adapted);
    const Var q = task_loss(h, forward_meta(h, av, Var::constant(t.query.inputs)).output, t.query, t.kind);
    const auto direct = h.gradient(q, av.values(), false);
    for (std::size_t i = 0; i < adapted.size(); ++i) EXPECT_EQ(og.grads[i], direct[i].value()) << adapted.name(i);
    cfg.second_order = true;
    EXPECT_FALSE(outer_gradient(scalar_model(1.0), std::span(&t, 1), cfg).grads[0] == og.grads[0]);
}

TEST(OuterGradient, NoiseFeatureGradientDiffersFromMaml) {
    const ParamSet p = init_params(MlpSpec{}, 8);
    const auto tasks = sine_batch(8);
    const auto noise = outer_gradient(p, tasks, config(Method::Noise));
    const auto maml = outer_gradient(p, tasks, config(Method::Maml));
    EXPECT_FALSE(noise.grads[0] == maml.grads[0]);
}

TEST(OuterStep, ZeroGradientSgdIsIdentity) {
    const ParamSet p = init_params(MlpSpec{}, 9);
    MetaConfig cfg;
    cfg.optimizer = OptimizerKind::Sgd;
    std::vector<Array> zeros;
    for (const auto& a : p.values()) zeros.emplace_back(a.shape());
    EXPECT_TRUE(bitwise_equal(outer_step(p, {}, zeros, cfg).first, p));
}

TEST(OuterStep, FirstAdamStepIsAboutBeta) {
    auto layout = std::make_shared<std::vector<ParamInfo>>(std::vector<ParamInfo>{{"x", Partition::MetaHead, {1, 1}}});
    const ParamSet p(layout, {Array::matrix(1, 1, {0.5})});
    const MetaConfig cfg;
    const std::vector<Array> g{Array::matrix(1, 1, {1.0})};
    const auto [next, opt] = outer_step(p, {}, g, cfg);
    EXPECT_NEAR(p[0][0] - next[0][0], cfg.outer_lr / (1.0 + cfg.adam_eps), 1e-15);
    EXPECT_EQ(opt.step, 1u);
}

TEST(OuterStep, AdamIsNotAdditiveButSgdIs) {
    auto layout = std::make_shared<std::vector<ParamInfo>>(std::vector<ParamInfo>{{"x", Partition::MetaHead, {1, 2}}});
    const ParamSet p(layout, {Array::matrix(1, 2, {0.5, -0.5})});
    const std::vector<Array> g1{Array::matrix(1, 2, {0.25, 2.0})}, g2{Array::matrix(1, 2, {0.5, -1.0})};
    const std::vector<Array> sum{Array::matrix(1, 2, {0.75, 1.0})};
    for (OptimizerKind kind : {OptimizerKind::Sgd, OptimizerKind::Adam}) {
        MetaConfig cfg;
        cfg.optimizer = kind;
        const auto [a, s1] = outer_step(p, {}, g1, cfg);
        const auto twice = outer_step(a, s1, g2, cfg).first;
        const auto once = outer_step(p, {}, sum, cfg).first;
        const double gap = std::abs(twice[0][0] - once[0][0]) + std::abs(twice[0][1] - once[0][1]);
        if (kind == OptimizerKind::Sgd) EXPECT_LT(gap, 1e-15);
        else EXPECT_GT(gap, 1e-4);
    }
}

TEST(OuterStep, RejectsMismatchAndNonFinite) {
    const ParamSet p = init_params(MlpSpec{}, 9);
    const MetaConfig cfg;
    EXPECT_THROW(outer_step(p, {}, std::vector<Array>{}, cfg), ShapeError);
    std::vector<Array> g;
    for (const auto& a : p.values()) g.emplace_back(a.shape());
    g[0][0] = std::nan("");
    EXPECT_THROW(outer_step(p, {}, g, cfg), NumericError);
}

TEST(OuterStep, MaskKeepsEntriesBitwise) {
    const ParamSet p = init_params(MlpSpec{}, 10);
    EXPECT_EQ(trainable_mask(p, Method::Noise)[p.indices(Partition::CoHead)[0]], false);
    EXPECT_EQ(trainable_mask(p, Method::Cml)[p.indices(Partition::CoHead)[0]], true);
    std::vector<Array> g;
    for (const auto& a : p.values()) g.emplace_back(a.shape(), 1.0);
    const ParamSet q = outer_step(p, {}, g, MetaConfig{}, trainable_mask(p, Method::Noise)).first;
    for (std::size_t i : p.indices(Partition::CoHead)) EXPECT_EQ(q[i], p[i]);
    EXPECT_FALSE(q[0] == p[0]);
}

namespace {

TaskSource source(std::uint64_t seed) { return sine_source(seed, 5); }

}  // namespace

TEST(MetaTrain, ZeroIterationsReturnsInit) {
    const ParamSet p = init_params(MlpSpec{}, 11);
    const TrainResult r = meta_train(config(Method::Cml), p, source(11), 0);
    EXPECT_TRUE(bitwise_equal(r.params, p));
    EXPECT_TRUE(r.history.empty());
}

TEST(MetaTrain, IdenticalSeedsGiveIdenticalParams) {
    const ParamSet p = init_params(MlpSpec{}, 12);
    const TrainResult a = meta_train(config(Method::Cml), p, source(12), 25);
    const TrainResult b = meta_train(config(Method::Cml), p, source(12), 25);
    EXPECT_TRUE(bitwise_equal(a.params, b.params));
    EXPECT_EQ(a.history.back().iteration, 25u);
}

TEST(MetaTrain, ResumingMatchesOneLongRun) {
    const ParamSet p = init_params(MlpSpec{}, 13);
    const MetaConfig cfg = config(Method::Cml);
    const TrainResult full = meta_train(cfg, p, source(13), 20);
    const TrainResult half = meta_train(cfg, p, source(13), 10);
    const TrainResult rest = meta_train(cfg, half.params, source(13), 10, {}, half.opt, 10);
    EXPECT_TRUE(bitwise_equal(full.params, rest.params));
    EXPECT_EQ(rest.history.front().iteration, 11u);
}

TEST(MetaTrain, NoiseNeverMovesCoHead) {
    const ParamSet p = init_params(MlpSpec{}, 14);
    const TrainResult r = meta_train(config(Method::Noise), p, source(14), 100);
    for (std::size_t i : p.indices(Partition::CoHead)) EXPECT_EQ(r.params[i], p[i]);
    EXPECT_FALSE(bitwise_equal(r.params, p));
}

TEST(MetaTrain, NoiseWithZeroGammaFollowsMaml) {
    const ParamSet p = init_params(MlpSpec{}, 15);
    const TrainResult noise = meta_train(config(Method::Noise, 0.0), p, source(15), 30);
    const TrainResult maml = meta_train(config(Method::Maml), p, source(15), 30);
    EXPECT_TRUE(bitwise_equal(noise.params, maml.params));
}

TEST(MetaTrain, ClAndCmlShareTheStartingPoint) {
    const ParamSet p = init_params(MlpSpec{}, 16);
    EXPECT_TRUE(bitwise_equal(meta_train(config(Method::Cl), p, source(16), 0).params,
                              meta_train(config(Method::Cml), p, source(16), 0).params));
    std::vector<ParamSet> cl_seen, cml_seen;
    meta_train(config(Method::Cl), p, source(16), 1, [&](const IterationStats&, const ParamSet& q) { cl_seen.push_back(q); });
    meta_train(config(Method::Cml), p, source(16), 1, [&](const IterationStats&, const ParamSet& q) { cml_seen.push_back(q); });
    EXPECT_EQ(cl_seen.size(), 1u);
    EXPECT_FALSE(bitwise_equal(cl_seen[0], cml_seen[0]));
}

TEST(MetaTrain, ClReportsNoFreezeChecks) {
    const TrainResult r = meta_train(config(Method::Cl), init_params(MlpSpec{}, 17), source(17), 5);
    for (const auto& s : r.history) EXPECT_EQ(s.freeze_violations, 0u);
}

TEST(MetaTrain, LossDecreasesOnSinusoids) {
    const TrainResult r = meta_train(config(Method::Cml), init_params(MlpSpec{}, 18), source(18), 1500);
    double early = 0.0, late = 0.0;
    for (std::size_t i = 0; i < 200; ++i) {
        early += r.history[i].meta_loss_sum;
        late += r.history[r.history.size() - 1 - i].meta_loss_sum;
    }
    EXPECT_LT(late, 0.6 * early);
}

TEST(MetaTrain, DivergenceReportsIteration) {
    MetaConfig cfg = config(Method::Maml);
    cfg.inner_lr = 50.0;
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.outer_lr = 10.0;
    try {
        meta_train(cfg, init_params(MlpSpec{}, 19), source(19), 100);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_GE(e.iteration(), 1u);
        EXPECT_LE(e.iteration(), 100u);
    }
}

TEST(MetaTest, ZeroStepIsUnadaptedQueryLoss) {
    const ParamSet p = init_params(MlpSpec{}, 20);
    const auto tasks = sine_batch(20, 3);
    MetaConfig cfg;
    cfg.inner_lr = 0.0;
    const TestResult r = meta_test(p, tasks, TestMode::Cml, cfg);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        Graph g;
        const ParamVars v = bind(g, p);
        const double want = task_loss(g, forward_meta(g, v, Var::constant(tasks[i].query.inputs)).output, tasks[i].query,
                                      tasks[i].kind).value().item();
        EXPECT_EQ(r.losses[i], want);
    }
}

TEST(MetaTest, CmlModeNeverEvaluatesCoHead) {
    const ParamSet p = init_params(MlpSpec{}, 21);
    const TestResult r = meta_test(p, sine_batch(21, 5), TestMode::Cml, MetaConfig{});
    EXPECT_EQ(r.forward_co_evaluations, 0u);
    EXPECT_EQ(r.forward_meta_evaluations, 10u);
}

TEST(MetaTest, DaggerModeNeverReadsMetaHead) {
    const ParamSet p = init_params(MlpSpec{}, 22);
    const auto tasks = sine_batch(22, 3);
    const TestResult with = meta_test(p, tasks, TestMode::CmlDagger, MetaConfig{});
    const TestResult without = meta_test(p.without(Partition::MetaHead), tasks, TestMode::CmlDagger, MetaConfig{});
    EXPECT_EQ(with.losses, without.losses);
    EXPECT_EQ(without.forward_meta_evaluations, 0u);
    EXPECT_THROW(meta_test(p.without(Partition::MetaHead), tasks, TestMode::Cml, MetaConfig{}), std::invalid_argument);
}

TEST(MetaTest, CmlModeOnMamlParamsIsPlainMamlTesting) {
    const ParamSet p = meta_train(config(Method::Maml), init_params(MlpSpec{}, 23), source(23), 20).params;
    const auto tasks = sine_batch(24, 4);
    MetaConfig cfg = config(Method::Maml);
    const TestResult r = meta_test(p, tasks, TestMode::Cml, cfg);
    cfg.second_order = false;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        Graph g;
        const AdaptedParams a = inner_adapt(g, bind(g, p), tasks[i], cfg);
        const double want = task_loss(g, forward_meta(g, a.params, Var::constant(tasks[i].query.inputs)).output, tasks[i].query,
                                      tasks[i].kind).value().item();
        EXPECT_EQ(r.losses[i], want);
    }
}

TEST(MetaTest, ClassificationReportsAccuracy) {
    TaskFamily fam;
    fam.kind = TaskKind::Classification;
    std::vector<Task> tasks;
    const Rng root(25);
    for (std::uint64_t i = 0; i < 4; ++i) {
        Rng r = root.split(i);
        tasks.push_back(fam.sample_test(r));
    }
    const ParamSet p = init_params(MlpSpec{20, {16}, 5, {8}}, 25);
    const TestResult r = meta_test(p, tasks, TestMode::Cml, MetaConfig{});
    ASSERT_EQ(r.accuracies.size(), 4u);
    for (double a : r.accuracies) {
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0);
    }
    EXPECT_EQ(accuracy(Array::matrix({{0.1, 0.9}, {0.8, 0.2}}), {1, 1}), 0.5);
}

TEST(ParameterCounts, TrainAndTestFootprints) {
    const ParamSet p = init_params(MlpSpec{}, 0);
    const auto maml = parameter_counts(p, Method::Maml);
    const auto cml = parameter_counts(p, Method::Cml);
    EXPECT_EQ(maml.train, 1761u);
    EXPECT_EQ(cml.train, 1761u + 1681u);
    EXPECT_EQ(cml.test, maml.test);
    EXPECT_EQ(parameter_counts(p, Method::Cml, TestMode::CmlDagger).test, 1720u + 1681u);
}
