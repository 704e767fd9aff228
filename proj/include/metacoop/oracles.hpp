#pragma once

// Self-checks: finite-difference oracles for every op and for the outer
// losses, analytic higher-derivative cases, and invariant suites for the
// meta-engine and the diagnostics. `run_selftest` runs the lot.

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "metacoop/autodiff.hpp"
#include "metacoop/diagnostics.hpp"
#include "metacoop/meta.hpp"
#include "metacoop/model.hpp"
#include "metacoop/rng.hpp"
#include "metacoop/tasks.hpp"

namespace metacoop {

struct CheckResult {
    std::string name;
    bool passed = false;
    double worst = 0.0;  // largest observed error, or a count for invariant checks
    double tolerance = 0.0;
    std::string detail;
};

inline constexpr double kOpFdStep = 1e-5;
inline constexpr double kOpGradTolerance = 1e-4;
inline constexpr double kHigherOrderTolerance = 1e-6;
inline constexpr double kMetaFdStep = 1e-4;
inline constexpr double kMetaGradTolerance = 1e-3;
inline constexpr double kCollapseTolerance = 1e-12;
inline constexpr double kIdentityTolerance = 1e-10;
inline constexpr double kCkaTolerance = 1e-10;

// ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("relative_error: length mismatch");
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double scale = std::sqrt(std::max(na, nb));
    if (scale == 0.0) return std::sqrt(diff) == 0.0 ? 0.0 : INFINITY;
    return std::sqrt(diff) / scale;
}

// max_k |a_k - b_k| / max(|a_k|, |b_k|, floor)
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
    if (a.size() != b.size()) throw ShapeError("max_relative_error: length mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
    }
    return worst;
}

inline std::vector<double> flatten(std::span<const Array> arrays) {
    std::vector<double> out;
    for (const auto& a : arrays) out.insert(out.end(), a.values().begin(), a.values().end());
    return out;
}

// Central differences of f w.r.t. every entry of inputs[which].
inline Array numeric_gradient(const std::function<double(const std::vector<Array>&)>& f, std::vector<Array> inputs,
                              std::size_t which, double h) {
    Array grad(inputs[which].shape());
    for (std::size_t k = 0; k < grad.size(); ++k) {
        const double orig = inputs[which][k];
        inputs[which][k] = orig + h;
        const double up = f(inputs);
        inputs[which][k] = orig - h;
        const double down = f(inputs);
        inputs[which][k] = orig;
        grad[k] = (up - down) / (2.0 * h);
    }
    return grad;
}

namespace oracle {

inline Array random_array(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Array a(std::move(shape));
    for (std::size_t k = 0; k < a.size(); ++k) a[k] = rng.uniform(lo, hi);
    return a;
}

// Entries bounded away from zero so relu kinks stay out of the stencil.
inline Array kink_free(Rng& rng, Shape shape) {
    Array a(std::move(shape));
    for (std::size_t k = 0; k < a.size(); ++k) a[k] = rng.uniform(0.05, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    return a;
}

inline std::size_t dim(Rng& rng) { return 1 + rng.index(5); }

inline std::vector<int> cyclic_labels(std::size_t n, std::size_t classes) {
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>((i * 7 + 3) % classes);
    return labels;
}

struct OpCase {
    std::string name;
    std::function<std::vector<Array>(Rng&)> inputs;
    std::function<Var(Graph&, const std::vector<Var>&)> apply;
};

inline std::vector<OpCase> op_cases() {
    using V = const std::vector<Var>&;
    std::vector<OpCase> c;
    c.push_back({"matmul", [](Rng& r) { auto n = dim(r), k = dim(r), m = dim(r); return std::vector{random_array(r, {n, k}), random_array(r, {k, m})}; },
                 [](Graph& g, V v) { return g.matmul(v[0], v[1]); }});
    c.push_back({"matmul_nt", [](Rng& r) { auto n = dim(r), k = dim(r), m = dim(r); return std::vector{random_array(r, {n, k}), random_array(r, {m, k})}; },
                 [](Graph& g, V v) { return g.matmul_nt(v[0], v[1]); }});
    c.push_back({"matmul_tn", [](Rng& r) { auto n = dim(r), k = dim(r), m = dim(r); return std::vector{random_array(r, {k, n}), random_array(r, {k, m})}; },
                 [](Graph& g, V v) { return g.matmul_tn(v[0], v[1]); }});
    c.push_back({"add", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m}), random_array(r, {n, m})}; },
                 [](Graph& g, V v) { return g.add(v[0], v[1]); }});
    c.push_back({"sub", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m}), random_array(r, {n, m})}; },
                 [](Graph& g, V v) { return g.sub(v[0], v[1]); }});
    c.push_back({"mul", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m}), random_array(r, {n, m})}; },
                 [](Graph& g, V v) { return g.mul(v[0], v[1]); }});
    c.push_back({"add_bias", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m}), random_array(r, {1, m})}; },
                 [](Graph& g, V v) { return g.add_bias(v[0], v[1]); }});
    c.push_back({"relu", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{kink_free(r, {n, m})}; },
                 [](Graph& g, V v) { return g.relu(v[0]); }});
    c.push_back({"relu_mask", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m}), kink_free(r, {n, m})}; },
                 [](Graph& g, V v) { return g.relu_mask(v[0], v[1]); }});
    c.push_back({"scale", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m})}; },
                 [](Graph& g, V v) { return g.scale(v[0], -1.7); }});
    c.push_back({"square", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m})}; },
                 [](Graph& g, V v) { return g.square(v[0]); }});
    c.push_back({"mean", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m})}; },
                 [](Graph& g, V v) { return g.mean(v[0]); }});
    c.push_back({"sum", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m})}; },
                 [](Graph& g, V v) { return g.sum(v[0]); }});
    c.push_back({"softmax_xent", [](Rng& r) { auto n = dim(r), m = 1 + dim(r); return std::vector{random_array(r, {n, m}, -2.0, 2.0)}; },
                 [](Graph& g, V v) { return g.softmax_xent(v[0], cyclic_labels(v[0].value().rows(), v[0].value().cols())); }});
    c.push_back({"softmax", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m}, -2.0, 2.0)}; },
                 [](Graph& g, V v) { return g.softmax(v[0]); }});
    c.push_back({"concat_rows", [](Rng& r) { auto m = dim(r); return std::vector{random_array(r, {dim(r), m}), random_array(r, {dim(r), m}), random_array(r, {dim(r), m})}; },
                 [](Graph& g, V v) { return g.concat_rows(v); }});
    c.push_back({"slice_rows", [](Rng& r) { auto n = 1 + dim(r), m = dim(r); return std::vector{random_array(r, {n, m})}; },
                 [](Graph& g, V v) { const auto n = v[0].value().rows(); return g.slice_rows(v[0], n / 3, n - n / 3 - 1); }});
    c.push_back({"pad_rows", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m})}; },
                 [](Graph& g, V v) { return g.pad_rows(v[0], 1, v[0].value().rows() + 3); }});
    c.push_back({"transpose", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m})}; },
                 [](Graph& g, V v) { return g.transpose(v[0]); }});
    c.push_back({"sum_rows", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m})}; },
                 [](Graph& g, V v) { return g.sum_rows(v[0]); }});
    c.push_back({"row_sum", [](Rng& r) { auto n = dim(r), m = dim(r); return std::vector{random_array(r, {n, m})}; },
                 [](Graph& g, V v) { return g.row_sum(v[0]); }});
    c.push_back({"broadcast_rows", [](Rng& r) { auto m = dim(r); return std::vector{random_array(r, {1, m})}; },
                 [](Graph& g, V v) { return g.broadcast_rows(v[0], 3); }});
    c.push_back({"broadcast_cols", [](Rng& r) { auto n = dim(r); return std::vector{random_array(r, {n, 1})}; },
                 [](Graph& g, V v) { return g.broadcast_cols(v[0], 4); }});
    c.push_back({"broadcast_scalar", [](Rng& r) { return std::vector{Array::scalar(r.uniform(-1.0, 1.0))}; },
                 [](Graph& g, V v) { return g.broadcast_scalar(v[0], Shape{3, 2}); }});
    return c;
}

// <op(inputs), weights> as a scalar, so every output entry gets a distinct cotangent.
inline Var weighted_output(Graph& g, const OpCase& op, const std::vector<Var>& in, const Array& weights) {
    const Var out = op.apply(g, in);
    return g.sum(g.mul(out, Var::constant(weights)));
}

inline Array weights_for(const OpCase& op, const std::vector<Array>& inputs, Rng& rng) {
    Graph probe(Graph::Mode::Frozen);
    std::vector<Var> in;
    for (const auto& a : inputs) in.push_back(Var::constant(a));
    return random_array(rng, op.apply(probe, in).shape());
}

}  // namespace oracle

// Every op's reverse-mode gradient against central differences, `trials`
// random shapes and inputs per op.
inline std::vector<CheckResult> check_op_gradients(std::size_t trials = 100, std::uint64_t seed = 17) {
    std::vector<CheckResult> out;
    const Rng root(seed);
    std::uint64_t stream = 0;
    for (const auto& op : oracle::op_cases()) {
        CheckResult r{"op gradient " + op.name, true, 0.0, kOpGradTolerance, {}};
        for (std::size_t t = 0; t < trials; ++t) {
            Rng rng = root.split(stream++);
            const std::vector<Array> inputs = op.inputs(rng);
            const Array weights = oracle::weights_for(op, inputs, rng);
            Graph g;
            std::vector<Var> leaves;
            for (const auto& a : inputs) leaves.push_back(g.leaf(a));
            const auto grads = g.gradient(oracle::weighted_output(g, op, leaves, weights), leaves, false);
            auto f = [&](const std::vector<Array>& in) {
                Graph fg(Graph::Mode::Frozen);
                std::vector<Var> vs;
                for (const auto& a : in) vs.push_back(Var::constant(a));
                return oracle::weighted_output(fg, op, vs, weights).value().item();
            };
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                const Array fd = numeric_gradient(f, inputs, i, kOpFdStep);
                r.worst = std::max(r.worst, max_relative_error(grads[i].value().values(), fd.values()));
            }
        }
        r.passed = r.worst < r.tolerance;
        r.detail = std::to_string(trials) + " trials";
        out.push_back(std::move(r));
    }
    return out;
}

// Hessian-vector products and a third derivative against closed forms.
inline std::vector<CheckResult> check_higher_derivatives(std::uint64_t seed = 23) {
    std::vector<CheckResult> out;
    Rng rng(seed);
    auto finish = [&](std::string name, std::span<const double> got, std::span<const double> want) {
        CheckResult r{std::move(name), false, max_relative_error(got, want), kHigherOrderTolerance, {}};
        r.passed = r.worst < r.tolerance;
        out.push_back(std::move(r));
    };
    // d/dx <grad f(x), v>
    auto hvp = [](Graph& g, const Var& loss, const Var& x, const Array& v) {
        const Var grad = g.gradient(loss, std::span(&x, 1), true)[0];
        const Var gv = g.sum(g.mul(grad, Var::constant(v)));
        return g.gradient(gv, std::span(&x, 1), false)[0].value();
    };

    {  // f = sum(x^3): H v = 6 x v
        const Array xv = oracle::random_array(rng, {4, 3});
        const Array v = oracle::random_array(rng, {4, 3});
        Graph g;
        const Var x = g.leaf(xv);
        const Array got = hvp(g, g.sum(g.mul(g.square(x), x)), x, v);
        Array want(xv.shape());
        for (std::size_t k = 0; k < want.size(); ++k) want[k] = 6.0 * xv[k] * v[k];
        finish("hvp cube", got.values(), want.values());
    }
    {  // f = sum(relu(x)^2): H v = 2 [x > 0] v
        const Array xv = oracle::kink_free(rng, {5, 2});
        const Array v = oracle::random_array(rng, {5, 2});
        Graph g;
        const Var x = g.leaf(xv);
        const Array got = hvp(g, g.sum(g.square(g.relu(x))), x, v);
        Array want(xv.shape());
        for (std::size_t k = 0; k < want.size(); ++k) want[k] = xv[k] > 0.0 ? 2.0 * v[k] : 0.0;
        finish("hvp relu square", got.values(), want.values());
    }
    {  // f = sum((A W)^2): H v = 2 A^T A V
        const Array a = oracle::random_array(rng, {6, 4});
        const Array wv = oracle::random_array(rng, {4, 3});
        const Array v = oracle::random_array(rng, {4, 3});
        Graph g;
        const Var w = g.leaf(wv);
        const Array got = hvp(g, g.sum(g.square(g.matmul(Var::constant(a), w))), w, v);
        Array want(wv.shape());
        for (std::size_t i = 0; i < 4; ++i) {
            for (std::size_t j = 0; j < 3; ++j) {
                double s = 0.0;
                for (std::size_t p = 0; p < 4; ++p) {
                    double ata = 0.0;
                    for (std::size_t n = 0; n < 6; ++n) ata += a.at(n, i) * a.at(n, p);
                    s += ata * v.at(p, j);
                }
                want.at(i, j) = 2.0 * s;
            }
        }
        finish("hvp linear least squares", got.values(), want.values());
    }
    {  // softmax cross-entropy: H v = (s * v - s (s . v)) / n per row
        const std::size_t n = 3, c = 4;
        const Array zv = oracle::random_array(rng, {n, c}, -2.0, 2.0);
        const Array v = oracle::random_array(rng, {n, c});
        Graph g;
        const Var z = g.leaf(zv);
        const Array got = hvp(g, g.softmax_xent(z, oracle::cyclic_labels(n, c)), z, v);
        const Array s = detail::softmax_rows(zv);
        Array want(zv.shape());
        for (std::size_t i = 0; i < n; ++i) {
            double sv = 0.0;
            for (std::size_t j = 0; j < c; ++j) sv += s.at(i, j) * v.at(i, j);
            for (std::size_t j = 0; j < c; ++j) want.at(i, j) = s.at(i, j) * (v.at(i, j) - sv) / static_cast<double>(n);
        }
        finish("hvp softmax cross-entropy", got.values(), want.values());
    }
    {  // d^2/dx^2 x^4 = 12 x^2 on [0.5, 2]
        const Array xv = oracle::random_array(rng, {8, 1}, 0.5, 2.0);
        Graph g;
        const Var x = g.leaf(xv);
        const Var d1 = g.gradient(g.sum(g.square(g.square(x))), std::span(&x, 1), true)[0];
        const Array got = g.gradient(g.sum(d1), std::span(&x, 1), false)[0].value();
        Array want(xv.shape());
        for (std::size_t k = 0; k < want.size(); ++k) want[k] = 12.0 * xv[k] * xv[k];
        finish("second derivative quartic", got.values(), want.values());
    }
    {  // d^3/dx^3 sum(x^4) = 24 x
        const Array xv = oracle::random_array(rng, {3, 3});
        Graph g;
        const Var x = g.leaf(xv);
        const Var x2 = g.square(x);
        const Var d1 = g.gradient(g.sum(g.square(x2)), std::span(&x, 1), true)[0];
        const Var d2 = g.gradient(g.sum(d1), std::span(&x, 1), true)[0];
        const Array got = g.gradient(g.sum(d2), std::span(&x, 1), false)[0].value();
        Array want(xv.shape());
        for (std::size_t k = 0; k < want.size(); ++k) want[k] = 24.0 * xv[k];
        finish("third derivative quartic", got.values(), want.values());
    }
    {  // one inner step on L_s = a w^2, outer L_q = b (w' - c)^2
        const double a = 0.7, b = 1.3, c = -0.4, alpha = 0.05, w0 = 0.9;
        const double w1 = w0 - alpha * 2.0 * a * w0;
        for (bool second : {true, false}) {
            Graph g;
            const Var w = g.leaf(Array::matrix(1, 1, {w0}));
            const Var inner = g.scale(g.sum(g.square(w)), a);
            Var grad = g.gradient(inner, std::span(&w, 1), second)[0];
            if (!second) grad = detach(grad);
            const Var adapted = g.sub(w, g.scale(grad, alpha));
            const Var outer = g.scale(g.sum(g.square(g.sub(adapted, Var::constant(Array::matrix(1, 1, {c}))))), b);
            const double got = g.gradient(outer, std::span(&w, 1), false)[0].value().item();
            const double want = 2.0 * b * (w1 - c) * (second ? 1.0 - 2.0 * a * alpha : 1.0);
            finish(second ? "scalar maml second order" : "scalar maml first order", std::span(&got, 1), std::span(&want, 1));
        }
    }
    return out;
}

// Small model (14 parameters) and task batch shared by the meta-gradient checks.
inline ParamSet oracle_model(std::uint64_t seed) { return init_params(MlpSpec{1, {3}, 1, {}}, seed); }

inline std::vector<Task> oracle_batch(std::uint64_t seed, std::size_t tasks = 2) {
    std::vector<Task> out;
    const Rng root(seed);
    for (std::size_t i = 0; i < tasks; ++i) {
        Rng r = root.split(i);
        out.push_back(sample_sine_task(r, 5, 10));
    }
    return out;
}

// Second-order meta-gradient of each outer loss against central differences
// on the meta-parameters.
inline std::vector<CheckResult> check_meta_gradients(std::uint64_t seed = 5) {
    struct Case {
        std::string name;
        Method method;
        double gamma;
    };
    const std::vector<Case> cases{{"maml", Method::Maml, 0.2},
                                  {"cml gamma 0.2", Method::Cml, 0.2},
                                  {"cml gamma 1.0", Method::Cml, 1.0},
                                  {"cl", Method::Cl, 0.2},
                                  {"noise", Method::Noise, 0.2}};
    const ParamSet params = oracle_model(seed);
    const std::vector<Task> tasks = oracle_batch(seed + 1);
    std::vector<CheckResult> out;
    for (const auto& c : cases) {
        MetaConfig cfg;
        cfg.method = c.method;
        cfg.gamma = c.gamma;
        cfg.inner_steps = 1;
        cfg.second_order = true;
        cfg.task_batch = tasks.size();
        const OuterGradient og = outer_gradient(params, tasks, cfg);
        auto f = [&](const std::vector<Array>& values) {
            Graph g;
            return build_outer_loss(g, bind(g, params.rebind(values)), tasks, cfg).total.value().item();
        };
        std::vector<Array> values(params.values().begin(), params.values().end());
        std::vector<Array> fd;
        for (std::size_t i = 0; i < values.size(); ++i) fd.push_back(numeric_gradient(f, values, i, kMetaFdStep));
        CheckResult r{"meta gradient " + c.name, false, max_relative_error(flatten(og.grads), flatten(fd)), kMetaGradTolerance, {}};
        r.passed = r.worst < r.tolerance;
        r.detail = std::to_string(params.size()) + " tensors, " + std::to_string(flatten(fd).size()) + " scalars";
        out.push_back(std::move(r));
    }
    return out;
}

inline TaskSource sine_source(std::uint64_t seed, std::size_t k_shot) {
    const Rng root = Rng(seed).split(1);
    TaskFamily family;
    family.k_shot = k_shot;
    return [root, family](std::uint64_t i) {
        Rng r = root.split(i);
        return family.sample_train(r);
    };
}

// CML training where every inner loop must leave the co head bitwise intact:
// the engine's per-task comparison plus an independent checksum each iteration.
inline CheckResult check_freeze_invariant(std::size_t iterations = 300, std::uint64_t seed = 3) {
    MetaConfig cfg;
    cfg.method = Method::Cml;
    const ParamSet init = init_params(MlpSpec{}, seed);
    const TaskSource source = sine_source(seed, 5);
    const Task probe = source(~std::uint64_t{0});
    std::size_t violations = 0, checksum_mismatches = 0;
    std::uint64_t last_co = checksum(init, Partition::CoHead);
    std::size_t co_updates = 0;
    meta_train(cfg, init, source, iterations, [&](const IterationStats& st, const ParamSet& p) {
        violations += st.freeze_violations;
        Graph g;
        const ParamVars meta = bind(g, p);
        const AdaptedParams adapted = inner_adapt(g, meta, probe, cfg);
        if (checksum(values_of(adapted.params), Partition::CoHead) != checksum(p, Partition::CoHead)) ++checksum_mismatches;
        const std::uint64_t co = checksum(p, Partition::CoHead);
        if (co != last_co) ++co_updates;
        last_co = co;
    });
    CheckResult r{"freeze invariant", false, static_cast<double>(violations + checksum_mismatches), 0.0, {}};
    // the outer loop must still move the co head, otherwise the check is vacuous
    r.passed = violations == 0 && checksum_mismatches == 0 && co_updates == iterations;
    r.detail = std::to_string(iterations) + " iterations, " + std::to_string(violations) + " engine violations, " +
               std::to_string(checksum_mismatches) + " checksum mismatches, co head updated in " + std::to_string(co_updates);
    return r;
}

// CML with gamma = 0 against MAML on the same task stream and initialization.
inline CheckResult check_gamma_collapse(std::size_t steps = 100, std::uint64_t seed = 11) {
    const ParamSet init = init_params(MlpSpec{}, seed);
    const TaskSource source = sine_source(seed, 5);
    auto trajectory = [&](Method m) {
        MetaConfig cfg;
        cfg.method = m;
        cfg.gamma = 0.0;
        std::vector<ParamSet> out;
        meta_train(cfg, init, source, steps, [&](const IterationStats&, const ParamSet& p) { out.push_back(p); });
        return out;
    };
    const auto cml = trajectory(Method::Cml);
    const auto maml = trajectory(Method::Maml);
    double worst = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t i = 0; i < init.size(); ++i) {
            if (init.partition(i) == Partition::CoHead) continue;
            for (std::size_t k = 0; k < init[i].size(); ++k) {
                const double a = cml[s][i][k], b = maml[s][i][k];
                const double scale = std::max(std::abs(a), std::abs(b));
                if (a != b) worst = std::max(worst, scale > 0.0 ? std::abs(a - b) / scale : INFINITY);
            }
        }
    }
    CheckResult r{"gamma collapse", worst < kCollapseTolerance, worst, kCollapseTolerance, std::to_string(steps) + " steps"};
    return r;
}

// <G, G + G-bar> = ||G||^2 + sum_j <g_j, gbar_j> on frozen CML batches, and a
// descent step along G + G-bar whenever every layer's inner product is positive.
inline std::vector<CheckResult> check_descent_identity(std::size_t batches = 50, std::size_t warmup = 100, std::uint64_t seed = 29) {
    MetaConfig cfg;
    cfg.method = Method::Cml;
    const TaskSource source = sine_source(seed, 5);
    ParamSet params = meta_train(cfg, init_params(MlpSpec{}, seed), source, warmup).params;
    const TaskSource probes = sine_source(seed + 1000, 5);
    const auto grid = default_alpha_grid();
    double worst = 0.0;
    std::size_t positive = 0, descended = 0;
    for (std::size_t b = 0; b < batches; ++b) {
        std::vector<Task> tasks = draw_batch(probes, b, cfg.task_batch);
        const GradReport report = grad_report(params, tasks, cfg, b);
        const DescentCheck dc = descent_check(report, params, meta_objective(tasks, cfg), grid);
        worst = std::max(worst, dc.identity_rel_error);
        if (dc.all_positive) {
            ++positive;
            if (dc.descent_alpha) ++descended;
        }
    }
    CheckResult id{"descent identity", worst < kIdentityTolerance, worst, kIdentityTolerance, std::to_string(batches) + " batches"};
    CheckResult ds{"descent step", descended == positive, static_cast<double>(positive - descended), 0.0,
                   std::to_string(descended) + " of " + std::to_string(positive) + " all-positive batches descend"};
    return {id, ds};
}

namespace oracle {

// Q R decomposition by modified Gram-Schmidt; returns Q.
inline Array random_orthogonal(Rng& rng, std::size_t d) {
    Array q = random_array(rng, {d, d});
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t p = 0; p < j; ++p) {
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) s += q.at(i, p) * q.at(i, j);
            for (std::size_t i = 0; i < d; ++i) q.at(i, j) -= s * q.at(i, p);
        }
        double n = 0.0;
        for (std::size_t i = 0; i < d; ++i) n += q.at(i, j) * q.at(i, j);
        n = std::sqrt(n);
        for (std::size_t i = 0; i < d; ++i) q.at(i, j) /= n;
    }
    return q;
}

inline Array matmul(const Array& a, const Array& b) { return detail::matmul(a, b, false, false, Op::MatMul); }

// HSIC(K, L) = tr(K H L H) / (n - 1)^2 with explicit n x n Gram matrices.
inline double hsic(const Array& x, const Array& y) {
    const std::size_t n = x.rows();
    auto gram = [n](const Array& a) {
        Array k(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t p = 0; p < a.cols(); ++p) s += a.at(i, p) * a.at(j, p);
                k.at(i, j) = s;
            }
        return k;
    };
    Array h(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) h.at(i, j) = (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(n);
    const Array khlh = matmul(matmul(matmul(gram(x), h), gram(y)), h);
    double tr = 0.0;
    for (std::size_t i = 0; i < n; ++i) tr += khlh.at(i, i);
    return tr / static_cast<double>((n - 1) * (n - 1));
}

inline double cka_by_hsic(const Array& x, const Array& y) { return hsic(x, y) / std::sqrt(hsic(x, x) * hsic(y, y)); }

}  // namespace oracle

inline std::vector<CheckResult> check_diagnostics_properties(std::size_t pairs = 20, std::uint64_t seed = 31) {
    std::vector<CheckResult> out;
    const Rng root(seed);
    double self = 0.0, orth = 0.0, iso = 0.0, hsic = 0.0;
    for (std::size_t t = 0; t < pairs; ++t) {
        Rng rng = root.split(t);
        const std::size_t n = 5 + rng.index(20), p = 1 + rng.index(8), q = 1 + rng.index(8);
        const Array x = oracle::random_array(rng, {n, p}, -3.0, 3.0);
        const Array y = oracle::random_array(rng, {n, q}, -3.0, 3.0);
        self = std::max(self, std::abs(linear_cka(x, x).value - 1.0));
        const double base = linear_cka(x, y).value;
        const Array rotated = oracle::matmul(x, oracle::random_orthogonal(rng, p));
        orth = std::max(orth, std::abs(linear_cka(rotated, y).value - base));
        Array scaled = y;
        const double c = rng.uniform(0.01, 100.0);
        for (std::size_t k = 0; k < scaled.size(); ++k) scaled[k] *= c;
        iso = std::max(iso, std::abs(linear_cka(x, scaled).value - base));
        hsic = std::max(hsic, std::abs(oracle::cka_by_hsic(x, y) - base));
    }
    const std::string detail = std::to_string(pairs) + " random pairs";
    out.push_back({"cka self similarity", self < kCkaTolerance, self, kCkaTolerance, detail});
    out.push_back({"cka orthogonal invariance", orth < kCkaTolerance, orth, kCkaTolerance, detail});
    out.push_back({"cka isotropic scaling invariance", iso < kCkaTolerance, iso, kCkaTolerance, detail});
    out.push_back({"cka matches hsic oracle", hsic < kCkaTolerance, hsic, kCkaTolerance, detail});

    Rng rng = root.split(pairs);
    std::vector<double> a(7);
    for (auto& v : a) v = rng.uniform(-2.0, 2.0);
    std::vector<double> neg(a.size()), twice(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        neg[i] = -a[i];
        twice[i] = 2.0 * a[i];
    }
    const std::vector<double> e1{1.0, 1.0, 0.0}, e2{1.0, -1.0, 3.0}, zero{0.0, 0.0, 0.0};
    const Similarity s_self = cosine_similarity(a, a), s_neg = cosine_similarity(a, neg), s_twice = cosine_similarity(a, twice);
    const Similarity s_orth = cosine_similarity(e1, e2), s_zero = cosine_similarity(e1, zero);
    const bool exact = s_self.value == 1.0 && s_neg.value == -1.0 && s_twice.value == 1.0 && s_orth.value == 0.0 &&
                       s_zero.degenerate && s_zero.value == 0.0 && !s_self.degenerate;
    out.push_back({"cosine trivial cases", exact, exact ? 0.0 : 1.0, 0.0, "self, negation, scaling, orthogonal, zero vector"});
    return out;
}

// Criteria-style groups, each a list of checks.
struct SelftestGroup {
    std::string name;
    std::vector<CheckResult> checks;
    double seconds = 0.0;

    bool passed() const {
        for (const auto& c : checks)
            if (!c.passed) return false;
        return !checks.empty();
    }
};

inline std::vector<SelftestGroup> run_selftest(std::ostream* log = nullptr) {
    std::vector<SelftestGroup> groups;
    auto timed = [&](std::string name, auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        SelftestGroup g{std::move(name), fn(), 0.0};
        g.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (log) {
            for (const auto& c : g.checks) {
                *log << (c.passed ? "  ok    " : "  FAIL  ") << std::left << std::setw(36) << c.name << " worst " << std::scientific
                     << std::setprecision(3) << c.worst << " tol " << c.tolerance << std::defaultfloat;
                if (!c.detail.empty()) *log << "  (" << c.detail << ')';
                *log << '\n';
            }
            *log << (g.passed() ? "PASS " : "FAIL ") << g.name << " [" << std::fixed << std::setprecision(2) << g.seconds << "s]\n"
                 << std::defaultfloat;
        }
        groups.push_back(std::move(g));
    };
    timed("meta-gradient oracle", [] { return check_meta_gradients(); });
    timed("autodiff oracle", [] {
        auto checks = check_op_gradients();
        for (auto& c : check_higher_derivatives()) checks.push_back(std::move(c));
        return checks;
    });
    timed("freeze invariant", [] { return std::vector{check_freeze_invariant()}; });
    timed("gamma collapse", [] { return std::vector{check_gamma_collapse()}; });
    timed("descent identity", [] { return check_descent_identity(); });
    timed("diagnostics properties", [] { return check_diagnostics_properties(); });
    return groups;
}

}  // namespace metacoop
