#pragma once

// Bilevel meta-learning loops.
//
// Inner loop: M plain gradient steps on the support loss of the meta model
// (feature extractor + meta-learner head). The co-learner head is never
// adapted, except by the CL baseline.
//
// Outer objective, summed over the task batch:
//   MAML   sum_i L_meta(adapted_i; query_i)
//   CML    sum_i L_meta(adapted_i; query_i) + gamma * L_co(adapted fe_i, co; query_i)
//   CL     as CML, but the co head is adapted in the inner loop too
//   NOISE  as CML, but the co head stays at its random initialization

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metacoop/autodiff.hpp"
#include "metacoop/model.hpp"
#include "metacoop/tasks.hpp"

namespace metacoop {

enum class Method : std::uint8_t { Maml, Cml, Cl, Noise };
enum class OptimizerKind : std::uint8_t { Sgd, Adam };
enum class TestMode : std::uint8_t { Cml, CmlDagger };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::Maml: return "maml";
        case Method::Cml: return "cml";
        case Method::Cl: return "cl";
        case Method::Noise: return "noise";
    }
    return "?";
}

inline Method parse_method(std::string_view s) {
    if (s == "maml") return Method::Maml;
    if (s == "cml") return Method::Cml;
    if (s == "cl") return Method::Cl;
    if (s == "noise") return Method::Noise;
    throw std::invalid_argument("unknown method '" + std::string(s) + "'");
}

inline const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adam") return OptimizerKind::Adam;
    throw std::invalid_argument("unknown optimizer '" + std::string(s) + "'");
}

struct MetaConfig {
    Method method = Method::Cml;
    double inner_lr = 0.01;  // alpha
    double outer_lr = 1e-3;  // beta
    double gamma = 0.2;
    std::size_t inner_steps = 1;
    std::size_t task_batch = 4;
    bool second_order = true;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(inner_lr >= 0.0) || !std::isfinite(inner_lr)) throw std::invalid_argument("MetaConfig: inner_lr must be finite and >= 0");
        if (!(outer_lr > 0.0) || !std::isfinite(outer_lr)) throw std::invalid_argument("MetaConfig: outer_lr must be finite and > 0");
        if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("MetaConfig: gamma must be finite and >= 0");
        if (inner_steps < 1) throw std::invalid_argument("MetaConfig: inner_steps must be >= 1");
        if (task_batch < 1) throw std::invalid_argument("MetaConfig: task_batch must be >= 1");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(adam_eps > 0.0)) {
            throw std::invalid_argument("MetaConfig: adam coefficients out of range");
        }
    }
};

// Aborts training; carries the outer iteration that produced a non-finite value.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(std::size_t iteration, const std::string& what)
        : std::runtime_error("diverged at iteration " + std::to_string(iteration) + ": " + what), iteration_(iteration) {}
    std::size_t iteration() const noexcept { return iteration_; }

private:
    std::size_t iteration_;
};

// MSE for regression, mean softmax cross-entropy for classification.
inline Var task_loss(Graph& g, const Var& prediction, const Split& split, TaskKind kind) {
    if (kind == TaskKind::Regression) {
        return g.mean(g.square(g.sub(prediction, Var::constant(split.targets))));
    }
    return g.softmax_xent(prediction, split.labels);
}

struct AdaptedParams {
    ParamVars params;  // adapted fe/head (and co for CL); co otherwise the meta-level Vars
};

namespace detail {

inline bool adapts_co(Method m) { return m == Method::Cl; }
inline bool uses_co(Method m) { return m != Method::Maml; }

inline Var add_scaled(Graph& g, const Var& a, const Var& b, double gamma) { return g.add(a, g.scale(b, gamma)); }

}  // namespace detail

// Indices of the entries the inner loop updates.
inline std::vector<std::size_t> inner_indices(const ParamVars& p, Method method) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const Partition part = p.partition(i);
        if (part != Partition::CoHead || detail::adapts_co(method)) idx.push_back(i);
    }
    return idx;
}

// M gradient steps on the support split. With second_order the update chain
// stays differentiable; otherwise each step's gradient enters as a constant.
inline AdaptedParams inner_adapt(Graph& g, const ParamVars& meta, const Task& task, const MetaConfig& cfg) {
    if (cfg.inner_steps < 1) throw std::invalid_argument("inner_adapt: inner_steps must be >= 1");
    const auto idx = inner_indices(meta, cfg.method);
    const Var x = Var::constant(task.support.inputs);
    ParamVars cur = meta;
    for (std::size_t step = 0; step < cfg.inner_steps; ++step) {
        const MetaForward fwd = forward_meta(g, cur, x);
        Var loss = task_loss(g, fwd.output, task.support, task.kind);
        if (detail::adapts_co(cfg.method)) {
            loss = detail::add_scaled(g, loss, task_loss(g, forward_co(g, cur, fwd.features), task.support, task.kind), cfg.gamma);
        }
        std::vector<Var> wrt;
        wrt.reserve(idx.size());
        for (std::size_t i : idx) wrt.push_back(cur[i]);
        const auto grads = g.gradient(loss, wrt, cfg.second_order);
        ParamVars next = cur;
        for (std::size_t k = 0; k < idx.size(); ++k) {
            next[idx[k]] = g.sub(cur[idx[k]], g.scale(grads[k], cfg.inner_lr));
        }
        cur = std::move(next);
    }
    return {std::move(cur)};
}

// Outer objective with its two components kept separately.
struct OuterLoss {
    Var total;
    Var meta_sum;               // sum_i L_meta
    Var co_sum;                 // sum_i L_co (empty for MAML)
    std::size_t freeze_violations = 0;  // tasks whose adapted co head differs from the meta-level one
};

inline OuterLoss build_outer_loss(Graph& g, const ParamVars& meta, std::span<const Task> tasks, const MetaConfig& cfg) {
    if (tasks.empty()) throw std::invalid_argument("outer loss: empty task batch");
    const bool with_co = detail::uses_co(cfg.method);
    const auto co_idx = meta.indices(Partition::CoHead);
    OuterLoss out;
    for (const Task& task : tasks) {
        const AdaptedParams adapted = inner_adapt(g, meta, task, cfg);
        if (!detail::adapts_co(cfg.method)) {
            for (std::size_t i : co_idx) {
                if (!(adapted.params[i].value() == meta[i].value())) {
                    ++out.freeze_violations;
                    break;
                }
            }
        }
        const MetaForward fwd = forward_meta(g, adapted.params, Var::constant(task.query.inputs));
        const Var meta_term = task_loss(g, fwd.output, task.query, task.kind);
        Var task_total = meta_term;
        Var co_term;
        if (with_co) {
            co_term = task_loss(g, forward_co(g, adapted.params, fwd.features), task.query, task.kind);
            task_total = detail::add_scaled(g, meta_term, co_term, cfg.gamma);
        }
        if (out.total.empty()) {
            out.total = task_total;
            out.meta_sum = meta_term;
            out.co_sum = co_term;
        } else {
            out.total = g.add(out.total, task_total);
            out.meta_sum = g.add(out.meta_sum, meta_term);
            if (with_co) out.co_sum = g.add(out.co_sum, co_term);
        }
    }
    return out;
}

namespace detail {

inline void require_method(const MetaConfig& cfg, Method m, const char* who) {
    if (cfg.method != m) throw std::invalid_argument(std::string(who) + ": config method is " + method_name(cfg.method));
}

}  // namespace detail

inline Var maml_outer_loss(Graph& g, const ParamVars& meta, std::span<const Task> tasks, const MetaConfig& cfg) {
    MetaConfig c = cfg;
    c.method = Method::Maml;
    return build_outer_loss(g, meta, tasks, c).total;
}

inline Var cml_outer_loss(Graph& g, const ParamVars& meta, std::span<const Task> tasks, const MetaConfig& cfg) {
    detail::require_method(cfg, Method::Cml, "cml_outer_loss");
    return build_outer_loss(g, meta, tasks, cfg).total;
}

inline Var cl_outer_loss(Graph& g, const ParamVars& meta, std::span<const Task> tasks, const MetaConfig& cfg) {
    detail::require_method(cfg, Method::Cl, "cl_outer_loss");
    return build_outer_loss(g, meta, tasks, cfg).total;
}

inline Var noise_outer_loss(Graph& g, const ParamVars& meta, std::span<const Task> tasks, const MetaConfig& cfg) {
    detail::require_method(cfg, Method::Noise, "noise_outer_loss");
    return build_outer_loss(g, meta, tasks, cfg).total;
}

// Entries the outer step updates: the co head only for CML and CL.
inline std::vector<bool> trainable_mask(const ParamSet& p, Method method) {
    std::vector<bool> mask(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        mask[i] = p.partition(i) != Partition::CoHead || method == Method::Cml || method == Method::Cl;
    }
    return mask;
}

struct OptState {
    std::size_t step = 0;
    std::vector<Array> first_moment;
    std::vector<Array> second_moment;
};

// p <- p - beta * g (SGD) or the bias-corrected Adam update with step size beta.
// Entries with mask[i] == false are left untouched and keep their moments.
inline std::pair<ParamSet, OptState> outer_step(const ParamSet& params, OptState opt, std::span<const Array> grads,
                                                const MetaConfig& cfg, const std::vector<bool>& mask = {}) {
    if (grads.size() != params.size()) throw ShapeError("outer_step: gradient count does not match parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].shape() != params[i].shape()) throw ShapeError("outer_step: gradient shape mismatch for " + params.name(i));
        if (!grads[i].all_finite()) throw NumericError("outer_step: non-finite gradient for " + params.name(i));
    }
    auto updated = [&](std::size_t i) { return mask.empty() || mask[i]; };

    std::vector<Array> next(params.values().begin(), params.values().end());
    if (cfg.optimizer == OptimizerKind::Sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!updated(i)) continue;
            for (std::size_t k = 0; k < next[i].size(); ++k) next[i][k] -= cfg.outer_lr * grads[i][k];
        }
        ++opt.step;
        return {params.rebind(std::move(next)), std::move(opt)};
    }

    if (opt.first_moment.empty()) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            opt.first_moment.emplace_back(params[i].shape());
            opt.second_moment.emplace_back(params[i].shape());
        }
    }
    if (opt.first_moment.size() != params.size()) throw ShapeError("outer_step: optimizer state does not match parameters");
    ++opt.step;
    const double t = static_cast<double>(opt.step);
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, t);
    const double c2 = 1.0 - std::pow(b2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!updated(i)) continue;
        Array& m = opt.first_moment[i];
        Array& v = opt.second_moment[i];
        for (std::size_t k = 0; k < next[i].size(); ++k) {
            const double gk = grads[i][k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            next[i][k] -= cfg.outer_lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
    return {params.rebind(std::move(next)), std::move(opt)};
}

// Source of training tasks; index = iteration * task_batch + position in batch.
using TaskSource = std::function<Task(std::uint64_t index)>;

struct IterationStats {
    std::size_t iteration = 0;  // 1-based, counted after the update
    double loss_sum = 0.0;
    double loss_mean = 0.0;
    double meta_loss_sum = 0.0;
    double co_loss_sum = 0.0;
    std::size_t freeze_violations = 0;
};

using IterationObserver = std::function<void(const IterationStats&, const ParamSet& updated)>;

struct TrainResult {
    ParamSet params;
    OptState opt;
    std::vector<IterationStats> history;
};

struct OuterGradient {
    OuterLoss loss;
    std::vector<Array> grads;
};

// Outer loss and its gradient w.r.t. every meta-parameter for one batch.
inline OuterGradient outer_gradient(const ParamSet& params, std::span<const Task> tasks, const MetaConfig& cfg) {
    Graph g;
    const ParamVars meta = bind(g, params);
    OuterGradient out{build_outer_loss(g, meta, tasks, cfg), {}};
    const auto grads = g.gradient(out.loss.total, meta.values(), false);
    out.grads.reserve(grads.size());
    for (const auto& v : grads) out.grads.push_back(v.value());
    return out;
}

inline std::vector<Task> draw_batch(const TaskSource& source, std::size_t iteration, std::size_t batch) {
    std::vector<Task> tasks;
    tasks.reserve(batch);
    for (std::size_t j = 0; j < batch; ++j) tasks.push_back(source(static_cast<std::uint64_t>(iteration * batch + j)));
    return tasks;
}

inline TrainResult meta_train(const MetaConfig& cfg, const ParamSet& init, const TaskSource& source, std::size_t iterations,
                              const IterationObserver& observer = {}, OptState opt = {}, std::size_t first_iteration = 0) {
    cfg.validate();
    TrainResult result{init, std::move(opt), {}};
    const auto mask = trainable_mask(init, cfg.method);
    for (std::size_t it = first_iteration; it < first_iteration + iterations; ++it) {
        const std::vector<Task> tasks = draw_batch(source, it, cfg.task_batch);
        IterationStats stats;
        stats.iteration = it + 1;
        try {
            OuterGradient og = outer_gradient(result.params, tasks, cfg);
            stats.loss_sum = og.loss.total.value().item();
            stats.loss_mean = stats.loss_sum / static_cast<double>(cfg.task_batch);
            stats.meta_loss_sum = og.loss.meta_sum.value().item();
            stats.co_loss_sum = og.loss.co_sum.empty() ? 0.0 : og.loss.co_sum.value().item();
            stats.freeze_violations = og.loss.freeze_violations;
            auto [next, next_opt] = outer_step(result.params, std::move(result.opt), og.grads, cfg, mask);
            result.params = std::move(next);
            result.opt = std::move(next_opt);
        } catch (const NumericError& e) {
            throw DivergenceError(it + 1, e.what());
        }
        result.history.push_back(stats);
        if (observer) observer(stats, result.params);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Meta-testing
// ---------------------------------------------------------------------------

struct TestResult {
    std::vector<double> losses;      // per task: MSE or cross-entropy on the query split
    std::vector<double> accuracies;  // per task, classification only
    std::size_t forward_meta_evaluations = 0;
    std::size_t forward_co_evaluations = 0;

    static double mean(const std::vector<double>& v) {
        if (v.empty()) return 0.0;
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    }
    static double stddev(const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        const double mu = mean(v);
        double s = 0.0;
        for (double x : v) s += (x - mu) * (x - mu);
        return std::sqrt(s / static_cast<double>(v.size() - 1));
    }
};

inline double accuracy(const Array& logits, const std::vector<int>& labels) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j) {
            if (logits.at(i, j) > logits.at(i, best)) best = j;
        }
        if (static_cast<int>(best) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

// CML mode adapts fe + head on the support split and predicts with the head.
// CML-dagger mode adapts fe only, through the co head's loss, and predicts
// with the co head; the meta-learner head is never read.
inline TestResult meta_test(const ParamSet& params, std::span<const Task> tasks, TestMode mode, const MetaConfig& cfg) {
    const bool dagger = mode == TestMode::CmlDagger;
    if (!params.has(Partition::FeatureExtractor)) throw std::invalid_argument("meta_test: missing feature-extractor partition");
    if (!dagger && !params.has(Partition::MetaHead)) throw std::invalid_argument("meta_test: CML mode needs the meta-learner partition");
    if (dagger && !params.has(Partition::CoHead)) throw std::invalid_argument("meta_test: CML-dagger mode needs the co-learner partition");

    TestResult result;
    for (const Task& task : tasks) {
        Graph g;
        ParamVars cur = bind(g, params);
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < cur.size(); ++i) {
            const Partition p = cur.partition(i);
            if (p == Partition::FeatureExtractor || (!dagger && p == Partition::MetaHead)) idx.push_back(i);
        }
        auto predict = [&](const ParamVars& p, const Var& x) {
            const Var f = features(g, p, x);
            return dagger ? forward_co(g, p, f) : forward_head(g, p, f);
        };
        const Var xs = Var::constant(task.support.inputs);
        for (std::size_t step = 0; step < cfg.inner_steps; ++step) {
            const Var loss = task_loss(g, predict(cur, xs), task.support, task.kind);
            std::vector<Var> wrt;
            for (std::size_t i : idx) wrt.push_back(cur[i]);
            const auto grads = g.gradient(loss, wrt, false);
            ParamVars next = cur;
            for (std::size_t k = 0; k < idx.size(); ++k) next[idx[k]] = g.sub(cur[idx[k]], g.scale(grads[k], cfg.inner_lr));
            cur = std::move(next);
        }
        g.set_mode(Graph::Mode::Frozen);
        const Var out = predict(cur, Var::constant(task.query.inputs));
        result.losses.push_back(task_loss(g, out, task.query, task.kind).value().item());
        if (task.kind == TaskKind::Classification) result.accuracies.push_back(accuracy(out.value(), *task.query.labels));
        result.forward_meta_evaluations += g.tally_count("forward_meta");
        result.forward_co_evaluations += g.tally_count("forward_co");
    }
    return result;
}

// Parameters used during meta-training and at inference time.
struct ParameterCounts {
    std::size_t train = 0;
    std::size_t test = 0;
};

inline ParameterCounts parameter_counts(const ParamSet& p, Method method, TestMode mode = TestMode::Cml) {
    const std::size_t fe = count_params(p, Partition::FeatureExtractor);
    const std::size_t head = count_params(p, Partition::MetaHead);
    const std::size_t co = count_params(p, Partition::CoHead);
    ParameterCounts c;
    c.train = fe + head + (detail::uses_co(method) ? co : 0);
    c.test = fe + (mode == TestMode::Cml ? head : co);
    return c;
}

}  // namespace metacoop
