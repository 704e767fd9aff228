#pragma once

// Gradient-level measurements for the co-learner: meta-path vs co-path
// gradient similarity, per-layer gradient norms, linear CKA of
// representations before and after adaptation, and the descent-direction
// check for the augmented meta-gradient.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "metacoop/autodiff.hpp"
#include "metacoop/meta.hpp"
#include "metacoop/model.hpp"

namespace metacoop {

inline constexpr double kDegenerateNorm = 1e-12;

struct Similarity {
    double value = 0.0;
    bool degenerate = false;  // a norm fell below kDegenerateNorm; value is 0
};

inline Similarity cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
    const double aa = dot(a, a);
    const double bb = dot(b, b);
    if (!(std::sqrt(aa) >= kDegenerateNorm && std::sqrt(bb) >= kDegenerateNorm)) return {0.0, true};
    // one square root of the product keeps cos(a, a) == 1 exactly
    const double denom = std::isfinite(aa * bb) ? std::sqrt(aa * bb) : std::sqrt(aa) * std::sqrt(bb);
    return {std::clamp(dot(a, b) / denom, -1.0, 1.0), false};
}

// Gradients of the outer objective w.r.t. the meta-level feature extractor and
// meta head, split by path: meta_grad (G) from the meta-learner term and
// co_grad (G-bar) from the gamma-weighted co-learner term. co_grad is zero on
// meta-head entries. Entries are ordered as in the parameter set, co head excluded.
struct GradReport {
    std::size_t iteration = 0;
    std::vector<std::string> names;
    std::vector<Partition> partitions;
    std::vector<Array> meta_grad;
    std::vector<Array> co_grad;

    std::size_t size() const { return names.size(); }
};

inline GradReport grad_report(const ParamSet& params, std::span<const Task> tasks, const MetaConfig& cfg,
                              std::size_t iteration = 0) {
    Graph g;
    const ParamVars meta = bind(g, params);
    const OuterLoss loss = build_outer_loss(g, meta, tasks, cfg);

    GradReport r;
    r.iteration = iteration;
    std::vector<Var> wrt;
    for (std::size_t i = 0; i < meta.size(); ++i) {
        if (meta.partition(i) == Partition::CoHead) continue;
        r.names.push_back(meta.name(i));
        r.partitions.push_back(meta.partition(i));
        wrt.push_back(meta[i]);
    }
    const auto gm = g.gradient(loss.meta_sum, wrt, false);
    std::vector<Var> gc;
    if (!loss.co_sum.empty()) gc = g.gradient(g.scale(loss.co_sum, cfg.gamma), wrt, false);
    for (std::size_t k = 0; k < wrt.size(); ++k) {
        r.meta_grad.push_back(gm[k].value());
        if (gc.empty() || r.partitions[k] != Partition::FeatureExtractor) {
            r.co_grad.emplace_back(wrt[k].shape());
        } else {
            r.co_grad.push_back(gc[k].value());
        }
    }
    return r;
}

namespace detail {

inline bool is_weight(const std::string& name) { return name.size() >= 2 && name.compare(name.size() - 2, 2, ".w") == 0; }

// "fe.3.w" -> "fe.3"
inline std::string layer_of(const std::string& name) { return name.substr(0, name.rfind('.')); }

}  // namespace detail

// Cosine similarity of G and G-bar on the last feature-extractor weight.
inline Similarity last_layer_similarity(const GradReport& r) {
    std::optional<std::size_t> last;
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (r.partitions[i] == Partition::FeatureExtractor && detail::is_weight(r.names[i])) last = i;
    }
    if (!last) throw std::invalid_argument("last_layer_similarity: report has no feature-extractor weights");
    return cosine_similarity(r.meta_grad[*last].values(), r.co_grad[*last].values());
}

// L2 norm of G + G-bar per feature-extractor weight; biases are skipped.
inline std::vector<std::pair<std::string, double>> per_layer_grad_norms(const GradReport& r) {
    std::vector<std::pair<std::string, double>> out;
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (r.partitions[i] != Partition::FeatureExtractor || !detail::is_weight(r.names[i])) continue;
        double s = 0.0;
        for (std::size_t k = 0; k < r.meta_grad[i].size(); ++k) {
            const double v = r.meta_grad[i][k] + r.co_grad[i][k];
            s += v * v;
        }
        out.emplace_back(detail::layer_of(r.names[i]), std::sqrt(s));
    }
    return out;
}

// Linear CKA: ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F), columns centered.
inline Similarity linear_cka(const Array& x, const Array& y) {
    if (x.rank() != 2 || y.rank() != 2) throw ShapeError("linear_cka: inputs must be matrices");
    if (x.rows() != y.rows()) throw ShapeError("linear_cka: row counts differ");
    const std::size_t n = x.rows();
    if (n < 2) throw std::invalid_argument("linear_cka: needs at least 2 rows");

    auto centered = [n](const Array& a) {
        Array c = a;
        const std::size_t m = a.cols();
        for (std::size_t j = 0; j < m; ++j) {
            double mu = 0.0;
            for (std::size_t i = 0; i < n; ++i) mu += a.at(i, j);
            mu /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) c.at(i, j) -= mu;
        }
        return c;
    };
    // ||A^T B||_F^2 via the p x q cross-product matrix.
    auto cross_fro2 = [n](const Array& a, const Array& b) {
        double s = 0.0;
        for (std::size_t p = 0; p < a.cols(); ++p) {
            for (std::size_t q = 0; q < b.cols(); ++q) {
                double d = 0.0;
                for (std::size_t i = 0; i < n; ++i) d += a.at(i, p) * b.at(i, q);
                s += d * d;
            }
        }
        return s;
    };
    const Array xc = centered(x);
    const Array yc = centered(y);
    const double xx = std::sqrt(cross_fro2(xc, xc));
    const double yy = std::sqrt(cross_fro2(yc, yc));
    if (xx < kDegenerateNorm || yy < kDegenerateNorm) return {0.0, true};
    return {cross_fro2(yc, xc) / (xx * yy), false};
}

// Nine log-spaced step sizes from 1e-6 to 1e-2.
inline std::vector<double> default_alpha_grid() {
    std::vector<double> grid;
    for (int i = 0; i <= 8; ++i) grid.push_back(std::pow(10.0, -6.0 + 0.5 * i));
    return grid;
}

using LossEvaluator = std::function<double(const ParamSet&)>;

struct DescentCheck {
    std::vector<std::pair<std::string, double>> layer_inner;  // <g_j, gbar_j> per feature layer (weight + bias)
    bool all_positive = false;
    double g_dot_ghat = 0.0;     // <G, G + G-bar>
    double identity_rhs = 0.0;   // ||G||^2 + sum_j <g_j, gbar_j>
    double identity_rel_error = 0.0;
    double base_loss = 0.0;
    std::optional<double> descent_alpha;  // smallest grid step with L(w - a*Ghat) < L(w)
};

// Sum of meta-learner query losses after adaptation, as a function of the
// meta-parameters. Its gradient is the report's meta_grad.
inline LossEvaluator meta_objective(std::vector<Task> tasks, const MetaConfig& cfg) {
    return [tasks = std::move(tasks), cfg](const ParamSet& p) {
        Graph g;
        const ParamVars meta = bind(g, p);
        return build_outer_loss(g, meta, tasks, cfg).meta_sum.value().item();
    };
}

inline DescentCheck descent_check(const GradReport& r, const ParamSet& base, const LossEvaluator& loss,
                                  std::span<const double> alphas) {
    DescentCheck out;
    double g_norm2 = 0.0;
    double cross = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
        const auto gi = r.meta_grad[i].values();
        const auto bi = r.co_grad[i].values();
        for (std::size_t k = 0; k < gi.size(); ++k) out.g_dot_ghat += gi[k] * (gi[k] + bi[k]);
        const double gg = dot(gi, gi);
        const double gb = dot(gi, bi);
        g_norm2 += gg;
        if (r.partitions[i] != Partition::FeatureExtractor) continue;
        cross += gb;
        const std::string layer = detail::layer_of(r.names[i]);
        if (!out.layer_inner.empty() && out.layer_inner.back().first == layer) {
            out.layer_inner.back().second += gb;
        } else {
            out.layer_inner.emplace_back(layer, gb);
        }
    }
    out.identity_rhs = g_norm2 + cross;
    const double scale = std::max({std::abs(out.g_dot_ghat), std::abs(out.identity_rhs), 1e-300});
    out.identity_rel_error = std::abs(out.g_dot_ghat - out.identity_rhs) / scale;
    out.all_positive = !out.layer_inner.empty();
    for (const auto& [name, v] : out.layer_inner) out.all_positive = out.all_positive && v > 0.0;

    out.base_loss = loss(base);
    std::vector<double> sorted(alphas.begin(), alphas.end());
    std::sort(sorted.begin(), sorted.end());
    for (double a : sorted) {
        std::vector<Array> moved(base.values().begin(), base.values().end());
        for (std::size_t i = 0; i < r.size(); ++i) {
            const auto idx = base.find(r.names[i]);
            if (!idx) throw std::invalid_argument("descent_check: report entry " + r.names[i] + " not in parameters");
            Array& p = moved[*idx];
            for (std::size_t k = 0; k < p.size(); ++k) p[k] -= a * (r.meta_grad[i][k] + r.co_grad[i][k]);
        }
        if (loss(base.rebind(std::move(moved))) < out.base_loss) {
            out.descent_alpha = a;
            break;
        }
    }
    return out;
}

// Post-activation representations of the probe tasks' query inputs before and
// after inner-loop adaptation, compared per layer (feature layers, then head).
inline std::vector<std::pair<std::string, Similarity>> adaptation_cka(const ParamSet& params, std::span<const Task> probes,
                                                                      const MetaConfig& cfg) {
    if (probes.empty()) throw std::invalid_argument("adaptation_cka: no probe tasks");
    std::vector<std::vector<Var>> before, after;
    Graph g;
    const ParamVars meta = bind(g, params);
    MetaConfig first_order = cfg;
    first_order.second_order = false;
    for (const Task& t : probes) {
        const Var x = Var::constant(t.query.inputs);
        const AdaptedParams adapted = inner_adapt(g, meta, t, first_order);
        auto layers = [&](const ParamVars& p) {
            std::vector<Var> out;
            for (const Var& v : feature_layers(g, p, x)) out.push_back(detach(v));
            out.push_back(detach(forward_head(g, p, out.back())));
            return out;
        };
        before.push_back(layers(meta));
        after.push_back(layers(adapted.params));
    }
    std::vector<std::pair<std::string, Similarity>> out;
    const std::size_t n_layers = before.front().size();
    for (std::size_t l = 0; l < n_layers; ++l) {
        std::vector<Var> b, a;
        for (std::size_t t = 0; t < probes.size(); ++t) {
            b.push_back(before[t][l]);
            a.push_back(after[t][l]);
        }
        const std::string name = l + 1 < n_layers ? "fe." + std::to_string(l) : "head";
        out.emplace_back(name, linear_cka(g.concat_rows(b).value(), g.concat_rows(a).value()));
    }
    return out;
}

// Parameter snapshots of one training run.
struct RunTrace {
    MetaConfig cfg;
    std::vector<std::size_t> iterations;
    std::vector<ParamSet> snapshots;
};

// Last-layer G vs G-bar similarity at every snapshot, on a fixed probe batch.
inline std::vector<double> similarity_series(const RunTrace& run, std::span<const Task> probes) {
    std::vector<double> out;
    out.reserve(run.snapshots.size());
    for (std::size_t s = 0; s < run.snapshots.size(); ++s) {
        out.push_back(last_layer_similarity(grad_report(run.snapshots[s], probes, run.cfg, run.iterations[s])).value);
    }
    return out;
}

struct SimilarityComparison {
    std::vector<std::size_t> iterations;
    std::vector<double> cml;
    std::vector<double> cl;

    static double mean(const std::vector<double>& v) { return TestResult::mean(v); }
};

inline SimilarityComparison collect_cml_vs_cl_similarity(const RunTrace& cml, const RunTrace& cl, std::span<const Task> probes) {
    if (cml.snapshots.empty() || cl.snapshots.empty()) throw std::invalid_argument("collect_cml_vs_cl_similarity: empty run trace");
    if (!same_layout(cml.snapshots.front(), cl.snapshots.front())) {
        throw std::invalid_argument("collect_cml_vs_cl_similarity: runs have different architectures");
    }
    if (cml.iterations != cl.iterations) throw std::invalid_argument("collect_cml_vs_cl_similarity: snapshot iterations differ");
    return {cml.iterations, similarity_series(cml, probes), similarity_series(cl, probes)};
}

}  // namespace metacoop
