#pragma once

// Task distributions: sinusoid regression and Gaussian-cluster N-way
// classification, each sampled into a support split and a query split.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "metacoop/rng.hpp"
#include "metacoop/tensor.hpp"

namespace metacoop {

enum class TaskKind : std::uint8_t { Regression, Classification };

inline const char* task_kind_name(TaskKind k) { return k == TaskKind::Regression ? "regression" : "classification"; }

struct Split {
    Array inputs;                                    // (n, dim)
    Array targets;                                   // (n, 1), regression only
    std::shared_ptr<const std::vector<int>> labels;  // classification only

    std::size_t size() const { return inputs.rows(); }
};

struct Task {
    TaskKind kind = TaskKind::Regression;
    Split support;
    Split query;
    // sinusoid metadata
    double amplitude = 0.0;
    double phase = 0.0;
    // cluster metadata: (n_way, dim) prototypes, row p carries label position_label[p]
    Array prototypes;
    std::vector<int> position_label;
};

inline constexpr double kSineAmplitudeMin = 0.1;
inline constexpr double kSineAmplitudeMax = 5.0;
inline constexpr double kSinePhaseMax = std::numbers::pi;
inline constexpr double kSineInputMin = -5.0;
inline constexpr double kSineInputMax = 5.0;
inline constexpr std::size_t kSineTestGrid = 100;

namespace detail {

inline Split sine_split(std::vector<double> xs, double amplitude, double phase) {
    std::vector<double> ys(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = amplitude * std::sin(xs[i] + phase);
    return Split{Array::column(std::move(xs)), Array::column(std::move(ys)), nullptr};
}

inline std::vector<double> uniform_inputs(Rng& rng, std::size_t n) {
    std::vector<double> xs(n);
    for (auto& x : xs) x = rng.uniform(kSineInputMin, kSineInputMax);
    return xs;
}

}  // namespace detail

// y = A sin(x + b), A ~ U[0.1, 5], b ~ U[0, pi], x ~ U[-5, 5].
inline Task sample_sine_task(Rng& rng, std::size_t k_shot, std::size_t query_size) {
    if (k_shot == 0) throw std::invalid_argument("sample_sine_task: k_shot must be >= 1");
    if (query_size == 0) throw std::invalid_argument("sample_sine_task: query_size must be >= 1");
    Task t;
    t.kind = TaskKind::Regression;
    t.amplitude = rng.uniform(kSineAmplitudeMin, kSineAmplitudeMax);
    t.phase = rng.uniform(0.0, kSinePhaseMax);
    t.support = detail::sine_split(detail::uniform_inputs(rng, k_shot), t.amplitude, t.phase);
    t.query = detail::sine_split(detail::uniform_inputs(rng, query_size), t.amplitude, t.phase);
    return t;
}

// Evaluation variant: random K-shot support, query on an evenly spaced grid over [-5, 5].
inline Task sample_sine_test_task(Rng& rng, std::size_t k_shot, std::size_t grid_points = kSineTestGrid) {
    if (k_shot == 0) throw std::invalid_argument("sample_sine_test_task: k_shot must be >= 1");
    if (grid_points < 2) throw std::invalid_argument("sample_sine_test_task: grid needs >= 2 points");
    Task t;
    t.kind = TaskKind::Regression;
    t.amplitude = rng.uniform(kSineAmplitudeMin, kSineAmplitudeMax);
    t.phase = rng.uniform(0.0, kSinePhaseMax);
    t.support = detail::sine_split(detail::uniform_inputs(rng, k_shot), t.amplitude, t.phase);
    std::vector<double> grid(grid_points);
    const double step = (kSineInputMax - kSineInputMin) / static_cast<double>(grid_points - 1);
    for (std::size_t i = 0; i < grid_points; ++i) grid[i] = kSineInputMin + step * static_cast<double>(i);
    t.query = detail::sine_split(std::move(grid), t.amplitude, t.phase);
    return t;
}

inline constexpr std::size_t kMaxPrototypeAttempts = 10000;

// N Gaussian clusters around prototypes ~ U[-1,1]^dim kept >= 2*spread apart.
// Labels are a fresh permutation per task, so class identity is task-local.
inline Task sample_cluster_task(Rng& rng, std::size_t n_way, std::size_t k_shot, std::size_t query_per_class,
                                std::size_t dim, double spread) {
    if (n_way < 2) throw std::invalid_argument("sample_cluster_task: n_way must be >= 2");
    if (dim < 2) throw std::invalid_argument("sample_cluster_task: dim must be >= 2");
    if (k_shot == 0 || query_per_class == 0) throw std::invalid_argument("sample_cluster_task: k_shot and query_per_class must be >= 1");
    if (!(spread >= 0.0) || !std::isfinite(spread)) throw std::invalid_argument("sample_cluster_task: spread must be finite and >= 0");

    Task t;
    t.kind = TaskKind::Classification;
    t.prototypes = Array(Shape{n_way, dim});
    const double min_dist2 = 4.0 * spread * spread;
    std::size_t attempts = 0;
    for (std::size_t p = 0; p < n_way;) {
        if (++attempts > kMaxPrototypeAttempts) {
            throw std::runtime_error("sample_cluster_task: prototype rejection sampling exceeded " +
                                     std::to_string(kMaxPrototypeAttempts) + " attempts (spread too large for dim)");
        }
        std::vector<double> cand(dim);
        for (auto& c : cand) c = rng.uniform(-1.0, 1.0);
        bool ok = true;
        for (std::size_t q = 0; q < p && ok; ++q) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < dim; ++j) {
                const double diff = cand[j] - t.prototypes.at(q, j);
                d2 += diff * diff;
            }
            ok = d2 >= min_dist2;
        }
        if (!ok) continue;
        for (std::size_t j = 0; j < dim; ++j) t.prototypes.at(p, j) = cand[j];
        ++p;
    }

    t.position_label.resize(n_way);
    for (std::size_t p = 0; p < n_way; ++p) t.position_label[p] = static_cast<int>(p);
    rng.shuffle(t.position_label);

    auto draw = [&](std::size_t per_class) {
        Array x(Shape{n_way * per_class, dim});
        auto labels = std::make_shared<std::vector<int>>();
        labels->reserve(n_way * per_class);
        for (std::size_t p = 0; p < n_way; ++p) {
            for (std::size_t s = 0; s < per_class; ++s) {
                const std::size_t row = p * per_class + s;
                for (std::size_t j = 0; j < dim; ++j) x.at(row, j) = rng.normal(t.prototypes.at(p, j), spread);
                labels->push_back(t.position_label[p]);
            }
        }
        return Split{std::move(x), Array{}, std::move(labels)};
    };
    t.support = draw(k_shot);
    t.query = draw(query_per_class);
    return t;
}

// Everything needed to draw training and evaluation tasks from one family.
struct TaskFamily {
    TaskKind kind = TaskKind::Regression;
    std::size_t k_shot = 5;
    std::size_t query_size = 0;  // sinusoid training query points; 0 means 10 * k_shot
    std::size_t test_grid = kSineTestGrid;
    std::size_t n_way = 5;
    std::size_t query_per_class = 15;
    std::size_t dim = 20;
    double spread = 0.3;

    std::size_t resolved_query_size() const { return query_size == 0 ? 10 * k_shot : query_size; }

    Task sample_train(Rng& rng) const {
        if (kind == TaskKind::Regression) return sample_sine_task(rng, k_shot, resolved_query_size());
        return sample_cluster_task(rng, n_way, k_shot, query_per_class, dim, spread);
    }

    Task sample_test(Rng& rng) const {
        if (kind == TaskKind::Regression) return sample_sine_test_task(rng, k_shot, test_grid);
        return sample_cluster_task(rng, n_way, k_shot, query_per_class, dim, spread);
    }

    std::size_t input_dim() const { return kind == TaskKind::Regression ? 1 : dim; }
    std::size_t output_dim() const { return kind == TaskKind::Regression ? 1 : n_way; }
};

// One JSON object per task, for cross-implementation fixtures.
inline nlohmann::json task_to_json(const Task& t) {
    using nlohmann::json;
    auto split = [&](const Split& s) {
        json j;
        j["rows"] = s.inputs.rows();
        j["cols"] = s.inputs.cols();
        j["x"] = s.inputs.data();
        if (t.kind == TaskKind::Regression) {
            j["y"] = s.targets.data();
        } else {
            j["labels"] = *s.labels;
        }
        return j;
    };
    json j;
    j["kind"] = task_kind_name(t.kind);
    if (t.kind == TaskKind::Regression) {
        j["metadata"] = {{"amplitude", t.amplitude}, {"phase", t.phase}};
    } else {
        j["metadata"] = {{"n_way", t.prototypes.rows()},
                         {"dim", t.prototypes.cols()},
                         {"prototypes", t.prototypes.data()},
                         {"position_label", t.position_label}};
    }
    j["support"] = split(t.support);
    j["query"] = split(t.query);
    return j;
}

inline std::string task_to_json_line(const Task& t) { return task_to_json(t).dump(); }

}  // namespace metacoop
