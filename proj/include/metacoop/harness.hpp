#pragma once

// Experiment orchestration: config files, seeded runs with metrics and
// checkpoints on disk, run comparison and one-axis sweeps.
//
// Config files are flat INI: [section] headers and key = value lines, ';'
// comments. Every key has a default; the sinusoid defaults reproduce the
// 5-shot regression setup (batch 4, one inner step, alpha 0.01, gamma 0.2).

#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "metacoop/diagnostics.hpp"
#include "metacoop/meta.hpp"
#include "metacoop/model.hpp"
#include "metacoop/tasks.hpp"

namespace metacoop {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDiverged = 3;

// Substream indices under the root seed. Evaluation and probe streams never
// depend on how many training tasks were drawn.
inline constexpr std::uint64_t kInitStream = 0;
inline constexpr std::uint64_t kTrainStream = 1;
inline constexpr std::uint64_t kTestStream = 2;
inline constexpr std::uint64_t kProbeStream = 3;

inline constexpr std::size_t kRegressionTestTasks = 600;
inline constexpr std::size_t kClassificationTestTasks = 200;

struct RunConfig {
    std::string name = "run";
    std::uint64_t seed = 0;
    std::size_t iterations = 10000;
    TaskFamily task;
    std::vector<std::size_t> hidden{40, 40};
    std::vector<std::size_t> co_hidden{40};
    MetaConfig meta;
    std::size_t eval_every = 1000;  // 0: evaluate only before training and at the end
    std::size_t test_tasks = 0;     // 0: family default
    bool diagnostics = false;
    std::size_t diag_every = 0;  // 0: same as eval_every
    std::size_t probe_tasks = 32;
    std::uint64_t probe_seed = 0;  // defaults to the root seed
    std::string output_root = "runs";
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only
    bool wall_time = false;            // adds wall_time to metrics records (breaks byte-identical reruns)

    std::size_t resolved_test_tasks() const {
        if (test_tasks) return test_tasks;
        return task.kind == TaskKind::Regression ? kRegressionTestTasks : kClassificationTestTasks;
    }
    std::size_t resolved_diag_every() const { return diag_every ? diag_every : eval_every; }

    MlpSpec model_spec() const {
        MlpSpec s;
        s.input_dim = task.input_dim();
        s.hidden = hidden;
        s.output_dim = task.output_dim();
        s.co_hidden = co_hidden;
        return s;
    }

    // Output directory, with METACOOP_OUT taking precedence over output.root.
    fs::path run_dir() const {
        const char* env = std::getenv("METACOOP_OUT");
        const fs::path root = (env && *env) ? fs::path(env) : fs::path(output_root);
        return root / name;
    }
};

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string format_list(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
    }
    return s;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const std::string t = trim(v);
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc{} || p != t.data() + t.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const std::string t = trim(v);
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc{} || p != t.data() + t.size()) throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
    return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
    double out = 0.0;
    const std::string t = trim(v);
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc{} || p != t.data() + t.size() || !std::isfinite(out)) {
        throw ConfigError(key + ": expected a finite number, got '" + v + "'");
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    const std::string t = trim(v);
    if (t.empty()) return out;
    std::stringstream ss(t);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_count(key, item));
    return out;
}

}  // namespace detail

// Flat "section.key" -> value map, the form sweeps edit.
using ConfigMap = std::map<std::string, std::string>;

inline ConfigMap read_config_map(std::istream& is) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(is, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    ConfigMap out;
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ConfigError("config: key '" + section + "' outside of a section");
        for (const auto& [key, value] : body) out[section + "." + key] = value.get_value<std::string>();
    }
    return out;
}

inline ConfigMap read_config_map(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    return read_config_map(is);
}

inline RunConfig resolve_config(const ConfigMap& map) {
    RunConfig c;
    bool probe_seed_set = false;
    for (const auto& [key, v] : map) {
        if (key == "task.family") {
            if (detail::trim(v) == "sine") c.task.kind = TaskKind::Regression;
            else if (detail::trim(v) == "cluster") c.task.kind = TaskKind::Classification;
            else throw ConfigError("task.family: expected sine or cluster, got '" + v + "'");
        } else if (key == "task.k_shot") c.task.k_shot = detail::parse_count(key, v);
        else if (key == "task.query_size") c.task.query_size = detail::parse_count(key, v);
        else if (key == "task.test_grid") c.task.test_grid = detail::parse_count(key, v);
        else if (key == "task.n_way") c.task.n_way = detail::parse_count(key, v);
        else if (key == "task.query_per_class") c.task.query_per_class = detail::parse_count(key, v);
        else if (key == "task.dim") c.task.dim = detail::parse_count(key, v);
        else if (key == "task.spread") c.task.spread = detail::parse_real(key, v);
        else if (key == "model.hidden") c.hidden = detail::parse_list(key, v);
        else if (key == "model.co_hidden") c.co_hidden = detail::parse_list(key, v);
        else if (key == "method.name") {
            try {
                c.meta.method = parse_method(detail::trim(v));
            } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("method.name: ") + e.what());
            }
        } else if (key == "method.seed") c.seed = detail::parse_u64(key, v);
        else if (key == "method.iterations") c.iterations = detail::parse_count(key, v);
        else if (key == "method.alpha") c.meta.inner_lr = detail::parse_real(key, v);
        else if (key == "method.gamma") c.meta.gamma = detail::parse_real(key, v);
        else if (key == "method.inner_steps") c.meta.inner_steps = detail::parse_count(key, v);
        else if (key == "method.task_batch") c.meta.task_batch = detail::parse_count(key, v);
        else if (key == "method.second_order") c.meta.second_order = detail::parse_bool(key, v);
        else if (key == "optimizer.kind") {
            try {
                c.meta.optimizer = parse_optimizer(detail::trim(v));
            } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("optimizer.kind: ") + e.what());
            }
        } else if (key == "optimizer.lr") c.meta.outer_lr = detail::parse_real(key, v);
        else if (key == "optimizer.beta1") c.meta.adam_beta1 = detail::parse_real(key, v);
        else if (key == "optimizer.beta2") c.meta.adam_beta2 = detail::parse_real(key, v);
        else if (key == "optimizer.eps") c.meta.adam_eps = detail::parse_real(key, v);
        else if (key == "eval.every") c.eval_every = detail::parse_count(key, v);
        else if (key == "eval.test_tasks") c.test_tasks = detail::parse_count(key, v);
        else if (key == "eval.diagnostics") c.diagnostics = detail::parse_bool(key, v);
        else if (key == "eval.diag_every") c.diag_every = detail::parse_count(key, v);
        else if (key == "eval.probe_tasks") c.probe_tasks = detail::parse_count(key, v);
        else if (key == "eval.probe_seed") {
            c.probe_seed = detail::parse_u64(key, v);
            probe_seed_set = true;
        }
        else if (key == "output.name") c.name = detail::trim(v);
        else if (key == "output.root") c.output_root = detail::trim(v);
        else if (key == "output.checkpoint_every") c.checkpoint_every = detail::parse_count(key, v);
        else if (key == "output.wall_time") c.wall_time = detail::parse_bool(key, v);
        else throw ConfigError("unknown config key '" + key + "'");
    }
    c.meta.seed = c.seed;
    if (!probe_seed_set) c.probe_seed = c.seed;
    try {
        c.meta.validate();
        (void)init_params(c.model_spec(), 0);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (c.name.empty() || c.name.find('/') != std::string::npos) throw ConfigError("output.name must be a plain directory name");
    if (c.diagnostics && c.probe_tasks == 0) throw ConfigError("eval.probe_tasks must be >= 1 when diagnostics are on");
    return c;
}

inline RunConfig load_config(const fs::path& path) { return resolve_config(read_config_map(path)); }

// Every key with its resolved value; reading this back yields the same RunConfig.
inline std::string format_config(const RunConfig& c) {
    using detail::format_double;
    std::ostringstream os;
    os << "; resolved configuration\n";
    os << "[task]\n";
    os << "family = " << (c.task.kind == TaskKind::Regression ? "sine" : "cluster") << '\n';
    os << "k_shot = " << c.task.k_shot << '\n';
    os << "query_size = " << c.task.resolved_query_size() << '\n';
    os << "test_grid = " << c.task.test_grid << '\n';
    os << "n_way = " << c.task.n_way << '\n';
    os << "query_per_class = " << c.task.query_per_class << '\n';
    os << "dim = " << c.task.dim << '\n';
    os << "spread = " << format_double(c.task.spread) << '\n';
    os << "\n[model]\n";
    os << "hidden = " << detail::format_list(c.hidden) << '\n';
    os << "co_hidden = " << detail::format_list(c.co_hidden) << '\n';
    os << "\n[method]\n";
    os << "name = " << method_name(c.meta.method) << '\n';
    os << "seed = " << c.seed << '\n';
    os << "iterations = " << c.iterations << '\n';
    os << "alpha = " << format_double(c.meta.inner_lr) << '\n';
    os << "gamma = " << format_double(c.meta.gamma) << '\n';
    os << "inner_steps = " << c.meta.inner_steps << '\n';
    os << "task_batch = " << c.meta.task_batch << '\n';
    os << "second_order = " << (c.meta.second_order ? "true" : "false") << '\n';
    os << "\n[optimizer]\n";
    os << "kind = " << optimizer_name(c.meta.optimizer) << '\n';
    os << "lr = " << format_double(c.meta.outer_lr) << '\n';
    os << "beta1 = " << format_double(c.meta.adam_beta1) << '\n';
    os << "beta2 = " << format_double(c.meta.adam_beta2) << '\n';
    os << "eps = " << format_double(c.meta.adam_eps) << '\n';
    os << "\n[eval]\n";
    os << "every = " << c.eval_every << '\n';
    os << "test_tasks = " << c.resolved_test_tasks() << '\n';
    os << "diagnostics = " << (c.diagnostics ? "true" : "false") << '\n';
    os << "diag_every = " << c.resolved_diag_every() << '\n';
    os << "probe_tasks = " << c.probe_tasks << '\n';
    os << "probe_seed = " << c.probe_seed << '\n';
    os << "\n[output]\n";
    os << "name = " << c.name << '\n';
    os << "root = " << c.output_root << '\n';
    os << "checkpoint_every = " << c.checkpoint_every << '\n';
    os << "wall_time = " << (c.wall_time ? "true" : "false") << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

struct Evaluation {
    TestResult cml;
    TestResult dagger;
};

// Everything a run derives from its root seed.
struct RunSetup {
    ParamSet init;
    TaskSource train_source;
    std::vector<Task> test_tasks;
    std::vector<Task> probe_tasks;
};

inline RunSetup make_setup(const RunConfig& c) {
    const Rng root(c.seed);
    RunSetup s;
    Rng init_rng = root.split(kInitStream);
    s.init = init_params(c.model_spec(), init_rng.next_u64());
    const Rng train = root.split(kTrainStream);
    const TaskFamily family = c.task;
    s.train_source = [train, family](std::uint64_t i) {
        Rng r = train.split(i);
        return family.sample_train(r);
    };
    const Rng test = root.split(kTestStream);
    for (std::size_t i = 0; i < c.resolved_test_tasks(); ++i) {
        Rng r = test.split(i);
        s.test_tasks.push_back(c.task.sample_test(r));
    }
    if (c.diagnostics) {
        const Rng probe = Rng(c.probe_seed).split(kProbeStream);
        for (std::size_t i = 0; i < c.probe_tasks; ++i) {
            Rng r = probe.split(i);
            s.probe_tasks.push_back(c.task.sample_train(r));
        }
    }
    return s;
}

inline Evaluation evaluate(const ParamSet& params, std::span<const Task> tasks, const MetaConfig& cfg) {
    return {meta_test(params, tasks, TestMode::Cml, cfg), meta_test(params, tasks, TestMode::CmlDagger, cfg)};
}

namespace detail {

inline ordered_json nullable(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

inline ordered_json metrics_record(const RunConfig& c, std::size_t iteration, const IterationStats* stats,
                                   const Evaluation* eval, const ordered_json& diag, std::optional<double> wall) {
    ordered_json r;
    r["iteration"] = iteration;
    r["method"] = method_name(c.meta.method);
    r["loss_sum"] = stats ? ordered_json(stats->loss_sum) : ordered_json(nullptr);
    r["loss_mean"] = stats ? ordered_json(stats->loss_mean) : ordered_json(nullptr);
    r["meta_loss_sum"] = stats ? ordered_json(stats->meta_loss_sum) : ordered_json(nullptr);
    r["co_loss_sum"] = stats ? ordered_json(stats->co_loss_sum) : ordered_json(nullptr);
    r["freeze_violations"] = stats ? ordered_json(stats->freeze_violations) : ordered_json(nullptr);
    const bool cls = c.task.kind == TaskKind::Classification;
    auto mean_of = [&](const TestResult& t, bool acc) -> ordered_json {
        if (!eval || (acc && !cls)) return nullptr;
        return TestResult::mean(acc ? t.accuracies : t.losses);
    };
    auto std_of = [&](const TestResult& t) -> ordered_json {
        if (!eval) return nullptr;
        return TestResult::stddev(t.losses);
    };
    r["cml_test_loss"] = eval ? mean_of(eval->cml, false) : nullptr;
    r["cml_test_loss_std"] = eval ? std_of(eval->cml) : nullptr;
    r["cml_test_accuracy"] = eval ? mean_of(eval->cml, true) : nullptr;
    r["dagger_test_loss"] = eval ? mean_of(eval->dagger, false) : nullptr;
    r["dagger_test_loss_std"] = eval ? std_of(eval->dagger) : nullptr;
    r["dagger_test_accuracy"] = eval ? mean_of(eval->dagger, true) : nullptr;
    r["grad_similarity"] = diag.contains("grad_similarity") ? diag["grad_similarity"] : ordered_json(nullptr);
    r["grad_norms"] = diag.contains("grad_norms") ? diag["grad_norms"] : ordered_json(nullptr);
    r["cka"] = diag.contains("cka") ? diag["cka"] : ordered_json(nullptr);
    if (c.wall_time) r["wall_time"] = nullable(wall);
    return r;
}

inline ordered_json diagnostics_block(const ParamSet& params, const RunSetup& s, const RunConfig& c, std::size_t iteration) {
    ordered_json d;
    const GradReport report = grad_report(params, s.probe_tasks, c.meta, iteration);
    const Similarity sim = last_layer_similarity(report);
    d["grad_similarity"] = sim.degenerate ? ordered_json(nullptr) : ordered_json(sim.value);
    ordered_json norms = ordered_json::object();
    for (const auto& [name, v] : per_layer_grad_norms(report)) norms[name] = v;
    d["grad_norms"] = norms;
    ordered_json cka = ordered_json::object();
    for (const auto& [name, v] : adaptation_cka(params, s.probe_tasks, c.meta)) {
        cka[name] = v.degenerate ? ordered_json(nullptr) : ordered_json(v.value);
    }
    d["cka"] = cka;
    return d;
}

inline ordered_json summary_stats(const std::vector<double>& v) {
    return {{"mean", TestResult::mean(v)}, {"std", TestResult::stddev(v)}, {"count", v.size()}};
}

}  // namespace detail

// Fields two runs must share for their test metrics to be comparable.
inline ordered_json eval_protocol(const RunConfig& c) {
    ordered_json p;
    p["family"] = c.task.kind == TaskKind::Regression ? "sine" : "cluster";
    p["k_shot"] = c.task.k_shot;
    p["test_tasks"] = c.resolved_test_tasks();
    p["test_seed"] = c.seed;
    p["inner_steps"] = c.meta.inner_steps;
    p["alpha"] = c.meta.inner_lr;
    if (c.task.kind == TaskKind::Regression) {
        p["test_grid"] = c.task.test_grid;
    } else {
        p["n_way"] = c.task.n_way;
        p["query_per_class"] = c.task.query_per_class;
        p["dim"] = c.task.dim;
        p["spread"] = c.task.spread;
    }
    return p;
}

struct RunOutcome {
    int exit_code = kExitOk;
    fs::path dir;
    ParamSet params;
    ordered_json summary;
};

inline RunOutcome run(const RunConfig& c, std::ostream& log = std::cerr) {
    RunOutcome out;
    out.dir = c.run_dir();
    fs::create_directories(out.dir);
    {
        std::ofstream cfg(out.dir / "config.resolved");
        if (!cfg) throw std::runtime_error("cannot write to " + out.dir.string());
        cfg << format_config(c);
    }
    std::ofstream metrics(out.dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write to " + out.dir.string());

    const auto started = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count(); };
    const RunSetup setup = make_setup(c);
    const std::size_t diag_every = c.resolved_diag_every();

    auto write = [&](const ordered_json& rec) {
        metrics << rec.dump() << '\n';
        metrics.flush();
    };

    Evaluation last_eval = evaluate(setup.init, setup.test_tasks, c.meta);
    std::size_t last_eval_iteration = 0;
    {
        const ordered_json diag = c.diagnostics ? detail::diagnostics_block(setup.init, setup, c, 0) : ordered_json::object();
        write(detail::metrics_record(c, 0, nullptr, &last_eval, diag, elapsed()));
    }

    ordered_json summary;
    summary["name"] = c.name;
    summary["method"] = method_name(c.meta.method);
    summary["protocol"] = eval_protocol(c);
    std::optional<IterationStats> last_stats;

    auto observer = [&](const IterationStats& st, const ParamSet& params) {
        last_stats = st;
        const std::size_t it = st.iteration;
        const bool final = it == c.iterations;
        const bool do_eval = final || (c.eval_every && it % c.eval_every == 0);
        const bool do_diag = c.diagnostics && (final || (diag_every && it % diag_every == 0));
        std::optional<Evaluation> eval;
        if (do_eval) {
            eval = evaluate(params, setup.test_tasks, c.meta);
            last_eval = *eval;
            last_eval_iteration = it;
        }
        const ordered_json diag = do_diag ? detail::diagnostics_block(params, setup, c, it) : ordered_json::object();
        write(detail::metrics_record(c, it, &st, eval ? &*eval : nullptr, diag, elapsed()));
        if (c.checkpoint_every && it % c.checkpoint_every == 0) {
            save_params((out.dir / ("checkpoint-" + std::to_string(it) + ".bin")).string(), params);
        }
        if (do_eval) {
            log << c.name << " it " << it << " loss/N " << st.loss_mean << " cml " << TestResult::mean(eval->cml.losses)
                << " dagger " << TestResult::mean(eval->dagger.losses) << '\n';
        }
    };

    out.params = setup.init;
    std::string status = "ok";
    try {
        TrainResult tr = meta_train(c.meta, setup.init, setup.train_source, c.iterations, observer);
        out.params = std::move(tr.params);
    } catch (const DivergenceError& e) {
        status = "diverged";
        summary["diverged_at"] = e.iteration();
        summary["error"] = e.what();
        out.exit_code = kExitDiverged;
        log << c.name << ": " << e.what() << '\n';
    }
    if (out.exit_code == kExitOk) save_params((out.dir / "checkpoint.bin").string(), out.params);

    const bool cls = c.task.kind == TaskKind::Classification;
    summary["status"] = status;
    summary["iterations"] = last_stats ? last_stats->iteration : 0;
    summary["final_loss_mean"] = last_stats ? ordered_json(last_stats->loss_mean) : ordered_json(nullptr);
    summary["eval_iteration"] = last_eval_iteration;
    summary["cml"] = detail::summary_stats(last_eval.cml.losses);
    summary["dagger"] = detail::summary_stats(last_eval.dagger.losses);
    if (cls) {
        summary["cml_accuracy"] = detail::summary_stats(last_eval.cml.accuracies);
        summary["dagger_accuracy"] = detail::summary_stats(last_eval.dagger.accuracies);
    }
    ordered_json final;
    final["cml_test_loss"] = TestResult::mean(last_eval.cml.losses);
    final["dagger_test_loss"] = TestResult::mean(last_eval.dagger.losses);
    if (cls) {
        final["cml_test_accuracy"] = TestResult::mean(last_eval.cml.accuracies);
        final["dagger_test_accuracy"] = TestResult::mean(last_eval.dagger.accuracies);
    }
    final["loss_mean"] = last_stats ? ordered_json(last_stats->loss_mean) : ordered_json(nullptr);
    summary["final"] = final;
    const ParameterCounts counts = parameter_counts(setup.init, c.meta.method, TestMode::Cml);
    summary["parameters"] = {{"train", counts.train},
                             {"test_cml", counts.test},
                             {"test_dagger", parameter_counts(setup.init, c.meta.method, TestMode::CmlDagger).test}};
    {
        std::ofstream os(out.dir / "summary.json");
        os << summary.dump(2) << '\n';
    }
    out.summary = std::move(summary);
    return out;
}

// ---------------------------------------------------------------------------
// compare / sweep
// ---------------------------------------------------------------------------

struct LoadedRun {
    fs::path dir;
    std::string label;
    std::vector<ordered_json> records;
    ordered_json summary;
};

inline LoadedRun load_run(const fs::path& dir) {
    LoadedRun r;
    r.dir = dir;
    r.label = fs::path(dir).lexically_normal().filename().string();
    if (r.label.empty()) r.label = fs::path(dir).lexically_normal().parent_path().filename().string();
    std::ifstream m(dir / "metrics.jsonl");
    if (!m) throw std::runtime_error("no metrics.jsonl in " + dir.string());
    std::string line;
    while (std::getline(m, line)) {
        if (!line.empty()) r.records.push_back(ordered_json::parse(line));
    }
    std::ifstream s(dir / "summary.json");
    if (!s) throw std::runtime_error("no summary.json in " + dir.string());
    r.summary = ordered_json::parse(s);
    return r;
}

struct Comparison {
    std::vector<std::string> labels;
    std::vector<std::string> row_keys;            // iteration numbers, then "final"
    std::vector<std::vector<double>> values;      // [row][run]
    std::string csv() const {
        std::ostringstream os;
        os << "iteration";
        for (const auto& l : labels) os << ',' << l;
        for (std::size_t j = 1; j < labels.size(); ++j) os << ",delta_" << labels[j];
        os << '\n';
        for (std::size_t r = 0; r < row_keys.size(); ++r) {
            os << row_keys[r];
            for (double v : values[r]) os << ',' << detail::format_double(v);
            for (std::size_t j = 1; j < values[r].size(); ++j) os << ',' << detail::format_double(values[r][j] - values[r][0]);
            os << '\n';
        }
        return os.str();
    }
};

class ProtocolMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Rows for every iteration at which all runs report the metric, plus the
// final summary value when present. Deltas are relative to the first run.
inline Comparison compare(const std::vector<fs::path>& dirs, const std::string& metric) {
    if (dirs.empty()) throw std::invalid_argument("compare: no runs given");
    std::vector<LoadedRun> runs;
    for (const auto& d : dirs) runs.push_back(load_run(d));
    for (std::size_t i = 1; i < runs.size(); ++i) {
        if (runs[i].summary["protocol"] != runs[0].summary["protocol"]) {
            throw ProtocolMismatch("compare: " + runs[i].label + " uses a different evaluation protocol than " + runs[0].label);
        }
    }
    Comparison c;
    for (const auto& r : runs) c.labels.push_back(r.label);
    std::vector<std::map<std::size_t, double>> series(runs.size());
    bool known = false;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        for (const auto& rec : runs[i].records) {
            if (!rec.contains(metric)) continue;
            known = true;
            if (rec[metric].is_number()) series[i][rec["iteration"].get<std::size_t>()] = rec[metric].get<double>();
        }
    }
    const bool in_final = runs[0].summary["final"].contains(metric);
    if (!known && !in_final) throw std::invalid_argument("compare: unknown metric '" + metric + "'");
    for (const auto& [it, v] : series[0]) {
        std::vector<double> row{v};
        bool all = true;
        for (std::size_t i = 1; i < runs.size() && all; ++i) {
            auto f = series[i].find(it);
            if (f == series[i].end()) all = false;
            else row.push_back(f->second);
        }
        if (!all) continue;
        c.row_keys.push_back(std::to_string(it));
        c.values.push_back(std::move(row));
    }
    if (in_final) {
        std::vector<double> row;
        for (const auto& r : runs) {
            const auto& f = r.summary["final"];
            if (!f.contains(metric) || !f[metric].is_number()) {
                row.clear();
                break;
            }
            row.push_back(f[metric].get<double>());
        }
        if (!row.empty()) {
            c.row_keys.push_back("final");
            c.values.push_back(std::move(row));
        }
    }
    return c;
}

// Short axis names accepted by sweep, mapped to config keys.
inline std::string sweep_key(const std::string& axis) {
    static const std::map<std::string, std::string> alias{
        {"gamma", "method.gamma"},         {"alpha", "method.alpha"},         {"inner_steps", "method.inner_steps"},
        {"task_batch", "method.task_batch"}, {"seed", "method.seed"},        {"method", "method.name"},
        {"second_order", "method.second_order"}, {"iterations", "method.iterations"}, {"lr", "optimizer.lr"},
        {"outer_lr", "optimizer.lr"},       {"optimizer", "optimizer.kind"},  {"k_shot", "task.k_shot"},
    };
    if (auto it = alias.find(axis); it != alias.end()) return it->second;
    if (axis.starts_with("method.") || axis.starts_with("optimizer.") || axis == "task.k_shot") {
        ConfigMap m{{axis, "0"}};
        try {
            (void)resolve_config(m);
        } catch (const ConfigError& e) {
            if (std::string(e.what()).starts_with("unknown config key")) throw ConfigError("invalid sweep axis '" + axis + "'");
        }
        return axis;
    }
    throw ConfigError("invalid sweep axis '" + axis + "'");
}

struct SweepRow {
    std::string value;
    RunOutcome outcome;
};

inline std::string sanitize(std::string s) {
    for (char& ch : s) {
        if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-' || ch == '_')) ch = '_';
    }
    return s;
}

inline std::vector<SweepRow> sweep(const ConfigMap& base, const std::string& axis, const std::vector<std::string>& values,
                                   std::ostream& log = std::cerr) {
    const std::string key = sweep_key(axis);
    if (values.empty()) throw ConfigError("sweep: no values given");
    const RunConfig base_cfg = resolve_config(base);
    std::vector<RunConfig> configs;
    for (const auto& v : values) {
        ConfigMap m = base;
        m[key] = v;
        m["output.name"] = base_cfg.name + "-" + sanitize(key.substr(key.find('.') + 1)) + "-" + sanitize(v);
        configs.push_back(resolve_config(m));
    }
    std::vector<SweepRow> rows;
    for (std::size_t i = 0; i < configs.size(); ++i) rows.push_back({values[i], run(configs[i], log)});
    return rows;
}

inline std::string sweep_table_csv(const std::string& axis, const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << axis << ",run,status,iterations,final_loss_mean,cml_test_loss,cml_test_loss_std,dagger_test_loss,dagger_test_loss_std\n";
    for (const auto& r : rows) {
        const auto& s = r.outcome.summary;
        auto num = [](const ordered_json& j) { return j.is_number() ? detail::format_double(j.get<double>()) : std::string(); };
        os << r.value << ',' << r.outcome.dir.filename().string() << ',' << s["status"].get<std::string>() << ','
           << s["iterations"].get<std::size_t>() << ',' << num(s["final_loss_mean"]) << ',' << num(s["cml"]["mean"]) << ','
           << num(s["cml"]["std"]) << ',' << num(s["dagger"]["mean"]) << ',' << num(s["dagger"]["std"]) << '\n';
    }
    return os.str();
}

}  // namespace metacoop
