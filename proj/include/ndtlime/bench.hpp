#pragma once

#include "ndtlime/blackbox.hpp"
#include "ndtlime/core.hpp"
#include "ndtlime/data.hpp"
#include "ndtlime/explain.hpp"
#include "ndtlime/metrics.hpp"
#include "ndtlime/ndt.hpp"
#include "ndtlime/tree.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace ndtlime {

/// Everything an experiment run depends on. Outputs are a pure function of this plus the bundled data.
struct ExperimentConfig {
    std::vector<std::string> datasets{"iris"};  // iris | wine | friedman1 | blobs | path to a CSV
    std::string target = "target";              // CSV target column (name or 0-based index)
    std::string task;                            // CSV task; empty means regression
    std::vector<int> hidden_sizes{64, 32};
    TrainingConfig mlp{0.01, 100, 32, 0};
    std::vector<Surrogate> surrogates{Surrogate::LR, Surrogate::DT, Surrogate::NDT};
    NeighborhoodConfig neighborhood;
    SurrogateConfig surrogate;
    int repeats = 5;
    int k = 2;
    int n_test_instances = 20;
    std::uint64_t seed = 0;
    int n_seeds = 3;
    double test_fraction = 0.25;
    std::string out = "results";

    // synthetic generators
    int synth_n = 2000;
    double friedman_noise = 1.0;
    int blobs_d = 4;
    int blobs_classes = 2;
    double blobs_separation = 3.0;

    // optional restrictions applied before the split
    std::vector<std::size_t> features;
    std::vector<int> classes;

    // sweeps and exports
    std::vector<int> depths{1, 2, 3, 4};
    int width = 32;
    std::vector<int> ks{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    int instance = -1;  // boundary grid: -1 picks the test point closest to f's decision boundary
    int grid_resolution = 100;
    double grid_half_width = 3.0;

    void validate() const {
        detail::require(!datasets.empty(), "config: at least one dataset is required");
        detail::require(!surrogates.empty(), "config: at least one surrogate is required");
        detail::require(n_test_instances >= 1, "config: n_test_instances must be >= 1");
        detail::require(repeats >= 2, "config: repeats must be >= 2");
        detail::require(k >= 1, "config: k must be >= 1");
        detail::require(n_seeds >= 1, "config: n_seeds must be >= 1");
        detail::require(!hidden_sizes.empty(), "config: hidden_sizes must be non-empty");
        detail::require(!depths.empty(), "config: depths must be non-empty");
        detail::require(!ks.empty(), "config: ks must be non-empty");
        detail::require(width >= 1, "config: width must be >= 1");
        detail::require(grid_resolution >= 2, "config: grid_resolution must be >= 2");
        detail::require(grid_half_width > 0.0, "config: grid_half_width must be positive");
        neighborhood.validate();
    }

    /// Seed of the s-th dataset replicate (split, synthetic draw and MLP initialisation).
    std::uint64_t dataset_seed(int s) const { return seed + 1000ULL * static_cast<std::uint64_t>(s); }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace detail

/// First neighbourhood seed for test instance j; repeat r uses this value + r.
inline std::uint64_t explanation_seed(std::uint64_t dataset_seed, std::size_t instance) {
    return detail::splitmix64(detail::splitmix64(dataset_seed) ^ static_cast<std::uint64_t>(instance));
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    std::vector<std::string> surr;
    for (auto s : c.surrogates) surr.emplace_back(to_string(s));
    return {{"datasets", c.datasets},
            {"target", c.target},
            {"task", c.task},
            {"hidden_sizes", c.hidden_sizes},
            {"mlp_learning_rate", c.mlp.learning_rate},
            {"mlp_epochs", c.mlp.epochs},
            {"mlp_batch_size", c.mlp.batch_size},
            {"surrogates", surr},
            {"n_samples", c.neighborhood.n_samples},
            {"kernel_width", c.neighborhood.kernel_width},
            {"perturb_scale", c.neighborhood.perturb_scale},
            {"max_depth", c.surrogate.max_depth},
            {"min_leaf_weight", c.surrogate.min_leaf_weight},
            {"gamma1", c.surrogate.gamma1},
            {"gamma2", c.surrogate.gamma2},
            {"finetune_optimizer", c.surrogate.finetune.optimizer == NdtOptimizer::adam ? "adam" : "gd"},
            {"finetune_learning_rate", c.surrogate.finetune.learning_rate},
            {"finetune_epochs", c.surrogate.finetune.epochs},
            {"repeats", c.repeats},
            {"k", c.k},
            {"n_test_instances", c.n_test_instances},
            {"seed", c.seed},
            {"n_seeds", c.n_seeds},
            {"test_fraction", c.test_fraction},
            {"out", c.out},
            {"synth_n", c.synth_n},
            {"friedman_noise", c.friedman_noise},
            {"blobs_d", c.blobs_d},
            {"blobs_classes", c.blobs_classes},
            {"blobs_separation", c.blobs_separation},
            {"features", c.features},
            {"classes", c.classes},
            {"depths", c.depths},
            {"width", c.width},
            {"ks", c.ks},
            {"instance", c.instance},
            {"grid_resolution", c.grid_resolution},
            {"grid_half_width", c.grid_half_width}};
}

/// Applies the keys of a flat JSON object on top of `base`. Unknown keys are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {}) {
    if (!j.is_object()) throw InputError("config must be a JSON object");
    auto& c = base;
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "dataset" || key == "datasets") {
                c.datasets = v.is_array() ? v.get<std::vector<std::string>>() : std::vector<std::string>{v.get<std::string>()};
            } else if (key == "target") {
                c.target = v.is_string() ? v.get<std::string>() : std::to_string(v.get<int>());
            } else if (key == "task") c.task = v.get<std::string>();
            else if (key == "hidden_sizes") c.hidden_sizes = v.get<std::vector<int>>();
            else if (key == "mlp_learning_rate") c.mlp.learning_rate = v.get<double>();
            else if (key == "mlp_epochs") c.mlp.epochs = v.get<int>();
            else if (key == "mlp_batch_size") c.mlp.batch_size = v.get<int>();
            else if (key == "surrogates") {
                c.surrogates.clear();
                for (const auto& s : v) c.surrogates.push_back(parse_surrogate(s.get<std::string>()));
            } else if (key == "n_samples") c.neighborhood.n_samples = v.get<int>();
            else if (key == "kernel_width") c.neighborhood.kernel_width = v.get<double>();
            else if (key == "perturb_scale") c.neighborhood.perturb_scale = v.get<double>();
            else if (key == "max_depth") c.surrogate.max_depth = v.get<int>();
            else if (key == "min_leaf_weight") c.surrogate.min_leaf_weight = v.get<double>();
            else if (key == "gamma1") c.surrogate.gamma1 = v.get<double>();
            else if (key == "gamma2") c.surrogate.gamma2 = v.get<double>();
            else if (key == "finetune_optimizer") {
                const auto s = v.get<std::string>();
                if (s == "adam") c.surrogate.finetune.optimizer = NdtOptimizer::adam;
                else if (s == "gd") c.surrogate.finetune.optimizer = NdtOptimizer::gradient_descent;
                else throw InputError("finetune_optimizer must be 'adam' or 'gd'");
            } else if (key == "finetune_learning_rate") c.surrogate.finetune.learning_rate = v.get<double>();
            else if (key == "finetune_epochs") c.surrogate.finetune.epochs = v.get<int>();
            else if (key == "repeats") c.repeats = v.get<int>();
            else if (key == "k") c.k = v.get<int>();
            else if (key == "n_test_instances") c.n_test_instances = v.get<int>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "n_seeds") c.n_seeds = v.get<int>();
            else if (key == "test_fraction") c.test_fraction = v.get<double>();
            else if (key == "out") c.out = v.get<std::string>();
            else if (key == "synth_n") c.synth_n = v.get<int>();
            else if (key == "friedman_noise") c.friedman_noise = v.get<double>();
            else if (key == "blobs_d") c.blobs_d = v.get<int>();
            else if (key == "blobs_classes") c.blobs_classes = v.get<int>();
            else if (key == "blobs_separation") c.blobs_separation = v.get<double>();
            else if (key == "features") c.features = v.get<std::vector<std::size_t>>();
            else if (key == "classes") c.classes = v.get<std::vector<int>>();
            else if (key == "depths") c.depths = v.get<std::vector<int>>();
            else if (key == "width") c.width = v.get<int>();
            else if (key == "ks") c.ks = v.get<std::vector<int>>();
            else if (key == "instance") c.instance = v.get<int>();
            else if (key == "grid_resolution") c.grid_resolution = v.get<int>();
            else if (key == "grid_half_width") c.grid_half_width = v.get<double>();
            else throw InputError("unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw InputError("config key '" + key + "' has the wrong type: " + e.what());
        }
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw InputError("config file is not valid JSON: " + std::string(e.what()));
    }
    return config_from_json(j, std::move(base));
}

/// Display name of a dataset spec: bundled name, or the CSV file stem.
inline std::string dataset_label(const std::string& spec) {
    if (spec == "iris" || spec == "wine" || spec == "friedman1" || spec == "blobs") return spec;
    return std::filesystem::path(spec).stem().string();
}

/// Raw (unstandardised) dataset for one replicate seed.
inline Dataset resolve_dataset(const ExperimentConfig& c, const std::string& spec, std::uint64_t seed) {
    Dataset ds;
    if (spec == "iris" || spec == "wine") {
        ds = load_csv(bundled_data_dir() / (spec + ".csv"), "target", Task::classification);
    } else if (spec == "friedman1") {
        ds = synth_friedman1(static_cast<std::size_t>(c.synth_n), c.friedman_noise, seed);
    } else if (spec == "blobs") {
        ds = synth_blobs(static_cast<std::size_t>(c.synth_n), static_cast<std::size_t>(c.blobs_d), c.blobs_classes,
                         c.blobs_separation, seed);
    } else if (std::filesystem::exists(spec)) {
        ds = load_csv(spec, c.target, c.task.empty() ? Task::regression : parse_task(c.task));
    } else {
        throw InputError("cannot resolve dataset '" + spec + "' (not a bundled name or an existing CSV path)");
    }
    if (!c.classes.empty()) ds = select_classes(ds, c.classes);
    if (!c.features.empty()) ds = select_features(ds, c.features);
    return ds;
}

/// One replicate: standardised split plus the black box trained on it.
struct PreparedData {
    std::string name;
    std::uint64_t seed = 0;
    Dataset train, test;
    MlpModel model;

    std::size_t n_instances(int requested) const {
        return std::min(test.n(), static_cast<std::size_t>(requested));
    }
};

inline PreparedData prepare_data(const ExperimentConfig& c, const std::string& spec, std::uint64_t seed,
                                 const std::vector<int>& hidden_sizes) {
    PreparedData p;
    p.name = dataset_label(spec);
    p.seed = seed;
    auto [train, test] = standardize_split(resolve_dataset(c, spec, seed), c.test_fraction, seed);
    p.train = std::move(train);
    p.test = std::move(test);
    TrainingConfig tc = c.mlp;
    tc.seed = seed;
    p.model = mlp_train(p.train, hidden_sizes, tc);
    return p;
}

/// Explanation of test instance j, repeat r, using the configured neighbourhood and surrogate settings.
inline Explanation explain_test_instance(const ExperimentConfig& c, const PreparedData& p, Surrogate kind,
                                         std::size_t j, int r) {
    NeighborhoodConfig nc = c.neighborhood;
    nc.seed = explanation_seed(p.seed, j) + static_cast<std::uint64_t>(r);
    SurrogateConfig sc = c.surrogate;
    sc.finetune.seed = nc.seed;
    return explain_instance(make_blackbox(p.model), p.test.features.row(static_cast<Eigen::Index>(j)).transpose(), kind,
                            nc, sc);
}

struct CellError {
    std::string dataset;
    std::string surrogate;  // empty when the whole dataset failed
    std::string message;
};

inline nlohmann::json to_json(const std::vector<CellError>& errors) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : errors) arr.push_back({{"dataset", e.dataset}, {"surrogate", e.surrogate}, {"message", e.message}});
    return arr;
}

using Progress = std::function<void(const std::string&)>;

namespace detail {

inline void report(const Progress& progress, const std::string& msg) {
    if (progress) progress(msg);
}

inline std::string cell_text(const std::optional<MetricSummary>& s) {
    if (!s) return "NA";
    return fmt6(s->mean) + " ± " + fmt6(s->stddev);
}

// Value as printed, so the JSON twin carries exactly what the CSV shows.
inline double printed(double v) { return std::stod(fmt6(v)); }

inline nlohmann::json printed_json(const std::optional<MetricSummary>& s) {
    if (!s) return nullptr;
    return {{"mean", printed(s->mean)}, {"stddev", printed(s->stddev)}, {"n_used", s->n_used}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("write failed for " + path.string());
}

} // namespace detail

// ---------------------------------------------------------------------------------------------
// Metrics table

struct TableRow {
    std::string dataset;
    std::map<std::string, MetricsReport> reports;  // by surrogate name; absent when the cell failed
};

struct TableResult {
    ExperimentConfig config;
    std::vector<TableRow> rows;
    std::vector<CellError> errors;
};

/// Stability, fidelity and regularity for every dataset x surrogate, pooled over n_seeds replicates.
inline TableResult run_table(const ExperimentConfig& c, const Progress& progress = {}) {
    c.validate();
    TableResult res{c, {}, {}};
    for (const auto& spec : c.datasets) {
        TableRow row{dataset_label(spec), {}};
        std::map<std::string, MetricsReport> acc;
        std::set<std::string> failed;
        for (auto s : c.surrogates) {
            MetricsReport r;
            r.dataset = row.dataset;
            r.surrogate = std::string(to_string(s));
            r.n_samples = c.neighborhood.n_samples;
            r.repeats = c.repeats;
            r.k = c.k;
            acc[r.surrogate] = r;
        }
        bool data_failed = false;
        for (int si = 0; si < c.n_seeds && !data_failed; ++si) {
            PreparedData p;
            try {
                p = prepare_data(c, spec, c.dataset_seed(si), c.hidden_sizes);
            } catch (const std::exception& e) {
                res.errors.push_back({row.dataset, "", e.what()});
                data_failed = true;
                break;
            }
            const std::size_t m = p.n_instances(c.n_test_instances);
            for (auto s : c.surrogates) {
                const std::string sname(to_string(s));
                if (failed.count(sname)) continue;
                detail::report(progress, row.dataset + " seed " + std::to_string(si) + " " + sname);
                try {
                    std::vector<std::vector<double>> first(m);
                    std::vector<InstanceMetrics> inst(m);
                    for (std::size_t j = 0; j < m; ++j) {
                        std::vector<std::vector<double>> reps;
                        for (int r = 0; r < c.repeats; ++r) {
                            Explanation e = explain_test_instance(c, p, s, j, r);
                            if (r == 0) inst[j].fidelity = e.local_fidelity;
                            reps.push_back(std::move(e.vector));
                        }
                        inst[j].instance_id = static_cast<std::size_t>(si) * m + j;
                        inst[j].stability = stability_of(reps).value;
                        first[j] = reps.front();
                    }
                    const auto reg = regularity_k(first, p.test.features.topRows(static_cast<Eigen::Index>(m)), c.k);
                    for (std::size_t j = 0; j < m; ++j) {
                        inst[j].regularity = reg[j];
                        acc[sname].per_instance.push_back(inst[j]);
                    }
                } catch (const std::exception& e) {
                    res.errors.push_back({row.dataset, sname, e.what()});
                    failed.insert(sname);
                }
            }
        }
        if (!data_failed)
            for (auto& [name, r] : acc)
                if (!failed.count(name)) {
                    r.aggregate();
                    row.reports.emplace(name, std::move(r));
                }
        res.rows.push_back(std::move(row));
    }
    return res;
}

inline std::string table_csv(const TableResult& t) {
    std::ostringstream out;
    out << "dataset";
    for (const char* metric : {"stability", "fidelity", "regularity"})
        for (auto s : t.config.surrogates) out << ',' << metric << '_' << to_string(s);
    out << '\n';
    for (const auto& row : t.rows) {
        out << row.dataset;
        for (auto field : {&MetricsReport::stability, &MetricsReport::fidelity, &MetricsReport::regularity})
            for (auto s : t.config.surrogates) {
                const auto it = row.reports.find(std::string(to_string(s)));
                out << ',' << (it == row.reports.end() ? "ERROR" : detail::cell_text(it->second.*field));
            }
        out << '\n';
    }
    return out.str();
}

inline nlohmann::json table_json(const TableResult& t) {
    nlohmann::json rows = nlohmann::json::array();
    nlohmann::json reports = nlohmann::json::array();
    for (const auto& row : t.rows) {
        nlohmann::json cells;
        for (auto s : t.config.surrogates) {
            const std::string name(to_string(s));
            const auto it = row.reports.find(name);
            if (it == row.reports.end()) {
                for (const char* metric : {"stability", "fidelity", "regularity"}) cells[metric][name] = "ERROR";
                continue;
            }
            cells["stability"][name] = detail::printed_json(it->second.stability);
            cells["fidelity"][name] = detail::printed_json(it->second.fidelity);
            cells["regularity"][name] = detail::printed_json(it->second.regularity);
            reports.push_back(to_json(it->second));
        }
        rows.push_back({{"dataset", row.dataset}, {"cells", cells}});
    }
    return {{"config", to_json(t.config)}, {"rows", rows}, {"reports", reports}, {"errors", to_json(t.errors)}};
}

// ---------------------------------------------------------------------------------------------
// Fidelity runs and the depth sweep

struct FidelityRow {
    std::string dataset;
    int depth = 0;  // number of hidden layers of the black box
    std::string surrogate;
    std::optional<MetricSummary> fidelity;  // pooled over seeds and instances
    std::vector<std::optional<double>> seed_means;  // mean fidelity per replicate seed
};

struct FidelityResult {
    std::vector<FidelityRow> rows;
    std::vector<CellError> errors;
};

namespace detail {

inline void fidelity_cells(const ExperimentConfig& c, const std::string& spec, const std::vector<int>& hidden,
                           FidelityResult& res, const Progress& progress) {
    const std::string label = dataset_label(spec);
    const auto first = res.rows.size();
    for (auto s : c.surrogates) res.rows.push_back({label, static_cast<int>(hidden.size()), std::string(to_string(s)), {}, {}});
    std::vector<std::vector<std::optional<double>>> pooled(c.surrogates.size());
    std::vector<bool> failed(c.surrogates.size(), false);
    for (int si = 0; si < c.n_seeds; ++si) {
        PreparedData p;
        try {
            p = prepare_data(c, spec, c.dataset_seed(si), hidden);
        } catch (const std::exception& e) {
            res.errors.push_back({label, "", e.what()});
            std::fill(failed.begin(), failed.end(), true);
            break;
        }
        const std::size_t m = p.n_instances(c.n_test_instances);
        for (std::size_t a = 0; a < c.surrogates.size(); ++a) {
            if (failed[a]) continue;
            report(progress, label + " depth " + std::to_string(hidden.size()) + " seed " + std::to_string(si) + " " +
                                 res.rows[first + a].surrogate);
            try {
                std::vector<std::optional<double>> vals;
                for (std::size_t j = 0; j < m; ++j) vals.push_back(explain_test_instance(c, p, c.surrogates[a], j, 0).local_fidelity);
                const bool any = std::any_of(vals.begin(), vals.end(), [](const auto& v) { return v.has_value(); });
                res.rows[first + a].seed_means.push_back(any ? std::optional<double>(average_metric(vals).mean) : std::nullopt);
                pooled[a].insert(pooled[a].end(), vals.begin(), vals.end());
            } catch (const std::exception& e) {
                res.errors.push_back({label, res.rows[first + a].surrogate, e.what()});
                failed[a] = true;
            }
        }
    }
    for (std::size_t a = 0; a < c.surrogates.size(); ++a) {
        const auto& v = pooled[a];
        if (!failed[a] && std::any_of(v.begin(), v.end(), [](const auto& x) { return x.has_value(); }))
            res.rows[first + a].fidelity = average_metric(v);
    }
}

} // namespace detail

/// Mean local fidelity per dataset x surrogate with the configured black box.
inline FidelityResult run_fidelity(const ExperimentConfig& c, const Progress& progress = {}) {
    c.validate();
    FidelityResult res;
    for (const auto& spec : c.datasets) detail::fidelity_cells(c, spec, c.hidden_sizes, res, progress);
    return res;
}

/// One black box per depth (hidden layers of `width` units); every depth sees the same data replicates.
inline FidelityResult run_depth_sweep(const ExperimentConfig& c, const Progress& progress = {}) {
    c.validate();
    FidelityResult res;
    for (const auto& spec : c.datasets)
        for (int depth : c.depths) {
            detail::require(depth >= 1, "depths must be >= 1");
            detail::fidelity_cells(c, spec, std::vector<int>(static_cast<std::size_t>(depth), c.width), res, progress);
        }
    return res;
}

inline std::string depth_sweep_csv(const FidelityResult& r) {
    std::ostringstream out;
    out << "dataset,depth,surrogate,fidelity_mean,fidelity_std,n_used\n";
    for (const auto& row : r.rows) {
        out << row.dataset << ',' << row.depth << ',' << row.surrogate << ',';
        if (row.fidelity)
            out << fmt6(row.fidelity->mean) << ',' << fmt6(row.fidelity->stddev) << ',' << row.fidelity->n_used;
        else
            out << "NA,NA,0";
        out << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------------------------
// k sweep

struct KSweepRow {
    std::string dataset;
    int k = 0;
    std::string surrogate;
    std::optional<MetricSummary> regularity;
};

struct KSweepResult {
    std::vector<KSweepRow> rows;
    std::vector<CellError> errors;
};

/// Regularity for each k. With `use_cache` every explanation is computed once and shared across k.
inline KSweepResult run_k_sweep(const ExperimentConfig& c, bool use_cache = true, const Progress& progress = {}) {
    c.validate();
    const int k_max = *std::max_element(c.ks.begin(), c.ks.end());
    detail::require(*std::min_element(c.ks.begin(), c.ks.end()) >= 1, "ks must be >= 1");
    detail::require(k_max < c.n_test_instances, "k sweep needs max k < n_test_instances");
    KSweepResult res;
    for (const auto& spec : c.datasets) {
        const std::string label = dataset_label(spec);
        // pooled[surrogate][k index]
        std::vector<std::vector<std::vector<std::optional<double>>>> pooled(
            c.surrogates.size(), std::vector<std::vector<std::optional<double>>>(c.ks.size()));
        std::vector<bool> failed(c.surrogates.size(), false);
        for (int si = 0; si < c.n_seeds; ++si) {
            PreparedData p;
            try {
                p = prepare_data(c, spec, c.dataset_seed(si), c.hidden_sizes);
            } catch (const std::exception& e) {
                res.errors.push_back({label, "", e.what()});
                std::fill(failed.begin(), failed.end(), true);
                break;
            }
            const std::size_t m = p.n_instances(c.n_test_instances);
            const Matrix pts = p.test.features.topRows(static_cast<Eigen::Index>(m));
            for (std::size_t a = 0; a < c.surrogates.size(); ++a) {
                if (failed[a]) continue;
                const std::string sname(to_string(c.surrogates[a]));
                detail::report(progress, label + " seed " + std::to_string(si) + " " + sname);
                try {
                    const auto explain_all = [&] {
                        std::vector<std::vector<double>> v(m);
                        for (std::size_t j = 0; j < m; ++j) v[j] = explain_test_instance(c, p, c.surrogates[a], j, 0).vector;
                        return v;
                    };
                    std::vector<std::vector<double>> cached;
                    if (use_cache) cached = explain_all();
                    for (std::size_t ki = 0; ki < c.ks.size(); ++ki) {
                        const auto reg = regularity_k(use_cache ? cached : explain_all(), pts, c.ks[ki]);
                        pooled[a][ki].insert(pooled[a][ki].end(), reg.begin(), reg.end());
                    }
                } catch (const std::exception& e) {
                    res.errors.push_back({label, sname, e.what()});
                    failed[a] = true;
                }
            }
        }
        for (std::size_t ki = 0; ki < c.ks.size(); ++ki)
            for (std::size_t a = 0; a < c.surrogates.size(); ++a) {
                KSweepRow row{label, c.ks[ki], std::string(to_string(c.surrogates[a])), {}};
                if (!failed[a] && !pooled[a][ki].empty()) row.regularity = average_metric(pooled[a][ki]);
                res.rows.push_back(std::move(row));
            }
    }
    return res;
}

inline std::string k_sweep_csv(const KSweepResult& r) {
    std::ostringstream out;
    out << "dataset,k,surrogate,regularity_mean,regularity_std,n_used\n";
    for (const auto& row : r.rows) {
        out << row.dataset << ',' << row.k << ',' << row.surrogate << ',';
        if (row.regularity)
            out << fmt6(row.regularity->mean) << ',' << fmt6(row.regularity->stddev) << ',' << row.regularity->n_used;
        else
            out << "NA,NA,0";
        out << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------------------------
// Decision-boundary grid

struct BoundaryGridResult {
    std::string dataset;
    std::size_t instance = 0;
    Vector center;
    Matrix grid;  // rows: x, y, f_pred, dt_pred, ndt_init_pred, ndt_tuned_pred
    int leaves = 0;
    double agreement_init = 0.0;   // weighted agreement with f's label on the neighbourhood
    double agreement_tuned = 0.0;
    std::vector<double> loss_trace;
};

namespace detail {

inline Vector row_argmax(const Matrix& s) {
    Vector out(s.rows());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        Eigen::Index c = 0;
        s.row(i).maxCoeff(&c);
        out[i] = static_cast<double>(c);
    }
    return out;
}

inline std::size_t closest_to_boundary(const PreparedData& p) {
    const Matrix s = mlp_predict(p.model, p.test.features);
    if (s.cols() < 2) return 0;
    std::size_t best = 0;
    double best_margin = INFINITY;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        Eigen::RowVectorXd r = s.row(i);
        std::sort(r.data(), r.data() + r.size(), std::greater<>());
        if (r[0] - r[1] < best_margin) {
            best_margin = r[0] - r[1];
            best = static_cast<std::size_t>(i);
        }
    }
    return best;
}

} // namespace detail

/// Fits DT and NDT to the black box around one test point of a 2-feature dataset and evaluates
/// everything on a resolution x resolution lattice centred on it. Classification surrogates are
/// fitted to f's predicted labels; regression surrogates to f's values.
inline BoundaryGridResult export_boundary_grid(const ExperimentConfig& c, const Progress& progress = {}) {
    c.validate();
    const std::string& spec = c.datasets.front();
    detail::report(progress, "boundary grid on " + dataset_label(spec));
    const PreparedData p = prepare_data(c, spec, c.dataset_seed(0), c.hidden_sizes);
    if (p.train.d() != 2)
        throw InputError("boundary grid needs exactly 2 features, dataset has " + std::to_string(p.train.d()) +
                         " (use the 'features' setting)");

    BoundaryGridResult res;
    res.dataset = p.name;
    if (c.instance >= 0) {
        detail::require(static_cast<std::size_t>(c.instance) < p.test.n(), "instance index out of range");
        res.instance = static_cast<std::size_t>(c.instance);
    } else {
        res.instance = detail::closest_to_boundary(p);
    }
    res.center = p.test.features.row(static_cast<Eigen::Index>(res.instance)).transpose();

    NeighborhoodConfig nc = c.neighborhood;
    nc.seed = explanation_seed(p.seed, res.instance);
    const Matrix points = perturb(res.center, nc);
    const Vector w = proximity_weights(points, res.center, nc.resolved_kernel_width(2));
    const bool cls = p.model.task == Task::classification;
    const auto f_out = [&](const Matrix& x) -> Vector {
        const Matrix s = mlp_predict(p.model, x);
        return cls ? detail::row_argmax(s) : Vector(s.col(0));
    };
    const Vector labels = f_out(points);

    CartConfig cart;
    cart.task = p.model.task;
    cart.max_depth = c.surrogate.max_depth;
    cart.min_leaf_weight = c.surrogate.min_leaf_weight;
    cart.n_classes = cls ? p.model.output_dim() : 0;
    const DecisionTree tree = fit_weighted_cart(points, std::span<const double>(labels.data(), labels.size()),
                                                std::span<const double>(w.data(), w.size()), cart);
    if (tree.n_leaves < 2)
        throw NumericalError("the neighbourhood of instance " + std::to_string(res.instance) +
                             " is pure, so the surrogate tree has a single leaf; pick an instance nearer the boundary");
    res.leaves = tree.n_leaves;

    Matrix targets(points.rows(), tree.output_dim());
    if (cls) {
        targets.setZero();
        for (Eigen::Index i = 0; i < points.rows(); ++i) targets(i, static_cast<Eigen::Index>(labels[i])) = 1.0;
    } else {
        targets.col(0) = labels;
    }
    const NdtParams init = convert_dt_to_ndt(tree, {c.surrogate.gamma1, c.surrogate.gamma2, NdtMode::soft, LeafBias::corrected});
    FinetuneConfig fc = c.surrogate.finetune;
    fc.seed = nc.seed;
    const FinetuneResult tuned = ndt_finetune(init, points, targets, w, fc);
    res.loss_trace = tuned.loss_trace;

    const auto surrogate_out = [&](const Matrix& s) -> Vector { return cls ? detail::row_argmax(s) : Vector(s.col(0)); };
    const auto agreement = [&](const NdtParams& np) {
        const Vector pred = surrogate_out(ndt_forward(np, points));
        if (!cls) return fidelity_r2(labels, pred).value_or(0.0);
        double hit = 0.0;
        for (Eigen::Index i = 0; i < pred.size(); ++i) hit += w[i] * (pred[i] == labels[i]);
        return hit / w.sum();
    };
    res.agreement_init = agreement(init);
    res.agreement_tuned = agreement(tuned.params);

    const int n = c.grid_resolution;
    Matrix lattice(static_cast<Eigen::Index>(n) * n, 2);
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
            const double t0 = -c.grid_half_width + 2.0 * c.grid_half_width * a / (n - 1);
            const double t1 = -c.grid_half_width + 2.0 * c.grid_half_width * b / (n - 1);
            lattice(a * n + b, 0) = res.center[0] + t0;
            lattice(a * n + b, 1) = res.center[1] + t1;
        }
    res.grid.resize(lattice.rows(), 6);
    res.grid.leftCols(2) = lattice;
    res.grid.col(2) = f_out(lattice);
    res.grid.col(3) = surrogate_out(tree_predict(tree, lattice));
    res.grid.col(4) = surrogate_out(ndt_forward(init, lattice));
    res.grid.col(5) = surrogate_out(ndt_forward(tuned.params, lattice));
    return res;
}

inline std::string boundary_grid_csv(const BoundaryGridResult& r) {
    std::ostringstream out;
    out << "x,y,f_pred,dt_pred,ndt_init_pred,ndt_tuned_pred\n";
    for (Eigen::Index i = 0; i < r.grid.rows(); ++i) {
        for (Eigen::Index j = 0; j < 6; ++j) out << (j ? "," : "") << fmt6(r.grid(i, j));
        out << '\n';
    }
    return out.str();
}

inline nlohmann::json to_json(const BoundaryGridResult& r) {
    return {{"dataset", r.dataset},
            {"instance", r.instance},
            {"center", std::vector<double>(r.center.data(), r.center.data() + r.center.size())},
            {"leaves", r.leaves},
            {"agreement_init", detail::printed(r.agreement_init)},
            {"agreement_tuned", detail::printed(r.agreement_tuned)},
            {"loss_initial", detail::printed(r.loss_trace.front())},
            {"loss_final", detail::printed(r.loss_trace.back())},
            {"epochs_run", r.loss_trace.size() - 1}};
}

// ---------------------------------------------------------------------------------------------
// Stability matrices

struct StabilityMatrixResult {
    std::string dataset;
    std::size_t instance = 0;
    std::map<std::string, StabilityResult> by_surrogate;
    std::vector<CellError> errors;
};

/// R x R cosine matrix per surrogate for one test instance of the first replicate. Seeds match
/// run_table, so the upper-triangle mean equals that instance's stability there.
inline StabilityMatrixResult export_stability_matrix(const ExperimentConfig& c, const Progress& progress = {}) {
    c.validate();
    const std::string& spec = c.datasets.front();
    const PreparedData p = prepare_data(c, spec, c.dataset_seed(0), c.hidden_sizes);
    StabilityMatrixResult res;
    res.dataset = p.name;
    res.instance = c.instance < 0 ? 0 : static_cast<std::size_t>(c.instance);
    detail::require(res.instance < p.n_instances(c.n_test_instances), "instance index out of range");
    for (auto s : c.surrogates) {
        const std::string sname(to_string(s));
        detail::report(progress, "stability matrix " + p.name + " " + sname);
        try {
            std::vector<std::vector<double>> reps;
            for (int r = 0; r < c.repeats; ++r) reps.push_back(explain_test_instance(c, p, s, res.instance, r).vector);
            res.by_surrogate.emplace(sname, stability_of(reps));
        } catch (const std::exception& e) {
            res.errors.push_back({p.name, sname, e.what()});
        }
    }
    return res;
}

inline std::string matrix_csv(const Matrix& m) {
    std::ostringstream out;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << fmt6(m(i, j));
        out << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------------------------
// Output directories

/// Directory for a new run. An existing non-empty `requested` is never reused unless `overwrite`
/// is set; a timestamped sibling is created instead.
inline std::filesystem::path prepare_output_dir(const std::filesystem::path& requested, bool overwrite) {
    namespace fs = std::filesystem;
    const auto usable = [](const fs::path& p) { return !fs::exists(p) || (fs::is_directory(p) && fs::is_empty(p)); };
    fs::path dir = requested;
    if (!usable(dir) && !(overwrite && fs::is_directory(dir))) {
        const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::tm tm{};
        gmtime_r(&now, &tm);
        std::ostringstream stamp;
        stamp << std::put_time(&tm, "%Y%m%d-%H%M%S");
        const std::string base = requested.string() + "-" + stamp.str();
        dir = base;
        for (int i = 1; !usable(dir); ++i) dir = base + "-" + std::to_string(i);
    }
    fs::create_directories(dir);
    return dir;
}

/// Writes errors.json when there were failures; returns true when the run was clean.
inline bool write_error_manifest(const std::filesystem::path& dir, const std::vector<CellError>& errors) {
    if (errors.empty()) return true;
    detail::write_text(dir / "errors.json", to_json(errors).dump(2) + "\n");
    return false;
}

} // namespace ndtlime
