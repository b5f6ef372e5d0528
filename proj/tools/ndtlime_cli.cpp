// Experiment harness: metric tables, depth and k sweeps, boundary grids, stability matrices.

#include "ndtlime/ndtlime.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace fs = std::filesystem;
using namespace ndtlime;

namespace {

struct Flags {
    std::string config_file;
    std::vector<std::string> datasets;
    std::string target, task, out;
    std::uint64_t seed = 0;
    int n_test = 0, repeats = 0, n_seeds = 0, instance = -2, resolution = 0, width = 0, k = 0;
    std::vector<int> depths, ks, classes, hidden;
    std::vector<std::size_t> features;
    std::vector<std::string> surrogates;
    bool overwrite = false, quiet = false, no_cache = false;
};

// Options live either on the main app or on the chosen subcommand.
bool option_given(const CLI::App& app, const std::string& name) {
    if (app.get_option_no_throw(name) && app.count(name)) return true;
    for (const auto* sub : app.get_subcommands())
        if (sub->get_option_no_throw(name) && sub->count(name)) return true;
    return false;
}

ExperimentConfig build_config(const Flags& f, const CLI::App& app) {
    ExperimentConfig c;
    if (!f.config_file.empty()) c = load_config(f.config_file);
    const auto given = [&](const char* name) { return option_given(app, name); };
    if (!f.datasets.empty()) c.datasets = f.datasets;
    if (given("--target")) c.target = f.target;
    if (given("--task")) c.task = f.task;
    if (given("--out")) c.out = f.out;
    if (given("--seed")) c.seed = f.seed;
    if (given("--n-test")) c.n_test_instances = f.n_test;
    if (given("--repeats")) c.repeats = f.repeats;
    if (given("--n-seeds")) c.n_seeds = f.n_seeds;
    if (given("--k")) c.k = f.k;
    if (given("--instance")) c.instance = f.instance;
    if (given("--resolution")) c.grid_resolution = f.resolution;
    if (given("--width")) c.width = f.width;
    if (!f.depths.empty()) c.depths = f.depths;
    if (!f.ks.empty()) c.ks = f.ks;
    if (!f.classes.empty()) c.classes = f.classes;
    if (!f.features.empty()) c.features = f.features;
    if (!f.hidden.empty()) c.hidden_sizes = f.hidden;
    if (!f.surrogates.empty()) {
        c.surrogates.clear();
        for (const auto& s : f.surrogates) c.surrogates.push_back(parse_surrogate(s));
    }
    c.validate();
    return c;
}

void write(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    std::cout << path.string() << '\n';
}

int finish(const fs::path& dir, const std::vector<CellError>& errors) {
    if (write_error_manifest(dir, errors)) return 0;
    std::cerr << errors.size() << " cell(s) failed; see " << (dir / "errors.json").string() << '\n';
    for (const auto& e : errors)
        std::cerr << "  " << e.dataset << (e.surrogate.empty() ? "" : "/" + e.surrogate) << ": " << e.message << '\n';
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Local surrogate explanations (LR, DT, NDT) of MLP black boxes: experiment harness"};
    app.require_subcommand(1);
    Flags f;
    app.add_option("--config", f.config_file, "Flat JSON config file; flags override its keys")->check(CLI::ExistingFile);
    app.add_option("--dataset", f.datasets, "iris | wine | friedman1 | blobs | CSV path (repeatable)");
    app.add_option("--target", f.target, "Target column of a CSV dataset (name or 0-based index)");
    app.add_option("--task", f.task, "Task of a CSV dataset")->check(CLI::IsMember({"regression", "classification"}));
    app.add_option("--seed", f.seed, "Base seed");
    app.add_option("--out", f.out, "Output directory");
    app.add_flag("--overwrite", f.overwrite, "Write into an existing non-empty output directory");
    app.add_option("--n-test", f.n_test, "Test instances per replicate");
    app.add_option("--repeats", f.repeats, "Stability repeats R");
    app.add_option("--n-seeds", f.n_seeds, "Dataset replicates");
    app.add_option("--k", f.k, "Neighbours for regularity");
    app.add_option("--hidden", f.hidden, "Black-box hidden layer sizes")->delimiter(',');
    app.add_option("--surrogates", f.surrogates, "Surrogates to evaluate (LR, DT, NDT)")->delimiter(',');
    app.add_option("--features", f.features, "Keep only these feature columns")->delimiter(',');
    app.add_option("--classes", f.classes, "Keep only these classes")->delimiter(',');
    app.add_flag("--quiet", f.quiet, "No progress on stderr");

    auto* table = app.add_subcommand("run-table", "Stability / fidelity / regularity table (CSV + JSON)");
    auto* depth = app.add_subcommand("depth-sweep", "Fidelity versus black-box depth");
    depth->add_option("--depths", f.depths, "Depths to sweep")->delimiter(',');
    depth->add_option("--width", f.width, "Units per hidden layer");
    auto* ksweep = app.add_subcommand("k-sweep", "Regularity versus k");
    ksweep->add_option("--ks", f.ks, "Values of k")->delimiter(',');
    ksweep->add_flag("--no-cache", f.no_cache, "Recompute explanations for every k");
    auto* grid = app.add_subcommand("boundary-grid", "Decision-boundary lattice for a 2-feature dataset");
    grid->add_option("--instance", f.instance, "Test instance (-1: nearest the black-box boundary)");
    grid->add_option("--resolution", f.resolution, "Lattice points per axis");
    auto* stab = app.add_subcommand("stability-matrix", "R x R cosine matrices for one test instance");
    stab->add_option("--instance", f.instance, "Test instance");
    for (auto* sub : {table, depth, ksweep, grid, stab}) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        const ExperimentConfig c = build_config(f, app);

        const Progress progress = f.quiet ? Progress{} : Progress{[](const std::string& m) { std::cerr << "[ndtlime] " << m << '\n'; }};
        const fs::path dir = prepare_output_dir(c.out, f.overwrite);
        write(dir / "config.json", to_json(c).dump(2) + "\n");

        if (*table) {
            const auto res = run_table(c, progress);
            write(dir / "table.csv", table_csv(res));
            write(dir / "table.json", table_json(res).dump(2) + "\n");
            return finish(dir, res.errors);
        }
        if (*depth) {
            const auto res = run_depth_sweep(c, progress);
            write(dir / "depth_sweep.csv", depth_sweep_csv(res));
            return finish(dir, res.errors);
        }
        if (*ksweep) {
            const auto res = run_k_sweep(c, !f.no_cache, progress);
            write(dir / "k_sweep.csv", k_sweep_csv(res));
            return finish(dir, res.errors);
        }
        if (*grid) {
            const auto res = export_boundary_grid(c, progress);
            write(dir / "boundary_grid.csv", boundary_grid_csv(res));
            write(dir / "boundary_grid.json", to_json(res).dump(2) + "\n");
            return 0;
        }
        if (*stab) {
            const auto res = export_stability_matrix(c, progress);
            nlohmann::json summary{{"dataset", res.dataset}, {"instance", res.instance}};
            for (const auto& [name, s] : res.by_surrogate) {
                write(dir / ("stability_matrix_" + name + ".csv"), matrix_csv(s.matrix));
                summary["stability"][name] = s.value ? nlohmann::json(std::stod(fmt6(*s.value))) : nlohmann::json(nullptr);
            }
            write(dir / "stability_matrix.json", summary.dump(2) + "\n");
            return finish(dir, res.errors);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
