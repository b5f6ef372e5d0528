#pragma once

#include "ndtlime/core.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace ndtlime {

/// Per-feature z-score parameters, fitted on a training portion.
struct Scaler {
    std::vector<double> mean;
    std::vector<double> stddev;  // population stddev; 0 marks a constant column

    bool empty() const { return mean.empty(); }

    static Scaler fit(const Matrix& x) {
        Scaler s;
        const auto n = static_cast<double>(x.rows());
        s.mean.resize(x.cols());
        s.stddev.resize(x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double m = x.col(j).sum() / n;
            const double var = (x.col(j).array() - m).square().sum() / n;
            const double sd = std::sqrt(var);
            s.mean[j] = m;
            s.stddev[j] = sd <= 1e-12 * std::max(1.0, std::abs(m)) ? 0.0 : sd;
        }
        return s;
    }

    Matrix apply(const Matrix& x) const {
        detail::require_dims(static_cast<std::size_t>(x.cols()) == mean.size(),
                             "scaler width does not match matrix");
        Matrix out(x.rows(), x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            if (stddev[j] == 0.0)
                out.col(j).setZero();
            else
                out.col(j) = (x.col(j).array() - mean[j]) / stddev[j];
        }
        return out;
    }
};

struct Dataset {
    Matrix features;                 // n x d
    std::vector<double> targets;     // real values, or class indices 0..C-1
    std::vector<std::string> feature_names;
    Task task = Task::regression;
    Scaler scaler;                   // empty until standardize_split

    std::size_t n() const { return static_cast<std::size_t>(features.rows()); }
    std::size_t d() const { return static_cast<std::size_t>(features.cols()); }

    int n_classes() const {
        if (task != Task::classification || targets.empty()) return 0;
        return static_cast<int>(*std::max_element(targets.begin(), targets.end())) + 1;
    }

    void validate() const {
        detail::require(n() >= 2, "dataset needs at least 2 rows");
        detail::require(d() >= 1, "dataset needs at least 1 feature");
        detail::require(targets.size() == n(), "targets length must equal row count");
        detail::require(feature_names.size() == d(), "feature_names length must equal d");
        if (task == Task::classification) {
            for (double t : targets)
                detail::require(t >= 0 && t == std::floor(t),
                                "classification targets must be non-negative integers");
        }
    }

    /// Per-feature spread in the space the features currently live in.
    std::vector<double> feature_stddev() const { return Scaler::fit(features).stddev; }
};

namespace detail {

inline std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline bool parse_real(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size() && std::isfinite(out);
}

} // namespace detail

/// Reads a headed CSV. `target` is a column name, or a 0-based index when no header matches.
/// Classification labels are remapped to 0..C-1 in ascending label order.
inline Dataset load_csv(const std::filesystem::path& path, const std::string& target, Task task) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open CSV file: " + path.string());

    std::string line;
    if (!std::getline(in, line)) throw InputError("CSV file is empty: " + path.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    const auto header = detail::split_csv_line(line);

    std::size_t target_col = header.size();
    for (std::size_t j = 0; j < header.size(); ++j)
        if (header[j] == target) target_col = j;
    if (target_col == header.size()) {
        double idx = 0;
        if (detail::parse_real(target, idx) && idx >= 0 && idx == std::floor(idx) &&
            idx < static_cast<double>(header.size()))
            target_col = static_cast<std::size_t>(idx);
        else
            throw InputError("unknown target column: " + target);
    }

    Dataset ds;
    ds.task = task;
    for (std::size_t j = 0; j < header.size(); ++j)
        if (j != target_col) ds.feature_names.push_back(header[j]);

    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (detail::trim(line).empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw InputError("row " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                             " cells, expected " + std::to_string(header.size()));
        std::vector<double> row;
        row.reserve(header.size());
        double target_value = 0;
        for (std::size_t j = 0; j < cells.size(); ++j) {
            double v = 0;
            if (!detail::parse_real(cells[j], v))
                throw InputError("unparsable cell '" + cells[j] + "' at row " + std::to_string(line_no) +
                                 ", column '" + header[j] + "'");
            if (j == target_col)
                target_value = v;
            else
                row.push_back(v);
        }
        row.push_back(target_value);
        rows.push_back(std::move(row));
    }
    if (rows.size() < 2) throw InputError("CSV needs at least 2 data rows: " + path.string());

    const std::size_t d = header.size() - 1;
    ds.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
    ds.targets.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) ds.features(i, j) = rows[i][j];
        ds.targets[i] = rows[i][d];
    }

    if (task == Task::classification) {
        std::map<double, int> labels;
        for (double t : ds.targets) {
            if (t != std::floor(t)) throw InputError("classification target is not an integer: " + fmt6(t));
            labels.emplace(t, 0);
        }
        int next = 0;
        for (auto& [label, idx] : labels) idx = next++;
        for (double& t : ds.targets) t = labels.at(t);
    }
    ds.validate();
    return ds;
}

/// Seeded shuffle split; the scaler is fitted on the training rows and applied to both parts.
inline std::pair<Dataset, Dataset> standardize_split(const Dataset& data, double test_fraction,
                                                     std::uint64_t seed) {
    const auto n = static_cast<double>(data.n());
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw InputError("test_fraction must lie in (0, 1)");
    const auto n_test = static_cast<std::size_t>(std::llround(n * test_fraction));
    if (n_test < 1 || data.n() - n_test < 2)
        throw InputError("test_fraction leaves an empty test set or fewer than 2 training rows");

    std::vector<std::size_t> order(data.n());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const auto take = [&](std::size_t begin, std::size_t end) {
        Dataset part;
        part.task = data.task;
        part.feature_names = data.feature_names;
        part.features.resize(static_cast<Eigen::Index>(end - begin), data.features.cols());
        for (std::size_t i = begin; i < end; ++i) {
            part.features.row(i - begin) = data.features.row(order[i]);
            part.targets.push_back(data.targets[order[i]]);
        }
        return part;
    };
    Dataset train = take(0, data.n() - n_test);
    Dataset test = take(data.n() - n_test, data.n());
    train.scaler = Scaler::fit(train.features);
    test.scaler = train.scaler;
    train.features = train.scaler.apply(train.features);
    test.features = train.scaler.apply(test.features);
    return {std::move(train), std::move(test)};
}

/// Noise-free Friedman #1 response for the first five coordinates of `x`.
inline double friedman1_response(const Eigen::Ref<const Eigen::RowVectorXd>& x) {
    return 10.0 * std::sin(std::numbers::pi * x[0] * x[1]) + 20.0 * (x[2] - 0.5) * (x[2] - 0.5) +
           10.0 * x[3] + 5.0 * x[4];
}

inline Dataset synth_friedman1(std::size_t n, double noise_std, std::uint64_t seed) {
    detail::require(n >= 10, "synth_friedman1 needs n >= 10");
    detail::require(noise_std >= 0.0, "noise_std must be non-negative");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);

    Dataset ds;
    ds.task = Task::regression;
    ds.features.resize(static_cast<Eigen::Index>(n), 10);
    for (auto& v : ds.features.reshaped()) v = unif(rng);
    ds.targets.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        ds.targets[i] = friedman1_response(ds.features.row(i)) + noise_std * noise(rng);
    for (int j = 1; j <= 10; ++j) ds.feature_names.push_back("x" + std::to_string(j));
    return ds;
}

/// C unit-variance Gaussian clusters. For C <= d the centers sit on scaled basis vectors so every
/// pair is `separation` apart; otherwise they are spaced `separation` apart along the first axis.
/// Row i belongs to class i mod C.
inline Dataset synth_blobs(std::size_t n, std::size_t d, int n_classes, double separation,
                           std::uint64_t seed) {
    detail::require(n_classes >= 1 && d >= 1, "synth_blobs needs C >= 1 and d >= 1");
    detail::require(n >= 2 * static_cast<std::size_t>(n_classes), "synth_blobs needs n >= 2C");
    detail::require(separation > 0.0, "separation must be positive");

    Matrix centers = Matrix::Zero(n_classes, static_cast<Eigen::Index>(d));
    for (int c = 0; c < n_classes; ++c) {
        if (static_cast<std::size_t>(n_classes) <= d)
            centers(c, c) = separation / std::numbers::sqrt2;
        else
            centers(c, 0) = separation * c;
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Dataset ds;
    ds.task = Task::classification;
    ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    ds.targets.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % static_cast<std::size_t>(n_classes));
        ds.targets[i] = c;
        for (std::size_t j = 0; j < d; ++j) ds.features(i, j) = centers(c, j) + normal(rng);
    }
    for (std::size_t j = 0; j < d; ++j) ds.feature_names.push_back("f" + std::to_string(j));
    return ds;
}

/// Keeps only the listed feature columns (in the given order).
inline Dataset select_features(const Dataset& data, const std::vector<std::size_t>& columns) {
    Dataset out = data;
    out.features.resize(data.features.rows(), static_cast<Eigen::Index>(columns.size()));
    out.feature_names.clear();
    Scaler sc;
    for (std::size_t k = 0; k < columns.size(); ++k) {
        detail::require(columns[k] < data.d(), "feature column out of range");
        out.features.col(k) = data.features.col(columns[k]);
        out.feature_names.push_back(data.feature_names[columns[k]]);
        if (!data.scaler.empty()) {
            sc.mean.push_back(data.scaler.mean[columns[k]]);
            sc.stddev.push_back(data.scaler.stddev[columns[k]]);
        }
    }
    out.scaler = sc;
    return out;
}

/// Keeps rows whose class is in `classes`, relabelled 0..|classes|-1 in the given order.
inline Dataset select_classes(const Dataset& data, const std::vector<int>& classes) {
    detail::require(data.task == Task::classification, "select_classes needs a classification dataset");
    std::vector<Eigen::Index> keep;
    std::vector<double> labels;
    for (std::size_t i = 0; i < data.n(); ++i) {
        const auto it = std::find(classes.begin(), classes.end(), static_cast<int>(data.targets[i]));
        if (it != classes.end()) {
            keep.push_back(static_cast<Eigen::Index>(i));
            labels.push_back(static_cast<double>(it - classes.begin()));
        }
    }
    detail::require(keep.size() >= 2, "class selection leaves fewer than 2 rows");
    Dataset out = data;
    out.features = data.features(keep, Eigen::all);
    out.targets = std::move(labels);
    return out;
}

/// Directory holding the bundled CSV assets; NDTLIME_DATA_DIR in the environment overrides the
/// compiled-in default.
inline std::filesystem::path bundled_data_dir() {
    if (const char* env = std::getenv("NDTLIME_DATA_DIR")) return env;
#ifdef NDTLIME_DEFAULT_DATA_DIR
    return NDTLIME_DEFAULT_DATA_DIR;
#else
    return "data";
#endif
}

} // namespace ndtlime
