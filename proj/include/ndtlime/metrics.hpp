#pragma once

#include "ndtlime/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ndtlime {

/// Coefficient of determination of g against f, with the mean of f as the baseline.
/// Returns nullopt when f is constant (total sum of squares below 1e-12).
inline std::optional<double> fidelity_r2(std::span<const double> f_vals, std::span<const double> g_vals) {
    detail::require_dims(f_vals.size() == g_vals.size(), "fidelity_r2: length mismatch");
    detail::require(f_vals.size() >= 2, "fidelity_r2: need at least 2 values");
    const double mean = std::accumulate(f_vals.begin(), f_vals.end(), 0.0) / static_cast<double>(f_vals.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < f_vals.size(); ++i) {
        ss_res += (f_vals[i] - g_vals[i]) * (f_vals[i] - g_vals[i]);
        ss_tot += (f_vals[i] - mean) * (f_vals[i] - mean);
    }
    if (ss_tot < 1e-12) return std::nullopt;
    return 1.0 - ss_res / ss_tot;
}

inline std::optional<double> fidelity_r2(const Vector& f_vals, const Vector& g_vals) {
    return fidelity_r2(std::span<const double>(f_vals.data(), f_vals.size()),
                       std::span<const double>(g_vals.data(), g_vals.size()));
}

struct Cosine {
    double value = 0.0;
    bool zero_vector = false;  // an argument had norm < 1e-12; value is 0
};

inline Cosine cosine(std::span<const double> a, std::span<const double> b) {
    detail::require_dims(a.size() == b.size(), "cosine: length mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (std::sqrt(aa) < 1e-12 || std::sqrt(bb) < 1e-12) return {0.0, true};
    return {ab / std::sqrt(aa * bb), false};
}

/// Explanation procedure re-run with a given seed.
using SeededExplainer = std::function<std::vector<double>(std::uint64_t seed)>;

/// Pairwise cosine matrix of a set of explanations. Diagonal entries are 1, or 0 for zero vectors.
inline Matrix stability_matrix_of(const std::vector<std::vector<double>>& expl) {
    const auto r = static_cast<Eigen::Index>(expl.size());
    Matrix m(r, r);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = i; j < r; ++j) m(i, j) = m(j, i) = cosine(expl[i], expl[j]).value;
    return m;
}

struct StabilityResult {
    std::optional<double> value;  // nullopt when every explanation is the zero vector
    int zero_vectors = 0;
    Matrix matrix;
};

/// Mean pairwise cosine over the R(R-1)/2 unordered pairs.
inline StabilityResult stability_of(const std::vector<std::vector<double>>& expl) {
    detail::require(expl.size() >= 2, "stability needs R >= 2 explanations");
    StabilityResult res;
    res.matrix = stability_matrix_of(expl);
    for (const auto& e : expl) res.zero_vectors += cosine(e, e).zero_vector;
    if (res.zero_vectors == static_cast<int>(expl.size())) return res;
    double sum = 0.0;
    const auto r = res.matrix.rows();
    for (Eigen::Index i = 0; i + 1 < r; ++i)
        for (Eigen::Index j = i + 1; j < r; ++j) sum += res.matrix(i, j);
    res.value = sum / (0.5 * static_cast<double>(r) * static_cast<double>(r - 1));
    return res;
}

/// Runs `explain` with seeds base_seed, base_seed + 1, ..., base_seed + R - 1.
inline std::vector<std::vector<double>> collect_repeats(const SeededExplainer& explain, int repeats, std::uint64_t base_seed) {
    detail::require(repeats >= 2, "need R >= 2 repeats");
    std::vector<std::vector<double>> out;
    out.reserve(repeats);
    for (int r = 0; r < repeats; ++r) out.push_back(explain(base_seed + static_cast<std::uint64_t>(r)));
    return out;
}

inline StabilityResult stability(const SeededExplainer& explain, int repeats, std::uint64_t base_seed = 0) {
    return stability_of(collect_repeats(explain, repeats, base_seed));
}

inline Matrix stability_matrix(const SeededExplainer& explain, int repeats, std::uint64_t base_seed = 0) {
    return stability_matrix_of(collect_repeats(explain, repeats, base_seed));
}

/// Indices of the k nearest rows to row i (Euclidean, self excluded, ties to the lower index).
inline std::vector<std::size_t> nearest_neighbors(const Matrix& features, std::size_t i, int k) {
    std::vector<std::pair<double, std::size_t>> dist;
    dist.reserve(features.rows());
    for (Eigen::Index j = 0; j < features.rows(); ++j) {
        if (static_cast<std::size_t>(j) == i) continue;
        dist.emplace_back((features.row(j) - features.row(i)).squaredNorm(), j);
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    std::vector<std::size_t> out(k);
    for (int t = 0; t < k; ++t) out[t] = dist[t].second;
    return out;
}

/// Mean cosine between each instance's explanation and those of its k nearest neighbours.
inline std::vector<double> regularity_k(const std::vector<std::vector<double>>& explanations, const Matrix& features, int k) {
    detail::require_dims(explanations.size() == static_cast<std::size_t>(features.rows()),
                         "regularity_k: one explanation per row required");
    detail::require(k >= 1 && static_cast<std::size_t>(k) < explanations.size(), "regularity_k: need 1 <= k < n");
    std::vector<double> out(explanations.size());
    for (std::size_t i = 0; i < explanations.size(); ++i) {
        double sum = 0.0;
        for (std::size_t j : nearest_neighbors(features, i, k)) sum += cosine(explanations[i], explanations[j]).value;
        out[i] = sum / k;
    }
    return out;
}

struct MetricSummary {
    double mean = 0.0;
    double stddev = 0.0;  // sample stddev; 0 when only one value is used
    int n_used = 0;
};

/// Arithmetic mean and sample stddev over the non-missing entries.
inline MetricSummary average_metric(const std::vector<std::optional<double>>& values) {
    MetricSummary s;
    double sum = 0.0;
    for (const auto& v : values)
        if (v) {
            sum += *v;
            ++s.n_used;
        }
    if (s.n_used == 0) throw InputError("average_metric: every value is missing");
    s.mean = sum / s.n_used;
    if (s.n_used > 1) {
        double ss = 0.0;
        for (const auto& v : values)
            if (v) ss += (*v - s.mean) * (*v - s.mean);
        s.stddev = std::sqrt(ss / (s.n_used - 1));
    }
    return s;
}

inline MetricSummary average_metric(const std::vector<double>& values) {
    return average_metric(std::vector<std::optional<double>>(values.begin(), values.end()));
}

struct InstanceMetrics {
    std::size_t instance_id = 0;
    std::optional<double> fidelity;
    std::optional<double> stability;
    std::optional<double> regularity;
};

/// Per-instance and dataset-averaged metrics for one surrogate family.
struct MetricsReport {
    std::string dataset;
    std::string surrogate;
    std::vector<InstanceMetrics> per_instance;
    std::optional<MetricSummary> fidelity, stability, regularity;
    int n_samples = 0;
    int repeats = 0;
    int k = 0;

    void aggregate() {
        const auto summarize = [&](auto field) -> std::optional<MetricSummary> {
            std::vector<std::optional<double>> v;
            for (const auto& row : per_instance) v.push_back(row.*field);
            if (std::none_of(v.begin(), v.end(), [](const auto& x) { return x.has_value(); })) return std::nullopt;
            return average_metric(v);
        };
        fidelity = summarize(&InstanceMetrics::fidelity);
        stability = summarize(&InstanceMetrics::stability);
        regularity = summarize(&InstanceMetrics::regularity);
    }
};

inline nlohmann::json to_json(const MetricSummary& s) {
    return {{"mean", s.mean}, {"stddev", s.stddev}, {"n_used", s.n_used}};
}

inline nlohmann::json to_json(const MetricsReport& r) {
    const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    const auto summ = [](const std::optional<MetricSummary>& s) { return s ? to_json(*s) : nlohmann::json(nullptr); };
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.per_instance)
        rows.push_back({{"instance", row.instance_id},
                        {"fidelity", opt(row.fidelity)},
                        {"stability", opt(row.stability)},
                        {"regularity", opt(row.regularity)}});
    return {{"dataset", r.dataset},
            {"surrogate", r.surrogate},
            {"per_instance", rows},
            {"aggregate", {{"fidelity", summ(r.fidelity)}, {"stability", summ(r.stability)}, {"regularity", summ(r.regularity)}}},
            {"config", {{"n_samples", r.n_samples}, {"repeats", r.repeats}, {"k", r.k}}}};
}

} // namespace ndtlime
