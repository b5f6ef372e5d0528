#pragma once

#include "ndtlime/blackbox.hpp"
#include "ndtlime/core.hpp"
#include "ndtlime/metrics.hpp"
#include "ndtlime/ndt.hpp"
#include "ndtlime/tree.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

namespace ndtlime {

enum class Surrogate { LR, DT, NDT };

inline std::string_view to_string(Surrogate s) {
    switch (s) {
    case Surrogate::LR: return "LR";
    case Surrogate::DT: return "DT";
    case Surrogate::NDT: return "NDT";
    }
    return "?";
}

inline Surrogate parse_surrogate(std::string_view s) {
    if (s == "LR" || s == "lr") return Surrogate::LR;
    if (s == "DT" || s == "dt") return Surrogate::DT;
    if (s == "NDT" || s == "ndt") return Surrogate::NDT;
    throw InputError("unknown surrogate: " + std::string(s));
}

/// Model being explained: maps an m x d batch to m x C scores (C = 1 for regression).
struct BlackBox {
    std::function<Matrix(const Matrix&)> scores;
    Task task = Task::regression;
};

inline BlackBox make_blackbox(const MlpModel& model) {
    return {[&model](const Matrix& x) { return mlp_predict(model, x); }, model.task};
}

struct NeighborhoodConfig {
    int n_samples = 800;
    double kernel_width = 0.0;          // <= 0 selects 0.75 * sqrt(d)
    double perturb_scale = 1.0;
    std::vector<double> feature_std;    // empty: unit spread (standardized features)
    std::uint64_t seed = 0;

    double resolved_kernel_width(std::size_t d) const {
        return kernel_width > 0.0 ? kernel_width : 0.75 * std::sqrt(static_cast<double>(d));
    }
    void validate() const {
        detail::require(n_samples >= 10, "n_samples must be >= 10");
        detail::require(perturb_scale >= 0.0, "perturb_scale must be >= 0");
    }
};

struct SurrogateConfig {
    int max_depth = 4;
    double min_leaf_weight = 0.0;
    double gamma1 = 1.0;
    double gamma2 = 1.0;
    FinetuneConfig finetune;
};

/// x + eps_i with eps_i ~ N(0, diag((perturb_scale * feature_std)^2)).
inline Matrix perturb(const Vector& x, const NeighborhoodConfig& cfg) {
    cfg.validate();
    const auto d = x.size();
    detail::require_dims(cfg.feature_std.empty() || cfg.feature_std.size() == static_cast<std::size_t>(d),
                         "perturb: feature_std length must equal d");
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix out(cfg.n_samples, d);
    for (Eigen::Index i = 0; i < out.rows(); ++i)
        for (Eigen::Index j = 0; j < d; ++j) {
            const double sd = cfg.feature_std.empty() ? 1.0 : cfg.feature_std[j];
            out(i, j) = x[j] + cfg.perturb_scale * sd * normal(rng);
        }
    return out;
}

/// Gaussian proximity kernel exp(-||x - x_i||^2 / sigma^2).
inline Vector proximity_weights(const Matrix& points, const Vector& x, double sigma) {
    detail::require(sigma > 0.0, "kernel width must be positive");
    detail::require_dims(points.cols() == x.size(), "proximity_weights: dimension mismatch");
    Vector w(points.rows());
    for (Eigen::Index i = 0; i < points.rows(); ++i)
        w[i] = std::exp(-(points.row(i).transpose() - x).squaredNorm() / (sigma * sigma));
    return w;
}

struct WlsResult {
    Vector coefficients;
    double intercept = 0.0;
    bool rank_deficient = false;
};

/// Minimises sum_i w_i (y_i - b.x_i - b0)^2 through the weighted-centred normal equations with a
/// 1e-8 ridge on the diagonal.
inline WlsResult weighted_least_squares(const Matrix& x, const Vector& y, const Vector& w) {
    detail::require_dims(x.rows() == y.size() && y.size() == w.size(), "weighted_least_squares: length mismatch");
    detail::require((w.array() >= 0.0).all(), "weighted_least_squares: weights must be >= 0");
    const auto positive = (w.array() > 0.0).count();
    detail::require(positive >= x.cols() + 1, "weighted_least_squares: need at least d+1 rows with positive weight");

    const double sw = w.sum();
    const Eigen::RowVectorXd x_mean = (w.transpose() * x) / sw;
    const double y_mean = w.dot(y) / sw;
    const Matrix xc = x.rowwise() - x_mean;
    const Vector yc = y.array() - y_mean;

    Eigen::MatrixXd a = xc.transpose() * w.asDiagonal() * xc;
    const Vector b = xc.transpose() * (w.asDiagonal() * yc);
    WlsResult res;
    if (a.rows() > 0) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a, Eigen::EigenvaluesOnly);
        const double max_ev = eig.eigenvalues().maxCoeff();
        res.rank_deficient = !(eig.eigenvalues().minCoeff() > 1e-12 * std::max(max_ev, 1e-300));
    }
    a.diagonal().array() += 1e-8;
    res.coefficients = a.ldlt().solve(b);
    res.intercept = y_mean - x_mean.dot(res.coefficients);
    return res;
}

/// Steps 1-3 of the pipeline: perturbation, black-box evaluation, proximity weights.
struct Neighborhood {
    Matrix points;   // N x d
    Vector targets;  // scalar black-box value per row
    Vector weights;
    int class_index = 0;  // explained class for classification black boxes
};

inline Neighborhood build_neighborhood(const BlackBox& f, const Vector& x, const NeighborhoodConfig& cfg) {
    Neighborhood nb;
    nb.points = perturb(x, cfg);
    if (f.task == Task::classification) {
        const Matrix sx = f.scores(x.transpose());
        Eigen::Index c = 0;
        sx.row(0).maxCoeff(&c);
        nb.class_index = static_cast<int>(c);
    }
    const Matrix scores = f.scores(nb.points);
    detail::require_dims(scores.rows() == nb.points.rows() && scores.cols() > nb.class_index,
                         "black box returned a score matrix of the wrong shape");
    nb.targets = scores.col(nb.class_index);
    nb.weights = proximity_weights(nb.points, x, cfg.resolved_kernel_width(static_cast<std::size_t>(x.size())));
    return nb;
}

/// A fitted local surrogate g.
struct FittedSurrogate {
    Surrogate kind = Surrogate::LR;
    WlsResult linear;
    std::optional<DecisionTree> tree;
    std::optional<NdtParams> ndt_init;
    std::optional<NdtParams> ndt;
    std::vector<double> loss_trace;
    bool diverged = false;

    Vector predict(const Matrix& points) const {
        switch (kind) {
        case Surrogate::LR: return (points * linear.coefficients).array() + linear.intercept;
        case Surrogate::DT: return tree_predict(*tree, points).col(0);
        case Surrogate::NDT: return ndt_forward(*ndt, points).col(0);
        }
        return {};
    }
};

/// Step 4. For NDT this is CART -> conversion -> fine-tuning; a single-leaf tree leaves `ndt` unset.
inline FittedSurrogate fit_surrogate(const Neighborhood& nb, Surrogate kind, const SurrogateConfig& scfg) {
    FittedSurrogate s;
    s.kind = kind;
    if (kind == Surrogate::LR) {
        s.linear = weighted_least_squares(nb.points, nb.targets, nb.weights);
        return s;
    }
    CartConfig cart;
    cart.task = Task::regression;
    cart.max_depth = scfg.max_depth;
    cart.min_leaf_weight = scfg.min_leaf_weight;
    s.tree = fit_weighted_cart(nb.points, std::span<const double>(nb.targets.data(), nb.targets.size()),
                               std::span<const double>(nb.weights.data(), nb.weights.size()), cart);
    if (kind == Surrogate::DT || s.tree->n_leaves < 2) return s;

    s.ndt_init = convert_dt_to_ndt(*s.tree, {scfg.gamma1, scfg.gamma2, NdtMode::soft, LeafBias::corrected});
    auto tuned = ndt_finetune(*s.ndt_init, nb.points, nb.targets, nb.weights, scfg.finetune);
    s.ndt = std::move(tuned.params);
    s.loss_trace = std::move(tuned.loss_trace);
    s.diverged = tuned.diverged;
    return s;
}

struct Explanation {
    std::vector<double> vector;
    Surrogate surrogate = Surrogate::LR;
    std::optional<double> local_fidelity;
    std::vector<double> instance;
    std::uint64_t seed = 0;
    std::vector<std::string> flags;
    std::map<std::string, double> diagnostics;

    bool has_flag(std::string_view f) const { return std::find(flags.begin(), flags.end(), f) != flags.end(); }
};

/// Full pipeline for one instance.
inline Explanation explain_instance(const BlackBox& f, const Vector& x, Surrogate kind, const NeighborhoodConfig& cfg,
                                    const SurrogateConfig& scfg = {}) {
    Explanation e;
    e.surrogate = kind;
    e.instance.assign(x.data(), x.data() + x.size());
    e.seed = cfg.seed;
    const auto d = static_cast<std::size_t>(x.size());

    const Neighborhood nb = build_neighborhood(f, x, cfg);
    if (f.task == Task::classification) e.diagnostics["class_index"] = nb.class_index;

    const double mean = nb.targets.mean();
    const bool degenerate = (nb.targets.array() - mean).square().sum() < 1e-12;
    if (degenerate) {
        e.flags.emplace_back("degenerate_neighborhood");
        if (kind != Surrogate::DT) {
            e.vector.assign(d, 0.0);
            return e;
        }
    }

    FittedSurrogate s = fit_surrogate(nb, kind, scfg);
    switch (kind) {
    case Surrogate::LR:
        e.vector.assign(s.linear.coefficients.data(), s.linear.coefficients.data() + d);
        if (s.linear.rank_deficient) e.flags.emplace_back("rank_deficient");
        break;
    case Surrogate::DT: {
        const auto fi = tree_feature_importance(*s.tree);
        e.vector = fi.values;
        if (fi.degenerate) e.flags.emplace_back("single_leaf_tree");
        break;
    }
    case Surrogate::NDT:
        if (!s.ndt) {
            const auto fi = tree_feature_importance(*s.tree);
            e.vector = fi.values;
            e.flags.emplace_back("single_leaf_tree");
            e.flags.emplace_back("fallback_dt");
            s.kind = Surrogate::DT;
            break;
        }
        {
            const Vector g = ndt_input_gradient(*s.ndt, x, 0);
            e.vector.assign(g.data(), g.data() + d);
        }
        e.diagnostics["loss_initial"] = s.loss_trace.front();
        e.diagnostics["loss_final"] = s.loss_trace.back();
        e.diagnostics["leaves"] = s.ndt->n_leaves();
        if (s.diverged) e.flags.emplace_back("finetune_diverged");
        break;
    }
    if (!degenerate) e.local_fidelity = fidelity_r2(nb.targets, s.predict(nb.points));
    return e;
}

inline nlohmann::json to_json(const Explanation& e) {
    return {{"instance", e.instance},
            {"surrogate", std::string(to_string(e.surrogate))},
            {"vector", e.vector},
            {"local_fidelity", e.local_fidelity ? nlohmann::json(*e.local_fidelity) : nlohmann::json(nullptr)},
            {"seed", e.seed},
            {"flags", e.flags}};
}

} // namespace ndtlime
