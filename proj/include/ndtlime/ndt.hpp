#pragma once

#include "ndtlime/core.hpp"
#include "ndtlime/tree.hpp"

#include <json.hpp>

#include <random>
#include <vector>

namespace ndtlime {

enum class NdtMode { hard, soft };

inline std::string_view to_string(NdtMode m) { return m == NdtMode::hard ? "hard" : "soft"; }

/// Three-layer network equivalent to a decision tree with K leaves.
///
///   z = act(gamma1 * (W1 x + b1))      split decisions, K-1 units
///   v = act(gamma2 * (W2^T z + b2))    leaf indicators, K units
///   g = Wout^T v + bout                affine output, C units
///
/// act is the sign threshold tau(u) = 2*[u >= 0] - 1 in hard mode and tanh in soft mode.
struct NdtParams {
    Matrix w1;    // (K-1) x d
    Vector b1;    // K-1
    Matrix w2;    // (K-1) x K
    Vector b2;    // K
    Matrix wout;  // K x C
    Vector bout;  // C
    double gamma1 = 1.0;
    double gamma2 = 1.0;
    NdtMode mode = NdtMode::soft;
    Task task = Task::regression;

    int n_splits() const { return static_cast<int>(w1.rows()); }
    int n_leaves() const { return static_cast<int>(w2.cols()); }
    int input_dim() const { return static_cast<int>(w1.cols()); }
    int output_dim() const { return static_cast<int>(wout.cols()); }

    bool all_finite() const {
        return w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite() && wout.allFinite() &&
               bout.allFinite() && std::isfinite(gamma1) && std::isfinite(gamma2);
    }

    void validate() const {
        detail::require_dims(b1.size() == w1.rows() && w2.rows() == w1.rows() && b2.size() == w2.cols() &&
                                 wout.rows() == w2.cols() && bout.size() == wout.cols(),
                             "NDT parameter shapes are inconsistent");
        if (!all_finite()) throw NumericalError("NDT has a non-finite parameter");
    }
};

/// Gradient of a scalar loss with respect to every NdtParams array.
struct NdtGradient {
    Matrix w1, w2, wout;
    Vector b1, b2, bout;
};

/// How the second-layer bias is initialised. `corrected` (b2 = 1/2 - l) keeps exactly one leaf
/// indicator positive for every input; `original` (b2 = -(l-1)/2) is kept for comparison and
/// fires several leaves once paths have length >= 3.
enum class LeafBias { corrected, original };

struct ConvertOptions {
    double gamma1 = 1.0;
    double gamma2 = 1.0;
    NdtMode mode = NdtMode::soft;
    LeafBias leaf_bias = LeafBias::corrected;
};

namespace detail {

// Plain left-to-right column sums; the output offset relies on reproducing this order exactly.
inline Vector sequential_colsum(const Matrix& m) {
    Vector s = Vector::Zero(m.cols());
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        double acc = 0.0;
        for (Eigen::Index r = 0; r < m.rows(); ++r) acc += m(r, c);
        s[c] = acc;
    }
    return s;
}

inline double tau(double u) { return u >= 0.0 ? 1.0 : -1.0; }

struct NdtActivations {
    Matrix z;  // N x (K-1)
    Matrix v;  // N x K
    Matrix out;
};

inline NdtActivations ndt_forward_all(const NdtParams& p, const Matrix& x) {
    NdtActivations a;
    Matrix pre1 = x * p.w1.transpose();
    pre1.rowwise() += p.b1.transpose();
    if (p.mode == NdtMode::hard)
        a.z = pre1.unaryExpr(&tau);
    else
        a.z = (p.gamma1 * pre1.array()).tanh().matrix();

    Matrix pre2 = a.z * p.w2;
    pre2.rowwise() += p.b2.transpose();
    if (p.mode == NdtMode::hard)
        a.v = pre2.unaryExpr(&tau);
    else
        a.v = (p.gamma2 * pre2.array()).tanh().matrix();

    // Wout^T v + bout, evaluated as Wout^T (v + 1) + (bout - sum_k Wout_k). With v one-hot in
    // {-1,+1} the first term is exactly 2 * Wout_reached, and a freshly converted network has
    // bout equal to the same sequential sum, so hard mode reproduces the leaf value bit for bit.
    const Vector offset = p.bout - sequential_colsum(p.wout);
    a.out = (a.v.array() + 1.0).matrix() * p.wout;
    a.out.rowwise() += offset.transpose();
    return a;
}

} // namespace detail

/// Builds the network from a tree with K >= 2 leaves: W1 selects each split's feature,
/// b1 = -threshold, W2 holds +1/-1 for right/left turns on each leaf's path,
/// Wout = leaf value / 2 and bout = sum of Wout.
inline NdtParams convert_dt_to_ndt(const DecisionTree& tree, const ConvertOptions& opt = {}) {
    if (tree.n_leaves < 2)
        throw InputError("convert_dt_to_ndt: tree has " + std::to_string(tree.n_leaves) + " leaf; need K >= 2");
    if (!(opt.gamma2 > 0.0 && opt.gamma1 >= opt.gamma2))
        throw InputError("convert_dt_to_ndt: need gamma1 >= gamma2 > 0");

    const int k = tree.n_leaves;
    const int c = tree.output_dim();
    NdtParams p;
    p.gamma1 = opt.gamma1;
    p.gamma2 = opt.gamma2;
    p.mode = opt.mode;
    p.task = tree.task;
    p.w1 = Matrix::Zero(k - 1, tree.n_features);
    p.b1 = Vector::Zero(k - 1);
    p.w2 = Matrix::Zero(k - 1, k);
    p.b2 = Vector::Zero(k);
    p.wout = Matrix::Zero(k, c);

    for (const TreeNode& node : tree.nodes) {
        if (node.is_leaf()) continue;
        p.w1(node.split_index, node.feature) = 1.0;
        p.b1[node.split_index] = -node.threshold;
    }

    // Depth-first walk carrying the path (split index, +1 right / -1 left).
    struct Frame {
        int id;
        std::vector<std::pair<int, double>> path;
    };
    std::vector<Frame> stack{{0, {}}};
    while (!stack.empty()) {
        Frame f = std::move(stack.back());
        stack.pop_back();
        const TreeNode& node = tree.nodes[f.id];
        if (node.is_leaf()) {
            const int leaf = node.leaf_index;
            for (auto [split, sign] : f.path) p.w2(split, leaf) = sign;
            const auto len = static_cast<double>(f.path.size());
            p.b2[leaf] = opt.leaf_bias == LeafBias::corrected ? 0.5 - len : -0.5 * (len - 1.0);
            for (int j = 0; j < c; ++j) p.wout(leaf, j) = 0.5 * node.value[j];
            continue;
        }
        Frame right{node.right, f.path};
        right.path.emplace_back(node.split_index, 1.0);
        f.path.emplace_back(node.split_index, -1.0);
        stack.push_back(std::move(right));
        stack.push_back(Frame{node.left, std::move(f.path)});
    }
    p.bout = detail::sequential_colsum(p.wout);
    return p;
}

inline NdtParams with_mode(NdtParams p, NdtMode mode) {
    p.mode = mode;
    return p;
}

/// Network outputs, N x C.
inline Matrix ndt_forward(const NdtParams& p, const Matrix& points) {
    p.validate();
    detail::require_dims(points.cols() == p.input_dim() || points.rows() == 0,
                         "ndt_forward: expected " + std::to_string(p.input_dim()) + " features");
    return detail::ndt_forward_all(p, points).out;
}

/// Second hidden layer outputs (leaf indicators), N x K.
inline Matrix ndt_leaf_activations(const NdtParams& p, const Matrix& points) {
    p.validate();
    detail::require_dims(points.cols() == p.input_dim(), "ndt_leaf_activations: dimension mismatch");
    return detail::ndt_forward_all(p, points).v;
}

/// Analytic d g_c / d x at one point (soft mode only). This is the NDT explanation vector.
inline Vector ndt_input_gradient(const NdtParams& p, const Vector& x, int class_index = 0) {
    if (p.mode != NdtMode::soft) throw InputError("ndt_input_gradient: hard-mode network is not differentiable");
    p.validate();
    detail::require_dims(x.size() == p.input_dim(), "ndt_input_gradient: dimension mismatch");
    detail::require(class_index >= 0 && class_index < p.output_dim(), "class_index out of range");

    const Vector a1 = p.w1 * x + p.b1;
    const Vector z = (p.gamma1 * a1.array()).tanh().matrix();
    const Vector a2 = p.w2.transpose() * z + p.b2;
    const Vector v = (p.gamma2 * a2.array()).tanh().matrix();

    const Vector g_a2 = p.wout.col(class_index).cwiseProduct((p.gamma2 * (1.0 - v.array().square())).matrix());
    const Vector g_a1 = (p.w2 * g_a2).cwiseProduct((p.gamma1 * (1.0 - z.array().square())).matrix());
    return p.w1.transpose() * g_a1;
}

/// Weighted fidelity loss  sum_i w_i * ||y_i - g(x_i)||^2  and, optionally, its gradient
/// with respect to all parameters (soft mode).
inline double ndt_loss(const NdtParams& p, const Matrix& x, const Matrix& y, const Vector& w,
                       NdtGradient* grad = nullptr) {
    detail::require_dims(x.rows() == y.rows() && x.rows() == w.size(), "ndt_loss: row counts differ");
    detail::require_dims(y.cols() == p.output_dim(), "ndt_loss: target width differs from network output");
    const auto a = detail::ndt_forward_all(p, x);
    const Matrix resid = a.out - y;
    const double loss = (resid.array().square().rowwise().sum() * w.array()).sum();
    if (!grad) return loss;
    if (p.mode != NdtMode::soft) throw InputError("ndt_loss: gradients need soft mode");

    const Matrix g_out = 2.0 * (resid.array().colwise() * w.array()).matrix();  // N x C
    grad->wout = a.v.transpose() * g_out;
    grad->bout = g_out.colwise().sum().transpose();
    const Matrix g_a2 = ((g_out * p.wout.transpose()).array() * (p.gamma2 * (1.0 - a.v.array().square()))).matrix();
    grad->w2 = a.z.transpose() * g_a2;
    grad->b2 = g_a2.colwise().sum().transpose();
    const Matrix g_a1 = ((g_a2 * p.w2.transpose()).array() * (p.gamma1 * (1.0 - a.z.array().square()))).matrix();
    grad->w1 = g_a1.transpose() * x;
    grad->b1 = g_a1.colwise().sum().transpose();
    return loss;
}

enum class NdtOptimizer { gradient_descent, adam };

struct FinetuneConfig {
    NdtOptimizer optimizer = NdtOptimizer::adam;
    double learning_rate = 0.01;
    int epochs = 200;
    std::uint64_t seed = 0;  // full-batch descent is deterministic; kept for the pipeline's seed plumbing
};

struct FinetuneResult {
    NdtParams params;
    std::vector<double> loss_trace;  // loss before the first step, then after every step
    bool diverged = false;
};

/// Full-batch descent (Adam by default, or fixed-step GD) on the weighted fidelity loss over all
/// parameters.
/// On divergence the last finite parameters are returned with `diverged` set.
inline FinetuneResult ndt_finetune(const NdtParams& init, const Matrix& x, const Matrix& y, const Vector& w,
                                   const FinetuneConfig& cfg) {
    if (init.mode != NdtMode::soft) throw InputError("ndt_finetune: network must be in soft mode");
    init.validate();
    detail::require((w.array() >= 0.0).all() && w.sum() > 0.0, "ndt_finetune: weights must be >= 0 and not all zero");
    detail::require(cfg.epochs >= 0, "ndt_finetune: epochs must be >= 0");

    // The step follows the weight-normalised loss (same minimiser); the trace reports the raw sum.
    const double weight_sum = w.sum();
    FinetuneResult res{init, {}, false};
    NdtGradient g;
    double loss = ndt_loss(res.params, x, y, w, &g);
    if (!std::isfinite(loss)) throw NumericalError("ndt_finetune: initial loss is not finite");
    res.loss_trace.push_back(loss);
    NdtGradient m1, m2;  // Adam moments
    const auto zero_like = [](const NdtGradient& t) {
        return NdtGradient{Matrix::Zero(t.w1.rows(), t.w1.cols()), Matrix::Zero(t.w2.rows(), t.w2.cols()),
                           Matrix::Zero(t.wout.rows(), t.wout.cols()), Vector::Zero(t.b1.size()),
                           Vector::Zero(t.b2.size()), Vector::Zero(t.bout.size())};
    };
    if (cfg.optimizer == NdtOptimizer::adam) m1 = m2 = zero_like(g);
    for (int e = 0; e < cfg.epochs; ++e) {
        NdtParams next = res.params;
        if (cfg.optimizer == NdtOptimizer::gradient_descent) {
            const double lr = cfg.learning_rate / weight_sum;
            next.w1 -= lr * g.w1;
            next.b1 -= lr * g.b1;
            next.w2 -= lr * g.w2;
            next.b2 -= lr * g.b2;
            next.wout -= lr * g.wout;
            next.bout -= lr * g.bout;
        } else {
            const double b1c = 1.0 - std::pow(0.9, e + 1), b2c = 1.0 - std::pow(0.999, e + 1);
            const auto step = [&](auto& param, auto& grad, auto& m, auto& v) {
                m = 0.9 * m + 0.1 * grad;
                v = (0.999 * v.array() + 0.001 * grad.array().square()).matrix();
                param.array() -= cfg.learning_rate * (m.array() / b1c) / ((v.array() / b2c).sqrt() + 1e-8);
            };
            step(next.w1, g.w1, m1.w1, m2.w1);
            step(next.b1, g.b1, m1.b1, m2.b1);
            step(next.w2, g.w2, m1.w2, m2.w2);
            step(next.b2, g.b2, m1.b2, m2.b2);
            step(next.wout, g.wout, m1.wout, m2.wout);
            step(next.bout, g.bout, m1.bout, m2.bout);
        }
        NdtGradient g_next;
        const double next_loss = next.all_finite() ? ndt_loss(next, x, y, w, &g_next) : NAN;
        if (!std::isfinite(next_loss)) {
            res.diverged = true;
            break;
        }
        res.params = std::move(next);
        g = std::move(g_next);
        loss = next_loss;
        res.loss_trace.push_back(loss);
    }
    return res;
}

/// Hessian of g_c at x by central differences of the analytic gradient, symmetrised.
inline Matrix ndt_hessian_fd(const NdtParams& p, const Vector& x, int class_index = 0, double step = 1e-4) {
    const auto d = x.size();
    Matrix h(d, d);
    for (Eigen::Index j = 0; j < d; ++j) {
        Vector xp = x, xm = x;
        xp[j] += step;
        xm[j] -= step;
        h.col(j) = (ndt_input_gradient(p, xp, class_index) - ndt_input_gradient(p, xm, class_index)) / (2.0 * step);
    }
    return 0.5 * (h + h.transpose());
}

inline double ndt_value(const NdtParams& p, const Vector& x, int class_index = 0) {
    return ndt_forward(p, x.transpose())(0, class_index);
}

/// For each scale s, |g(x0 + s u) - (g(x0) + s grad.u + s^2/2 u^T H u)| along a seeded random
/// unit direction u. Cubic decay of the residual confirms the second-order expansion.
inline std::vector<double> taylor_residual_check(const NdtParams& p, const Vector& x0, const std::vector<double>& h_scales,
                                                 int class_index = 0, std::uint64_t seed = 0) {
    if (p.mode != NdtMode::soft) throw InputError("taylor_residual_check: network must be in soft mode");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector u(x0.size());
    for (auto& v : u) v = normal(rng);
    u.normalize();

    const double g0 = ndt_value(p, x0, class_index);
    const double slope = ndt_input_gradient(p, x0, class_index).dot(u);
    const double curv = u.dot(ndt_hessian_fd(p, x0, class_index) * u);
    std::vector<double> out;
    out.reserve(h_scales.size());
    for (double s : h_scales) {
        if (s == 0.0) {
            out.push_back(0.0);
            continue;
        }
        const double quad = g0 + s * slope + 0.5 * s * s * curv;
        out.push_back(std::abs(ndt_value(p, x0 + s * u, class_index) - quad));
    }
    return out;
}

inline nlohmann::json ndt_to_json(const NdtParams& p) {
    const auto flat = [](const Matrix& m) { return std::vector<double>(m.data(), m.data() + m.size()); };
    const auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    nlohmann::json j;
    j["layer_sizes"] = {p.input_dim(), p.n_splits(), p.n_leaves(), p.output_dim()};
    j["activation"] = p.mode == NdtMode::soft ? "tanh" : "threshold";
    j["task"] = std::string(to_string(p.task));
    // weights[0] is (K-1) x d, weights[1] is (K-1) x K, weights[2] is K x C; all row-major.
    j["weights"] = {flat(p.w1), flat(p.w2), flat(p.wout)};
    j["biases"] = {vec(p.b1), vec(p.b2), vec(p.bout)};
    j["gamma1"] = p.gamma1;
    j["gamma2"] = p.gamma2;
    j["mode"] = std::string(to_string(p.mode));
    return j;
}

inline NdtParams ndt_from_json(const nlohmann::json& j) {
    const auto sizes = j.at("layer_sizes").get<std::vector<int>>();
    detail::require(sizes.size() == 4, "NDT JSON must have 4 layer sizes");
    const auto mat = [&](int idx, int rows, int cols) {
        const auto v = j.at("weights").at(idx).get<std::vector<double>>();
        detail::require(v.size() == static_cast<std::size_t>(rows) * cols, "NDT JSON weight array has wrong length");
        return Matrix(Eigen::Map<const Matrix>(v.data(), rows, cols));
    };
    const auto vec = [&](int idx, int len) {
        const auto v = j.at("biases").at(idx).get<std::vector<double>>();
        detail::require(v.size() == static_cast<std::size_t>(len), "NDT JSON bias array has wrong length");
        return Vector(Eigen::Map<const Vector>(v.data(), len));
    };
    NdtParams p;
    p.w1 = mat(0, sizes[1], sizes[0]);
    p.w2 = mat(1, sizes[1], sizes[2]);
    p.wout = mat(2, sizes[2], sizes[3]);
    p.b1 = vec(0, sizes[1]);
    p.b2 = vec(1, sizes[2]);
    p.bout = vec(2, sizes[3]);
    p.gamma1 = j.at("gamma1").get<double>();
    p.gamma2 = j.at("gamma2").get<double>();
    p.mode = j.at("mode").get<std::string>() == "hard" ? NdtMode::hard : NdtMode::soft;
    p.task = parse_task(j.value("task", "regression"));
    p.validate();
    return p;
}

} // namespace ndtlime
