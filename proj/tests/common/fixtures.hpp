#pragma once

#include "ndtlime/ndt.hpp"
#include "ndtlime/tree.hpp"

#include <random>

namespace ndtlime::testing {

/// Weighted CART fitted to random data with a random response; depth and d drawn per call.
inline DecisionTree random_tree(std::mt19937_64& rng, int max_depth, int max_d, Task task = Task::regression,
                                int n = 120) {
    std::uniform_int_distribution<int> depth_dist(1, max_depth), d_dist(1, max_d);
    std::normal_distribution<double> normal;
    std::exponential_distribution<double> expo(1.0);
    const int d = d_dist(rng);
    Matrix x(n, d);
    std::vector<double> y(n), w(n);
    Vector coef(d);
    for (auto& c : coef) c = normal(rng);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) x(i, j) = normal(rng);
        const double s = std::sin(x.row(i).dot(coef)) + 0.3 * normal(rng);
        y[i] = task == Task::regression ? 3.0 * s : static_cast<double>(s > 0.4 ? 2 : s > -0.4 ? 1 : 0);
        w[i] = expo(rng);
    }
    CartConfig cfg;
    cfg.task = task;
    cfg.max_depth = depth_dist(rng);
    return fit_weighted_cart(x, y, w, cfg);
}

/// Smallest |x[feature] - threshold| over the tree's splits.
inline double split_margin(const DecisionTree& t, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
    double m = INFINITY;
    for (const TreeNode& n : t.nodes)
        if (!n.is_leaf()) m = std::min(m, std::abs(x[n.feature] - n.threshold));
    return m;
}

/// The eleven-node tree of the conversion figure, stored in preorder: splits at nodes 0, 1, 3, 6, 8,
/// leaves at 2, 4, 5, 7, 9, 10. Leaf values equal the node id.
inline DecisionTree figure_tree() {
    DecisionTree t;
    t.task = Task::regression;
    t.n_features = 2;
    t.nodes.resize(11);
    const auto split = [&](int id, int feature, double thr, int l, int r) {
        t.nodes[id].feature = feature;
        t.nodes[id].threshold = thr;
        t.nodes[id].left = l;
        t.nodes[id].right = r;
    };
    split(0, 0, 0.0, 1, 6);
    split(1, 1, 0.0, 2, 3);
    split(3, 0, -1.0, 4, 5);
    split(6, 1, 0.0, 7, 8);
    split(8, 0, 1.0, 9, 10);
    for (int leaf : {2, 4, 5, 7, 9, 10}) t.nodes[leaf].value = {static_cast<double>(leaf)};
    finalize_tree(t);
    return t;
}

} // namespace ndtlime::testing
