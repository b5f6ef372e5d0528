#pragma once

#include "ndtlime/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace ndtlime {

struct TreeNode {
    int feature = -1;       // internal nodes only
    double threshold = 0.0; // x[feature] >= threshold goes right
    int left = -1;
    int right = -1;
    std::vector<double> value;  // leaves: {mean} for regression, class probabilities otherwise
    double weight_mass = 0.0;
    double impurity = 0.0;      // weighted SSE or weight * Gini of the samples reaching the node
    int split_index = -1;       // preorder rank among internal nodes
    int leaf_index = -1;        // preorder rank among leaves

    bool is_leaf() const { return left < 0; }
};

/// Binary axis-aligned tree stored in preorder (node 0 is the root).
struct DecisionTree {
    std::vector<TreeNode> nodes;
    Task task = Task::regression;
    int n_features = 0;
    int n_classes = 0;  // classification only
    int n_leaves = 0;
    int n_splits = 0;

    int output_dim() const { return task == Task::regression ? 1 : n_classes; }

    // Ids of the internal nodes / leaves indexed by split_index / leaf_index.
    std::vector<int> split_ids() const {
        std::vector<int> ids(n_splits);
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (!nodes[i].is_leaf()) ids[nodes[i].split_index] = static_cast<int>(i);
        return ids;
    }
    std::vector<int> leaf_ids() const {
        std::vector<int> ids(n_leaves);
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i].is_leaf()) ids[nodes[i].leaf_index] = static_cast<int>(i);
        return ids;
    }
};

/// Numbers splits and leaves in preorder and checks the full-binary shape. Call after building
/// a tree by hand.
inline void finalize_tree(DecisionTree& tree) {
    detail::require(!tree.nodes.empty(), "tree has no nodes");
    tree.n_leaves = 0;
    tree.n_splits = 0;
    std::vector<int> stack{0};
    std::vector<bool> seen(tree.nodes.size(), false);
    while (!stack.empty()) {
        const int id = stack.back();
        stack.pop_back();
        detail::require(id >= 0 && static_cast<std::size_t>(id) < tree.nodes.size() && !seen[id],
                        "tree node ids do not form a tree");
        seen[id] = true;
        TreeNode& node = tree.nodes[id];
        if (node.is_leaf()) {
            detail::require(node.right < 0, "leaf has a right child");
            detail::require(static_cast<int>(node.value.size()) == tree.output_dim(), "leaf value has wrong width");
            node.leaf_index = tree.n_leaves++;
        } else {
            detail::require(node.right >= 0, "internal node is missing a child");
            detail::require(node.feature >= 0 && node.feature < tree.n_features, "split feature out of range");
            node.split_index = tree.n_splits++;
            stack.push_back(node.right);
            stack.push_back(node.left);
        }
    }
    detail::require(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }),
                    "tree has unreachable nodes");
}

struct CartConfig {
    Task task = Task::regression;
    int max_depth = 4;
    double min_leaf_weight = 0.0;
    int n_classes = 0;  // 0: infer from the labels
};

namespace detail {

class CartBuilder {
public:
    CartBuilder(const Matrix& x, std::span<const double> y, std::span<const double> w, const CartConfig& cfg,
                DecisionTree& tree)
        : x_(x), y_(y), w_(w), cfg_(cfg), tree_(tree) {}

    int build(std::vector<std::size_t> rows, int depth) {
        const int id = static_cast<int>(tree_.nodes.size());
        tree_.nodes.emplace_back();
        const Stats s = stats(rows);
        tree_.nodes[id].weight_mass = s.weight;
        tree_.nodes[id].impurity = s.impurity;

        std::optional<Split> split;
        if (depth < cfg_.max_depth && !is_pure(rows)) split = best_split(rows, s.impurity);
        if (!split) {
            tree_.nodes[id].value = s.value;
            return id;
        }
        std::vector<std::size_t> left, right;
        for (std::size_t r : rows) (x_(r, split->feature) >= split->threshold ? right : left).push_back(r);
        rows.clear();
        rows.shrink_to_fit();
        tree_.nodes[id].feature = split->feature;
        tree_.nodes[id].threshold = split->threshold;
        const int l = build(std::move(left), depth + 1);
        const int r = build(std::move(right), depth + 1);
        tree_.nodes[id].left = l;
        tree_.nodes[id].right = r;
        return id;
    }

private:
    struct Stats {
        double weight = 0.0;
        double impurity = 0.0;
        std::vector<double> value;
    };
    struct Split {
        int feature;
        double threshold;
    };

    bool regression() const { return cfg_.task == Task::regression; }

    bool is_pure(const std::vector<std::size_t>& rows) const {
        return std::all_of(rows.begin(), rows.end(), [&](std::size_t r) { return y_[r] == y_[rows.front()]; });
    }

    Stats stats(const std::vector<std::size_t>& rows) const {
        Stats s;
        if (regression()) {
            double sum = 0.0;
            for (std::size_t r : rows) {
                s.weight += w_[r];
                sum += w_[r] * y_[r];
            }
            const double mean = sum / s.weight;
            for (std::size_t r : rows) s.impurity += w_[r] * (y_[r] - mean) * (y_[r] - mean);
            s.value = {mean};
        } else {
            s.value.assign(tree_.n_classes, 0.0);
            for (std::size_t r : rows) {
                s.weight += w_[r];
                s.value[static_cast<std::size_t>(y_[r])] += w_[r];
            }
            s.impurity = gini(s.value, s.weight);
            for (double& p : s.value) p /= s.weight;
        }
        return s;
    }

    static double gini(const std::vector<double>& class_weight, double total) {
        double sq = 0.0;
        for (double c : class_weight) sq += c * c;
        return total - sq / total;
    }

    // Greedy search; strict improvement keeps the lowest feature index and then the lowest
    // threshold among equal gains.
    std::optional<Split> best_split(const std::vector<std::size_t>& rows, double parent_impurity) const {
        const std::size_t n = rows.size();
        double mean = 0.0, total_w = 0.0;
        if (regression()) {
            for (std::size_t r : rows) {
                total_w += w_[r];
                mean += w_[r] * y_[r];
            }
            mean /= total_w;
        } else {
            for (std::size_t r : rows) total_w += w_[r];
        }
        std::vector<double> cls_total;
        if (!regression()) {
            cls_total.assign(tree_.n_classes, 0.0);
            for (std::size_t r : rows) cls_total[static_cast<std::size_t>(y_[r])] += w_[r];
        }

        std::optional<Split> best;
        double best_gain = 1e-12 * parent_impurity;
        const double tie = 1e-12 * parent_impurity;  // gains closer than this count as equal
        std::vector<std::size_t> order(rows);
        std::vector<double> cls_left;
        for (int j = 0; j < static_cast<int>(x_.cols()); ++j) {
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return x_(a, j) < x_(b, j) || (x_(a, j) == x_(b, j) && a < b);
            });
            double wl = 0.0, sl = 0.0, ql = 0.0;  // centred weighted sums on the left
            double sr = 0.0, qr = 0.0;
            if (regression()) {
                for (std::size_t r : order) {
                    const double c = y_[r] - mean;
                    sr += w_[r] * c;
                    qr += w_[r] * c * c;
                }
            } else {
                cls_left.assign(tree_.n_classes, 0.0);
            }
            for (std::size_t i = 0; i + 1 < n; ++i) {
                const std::size_t r = order[i];
                wl += w_[r];
                if (regression()) {
                    const double c = y_[r] - mean;
                    sl += w_[r] * c;
                    ql += w_[r] * c * c;
                } else {
                    cls_left[static_cast<std::size_t>(y_[r])] += w_[r];
                }
                const double a = x_(r, j), b = x_(order[i + 1], j);
                if (!(a < b)) continue;
                const double wr = total_w - wl;
                if (wl < cfg_.min_leaf_weight || wr < cfg_.min_leaf_weight || wl <= 0.0 || wr <= 0.0) continue;

                double child = 0.0;
                if (regression()) {
                    const double srr = sr - sl, qrr = qr - ql;
                    child = (ql - sl * sl / wl) + (qrr - srr * srr / wr);
                } else {
                    double sq_l = 0.0, sq_r = 0.0;
                    for (std::size_t c = 0; c < cls_left.size(); ++c) {
                        sq_l += cls_left[c] * cls_left[c];
                        const double rc = cls_total[c] - cls_left[c];
                        sq_r += rc * rc;
                    }
                    child = (wl - sq_l / wl) + (wr - sq_r / wr);
                }
                const double gain = parent_impurity - child;
                if (gain > best_gain + (best ? tie : 0.0)) {
                    best_gain = gain;
                    double t = a + (b - a) / 2.0;
                    if (!(t > a)) t = b;
                    best = Split{j, t};
                }
            }
        }
        return best;
    }

    const Matrix& x_;
    std::span<const double> y_;
    std::span<const double> w_;
    const CartConfig& cfg_;
    DecisionTree& tree_;
};

} // namespace detail

/// Greedy weighted CART: weighted squared error (regression) or weighted Gini (classification),
/// split candidates at midpoints of consecutive distinct values. Rows with zero weight are ignored.
inline DecisionTree fit_weighted_cart(const Matrix& x, std::span<const double> y, std::span<const double> sample_weight,
                                      const CartConfig& cfg) {
    detail::require(x.rows() > 0 && x.cols() > 0, "fit_weighted_cart: empty input");
    detail::require_dims(static_cast<std::size_t>(x.rows()) == y.size() && y.size() == sample_weight.size(),
                         "fit_weighted_cart: X, y and weights must have the same length");
    detail::require(cfg.max_depth >= 1, "max_depth must be >= 1");

    DecisionTree tree;
    tree.task = cfg.task;
    tree.n_features = static_cast<int>(x.cols());
    if (cfg.task == Task::classification) {
        int c = cfg.n_classes;
        for (double v : y) {
            detail::require(v >= 0 && v == std::floor(v), "classification labels must be non-negative integers");
            c = std::max(c, static_cast<int>(v) + 1);
        }
        tree.n_classes = c;
    }

    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < y.size(); ++i) {
        detail::require(sample_weight[i] >= 0.0 && std::isfinite(sample_weight[i]), "sample weights must be finite and >= 0");
        if (sample_weight[i] > 0.0) rows.push_back(i);
    }
    if (rows.empty()) throw InputError("fit_weighted_cart: all sample weights are zero");

    detail::CartBuilder(x, y, sample_weight, cfg, tree).build(std::move(rows), 0);
    finalize_tree(tree);
    return tree;
}

inline int tree_leaf_id(const DecisionTree& tree, const Eigen::Ref<const Eigen::RowVectorXd>& point) {
    int id = 0;
    while (!tree.nodes[id].is_leaf()) {
        const TreeNode& node = tree.nodes[id];
        id = point[node.feature] >= node.threshold ? node.right : node.left;
    }
    return id;
}

/// Leaf values for each row: m x 1 for regression, m x C class probabilities otherwise.
inline Matrix tree_predict(const DecisionTree& tree, const Matrix& points) {
    detail::require_dims(points.cols() == tree.n_features || points.rows() == 0,
                         "tree_predict: expected " + std::to_string(tree.n_features) + " features");
    Matrix out(points.rows(), tree.output_dim());
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        const auto& v = tree.nodes[tree_leaf_id(tree, points.row(i))].value;
        for (std::size_t c = 0; c < v.size(); ++c) out(i, c) = v[c];
    }
    return out;
}

struct FeatureImportance {
    std::vector<double> values;
    bool degenerate = false;  // no usable splits; values are uniform
};

/// Weighted impurity decrease per feature, normalised to sum to 1.
inline FeatureImportance tree_feature_importance(const DecisionTree& tree) {
    const auto d = static_cast<std::size_t>(tree.n_features);
    FeatureImportance fi;
    fi.values.assign(d, 0.0);
    for (const TreeNode& node : tree.nodes) {
        if (node.is_leaf()) continue;
        const double dec = node.impurity - tree.nodes[node.left].impurity - tree.nodes[node.right].impurity;
        fi.values[node.feature] += std::max(dec, 0.0);
    }
    const double total = std::accumulate(fi.values.begin(), fi.values.end(), 0.0);
    if (tree.n_splits == 0 || !(total > 0.0)) {
        fi.values.assign(d, 1.0 / static_cast<double>(d));
        fi.degenerate = true;
        return fi;
    }
    for (double& v : fi.values) v /= total;
    return fi;
}

inline nlohmann::json tree_to_json(const DecisionTree& tree) {
    nlohmann::json j;
    j["task"] = std::string(to_string(tree.task));
    j["n_features"] = tree.n_features;
    j["n_classes"] = tree.n_classes;
    j["root"] = 0;
    j["nodes"] = nlohmann::json::array();
    for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
        const TreeNode& n = tree.nodes[i];
        nlohmann::json jn{{"id", i}, {"weight_mass", n.weight_mass}, {"impurity", n.impurity}};
        if (n.is_leaf()) {
            jn["value"] = n.value;
        } else {
            jn["feature"] = n.feature;
            jn["threshold"] = n.threshold;
            jn["left"] = n.left;
            jn["right"] = n.right;
        }
        j["nodes"].push_back(std::move(jn));
    }
    return j;
}

inline DecisionTree tree_from_json(const nlohmann::json& j) {
    DecisionTree tree;
    tree.task = parse_task(j.at("task").get<std::string>());
    tree.n_features = j.at("n_features").get<int>();
    tree.n_classes = j.value("n_classes", 0);
    for (const auto& jn : j.at("nodes")) {
        TreeNode n;
        n.weight_mass = jn.value("weight_mass", 0.0);
        n.impurity = jn.value("impurity", 0.0);
        if (jn.contains("value")) {
            n.value = jn.at("value").get<std::vector<double>>();
        } else {
            n.feature = jn.at("feature").get<int>();
            n.threshold = jn.at("threshold").get<double>();
            n.left = jn.at("left").get<int>();
            n.right = jn.at("right").get<int>();
        }
        tree.nodes.push_back(std::move(n));
    }
    finalize_tree(tree);
    return tree;
}

} // namespace ndtlime
