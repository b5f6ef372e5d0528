#include "fixtures.hpp"

#include "ndtlime/ndt.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace ndtlime;
using ndtlime::testing::figure_tree;
using ndtlime::testing::random_tree;
using ndtlime::testing::split_margin;

namespace {

std::vector<std::pair<double*, Eigen::Index>> arrays(NdtParams& p) {
    return {{p.w1.data(), p.w1.size()}, {p.b1.data(), p.b1.size()},     {p.w2.data(), p.w2.size()},
            {p.b2.data(), p.b2.size()}, {p.wout.data(), p.wout.size()}, {p.bout.data(), p.bout.size()}};
}

std::vector<std::pair<const double*, Eigen::Index>> arrays(const NdtGradient& g) {
    return {{g.w1.data(), g.w1.size()}, {g.b1.data(), g.b1.size()},     {g.w2.data(), g.w2.size()},
            {g.b2.data(), g.b2.size()}, {g.wout.data(), g.wout.size()}, {g.bout.data(), g.bout.size()}};
}

Matrix random_points(std::mt19937_64& rng, int n, int d, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Matrix x(n, d);
    for (auto& v : x.reshaped()) v = normal(rng);
    return x;
}

// Soft network with non-trivial parameters: converted from a random tree and nudged by a few Adam steps.
NdtParams tuned_network(std::mt19937_64& rng, int n_classes_task = 0) {
    const Task task = n_classes_task ? Task::classification : Task::regression;
    const DecisionTree t = random_tree(rng, 4, 5, task);
    NdtParams p = convert_dt_to_ndt(t, {2.0, 1.0, NdtMode::soft, LeafBias::corrected});
    const Matrix x = random_points(rng, 60, t.n_features);
    Matrix y = tree_predict(t, x);
    std::normal_distribution<double> normal(0.0, 0.3);
    for (auto& v : y.reshaped()) v += normal(rng);
    return ndt_finetune(p, x, y, Vector::Ones(60), {NdtOptimizer::adam, 0.01, 25, 0}).params;
}

} // namespace

TEST(Convert, StumpParameters) {
    DecisionTree t;
    t.n_features = 3;
    t.nodes.resize(3);
    t.nodes[0].feature = 0;
    t.nodes[0].threshold = 0.5;
    t.nodes[0].left = 1;
    t.nodes[0].right = 2;
    t.nodes[1].value = {2.0};
    t.nodes[2].value = {4.0};
    finalize_tree(t);
    const NdtParams p = convert_dt_to_ndt(t);
    EXPECT_EQ(p.w1, (Matrix(1, 3) << 1, 0, 0).finished());
    EXPECT_EQ(p.b1[0], -0.5);
    EXPECT_EQ(p.wout, (Matrix(2, 1) << 1, 2).finished());
    EXPECT_EQ(p.bout[0], 3.0);
}

TEST(Convert, FigureTreeSecondLayer) {
    const NdtParams p = convert_dt_to_ndt(figure_tree());
    ASSERT_EQ(p.n_splits(), 5);
    ASSERT_EQ(p.n_leaves(), 6);
    // columns: leaves at nodes 2, 4, 5, 7, 9, 10; rows: splits at nodes 0, 1, 3, 6, 8
    Matrix expected(5, 6);
    expected << -1, -1, -1, 1, 1, 1,
                -1, 1, 1, 0, 0, 0,
                0, -1, 1, 0, 0, 0,
                0, 0, 0, -1, 1, 1,
                0, 0, 0, 0, -1, 1;
    EXPECT_EQ(p.w2, expected);
    const std::vector<double> path_len{2, 3, 3, 2, 3, 3};
    for (int k = 0; k < 6; ++k) {
        EXPECT_EQ((p.w2.col(k).array() != 0.0).count(), path_len[k]);
        EXPECT_EQ(p.b2[k], 0.5 - path_len[k]);
    }
    for (int k = 0; k < 5; ++k) {
        EXPECT_EQ((p.w1.row(k).array() != 0.0).count(), 1);
        EXPECT_EQ(p.w1.row(k).sum(), 1.0);
    }
}

TEST(Convert, OriginalLeafBiasDoubleFires) {
    const NdtParams p = convert_dt_to_ndt(figure_tree(), {1.0, 1.0, NdtMode::hard, LeafBias::original});
    EXPECT_EQ(p.b2[1], -1.0);  // leaf at node 4, path length 3
    // (-0.5, 0.5) reaches node 5; the depth-3 leaves one wrong turn away (nodes 4 and 9) sit at 0 and fire too.
    const Matrix v = ndt_leaf_activations(p, (Matrix(1, 2) << -0.5, 0.5).finished());
    EXPECT_EQ((v.array() > 0.0).count(), 3);
    EXPECT_EQ(v(0, 1), 1.0);
    EXPECT_EQ(v(0, 2), 1.0);
    EXPECT_EQ(v(0, 4), 1.0);
    const NdtParams fixed = convert_dt_to_ndt(figure_tree(), {1.0, 1.0, NdtMode::hard, LeafBias::corrected});
    const Matrix v2 = ndt_leaf_activations(fixed, (Matrix(1, 2) << -0.5, 0.5).finished());
    EXPECT_EQ((v2.array() > 0.0).count(), 1);
    EXPECT_EQ(v2(0, 2), 1.0);
}

TEST(Convert, RejectsSingleLeafAndBadGammas) {
    DecisionTree t;
    t.n_features = 1;
    t.nodes.resize(1);
    t.nodes[0].value = {1.0};
    finalize_tree(t);
    EXPECT_THROW(convert_dt_to_ndt(t), InputError);
    EXPECT_THROW(convert_dt_to_ndt(figure_tree(), {1.0, 2.0}), InputError);
    EXPECT_THROW(convert_dt_to_ndt(figure_tree(), {1.0, 0.0}), InputError);
}

TEST(HardForward, OneLeafFiresAndMatchesTree) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 30; ++trial) {
        const Task task = trial % 3 == 0 ? Task::classification : Task::regression;
        const DecisionTree t = random_tree(rng, 4, 6, task);
        if (t.n_leaves < 2) continue;
        const NdtParams p = convert_dt_to_ndt(t, {1.0, 1.0, NdtMode::hard});
        const Matrix x = random_points(rng, 200, t.n_features);
        const Matrix v = ndt_leaf_activations(p, x);
        for (Eigen::Index i = 0; i < v.rows(); ++i) {
            EXPECT_EQ((v.row(i).array() == 1.0).count(), 1);
            EXPECT_EQ((v.row(i).array() == -1.0).count(), p.n_leaves() - 1);
        }
        const Matrix g = ndt_forward(p, x), f = tree_predict(t, x);
        if (task == Task::regression) {
            EXPECT_EQ(g, f);
        } else {
            for (Eigen::Index i = 0; i < g.rows(); ++i) {
                Eigen::Index a = 0, b = 0;
                g.row(i).maxCoeff(&a);
                f.row(i).maxCoeff(&b);
                EXPECT_EQ(a, b);
            }
        }
    }
}

TEST(SoftForward, ZeroActivationOnHyperplane) {
    const NdtParams p = convert_dt_to_ndt(figure_tree());
    const auto a = detail::ndt_forward_all(p, (Matrix(1, 2) << 0.0, 0.7).finished());
    EXPECT_EQ(a.z(0, 0), 0.0);
}

TEST(SoftForward, SharpLimitMatchesHard) {
    std::mt19937_64 rng(2);
    int checked = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const DecisionTree t = random_tree(rng, 4, 4);
        if (t.n_leaves < 2) continue;
        const NdtParams soft = convert_dt_to_ndt(t, {1e4, 1e4, NdtMode::soft});
        const NdtParams hard = with_mode(soft, NdtMode::hard);
        const Matrix x = random_points(rng, 300, t.n_features);
        const Matrix gs = ndt_forward(soft, x), gh = ndt_forward(hard, x);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            if (split_margin(t, x.row(i)) < 1e-2) continue;
            EXPECT_LT((gs.row(i) - gh.row(i)).cwiseAbs().maxCoeff(), 1e-3);
            ++checked;
        }
    }
    EXPECT_GT(checked, 1000);
}

TEST(SoftForward, RejectsNonFiniteAndBadShapes) {
    NdtParams p = convert_dt_to_ndt(figure_tree());
    EXPECT_THROW(ndt_forward(p, Matrix::Zero(2, 3)), DimensionError);
    p.b2[0] = NAN;
    EXPECT_THROW(ndt_forward(p, Matrix::Zero(2, 2)), NumericalError);
}

TEST(InputGradient, LinearInLeafValues) {
    DecisionTree t = figure_tree();
    const Vector x = Vector::Constant(2, 0.1);
    const Vector g = ndt_input_gradient(convert_dt_to_ndt(t), x);
    for (auto& n : t.nodes)
        if (n.is_leaf()) n.value[0] = 2.0 * n.value[0];
    const Vector g2 = ndt_input_gradient(convert_dt_to_ndt(t), x);
    EXPECT_GT(g.norm(), 0.0);
    EXPECT_NEAR((g2 - 2.0 * g).norm(), 0.0, 1e-9 * g.norm());
}

TEST(InputGradient, StumpDependsOnOneCoordinate) {
    DecisionTree t;
    t.n_features = 3;
    t.nodes.resize(3);
    t.nodes[0].feature = 0;
    t.nodes[0].threshold = 0.2;
    t.nodes[0].left = 1;
    t.nodes[0].right = 2;
    t.nodes[1].value = {-1.0};
    t.nodes[2].value = {2.0};
    finalize_tree(t);
    const Vector g = ndt_input_gradient(convert_dt_to_ndt(t), Vector::Constant(3, 0.3));
    EXPECT_NE(g[0], 0.0);
    EXPECT_EQ(g[1], 0.0);
    EXPECT_EQ(g[2], 0.0);
}

TEST(InputGradient, MatchesFiniteDifferences) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const NdtParams p = tuned_network(rng, trial % 4 == 0);
        const Vector x = random_points(rng, 1, p.input_dim()).row(0).transpose();
        for (int c = 0; c < p.output_dim(); ++c) {
            const Vector g = ndt_input_gradient(p, x, c);
            Vector fd(x.size());
            for (Eigen::Index j = 0; j < x.size(); ++j) {
                Vector xp = x, xm = x;
                xp[j] += 1e-5;
                xm[j] -= 1e-5;
                fd[j] = (ndt_value(p, xp, c) - ndt_value(p, xm, c)) / 2e-5;
            }
            EXPECT_LT((g - fd).norm() / std::max({g.norm(), fd.norm(), 1e-8}), 1e-4);
        }
    }
    EXPECT_THROW(ndt_input_gradient(with_mode(convert_dt_to_ndt(figure_tree()), NdtMode::hard), Vector::Zero(2)),
                 InputError);
}

TEST(ParamGradient, MatchesFiniteDifferences) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        NdtParams p = tuned_network(rng, trial % 3 == 0);
        const Matrix x = random_points(rng, 25, p.input_dim());
        Matrix y = random_points(rng, 25, p.output_dim());
        std::uniform_real_distribution<double> unif(0.1, 1.0);
        Vector w(25);
        for (auto& v : w) v = unif(rng);
        NdtGradient g;
        ndt_loss(p, x, y, w, &g);
        const auto ga = arrays(g);
        auto pa = arrays(p);
        std::vector<double> an, fd;
        for (std::size_t a = 0; a < pa.size(); ++a)
            for (Eigen::Index i = 0; i < pa[a].second; ++i) {
                double& v = pa[a].first[i];
                const double keep = v;
                v = keep + 1e-5;
                const double lp = ndt_loss(p, x, y, w);
                v = keep - 1e-5;
                const double lm = ndt_loss(p, x, y, w);
                v = keep;
                an.push_back(ga[a].first[i]);
                fd.push_back((lp - lm) / 2e-5);
            }
        const Eigen::Map<const Vector> va(an.data(), static_cast<Eigen::Index>(an.size()));
        const Eigen::Map<const Vector> vf(fd.data(), static_cast<Eigen::Index>(fd.size()));
        EXPECT_LT((va - vf).norm() / std::max({va.norm(), vf.norm(), 1e-8}), 1e-4);
    }
}

TEST(Finetune, ZeroLearningRateIsNoOp) {
    std::mt19937_64 rng(4);
    const DecisionTree t = random_tree(rng, 3, 3);
    const NdtParams p = convert_dt_to_ndt(t);
    const Matrix x = random_points(rng, 50, t.n_features);
    const Matrix y = tree_predict(t, x);
    for (auto opt : {NdtOptimizer::gradient_descent, NdtOptimizer::adam}) {
        const auto r = ndt_finetune(p, x, y, Vector::Ones(50), {opt, 0.0, 10, 0});
        EXPECT_EQ(r.params.w1, p.w1);
        EXPECT_EQ(r.params.wout, p.wout);
        EXPECT_EQ(r.params.bout, p.bout);
        ASSERT_EQ(r.loss_trace.size(), 11u);
        for (double l : r.loss_trace) EXPECT_EQ(l, r.loss_trace.front());
    }
}

TEST(Finetune, PerfectInitialisationStaysPerfect) {
    std::mt19937_64 rng(6);
    const DecisionTree t = random_tree(rng, 3, 3);
    const NdtParams p = convert_dt_to_ndt(t, {1e3, 1e3});
    Matrix x = random_points(rng, 200, t.n_features);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        if (split_margin(t, x.row(i)) > 0.05) keep.push_back(i);
    x = Matrix(x(keep, Eigen::all));
    const Matrix y = tree_predict(t, x);
    const Vector w = Vector::Ones(x.rows());
    for (auto opt : {NdtOptimizer::gradient_descent, NdtOptimizer::adam}) {
        const auto r = ndt_finetune(p, x, y, w, {opt, 0.01, 50, 0});
        EXPECT_LT(r.loss_trace.front(), 1e-8);
        EXPECT_LE(r.loss_trace.back(), r.loss_trace.front());
        EXPECT_FALSE(r.diverged);
    }
}

TEST(Finetune, ReducesLossOnNonTreeTarget) {
    std::mt19937_64 rng(12);
    const DecisionTree t = random_tree(rng, 3, 2);
    const NdtParams p = convert_dt_to_ndt(t);
    const Matrix x = random_points(rng, 300, t.n_features);
    Matrix y(300, 1);
    for (Eigen::Index i = 0; i < 300; ++i) y(i, 0) = std::sin(x(i, 0)) + x.row(i).sum();
    for (auto opt : {NdtOptimizer::gradient_descent, NdtOptimizer::adam}) {
        const auto r = ndt_finetune(p, x, y, Vector::Ones(300), {opt, 0.01, 100, 0});
        EXPECT_LT(r.loss_trace.back(), r.loss_trace.front());
    }
}

TEST(Finetune, DivergenceKeepsLastFiniteParameters) {
    std::mt19937_64 rng(3);
    const DecisionTree t = random_tree(rng, 3, 3);
    const NdtParams p = convert_dt_to_ndt(t);
    const Matrix x = random_points(rng, 40, t.n_features);
    const Matrix y = Matrix::Constant(40, 1, 1e150);
    const auto r = ndt_finetune(p, x, y, Vector::Ones(40), {NdtOptimizer::gradient_descent, 1e10, 50, 0});
    EXPECT_TRUE(r.diverged);
    EXPECT_TRUE(r.params.all_finite());
    for (double l : r.loss_trace) EXPECT_TRUE(std::isfinite(l));
}

TEST(Finetune, Preconditions) {
    const NdtParams p = convert_dt_to_ndt(figure_tree());
    const Matrix x = Matrix::Zero(3, 2), y = Matrix::Zero(3, 1);
    EXPECT_THROW(ndt_finetune(with_mode(p, NdtMode::hard), x, y, Vector::Ones(3), {}), InputError);
    EXPECT_THROW(ndt_finetune(p, x, y, Vector::Zero(3), {}), InputError);
    EXPECT_THROW(ndt_finetune(p, x, Matrix::Zero(3, 2), Vector::Ones(3), {}), DimensionError);
}

TEST(Taylor, ZeroScaleIsExact) {
    std::mt19937_64 rng(1);
    const NdtParams p = tuned_network(rng);
    const auto r = taylor_residual_check(p, Vector::Zero(p.input_dim()), {0.0, 0.1});
    EXPECT_EQ(r[0], 0.0);
}

TEST(Taylor, CubicDecayAtGenericPoints) {
    std::mt19937_64 rng(10);
    int good = 0, total = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const NdtParams p = tuned_network(rng);
        const Vector x0 = random_points(rng, 1, p.input_dim(), 0.5).row(0).transpose();
        const auto r = taylor_residual_check(p, x0, {0.04, 0.02}, 0, trial);
        ++total;
        const double ratio = r[0] / r[1];
        good += ratio >= 6.0 && ratio <= 10.0;
    }
    EXPECT_GE(good, 18) << good << "/" << total;
}

TEST(Taylor, SaturatedRegionIsLocallyFlat) {
    const NdtParams p = convert_dt_to_ndt(figure_tree(), {50.0, 50.0});
    const auto r = taylor_residual_check(p, (Vector(2) << 2.5, 3.0).finished(), {0.1, 0.05, 0.025});
    for (double v : r) EXPECT_LT(v, 1e-10);
}

TEST(Continuity, ExplanationMapIsLipschitzLocally) {
    std::mt19937_64 rng(14);
    const NdtParams p = tuned_network(rng);
    const Vector x = random_points(rng, 1, p.input_dim()).row(0).transpose();
    const Vector dir = Vector::Ones(p.input_dim()).normalized();
    const Vector g0 = ndt_input_gradient(p, x);
    const double d1 = (ndt_input_gradient(p, x + 1e-3 * dir) - g0).norm();
    const double d2 = (ndt_input_gradient(p, x + 1e-4 * dir) - g0).norm();
    EXPECT_LT(d2, d1);
    EXPECT_NEAR(d1 / d2, 10.0, 1.0);
}

TEST(NdtJson, RoundTrip) {
    std::mt19937_64 rng(2);
    const NdtParams p = tuned_network(rng, 1);
    const NdtParams back = ndt_from_json(nlohmann::json::parse(ndt_to_json(p).dump()));
    const Matrix x = random_points(rng, 10, p.input_dim());
    EXPECT_EQ(ndt_forward(p, x), ndt_forward(back, x));
    const auto j = ndt_to_json(p);
    EXPECT_EQ(j["layer_sizes"][1].get<int>(), p.n_splits());
    EXPECT_EQ(j["mode"], "soft");
}
