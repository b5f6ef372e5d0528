#include "ndtlime/blackbox.hpp"
#include "ndtlime/data.hpp"
#include "ndtlime/explain.hpp"

#include <gtest/gtest.h>

using namespace ndtlime;

namespace {

BlackBox linear_box() {
    return {[](const Matrix& x) {
                Matrix out(x.rows(), 1);
                out.col(0) = 3.0 * x.col(0) - 2.0 * x.col(1);
                return out;
            },
            Task::regression};
}

BlackBox constant_box() {
    return {[](const Matrix& x) { return Matrix::Constant(x.rows(), 1, 2.5); }, Task::regression};
}

} // namespace

TEST(Perturb, ZeroScaleAndDeterminism) {
    NeighborhoodConfig cfg;
    cfg.seed = 3;
    const Vector x = (Vector(3) << 1.0, -2.0, 0.5).finished();
    EXPECT_EQ(perturb(x, cfg), perturb(x, cfg));
    cfg.perturb_scale = 0.0;
    const Matrix p = perturb(x, cfg);
    for (Eigen::Index i = 0; i < p.rows(); ++i) EXPECT_EQ(p.row(i), x.transpose());
}

TEST(Perturb, ColumnMeansNearInstance) {
    NeighborhoodConfig cfg;
    cfg.seed = 11;
    cfg.feature_std = {1.0, 2.0, 0.5};
    const Vector x = (Vector(3) << 1.0, -2.0, 0.5).finished();
    const Matrix p = perturb(x, cfg);
    ASSERT_EQ(p.rows(), 800);
    for (int j = 0; j < 3; ++j) EXPECT_LT(std::abs(p.col(j).mean() - x[j]), 4.0 * cfg.feature_std[j] / std::sqrt(800.0));
    cfg.feature_std = {1.0};
    EXPECT_THROW(perturb(x, cfg), DimensionError);
}

TEST(Kernel, HandValues) {
    Matrix pts(3, 2);
    pts << 1, 1, 1, 3, 4, 5;
    const Vector x = (Vector(2) << 1, 1).finished();
    const Vector w = proximity_weights(pts, x, 2.0);
    EXPECT_EQ(w[0], 1.0);
    EXPECT_NEAR(w[1], std::exp(-1.0), 1e-15);
    EXPECT_NEAR(w[1], 0.367879, 1e-6);
    const Vector flat = proximity_weights(pts, x, 1e9);
    EXPECT_LT((flat.array() - 1.0).abs().maxCoeff(), 1e-9);
    EXPECT_THROW(proximity_weights(pts, x, 0.0), InputError);
}

TEST(Wls, ExactLinearData) {
    Matrix x(6, 2);
    x << 0, 1, 1, 0, 2, 2, 3, -1, -1, 4, 0.5, 0.5;
    const Vector y = (2.0 * x.col(0) - 0.5 * x.col(1)).array() + 1.5;
    const auto r = weighted_least_squares(x, y, Vector::Ones(6));
    EXPECT_NEAR(r.coefficients[0], 2.0, 1e-8);
    EXPECT_NEAR(r.coefficients[1], -0.5, 1e-8);
    EXPECT_NEAR(r.intercept, 1.5, 1e-8);
    EXPECT_FALSE(r.rank_deficient);

    Matrix x2(12, 2);
    x2 << x, x;
    Vector y2(12);
    y2 << y, y;
    const Vector noise = Vector::Random(12) * 0.1;
    const auto a = weighted_least_squares(x, y + noise.head(6), Vector::Ones(6));
    Vector noisy2(12);
    noisy2 << y + noise.head(6), y + noise.head(6);
    const auto b = weighted_least_squares(x2, noisy2, Vector::Ones(12));
    // the ridge does not scale with total weight, so agreement is only up to its size
    EXPECT_NEAR((a.coefficients - b.coefficients).norm(), 0.0, 1e-7);
    EXPECT_NEAR(a.intercept, b.intercept, 1e-7);
}

TEST(Wls, WeightsOnTwoPointsGiveTheLineThroughThem) {
    Matrix x(5, 1);
    x << -1, 0.5, 2, 3, 7;
    const Vector y = (Vector(5) << 9, 1, 4, -3, 0).finished();
    const Vector w = (Vector(5) << 1e-12, 1, 1e-12, 1, 1e-12).finished();
    const auto r = weighted_least_squares(x, y, w);
    const double slope = (y[3] - y[1]) / (x(3, 0) - x(1, 0));
    EXPECT_NEAR(r.coefficients[0], slope, 1e-6);
    EXPECT_NEAR(r.intercept, y[1] - slope * x(1, 0), 1e-6);
}

TEST(Wls, RankDeficiencyFlagged) {
    Matrix x(5, 2);
    x.col(0) << 1, 2, 3, 4, 5;
    x.col(1) = 2.0 * x.col(0);
    const auto r = weighted_least_squares(x, x.col(0), Vector::Ones(5));
    EXPECT_TRUE(r.rank_deficient);
    EXPECT_TRUE(r.coefficients.allFinite());
    EXPECT_THROW(weighted_least_squares(x, x.col(0), Vector::Zero(5)), InputError);
}

TEST(Explain, LinearBlackBoxRecoveredByLr) {
    NeighborhoodConfig cfg;
    cfg.seed = 1;
    const Explanation e = explain_instance(linear_box(), (Vector(2) << 0.3, -0.7).finished(), Surrogate::LR, cfg);
    ASSERT_EQ(e.vector.size(), 2u);
    EXPECT_NEAR(e.vector[0], 3.0, 1e-6);
    EXPECT_NEAR(e.vector[1], -2.0, 1e-6);
    EXPECT_NEAR(e.local_fidelity.value(), 1.0, 1e-9);
}

TEST(Explain, ConstantBlackBoxIsDegenerate) {
    NeighborhoodConfig cfg;
    const Vector x = Vector::Zero(3);
    for (auto s : {Surrogate::LR, Surrogate::DT, Surrogate::NDT}) {
        const Explanation e = explain_instance(constant_box(), x, s, cfg);
        EXPECT_TRUE(e.has_flag("degenerate_neighborhood"));
        EXPECT_FALSE(e.local_fidelity.has_value());
        ASSERT_EQ(e.vector.size(), 3u);
        if (s != Surrogate::DT)
            for (double v : e.vector) EXPECT_EQ(v, 0.0);
    }
}

TEST(Explain, VectorsAreFiniteAndSized) {
    const Dataset ds = synth_friedman1(400, 0.5, 2);
    const auto [train, test] = standardize_split(ds, 0.25, 2);
    const MlpModel m = mlp_train(train, {16}, {0.01, 20, 32, 2});
    NeighborhoodConfig cfg;
    cfg.n_samples = 300;
    for (auto s : {Surrogate::LR, Surrogate::DT, Surrogate::NDT}) {
        const Explanation e = explain_instance(make_blackbox(m), test.features.row(0).transpose(), s, cfg);
        ASSERT_EQ(e.vector.size(), 10u);
        for (double v : e.vector) EXPECT_TRUE(std::isfinite(v));
        EXPECT_TRUE(e.local_fidelity.has_value());
        const auto j = to_json(e);
        EXPECT_EQ(j["surrogate"], std::string(to_string(s)));
    }
}

TEST(Explain, SingleLeafNdtFallsBackToDt) {
    // A step far from x: every perturbed point lands on one side except a sliver the tree cannot use.
    BlackBox step{[](const Matrix& x) {
                      Matrix out(x.rows(), 1);
                      for (Eigen::Index i = 0; i < x.rows(); ++i) out(i, 0) = x(i, 0) > 0.0 ? 1.0 : 0.0;
                      return out;
                  },
                  Task::regression};
    NeighborhoodConfig cfg;
    cfg.perturb_scale = 1e-3;
    cfg.n_samples = 50;
    SurrogateConfig sc;
    sc.min_leaf_weight = 1e9;
    const Vector x = (Vector(2) << 0.0, 0.0).finished();
    const Explanation e = explain_instance(step, x, Surrogate::NDT, cfg, sc);
    EXPECT_TRUE(e.has_flag("single_leaf_tree"));
    EXPECT_TRUE(e.has_flag("fallback_dt"));
    EXPECT_EQ(e.vector, (std::vector<double>{0.5, 0.5}));
}

TEST(Explain, ClassificationExplainsPredictedClass) {
    const Dataset ds = synth_blobs(400, 2, 2, 3.0, 1);
    const auto [train, test] = standardize_split(ds, 0.25, 1);
    const MlpModel m = mlp_train(train, {16}, {0.01, 30, 32, 1});
    const Vector x = test.features.row(3).transpose();
    Eigen::Index c = 0;
    mlp_predict(m, x.transpose()).row(0).maxCoeff(&c);
    NeighborhoodConfig cfg;
    cfg.n_samples = 200;
    const Explanation e = explain_instance(make_blackbox(m), x, Surrogate::NDT, cfg);
    EXPECT_EQ(e.diagnostics.at("class_index"), static_cast<double>(c));
}

TEST(Explain, NdtAtLeastLrFidelityOnFriedman) {
    const Dataset ds = synth_friedman1(2000, 1.0, 0);
    const auto [train, test] = standardize_split(ds, 0.25, 0);
    const MlpModel m = mlp_train(train, {64, 32}, {0.01, 100, 32, 0});
    const BlackBox f = make_blackbox(m);
    int wins = 0;
    for (int j = 0; j < 20; ++j) {
        NeighborhoodConfig cfg;
        cfg.seed = 1000 + j;
        const Vector x = test.features.row(j).transpose();
        const auto lr = explain_instance(f, x, Surrogate::LR, cfg).local_fidelity.value();
        const auto ndt = explain_instance(f, x, Surrogate::NDT, cfg).local_fidelity.value();
        wins += ndt >= lr;
    }
    EXPECT_GE(wins, 16);
}
