#include "ndtlime/blackbox.hpp"

#include <gtest/gtest.h>

using namespace ndtlime;

namespace {

// Four blobs at (+-2, +-2); label is 1 when the signs differ.
Dataset xor_blobs(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.3);
    Dataset ds;
    ds.task = Task::classification;
    ds.features.resize(static_cast<Eigen::Index>(n), 2);
    ds.feature_names = {"a", "b"};
    for (std::size_t i = 0; i < n; ++i) {
        const double sa = (i % 2) ? 1.0 : -1.0, sb = ((i / 2) % 2) ? 1.0 : -1.0;
        ds.features(i, 0) = 2.0 * sa + noise(rng);
        ds.features(i, 1) = 2.0 * sb + noise(rng);
        ds.targets.push_back(sa * sb < 0 ? 1.0 : 0.0);
    }
    return ds;
}

} // namespace

TEST(Mlp, LearnsXor) {
    const Dataset ds = xor_blobs(200, 1);
    const MlpModel m = mlp_train(ds, {16}, {0.01, 500, 32, 3});
    EXPECT_GE(mlp_accuracy(m, ds), 0.95);
    EXPECT_LT(m.final_loss(), m.loss_trace.front());
}

TEST(Mlp, ZeroEpochsIsInitialisation) {
    const Dataset ds = synth_friedman1(60, 0.1, 2);
    const TrainingConfig cfg{0.01, 0, 16, 5};
    const MlpModel trained = mlp_train(ds, {8, 4}, cfg);
    const MlpModel init = mlp_init(ds, {8, 4}, cfg);
    ASSERT_EQ(trained.weights.size(), init.weights.size());
    for (std::size_t l = 0; l < init.weights.size(); ++l) {
        EXPECT_EQ(trained.weights[l], init.weights[l]);
        EXPECT_EQ(trained.biases[l], init.biases[l]);
    }
    ASSERT_EQ(trained.loss_trace.size(), 1u);
    EXPECT_EQ(trained.loss_trace[0], detail::mlp_dataset_loss(init, ds));
}

TEST(Mlp, SameSeedBitIdentical) {
    const Dataset ds = synth_friedman1(120, 0.5, 1);
    const TrainingConfig cfg{0.01, 5, 16, 42};
    const MlpModel a = mlp_train(ds, {8}, cfg);
    const MlpModel b = mlp_train(ds, {8}, cfg);
    for (std::size_t l = 0; l < a.weights.size(); ++l) {
        EXPECT_EQ(a.weights[l], b.weights[l]);
        EXPECT_EQ(a.biases[l], b.biases[l]);
    }
    EXPECT_EQ(a.loss_trace, b.loss_trace);
}

TEST(Mlp, DivergenceThrows) {
    const Dataset ds = synth_friedman1(100, 0.0, 1);
    EXPECT_THROW(mlp_train(ds, {16}, {50.0, 50, 16, 0}), NumericalError);
}

TEST(Mlp, HandSetNetwork) {
    MlpModel m;
    m.layer_sizes = {1, 1, 1};
    m.weights = {Matrix::Ones(1, 1), Matrix::Ones(1, 1)};
    m.biases = {Vector::Zero(1), Vector::Zero(1)};
    m.validate();
    Matrix x(2, 1);
    x << 2.0, -3.0;
    const Matrix out = mlp_predict(m, x);
    EXPECT_EQ(out(0, 0), 2.0);
    EXPECT_EQ(out(1, 0), 0.0);
}

TEST(Mlp, PredictShapes) {
    const Dataset ds = synth_blobs(60, 3, 3, 3.0, 0);
    const MlpModel m = mlp_train(ds, {4}, {0.01, 2, 8, 0});
    EXPECT_EQ(mlp_predict(m, Matrix(0, 3)).rows(), 0);
    Matrix dup(3, 3);
    dup.rowwise() = ds.features.row(5);
    const Matrix s = mlp_predict(m, dup);
    ASSERT_EQ(s.cols(), 3);
    EXPECT_EQ(s.row(0), s.row(1));
    EXPECT_EQ(s.row(1), s.row(2));
    EXPECT_THROW(mlp_predict(m, Matrix::Zero(2, 4)), DimensionError);
}

TEST(Mlp, JsonRoundTrip) {
    const Dataset ds = synth_friedman1(50, 0.0, 3);
    const MlpModel m = mlp_train(ds, {6, 3}, {0.01, 3, 10, 1});
    const MlpModel back = mlp_from_json(nlohmann::json::parse(mlp_to_json(m).dump()));
    EXPECT_EQ(mlp_predict(m, ds.features), mlp_predict(back, ds.features));
    auto j = mlp_to_json(m);
    j["activation"] = "sigmoid";
    EXPECT_THROW(mlp_from_json(j), InputError);
}
