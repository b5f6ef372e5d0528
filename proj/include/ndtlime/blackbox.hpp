#pragma once

#include "ndtlime/core.hpp"
#include "ndtlime/data.hpp"

#include <json.hpp>

#include <numeric>
#include <random>
#include <vector>

namespace ndtlime {

struct TrainingConfig {
    double learning_rate = 0.01;
    int epochs = 200;
    int batch_size = 32;
    std::uint64_t seed = 0;
};

/// Fully connected rectifier network. Layer l maps a row batch H to H * weights[l] + biases[l];
/// every layer but the last is followed by max(0, .).
struct MlpModel {
    std::vector<int> layer_sizes;
    std::vector<Matrix> weights;  // layer_sizes[l] x layer_sizes[l+1]
    std::vector<Vector> biases;
    Task task = Task::regression;
    TrainingConfig config;
    std::vector<double> loss_trace;  // [initial, after epoch 1, ...]

    int input_dim() const { return layer_sizes.front(); }
    int output_dim() const { return layer_sizes.back(); }
    double final_loss() const { return loss_trace.empty() ? NAN : loss_trace.back(); }

    void validate() const {
        detail::require(layer_sizes.size() >= 2, "MLP needs at least an input and an output layer");
        detail::require(weights.size() == layer_sizes.size() - 1 && biases.size() == weights.size(),
                        "MLP layer count mismatch");
        for (std::size_t l = 0; l < weights.size(); ++l) {
            detail::require(weights[l].rows() == layer_sizes[l] && weights[l].cols() == layer_sizes[l + 1] &&
                                biases[l].size() == layer_sizes[l + 1],
                            "MLP layer " + std::to_string(l) + " has inconsistent dimensions");
        }
    }
};

namespace detail {

// Forward pass keeping every layer's post-activation output (index 0 is the input).
inline std::vector<Matrix> mlp_forward_all(const MlpModel& model, const Matrix& x) {
    std::vector<Matrix> acts;
    acts.reserve(model.weights.size() + 1);
    acts.push_back(x);
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        Matrix h = acts.back() * model.weights[l];
        h.rowwise() += model.biases[l].transpose();
        if (l + 1 < model.weights.size()) h = h.cwiseMax(0.0);
        acts.push_back(std::move(h));
    }
    return acts;
}

inline Matrix softmax_rows(const Matrix& scores) {
    Matrix p = scores;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        const double m = p.row(i).maxCoeff();
        p.row(i) = (p.row(i).array() - m).exp();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

// Mean loss and its gradient with respect to the output scores.
inline double mlp_loss(Task task, const Matrix& out, const std::vector<double>& y,
                       const std::vector<std::size_t>& rows, Matrix* grad) {
    const auto m = static_cast<double>(rows.size());
    double loss = 0.0;
    if (grad) grad->setZero(out.rows(), out.cols());
    if (task == Task::regression) {
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
            const double r = out(i, 0) - y[rows[i]];
            loss += r * r;
            if (grad) (*grad)(i, 0) = 2.0 * r / m;
        }
    } else {
        const Matrix p = softmax_rows(out);
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
            const auto c = static_cast<Eigen::Index>(y[rows[i]]);
            loss -= std::log(std::max(p(i, c), 1e-300));
            if (grad) {
                grad->row(i) = p.row(i) / m;
                (*grad)(i, c) -= 1.0 / m;
            }
        }
    }
    return loss / m;
}

inline double mlp_dataset_loss(const MlpModel& model, const Dataset& data) {
    std::vector<std::size_t> all(data.n());
    std::iota(all.begin(), all.end(), 0);
    const auto acts = mlp_forward_all(model, data.features);
    return mlp_loss(model.task, acts.back(), data.targets, all, nullptr);
}

} // namespace detail

/// He-initialised network; regression output bias starts at the target mean.
inline MlpModel mlp_init(const Dataset& train, const std::vector<int>& hidden_sizes, const TrainingConfig& config) {
    detail::require(!hidden_sizes.empty(), "hidden_sizes must be non-empty");
    MlpModel model;
    model.task = train.task;
    model.config = config;
    model.layer_sizes.push_back(static_cast<int>(train.d()));
    for (int h : hidden_sizes) {
        detail::require(h >= 1, "hidden layer sizes must be positive");
        model.layer_sizes.push_back(h);
    }
    model.layer_sizes.push_back(train.task == Task::regression ? 1 : std::max(2, train.n_classes()));

    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t l = 0; l + 1 < model.layer_sizes.size(); ++l) {
        const double scale = std::sqrt(2.0 / model.layer_sizes[l]);
        Matrix w(model.layer_sizes[l], model.layer_sizes[l + 1]);
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = scale * normal(rng);
        model.weights.push_back(std::move(w));
        model.biases.push_back(Vector::Zero(model.layer_sizes[l + 1]));
    }
    if (train.task == Task::regression) {
        model.biases.back()[0] =
            std::accumulate(train.targets.begin(), train.targets.end(), 0.0) / static_cast<double>(train.n());
    }
    return model;
}

/// Mini-batch gradient descent with a fixed step on mean squared error (regression) or softmax
/// cross-entropy (classification). Throws NumericalError when the loss stops being finite.
inline MlpModel mlp_train(const Dataset& train, const std::vector<int>& hidden_sizes, const TrainingConfig& config) {
    train.validate();
    detail::require(config.batch_size >= 1 && config.epochs >= 0, "invalid training config");
    MlpModel model = mlp_init(train, hidden_sizes, config);
    model.loss_trace.push_back(detail::mlp_dataset_loss(model, train));

    std::mt19937_64 rng(config.seed ^ 0x5851f42d4c957f2dULL);
    std::vector<std::size_t> order(train.n());
    std::iota(order.begin(), order.end(), 0);
    const auto n_layers = model.weights.size();

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            std::vector<std::size_t> rows(order.begin() + start, order.begin() + end);
            Matrix xb(static_cast<Eigen::Index>(rows.size()), train.features.cols());
            for (std::size_t i = 0; i < rows.size(); ++i) xb.row(i) = train.features.row(rows[i]);

            const auto acts = detail::mlp_forward_all(model, xb);
            Matrix delta;
            detail::mlp_loss(model.task, acts.back(), train.targets, rows, &delta);
            for (std::size_t l = n_layers; l-- > 0;) {
                const Matrix grad_w = acts[l].transpose() * delta;
                const Vector grad_b = delta.colwise().sum().transpose();
                if (l > 0) {
                    delta = (delta * model.weights[l].transpose()).cwiseProduct(
                        (acts[l].array() > 0.0).cast<double>().matrix());
                }
                model.weights[l] -= config.learning_rate * grad_w;
                model.biases[l] -= config.learning_rate * grad_b;
            }
        }
        const double loss = detail::mlp_dataset_loss(model, train);
        if (!std::isfinite(loss))
            throw NumericalError("MLP training diverged at epoch " + std::to_string(epoch + 1) +
                                 " (non-finite loss); lower the learning rate");
        model.loss_trace.push_back(loss);
    }
    return model;
}

/// Raw output scores: m x 1 for regression, m x C pre-softmax class scores for classification.
inline Matrix mlp_predict(const MlpModel& model, const Matrix& points) {
    detail::require_dims(points.cols() == model.input_dim() || points.rows() == 0,
                         "mlp_predict: expected " + std::to_string(model.input_dim()) + " features, got " +
                             std::to_string(points.cols()));
    if (points.rows() == 0) return Matrix(0, model.output_dim());
    return detail::mlp_forward_all(model, points).back();
}

/// Fraction of rows whose argmax score matches the label (classification only).
inline double mlp_accuracy(const MlpModel& model, const Dataset& data) {
    const Matrix s = mlp_predict(model, data.features);
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        Eigen::Index c = 0;
        s.row(i).maxCoeff(&c);
        hits += static_cast<double>(c) == data.targets[i];
    }
    return static_cast<double>(hits) / static_cast<double>(data.n());
}

inline nlohmann::json mlp_to_json(const MlpModel& model) {
    nlohmann::json j;
    j["layer_sizes"] = model.layer_sizes;
    j["activation"] = "relu";
    j["task"] = std::string(to_string(model.task));
    j["weights"] = nlohmann::json::array();
    j["biases"] = nlohmann::json::array();
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        const Matrix& w = model.weights[l];
        j["weights"].push_back(std::vector<double>(w.data(), w.data() + w.size()));
        j["biases"].push_back(std::vector<double>(model.biases[l].data(), model.biases[l].data() + model.biases[l].size()));
    }
    return j;
}

inline MlpModel mlp_from_json(const nlohmann::json& j) {
    if (j.value("activation", "relu") != "relu") throw InputError("unsupported MLP activation tag");
    MlpModel model;
    model.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
    model.task = parse_task(j.at("task").get<std::string>());
    const auto& ws = j.at("weights");
    const auto& bs = j.at("biases");
    detail::require(ws.size() + 1 == model.layer_sizes.size() && bs.size() == ws.size(), "MLP JSON layer count mismatch");
    for (std::size_t l = 0; l < ws.size(); ++l) {
        const auto flat = ws[l].get<std::vector<double>>();
        const auto b = bs[l].get<std::vector<double>>();
        detail::require(flat.size() == static_cast<std::size_t>(model.layer_sizes[l]) * model.layer_sizes[l + 1],
                        "MLP JSON weight array has wrong length");
        model.weights.emplace_back(Eigen::Map<const Matrix>(flat.data(), model.layer_sizes[l], model.layer_sizes[l + 1]));
        model.biases.emplace_back(Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size())));
    }
    model.validate();
    return model;
}

} // namespace ndtlime
