#pragma once

#include <cstdint>
#include <vector>

#include "mrf/matrix.hpp"
#include "mrf/toy_encoder.hpp"

namespace mrf {

struct ProbeDataset {
    Matrix train_x;
    std::vector<std::int32_t> train_y;
    Matrix test_x;
    std::vector<std::int32_t> test_y;

    std::size_t num_classes() const; // max label + 1 across both splits
    void validate() const;
};

struct KnnConfig {
    std::size_t k = 10;
    double temperature = 0.07;
};

// Soft cosine-weighted k-NN: each of the k nearest train rows votes
// exp(sim / temperature) for its class; ties at the neighbor cut go to the
// older (lower) train index, ties in the class argmax to the lower class id.
// Features are L2-normalized internally.
double knn_probe(const ProbeDataset& ds, const KnnConfig& cfg);

struct LogisticModel {
    Matrix W;               // classes x dim
    std::vector<double> b;
};

struct LogisticGrads {
    double loss = 0.0;
    Matrix W;
    std::vector<double> b;
};

// Softmax cross-entropy over the train split plus (wd/2)*||W||^2; the bias
// is left unpenalized.
LogisticGrads logistic_loss_grad(const LogisticModel& model, const Matrix& x,
                                 const std::vector<std::int32_t>& y, double weight_decay);

// Multinomial logistic regression from zero-initialized weights, full-batch
// gradient descent. Returns test accuracy; loss_trace, when given, receives
// the train loss before every step.
double linear_probe(const ProbeDataset& ds, std::size_t epochs, double lr,
                    double weight_decay, std::vector<double>* loss_trace = nullptr);

// Draws n_per_class train rows per class without replacement; everything
// else becomes the test split (original order).
ProbeDataset low_shot_split(const Matrix& features, const std::vector<std::int32_t>& labels,
                            std::size_t n_per_class, std::uint64_t seed);

// knn_probe on every block's summary features.
std::vector<double> per_block_knn(const EncoderParams& params, const Matrix& train_x,
                                  const std::vector<std::int32_t>& train_y,
                                  const Matrix& test_x, const std::vector<std::int32_t>& test_y,
                                  const KnnConfig& cfg);

} // namespace mrf
