#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "podiff/common.hpp"
#include "podiff/env.hpp"

namespace podiff {

// Fully-connected conditional denoiser f(tau, y) -> state estimate.
// Rectifier hidden layers, linear output, no normalization layers, not
// conditioned on a noise level. The first layer keeps an explicit column
// split between the conditioning input and the noisy state.
struct DenoiserModel {
    int tau_dim = 0;
    int state_dim = 0;
    int hidden_width = 1024;
    int hidden_layers = 6;

    Mat w_tau;  // hidden_width x tau_dim
    Mat w_y;    // hidden_width x state_dim
    Vec b0;
    std::vector<Mat> w_hidden;  // hidden_layers-1 of hidden_width x hidden_width
    std::vector<Vec> b_hidden;
    Mat w_out;  // state_dim x hidden_width
    Vec b_out;

    void check_finite() const;
};

// He-style fan-in-scaled uniform initialization, zero biases.
DenoiserModel init_model(int tau_dim, int state_dim, int hidden_width,
                         int hidden_layers, std::uint64_t seed);

struct TrainConfig {
    int epochs = 1000;
    int batch_size = 512;
    double noise_sigma_low = 0.0;
    double noise_sigma_high = 1.0;
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
};

struct JacobianReport {
    Mat jac_y;    // state_dim x state_dim
    Mat jac_tau;  // state_dim x tau_dim
    Eigen::VectorXcd eigenvalues;  // of jac_y
    double lambda_max_abs = 0.0;
    std::optional<Mat> jac_plus;  // (I - jac_y)^-1 jac_tau when invertible
    double condition_number = 0.0;  // of (I - jac_y)
};

Vec forward(const DenoiserModel& model, const Vec& tau, const Vec& y);

// Batched evaluation, one sample per column.
Mat forward_batch(const DenoiserModel& model, const Mat& tau, const Mat& y);

// Mean-squared-error loss and its gradients for one batch (columns are
// samples). This is exactly the backward pass the trainer takes.
struct GradientSet {
    double loss = 0.0;
    Mat w_tau, w_y;
    Vec b0;
    std::vector<Mat> w_hidden;
    std::vector<Vec> b_hidden;
    Mat w_out;
    Vec b_out;
};

GradientSet loss_gradients(const DenoiserModel& model, const Mat& conds, const Mat& y,
                           const Mat& targets);

// One epoch is a shuffled pass over the dataset in batches of batch_size;
// each batch draws per-sample sigma from the configured range, forms
// y = s + sigma z, and takes one Adam step on the mean squared error.
// Throws on a non-finite loss with the last finite epoch's weights kept.
std::vector<double> train(DenoiserModel& model, const Dataset& dataset,
                          const TrainConfig& cfg, Rng& rng);

// Jacobians by reverse-mode accumulation through the layer chain, with
// the rectifier subgradient at 0 taken as 0.
JacobianReport jacobians(const DenoiserModel& model, const Vec& tau, const Vec& y);

double spectral_radius(const Mat& m);

// Little-endian binary model file: magic "PDF1", u32 version, u32 tau_dim,
// u32 state_dim, u32 hidden_width, u32 hidden_layers, then row-major f32
// blocks in order W_tau, W_y, b0, (W_k, b_k) per hidden-to-hidden layer,
// W_out, b_out.
void save_model(const DenoiserModel& model, const std::string& path);
DenoiserModel load_model(const std::string& path);
std::string model_to_json(const DenoiserModel& model);

}  // namespace podiff
