#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "podiff/denoiser.hpp"
#include "podiff/env.hpp"
#include "podiff/flow.hpp"

namespace podiff {

struct DeviationRecord {
    Vec cond;       // conditioning vector (agent one-hot + tau)
    Vec state;      // true state s
    Vec attractor;  // flow endpoint started at s
    double deviation = 0.0;
    int jac_plus_rank = 0;
    double lambda_max_abs = 0.0;
};

// Flows from s under cond and measures |s - attractor|, annotating the
// Jacobian rank and spectral radius at the attractor. Throws on
// non-convergence.
DeviationRecord deviation(const DenoiserModel& model, const Vec& cond, const Vec& s,
                          const FlowConfig& flow_cfg);

// Singular values above rel_tol times the largest count toward the rank.
int numerical_rank(const Mat& m, double rel_tol = 1e-3);

// First-order fixed-point shift (I - jac_y)^-1 jac_tau * delta_tau.
Vec predict_shift(const DenoiserModel& model, const Vec& cond, const Vec& y_star,
                  const Vec& delta_tau);

struct Cor1Shift {
    std::optional<Vec> shift;
    double discrepancy = 0.0;  // vs predict_shift, when both exist
};

// First-layer expansion E (I-L)^-1 L E^T W_y^+ W_tau delta_tau with (E, L)
// the eigendecomposition of the symmetric part of jac_y. Agrees with
// predict_shift when jac_y is symmetric PSD.
Cor1Shift cor1_shift(const DenoiserModel& model, const Vec& cond, const Vec& y_star,
                     const Vec& delta_tau);

// Per-distinct-sample fixed point table: one entry per distinct
// (agent, tau, state) triple in the dataset.
struct FixedPointEntry {
    int sample_index = 0;  // first dataset index with this triple
    Vec cond;
    Vec state;
    Vec attractor;
    double deviation = 0.0;
    Mat jac_y;  // at the attractor
    int jac_plus_rank = 0;
    double lambda_max_abs = 0.0;
    bool converged = false;
};

std::vector<FixedPointEntry> fixed_point_table(const DenoiserModel& model,
                                               const Dataset& dataset,
                                               const FlowConfig& flow_cfg);

struct LocalDataset {
    int anchor = 0;  // index into the entry table
    double epsilon = 0.0;
    std::vector<int> members;  // entry indices with Jacobian distance <= epsilon
    int r = 0;                 // dim span of member states
    bool excludes_any = false;
};

// Frobenius-ball filter around the anchor's Jacobian at its attractor.
LocalDataset build_local_dataset(const std::vector<FixedPointEntry>& entries,
                                 int anchor, double epsilon,
                                 double rank_tol = 1e-3);

struct SurrogateResidualReport {
    Mat sigma_s;
    Mat sigma_tau;
    Mat sigma_s_tau;
    double residual = 0.0;  // Tr(sigma_s) - Tr(sigma_s_tau sigma_tau^-1 sigma_tau_s)
    double ridge = 0.0;
    long sample_count = 0;
};

// Optimal linear-regression residual over (tau, s) pairs, covariances
// about the sample means, ridge 1e-8 Tr(sigma_tau)/|tau| on the diagonal.
SurrogateResidualReport surrogate_residual(const std::vector<std::pair<Vec, Vec>>& samples);

struct BoundCheck {
    int anchor = 0;
    double epsilon = 0.0;
    double residual = 0.0;
    double deviation = 0.0;
    bool excludes_any = false;
    bool holds = false;  // deviation < residual
};

struct StudyResult {
    std::vector<FixedPointEntry> entries;
    std::optional<double> spearman_rho;         // rank(J+) vs deviation
    std::map<double, double> residuals;         // epsilon -> mean anchor residual
    std::vector<BoundCheck> bound_checks;       // per anchor, per epsilon
    std::vector<double> pairwise_jac_distances; // sorted
};

// Deviation/rank table with Spearman correlation and per-anchor surrogate
// residual bounds. Empty `epsilons` defaults to the 10th and 50th
// percentiles of the pairwise Jacobian distances.
StudyResult rank_deviation_study(const DenoiserModel& model, const Dataset& dataset,
                                 const FlowConfig& flow_cfg, double rank_tol = 1e-3,
                                 std::vector<double> epsilons = {});

// Spearman rank correlation with average ranks for ties; absent when
// either column is constant or inputs are empty.
std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y);

double percentile(std::vector<double> values, double p);  // p in [0,100]

std::string study_csv(const StudyResult& study);
std::string study_summary_json(const StudyResult& study);

}  // namespace podiff
