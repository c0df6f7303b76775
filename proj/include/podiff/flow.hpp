#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "podiff/denoiser.hpp"
#include "podiff/env.hpp"

namespace podiff {

// One denoising map at a fixed conditioning: a step function (which may
// depend on the iteration index, as the analytic oracle's sigma schedule
// does) and the Jacobian d step/dy used for stability classification.
struct DenoiseMap {
    int state_dim = 0;
    std::function<Vec(const Vec&, int)> step;
    std::function<Mat(const Vec&)> jacobian_y;
    // A small step only counts as convergence once the map is stationary;
    // a schedule-driven oracle is strongly contracting at large sigma and
    // would otherwise "converge" at the posterior mean. Unset = always.
    std::function<bool(int)> settled;
};

// Geometric sigma schedule for the analytic oracle: sigma_l =
// max(sigma_min, sigma0 * decay^l). A trained model iterates directly and
// needs no schedule.
struct SigmaSchedule {
    double sigma0 = 1.0;
    double decay = 0.7;
    double sigma_min = 0.05;

    double at(int iter) const;
    static SigmaSchedule fixed(double sigma) { return {sigma, 1.0, sigma}; }
};

DenoiseMap make_model_map(const DenoiserModel& model, const Vec& cond);
DenoiseMap make_oracle_map(PosteriorExact posterior, SigmaSchedule schedule = {});

enum class InitKind { StandardNormal, UniformBox, DataMarginal };

struct InitDist {
    InitKind kind = InitKind::StandardNormal;
    double lo = -0.5;  // uniform-box bounds
    double hi = 1.5;
    double sigma = 1.0;  // data-marginal noise level
};

struct FlowConfig {
    int max_iters = 200;
    double convergence_tol = 1e-5;  // on the step norm
    double merge_radius = 0.05;
    InitDist init_dist;
    int num_samples = 1000;
    int threads = 1;
    std::uint64_t seed = 0;
};

struct FlowTrace {
    std::vector<Vec> points;  // y(0) .. y(L)
    bool converged = false;
    bool diverged = false;  // non-finite iterate; trace is partial
    std::optional<Vec> attractor;
    int iterations = 0;
};

struct FixedPointSet {
    std::vector<Vec> points;
    std::vector<bool> stability;     // |lambda_max| < 1
    std::vector<double> lambda_max;  // spectral radius at each point
    std::vector<double> basin_mass;  // fraction of initial samples per point
};

// Initial-point sampler for find_fixed_points. Data-marginal draws a
// posterior support state and adds N(0, sigma^2 I) noise, so it needs the
// exact posterior.
std::function<Vec(Rng&)> make_init_sampler(const InitDist& dist, int dim,
                                           const PosteriorExact* posterior = nullptr);

FlowTrace run_flow(const DenoiseMap& map, const Vec& y0, const FlowConfig& cfg);

// Runs flows from num_samples initial draws, single-linkage clusters the
// converged endpoints within merge_radius, and classifies each cluster
// center by the Jacobian spectral radius. Clusters are ordered by basin
// mass (descending), ties broken lexicographically.
FixedPointSet find_fixed_points(const DenoiseMap& map, const FlowConfig& cfg, Rng& rng,
                                const PosteriorExact* posterior = nullptr);

// find_fixed_points with basin masses renormalized over converged samples,
// i.e. the empirical posterior over attractors.
FixedPointSet estimate_posterior(const DenoiseMap& map, const FlowConfig& cfg, Rng& rng,
                                 const PosteriorExact* posterior = nullptr);

// Cluster centers present (within merge_radius) in every input set.
std::vector<Vec> intersect_fixed_points(const std::vector<FixedPointSet>& sets,
                                        double merge_radius);

struct VectorFieldGrid {
    std::vector<int> dims;  // state dimensions swept by the grid
    double lo = -0.5;
    double hi = 1.5;
    int resolution = 20;  // points per swept dimension; 0 = empty grid
    Vec fixed_coords;     // values held for the remaining dimensions
};

struct VectorFieldRow {
    Vec y_in;
    Vec y_out;
};

std::vector<VectorFieldRow> vector_field(const DenoiseMap& map,
                                         const VectorFieldGrid& grid);

// CSV with header y_in_<d>...,y_out_<d>...
std::string vector_field_csv(const std::vector<VectorFieldRow>& rows, int state_dim);

// JSON report {tau, points, stability, basin_mass, lambda_max}.
std::string fixed_point_set_json(const FixedPointSet& set, const Vec& tau);

}  // namespace podiff
