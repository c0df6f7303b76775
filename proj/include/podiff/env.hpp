#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "podiff/common.hpp"

namespace podiff {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct InvalidActionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Sensor-network environment: grid_rows x grid_cols sensor agents watch a
// set of areas holding num_targets moving targets. Each agent observes a
// presence bit per covered area; detection in failure_areas independently
// fails with failure_prob per observing agent.
struct EnvSpec {
    int grid_rows = 2;
    int grid_cols = 2;
    int num_areas = 4;
    int num_targets = 1;
    std::vector<std::vector<int>> coverage;  // per agent, area indices
    std::set<int> failure_areas;
    double failure_prob = 0.0;
    std::vector<double> prior;  // over joint states; empty = uniform
    std::uint64_t seed = 0;

    int n_agents() const { return grid_rows * grid_cols; }
    int state_dim() const { return num_areas * num_targets; }
    long num_states() const;
    int obs_dim() const;     // max coverage size; shorter obs are zero-padded
    int action_dim() const;  // one-hot over coverage slots, all-zero = no-op
    void validate() const;

    // Area adjacency (including self) for the target motion kernel. Areas
    // are laid out on a grid: agent grid shape when num_areas matches it,
    // otherwise the closest-to-square factorization.
    std::vector<std::vector<int>> area_neighbors() const;
};

// Canonical 2x2 instances: agents 0,1 cover areas {0,3}; agents 2,3 cover
// areas {1,2}. The non-CO variant makes detection in areas 0,1 fail with
// probability 0.5.
EnvSpec make_co_2x2();
EnvSpec make_nonco_2x2();

// rows x cols sensor grid with one area per agent; each agent covers its
// own area plus the 4-neighborhood.
EnvSpec make_sensor_grid(int rows, int cols, int num_targets);

struct EnvState {
    std::vector<int> target_areas;

    Vec encode(const EnvSpec& spec) const;  // concatenated one-hot blocks
    static EnvState decode(const EnvSpec& spec, const Vec& s);
    long index(const EnvSpec& spec) const;  // mixed-radix state id
    static EnvState from_index(const EnvSpec& spec, long id);
};

struct HistorySample {
    int agent = 0;
    Vec tau;    // (o, a) pairs then final o
    Vec state;  // EnvState encoding
};

struct PosteriorExact {
    std::vector<Vec> support;
    std::vector<double> probs;

    // Index of the support state nearest to y.
    int nearest(const Vec& y) const;
};

struct StepResult {
    EnvState next_state;
    std::vector<Vec> joint_obs;  // one obs_dim vector per agent
    double reward = 0.0;
};

// Observation of the current state, then +1 reward per target scanned by
// at least two agents, then targets move. joint_action holds an area
// index per agent (must lie in its coverage) or -1 for no-op.
StepResult step(const EnvSpec& spec, const EnvState& state,
                const std::vector<int>& joint_action, Rng& rng);

// Observation of `state` by one agent (used by step and by dataset
// generation for the initial observation).
Vec observe(const EnvSpec& spec, const EnvState& state, int agent, Rng& rng);

// Exact Bayes posterior over states given one or more agents' histories
// (assumed time-aligned), by forward filtering over the enumerated state
// space. Throws CapacityError when num_states exceeds enumeration_cap.
PosteriorExact exact_posterior(const EnvSpec& spec,
                               const std::vector<std::pair<int, Vec>>& histories,
                               long enumeration_cap = 200000);

// Posterior-mean mixture denoiser: f*(y) = sum_s s w_s(y) / sum_s w_s(y)
// with w_s(y) = p(s|tau) exp(-|y-s|^2 / 2 sigma^2). Falls back to the
// nearest support state if every weight underflows.
Vec optimal_denoiser(const PosteriorExact& posterior, const Vec& y, double sigma);
Vec optimal_denoiser(const EnvSpec& spec, int agent, const Vec& tau, const Vec& y,
                     double sigma);

// d f*/dy of the mixture mean: the weight-weighted covariance of the
// support states divided by sigma^2 (symmetric PSD).
Mat optimal_denoiser_jacobian(const PosteriorExact& posterior, const Vec& y,
                              double sigma);

struct Dataset {
    int obs_dim = 0;
    int action_dim = 0;
    int state_dim = 0;
    int history_len = 1;
    int n_agents = 0;
    EnvSpec spec;
    std::vector<HistorySample> samples;

    int tau_dim() const {
        return history_len * (obs_dim + action_dim) - action_dim;
    }
};

// Rolls out `episodes` episodes of `steps_per_episode` observation steps
// under a uniform-random scan policy and emits, for every timestep with a
// complete history window, one sample per agent.
Dataset generate_dataset(const EnvSpec& spec, int episodes, int steps_per_episode,
                         int history_len, Rng& rng);

// Model conditioning vector: agent one-hot followed by tau. The denoiser
// is shared across agents, so the agent identity is part of the condition.
Vec conditioning_vector(const EnvSpec& spec, int agent, const Vec& tau);

// JSON Lines dataset files (header line then one record per line) and the
// EnvSpec JSON format.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);
std::string env_spec_to_json(const EnvSpec& spec);
EnvSpec env_spec_from_json(const std::string& json_text);
void save_env_spec(const EnvSpec& spec, const std::string& path);
EnvSpec load_env_spec(const std::string& path);

}  // namespace podiff
