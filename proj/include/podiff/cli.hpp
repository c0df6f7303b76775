#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace podiff {

// One JSON config schema shared by every subcommand; command-line flags
// override config fields, config fields override defaults. Unknown keys
// are rejected with the offending field path.
struct RunConfig {
    std::uint64_t seed = 0;
    int threads = 1;

    struct Env {
        std::string preset = "co-2x2";  // co-2x2 | nonco-2x2 | grid
        int rows = 3;
        int cols = 3;
        int targets = 1;
        std::vector<int> failure_areas;
        double failure_prob = 0.0;
    } env;

    struct Data {
        int episodes = 100;
        int steps = 8;
        int history_len = 1;
    } data;

    struct Train {
        int hidden_width = 1024;
        int hidden_layers = 6;
        int epochs = 1000;
        int batch_size = 512;
        double noise_sigma_low = 0.0;
        double noise_sigma_high = 1.0;
        double learning_rate = 1e-4;
    } train;

    struct Flow {
        int max_iters = 200;
        double convergence_tol = 1e-5;
        double merge_radius = 0.05;
        std::string init = "standard-normal";  // standard-normal | uniform-box | data-marginal
        double init_lo = -0.5;
        double init_hi = 1.5;
        double init_sigma = 1.0;
        int num_samples = 1000;
    } flow;

    struct Analysis {
        double rank_tol = 1e-3;
        std::vector<double> epsilons;
    } analysis;

    struct Composite {
        int k2 = 100;
        int hops = 0;  // 0 = six hops per participating agent
        double d_phi = 0.1;
        double init_sigma = 1.0;
        std::vector<int> agent_order;
    } composite;

    struct Paths {
        std::string env_spec;
        std::string dataset;
        std::string model;
        std::string out_dir = ".";
    } paths;
};

RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& json_text);

// Dispatches argv (without the program name) to one of: gen-env,
// gen-data, train, flow, fixed-points, intersect, field, study,
// composite, eval. Returns the process exit code; 2 on usage errors.
int run_command(const std::vector<std::string>& argv);

}  // namespace podiff
