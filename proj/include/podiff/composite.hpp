#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "podiff/denoiser.hpp"
#include "podiff/env.hpp"
#include "podiff/flow.hpp"

namespace podiff {

struct CompositeConfig {
    std::vector<int> agent_order;  // permutation of history indices; empty = random
    int k2 = 100;                  // initial noise samples
    int hops = 0;                  // total single-agent applications L; 0 = 6n
    double d_phi = 0.1;            // deviation budget for the distance check
    double init_sigma = 1.0;
    FlowConfig flow;  // step-2 per-agent convergence runs
    std::uint64_t seed = 0;
};

struct CompositeSample {
    Vec init;
    std::vector<Vec> trace;       // y(1) .. y(L)
    std::vector<int> hop_agents;  // agent conditioning each hop
    bool accepted = false;
    std::string rejection_reason;  // "eigenvalue", "distance" or "non-finite"
    Vec estimate;                  // y(L), when finite
    std::optional<double> error;   // to the supplied truth
};

struct CompositeRunReport {
    std::vector<CompositeSample> samples;
    std::vector<int> agent_order;  // resolved permutation (history indices)
    std::vector<int> participants;  // agent ids, in order
    int state_dim = 0;
    long hops_per_sample = 0;
    double acceptance_rate = 0.0;
    std::optional<double> mean_error;  // over accepted samples
    std::optional<double> max_error;
    std::map<std::string, long> rejection_counts;
};

struct ChainStats {
    long hops = 0;
    long messages = 0;  // k2 * hops
    int floats_per_message = 0;
    long total_payload = 0;  // floats
};

// One cycle of the composite map: f(c[0], f(c[1], ... f(c[last], y))),
// i.e. the last listed conditioning is applied first.
Vec composite_step(const DenoiserModel& model, const std::vector<Vec>& conds,
                   const Vec& y);

// Two-step composite diffusion. Step 1: for each of k2 draws from
// N(0, init_sigma^2 I), apply `hops` single-agent denoising applications
// cycling the permutation. Step 2: accept iff the Jacobian spectral
// radius at each of the last n points (under the history that produced
// it) is < 1, and every agent's individual flow from y(L) converges with
// displacement < 2 d_phi. The map-based variant takes one denoise map
// per participating agent (trained model or analytic oracle);
// participant_ids are the agent ids used in reports.
CompositeRunReport run_composite_maps(const std::vector<DenoiseMap>& maps,
                                      const std::vector<int>& participant_ids,
                                      const CompositeConfig& cfg, Rng& rng,
                                      const std::optional<Vec>& truth = std::nullopt);

CompositeRunReport run_composite(const DenoiserModel& model, const EnvSpec& spec,
                                 const std::vector<std::pair<int, Vec>>& histories,
                                 const CompositeConfig& cfg, Rng& rng,
                                 const std::optional<Vec>& truth = std::nullopt);

// Identical mechanics restricted to a subset of agents.
CompositeRunReport run_partial_composite(const DenoiserModel& model, const EnvSpec& spec,
                                         const std::vector<std::pair<int, Vec>>& subset,
                                         const CompositeConfig& cfg, Rng& rng,
                                         const std::optional<Vec>& truth = std::nullopt);

// 10 log10(peak^2 / MSE) with the MSE over all components of all pairs;
// +infinity on an exact match.
double psnr(const std::vector<Vec>& estimates, const std::vector<Vec>& truths,
            double peak);

struct Thm8Result {
    double composite_mean_error = 0.0;     // over accepted samples
    double fixed_point_mean_distance = 0.0;  // mean |y_i* - s| over agents
    long accepted = 0;
};

// Mean accepted composite error against the average per-agent attractor
// distance from the truth.
Thm8Result thm8_check_maps(const std::vector<DenoiseMap>& maps,
                           const std::vector<int>& participant_ids, const Vec& truth,
                           const CompositeConfig& cfg, Rng& rng);

Thm8Result thm8_check(const DenoiserModel& model, const EnvSpec& spec,
                      const std::vector<std::pair<int, Vec>>& histories,
                      const Vec& truth, const CompositeConfig& cfg, Rng& rng);

ChainStats chain_stats(const CompositeRunReport& report);

std::string composite_report_json(const CompositeRunReport& report);
std::string composite_report_csv(const CompositeRunReport& report);

// Simulation log for one sample's communication chain: one message per
// hop, {hop, from_agent, to_agent, payload}.
std::string chain_log_json(const CompositeSample& sample);

}  // namespace podiff
