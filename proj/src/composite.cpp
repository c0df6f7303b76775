#include "podiff/composite.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <json.hpp>
#include <numeric>
#include <sstream>

namespace podiff {

Vec composite_step(const DenoiserModel& model, const std::vector<Vec>& conds,
                   const Vec& y) {
    if (conds.empty()) throw std::invalid_argument("no conditionings given");
    Vec v = y;
    for (auto it = conds.rbegin(); it != conds.rend(); ++it)
        v = forward(model, *it, v);
    return v;
}

namespace {

CompositeRunReport run_chain(const std::vector<DenoiseMap>& maps,
                             const std::vector<int>& participant_ids,
                             const CompositeConfig& cfg, Rng& rng,
                             const std::optional<Vec>& truth) {
    if (maps.empty()) throw std::invalid_argument("no participating agents");
    if (maps.size() != participant_ids.size())
        throw std::invalid_argument("one participant id per map is required");
    const int n = static_cast<int>(maps.size());
    const int state_dim = maps[0].state_dim;

    CompositeRunReport report;
    report.state_dim = state_dim;
    report.hops_per_sample = cfg.hops > 0 ? cfg.hops : 6L * n;
    if (report.hops_per_sample < n)
        throw std::invalid_argument("hop budget shorter than one full cycle");
    if (cfg.d_phi <= 0.0) throw std::invalid_argument("d_phi must be positive");

    std::vector<int> order = cfg.agent_order;
    if (order.empty()) {
        order.resize(n);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
    }
    {
        std::vector<int> check = order;
        std::sort(check.begin(), check.end());
        for (int i = 0; i < n; ++i)
            if (check[i] != i)
                throw std::invalid_argument("agent_order is not a permutation");
    }
    report.agent_order = order;
    for (int idx : order) report.participants.push_back(participant_ids[idx]);

    // One full cycle equals composite_step over `order`, so the last agent
    // in the order acts on the first hop.
    std::vector<int> hop_seq(order.rbegin(), order.rend());

    std::normal_distribution<double> gauss(0.0, cfg.init_sigma);
    const long L = report.hops_per_sample;

    for (int k = 0; k < cfg.k2; ++k) {
        Rng sample_rng = make_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(k)));
        CompositeSample sample;
        sample.init = Vec(state_dim);
        for (int d = 0; d < state_dim; ++d) sample.init[d] = gauss(sample_rng);

        Vec y = sample.init;
        bool finite = true;
        for (long t = 0; t < L; ++t) {
            int map_idx = hop_seq[t % n];
            y = maps[map_idx].step(y, static_cast<int>(t));
            sample.trace.push_back(y);
            sample.hop_agents.push_back(participant_ids[map_idx]);
            if (!y.allFinite()) {
                finite = false;
                break;
            }
        }

        if (!finite) {
            sample.rejection_reason = "non-finite";
        } else {
            sample.estimate = y;

            // Stability at each of the last n points, under the history
            // that produced it.
            bool stable = true;
            for (long t = L - n; t < L && stable; ++t) {
                int map_idx = hop_seq[t % n];
                Mat jac = maps[map_idx].jacobian_y(sample.trace[t]);
                if (spectral_radius(jac) >= 1.0) stable = false;
            }
            if (!stable) {
                sample.rejection_reason = "eigenvalue";
            } else {
                // Every agent's individual flow from y(L) must converge
                // close by; non-convergence counts as a distance failure.
                bool close = true;
                for (int i = 0; i < n && close; ++i) {
                    FlowTrace t = run_flow(maps[i], y, cfg.flow);
                    if (!t.converged || (*t.attractor - y).norm() >= 2.0 * cfg.d_phi)
                        close = false;
                }
                if (!close)
                    sample.rejection_reason = "distance";
                else
                    sample.accepted = true;
            }
            if (truth) sample.error = (y - *truth).norm();
        }
        report.samples.push_back(std::move(sample));
    }

    long accepted = 0;
    double err_sum = 0.0, err_max = 0.0;
    long err_count = 0;
    for (const auto& s : report.samples) {
        if (s.accepted) {
            ++accepted;
            if (s.error) {
                err_sum += *s.error;
                err_max = std::max(err_max, *s.error);
                ++err_count;
            }
        } else {
            ++report.rejection_counts[s.rejection_reason];
        }
    }
    if (cfg.k2 > 0)
        report.acceptance_rate = static_cast<double>(accepted) / cfg.k2;
    if (err_count > 0) {
        report.mean_error = err_sum / static_cast<double>(err_count);
        report.max_error = err_max;
    }
    return report;
}

std::pair<std::vector<DenoiseMap>, std::vector<int>> model_maps(
    const DenoiserModel& model, const EnvSpec& spec,
    const std::vector<std::pair<int, Vec>>& histories) {
    std::vector<DenoiseMap> maps;
    std::vector<int> ids;
    for (const auto& [agent, tau] : histories) {
        maps.push_back(make_model_map(model, conditioning_vector(spec, agent, tau)));
        ids.push_back(agent);
    }
    return {std::move(maps), std::move(ids)};
}

}  // namespace

CompositeRunReport run_composite_maps(const std::vector<DenoiseMap>& maps,
                                      const std::vector<int>& participant_ids,
                                      const CompositeConfig& cfg, Rng& rng,
                                      const std::optional<Vec>& truth) {
    return run_chain(maps, participant_ids, cfg, rng, truth);
}

CompositeRunReport run_composite(const DenoiserModel& model, const EnvSpec& spec,
                                 const std::vector<std::pair<int, Vec>>& histories,
                                 const CompositeConfig& cfg, Rng& rng,
                                 const std::optional<Vec>& truth) {
    auto [maps, ids] = model_maps(model, spec, histories);
    return run_chain(maps, ids, cfg, rng, truth);
}

CompositeRunReport run_partial_composite(const DenoiserModel& model, const EnvSpec& spec,
                                         const std::vector<std::pair<int, Vec>>& subset,
                                         const CompositeConfig& cfg, Rng& rng,
                                         const std::optional<Vec>& truth) {
    auto [maps, ids] = model_maps(model, spec, subset);
    return run_chain(maps, ids, cfg, rng, truth);
}

double psnr(const std::vector<Vec>& estimates, const std::vector<Vec>& truths,
            double peak) {
    if (estimates.size() != truths.size() || estimates.empty())
        throw std::invalid_argument("estimate and truth lists must match and be nonempty");
    if (peak <= 0.0) throw std::invalid_argument("peak must be positive");
    double sq = 0.0;
    long count = 0;
    for (std::size_t i = 0; i < estimates.size(); ++i) {
        if (estimates[i].size() != truths[i].size())
            throw std::invalid_argument("dimension mismatch in pair " + std::to_string(i));
        sq += (estimates[i] - truths[i]).squaredNorm();
        count += estimates[i].size();
    }
    double mse = sq / static_cast<double>(count);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

Thm8Result thm8_check_maps(const std::vector<DenoiseMap>& maps,
                           const std::vector<int>& participant_ids, const Vec& truth,
                           const CompositeConfig& cfg, Rng& rng) {
    Thm8Result res;
    double dist_sum = 0.0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        FlowTrace t = run_flow(maps[i], truth, cfg.flow);
        if (!t.converged)
            throw std::runtime_error("agent " + std::to_string(participant_ids[i]) +
                                     "'s flow from the truth did not converge");
        dist_sum += (*t.attractor - truth).norm();
    }
    res.fixed_point_mean_distance = dist_sum / static_cast<double>(maps.size());

    CompositeRunReport report = run_chain(maps, participant_ids, cfg, rng, truth);
    double err_sum = 0.0;
    for (const auto& s : report.samples)
        if (s.accepted && s.error) {
            err_sum += *s.error;
            ++res.accepted;
        }
    if (res.accepted == 0) throw std::runtime_error("no composite sample was accepted");
    res.composite_mean_error = err_sum / static_cast<double>(res.accepted);
    return res;
}

Thm8Result thm8_check(const DenoiserModel& model, const EnvSpec& spec,
                      const std::vector<std::pair<int, Vec>>& histories,
                      const Vec& truth, const CompositeConfig& cfg, Rng& rng) {
    auto [maps, ids] = model_maps(model, spec, histories);
    return thm8_check_maps(maps, ids, truth, cfg, rng);
}

ChainStats chain_stats(const CompositeRunReport& report) {
    ChainStats stats;
    stats.hops = report.hops_per_sample;
    stats.messages = static_cast<long>(report.samples.size()) * report.hops_per_sample;
    stats.floats_per_message = report.state_dim;
    stats.total_payload = stats.messages * stats.floats_per_message;
    return stats;
}

namespace {

std::vector<double> to_std(const Vec& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace

std::string composite_report_json(const CompositeRunReport& report) {
    nlohmann::json j;
    j["agent_order"] = report.agent_order;
    j["participants"] = report.participants;
    j["hops_per_sample"] = report.hops_per_sample;
    j["acceptance_rate"] = report.acceptance_rate;
    if (report.mean_error) j["mean_error"] = *report.mean_error;
    if (report.max_error) j["max_error"] = *report.max_error;
    j["rejection_counts"] = report.rejection_counts;
    j["samples"] = nlohmann::json::array();
    for (const auto& s : report.samples) {
        nlohmann::json sj;
        sj["init"] = to_std(s.init);
        sj["accepted"] = s.accepted;
        if (!s.accepted) sj["rejection_reason"] = s.rejection_reason;
        if (s.estimate.size() > 0) sj["estimate"] = to_std(s.estimate);
        if (s.error) sj["error"] = *s.error;
        j["samples"].push_back(std::move(sj));
    }
    return j.dump(2) + "\n";
}

std::string composite_report_csv(const CompositeRunReport& report) {
    std::ostringstream out;
    out.precision(12);
    out << "sample,accepted,error,rejection_reason\n";
    for (std::size_t i = 0; i < report.samples.size(); ++i) {
        const auto& s = report.samples[i];
        out << i << "," << (s.accepted ? 1 : 0) << ",";
        if (s.error) out << *s.error;
        out << "," << s.rejection_reason << "\n";
    }
    return out.str();
}

std::string chain_log_json(const CompositeSample& sample) {
    std::ostringstream out;
    for (std::size_t t = 0; t < sample.trace.size(); ++t) {
        nlohmann::json j;
        j["hop"] = t + 1;
        j["from_agent"] = sample.hop_agents[t];
        j["to_agent"] = t + 1 < sample.trace.size() ? sample.hop_agents[t + 1] : -1;
        j["payload"] = to_std(sample.trace[t]);
        out << j.dump() << "\n";
    }
    return out.str();
}

}  // namespace podiff
