#include "podiff/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <json.hpp>
#include <numeric>
#include <sstream>

namespace podiff {

using nlohmann::json;

long EnvSpec::num_states() const {
    long n = 1;
    for (int k = 0; k < num_targets; ++k) {
        if (n > std::numeric_limits<long>::max() / num_areas)
            throw CapacityError("state space size overflows");
        n *= num_areas;
    }
    return n;
}

int EnvSpec::obs_dim() const {
    std::size_t m = 0;
    for (const auto& c : coverage) m = std::max(m, c.size());
    return static_cast<int>(m);
}

int EnvSpec::action_dim() const { return obs_dim(); }

void EnvSpec::validate() const {
    if (grid_rows <= 0 || grid_cols <= 0)
        throw std::invalid_argument("grid dimensions must be positive");
    if (num_areas <= 0 || num_targets <= 0)
        throw std::invalid_argument("num_areas and num_targets must be positive");
    if (static_cast<int>(coverage.size()) != n_agents())
        throw std::invalid_argument("coverage must list every agent");
    for (const auto& areas : coverage)
        for (int a : areas)
            if (a < 0 || a >= num_areas)
                throw std::invalid_argument("coverage area index out of range");
    for (int a : failure_areas)
        if (a < 0 || a >= num_areas)
            throw std::invalid_argument("failure area index out of range");
    if (failure_prob < 0.0 || failure_prob > 1.0)
        throw std::invalid_argument("failure_prob must lie in [0,1]");
    if (!prior.empty()) {
        if (static_cast<long>(prior.size()) != num_states())
            throw std::invalid_argument("prior length must equal the state count");
        double sum = std::accumulate(prior.begin(), prior.end(), 0.0);
        if (std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("prior must sum to 1");
    }
}

std::vector<std::vector<int>> EnvSpec::area_neighbors() const {
    // Pick an area grid: the agent grid if the counts match, otherwise the
    // closest-to-square factorization of num_areas.
    int rows = grid_rows, cols = grid_cols;
    if (rows * cols != num_areas) {
        rows = 1;
        for (int r = 1; r * r <= num_areas; ++r)
            if (num_areas % r == 0) rows = r;
        cols = num_areas / rows;
    }
    std::vector<std::vector<int>> nb(num_areas);
    for (int a = 0; a < num_areas; ++a) {
        int r = a / cols, c = a % cols;
        nb[a].push_back(a);
        if (r > 0) nb[a].push_back(a - cols);
        if (r + 1 < rows) nb[a].push_back(a + cols);
        if (c > 0) nb[a].push_back(a - 1);
        if (c + 1 < cols) nb[a].push_back(a + 1);
        std::sort(nb[a].begin(), nb[a].end());
    }
    return nb;
}

EnvSpec make_co_2x2() {
    EnvSpec spec;
    spec.grid_rows = 2;
    spec.grid_cols = 2;
    spec.num_areas = 4;
    spec.num_targets = 1;
    spec.coverage = {{0, 3}, {0, 3}, {1, 2}, {1, 2}};
    spec.failure_prob = 0.0;
    spec.validate();
    return spec;
}

EnvSpec make_nonco_2x2() {
    EnvSpec spec = make_co_2x2();
    spec.failure_areas = {0, 1};
    spec.failure_prob = 0.5;
    spec.validate();
    return spec;
}

EnvSpec make_sensor_grid(int rows, int cols, int num_targets) {
    EnvSpec spec;
    spec.grid_rows = rows;
    spec.grid_cols = cols;
    spec.num_areas = rows * cols;
    spec.num_targets = num_targets;
    spec.coverage.resize(spec.n_agents());
    for (int a = 0; a < spec.num_areas; ++a) {
        int r = a / cols, c = a % cols;
        auto& cov = spec.coverage[a];
        cov.push_back(a);
        if (r > 0) cov.push_back(a - cols);
        if (r + 1 < rows) cov.push_back(a + cols);
        if (c > 0) cov.push_back(a - 1);
        if (c + 1 < cols) cov.push_back(a + 1);
        std::sort(cov.begin(), cov.end());
    }
    spec.validate();
    return spec;
}

Vec EnvState::encode(const EnvSpec& spec) const {
    Vec s = Vec::Zero(spec.state_dim());
    for (int k = 0; k < spec.num_targets; ++k)
        s[k * spec.num_areas + target_areas.at(k)] = 1.0;
    return s;
}

EnvState EnvState::decode(const EnvSpec& spec, const Vec& s) {
    if (s.size() != spec.state_dim())
        throw std::invalid_argument("state vector has wrong dimension");
    EnvState st;
    for (int k = 0; k < spec.num_targets; ++k) {
        int area = -1;
        for (int a = 0; a < spec.num_areas; ++a) {
            double v = s[k * spec.num_areas + a];
            if (std::abs(v - 1.0) < 1e-9) {
                if (area >= 0) throw std::invalid_argument("one-hot block has two ones");
                area = a;
            } else if (std::abs(v) > 1e-9) {
                throw std::invalid_argument("state entry is neither 0 nor 1");
            }
        }
        if (area < 0) throw std::invalid_argument("one-hot block has no one");
        st.target_areas.push_back(area);
    }
    return st;
}

long EnvState::index(const EnvSpec& spec) const {
    long id = 0;
    for (int k = spec.num_targets - 1; k >= 0; --k)
        id = id * spec.num_areas + target_areas.at(k);
    return id;
}

EnvState EnvState::from_index(const EnvSpec& spec, long id) {
    EnvState st;
    for (int k = 0; k < spec.num_targets; ++k) {
        st.target_areas.push_back(static_cast<int>(id % spec.num_areas));
        id /= spec.num_areas;
    }
    return st;
}

int PosteriorExact::nearest(const Vec& y) const {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < support.size(); ++i) {
        double d = (support[i] - y).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(i);
        }
    }
    return best;
}

namespace {

bool area_occupied(const EnvState& state, int area) {
    return std::find(state.target_areas.begin(), state.target_areas.end(), area) !=
           state.target_areas.end();
}

// Likelihood of one agent's observation vector given the true state.
double obs_likelihood(const EnvSpec& spec, const EnvState& state, int agent,
                      const Vec& obs) {
    const auto& cov = spec.coverage[agent];
    double lik = 1.0;
    for (int j = 0; j < spec.obs_dim(); ++j) {
        bool bit = obs[j] > 0.5;
        if (j >= static_cast<int>(cov.size())) {
            if (bit) return 0.0;  // padded slot
            continue;
        }
        int area = cov[j];
        bool present = area_occupied(state, area);
        bool can_fail = spec.failure_areas.count(area) > 0;
        if (present) {
            if (can_fail)
                lik *= bit ? (1.0 - spec.failure_prob) : spec.failure_prob;
            else if (!bit)
                return 0.0;
        } else if (bit) {
            return 0.0;  // no false positives
        }
    }
    return lik;
}

std::vector<double> initial_prior(const EnvSpec& spec) {
    long n = spec.num_states();
    if (!spec.prior.empty()) return spec.prior;
    return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

// One motion step of the joint-state distribution, applied target by
// target (the kernel factorizes over independent targets).
void apply_motion(const EnvSpec& spec, std::vector<double>& alpha) {
    auto nb = spec.area_neighbors();
    long n = static_cast<long>(alpha.size());
    long stride = 1;
    for (int k = 0; k < spec.num_targets; ++k) {
        std::vector<double> next(n, 0.0);
        for (long s = 0; s < n; ++s) {
            if (alpha[s] == 0.0) continue;
            int area = static_cast<int>((s / stride) % spec.num_areas);
            double share = alpha[s] / static_cast<double>(nb[area].size());
            long base = s - static_cast<long>(area) * stride;
            for (int a2 : nb[area]) next[base + static_cast<long>(a2) * stride] += share;
        }
        alpha.swap(next);
        stride *= spec.num_areas;
    }
}

}  // namespace

Vec observe(const EnvSpec& spec, const EnvState& state, int agent, Rng& rng) {
    const auto& cov = spec.coverage[agent];
    Vec obs = Vec::Zero(spec.obs_dim());
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t j = 0; j < cov.size(); ++j) {
        int area = cov[j];
        if (!area_occupied(state, area)) continue;
        if (spec.failure_areas.count(area) > 0) {
            if (unif(rng) < 1.0 - spec.failure_prob) obs[static_cast<int>(j)] = 1.0;
        } else {
            obs[static_cast<int>(j)] = 1.0;
        }
    }
    return obs;
}

StepResult step(const EnvSpec& spec, const EnvState& state,
                const std::vector<int>& joint_action, Rng& rng) {
    spec.validate();
    if (static_cast<int>(joint_action.size()) != spec.n_agents())
        throw InvalidActionError("joint action must list every agent");
    for (int i = 0; i < spec.n_agents(); ++i) {
        int a = joint_action[i];
        if (a == -1) continue;  // no-op
        const auto& cov = spec.coverage[i];
        if (std::find(cov.begin(), cov.end(), a) == cov.end())
            throw InvalidActionError("agent " + std::to_string(i) +
                                     " cannot scan area " + std::to_string(a));
    }

    StepResult res;
    for (int i = 0; i < spec.n_agents(); ++i)
        res.joint_obs.push_back(observe(spec, state, i, rng));

    // +1 per target scanned by at least two agents.
    for (int area : state.target_areas) {
        int scanners = 0;
        for (int a : joint_action)
            if (a == area) ++scanners;
        if (scanners >= 2) res.reward += 1.0;
    }

    auto nb = spec.area_neighbors();
    res.next_state = state;
    for (auto& area : res.next_state.target_areas) {
        std::uniform_int_distribution<std::size_t> pick(0, nb[area].size() - 1);
        area = nb[area][pick(rng)];
    }
    return res;
}

PosteriorExact exact_posterior(const EnvSpec& spec,
                               const std::vector<std::pair<int, Vec>>& histories,
                               long enumeration_cap) {
    spec.validate();
    long n = spec.num_states();
    if (n > enumeration_cap)
        throw CapacityError("state space of size " + std::to_string(n) +
                            " exceeds the enumeration cap");
    if (histories.empty()) throw std::invalid_argument("no histories given");

    int od = spec.obs_dim(), ad = spec.action_dim();
    long tau_len = histories.front().second.size();
    long T = (tau_len + ad) / (od + ad);
    if (T * (od + ad) - ad != tau_len)
        throw std::invalid_argument("tau length does not match obs/action dims");
    for (const auto& [agent, tau] : histories) {
        if (agent < 0 || agent >= spec.n_agents())
            throw std::invalid_argument("agent index out of range");
        if (tau.size() != tau_len)
            throw std::invalid_argument("histories must share one length");
    }

    std::vector<double> alpha = initial_prior(spec);
    for (long t = 0; t < T; ++t) {
        if (t > 0) apply_motion(spec, alpha);
        for (const auto& [agent, tau] : histories) {
            Vec obs = tau.segment(t * (od + ad), od);
            for (long s = 0; s < n; ++s) {
                if (alpha[s] == 0.0) continue;
                alpha[s] *= obs_likelihood(spec, EnvState::from_index(spec, s), agent, obs);
            }
        }
    }

    double total = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    if (total <= 0.0)
        throw std::invalid_argument("history has zero likelihood under the model");

    PosteriorExact post;
    for (long s = 0; s < n; ++s) {
        double p = alpha[s] / total;
        if (p > 1e-15) {
            post.support.push_back(EnvState::from_index(spec, s).encode(spec));
            post.probs.push_back(p);
        }
    }
    return post;
}

Vec optimal_denoiser(const PosteriorExact& posterior, const Vec& y, double sigma) {
    if (sigma <= 0.0) throw std::invalid_argument("sigma must be positive");
    std::size_t m = posterior.support.size();
    if (m == 0) throw std::invalid_argument("empty posterior");

    std::vector<double> lw(m);
    double lw_max = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
        lw[i] = std::log(posterior.probs[i]) -
                (y - posterior.support[i]).squaredNorm() / (2.0 * sigma * sigma);
        lw_max = std::max(lw_max, lw[i]);
    }
    if (!std::isfinite(lw_max)) return posterior.support[posterior.nearest(y)];

    Vec num = Vec::Zero(y.size());
    double den = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double w = std::exp(lw[i] - lw_max);
        num += w * posterior.support[i];
        den += w;
    }
    if (den <= 0.0 || !std::isfinite(den))
        return posterior.support[posterior.nearest(y)];
    return num / den;
}

Vec optimal_denoiser(const EnvSpec& spec, int agent, const Vec& tau, const Vec& y,
                     double sigma) {
    return optimal_denoiser(exact_posterior(spec, {{agent, tau}}), y, sigma);
}

Mat optimal_denoiser_jacobian(const PosteriorExact& posterior, const Vec& y,
                              double sigma) {
    std::size_t m = posterior.support.size();
    std::vector<double> lw(m);
    double lw_max = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
        lw[i] = std::log(posterior.probs[i]) -
                (y - posterior.support[i]).squaredNorm() / (2.0 * sigma * sigma);
        lw_max = std::max(lw_max, lw[i]);
    }
    Vec mean = Vec::Zero(y.size());
    Mat second = Mat::Zero(y.size(), y.size());
    double den = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double w = std::exp(lw[i] - lw_max);
        mean += w * posterior.support[i];
        second += w * posterior.support[i] * posterior.support[i].transpose();
        den += w;
    }
    if (den <= 0.0 || !std::isfinite(den)) return Mat::Zero(y.size(), y.size());
    mean /= den;
    second /= den;
    return (second - mean * mean.transpose()) / (sigma * sigma);
}

Dataset generate_dataset(const EnvSpec& spec, int episodes, int steps_per_episode,
                         int history_len, Rng& rng) {
    spec.validate();
    if (episodes < 0) throw std::invalid_argument("episodes must be nonnegative");
    if (history_len < 1) throw std::invalid_argument("history_len must be >= 1");
    if (steps_per_episode < history_len)
        throw std::invalid_argument("steps_per_episode shorter than history_len");

    Dataset ds;
    ds.obs_dim = spec.obs_dim();
    ds.action_dim = spec.action_dim();
    ds.state_dim = spec.state_dim();
    ds.history_len = history_len;
    ds.n_agents = spec.n_agents();
    ds.spec = spec;

    int n = spec.n_agents(), od = ds.obs_dim, ad = ds.action_dim;
    int block = od + ad;
    std::vector<double> prior = initial_prior(spec);
    std::discrete_distribution<long> draw_state(prior.begin(), prior.end());

    for (int ep = 0; ep < episodes; ++ep) {
        EnvState state = EnvState::from_index(spec, draw_state(rng));
        // Rolling (obs, action) buffer per agent; actions stored as
        // one-hot over the agent's coverage slots.
        std::vector<std::vector<Vec>> obs_hist(n), act_hist(n);

        for (int t = 0; t < steps_per_episode; ++t) {
            for (int i = 0; i < n; ++i) obs_hist[i].push_back(observe(spec, state, i, rng));

            if (t + 1 >= history_len) {
                int start = t + 1 - history_len;
                for (int i = 0; i < n; ++i) {
                    Vec tau = Vec::Zero(history_len * block - ad);
                    for (int h = 0; h < history_len; ++h) {
                        tau.segment(h * block, od) = obs_hist[i][start + h];
                        if (h + 1 < history_len)
                            tau.segment(h * block + od, ad) = act_hist[i][start + h];
                    }
                    ds.samples.push_back({i, tau, state.encode(spec)});
                }
            }

            if (t + 1 < steps_per_episode) {
                std::vector<int> joint_action(n);
                for (int i = 0; i < n; ++i) {
                    const auto& cov = spec.coverage[i];
                    std::uniform_int_distribution<std::size_t> pick(0, cov.size() - 1);
                    std::size_t slot = pick(rng);
                    joint_action[i] = cov[slot];
                    Vec a = Vec::Zero(ad);
                    a[static_cast<int>(slot)] = 1.0;
                    act_hist[i].push_back(a);
                }
                // Observations were already drawn above; re-draw only the motion.
                auto nb = spec.area_neighbors();
                for (auto& area : state.target_areas) {
                    std::uniform_int_distribution<std::size_t> pick(0, nb[area].size() - 1);
                    area = nb[area][pick(rng)];
                }
            }
        }
    }
    return ds;
}

Vec conditioning_vector(const EnvSpec& spec, int agent, const Vec& tau) {
    if (agent < 0 || agent >= spec.n_agents())
        throw std::invalid_argument("agent index out of range");
    Vec c = Vec::Zero(spec.n_agents() + tau.size());
    c[agent] = 1.0;
    c.tail(tau.size()) = tau;
    return c;
}

namespace {

json env_spec_to_json_obj(const EnvSpec& spec) {
    json j;
    j["grid_rows"] = spec.grid_rows;
    j["grid_cols"] = spec.grid_cols;
    j["num_areas"] = spec.num_areas;
    j["num_targets"] = spec.num_targets;
    j["coverage"] = spec.coverage;
    j["failure_areas"] = std::vector<int>(spec.failure_areas.begin(), spec.failure_areas.end());
    j["failure_prob"] = spec.failure_prob;
    if (!spec.prior.empty()) j["prior"] = spec.prior;
    j["seed"] = spec.seed;
    return j;
}

EnvSpec env_spec_from_json_obj(const json& j) {
    EnvSpec spec;
    spec.grid_rows = j.at("grid_rows").get<int>();
    spec.grid_cols = j.at("grid_cols").get<int>();
    spec.num_areas = j.at("num_areas").get<int>();
    spec.num_targets = j.at("num_targets").get<int>();
    spec.coverage = j.at("coverage").get<std::vector<std::vector<int>>>();
    auto fa = j.value("failure_areas", std::vector<int>{});
    spec.failure_areas = std::set<int>(fa.begin(), fa.end());
    spec.failure_prob = j.value("failure_prob", 0.0);
    spec.prior = j.value("prior", std::vector<double>{});
    spec.seed = j.value("seed", std::uint64_t{0});
    spec.validate();
    return spec;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ostringstream out;
    out.precision(12);
    json header;
    header["version"] = 1;
    header["obs_dim"] = ds.obs_dim;
    header["action_dim"] = ds.action_dim;
    header["state_dim"] = ds.state_dim;
    header["history_len"] = ds.history_len;
    header["n_agents"] = ds.n_agents;
    header["env_spec"] = env_spec_to_json_obj(ds.spec);
    out << header.dump() << "\n";
    for (const auto& rec : ds.samples) {
        json j;
        j["agent"] = rec.agent;
        j["tau"] = std::vector<double>(rec.tau.data(), rec.tau.data() + rec.tau.size());
        j["s"] = std::vector<double>(rec.state.data(), rec.state.data() + rec.state.size());
        out << j.dump() << "\n";
    }
    atomic_write_file(path, out.str());
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("dataset file has no header");
    json header = json::parse(line);
    Dataset ds;
    if (header.at("version").get<int>() != 1)
        throw std::runtime_error("unsupported dataset version");
    ds.obs_dim = header.at("obs_dim").get<int>();
    ds.action_dim = header.at("action_dim").get<int>();
    ds.state_dim = header.at("state_dim").get<int>();
    ds.history_len = header.at("history_len").get<int>();
    ds.n_agents = header.at("n_agents").get<int>();
    ds.spec = env_spec_from_json_obj(header.at("env_spec"));
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        HistorySample rec;
        rec.agent = j.at("agent").get<int>();
        auto tau = j.at("tau").get<std::vector<double>>();
        auto s = j.at("s").get<std::vector<double>>();
        rec.tau = Eigen::Map<const Vec>(tau.data(), static_cast<long>(tau.size()));
        rec.state = Eigen::Map<const Vec>(s.data(), static_cast<long>(s.size()));
        ds.samples.push_back(std::move(rec));
    }
    return ds;
}

std::string env_spec_to_json(const EnvSpec& spec) {
    return env_spec_to_json_obj(spec).dump(2) + "\n";
}

EnvSpec env_spec_from_json(const std::string& json_text) {
    return env_spec_from_json_obj(json::parse(json_text));
}

void save_env_spec(const EnvSpec& spec, const std::string& path) {
    atomic_write_file(path, env_spec_to_json(spec));
}

EnvSpec load_env_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open env spec file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return env_spec_from_json(ss.str());
}

}  // namespace podiff
