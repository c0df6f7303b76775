#include "podiff/flow.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <sstream>
#include <thread>

namespace podiff {

double SigmaSchedule::at(int iter) const {
    return std::max(sigma_min, sigma0 * std::pow(decay, iter));
}

DenoiseMap make_model_map(const DenoiserModel& model, const Vec& cond) {
    DenoiseMap map;
    map.state_dim = model.state_dim;
    map.step = [&model, cond](const Vec& y, int) { return forward(model, cond, y); };
    map.jacobian_y = [&model, cond](const Vec& y) { return jacobians(model, cond, y).jac_y; };
    return map;
}

DenoiseMap make_oracle_map(PosteriorExact posterior, SigmaSchedule schedule) {
    DenoiseMap map;
    map.state_dim = static_cast<int>(posterior.support.front().size());
    auto post = std::make_shared<PosteriorExact>(std::move(posterior));
    map.step = [post, schedule](const Vec& y, int iter) {
        return optimal_denoiser(*post, y, schedule.at(iter));
    };
    // Stability is judged in the settled regime of the schedule.
    map.jacobian_y = [post, schedule](const Vec& y) {
        return optimal_denoiser_jacobian(*post, y, schedule.sigma_min);
    };
    map.settled = [schedule](int iter) { return schedule.at(iter) == schedule.at(iter + 1); };
    return map;
}

std::function<Vec(Rng&)> make_init_sampler(const InitDist& dist, int dim,
                                           const PosteriorExact* posterior) {
    switch (dist.kind) {
        case InitKind::StandardNormal:
            return [dim](Rng& rng) {
                std::normal_distribution<double> g(0.0, 1.0);
                Vec y(dim);
                for (int d = 0; d < dim; ++d) y[d] = g(rng);
                return y;
            };
        case InitKind::UniformBox:
            return [dim, dist](Rng& rng) {
                std::uniform_real_distribution<double> u(dist.lo, dist.hi);
                Vec y(dim);
                for (int d = 0; d < dim; ++d) y[d] = u(rng);
                return y;
            };
        case InitKind::DataMarginal: {
            if (!posterior)
                throw std::invalid_argument(
                    "data-marginal initialization needs an exact posterior");
            PosteriorExact post = *posterior;
            return [post, dist](Rng& rng) {
                std::discrete_distribution<std::size_t> pick(post.probs.begin(),
                                                             post.probs.end());
                std::normal_distribution<double> g(0.0, dist.sigma);
                Vec y = post.support[pick(rng)];
                for (long d = 0; d < y.size(); ++d) y[d] += g(rng);
                return y;
            };
        }
    }
    throw std::logic_error("unreachable");
}

FlowTrace run_flow(const DenoiseMap& map, const Vec& y0, const FlowConfig& cfg) {
    if (cfg.max_iters < 1 || cfg.convergence_tol <= 0.0)
        throw std::invalid_argument("invalid flow configuration");
    FlowTrace trace;
    trace.points.push_back(y0);
    Vec y = y0;
    for (int l = 0; l < cfg.max_iters; ++l) {
        Vec next = map.step(y, l);
        trace.points.push_back(next);
        trace.iterations = l + 1;
        if (!next.allFinite()) {
            trace.diverged = true;
            return trace;
        }
        double delta = (next - y).norm();
        y = next;
        // An exact fixed point stands regardless of the schedule; an
        // approximate one only counts once the map is stationary.
        if (delta == 0.0 ||
            (delta < cfg.convergence_tol && (!map.settled || map.settled(l)))) {
            trace.converged = true;
            trace.attractor = y;
            return trace;
        }
    }
    return trace;
}

namespace {

struct Cluster {
    Vec center;
    long count = 0;
};

std::vector<Cluster> single_linkage(const std::vector<Vec>& pts, double radius) {
    long n = static_cast<long>(pts.size());
    std::vector<long> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    std::function<long(long)> find = [&](long x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    for (long i = 0; i < n; ++i)
        for (long j = i + 1; j < n; ++j)
            if ((pts[i] - pts[j]).norm() <= radius) parent[find(i)] = find(j);

    std::vector<Cluster> clusters;
    std::vector<long> root_to_cluster(n, -1);
    for (long i = 0; i < n; ++i) {
        long r = find(i);
        if (root_to_cluster[r] < 0) {
            root_to_cluster[r] = static_cast<long>(clusters.size());
            clusters.push_back({Vec::Zero(pts[i].size()), 0});
        }
        auto& c = clusters[root_to_cluster[r]];
        c.center += pts[i];
        ++c.count;
    }
    for (auto& c : clusters) c.center /= static_cast<double>(c.count);
    return clusters;
}

bool lex_less(const Vec& a, const Vec& b) {
    for (long d = 0; d < a.size(); ++d) {
        if (a[d] < b[d] - 1e-12) return true;
        if (a[d] > b[d] + 1e-12) return false;
    }
    return false;
}

}  // namespace

FixedPointSet find_fixed_points(const DenoiseMap& map, const FlowConfig& cfg, Rng& rng,
                                const PosteriorExact* posterior) {
    if (cfg.num_samples < 1) throw std::invalid_argument("num_samples must be >= 1");
    auto sample_init = make_init_sampler(cfg.init_dist, map.state_dim, posterior);

    // Draw every initial point from the caller's stream first so that the
    // thread count cannot change the result.
    std::vector<Vec> inits(static_cast<std::size_t>(cfg.num_samples));
    for (auto& y0 : inits) y0 = sample_init(rng);

    std::vector<std::optional<Vec>> endpoints(inits.size());
    auto worker = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            FlowTrace t = run_flow(map, inits[i], cfg);
            if (t.converged) endpoints[i] = *t.attractor;
        }
    };
    int threads = std::max(1, cfg.threads);
    if (threads == 1) {
        worker(0, inits.size());
    } else {
        std::vector<std::thread> pool;
        std::size_t chunk = (inits.size() + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            std::size_t b = std::min(inits.size(), t * chunk);
            std::size_t e = std::min(inits.size(), (t + 1) * chunk);
            if (b < e) pool.emplace_back(worker, b, e);
        }
        for (auto& th : pool) th.join();
    }

    std::vector<Vec> converged;
    for (const auto& ep : endpoints)
        if (ep) converged.push_back(*ep);

    FixedPointSet set;
    if (converged.empty()) {
        log_warn("no flow sample converged; returning an empty fixed point set");
        return set;
    }

    auto clusters = single_linkage(converged, cfg.merge_radius);
    std::sort(clusters.begin(), clusters.end(), [](const Cluster& a, const Cluster& b) {
        if (a.count != b.count) return a.count > b.count;
        return lex_less(a.center, b.center);
    });
    for (const auto& c : clusters) {
        double lam = spectral_radius(map.jacobian_y(c.center));
        set.points.push_back(c.center);
        set.lambda_max.push_back(lam);
        set.stability.push_back(lam < 1.0);
        set.basin_mass.push_back(static_cast<double>(c.count) /
                                 static_cast<double>(cfg.num_samples));
    }
    return set;
}

FixedPointSet estimate_posterior(const DenoiseMap& map, const FlowConfig& cfg, Rng& rng,
                                 const PosteriorExact* posterior) {
    FixedPointSet set = find_fixed_points(map, cfg, rng, posterior);
    double total = std::accumulate(set.basin_mass.begin(), set.basin_mass.end(), 0.0);
    if (total > 0.0)
        for (auto& m : set.basin_mass) m /= total;
    return set;
}

std::vector<Vec> intersect_fixed_points(const std::vector<FixedPointSet>& sets,
                                        double merge_radius) {
    if (sets.empty()) throw std::invalid_argument("need at least one fixed point set");
    std::vector<Vec> out;
    for (const auto& p : sets.front().points) {
        bool everywhere = true;
        for (std::size_t k = 1; k < sets.size() && everywhere; ++k) {
            bool found = false;
            for (const auto& q : sets[k].points)
                if ((p - q).norm() <= merge_radius) {
                    found = true;
                    break;
                }
            everywhere = found;
        }
        if (everywhere) out.push_back(p);
    }
    return out;
}

std::vector<VectorFieldRow> vector_field(const DenoiseMap& map,
                                         const VectorFieldGrid& grid) {
    for (int d : grid.dims)
        if (d < 0 || d >= map.state_dim)
            throw std::invalid_argument("grid dimension out of range");
    std::vector<VectorFieldRow> rows;
    if (grid.resolution <= 0 || grid.dims.empty()) return rows;

    Vec base = grid.fixed_coords.size() == map.state_dim
                   ? grid.fixed_coords
                   : Vec::Zero(map.state_dim);
    long total = 1;
    for (std::size_t k = 0; k < grid.dims.size(); ++k) total *= grid.resolution;
    for (long idx = 0; idx < total; ++idx) {
        Vec y = base;
        long rem = idx;
        for (int d : grid.dims) {
            long step = rem % grid.resolution;
            rem /= grid.resolution;
            y[d] = grid.resolution == 1
                       ? grid.lo
                       : grid.lo + (grid.hi - grid.lo) * static_cast<double>(step) /
                             static_cast<double>(grid.resolution - 1);
        }
        rows.push_back({y, map.step(y, 0)});
    }
    return rows;
}

std::string vector_field_csv(const std::vector<VectorFieldRow>& rows, int state_dim) {
    std::ostringstream out;
    out.precision(12);
    for (int d = 0; d < state_dim; ++d) out << "y_in_" << d << ",";
    for (int d = 0; d < state_dim; ++d)
        out << "y_out_" << d << (d + 1 < state_dim ? "," : "\n");
    for (const auto& row : rows) {
        for (long d = 0; d < row.y_in.size(); ++d) out << row.y_in[d] << ",";
        for (long d = 0; d < row.y_out.size(); ++d)
            out << row.y_out[d] << (d + 1 < row.y_out.size() ? "," : "\n");
    }
    return out.str();
}

std::string fixed_point_set_json(const FixedPointSet& set, const Vec& tau) {
    nlohmann::json j;
    j["tau"] = std::vector<double>(tau.data(), tau.data() + tau.size());
    j["points"] = nlohmann::json::array();
    for (const auto& p : set.points)
        j["points"].push_back(std::vector<double>(p.data(), p.data() + p.size()));
    j["stability"] = set.stability;
    j["basin_mass"] = set.basin_mass;
    j["lambda_max"] = set.lambda_max;
    return j.dump(2) + "\n";
}

}  // namespace podiff
