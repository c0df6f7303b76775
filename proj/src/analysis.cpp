#include "podiff/analysis.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace podiff {

DeviationRecord deviation(const DenoiserModel& model, const Vec& cond, const Vec& s,
                          const FlowConfig& flow_cfg) {
    DenoiseMap map = make_model_map(model, cond);
    FlowTrace trace = run_flow(map, s, flow_cfg);
    if (!trace.converged)
        throw std::runtime_error("flow from the state did not converge after " +
                                 std::to_string(trace.iterations) + " iterations");
    DeviationRecord rec;
    rec.cond = cond;
    rec.state = s;
    rec.attractor = *trace.attractor;
    rec.deviation = (s - rec.attractor).norm();
    JacobianReport jac = jacobians(model, cond, rec.attractor);
    rec.lambda_max_abs = jac.lambda_max_abs;
    rec.jac_plus_rank = jac.jac_plus ? numerical_rank(*jac.jac_plus) : 0;
    return rec;
}

int numerical_rank(const Mat& m, double rel_tol) {
    if (!m.allFinite()) throw std::invalid_argument("matrix has non-finite entries");
    if (m.size() == 0) return 0;
    Eigen::JacobiSVD<Mat> svd(m);
    const auto& sv = svd.singularValues();
    double smax = sv(0);
    if (smax <= 0.0) return 0;
    int rank = 0;
    for (long i = 0; i < sv.size(); ++i)
        if (sv(i) > rel_tol * smax) ++rank;
    return rank;
}

Vec predict_shift(const DenoiserModel& model, const Vec& cond, const Vec& y_star,
                  const Vec& delta_tau) {
    JacobianReport jac = jacobians(model, cond, y_star);
    if (!jac.jac_plus)
        throw std::runtime_error("I - jac_y is singular (condition number " +
                                 std::to_string(jac.condition_number) + ")");
    return *jac.jac_plus * delta_tau;
}

Cor1Shift cor1_shift(const DenoiserModel& model, const Vec& cond, const Vec& y_star,
                     const Vec& delta_tau) {
    JacobianReport jac = jacobians(model, cond, y_star);
    Cor1Shift out;

    // Eigendecomposition of the symmetric part; exact when jac_y is
    // symmetric as the corollary assumes.
    Mat sym = 0.5 * (jac.jac_y + jac.jac_y.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> es(sym);
    Vec lam = es.eigenvalues();
    for (long i = 0; i < lam.size(); ++i)
        if (std::abs(1.0 - lam[i]) < 1e-12) return out;  // (I - L) not invertible

    Mat wy_pinv = model.w_y.completeOrthogonalDecomposition().pseudoInverse();
    Vec middle = wy_pinv * (model.w_tau * delta_tau);
    Vec coeffs = es.eigenvectors().transpose() * middle;
    for (long i = 0; i < lam.size(); ++i) coeffs[i] *= lam[i] / (1.0 - lam[i]);
    out.shift = es.eigenvectors() * coeffs;

    if (jac.jac_plus) out.discrepancy = (*out.shift - *jac.jac_plus * delta_tau).norm();
    return out;
}

std::vector<FixedPointEntry> fixed_point_table(const DenoiserModel& model,
                                               const Dataset& dataset,
                                               const FlowConfig& flow_cfg) {
    std::vector<FixedPointEntry> entries;
    std::unordered_map<std::string, bool> seen;
    DenoiseMap map;
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const auto& rec = dataset.samples[i];
        std::string key(reinterpret_cast<const char*>(&rec.agent), sizeof(rec.agent));
        key.append(reinterpret_cast<const char*>(rec.tau.data()),
                   sizeof(double) * rec.tau.size());
        key.append(reinterpret_cast<const char*>(rec.state.data()),
                   sizeof(double) * rec.state.size());
        if (!seen.emplace(key, true).second) continue;

        FixedPointEntry e;
        e.sample_index = static_cast<int>(i);
        e.cond = conditioning_vector(dataset.spec, rec.agent, rec.tau);
        e.state = rec.state;
        map = make_model_map(model, e.cond);
        FlowTrace trace = run_flow(map, e.state, flow_cfg);
        e.converged = trace.converged;
        if (trace.converged) {
            e.attractor = *trace.attractor;
            e.deviation = (e.state - e.attractor).norm();
            JacobianReport jac = jacobians(model, e.cond, e.attractor);
            e.jac_y = jac.jac_y;
            e.lambda_max_abs = jac.lambda_max_abs;
            e.jac_plus_rank = jac.jac_plus ? numerical_rank(*jac.jac_plus) : 0;
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

LocalDataset build_local_dataset(const std::vector<FixedPointEntry>& entries,
                                 int anchor, double epsilon, double rank_tol) {
    if (anchor < 0 || anchor >= static_cast<int>(entries.size()))
        throw std::invalid_argument("anchor index out of range");
    const auto& a = entries[anchor];
    if (!a.converged) throw std::runtime_error("anchor flow did not converge");

    LocalDataset local;
    local.anchor = anchor;
    local.epsilon = epsilon;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (!e.converged) continue;
        double dist = (e.jac_y - a.jac_y).norm();  // Frobenius
        if (dist <= epsilon)
            local.members.push_back(static_cast<int>(i));
        else
            local.excludes_any = true;
    }
    Mat stacked(a.state.size(), static_cast<long>(local.members.size()));
    for (std::size_t i = 0; i < local.members.size(); ++i)
        stacked.col(static_cast<long>(i)) = entries[local.members[i]].state;
    local.r = numerical_rank(stacked, rank_tol);
    return local;
}

SurrogateResidualReport surrogate_residual(const std::vector<std::pair<Vec, Vec>>& samples) {
    if (samples.size() < 2)
        throw std::invalid_argument("surrogate regression needs at least 2 samples");
    long n = static_cast<long>(samples.size());
    long td = samples.front().first.size();
    long sd = samples.front().second.size();

    Vec mean_tau = Vec::Zero(td), mean_s = Vec::Zero(sd);
    for (const auto& [tau, s] : samples) {
        mean_tau += tau;
        mean_s += s;
    }
    mean_tau /= static_cast<double>(n);
    mean_s /= static_cast<double>(n);

    SurrogateResidualReport rep;
    rep.sample_count = n;
    rep.sigma_s = Mat::Zero(sd, sd);
    rep.sigma_tau = Mat::Zero(td, td);
    rep.sigma_s_tau = Mat::Zero(sd, td);
    for (const auto& [tau, s] : samples) {
        Vec dt = tau - mean_tau, ds = s - mean_s;
        rep.sigma_s += ds * ds.transpose();
        rep.sigma_tau += dt * dt.transpose();
        rep.sigma_s_tau += ds * dt.transpose();
    }
    rep.sigma_s /= static_cast<double>(n);
    rep.sigma_tau /= static_cast<double>(n);
    rep.sigma_s_tau /= static_cast<double>(n);

    rep.ridge = 1e-8 * rep.sigma_tau.trace() / static_cast<double>(td);
    Mat reg = rep.sigma_tau + rep.ridge * Mat::Identity(td, td);
    Mat solved = reg.ldlt().solve(rep.sigma_s_tau.transpose());  // sigma_tau^-1 sigma_tau_s
    rep.residual = rep.sigma_s.trace() - (rep.sigma_s_tau * solved).trace();
    return rep;
}

std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("length mismatch");
    std::size_t n = x.size();
    if (n < 2) return std::nullopt;

    auto ranks = [n](const std::vector<double>& v) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&v](std::size_t a, std::size_t b) {
            return v[a] < v[b];
        });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // average rank, 1-based
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };

    std::vector<double> rx = ranks(x), ry = ranks(y);
    double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

double percentile(std::vector<double> values, double p) {
    if (values.empty()) throw std::invalid_argument("empty sample");
    std::sort(values.begin(), values.end());
    double pos = p / 100.0 * static_cast<double>(values.size() - 1);
    std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    std::size_t hi = std::min(values.size() - 1, lo + 1);
    double frac = pos - static_cast<double>(lo);
    return values[lo] * (1.0 - frac) + values[hi] * frac;
}

StudyResult rank_deviation_study(const DenoiserModel& model, const Dataset& dataset,
                                 const FlowConfig& flow_cfg, double rank_tol,
                                 std::vector<double> epsilons) {
    StudyResult study;
    study.entries = fixed_point_table(model, dataset, flow_cfg);

    std::vector<int> converged_idx;
    std::vector<double> ranks, devs;
    for (std::size_t i = 0; i < study.entries.size(); ++i) {
        if (!study.entries[i].converged) continue;
        converged_idx.push_back(static_cast<int>(i));
        ranks.push_back(static_cast<double>(study.entries[i].jac_plus_rank));
        devs.push_back(study.entries[i].deviation);
    }
    if (converged_idx.empty()) {
        if (study.entries.empty()) return study;
        throw std::runtime_error("every flow in the study diverged");
    }
    study.spearman_rho = spearman(ranks, devs);

    for (std::size_t i = 0; i < converged_idx.size(); ++i)
        for (std::size_t j = i + 1; j < converged_idx.size(); ++j)
            study.pairwise_jac_distances.push_back(
                (study.entries[converged_idx[i]].jac_y -
                 study.entries[converged_idx[j]].jac_y)
                    .norm());
    std::sort(study.pairwise_jac_distances.begin(), study.pairwise_jac_distances.end());

    if (epsilons.empty() && !study.pairwise_jac_distances.empty()) {
        epsilons.push_back(percentile(study.pairwise_jac_distances, 10.0));
        epsilons.push_back(percentile(study.pairwise_jac_distances, 50.0));
    }

    for (double eps : epsilons) {
        double total = 0.0;
        long counted = 0;
        for (int anchor : converged_idx) {
            LocalDataset local = build_local_dataset(study.entries, anchor, eps, rank_tol);
            if (local.members.size() < 2) continue;
            std::vector<std::pair<Vec, Vec>> samples;
            for (int m : local.members)
                samples.emplace_back(study.entries[m].cond, study.entries[m].state);
            SurrogateResidualReport rep = surrogate_residual(samples);
            BoundCheck check;
            check.anchor = anchor;
            check.epsilon = eps;
            check.residual = rep.residual;
            check.deviation = study.entries[anchor].deviation;
            check.excludes_any = local.excludes_any;
            check.holds = check.deviation < check.residual;
            study.bound_checks.push_back(check);
            total += rep.residual;
            ++counted;
        }
        study.residuals[eps] = counted > 0 ? total / static_cast<double>(counted) : 0.0;
    }
    return study;
}

std::string study_csv(const StudyResult& study) {
    std::ostringstream out;
    out.precision(12);
    out << "tau_id,state_id,rank,deviation,lambda_max\n";
    for (std::size_t i = 0; i < study.entries.size(); ++i) {
        const auto& e = study.entries[i];
        if (!e.converged) continue;
        out << i << "," << e.sample_index << "," << e.jac_plus_rank << ","
            << e.deviation << "," << e.lambda_max_abs << "\n";
    }
    return out.str();
}

std::string study_summary_json(const StudyResult& study) {
    nlohmann::json j;
    if (study.spearman_rho)
        j["spearman_rho"] = *study.spearman_rho;
    else
        j["spearman_rho"] = nullptr;
    j["residuals"] = nlohmann::json::object();
    for (const auto& [eps, res] : study.residuals) {
        std::ostringstream key;
        key.precision(9);
        key << eps;
        j["residuals"][key.str()] = res;
    }
    j["bound_checks"] = nlohmann::json::array();
    for (const auto& c : study.bound_checks)
        j["bound_checks"].push_back({{"anchor", c.anchor},
                                     {"epsilon", c.epsilon},
                                     {"residual", c.residual},
                                     {"deviation", c.deviation},
                                     {"excludes_any", c.excludes_any},
                                     {"holds", c.holds}});
    return j.dump(2) + "\n";
}

}  // namespace podiff
