#include "podiff/denoiser.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <sstream>

namespace podiff {

void DenoiserModel::check_finite() const {
    auto ok = [](const Mat& m) { return m.allFinite(); };
    bool fine = ok(w_tau) && ok(w_y) && b0.allFinite() && ok(w_out) && b_out.allFinite();
    for (const auto& w : w_hidden) fine = fine && w.allFinite();
    for (const auto& b : b_hidden) fine = fine && b.allFinite();
    if (!fine) throw std::runtime_error("model contains non-finite weights");
}

DenoiserModel init_model(int tau_dim, int state_dim, int hidden_width,
                         int hidden_layers, std::uint64_t seed) {
    if (tau_dim <= 0 || state_dim <= 0 || hidden_width <= 0 || hidden_layers < 1)
        throw std::invalid_argument("invalid model dimensions");
    DenoiserModel m;
    m.tau_dim = tau_dim;
    m.state_dim = state_dim;
    m.hidden_width = hidden_width;
    m.hidden_layers = hidden_layers;

    Rng rng = make_rng(seed);
    auto fill = [&rng](Mat& w, int fan_in) {
        double limit = std::sqrt(6.0 / fan_in);
        std::uniform_real_distribution<double> u(-limit, limit);
        for (long i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    };

    int in = tau_dim + state_dim;
    m.w_tau.resize(hidden_width, tau_dim);
    m.w_y.resize(hidden_width, state_dim);
    fill(m.w_tau, in);
    fill(m.w_y, in);
    m.b0 = Vec::Zero(hidden_width);
    for (int k = 0; k + 1 < hidden_layers; ++k) {
        Mat w(hidden_width, hidden_width);
        fill(w, hidden_width);
        m.w_hidden.push_back(std::move(w));
        m.b_hidden.push_back(Vec::Zero(hidden_width));
    }
    m.w_out.resize(state_dim, hidden_width);
    fill(m.w_out, hidden_width);
    m.b_out = Vec::Zero(state_dim);
    return m;
}

namespace {

void check_dims(const DenoiserModel& m, long tau_rows, long y_rows) {
    if (tau_rows != m.tau_dim || y_rows != m.state_dim)
        throw std::invalid_argument("input dimensions do not match the model");
}

}  // namespace

Mat forward_batch(const DenoiserModel& m, const Mat& tau, const Mat& y) {
    check_dims(m, tau.rows(), y.rows());
    Mat h = ((m.w_tau * tau + m.w_y * y).colwise() + m.b0).cwiseMax(0.0);
    for (std::size_t k = 0; k < m.w_hidden.size(); ++k)
        h = ((m.w_hidden[k] * h).colwise() + m.b_hidden[k]).cwiseMax(0.0);
    return (m.w_out * h).colwise() + m.b_out;
}

Vec forward(const DenoiserModel& m, const Vec& tau, const Vec& y) {
    return forward_batch(m, tau, y);
}

JacobianReport jacobians(const DenoiserModel& m, const Vec& tau, const Vec& y) {
    check_dims(m, tau.rows(), y.rows());

    // Forward pass keeping the rectifier masks (subgradient 0 at 0).
    std::vector<Eigen::ArrayXd> masks;
    Vec h = (m.w_tau * tau + m.w_y * y + m.b0);
    masks.push_back((h.array() > 0.0).cast<double>());
    h = h.cwiseMax(0.0);
    for (std::size_t k = 0; k < m.w_hidden.size(); ++k) {
        h = m.w_hidden[k] * h + m.b_hidden[k];
        masks.push_back((h.array() > 0.0).cast<double>());
        h = h.cwiseMax(0.0);
    }

    // Reverse accumulation: out <- masked layer chain <- input split.
    Mat acc = m.w_out;
    for (long k = static_cast<long>(m.w_hidden.size()); k >= 1; --k) {
        acc = acc * masks[k].matrix().asDiagonal();
        acc = acc * m.w_hidden[k - 1];
    }
    acc = acc * masks[0].matrix().asDiagonal();

    JacobianReport rep;
    rep.jac_tau = acc * m.w_tau;
    rep.jac_y = acc * m.w_y;

    Eigen::EigenSolver<Mat> es(rep.jac_y, /*computeEigenvectors=*/false);
    rep.eigenvalues = es.eigenvalues();
    rep.lambda_max_abs = rep.eigenvalues.cwiseAbs().maxCoeff();

    Mat a = Mat::Identity(m.state_dim, m.state_dim) - rep.jac_y;
    Eigen::JacobiSVD<Mat> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    double smax = svd.singularValues()(0);
    double smin = svd.singularValues()(svd.singularValues().size() - 1);
    rep.condition_number = smin > 0.0 ? smax / smin
                                      : std::numeric_limits<double>::infinity();
    if (smin > 1e-12 * smax)
        rep.jac_plus = a.partialPivLu().solve(rep.jac_tau);
    return rep;
}

double spectral_radius(const Mat& m) {
    if (m.rows() != m.cols()) throw std::invalid_argument("matrix is not square");
    if (!m.allFinite()) throw std::invalid_argument("matrix has non-finite entries");
    Eigen::EigenSolver<Mat> es(m, /*computeEigenvectors=*/false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

namespace {

// Flat views over all trainable parameters, in a fixed order shared by the
// optimizer state and the serializer.
std::vector<std::pair<double*, long>> param_blocks(DenoiserModel& m) {
    std::vector<std::pair<double*, long>> blocks;
    blocks.emplace_back(m.w_tau.data(), m.w_tau.size());
    blocks.emplace_back(m.w_y.data(), m.w_y.size());
    blocks.emplace_back(m.b0.data(), m.b0.size());
    for (std::size_t k = 0; k < m.w_hidden.size(); ++k) {
        blocks.emplace_back(m.w_hidden[k].data(), m.w_hidden[k].size());
        blocks.emplace_back(m.b_hidden[k].data(), m.b_hidden[k].size());
    }
    blocks.emplace_back(m.w_out.data(), m.w_out.size());
    blocks.emplace_back(m.b_out.data(), m.b_out.size());
    return blocks;
}

}  // namespace

GradientSet loss_gradients(const DenoiserModel& model, const Mat& conds, const Mat& y,
                           const Mat& targets) {
    check_dims(model, conds.rows(), y.rows());
    if (targets.rows() != model.state_dim || targets.cols() != y.cols() ||
        conds.cols() != y.cols())
        throw std::invalid_argument("batch dimensions do not match");
    const long b = y.cols();
    const int L = static_cast<int>(model.w_hidden.size());

    std::vector<Mat> acts;  // post-rectifier activations per hidden layer
    Mat h = ((model.w_tau * conds + model.w_y * y).colwise() + model.b0).cwiseMax(0.0);
    acts.push_back(h);
    for (int k = 0; k < L; ++k) {
        h = ((model.w_hidden[k] * h).colwise() + model.b_hidden[k]).cwiseMax(0.0);
        acts.push_back(h);
    }
    Mat out = (model.w_out * acts.back()).colwise() + model.b_out;
    Mat resid = out - targets;

    GradientSet g;
    g.loss = resid.squaredNorm() / static_cast<double>(b);
    Mat gout = (2.0 / static_cast<double>(b)) * resid;
    g.w_out = gout * acts.back().transpose();
    g.b_out = gout.rowwise().sum();
    g.w_hidden.resize(L);
    g.b_hidden.resize(L);
    Mat delta = model.w_out.transpose() * gout;
    for (int k = L - 1; k >= 0; --k) {
        delta = delta.cwiseProduct((acts[k + 1].array() > 0.0).cast<double>().matrix());
        g.w_hidden[k] = delta * acts[k].transpose();
        g.b_hidden[k] = delta.rowwise().sum();
        delta = model.w_hidden[k].transpose() * delta;
    }
    delta = delta.cwiseProduct((acts[0].array() > 0.0).cast<double>().matrix());
    g.w_tau = delta * conds.transpose();
    g.w_y = delta * y.transpose();
    g.b0 = delta.rowwise().sum();
    return g;
}

std::vector<double> train(DenoiserModel& model, const Dataset& dataset,
                          const TrainConfig& cfg, Rng& rng) {
    if (dataset.samples.empty()) throw std::invalid_argument("empty dataset");
    if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (cfg.noise_sigma_low < 0.0 || cfg.noise_sigma_high < cfg.noise_sigma_low)
        throw std::invalid_argument("invalid noise sigma range");

    const long n = static_cast<long>(dataset.samples.size());
    const int cd = model.tau_dim, sd = model.state_dim;

    Mat conds(cd, n), states(sd, n);
    for (long i = 0; i < n; ++i) {
        const auto& rec = dataset.samples[i];
        Vec c = conditioning_vector(dataset.spec, rec.agent, rec.tau);
        if (c.size() != cd || rec.state.size() != sd)
            throw std::invalid_argument("dataset dimensions do not match the model");
        conds.col(i) = c;
        states.col(i) = rec.state;
    }

    // Adam state per parameter block.
    auto blocks = param_blocks(model);
    std::vector<Vec> mom, vel;
    for (auto [ptr, sz] : blocks) {
        mom.push_back(Vec::Zero(sz));
        vel.push_back(Vec::Zero(sz));
    }
    long adam_t = 0;

    DenoiserModel checkpoint = model;
    std::vector<double> loss_curve;
    std::vector<long> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::uniform_real_distribution<double> draw_sigma(cfg.noise_sigma_low,
                                                      cfg.noise_sigma_high);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const int L = static_cast<int>(model.w_hidden.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        long batches = 0;
        for (long start = 0; start < n; start += cfg.batch_size) {
            long b = std::min<long>(cfg.batch_size, n - start);
            Mat c(cd, b), s(sd, b), y(sd, b);
            for (long i = 0; i < b; ++i) {
                long idx = order[start + i];
                c.col(i) = conds.col(idx);
                s.col(i) = states.col(idx);
                double sigma = draw_sigma(rng);
                for (int d = 0; d < sd; ++d) y(d, i) = s(d, i) + sigma * gauss(rng);
            }

            GradientSet gs = loss_gradients(model, c, y, s);
            if (!std::isfinite(gs.loss)) {
                model = checkpoint;
                throw std::runtime_error("non-finite training loss at epoch " +
                                         std::to_string(epoch));
            }
            epoch_loss += gs.loss;
            ++batches;

            std::vector<const double*> grads;
            std::vector<long> sizes;
            auto push = [&](const auto& gm) {
                grads.push_back(gm.data());
                sizes.push_back(gm.size());
            };
            push(gs.w_tau);
            push(gs.w_y);
            push(gs.b0);
            for (int k = 0; k < L; ++k) {
                push(gs.w_hidden[k]);
                push(gs.b_hidden[k]);
            }
            push(gs.w_out);
            push(gs.b_out);

            ++adam_t;
            double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam_t));
            double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam_t));
            for (std::size_t p = 0; p < blocks.size(); ++p) {
                auto [ptr, sz] = blocks[p];
                Eigen::Map<Vec> theta(ptr, sz);
                Eigen::Map<const Vec> grad(grads[p], sizes[p]);
                mom[p] = cfg.beta1 * mom[p] + (1.0 - cfg.beta1) * grad;
                vel[p] = cfg.beta2 * vel[p] + (1.0 - cfg.beta2) * grad.cwiseAbs2();
                theta -= cfg.learning_rate *
                         ((mom[p] / bc1).array() /
                          ((vel[p] / bc2).array().sqrt() + cfg.adam_eps))
                             .matrix();
            }
        }
        loss_curve.push_back(epoch_loss / static_cast<double>(batches));
        checkpoint = model;
        if ((epoch + 1) % 100 == 0)
            log_info("epoch " + std::to_string(epoch + 1) + " loss " +
                     std::to_string(loss_curve.back()));
    }
    return loss_curve;
}

namespace {

constexpr char kMagic[4] = {'P', 'D', 'F', '1'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::string& out, std::uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.append(buf, 4);
}

void write_block(std::string& out, const double* data, long n) {
    for (long i = 0; i < n; ++i) {
        float f = static_cast<float>(data[i]);
        char buf[4];
        std::memcpy(buf, &f, 4);
        out.append(buf, 4);
    }
}

std::uint32_t read_u32(std::istream& in) {
    char buf[4];
    in.read(buf, 4);
    if (!in) throw std::runtime_error("truncated model file");
    std::uint32_t v;
    std::memcpy(&v, buf, 4);
    return v;
}

void read_block(std::istream& in, double* data, long n) {
    std::vector<float> tmp(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(tmp.data()), 4 * n);
    if (!in) throw std::runtime_error("truncated model file");
    for (long i = 0; i < n; ++i) data[i] = static_cast<double>(tmp[i]);
}

}  // namespace

void save_model(const DenoiserModel& model, const std::string& path) {
    std::string out;
    out.append(kMagic, 4);
    write_u32(out, kVersion);
    write_u32(out, static_cast<std::uint32_t>(model.tau_dim));
    write_u32(out, static_cast<std::uint32_t>(model.state_dim));
    write_u32(out, static_cast<std::uint32_t>(model.hidden_width));
    write_u32(out, static_cast<std::uint32_t>(model.hidden_layers));
    auto blocks = param_blocks(const_cast<DenoiserModel&>(model));
    for (auto [ptr, sz] : blocks) write_block(out, ptr, sz);
    atomic_write_file(path, out);
}

DenoiserModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open model file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad model file magic (expected \"PDF1\")");
    std::uint32_t version = read_u32(in);
    if (version != kVersion)
        throw std::runtime_error("unsupported model file version " +
                                 std::to_string(version));
    int tau_dim = static_cast<int>(read_u32(in));
    int state_dim = static_cast<int>(read_u32(in));
    int width = static_cast<int>(read_u32(in));
    int layers = static_cast<int>(read_u32(in));
    DenoiserModel m = init_model(tau_dim, state_dim, width, layers, 0);
    auto blocks = param_blocks(m);
    for (auto [ptr, sz] : blocks) read_block(in, ptr, sz);
    // Must be exactly at EOF.
    char extra;
    if (in.read(&extra, 1))
        throw std::runtime_error("trailing bytes in model file");
    return m;
}

std::string model_to_json(const DenoiserModel& model) {
    nlohmann::json j;
    j["tau_dim"] = model.tau_dim;
    j["state_dim"] = model.state_dim;
    j["hidden_width"] = model.hidden_width;
    j["hidden_layers"] = model.hidden_layers;
    auto mat = [](const Mat& m) {
        std::vector<std::vector<double>> rows;
        for (long r = 0; r < m.rows(); ++r) {
            std::vector<double> row(static_cast<std::size_t>(m.cols()));
            for (long c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
            rows.push_back(std::move(row));
        }
        return rows;
    };
    auto vec = [](const Vec& v) {
        return std::vector<double>(v.data(), v.data() + v.size());
    };
    j["w_tau"] = mat(model.w_tau);
    j["w_y"] = mat(model.w_y);
    j["b0"] = vec(model.b0);
    for (std::size_t k = 0; k < model.w_hidden.size(); ++k) {
        j["hidden"].push_back({{"w", mat(model.w_hidden[k])}, {"b", vec(model.b_hidden[k])}});
    }
    j["w_out"] = mat(model.w_out);
    j["b_out"] = vec(model.b_out);
    return j.dump(2) + "\n";
}

}  // namespace podiff
