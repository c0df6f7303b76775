#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <complex>
#include <filesystem>
#include <fstream>

#include "podiff/denoiser.hpp"
#include "podiff/env.hpp"

using namespace podiff;

namespace {

void zero_weights(DenoiserModel& m) {
    m.w_tau.setZero();
    m.w_y.setZero();
    m.b0.setZero();
    for (auto& w : m.w_hidden) w.setZero();
    for (auto& b : m.b_hidden) b.setZero();
    m.w_out.setZero();
    m.b_out.setZero();
}

// Independent eigenvalue oracle: characteristic polynomial coefficients by
// Faddeev-LeVerrier, roots by Durand-Kerner. Shares nothing with Eigen's
// eigensolver.
std::vector<std::complex<double>> char_poly_roots(const Mat& a) {
    const int n = static_cast<int>(a.rows());
    std::vector<double> c(n + 1);
    c[0] = 1.0;
    Mat m = Mat::Zero(n, n);
    for (int k = 1; k <= n; ++k) {
        m = a * (m + c[k - 1] * Mat::Identity(n, n));
        c[k] = -m.trace() / k;
    }
    auto eval = [&](std::complex<double> x) {
        std::complex<double> v = 0.0;
        for (int k = 0; k <= n; ++k) v = v * x + c[k];
        return v;
    };
    std::vector<std::complex<double>> r(n);
    std::complex<double> seed(0.4, 0.9);
    r[0] = seed;
    for (int i = 1; i < n; ++i) r[i] = r[i - 1] * seed;
    for (int it = 0; it < 500; ++it) {
        for (int i = 0; i < n; ++i) {
            std::complex<double> den = 1.0;
            for (int j = 0; j < n; ++j)
                if (j != i) den *= r[i] - r[j];
            r[i] -= eval(r[i]) / den;
        }
    }
    return r;
}

Dataset single_pair_dataset() {
    EnvSpec spec = make_co_2x2();
    Dataset ds;
    ds.obs_dim = 2;
    ds.action_dim = 2;
    ds.state_dim = 4;
    ds.history_len = 1;
    ds.n_agents = 4;
    ds.spec = spec;
    Vec tau(2);
    tau << 1, 0;
    Vec s = Vec::Zero(4);
    s[0] = 1.0;
    ds.samples.push_back({0, tau, s});
    return ds;
}

}  // namespace

TEST_CASE("forward on hand-checkable models") {
    // All-zero weights propagate zero.
    DenoiserModel z = init_model(3, 2, 8, 3, 1);
    zero_weights(z);
    Vec tau(3), y(2);
    tau << 1, -2, 3;
    y << 0.5, -0.5;
    CHECK(forward(z, tau, y).norm() == 0.0);

    // One hidden unit: 2 * max(0, tau + y) on scalars.
    DenoiserModel one = init_model(1, 1, 1, 1, 1);
    one.w_tau(0, 0) = 1.0;
    one.w_y(0, 0) = 1.0;
    one.b0[0] = 0.0;
    one.w_out(0, 0) = 2.0;
    one.b_out[0] = 0.0;
    Vec t1(1), y1(1);
    t1 << 0.5;
    y1 << 0.25;
    CHECK(forward(one, t1, y1)[0] == doctest::Approx(1.5).epsilon(1e-12));
    y1 << -1.0;
    CHECK(forward(one, t1, y1)[0] == 0.0);  // rectifier clamps

    CHECK_THROWS(forward(one, Vec::Zero(2), y1));  // dimension mismatch
}

TEST_CASE("forward matches the batched path") {
    DenoiserModel m = init_model(4, 3, 16, 4, 5);
    Rng rng(2);
    std::normal_distribution<double> g(0.0, 1.0);
    Mat tau(4, 5), y(3, 5);
    for (long i = 0; i < tau.size(); ++i) tau.data()[i] = g(rng);
    for (long i = 0; i < y.size(); ++i) y.data()[i] = g(rng);
    Mat out = forward_batch(m, tau, y);
    for (int c = 0; c < 5; ++c)
        CHECK((forward(m, tau.col(c), y.col(c)) - out.col(c)).norm() <= 1e-14);
}

TEST_CASE("seed-42 regression fixture") {
    DenoiserModel m = init_model(6, 4, 32, 6, 42);
    Vec tau(6), y(4);
    tau << 0, 0, 1, 0, 0, 0;
    y << 0.25, -0.5, 1.0, 0.125;
    Vec out = forward(m, tau, y);
    // Golden values recorded from the initial implementation.
    CHECK(out[0] == doctest::Approx(-0.759046767729).epsilon(1e-9));
    CHECK(out[1] == doctest::Approx(0.158379170131).epsilon(1e-9));
    CHECK(out[2] == doctest::Approx(0.270624884033).epsilon(1e-9));
    CHECK(out[3] == doctest::Approx(0.354909793915).epsilon(1e-9));
}

TEST_CASE("analytic jacobians on structured models") {
    // First layer ignores y: jac_y = 0 and jac_plus = jac_tau.
    DenoiserModel m = init_model(3, 2, 8, 2, 7);
    m.w_y.setZero();
    Vec tau(3), y(2);
    tau << 0.3, -0.2, 0.9;
    y << 0.1, 0.4;
    JacobianReport rep = jacobians(m, tau, y);
    CHECK(rep.jac_y.norm() == 0.0);
    REQUIRE(rep.jac_plus.has_value());
    CHECK((*rep.jac_plus - rep.jac_tau).norm() <= 1e-14);
    CHECK(rep.lambda_max_abs == 0.0);

    // Effectively linear model (large bias keeps every unit active):
    // f = W_out W_y y + ..., so jac_y = W_out W_y exactly.
    DenoiserModel lin = init_model(2, 3, 8, 1, 11);
    lin.b0.setConstant(100.0);
    Vec t2 = Vec::Zero(2), y2(3);
    y2 << 0.5, -0.25, 0.75;
    JacobianReport rl = jacobians(lin, t2, y2);
    CHECK((rl.jac_y - lin.w_out * lin.w_y).norm() <= 1e-12);
    CHECK((rl.jac_tau - lin.w_out * lin.w_tau).norm() <= 1e-12);
}

TEST_CASE("jacobians match central finite differences") {
    DenoiserModel m = init_model(5, 4, 24, 4, 19);
    Rng rng(3);
    std::normal_distribution<double> g(0.0, 1.0);
    Vec tau(5), y(4);
    for (int i = 0; i < 5; ++i) tau[i] = g(rng);
    for (int i = 0; i < 4; ++i) y[i] = g(rng);

    JacobianReport rep = jacobians(m, tau, y);
    double h = 1e-4;
    double scale = std::max(rep.jac_y.cwiseAbs().maxCoeff(),
                            rep.jac_tau.cwiseAbs().maxCoeff());
    for (int d = 0; d < 4; ++d) {
        Vec hi = y, lo = y;
        hi[d] += h;
        lo[d] -= h;
        Vec col = (forward(m, tau, hi) - forward(m, tau, lo)) / (2 * h);
        CHECK((rep.jac_y.col(d) - col).norm() <= 1e-4 * scale);
    }
    for (int d = 0; d < 5; ++d) {
        Vec hi = tau, lo = tau;
        hi[d] += h;
        lo[d] -= h;
        Vec col = (forward(m, hi, y) - forward(m, lo, y)) / (2 * h);
        CHECK((rep.jac_tau.col(d) - col).norm() <= 1e-4 * scale);
    }
}

TEST_CASE("parameter gradients match central finite differences") {
    DenoiserModel m = init_model(3, 2, 10, 3, 23);
    Rng rng(4);
    std::normal_distribution<double> g(0.0, 1.0);
    Mat conds(3, 6), y(2, 6), s(2, 6);
    for (long i = 0; i < conds.size(); ++i) conds.data()[i] = g(rng);
    for (long i = 0; i < y.size(); ++i) y.data()[i] = g(rng);
    for (long i = 0; i < s.size(); ++i) s.data()[i] = g(rng);

    GradientSet gs = loss_gradients(m, conds, y, s);
    double h = 1e-5;
    auto fd_check = [&](double* param, double analytic) {
        double orig = *param;
        *param = orig + h;
        double up = loss_gradients(m, conds, y, s).loss;
        *param = orig - h;
        double dn = loss_gradients(m, conds, y, s).loss;
        *param = orig;
        double fd = (up - dn) / (2 * h);
        double tol = 1e-4 * std::max(1.0, std::abs(fd));
        CHECK(std::abs(analytic - fd) <= tol);
    };

    for (long i = 0; i < m.w_tau.size(); ++i) fd_check(m.w_tau.data() + i, gs.w_tau.data()[i]);
    for (long i = 0; i < m.w_y.size(); ++i) fd_check(m.w_y.data() + i, gs.w_y.data()[i]);
    for (long i = 0; i < m.b0.size(); ++i) fd_check(m.b0.data() + i, gs.b0.data()[i]);
    for (std::size_t k = 0; k < m.w_hidden.size(); ++k) {
        for (long i = 0; i < m.w_hidden[k].size(); ++i)
            fd_check(m.w_hidden[k].data() + i, gs.w_hidden[k].data()[i]);
        for (long i = 0; i < m.b_hidden[k].size(); ++i)
            fd_check(m.b_hidden[k].data() + i, gs.b_hidden[k].data()[i]);
    }
    for (long i = 0; i < m.w_out.size(); ++i) fd_check(m.w_out.data() + i, gs.w_out.data()[i]);
    for (long i = 0; i < m.b_out.size(); ++i) fd_check(m.b_out.data() + i, gs.b_out.data()[i]);
}

TEST_CASE("spectral radius") {
    CHECK(spectral_radius(Mat::Identity(3, 3)) == doctest::Approx(1.0).epsilon(1e-14));
    Mat d = Mat::Zero(2, 2);
    d(0, 0) = 0.5;
    d(1, 1) = -0.9;
    CHECK(spectral_radius(d) == doctest::Approx(0.9).epsilon(1e-14));

    Rng rng(6);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int rep = 0; rep < 5; ++rep) {
        Mat a(4, 4);
        for (long i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
        auto roots = char_poly_roots(a);
        double oracle = 0.0;
        for (auto r : roots) oracle = std::max(oracle, std::abs(r));
        CHECK(spectral_radius(a) == doctest::Approx(oracle).epsilon(1e-6));
    }

    CHECK_THROWS(spectral_radius(Mat::Zero(2, 3)));
    Mat bad = Mat::Zero(2, 2);
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS(spectral_radius(bad));
}

TEST_CASE("training memorizes a single pair") {
    Dataset ds = single_pair_dataset();
    DenoiserModel m = init_model(4 + 2, 4, 16, 3, 15);
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 1;
    cfg.noise_sigma_low = 0.0;
    cfg.noise_sigma_high = 0.01;
    cfg.learning_rate = 3e-3;
    cfg.seed = 15;
    Rng rng(15);
    auto curve = train(m, ds, cfg, rng);
    REQUIRE(curve.size() == 200);
    CHECK(curve.back() < 1e-3);
    Vec cond = conditioning_vector(ds.spec, 0, ds.samples[0].tau);
    CHECK((forward(m, cond, ds.samples[0].state) - ds.samples[0].state).norm() <= 0.02);
}

TEST_CASE("training is deterministic and validates inputs") {
    EnvSpec spec = make_co_2x2();
    Rng drng(31);
    Dataset ds = generate_dataset(spec, 8, 4, 1, drng);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 16;
    cfg.learning_rate = 1e-3;

    DenoiserModel m1 = init_model(4 + 2, 4, 12, 3, 50);
    DenoiserModel m2 = init_model(4 + 2, 4, 12, 3, 50);
    Rng r1(77), r2(77);
    auto c1 = train(m1, ds, cfg, r1);
    auto c2 = train(m2, ds, cfg, r2);
    CHECK(c1 == c2);
    CHECK(m1.w_tau == m2.w_tau);
    CHECK(m1.w_y == m2.w_y);
    CHECK(m1.w_out == m2.w_out);
    for (std::size_t k = 0; k < m1.w_hidden.size(); ++k)
        CHECK(m1.w_hidden[k] == m2.w_hidden[k]);
    // Loss curve has one entry per configured epoch.
    CHECK(c1.size() == static_cast<std::size_t>(cfg.epochs));

    Dataset empty = ds;
    empty.samples.clear();
    Rng r3(1);
    CHECK_THROWS(train(m1, empty, cfg, r3));

    // Defaults match the documented protocol.
    TrainConfig defaults;
    CHECK(defaults.epochs == 1000);
    CHECK(defaults.batch_size == 512);
    CHECK(defaults.noise_sigma_low == 0.0);
    CHECK(defaults.noise_sigma_high == 1.0);
    CHECK(defaults.beta1 == 0.9);
    CHECK(defaults.beta2 == 0.999);
    CHECK(defaults.adam_eps == 1e-8);
}

TEST_CASE("trained denoiser approaches the analytic optimum") {
    EnvSpec spec = make_co_2x2();
    Rng drng(8);
    Dataset ds = generate_dataset(spec, 64, 8, 1, drng);

    DenoiserModel m = init_model(spec.n_agents() + ds.tau_dim(), 4, 64, 6, 3);
    TrainConfig cfg;
    cfg.epochs = 150;
    cfg.batch_size = 256;
    cfg.learning_rate = 1e-3;
    cfg.seed = 3;
    Rng trng(3);
    auto curve = train(m, ds, cfg, trng);

    // Smoothed monotonicity: 20-epoch moving average non-increasing after
    // epoch 50, allowing 5% upticks.
    auto avg = [&](std::size_t e) {
        double s = 0.0;
        for (std::size_t k = e; k < e + 20; ++k) s += curve[k];
        return s / 20.0;
    };
    for (std::size_t e = 50; e + 21 < curve.size(); ++e)
        CHECK(avg(e + 1) <= 1.05 * avg(e));

    // Monte-Carlo MSE of model and oracle on the same draws.
    Rng mc(99);
    std::uniform_real_distribution<double> us(1e-3, 1.0);
    std::normal_distribution<double> g(0.0, 1.0);
    double mse_model = 0.0, mse_oracle = 0.0;
    int trials = 2000;
    for (int k = 0; k < trials; ++k) {
        const auto& rec = ds.samples[k % ds.samples.size()];
        double sigma = us(mc);
        Vec y(4);
        for (int d = 0; d < 4; ++d) y[d] = rec.state[d] + sigma * g(mc);
        Vec cond = conditioning_vector(spec, rec.agent, rec.tau);
        mse_model += (forward(m, cond, y) - rec.state).squaredNorm();
        PosteriorExact post = exact_posterior(spec, {{rec.agent, rec.tau}});
        mse_oracle += (optimal_denoiser(post, y, sigma) - rec.state).squaredNorm();
    }
    mse_model /= trials;
    mse_oracle /= trials;
    CHECK(mse_model <= 1.2 * mse_oracle);
    CHECK(mse_model >= 0.8 * mse_oracle);
}

TEST_CASE("model files round-trip byte-identically") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "podiff_model_test";
    fs::create_directories(dir);
    fs::path p1 = dir / "m1.bin", p2 = dir / "m2.bin";

    DenoiserModel m = init_model(6, 4, 20, 4, 77);
    save_model(m, p1.string());
    DenoiserModel back = load_model(p1.string());
    CHECK(back.tau_dim == m.tau_dim);
    CHECK(back.hidden_width == m.hidden_width);
    save_model(back, p2.string());

    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    std::string b1 = slurp(p1), b2 = slurp(p2);
    CHECK(b1 == b2);
    CHECK(b1.substr(0, 4) == "PDF1");

    // Corrupt the magic.
    std::string bad = b1;
    bad[0] = 'X';
    fs::path pb = dir / "bad.bin";
    {
        std::ofstream out(pb, std::ios::binary);
        out << bad;
    }
    CHECK_THROWS_WITH_AS(load_model(pb.string()),
                         doctest::Contains("PDF1"), std::runtime_error);

    // Bump the version field.
    std::string ver = b1;
    ver[4] = 2;
    {
        std::ofstream out(pb, std::ios::binary);
        out << ver;
    }
    CHECK_THROWS_WITH_AS(load_model(pb.string()),
                         doctest::Contains("version"), std::runtime_error);

    // Truncate and append.
    {
        std::ofstream out(pb, std::ios::binary);
        out << b1.substr(0, b1.size() / 2);
    }
    CHECK_THROWS(load_model(pb.string()));
    {
        std::ofstream out(pb, std::ios::binary);
        out << b1 << "zz";
    }
    CHECK_THROWS(load_model(pb.string()));

    // JSON export carries the dims.
    std::string j = model_to_json(m);
    CHECK(j.find("\"hidden_width\": 20") != std::string::npos);
    fs::remove_all(dir);
}
