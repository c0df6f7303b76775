#include "podiff/cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "podiff/analysis.hpp"
#include "podiff/composite.hpp"
#include "podiff/denoiser.hpp"
#include "podiff/env.hpp"
#include "podiff/flow.hpp"

namespace podiff {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& path) {
    for (const auto& [key, value] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw std::runtime_error("unknown config key \"" +
                                     (path.empty() ? key : path + "." + key) + "\"");
    }
}

RunConfig from_json(const json& j) {
    RunConfig cfg;
    check_keys(j, {"seed", "threads", "env", "data", "train", "flow", "analysis",
                   "composite", "paths"},
               "");
    cfg.seed = j.value("seed", cfg.seed);
    cfg.threads = j.value("threads", cfg.threads);
    if (j.contains("env")) {
        const auto& e = j.at("env");
        check_keys(e, {"preset", "rows", "cols", "targets", "failure_areas",
                       "failure_prob"},
                   "env");
        cfg.env.preset = e.value("preset", cfg.env.preset);
        cfg.env.rows = e.value("rows", cfg.env.rows);
        cfg.env.cols = e.value("cols", cfg.env.cols);
        cfg.env.targets = e.value("targets", cfg.env.targets);
        cfg.env.failure_areas = e.value("failure_areas", cfg.env.failure_areas);
        cfg.env.failure_prob = e.value("failure_prob", cfg.env.failure_prob);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d, {"episodes", "steps", "history_len"}, "data");
        cfg.data.episodes = d.value("episodes", cfg.data.episodes);
        cfg.data.steps = d.value("steps", cfg.data.steps);
        cfg.data.history_len = d.value("history_len", cfg.data.history_len);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t, {"hidden_width", "hidden_layers", "epochs", "batch_size",
                       "noise_sigma_low", "noise_sigma_high", "learning_rate"},
                   "train");
        cfg.train.hidden_width = t.value("hidden_width", cfg.train.hidden_width);
        cfg.train.hidden_layers = t.value("hidden_layers", cfg.train.hidden_layers);
        cfg.train.epochs = t.value("epochs", cfg.train.epochs);
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
        cfg.train.noise_sigma_low = t.value("noise_sigma_low", cfg.train.noise_sigma_low);
        cfg.train.noise_sigma_high = t.value("noise_sigma_high", cfg.train.noise_sigma_high);
        cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
    }
    if (j.contains("flow")) {
        const auto& f = j.at("flow");
        check_keys(f, {"max_iters", "convergence_tol", "merge_radius", "init",
                       "init_lo", "init_hi", "init_sigma", "num_samples"},
                   "flow");
        cfg.flow.max_iters = f.value("max_iters", cfg.flow.max_iters);
        cfg.flow.convergence_tol = f.value("convergence_tol", cfg.flow.convergence_tol);
        cfg.flow.merge_radius = f.value("merge_radius", cfg.flow.merge_radius);
        cfg.flow.init = f.value("init", cfg.flow.init);
        cfg.flow.init_lo = f.value("init_lo", cfg.flow.init_lo);
        cfg.flow.init_hi = f.value("init_hi", cfg.flow.init_hi);
        cfg.flow.init_sigma = f.value("init_sigma", cfg.flow.init_sigma);
        cfg.flow.num_samples = f.value("num_samples", cfg.flow.num_samples);
    }
    if (j.contains("analysis")) {
        const auto& a = j.at("analysis");
        check_keys(a, {"rank_tol", "epsilons"}, "analysis");
        cfg.analysis.rank_tol = a.value("rank_tol", cfg.analysis.rank_tol);
        cfg.analysis.epsilons = a.value("epsilons", cfg.analysis.epsilons);
    }
    if (j.contains("composite")) {
        const auto& c = j.at("composite");
        check_keys(c, {"k2", "hops", "d_phi", "init_sigma", "agent_order"}, "composite");
        cfg.composite.k2 = c.value("k2", cfg.composite.k2);
        cfg.composite.hops = c.value("hops", cfg.composite.hops);
        cfg.composite.d_phi = c.value("d_phi", cfg.composite.d_phi);
        cfg.composite.init_sigma = c.value("init_sigma", cfg.composite.init_sigma);
        cfg.composite.agent_order = c.value("agent_order", cfg.composite.agent_order);
    }
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        check_keys(p, {"env_spec", "dataset", "model", "out_dir"}, "paths");
        cfg.paths.env_spec = p.value("env_spec", cfg.paths.env_spec);
        cfg.paths.dataset = p.value("dataset", cfg.paths.dataset);
        cfg.paths.model = p.value("model", cfg.paths.model);
        cfg.paths.out_dir = p.value("out_dir", cfg.paths.out_dir);
    }
    return cfg;
}

Vec parse_vec(const std::string& text) {
    std::vector<double> values;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) values.push_back(std::stod(item));
    return Eigen::Map<const Vec>(values.data(), static_cast<long>(values.size()));
}

// "agent:v0,v1,..." -> (agent, tau)
std::pair<int, Vec> parse_history(const std::string& text) {
    auto colon = text.find(':');
    if (colon == std::string::npos)
        throw std::runtime_error("history must look like agent:o0,o1,... (got \"" +
                                 text + "\")");
    return {std::stoi(text.substr(0, colon)), parse_vec(text.substr(colon + 1))};
}

EnvSpec env_from_config(const RunConfig& cfg) {
    EnvSpec spec;
    if (cfg.env.preset == "co-2x2") {
        spec = make_co_2x2();
    } else if (cfg.env.preset == "nonco-2x2") {
        spec = make_nonco_2x2();
    } else if (cfg.env.preset == "grid") {
        spec = make_sensor_grid(cfg.env.rows, cfg.env.cols, cfg.env.targets);
    } else {
        throw std::runtime_error("unknown env preset \"" + cfg.env.preset + "\"");
    }
    if (!cfg.env.failure_areas.empty() || cfg.env.failure_prob > 0.0) {
        spec.failure_areas =
            std::set<int>(cfg.env.failure_areas.begin(), cfg.env.failure_areas.end());
        spec.failure_prob = cfg.env.failure_prob;
        spec.validate();
    }
    return spec;
}

EnvSpec resolve_env(const RunConfig& cfg) {
    if (!cfg.paths.env_spec.empty()) return load_env_spec(cfg.paths.env_spec);
    return env_from_config(cfg);
}

FlowConfig flow_from_config(const RunConfig& cfg) {
    FlowConfig fc;
    fc.max_iters = cfg.flow.max_iters;
    fc.convergence_tol = cfg.flow.convergence_tol;
    fc.merge_radius = cfg.flow.merge_radius;
    fc.num_samples = cfg.flow.num_samples;
    fc.threads = cfg.threads;
    fc.seed = cfg.seed;
    if (cfg.flow.init == "standard-normal")
        fc.init_dist.kind = InitKind::StandardNormal;
    else if (cfg.flow.init == "uniform-box")
        fc.init_dist.kind = InitKind::UniformBox;
    else if (cfg.flow.init == "data-marginal")
        fc.init_dist.kind = InitKind::DataMarginal;
    else
        throw std::runtime_error("unknown init distribution \"" + cfg.flow.init + "\"");
    fc.init_dist.lo = cfg.flow.init_lo;
    fc.init_dist.hi = cfg.flow.init_hi;
    fc.init_dist.sigma = cfg.flow.init_sigma;
    return fc;
}

std::filesystem::path out_path(const RunConfig& cfg, const std::string& name) {
    return std::filesystem::path(cfg.paths.out_dir) / name;
}

// Denoise map for one (agent, tau): the trained model when a model path
// is configured, otherwise the analytic oracle.
struct MapSource {
    std::optional<DenoiserModel> model;
    EnvSpec spec;
    bool use_oracle = false;

    DenoiseMap make(int agent, const Vec& tau, PosteriorExact* post_out = nullptr) const {
        if (use_oracle) {
            PosteriorExact post = exact_posterior(spec, {{agent, tau}});
            if (post_out) *post_out = post;
            return make_oracle_map(post);
        }
        if (!model) throw std::runtime_error("no model path configured");
        if (post_out) *post_out = exact_posterior(spec, {{agent, tau}});
        return make_model_map(*model, conditioning_vector(spec, agent, tau));
    }
};

}  // namespace

RunConfig parse_config_text(const std::string& json_text) {
    return from_json(json::parse(json_text));
}

RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

int run_command(const std::vector<std::string>& argv) {
    CLI::App app{"Dec-POMDP state estimation with conditional denoisers"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file")->expected(1);
    RunConfig cfg;

    // Shared flags (flag > config > default).
    std::optional<std::uint64_t> seed_flag;
    std::optional<int> threads_flag;
    std::optional<std::string> out_dir_flag;
    app.add_option("--seed", seed_flag, "global seed");
    app.add_option("--threads", threads_flag, "worker cap");
    app.add_option("--out", out_dir_flag, "output directory");

    // Called first in every subcommand: config file first so explicit
    // flags win over it.
    auto merge_shared = [&] {
        if (!config_path.empty()) cfg = parse_config(config_path);
        if (seed_flag) cfg.seed = *seed_flag;
        if (threads_flag) cfg.threads = *threads_flag;
        if (out_dir_flag) cfg.paths.out_dir = *out_dir_flag;
    };

    int exit_code = 0;

    // Let shared flags like --config and --out appear after the
    // subcommand name by falling through to the parent parser.
    auto add_subcommand = [&](const std::string& name, const std::string& desc) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->fallthrough();
        return sub;
    };

    // gen-env
    auto* gen_env = add_subcommand("gen-env", "write an environment spec file");
    std::optional<std::string> preset_flag;
    gen_env->add_option("--preset", preset_flag, "co-2x2 | nonco-2x2 | grid");
    std::optional<int> rows_flag, cols_flag, targets_flag;
    gen_env->add_option("--rows", rows_flag);
    gen_env->add_option("--cols", cols_flag);
    gen_env->add_option("--targets", targets_flag);
    std::string gen_env_out = "env.json";
    gen_env->add_option("--file", gen_env_out, "output file name");
    gen_env->callback([&] {
        merge_shared();
        if (preset_flag) cfg.env.preset = *preset_flag;
        if (rows_flag) cfg.env.rows = *rows_flag;
        if (cols_flag) cfg.env.cols = *cols_flag;
        if (targets_flag) cfg.env.targets = *targets_flag;
        EnvSpec spec = env_from_config(cfg);
        spec.seed = cfg.seed;
        save_env_spec(spec, out_path(cfg, gen_env_out).string());
        log_info("wrote " + out_path(cfg, gen_env_out).string());
    });

    // gen-data
    auto* gen_data = add_subcommand("gen-data", "roll out episodes into a dataset");
    std::optional<int> episodes_flag, steps_flag, histlen_flag;
    gen_data->add_option("--episodes", episodes_flag);
    gen_data->add_option("--steps", steps_flag, "observation steps per episode");
    gen_data->add_option("--history-len", histlen_flag);
    std::string gen_data_out = "dataset.jsonl";
    gen_data->add_option("--file", gen_data_out, "output file name");
    gen_data->callback([&] {
        merge_shared();
        if (episodes_flag) cfg.data.episodes = *episodes_flag;
        if (steps_flag) cfg.data.steps = *steps_flag;
        if (histlen_flag) cfg.data.history_len = *histlen_flag;
        EnvSpec spec = resolve_env(cfg);
        Rng rng = make_rng(cfg.seed);
        Dataset ds = generate_dataset(spec, cfg.data.episodes, cfg.data.steps,
                                      cfg.data.history_len, rng);
        save_dataset(ds, out_path(cfg, gen_data_out).string());
        log_info("wrote " + std::to_string(ds.samples.size()) + " records");
    });

    // train
    auto* train_cmd = add_subcommand("train", "train the denoiser on a dataset");
    std::optional<int> width_flag, layers_flag, epochs_flag, batch_flag;
    std::optional<double> lr_flag;
    train_cmd->add_option("--width", width_flag);
    train_cmd->add_option("--layers", layers_flag);
    train_cmd->add_option("--epochs", epochs_flag);
    train_cmd->add_option("--batch", batch_flag);
    train_cmd->add_option("--lr", lr_flag);
    std::string train_out = "model.bin";
    std::string loss_out;
    train_cmd->add_option("--file", train_out, "output model file name");
    train_cmd->add_option("--loss-file", loss_out, "optional loss curve CSV");
    train_cmd->callback([&] {
        merge_shared();
        if (width_flag) cfg.train.hidden_width = *width_flag;
        if (layers_flag) cfg.train.hidden_layers = *layers_flag;
        if (epochs_flag) cfg.train.epochs = *epochs_flag;
        if (batch_flag) cfg.train.batch_size = *batch_flag;
        if (lr_flag) cfg.train.learning_rate = *lr_flag;
        if (cfg.paths.dataset.empty()) throw std::runtime_error("paths.dataset is required");
        Dataset ds = load_dataset(cfg.paths.dataset);
        int cond_dim = ds.n_agents + ds.tau_dim();
        DenoiserModel model = init_model(cond_dim, ds.state_dim, cfg.train.hidden_width,
                                         cfg.train.hidden_layers, cfg.seed);
        TrainConfig tc;
        tc.epochs = cfg.train.epochs;
        tc.batch_size = cfg.train.batch_size;
        tc.noise_sigma_low = cfg.train.noise_sigma_low;
        tc.noise_sigma_high = cfg.train.noise_sigma_high;
        tc.learning_rate = cfg.train.learning_rate;
        tc.seed = cfg.seed;
        Rng rng = make_rng(derive_seed(cfg.seed, 1));
        auto curve = train(model, ds, tc, rng);
        save_model(model, out_path(cfg, train_out).string());
        if (!loss_out.empty()) {
            std::ostringstream csv;
            csv.precision(12);
            csv << "epoch,loss\n";
            for (std::size_t e = 0; e < curve.size(); ++e)
                csv << e << "," << curve[e] << "\n";
            atomic_write_file(out_path(cfg, loss_out), csv.str());
        }
        log_info("final loss " + std::to_string(curve.back()));
    });

    // Shared model/oracle resolution for the flow-family commands.
    bool oracle_flag = false;
    std::vector<std::string> history_flags;
    auto add_map_opts = [&](CLI::App* sub) {
        sub->add_flag("--oracle", oracle_flag, "use the analytic optimal denoiser");
        sub->add_option("--history", history_flags,
                        "agent:o0,o1,... (repeatable)");
    };
    auto make_source = [&]() {
        MapSource src;
        src.spec = resolve_env(cfg);
        src.use_oracle = oracle_flag;
        if (!oracle_flag) {
            if (cfg.paths.model.empty())
                throw std::runtime_error("paths.model is required without --oracle");
            src.model = load_model(cfg.paths.model);
        }
        return src;
    };
    auto parsed_histories = [&]() {
        std::vector<std::pair<int, Vec>> hs;
        for (const auto& h : history_flags) hs.push_back(parse_history(h));
        if (hs.empty()) throw std::runtime_error("at least one --history is required");
        return hs;
    };

    // flow: a single trajectory from --y0
    auto* flow_cmd = add_subcommand("flow", "run one denoising flow");
    add_map_opts(flow_cmd);
    std::string y0_text;
    flow_cmd->add_option("--y0", y0_text, "comma-separated start point")->required();
    std::string flow_out = "flow.json";
    flow_cmd->add_option("--file", flow_out);
    flow_cmd->callback([&] {
        merge_shared();
        MapSource src = make_source();
        auto hs = parsed_histories();
        DenoiseMap map = src.make(hs[0].first, hs[0].second);
        FlowTrace trace = run_flow(map, parse_vec(y0_text), flow_from_config(cfg));
        json j;
        j["converged"] = trace.converged;
        j["diverged"] = trace.diverged;
        j["iterations"] = trace.iterations;
        j["points"] = json::array();
        for (const auto& p : trace.points)
            j["points"].push_back(std::vector<double>(p.data(), p.data() + p.size()));
        if (trace.attractor)
            j["attractor"] = std::vector<double>(trace.attractor->data(),
                                                 trace.attractor->data() +
                                                     trace.attractor->size());
        atomic_write_file(out_path(cfg, flow_out), j.dump(2) + "\n");
    });

    // fixed-points
    auto* fp_cmd = add_subcommand("fixed-points", "discover attractors for a history");
    add_map_opts(fp_cmd);
    std::string fp_out = "fixed_points.json";
    fp_cmd->add_option("--file", fp_out);
    bool posterior_flag = false;
    fp_cmd->add_flag("--posterior", posterior_flag,
                     "normalize basin masses over converged samples");
    fp_cmd->callback([&] {
        merge_shared();
        MapSource src = make_source();
        auto hs = parsed_histories();
        PosteriorExact post;
        DenoiseMap map = src.make(hs[0].first, hs[0].second, &post);
        FlowConfig fc = flow_from_config(cfg);
        Rng rng = make_rng(cfg.seed);
        FixedPointSet set = posterior_flag
                                ? estimate_posterior(map, fc, rng, &post)
                                : find_fixed_points(map, fc, rng, &post);
        atomic_write_file(out_path(cfg, fp_out),
                          fixed_point_set_json(set, hs[0].second));
    });

    // intersect
    auto* intersect_cmd =
        add_subcommand("intersect", "intersect fixed point sets across agents");
    add_map_opts(intersect_cmd);
    std::string intersect_out = "intersection.json";
    intersect_cmd->add_option("--file", intersect_out);
    intersect_cmd->callback([&] {
        merge_shared();
        MapSource src = make_source();
        auto hs = parsed_histories();
        FlowConfig fc = flow_from_config(cfg);
        std::vector<FixedPointSet> sets;
        for (std::size_t i = 0; i < hs.size(); ++i) {
            PosteriorExact post;
            DenoiseMap map = src.make(hs[i].first, hs[i].second, &post);
            Rng rng = make_rng(derive_seed(cfg.seed, i));
            sets.push_back(find_fixed_points(map, fc, rng, &post));
        }
        auto shared = intersect_fixed_points(sets, fc.merge_radius);
        json j;
        j["points"] = json::array();
        for (const auto& p : shared)
            j["points"].push_back(std::vector<double>(p.data(), p.data() + p.size()));
        atomic_write_file(out_path(cfg, intersect_out), j.dump(2) + "\n");
    });

    // field
    auto* field_cmd = add_subcommand("field", "emit vector-field CSV for figures");
    add_map_opts(field_cmd);
    std::vector<int> field_dims = {0, 1};
    double field_lo = -0.5, field_hi = 1.5;
    int field_res = 20;
    std::string field_out = "field.csv";
    field_cmd->add_option("--dims", field_dims, "state dims to sweep");
    field_cmd->add_option("--lo", field_lo);
    field_cmd->add_option("--hi", field_hi);
    field_cmd->add_option("--res", field_res);
    field_cmd->add_option("--file", field_out);
    field_cmd->callback([&] {
        merge_shared();
        MapSource src = make_source();
        auto hs = parsed_histories();
        DenoiseMap map = src.make(hs[0].first, hs[0].second);
        VectorFieldGrid grid;
        grid.dims = field_dims;
        grid.lo = field_lo;
        grid.hi = field_hi;
        grid.resolution = field_res;
        auto rows = vector_field(map, grid);
        atomic_write_file(out_path(cfg, field_out),
                          vector_field_csv(rows, map.state_dim));
    });

    // study
    auto* study_cmd =
        add_subcommand("study", "rank/deviation study over a dataset");
    std::string study_csv_out = "study.csv", study_json_out = "study.json";
    study_cmd->add_option("--csv-file", study_csv_out);
    study_cmd->add_option("--json-file", study_json_out);
    study_cmd->callback([&] {
        merge_shared();
        if (cfg.paths.dataset.empty() || cfg.paths.model.empty())
            throw std::runtime_error("study needs paths.dataset and paths.model");
        Dataset ds = load_dataset(cfg.paths.dataset);
        DenoiserModel model = load_model(cfg.paths.model);
        StudyResult study = rank_deviation_study(model, ds, flow_from_config(cfg),
                                                 cfg.analysis.rank_tol,
                                                 cfg.analysis.epsilons);
        atomic_write_file(out_path(cfg, study_csv_out), study_csv(study));
        atomic_write_file(out_path(cfg, study_json_out), study_summary_json(study));
    });

    // composite
    auto* comp_cmd = add_subcommand("composite", "run (partial) composite diffusion");
    add_map_opts(comp_cmd);
    std::string truth_text;
    comp_cmd->add_option("--truth", truth_text, "true state for error reporting");
    std::optional<int> k2_flag, hops_flag;
    std::optional<double> dphi_flag;
    comp_cmd->add_option("--k2", k2_flag);
    comp_cmd->add_option("--hops", hops_flag);
    comp_cmd->add_option("--d-phi", dphi_flag);
    std::string comp_json_out = "composite.json", comp_csv_out;
    comp_cmd->add_option("--json-file", comp_json_out);
    comp_cmd->add_option("--csv-file", comp_csv_out);
    comp_cmd->callback([&] {
        merge_shared();
        if (cfg.paths.model.empty())
            throw std::runtime_error("composite needs paths.model");
        if (k2_flag) cfg.composite.k2 = *k2_flag;
        if (hops_flag) cfg.composite.hops = *hops_flag;
        if (dphi_flag) cfg.composite.d_phi = *dphi_flag;
        EnvSpec spec = resolve_env(cfg);
        DenoiserModel model = load_model(cfg.paths.model);
        auto hs = parsed_histories();
        CompositeConfig cc;
        cc.k2 = cfg.composite.k2;
        cc.hops = cfg.composite.hops;
        cc.d_phi = cfg.composite.d_phi;
        cc.init_sigma = cfg.composite.init_sigma;
        cc.agent_order = cfg.composite.agent_order;
        cc.flow = flow_from_config(cfg);
        cc.seed = cfg.seed;
        std::optional<Vec> truth;
        if (!truth_text.empty()) truth = parse_vec(truth_text);
        Rng rng = make_rng(cfg.seed);
        CompositeRunReport report = run_composite(model, spec, hs, cc, rng, truth);
        atomic_write_file(out_path(cfg, comp_json_out), composite_report_json(report));
        if (!comp_csv_out.empty())
            atomic_write_file(out_path(cfg, comp_csv_out), composite_report_csv(report));
    });

    // eval: composite vs individual PSNR on held-out histories
    auto* eval_cmd = add_subcommand(
        "eval", "PSNR of composite vs individual estimation on held-out episodes");
    int eval_count = 100;
    eval_cmd->add_option("--count", eval_count, "number of held-out histories");
    std::optional<int> eval_hops_flag;
    eval_cmd->add_option("--hops", eval_hops_flag);
    std::string eval_out = "eval.json";
    eval_cmd->add_option("--file", eval_out);
    eval_cmd->callback([&] {
        merge_shared();
        if (cfg.paths.model.empty()) throw std::runtime_error("eval needs paths.model");
        EnvSpec spec = resolve_env(cfg);
        DenoiserModel model = load_model(cfg.paths.model);
        if (eval_hops_flag) cfg.composite.hops = *eval_hops_flag;
        long hops = cfg.composite.hops > 0 ? cfg.composite.hops : 6L * spec.n_agents();

        Rng rng = make_rng(cfg.seed);
        Dataset held = generate_dataset(spec, eval_count, cfg.data.history_len,
                                        cfg.data.history_len, rng);
        std::vector<Vec> truths, comp_est, ind_est;
        std::normal_distribution<double> gauss(0.0, 1.0);
        int n = spec.n_agents();
        for (int e = 0; e < eval_count; ++e) {
            std::vector<Vec> conds;
            for (int i = 0; i < n; ++i) {
                const auto& rec = held.samples[static_cast<std::size_t>(e) * n + i];
                conds.push_back(conditioning_vector(spec, rec.agent, rec.tau));
            }
            Vec truth = held.samples[static_cast<std::size_t>(e) * n].state;
            Vec y0(spec.state_dim());
            for (int d = 0; d < spec.state_dim(); ++d) y0[d] = gauss(rng);

            Vec yc = y0;
            for (long t = 0; t < hops; ++t)
                yc = forward(model, conds[static_cast<std::size_t>(t % n)], yc);
            Vec yi = y0;
            const Vec& cond = conds[static_cast<std::size_t>(e % n)];
            for (long t = 0; t < hops; ++t) yi = forward(model, cond, yi);

            truths.push_back(truth);
            comp_est.push_back(yc);
            ind_est.push_back(yi);
        }
        double peak = 0.0;
        for (const auto& t : truths)
            peak = std::max(peak, t.maxCoeff() - t.minCoeff());
        json j;
        j["count"] = eval_count;
        j["hops"] = hops;
        j["peak"] = peak;
        j["composite_psnr"] = psnr(comp_est, truths, peak);
        j["individual_psnr"] = psnr(ind_est, truths, peak);
        atomic_write_file(out_path(cfg, eval_out), j.dump(2) + "\n");
    });

    try {
        std::vector<std::string> args(argv.rbegin(), argv.rend());
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help();
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return exit_code;
}

}  // namespace podiff
