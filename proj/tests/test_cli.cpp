#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "podiff/cli.hpp"
#include "podiff/denoiser.hpp"
#include "podiff/env.hpp"

using namespace podiff;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("podiff-cli-test-" + std::to_string(::getpid()) + "-" +
                std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
    static int counter;
};
int TempDir::counter = 0;

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

}  // namespace

TEST_CASE("parse_config_text fills defaults and rejects unknown keys") {
    RunConfig cfg = parse_config_text("{}");
    CHECK(cfg.seed == 0);
    CHECK(cfg.threads == 1);
    CHECK(cfg.env.preset == "co-2x2");
    CHECK(cfg.data.episodes == 100);
    CHECK(cfg.data.steps == 8);
    CHECK(cfg.train.hidden_width == 1024);
    CHECK(cfg.train.hidden_layers == 6);
    CHECK(cfg.train.epochs == 1000);
    CHECK(cfg.train.batch_size == 512);
    CHECK(cfg.train.noise_sigma_low == 0.0);
    CHECK(cfg.train.noise_sigma_high == 1.0);
    CHECK(cfg.flow.max_iters == 200);
    CHECK(cfg.flow.convergence_tol == 1e-5);
    CHECK(cfg.flow.merge_radius == 0.05);
    CHECK(cfg.flow.init == "standard-normal");
    CHECK(cfg.composite.k2 == 100);
    CHECK(cfg.composite.d_phi == 0.1);
    CHECK(cfg.paths.out_dir == ".");

    // The offending key is named, with its section prefix.
    CHECK_THROWS_WITH_AS(parse_config_text(R"({"foo": 1})"),
                         doctest::Contains("foo"), std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_config_text(R"({"env": {"bogus": 2}})"),
                         doctest::Contains("env.bogus"), std::runtime_error);
    CHECK_THROWS_WITH_AS(parse_config_text(R"({"train": {"width": 8}})"),
                         doctest::Contains("train.width"), std::runtime_error);
}

TEST_CASE("parse_config_text reads every section") {
    RunConfig cfg = parse_config_text(R"({
        "seed": 7, "threads": 2,
        "env": {"preset": "grid", "rows": 3, "cols": 4, "targets": 2,
                "failure_areas": [1, 5], "failure_prob": 0.25},
        "data": {"episodes": 12, "steps": 3, "history_len": 2},
        "train": {"hidden_width": 64, "hidden_layers": 2, "epochs": 10,
                  "batch_size": 32, "noise_sigma_low": 0.1,
                  "noise_sigma_high": 0.9, "learning_rate": 0.001},
        "flow": {"max_iters": 50, "convergence_tol": 1e-7, "merge_radius": 0.02,
                 "init": "data-marginal", "init_lo": -1, "init_hi": 2,
                 "init_sigma": 0.3, "num_samples": 250},
        "analysis": {"rank_tol": 1e-4, "epsilons": [0.5, 1.5]},
        "composite": {"k2": 20, "hops": 18, "d_phi": 0.05, "init_sigma": 0.8,
                      "agent_order": [2, 0, 1]},
        "paths": {"env_spec": "e.json", "dataset": "d.jsonl", "model": "m.bin",
                  "out_dir": "/tmp/x"}
    })");
    CHECK(cfg.seed == 7);
    CHECK(cfg.threads == 2);
    CHECK(cfg.env.preset == "grid");
    CHECK(cfg.env.rows == 3);
    CHECK(cfg.env.cols == 4);
    CHECK(cfg.env.targets == 2);
    CHECK(cfg.env.failure_areas == std::vector<int>{1, 5});
    CHECK(cfg.env.failure_prob == 0.25);
    CHECK(cfg.data.episodes == 12);
    CHECK(cfg.data.history_len == 2);
    CHECK(cfg.train.hidden_width == 64);
    CHECK(cfg.train.learning_rate == 0.001);
    CHECK(cfg.flow.init == "data-marginal");
    CHECK(cfg.flow.num_samples == 250);
    CHECK(cfg.analysis.rank_tol == 1e-4);
    CHECK(cfg.analysis.epsilons == std::vector<double>{0.5, 1.5});
    CHECK(cfg.composite.hops == 18);
    CHECK(cfg.composite.agent_order == std::vector<int>{2, 0, 1});
    CHECK(cfg.paths.model == "m.bin");
    CHECK(cfg.paths.out_dir == "/tmp/x");
}

TEST_CASE("usage errors and help") {
    CHECK(run_command({"no-such-command"}) == 2);
    CHECK(run_command({}) == 2);
    CHECK(run_command({"--help"}) == 0);
    // A runtime failure (missing required path) exits 1, not 2.
    CHECK(run_command({"train"}) == 1);
}

TEST_CASE("gen-env writes a loadable spec") {
    TempDir dir;
    CHECK(run_command({"gen-env", "--preset", "nonco-2x2", "--out",
                       dir.path.string(), "--file", "env.json"}) == 0);
    EnvSpec spec = load_env_spec(dir.file("env.json"));
    CHECK(spec.n_agents() == 4);
    CHECK(spec.failure_prob == 0.5);
    CHECK(spec.failure_areas == std::set<int>{0, 1});
    CHECK(spec.coverage[0] == std::vector<int>{0, 3});
    CHECK(spec.coverage[2] == std::vector<int>{1, 2});
}

TEST_CASE("gen-data rolls out the configured episode count") {
    TempDir dir;
    CHECK(run_command({"gen-data", "--episodes", "5", "--steps", "2", "--out",
                       dir.path.string(), "--file", "data.jsonl"}) == 0);
    Dataset ds = load_dataset(dir.file("data.jsonl"));
    CHECK(ds.samples.size() == 5 * 2 * 4);
    CHECK(ds.n_agents == 4);
    CHECK(ds.state_dim == 4);
    CHECK(ds.history_len == 1);

    // Same seed, same bytes; different seed, different draws.
    CHECK(run_command({"gen-data", "--episodes", "5", "--steps", "2", "--out",
                       dir.path.string(), "--file", "again.jsonl"}) == 0);
    CHECK(slurp(dir.file("data.jsonl")) == slurp(dir.file("again.jsonl")));
    CHECK(run_command({"gen-data", "--episodes", "5", "--steps", "2", "--seed", "9",
                       "--out", dir.path.string(), "--file", "other.jsonl"}) == 0);
    CHECK(slurp(dir.file("data.jsonl")) != slurp(dir.file("other.jsonl")));
}

TEST_CASE("explicit flags override the config file") {
    TempDir dir;
    spit(dir.file("cfg.json"), R"({"data": {"episodes": 3, "steps": 1}})");
    CHECK(run_command({"gen-data", "--config", dir.file("cfg.json"), "--episodes",
                       "2", "--out", dir.path.string(), "--file", "d.jsonl"}) == 0);
    Dataset ds = load_dataset(dir.file("d.jsonl"));
    CHECK(ds.samples.size() == 2 * 1 * 4);  // episodes from the flag, steps from config
}

TEST_CASE("flow command with the analytic oracle") {
    TempDir dir;
    CHECK(run_command({"flow", "--oracle", "--history", "0:1,0", "--y0",
                       "0.2,0.1,-0.3,0.4", "--out", dir.path.string(), "--file",
                       "flow.json"}) == 0);
    auto j = nlohmann::json::parse(slurp(dir.file("flow.json")));
    CHECK(j["converged"] == true);
    REQUIRE(j.contains("attractor"));
    // Agent 0 seeing area 0 occupied pins the state to e0.
    std::vector<double> att = j["attractor"];
    REQUIRE(att.size() == 4);
    CHECK(att[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::abs(att[1]) + std::abs(att[2]) + std::abs(att[3]) <= 1e-6);

    // Missing history is a runtime error.
    CHECK(run_command({"flow", "--oracle", "--y0", "0,0,0,0", "--out",
                       dir.path.string()}) == 1);
}

TEST_CASE("fixed-points command finds both attractors of a two-state posterior") {
    TempDir dir;
    spit(dir.file("cfg.json"), R"({"flow": {"num_samples": 300}})");
    CHECK(run_command({"fixed-points", "--oracle", "--posterior", "--config",
                       dir.file("cfg.json"), "--history", "2:0,0", "--out",
                       dir.path.string(), "--file", "fp.json"}) == 0);
    auto j = nlohmann::json::parse(slurp(dir.file("fp.json")));
    REQUIRE(j["points"].size() == 2);
    double mass0 = j["basin_mass"][0], mass1 = j["basin_mass"][1];
    CHECK(mass0 + mass1 == doctest::Approx(1.0));
    CHECK(mass0 == doctest::Approx(0.5).epsilon(0.3));
    CHECK(j["stability"][0] == true);
    CHECK(j["stability"][1] == true);
    CHECK(j["tau"] == std::vector<double>({0.0, 0.0}));
}

TEST_CASE("intersect command keeps only the consistent state") {
    TempDir dir;
    spit(dir.file("cfg.json"), R"({"flow": {"num_samples": 200}})");
    // Truth e0 in the collectively observable instance: agents 0/1 see it,
    // agents 2/3 see nothing ({e0, e3} posterior). Only e0 survives.
    CHECK(run_command({"intersect", "--oracle", "--config", dir.file("cfg.json"),
                       "--history", "0:1,0", "--history", "1:1,0", "--history",
                       "2:0,0", "--history", "3:0,0", "--out", dir.path.string(),
                       "--file", "int.json"}) == 0);
    auto j = nlohmann::json::parse(slurp(dir.file("int.json")));
    REQUIRE(j["points"].size() == 1);
    std::vector<double> p = j["points"][0];
    CHECK(p[0] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("field command emits the grid CSV") {
    TempDir dir;
    CHECK(run_command({"field", "--oracle", "--history", "0:1,0", "--res", "5",
                       "--out", dir.path.string(), "--file", "f.csv"}) == 0);
    std::string csv = slurp(dir.file("f.csv"));
    CHECK(csv.rfind("y_in_0,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 26);  // header + 5x5
}

TEST_CASE("train, study, composite and eval round trip on a tiny setup") {
    TempDir dir;
    CHECK(run_command({"gen-data", "--episodes", "6", "--steps", "2", "--out",
                       dir.path.string(), "--file", "data.jsonl"}) == 0);
    spit(dir.file("cfg.json"), nlohmann::json{
        {"paths", {{"dataset", dir.file("data.jsonl")}}},
    }.dump());
    CHECK(run_command({"train", "--config", dir.file("cfg.json"), "--width", "8",
                       "--layers", "1", "--epochs", "5", "--batch", "16", "--lr",
                       "0.001", "--out", dir.path.string(), "--file", "model.bin",
                       "--loss-file", "loss.csv"}) == 0);
    DenoiserModel model = load_model(dir.file("model.bin"));
    CHECK(model.tau_dim == 4 + 2);  // agent one-hot + one observation
    CHECK(model.state_dim == 4);
    CHECK(model.hidden_width == 8);
    std::string loss = slurp(dir.file("loss.csv"));
    CHECK(loss.rfind("epoch,loss\n", 0) == 0);
    CHECK(std::count(loss.begin(), loss.end(), '\n') == 6);

    spit(dir.file("full.json"), nlohmann::json{
        {"paths", {{"dataset", dir.file("data.jsonl")},
                   {"model", dir.file("model.bin")}}},
        {"flow", {{"max_iters", 400}}},
    }.dump());
    CHECK(run_command({"study", "--config", dir.file("full.json"), "--out",
                       dir.path.string(), "--csv-file", "study.csv", "--json-file",
                       "study.json"}) == 0);
    auto sj = nlohmann::json::parse(slurp(dir.file("study.json")));
    CHECK(sj.contains("spearman_rho"));
    CHECK(sj.contains("bound_checks"));
    std::string scsv = slurp(dir.file("study.csv"));
    CHECK(scsv.rfind("tau_id,state_id,rank,deviation,lambda_max\n", 0) == 0);

    CHECK(run_command({"composite", "--config", dir.file("full.json"), "--history",
                       "0:0,0", "--history", "1:0,0", "--history", "2:0,0",
                       "--history", "3:0,0", "--k2", "4", "--truth", "1,0,0,0",
                       "--out", dir.path.string(), "--json-file", "comp.json",
                       "--csv-file", "comp.csv"}) == 0);
    auto cj = nlohmann::json::parse(slurp(dir.file("comp.json")));
    CHECK(cj["samples"].size() == 4);
    CHECK(cj["hops_per_sample"] == 24);
    CHECK(slurp(dir.file("comp.csv")).rfind("sample,accepted,", 0) == 0);

    CHECK(run_command({"eval", "--config", dir.file("full.json"), "--count", "3",
                       "--out", dir.path.string(), "--file", "eval.json"}) == 0);
    auto ej = nlohmann::json::parse(slurp(dir.file("eval.json")));
    CHECK(ej["count"] == 3);
    CHECK(ej["composite_psnr"].is_number());
    CHECK(ej["individual_psnr"].is_number());
}
