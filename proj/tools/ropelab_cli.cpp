// Command-line front end: dataset generation, training, evaluation,
// latency benchmarking and artifact inspection.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ropelab/config.hpp"
#include "ropelab/data.hpp"
#include "ropelab/rollout.hpp"
#include "ropelab/rssm.hpp"
#include "ropelab/sim.hpp"
#include "ropelab/topology.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ropelab;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;  // key=value
};

ExperimentConfig resolve_config(const CommonOpts& c) {
    ExperimentConfig cfg;
    if (!c.config_path.empty()) cfg = load_config_file(c.config_path);
    for (const std::string& kv : c.overrides) {
        std::size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        apply_config_entry(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

void add_common(CLI::App* app, CommonOpts& c) {
    app->add_option("--config", c.config_path, "key=value config file");
    app->add_option("--set", c.overrides, "override a config key (key=value), repeatable");
}

void write_run_manifest(const fs::path& out_dir, const std::string& command,
                        const ExperimentConfig& cfg, const json& extra) {
    json j;
    j["command"] = command;
    j["config"] = config_to_json(cfg);
    for (auto& [k, v] : extra.items()) j[k] = v;
    std::ofstream os(out_dir / "run_manifest.json");
    if (!os) throw IoError("cannot write run_manifest.json under " + out_dir.string());
    os << j.dump(2) << "\n";
}

DatasetManifest manifest_for(const ExperimentConfig& cfg, std::size_t n) {
    DatasetManifest m;
    m.segment_count = cfg.sim.segment_count;
    m.link_length = cfg.sim.link_length;
    m.horizon = cfg.sim.horizon;
    m.n_trajectories = n;
    m.base_seed = cfg.seed;
    return m;
}

int cmd_gen_data(const CommonOpts& common, const std::string& out, std::size_t n,
                 std::optional<std::uint64_t> seed, std::size_t threads) {
    ExperimentConfig cfg = resolve_config(common);
    if (seed) cfg.seed = *seed;
    cfg.sim.validate();
    auto trajs = generate_dataset(cfg.sim, n, cfg.seed, threads);
    DatasetManifest m = manifest_for(cfg, n);
    split(m, 0.8, 0.1, 0.1, cfg.seed);
    fs::create_directories(out);
    save_dataset(trajs, m, out);
    write_run_manifest(out, "gen-data", cfg,
                       {{"n_trajectories", n}, {"threads", threads}});
    std::cout << json{{"dataset", out}, {"n_trajectories", n}}.dump() << "\n";
    return 0;
}

int cmd_train(const CommonOpts& common, const std::string& data, const std::string& out,
              std::optional<std::uint64_t> seed) {
    ExperimentConfig cfg = resolve_config(common);
    if (seed) cfg.seed = *seed;
    auto [m, trajs] = load_dataset(data);
    cfg.sim.segment_count = m.segment_count;
    cfg.sim.horizon = m.horizon;
    cfg.hp.segment_count = m.segment_count;
    cfg.hp.validate();
    fs::create_directories(out);
    std::ofstream csv(fs::path(out) / "training_log.csv");
    if (!csv) throw IoError("cannot write training_log.csv under " + out);
    auto result = train(trajs, m, cfg.hp, cfg.seed, &csv);
    fs::path ckpt = fs::path(out) / "checkpoint.bin";
    save_checkpoint(result.best, ckpt);
    write_run_manifest(out, "train", cfg,
                       {{"dataset", data},
                        {"checkpoint", ckpt.string()},
                        {"best_epoch", result.best_epoch},
                        {"best_val_loss", result.best_val},
                        {"epochs_run", result.log.size()}});
    std::cout << json{{"checkpoint", ckpt.string()},
                      {"best_epoch", result.best_epoch},
                      {"best_val_loss", result.best_val}}
                     .dump()
              << "\n";
    return 0;
}

struct EvalOpts {
    std::string checkpoint, data, out, baseline;
    std::size_t warmup = 5, horizon = 20, rollouts = 100;
    std::optional<std::uint64_t> seed;
};

std::unique_ptr<Predictor> make_predictor(const EvalOpts& e) {
    if (e.baseline == "persistence") return std::make_unique<PersistencePredictor>();
    if (!e.baseline.empty()) throw ConfigError("unknown baseline '" + e.baseline + "'");
    if (e.checkpoint.empty()) throw ConfigError("need --checkpoint or --baseline");
    return std::make_unique<RssmPredictor>(load_checkpoint(e.checkpoint));
}

int cmd_eval_rmse(const CommonOpts& common, const EvalOpts& e) {
    ExperimentConfig cfg = resolve_config(common);
    if (e.seed) cfg.seed = *e.seed;
    auto [m, trajs] = load_dataset(e.data);
    if (m.test.empty()) throw EmptyDataset("dataset has no test split");
    auto predictor = make_predictor(e);
    auto rep = evaluate(*predictor, trajs, m.test, e.rollouts, e.warmup, e.horizon,
                        m.link_length, cfg.seed);
    fs::create_directories(e.out);
    std::ofstream csv(fs::path(e.out) / "rmse.csv");
    if (!csv) throw IoError("cannot write rmse.csv under " + e.out);
    write_rmse_csv(csv, rep);
    write_run_manifest(e.out, "eval-rmse", cfg,
                       {{"dataset", e.data},
                        {"checkpoint", e.checkpoint},
                        {"baseline", e.baseline},
                        {"warmup", e.warmup},
                        {"horizon", e.horizon},
                        {"rollouts", e.rollouts}});
    std::cout << json{{"rmse_csv", (fs::path(e.out) / "rmse.csv").string()},
                      {"final_rmse_mean_mm", rep.rmse_mean.back()}}
                     .dump()
              << "\n";
    return 0;
}

int cmd_eval_topology(const CommonOpts& common, const EvalOpts& e) {
    ExperimentConfig cfg = resolve_config(common);
    if (e.seed) cfg.seed = *e.seed;
    auto [m, trajs] = load_dataset(e.data);
    if (m.test.empty()) throw EmptyDataset("dataset has no test split");
    auto predictor = make_predictor(e);

    // same deterministic window drawing as evaluate()
    Rng rng = Rng::stream(cfg.seed, 0);
    const std::size_t T = m.horizon;
    if (e.warmup + e.horizon - 1 > T)
        throw ProtocolError("warmup + horizon exceeds trajectory length");
    const std::size_t max_start = T - (e.warmup + e.horizon - 1);
    std::vector<double> match_sum(e.horizon, 0), match_sq(e.horizon, 0),
        ambiguous(e.horizon, 0);
    for (std::size_t r = 0; r < e.rollouts; ++r) {
        std::size_t k = m.test[rng.next_below(m.test.size())];
        std::size_t start = static_cast<std::size_t>(rng.next_below(max_start + 1));
        auto pred = predictor->rollout(trajs[k], start, e.warmup, e.horizon, m.link_length);
        for (std::size_t t = 0; t < e.horizon; ++t) {
            const RopeState& truth = trajs[k].states[start + e.warmup + t];
            double v = 0;
            try {
                v = gauss_code(pred[t]) == gauss_code(truth) ? 1.0 : 0.0;
            } catch (const AmbiguousCrossing&) {
                ambiguous[t] += 1.0;
            }
            match_sum[t] += v;
            match_sq[t] += v * v;
        }
    }
    fs::create_directories(e.out);
    std::ofstream csv(fs::path(e.out) / "topology.csv");
    if (!csv) throw IoError("cannot write topology.csv under " + e.out);
    csv << "step,match_fraction_mean,match_fraction_std,ambiguous_fraction\n";
    double n = static_cast<double>(e.rollouts);
    for (std::size_t t = 0; t < e.horizon; ++t) {
        double mean = match_sum[t] / n;
        double var = e.rollouts > 1 ? (match_sq[t] - n * mean * mean) / (n - 1) : 0.0;
        csv << (t + 1) << ',' << mean << ',' << std::sqrt(std::max(0.0, var)) << ','
            << ambiguous[t] / n << "\n";
    }
    write_run_manifest(e.out, "eval-topology", cfg,
                       {{"dataset", e.data},
                        {"checkpoint", e.checkpoint},
                        {"baseline", e.baseline},
                        {"warmup", e.warmup},
                        {"horizon", e.horizon},
                        {"rollouts", e.rollouts}});
    std::cout << json{{"topology_csv", (fs::path(e.out) / "topology.csv").string()}}.dump()
              << "\n";
    return 0;
}

int cmd_bench(const std::string& checkpoint, std::size_t steps, std::size_t repeats,
              const std::string& out) {
    ModelParams model = load_checkpoint(checkpoint);
    auto stats = bench_latency(model, steps, repeats);
    fs::create_directories(out);
    std::ofstream csv(fs::path(out) / "latency.csv");
    if (!csv) throw IoError("cannot write latency.csv under " + out);
    std::string label = "L" + std::to_string(model.hp.segment_count) + "_rnn" +
                        std::to_string(model.hp.d_rnn);
    write_latency_csv(csv, label, stats);
    std::cout << json{{"mean_ms", stats.mean_ms}, {"std_ms", stats.std_ms}}.dump() << "\n";
    return 0;
}

int cmd_inspect(const std::string& data, const std::string& checkpoint) {
    json j;
    if (!data.empty()) {
        DatasetManifest m = load_manifest(data);
        j["manifest"] = {{"segment_count", m.segment_count},
                         {"link_length", m.link_length},
                         {"horizon", m.horizon},
                         {"n_trajectories", m.n_trajectories},
                         {"base_seed", m.base_seed},
                         {"split_sizes",
                          {{"train", m.train.size()},
                           {"val", m.val.size()},
                           {"test", m.test.size()}}}};
        j["transitions"] = m.n_trajectories * (m.horizon + 1);
    }
    if (!checkpoint.empty()) {
        ModelParams p = load_checkpoint(checkpoint);
        j["hyperparams"] = p.hp;
        j["parameter_count"] = p.parameter_count();
    }
    if (j.empty()) throw ConfigError("inspect: need --data and/or --checkpoint");
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rope latent-dynamics toolkit"};
    app.require_subcommand(1);

    CommonOpts gen_common;
    std::string gen_out;
    std::size_t gen_n = 100, gen_threads = 1;
    std::optional<std::uint64_t> gen_seed;
    auto* gen = app.add_subcommand("gen-data", "simulate and persist a trajectory dataset");
    add_common(gen, gen_common);
    gen->add_option("--out", gen_out)->required();
    gen->add_option("--n", gen_n);
    gen->add_option("--seed", gen_seed);
    gen->add_option("--threads", gen_threads);

    CommonOpts train_common;
    std::string train_data, train_out;
    std::optional<std::uint64_t> train_seed;
    auto* tr = app.add_subcommand("train", "train the latent dynamics model");
    add_common(tr, train_common);
    tr->add_option("--data", train_data)->required();
    tr->add_option("--out", train_out)->required();
    tr->add_option("--seed", train_seed);

    CommonOpts rmse_common, topo_common;
    EvalOpts rmse_opts, topo_opts;
    auto add_eval = [](CLI::App* sub, EvalOpts& e) {
        sub->add_option("--checkpoint", e.checkpoint);
        sub->add_option("--baseline", e.baseline);
        sub->add_option("--data", e.data)->required();
        sub->add_option("--out", e.out)->required();
        sub->add_option("--warmup", e.warmup);
        sub->add_option("--horizon", e.horizon);
        sub->add_option("--rollouts", e.rollouts);
        sub->add_option("--seed", e.seed);
    };
    auto* er = app.add_subcommand("eval-rmse", "open-loop RMSE evaluation");
    add_common(er, rmse_common);
    add_eval(er, rmse_opts);
    auto* et = app.add_subcommand("eval-topology", "Gauss-code match evaluation");
    add_common(et, topo_common);
    add_eval(et, topo_opts);

    std::string bench_ckpt, bench_out;
    std::size_t bench_steps = 1000, bench_repeats = 10;
    auto* be = app.add_subcommand("bench", "latent-step latency benchmark");
    be->add_option("--checkpoint", bench_ckpt)->required();
    be->add_option("--steps", bench_steps);
    be->add_option("--repeats", bench_repeats);
    be->add_option("--out", bench_out)->required();

    std::string ins_data, ins_ckpt;
    auto* in = app.add_subcommand("inspect", "print dataset/checkpoint metadata as JSON");
    in->add_option("--data", ins_data);
    in->add_option("--checkpoint", ins_ckpt);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_common, gen_out, gen_n, gen_seed, gen_threads);
        if (tr->parsed()) return cmd_train(train_common, train_data, train_out, train_seed);
        if (er->parsed()) return cmd_eval_rmse(rmse_common, rmse_opts);
        if (et->parsed()) return cmd_eval_topology(topo_common, topo_opts);
        if (be->parsed()) return cmd_bench(bench_ckpt, bench_steps, bench_repeats, bench_out);
        if (in->parsed()) return cmd_inspect(ins_data, ins_ckpt);
    } catch (const std::exception& ex) {
        std::cerr << nlohmann::json{{"error", ex.what()}}.dump() << "\n";
        return 1;
    }
    return 1;
}
