#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "ropelab/core.hpp"
#include "ropelab/rssm.hpp"
#include "ropelab/sim.hpp"

namespace ropelab {

// Union of simulation, model and evaluation-protocol settings, loadable from
// a key=value text file with per-key CLI overrides. `segment_count` and
// `horizon` are shared between the simulator and the model/dataset side.
struct ExperimentConfig {
    SimConfig sim;
    Hyperparams hp;
    std::size_t warmup = 5;
    std::size_t eval_horizon = 20;
    std::size_t rollouts = 100;
    std::uint64_t seed = 0;

    void validate() const {
        sim.validate();
        hp.validate();
        if (warmup == 0 || eval_horizon == 0 || rollouts == 0)
            throw ConfigError("ExperimentConfig: warmup/eval_horizon/rollouts must be >= 1");
    }
};

namespace config_detail {

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    std::istringstream is(value);
    T out;
    is >> out;
    if (is.fail() || !(is >> std::ws).eof())
        throw ConfigError("config: invalid value '" + value + "' for key '" + key + "'");
    return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;

inline const std::map<std::string, Setter>& setters() {
    auto num = [](auto member) {
        return [member](ExperimentConfig& c, const std::string& k, const std::string& v) {
            using T = std::decay_t<decltype(c.*member)>;
            c.*member = parse_number<T>(k, v);
        };
    };
    auto sim = [](auto member) {
        return [member](ExperimentConfig& c, const std::string& k, const std::string& v) {
            using T = std::decay_t<decltype(c.sim.*member)>;
            c.sim.*member = parse_number<T>(k, v);
        };
    };
    auto hp = [](auto member) {
        return [member](ExperimentConfig& c, const std::string& k, const std::string& v) {
            using T = std::decay_t<decltype(c.hp.*member)>;
            c.hp.*member = parse_number<T>(k, v);
        };
    };
    static const std::map<std::string, Setter> table = {
        {"segment_count",
         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
             c.sim.segment_count = parse_number<std::size_t>(k, v);
             c.hp.segment_count = c.sim.segment_count;
         }},
        {"horizon", sim(&SimConfig::horizon)},
        {"link_length",
         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
             c.sim.link_length = parse_number<double>(k, v);
             c.hp.link_length = c.sim.link_length;
         }},
        {"rope_radius", sim(&SimConfig::rope_radius)},
        {"ground_friction", sim(&SimConfig::ground_friction)},
        {"bending_stiffness", sim(&SimConfig::bending_stiffness)},
        {"damping", sim(&SimConfig::damping)},
        {"z_lift", sim(&SimConfig::z_lift)},
        {"action_translation", sim(&SimConfig::action_translation)},
        {"substeps", sim(&SimConfig::substeps)},
        {"relax_iters", sim(&SimConfig::relax_iters)},
        {"settle_iters", sim(&SimConfig::settle_iters)},
        {"polish_iters", sim(&SimConfig::polish_iters)},
        {"gravity_step", sim(&SimConfig::gravity_step)},
        {"link_tol", sim(&SimConfig::link_tol)},
        {"d_embed", hp(&Hyperparams::d_embed)},
        {"d_action", hp(&Hyperparams::d_action)},
        {"d_rnn", hp(&Hyperparams::d_rnn)},
        {"d_z", hp(&Hyperparams::d_z)},
        {"d_hidden", hp(&Hyperparams::d_hidden)},
        {"link_embed_dim", hp(&Hyperparams::link_embed_dim)},
        {"mlp_depth", hp(&Hyperparams::mlp_depth)},
        {"min_std", hp(&Hyperparams::min_std)},
        {"beta", hp(&Hyperparams::beta)},
        {"free_nats", hp(&Hyperparams::free_nats)},
        {"free_nats_init", hp(&Hyperparams::free_nats_init)},
        {"free_nats_anneal", hp(&Hyperparams::free_nats_anneal)},
        {"kl_balance", hp(&Hyperparams::kl_balance)},
        {"decoder_gain", hp(&Hyperparams::decoder_gain)},
        {"lr", hp(&Hyperparams::lr)},
        {"grad_clip", hp(&Hyperparams::grad_clip)},
        {"batch", hp(&Hyperparams::batch)},
        {"seq_len", hp(&Hyperparams::seq_len)},
        {"max_epochs", hp(&Hyperparams::max_epochs)},
        {"patience", hp(&Hyperparams::patience)},
        {"warmup", num(&ExperimentConfig::warmup)},
        {"eval_horizon", num(&ExperimentConfig::eval_horizon)},
        {"rollouts", num(&ExperimentConfig::rollouts)},
        {"seed", num(&ExperimentConfig::seed)},
    };
    return table;
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace config_detail

inline void apply_config_entry(ExperimentConfig& cfg, const std::string& key,
                               const std::string& value) {
    auto it = config_detail::setters().find(key);
    if (it == config_detail::setters().end())
        throw ConfigError("config: unknown key '" + key + "'");
    it->second(cfg, key, value);
}

// key=value per line; '#' starts a comment; blank lines ignored
inline ExperimentConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot read " + path.string());
    ExperimentConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string s = config_detail::trim(line.substr(0, line.find('#')));
        if (s.empty()) continue;
        std::size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value");
        apply_config_entry(cfg, config_detail::trim(s.substr(0, eq)),
                           config_detail::trim(s.substr(eq + 1)));
    }
    return cfg;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["sim"] = {{"segment_count", c.sim.segment_count},
                {"link_length", c.sim.link_length},
                {"rope_radius", c.sim.rope_radius},
                {"ground_friction", c.sim.ground_friction},
                {"bending_stiffness", c.sim.bending_stiffness},
                {"damping", c.sim.damping},
                {"z_lift", c.sim.z_lift},
                {"action_translation", c.sim.action_translation},
                {"horizon", c.sim.horizon},
                {"substeps", c.sim.substeps},
                {"relax_iters", c.sim.relax_iters},
                {"settle_iters", c.sim.settle_iters},
                {"polish_iters", c.sim.polish_iters},
                {"gravity_step", c.sim.gravity_step},
                {"link_tol", c.sim.link_tol}};
    j["model"] = c.hp;
    j["eval"] = {{"warmup", c.warmup}, {"eval_horizon", c.eval_horizon},
                 {"rollouts", c.rollouts}};
    j["seed"] = c.seed;
    return j;
}

}  // namespace ropelab
