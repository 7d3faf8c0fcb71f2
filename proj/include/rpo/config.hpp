#pragma once

#include "rpo/eval.hpp"

namespace rpo {

struct WorldConfig {
    int n_subjects = 12;
};

struct ScheduleConfig {
    int T = 100;
    std::string kind = "cosine";

    NoiseSchedule make() const { return make_schedule(T, parse_schedule_kind(kind)); }
};

struct SweepConfig {
    std::vector<double> lambdas{0.3, 0.5, 0.7};
    int seeds = 5;
};

struct AblationConfig {
    int seeds = 5;
};

struct RunConfig {
    std::uint64_t seed = 7;
    WorldConfig world;
    ScheduleConfig schedule;
    PretrainConfig pretrain;
    TrainConfig train;
    RewardConfig reward;
    EvalParams eval;
    SweepConfig sweep;
    AblationConfig ablation;
};

inline void to_json(nlohmann::json& j, const WorldConfig& c) {
    j = nlohmann::json{{"n_subjects", c.n_subjects}};
}
inline void from_json(const nlohmann::json& j, WorldConfig& c) {
    j.at("n_subjects").get_to(c.n_subjects);
}

inline void to_json(nlohmann::json& j, const ScheduleConfig& c) {
    j = nlohmann::json{{"T", c.T}, {"kind", c.kind}};
}
inline void from_json(const nlohmann::json& j, ScheduleConfig& c) {
    j.at("T").get_to(c.T);
    j.at("kind").get_to(c.kind);
}

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = nlohmann::json{{"steps", c.steps},
                       {"batch", c.batch},
                       {"lr", c.lr},
                       {"weight_decay", c.weight_decay},
                       {"grad_clip_norm", c.grad_clip_norm},
                       {"log_every", c.log_every},
                       {"convergence_ratio", c.convergence_ratio},
                       {"heldback_stride", c.heldback_stride},
                       {"heldback_eval_draws", c.heldback_eval_draws},
                       {"hidden", c.hidden},
                       {"time_dim", c.time_dim},
                       {"cond_dim", c.cond_dim}};
}
inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
    j.at("steps").get_to(c.steps);
    j.at("batch").get_to(c.batch);
    j.at("lr").get_to(c.lr);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("grad_clip_norm").get_to(c.grad_clip_norm);
    j.at("log_every").get_to(c.log_every);
    j.at("convergence_ratio").get_to(c.convergence_ratio);
    j.at("heldback_stride").get_to(c.heldback_stride);
    j.at("heldback_eval_draws").get_to(c.heldback_eval_draws);
    j.at("hidden").get_to(c.hidden);
    j.at("time_dim").get_to(c.time_dim);
    j.at("cond_dim").get_to(c.cond_dim);
}

inline void to_json(nlohmann::json& j, const EvalParams& c) {
    j = nlohmann::json{{"n_per_prompt", c.n_per_prompt},
                       {"sampler_steps", c.sampler_steps},
                       {"eta", c.eta}};
}
inline void from_json(const nlohmann::json& j, EvalParams& c) {
    j.at("n_per_prompt").get_to(c.n_per_prompt);
    j.at("sampler_steps").get_to(c.sampler_steps);
    j.at("eta").get_to(c.eta);
}

inline void to_json(nlohmann::json& j, const SweepConfig& c) {
    j = nlohmann::json{{"lambdas", c.lambdas}, {"seeds", c.seeds}};
}
inline void from_json(const nlohmann::json& j, SweepConfig& c) {
    j.at("lambdas").get_to(c.lambdas);
    j.at("seeds").get_to(c.seeds);
}

inline void to_json(nlohmann::json& j, const AblationConfig& c) {
    j = nlohmann::json{{"seeds", c.seeds}};
}
inline void from_json(const nlohmann::json& j, AblationConfig& c) {
    j.at("seeds").get_to(c.seeds);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{{"seed", c.seed},         {"world", c.world},
                       {"schedule", c.schedule}, {"pretrain", c.pretrain},
                       {"train", c.train},       {"reward", c.reward},
                       {"eval", c.eval},         {"sweep", c.sweep},
                       {"ablation", c.ablation}};
}
inline void from_json(const nlohmann::json& j, RunConfig& c) {
    j.at("seed").get_to(c.seed);
    j.at("world").get_to(c.world);
    j.at("schedule").get_to(c.schedule);
    j.at("pretrain").get_to(c.pretrain);
    j.at("train").get_to(c.train);
    j.at("reward").get_to(c.reward);
    j.at("eval").get_to(c.eval);
    j.at("sweep").get_to(c.sweep);
    j.at("ablation").get_to(c.ablation);
}

class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& what)
        : std::runtime_error("config error at " + field + ": " + what),
          field(std::move(field)) {}
    std::string field;
};

inline void validate(const RunConfig& c) {
    if (c.world.n_subjects < 2)
        throw ConfigError("world.n_subjects", "must be >= 2");
    if (c.schedule.T < 2) throw ConfigError("schedule.T", "must be >= 2");
    try {
        parse_schedule_kind(c.schedule.kind);
    } catch (const std::exception& e) {
        throw ConfigError("schedule.kind", e.what());
    }
    if (c.pretrain.steps <= 0) throw ConfigError("pretrain.steps", "must be > 0");
    if (c.pretrain.batch <= 0) throw ConfigError("pretrain.batch", "must be > 0");
    if (!(c.pretrain.lr > 0)) throw ConfigError("pretrain.lr", "must be > 0");
    if (c.pretrain.log_every <= 0)
        throw ConfigError("pretrain.log_every", "must be > 0");
    if (!(c.pretrain.convergence_ratio > 0))
        throw ConfigError("pretrain.convergence_ratio", "must be > 0");
    try {
        c.train.validate();
    } catch (const std::exception& e) {
        throw ConfigError("train", e.what());
    }
    try {
        c.reward.validate();
    } catch (const std::exception& e) {
        throw ConfigError("reward", e.what());
    }
    try {
        c.eval.validate();
    } catch (const std::exception& e) {
        throw ConfigError("eval", e.what());
    }
    for (double l : c.sweep.lambdas)
        if (l < 0.0 || l > 1.0)
            throw ConfigError("sweep.lambdas", "values must be in [0,1]");
    if (c.sweep.lambdas.empty())
        throw ConfigError("sweep.lambdas", "must not be empty");
    if (c.sweep.seeds < 1) throw ConfigError("sweep.seeds", "must be >= 1");
    if (c.ablation.seeds < 3)
        throw ConfigError("ablation.seeds", "must be >= 3");
    if (c.train.val_sampler_steps > c.schedule.T)
        throw ConfigError("train.val_sampler_steps", "must be <= schedule.T");
    if (c.eval.sampler_steps > c.schedule.T)
        throw ConfigError("eval.sampler_steps", "must be <= schedule.T");
}

// canonical serialization (nlohmann sorts object keys); content-equal
// configs hash identically regardless of field order in the source file
inline std::string canonical_json(const RunConfig& c) {
    return nlohmann::json(c).dump();
}

inline std::string config_hash(const RunConfig& c) {
    return hex64(hash_bytes(canonical_json(c)));
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("config parse error in " + path.string() +
                                 ": " + e.what());
    }
    RunConfig cfg;
    try {
        j.get_to(cfg);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("config field error in " + path.string() +
                                 ": " + e.what());
    }
    validate(cfg);
    return cfg;
}

inline void save_config(const RunConfig& cfg,
                        const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write config " + path.string());
    out << nlohmann::json(cfg).dump(2) << '\n';
}

}  // namespace rpo
