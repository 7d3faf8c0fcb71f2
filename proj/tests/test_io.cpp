#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "rpo/checkpoint.hpp"
#include "rpo/config.hpp"

using namespace rpo;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run_cli(const std::string& args) {
    std::string cmd = std::string(RPOLAB_BIN) + " " + args + " > /dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

}  // namespace

TEST_CASE("checkpoint save/load round-trips losslessly") {
    auto world = build_world(4, 2);
    Rng rng(2);
    ModelDims dims;
    dims.hidden = 24;
    auto model = make_denoiser(dims, pretrain_vocabulary(world), rng);
    auto schedule = make_schedule(30, ScheduleKind::linear);

    auto dir = temp_dir("rpo_ckpt_test");
    Checkpoint ckpt{schedule, model, 42, 7};
    save_checkpoint(ckpt, dir / "m.ckpt");
    auto loaded = load_checkpoint(dir / "m.ckpt");

    REQUIRE(loaded.schedule.T == schedule.T);
    REQUIRE(loaded.schedule.kind == schedule.kind);
    REQUIRE(loaded.schedule.alpha_bar == schedule.alpha_bar);
    REQUIRE(loaded.model.vocab == model.vocab);
    REQUIRE(loaded.model.theta == model.theta);
    REQUIRE(loaded.model.dims.hidden == 24);
    REQUIRE(loaded.rng_seed == 42);
    REQUIRE(loaded.rng_counter == 7);

    // re-saving the loaded model reproduces the identical file
    save_checkpoint(loaded, dir / "m2.ckpt");
    REQUIRE(hash_file(dir / "m.ckpt") == hash_file(dir / "m2.ckpt"));

    // token index survives the round trip
    REQUIRE(loaded.model.token_id(model.vocab[3]) == 3);
    fs::remove_all(dir);
}

TEST_CASE("checkpoint loader rejects corrupt files") {
    auto dir = temp_dir("rpo_ckpt_bad");
    {
        std::ofstream out(dir / "bad.ckpt", std::ios::binary);
        out << "NOTACKPT00000000";
    }
    REQUIRE_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), std::runtime_error);
    REQUIRE_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
    fs::remove_all(dir);
}

TEST_CASE("config defaults pin the published hyperparameters") {
    RunConfig cfg;
    REQUIRE(cfg.train.beta == 1.0);
    REQUIRE(cfg.train.weight_decay == 0.01);
    REQUIRE(cfg.train.grad_clip_norm == 1.0);
    REQUIRE(cfg.train.max_steps == 400);
    REQUIRE(cfg.train.validate_every == 40);
    REQUIRE(cfg.train.n_train_prompts == 8);
    REQUIRE(cfg.train.n_gen_per_prompt == 4);
    REQUIRE(cfg.reward.lambda_train == 0.0);
    REQUIRE(cfg.reward.lambda_val == 0.3);
    REQUIRE(cfg.eval.n_per_prompt == 4);
    REQUIRE(kPaperLearningRate == 5e-6);
    TrainConfig paper = cfg.train;
    paper.use_paper_lr = true;
    REQUIRE(paper.effective_lr() == 5e-6);
    REQUIRE(cfg.sweep.lambdas == std::vector<double>{0.3, 0.5, 0.7});
}

TEST_CASE("config round-trip, canonical hash, validation errors") {
    RunConfig cfg;
    cfg.seed = 99;
    cfg.train.lr = 2e-3;
    auto dir = temp_dir("rpo_cfg_test");
    save_config(cfg, dir / "c.json");
    auto loaded = load_config(dir / "c.json");
    REQUIRE(canonical_json(loaded) == canonical_json(cfg));
    REQUIRE(config_hash(loaded) == config_hash(cfg));

    // field order does not affect the hash
    {
        std::ifstream in(dir / "c.json");
        nlohmann::json j;
        in >> j;
        nlohmann::json reordered;
        reordered["world"] = j["world"];
        reordered["seed"] = j["seed"];
        for (auto& [k, v] : j.items()) reordered[k] = v;
        std::ofstream out(dir / "re.json");
        out << reordered.dump(2);
    }
    REQUIRE(config_hash(load_config(dir / "re.json")) == config_hash(cfg));

    // malformed json
    {
        std::ofstream out(dir / "broken.json");
        out << "{ not json";
    }
    REQUIRE_THROWS_WITH(load_config(dir / "broken.json"),
                        Catch::Matchers::ContainsSubstring("parse error"));

    // missing field reports its name
    {
        nlohmann::json j(cfg);
        j["train"].erase("beta");
        std::ofstream out(dir / "missing.json");
        out << j.dump(2);
    }
    REQUIRE_THROWS_WITH(load_config(dir / "missing.json"),
                        Catch::Matchers::ContainsSubstring("beta"));

    // invariant violation carries the field path
    {
        nlohmann::json j(cfg);
        j["train"]["validate_every"] = 37;
        std::ofstream out(dir / "invalid.json");
        out << j.dump(2);
    }
    REQUIRE_THROWS_WITH(load_config(dir / "invalid.json"),
                        Catch::Matchers::ContainsSubstring("train"));

    {
        nlohmann::json j(cfg);
        j["reward"]["lambda_val"] = 1.7;
        std::ofstream out(dir / "lam.json");
        out << j.dump(2);
    }
    REQUIRE_THROWS_AS(load_config(dir / "lam.json"), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("cli: init-config writes a loadable default config") {
    auto dir = temp_dir("rpo_cli_init");
    auto cfg_path = dir / "cfg.json";
    REQUIRE(run_cli("init-config -o " + cfg_path.string()) == 0);
    REQUIRE(fs::exists(cfg_path));
    auto cfg = load_config(cfg_path);
    REQUIRE(cfg.train.max_steps == 400);
    // refuses to overwrite without --force
    REQUIRE(run_cli("init-config -o " + cfg_path.string()) != 0);
    REQUIRE(run_cli("init-config --force -o " + cfg_path.string()) == 0);
    fs::remove_all(dir);
}

TEST_CASE("cli: malformed config exits nonzero") {
    auto dir = temp_dir("rpo_cli_bad");
    {
        std::ofstream out(dir / "bad.json");
        out << "{\"seed\": 1}";  // missing sections
    }
    REQUIRE(run_cli("pretrain -c " + (dir / "bad.json").string() + " -o " +
                    (dir / "out").string()) != 0);
    fs::remove_all(dir);
}

TEST_CASE("cli: pretrain/finetune/eval/plot pipeline on a tiny config",
          "[cli_pipeline]") {
    auto dir = temp_dir("rpo_cli_pipe");
    RunConfig cfg;
    cfg.seed = 5;
    cfg.world.n_subjects = 4;
    cfg.schedule.T = 24;
    cfg.pretrain.steps = 250;
    cfg.pretrain.batch = 8;
    cfg.pretrain.log_every = 50;
    cfg.pretrain.convergence_ratio = 0.9;
    cfg.train.max_steps = 8;
    cfg.train.validate_every = 4;
    cfg.train.val_sampler_steps = 6;
    cfg.train.neg_sampler_steps = 8;
    cfg.train.n_val_images_per_prompt = 1;
    cfg.eval.n_per_prompt = 1;
    cfg.eval.sampler_steps = 8;
    auto cfg_path = dir / "cfg.json";
    save_config(cfg, cfg_path);

    auto p1 = dir / "pre1";
    auto p2 = dir / "pre2";
    REQUIRE(run_cli("pretrain -c " + cfg_path.string() + " -o " + p1.string() +
                    " --dump-images") == 0);
    REQUIRE(fs::exists(p1 / "base.ckpt"));
    REQUIRE(fs::exists(p1 / "world.json"));
    REQUIRE(fs::exists(p1 / "pretrain_log.csv"));
    REQUIRE(fs::exists(p1 / "config.json"));
    REQUIRE(fs::exists(p1 / "images"));

    // rerun reproduces identical artifacts
    REQUIRE(run_cli("pretrain -c " + cfg_path.string() + " -o " + p2.string()) ==
            0);
    REQUIRE(hash_file(p1 / "base.ckpt") == hash_file(p2 / "base.ckpt"));
    REQUIRE(hash_file(p1 / "pretrain_log.csv") ==
            hash_file(p2 / "pretrain_log.csv"));

    // refuses to reuse a non-empty run directory
    REQUIRE(run_cli("pretrain -c " + cfg_path.string() + " -o " + p1.string()) !=
            0);

    auto f1 = dir / "ft1";
    REQUIRE(run_cli("finetune -c " + cfg_path.string() + " -b " +
                    (p1 / "base.ckpt").string() + " -o " + f1.string()) == 0);
    REQUIRE(fs::exists(f1 / "train_log.csv"));
    REQUIRE(fs::exists(f1 / "best.ckpt"));
    REQUIRE(fs::exists(f1 / "final.ckpt"));
    REQUIRE(fs::exists(f1 / "preferences.log"));
    REQUIRE(fs::exists(f1 / "run_meta.json"));

    auto e1 = dir / "ev1";
    REQUIRE(run_cli("eval -c " + cfg_path.string() + " -m " +
                    (f1 / "best.ckpt").string() + " -o " + e1.string()) == 0);
    REQUIRE(fs::exists(e1 / "eval_report.json"));

    REQUIRE(run_cli("plot -r " + f1.string()) == 0);
    REQUIRE(fs::exists(f1 / "reward_curve.csv"));
    REQUIRE(fs::exists(f1 / "reward_curve.svg"));

    // missing checkpoint path errors out
    REQUIRE(run_cli("finetune -c " + cfg_path.string() + " -b " +
                    (dir / "nope.ckpt").string() + " -o " +
                    (dir / "ftx").string()) != 0);
    fs::remove_all(dir);
}
