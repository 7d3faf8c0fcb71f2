// rpolab: subject-driven finetuning lab driver.
//
// Subcommands: init-config, pretrain, finetune, eval, ablate, sweep, plot.
// Every run is reproducible from its config snapshot + seed; no command
// writes into an existing non-empty directory.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "rpo/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path out_root() {
    if (const char* env = std::getenv("RPOLAB_OUT_ROOT")) return fs::path(env);
    return fs::path("runs");
}

// run directories are append-only: refuse to reuse a non-empty one
fs::path prepare_out_dir(const std::string& flag_value,
                         const std::string& default_name) {
    fs::path dir = flag_value.empty() ? out_root() / default_name
                                      : fs::path(flag_value);
    if (fs::exists(dir) && !fs::is_empty(dir))
        throw std::runtime_error("output directory already exists and is not "
                                 "empty: " + dir.string());
    fs::create_directories(dir);
    return dir;
}

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

rpo::SubjectSpec pick_subject(const rpo::SubjectWorld& world,
                              const std::string& flag) {
    if (flag.empty()) return world.held_out();
    if (flag != world.held_out_id)
        std::cerr << "warning: subject " << flag
                  << " is not the held-out subject (" << world.held_out_id
                  << "); the base model has seen it during pretraining\n";
    return world.subject(flag);
}

void write_pretrain_log(const fs::path& path,
                        const std::vector<rpo::PretrainRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "step,train_loss,heldback_loss\n";
    for (const auto& r : rows)
        out << r.step << ',' << rpo::fmt_double(r.train_loss) << ','
            << rpo::fmt_double(r.heldback_loss) << '\n';
}

int cmd_init_config(const std::string& out_path, bool force) {
    fs::path path = out_path.empty() ? "rpo_config.json" : fs::path(out_path);
    if (fs::exists(path) && !force)
        throw std::runtime_error("config file exists (use --force): " +
                                 path.string());
    rpo::RunConfig cfg;
    rpo::save_config(cfg, path);
    std::cout << "wrote default config to " << path.string() << "\n";
    return 0;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_flag,
                 bool dump_images) {
    rpo::RunConfig cfg = rpo::load_config(config_path);
    fs::path dir = prepare_out_dir(out_flag, "pretrain");
    rpo::save_config(cfg, dir / "config.json");

    auto world = rpo::build_world(cfg.world.n_subjects, cfg.seed);
    rpo::save_world(world, dir / "world.json");
    auto schedule = cfg.schedule.make();

    if (dump_images) {
        fs::create_directories(dir / "images");
        for (const auto& s : world.subjects) {
            auto refs = rpo::reference_images(world, s, 1);
            rpo::write_pgm(dir / "images" / (s.subject_id + ".pgm"),
                           refs[0].pixels);
        }
    }

    std::cout << "pretraining on " << world.pretrain_subjects().size()
              << " subjects (held out: " << world.held_out_id << "), "
              << cfg.pretrain.steps << " steps...\n";
    auto result = rpo::pretrain(world, schedule, cfg.pretrain, cfg.seed);
    write_pretrain_log(dir / "pretrain_log.csv", result.log);
    rpo::Checkpoint ckpt{schedule, result.model, cfg.seed, 0};
    rpo::save_checkpoint(ckpt, dir / "base.ckpt");

    json meta{{"config_hash", rpo::config_hash(cfg)},
              {"seed", cfg.seed},
              {"initial_heldback_loss", result.initial_heldback},
              {"final_heldback_loss", result.final_heldback},
              {"checkpoint_hash",
               rpo::hex64(rpo::hash_file(dir / "base.ckpt"))}};
    write_json_file(dir / "run_meta.json", meta);
    std::cout << "heldback loss " << result.initial_heldback << " -> "
              << result.final_heldback << "\nbase checkpoint: "
              << (dir / "base.ckpt").string() << "\n";
    return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& base_path,
                 const std::string& out_flag, const std::string& subject_flag,
                 bool no_early_stop, bool no_pref_loss, int max_steps_override,
                 double lambda_val_override, std::int64_t seed_override) {
    rpo::RunConfig cfg = rpo::load_config(config_path);
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    if (max_steps_override > 0) cfg.train.max_steps = max_steps_override;
    if (lambda_val_override >= 0.0) cfg.reward.lambda_val = lambda_val_override;
    if (no_early_stop) cfg.train.early_stop = false;
    if (no_pref_loss) cfg.train.use_pref_loss = false;
    rpo::validate(cfg);

    rpo::Checkpoint base = rpo::load_checkpoint(base_path);
    auto world = rpo::build_world(cfg.world.n_subjects, cfg.seed);
    auto subject = pick_subject(world, subject_flag);

    fs::path dir = prepare_out_dir(out_flag, "finetune");
    rpo::save_config(cfg, dir / "config.json");

    std::cout << "finetuning for subject " << subject.subject_id << " ("
              << rpo::shape_name(subject.shape) << ", color " << subject.color
              << "), " << cfg.train.max_steps << " steps...\n";
    auto state = rpo::train_rpo(world, base.model, subject, base.schedule,
                                cfg.train, cfg.reward, cfg.seed, dir);

    json meta{{"config_hash", rpo::config_hash(cfg)},
              {"seed", cfg.seed},
              {"subject_id", subject.subject_id},
              {"early_stop", cfg.train.early_stop},
              {"use_pref_loss", cfg.train.use_pref_loss},
              {"best_step", state.best_step},
              {"best_val_reward", state.best_reward},
              {"n_negatives", state.negatives.size()},
              {"validation_prompts", "the 8 training prompts"},
              {"validation_sampler",
               "deterministic, " + std::to_string(cfg.train.val_sampler_steps) +
                   " steps, fixed per-run noise"},
              {"best_checkpoint_hash",
               rpo::hex64(rpo::hash_file(dir / "best.ckpt"))},
              {"final_checkpoint_hash",
               rpo::hex64(rpo::hash_file(dir / "final.ckpt"))}};
    write_json_file(dir / "run_meta.json", meta);
    std::cout << "best validation reward " << state.best_reward << " at step "
              << state.best_step << "\nselected checkpoint: "
              << (no_early_stop ? "final.ckpt" : "best.ckpt") << " in "
              << dir.string() << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& model_path,
             const std::string& out_flag, const std::string& subject_flag,
             std::int64_t seed_override) {
    rpo::RunConfig cfg = rpo::load_config(config_path);
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);

    rpo::Checkpoint ckpt = rpo::load_checkpoint(model_path);
    auto world = rpo::build_world(cfg.world.n_subjects, cfg.seed);
    auto subject = pick_subject(world, subject_flag);

    // models that never saw the subject token get the standard fresh-token
    // initialization so they can be scored as baselines
    if (!ckpt.model.has_token(rpo::kSubjectToken)) {
        std::string cls = rpo::SubjectWorld::class_token(subject.shape);
        ckpt.model.add_token(rpo::kSubjectToken, &cls, nullptr);
    }

    fs::path dir = prepare_out_dir(out_flag, "eval");
    rpo::save_config(cfg, dir / "config.json");

    auto prompts =
        rpo::SubjectWorld::training_prompts(subject.shape, rpo::kSubjectToken);
    auto refs = rpo::reference_images(world, subject, cfg.train.n_refs);
    rpo::OracleEmbedder embedder =
        rpo::OracleEmbedder(world).with_binding(rpo::kSubjectToken, subject);
    auto report =
        rpo::evaluate(ckpt.model, prompts, refs, embedder, ckpt.schedule,
                      cfg.eval, cfg.seed, rpo::config_hash(cfg),
                      cfg.reward.score_floor);
    write_json_file(dir / "eval_report.json", json(report));
    std::cout << "image_sim " << report.image_sim << "  text_sim "
              << report.text_sim << "  0.3-harmonic " << report.harmonic_03
              << "\nreport: " << (dir / "eval_report.json").string() << "\n";
    return 0;
}

std::vector<std::uint64_t> run_seeds(std::uint64_t base_seed, int n) {
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < n; ++i) seeds.push_back(base_seed + static_cast<std::uint64_t>(i));
    return seeds;
}

void print_trends(const std::vector<rpo::TrendCheck>& trends) {
    for (const auto& t : trends)
        std::cout << (t.pass() ? "  [ok]   " : "  [FAIL] ") << t.name << " ("
                  << t.wins << "/" << t.total << ", need " << t.needed
                  << ")\n";
}

int cmd_ablate(const std::string& config_path, const std::string& base_path,
               const std::string& out_flag, int seeds_override, int jobs,
               bool assert_trends) {
    rpo::RunConfig cfg = rpo::load_config(config_path);
    if (seeds_override > 0) cfg.ablation.seeds = seeds_override;
    rpo::validate(cfg);

    rpo::Checkpoint base = rpo::load_checkpoint(base_path);
    auto world = rpo::build_world(cfg.world.n_subjects, cfg.seed);
    auto subject = world.held_out();
    fs::path dir = prepare_out_dir(out_flag, "ablate");
    rpo::save_config(cfg, dir / "config.json");

    auto seeds = run_seeds(cfg.seed, cfg.ablation.seeds);
    std::cout << "ablation: 4 arms x " << seeds.size() << " seeds on subject "
              << subject.subject_id << "...\n";
    auto grid = rpo::run_ablation(world, base.model, subject, base.schedule,
                                  cfg.train, cfg.reward, cfg.eval, seeds,
                                  rpo::config_hash(cfg), dir, jobs);

    json trends_json = json::array();
    for (const auto& t : grid.trends)
        trends_json.push_back({{"name", t.name},
                               {"wins", t.wins},
                               {"total", t.total},
                               {"needed", t.needed},
                               {"pass", t.pass()}});
    write_json_file(dir / "trends.json",
                    json{{"complete", grid.complete}, {"trends", trends_json}});

    if (!grid.complete) {
        std::cout << "grid incomplete; partial ablation.csv written\n";
        for (const auto& r : grid.runs)
            if (!r.ok)
                std::cout << "  failed: " << r.arm << " seed " << r.seed << ": "
                          << r.error << "\n";
    }
    print_trends(grid.trends);
    std::cout << "results: " << (dir / "ablation.csv").string() << "\n";
    if (assert_trends && !grid.trends_pass()) return 1;
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& base_path,
              const std::string& out_flag, std::vector<double> lambdas,
              int seeds_override, int jobs, bool assert_trends) {
    rpo::RunConfig cfg = rpo::load_config(config_path);
    if (!lambdas.empty()) cfg.sweep.lambdas = std::move(lambdas);
    if (seeds_override > 0) cfg.sweep.seeds = seeds_override;
    rpo::validate(cfg);

    rpo::Checkpoint base = rpo::load_checkpoint(base_path);
    auto world = rpo::build_world(cfg.world.n_subjects, cfg.seed);
    auto subject = world.held_out();
    fs::path dir = prepare_out_dir(out_flag, "sweep");
    rpo::save_config(cfg, dir / "config.json");

    auto seeds = run_seeds(cfg.seed, cfg.sweep.seeds);
    std::cout << "lambda sweep over " << cfg.sweep.lambdas.size()
              << " values x " << seeds.size() << " seeds...\n";
    auto report = rpo::run_lambda_sweep(
        world, base.model, subject, base.schedule, cfg.train, cfg.reward,
        cfg.eval, cfg.sweep.lambdas, seeds, rpo::config_hash(cfg), dir, jobs);

    json trends_json = json::array();
    for (const auto& t : report.trends)
        trends_json.push_back({{"name", t.name},
                               {"wins", t.wins},
                               {"total", t.total},
                               {"needed", t.needed},
                               {"pass", t.pass()}});
    write_json_file(dir / "trends.json", json{{"complete", report.complete},
                                              {"trends", trends_json}});
    print_trends(report.trends);
    std::cout << "results: " << (dir / "sweep.csv").string() << "\n";
    if (assert_trends && !report.trends_pass()) return 1;
    return 0;
}

int cmd_plot(const std::string& run_dir) {
    auto points = rpo::export_reward_curve(run_dir);
    std::cout << "plotted " << points.size() << " validation points to "
              << (fs::path(run_dir) / "reward_curve.svg").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rpolab: preference-finetuning laboratory for subject-driven "
                 "generation"};
    app.require_subcommand(1);

    // init-config
    auto* init = app.add_subcommand("init-config", "write a default config file");
    std::string init_out;
    bool init_force = false;
    init->add_option("-o,--out", init_out, "output path (default rpo_config.json)");
    init->add_flag("--force", init_force, "overwrite an existing file");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "build the world and pretrain the base model");
    std::string pre_cfg, pre_out;
    bool pre_dump = false;
    pre->add_option("-c,--config", pre_cfg, "config file")->required();
    pre->add_option("-o,--out", pre_out, "output directory");
    pre->add_flag("--dump-images", pre_dump, "export subject reference PGMs");

    // finetune
    auto* ft = app.add_subcommand("finetune", "RPO finetuning for one subject");
    std::string ft_cfg, ft_base, ft_out, ft_subject;
    bool ft_no_es = false, ft_no_pref = false;
    int ft_max_steps = 0;
    double ft_lambda = -1.0;
    std::int64_t ft_seed = -1;
    ft->add_option("-c,--config", ft_cfg, "config file")->required();
    ft->add_option("-b,--base", ft_base, "base checkpoint")->required();
    ft->add_option("-o,--out", ft_out, "output directory");
    ft->add_option("-s,--subject", ft_subject, "subject id (default: held-out)");
    ft->add_flag("--no-early-stop", ft_no_es, "return the final-step checkpoint");
    ft->add_flag("--no-pref-loss", ft_no_pref, "disable the preference loss");
    ft->add_option("--max-steps", ft_max_steps, "override train.max_steps");
    ft->add_option("--lambda-val", ft_lambda, "override reward.lambda_val");
    ft->add_option("--seed", ft_seed, "override config seed");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_cfg, ev_model, ev_out, ev_subject;
    std::int64_t ev_seed = -1;
    ev->add_option("-c,--config", ev_cfg, "config file")->required();
    ev->add_option("-m,--model", ev_model, "model checkpoint")->required();
    ev->add_option("-o,--out", ev_out, "output directory");
    ev->add_option("-s,--subject", ev_subject, "subject id (default: held-out)");
    ev->add_option("--seed", ev_seed, "override config seed");

    // ablate
    auto* ab = app.add_subcommand("ablate", "run the four-arm regularization ablation");
    std::string ab_cfg, ab_base, ab_out;
    int ab_seeds = 0, ab_jobs = 1;
    bool ab_assert = false;
    ab->add_option("-c,--config", ab_cfg, "config file")->required();
    ab->add_option("-b,--base", ab_base, "base checkpoint")->required();
    ab->add_option("-o,--out", ab_out, "output directory");
    ab->add_option("--seeds", ab_seeds, "number of seeds (default from config)");
    ab->add_option("-j,--jobs", ab_jobs, "parallel runs");
    ab->add_flag("--assert-trends", ab_assert, "exit nonzero unless trends hold");

    // sweep
    auto* sw = app.add_subcommand("sweep", "lambda_val sweep");
    std::string sw_cfg, sw_base, sw_out;
    std::vector<double> sw_lambdas;
    int sw_seeds = 0, sw_jobs = 1;
    bool sw_assert = false;
    sw->add_option("-c,--config", sw_cfg, "config file")->required();
    sw->add_option("-b,--base", sw_base, "base checkpoint")->required();
    sw->add_option("-o,--out", sw_out, "output directory");
    sw->add_option("--lambdas", sw_lambdas, "lambda values (default from config)");
    sw->add_option("--seeds", sw_seeds, "number of seeds (default from config)");
    sw->add_option("-j,--jobs", sw_jobs, "parallel runs");
    sw->add_flag("--assert-trends", sw_assert, "exit nonzero unless trends hold");

    // plot
    auto* pl = app.add_subcommand("plot", "export the validation reward curve");
    std::string pl_run;
    pl->add_option("-r,--run", pl_run, "run directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (init->parsed()) return cmd_init_config(init_out, init_force);
        if (pre->parsed()) return cmd_pretrain(pre_cfg, pre_out, pre_dump);
        if (ft->parsed())
            return cmd_finetune(ft_cfg, ft_base, ft_out, ft_subject, ft_no_es,
                                ft_no_pref, ft_max_steps, ft_lambda, ft_seed);
        if (ev->parsed())
            return cmd_eval(ev_cfg, ev_model, ev_out, ev_subject, ev_seed);
        if (ab->parsed())
            return cmd_ablate(ab_cfg, ab_base, ab_out, ab_seeds, ab_jobs,
                              ab_assert);
        if (sw->parsed())
            return cmd_sweep(sw_cfg, sw_base, sw_out, sw_lambdas, sw_seeds,
                             sw_jobs, sw_assert);
        if (pl->parsed()) return cmd_plot(pl_run);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
