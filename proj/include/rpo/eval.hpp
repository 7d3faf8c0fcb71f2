#pragma once

#include <algorithm>
#include <atomic>
#include <thread>

#include "rpo/train.hpp"

namespace rpo {

struct EvalParams {
    int n_per_prompt = 4;
    int sampler_steps = 0;  // 0 = full T
    double eta = 1.0;

    void validate() const {
        if (n_per_prompt <= 0)
            throw std::invalid_argument("eval.n_per_prompt must be > 0");
        if (sampler_steps < 0)
            throw std::invalid_argument("eval.sampler_steps must be >= 0");
        if (eta < 0.0)
            throw std::invalid_argument("eval.eta must be >= 0");
    }
};

struct PromptScore {
    std::string prompt;
    double image_sim = 0.0;
    double text_sim = 0.0;
    double harmonic_03 = 0.0;
    int n_images = 0;
};

struct EvalReport {
    double image_sim = 0.0;   // mean align_i over all generations
    double text_sim = 0.0;    // mean align_t
    double harmonic_03 = 0.0; // mean 0.3-harmonic reward
    std::vector<PromptScore> per_prompt;
    std::uint64_t seed = 0;
    std::string config_hash;
};

inline void to_json(nlohmann::json& j, const PromptScore& s) {
    j = nlohmann::json{{"prompt", s.prompt},
                       {"image_sim", s.image_sim},
                       {"text_sim", s.text_sim},
                       {"harmonic_03", s.harmonic_03},
                       {"n_images", s.n_images}};
}

inline void to_json(nlohmann::json& j, const EvalReport& r) {
    j = nlohmann::json{{"image_sim", r.image_sim},
                       {"text_sim", r.text_sim},
                       {"harmonic_03", r.harmonic_03},
                       {"per_prompt", r.per_prompt},
                       {"seed", r.seed},
                       {"config_hash", r.config_hash}};
}

// sampler seam shared with validation; tests inject copy / noise generators
inline EvalReport evaluate_with_sampler(const ImageSampler& sampler,
                                        const std::vector<PromptSpec>& prompts,
                                        const std::vector<Vec>& ref_embeddings,
                                        const OracleEmbedder& embedder,
                                        int n_per_prompt, std::uint64_t seed,
                                        const std::string& config_hash,
                                        double score_floor = 1e-6) {
    if (prompts.empty()) throw std::invalid_argument("evaluate: no prompts");
    if (n_per_prompt <= 0)
        throw std::invalid_argument("evaluate: n_per_prompt must be > 0");
    EvalReport report;
    report.seed = seed;
    report.config_hash = config_hash;
    double sum_i = 0.0, sum_t = 0.0, sum_h = 0.0;
    for (const auto& prompt : prompts) {
        Vec txt = embedder.embed_text(prompt);
        PromptScore ps;
        ps.prompt = prompt.text();
        ps.n_images = n_per_prompt;
        for (int j = 0; j < n_per_prompt; ++j) {
            Vec img = sampler(prompt, j);
            Vec emb = embedder.embed_image(img);
            ScorePair s;
            s.align_i = align_i(emb, ref_embeddings);
            s.align_t = (cosine(emb, txt) + 1.0) / 2.0;
            double h = harmonic_reward(s, 0.3, score_floor);
            ps.image_sim += s.align_i;
            ps.text_sim += s.align_t;
            ps.harmonic_03 += h;
            sum_i += s.align_i;
            sum_t += s.align_t;
            sum_h += h;
        }
        ps.image_sim /= n_per_prompt;
        ps.text_sim /= n_per_prompt;
        ps.harmonic_03 /= n_per_prompt;
        report.per_prompt.push_back(std::move(ps));
    }
    const double n = static_cast<double>(prompts.size()) * n_per_prompt;
    report.image_sim = sum_i / n;
    report.text_sim = sum_t / n;
    report.harmonic_03 = sum_h / n;
    return report;
}

inline EvalReport evaluate(const DenoiserModel& model,
                           const std::vector<PromptSpec>& prompts,
                           const std::vector<RenderedImage>& refs,
                           const OracleEmbedder& embedder,
                           const NoiseSchedule& schedule, const EvalParams& ep,
                           std::uint64_t seed, const std::string& config_hash,
                           double score_floor = 1e-6) {
    ep.validate();
    std::vector<Vec> ref_embeddings;
    for (const auto& r : refs)
        ref_embeddings.push_back(embedder.embed_image(r.pixels));
    const int steps = ep.sampler_steps > 0 ? ep.sampler_steps : schedule.T;
    auto sampler = [&](const PromptSpec& prompt, int j) {
        Rng rng = Rng::stream(seed, "eval.noise", hash_bytes(prompt.text()),
                              static_cast<std::uint64_t>(j));
        return sample(model, prompt.tokens(), schedule, steps, ep.eta, rng);
    };
    return evaluate_with_sampler(sampler, prompts, ref_embeddings, embedder,
                                 ep.n_per_prompt, seed, config_hash,
                                 score_floor);
}

// --------------------------------------------------------------- ablation

struct ArmSpec {
    std::string name;
    bool use_pref_loss = false;
    bool early_stop = false;
};

inline const std::array<ArmSpec, 4>& ablation_arms() {
    static const std::array<ArmSpec, 4> arms{{
        {"pure_sim", false, false},
        {"pref_no_earlystop", true, false},
        {"earlystop_no_pref", false, true},
        {"full_rpo", true, true},
    }};
    return arms;
}

struct RunRecord {
    std::string arm;
    std::uint64_t seed = 0;
    double lambda_val = 0.0;
    EvalReport report;
    bool ok = false;
    std::string error;
};

struct TrendCheck {
    std::string name;
    int wins = 0;
    int total = 0;
    int needed = 0;
    bool pass() const { return wins >= needed; }
};

struct AblationGrid {
    std::vector<RunRecord> runs;
    bool complete = false;
    std::vector<TrendCheck> trends;

    const RunRecord* find(const std::string& arm, std::uint64_t seed) const {
        for (const auto& r : runs)
            if (r.arm == arm && r.seed == seed) return &r;
        return nullptr;
    }

    bool trends_pass() const {
        return complete &&
               std::all_of(trends.begin(), trends.end(),
                           [](const TrendCheck& t) { return t.pass(); });
    }
};

// majority threshold mirroring the 4-of-5 convention
inline int trend_threshold(int n_seeds) {
    return (4 * n_seeds + 4) / 5;  // ceil(0.8 n)
}

namespace detail {

// runs jobs in parallel worker threads; each closure owns its slot, so
// scheduling order never affects the stored results
inline void run_parallel(std::vector<std::function<void()>>& tasks, int jobs) {
    if (jobs <= 1) {
        for (auto& t : tasks) t();
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            tasks[i]();
        }
    };
    std::vector<std::thread> pool;
    int n = std::min<int>(jobs, static_cast<int>(tasks.size()));
    pool.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
}

inline void write_ablation_csv(const std::filesystem::path& path,
                               const std::vector<RunRecord>& runs) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "arm,seed,image_sim,text_sim,harmonic_03\n";
    for (const auto& r : runs) {
        if (!r.ok) continue;
        out << r.arm << ',' << r.seed << ',' << fmt_double(r.report.image_sim)
            << ',' << fmt_double(r.report.text_sim) << ','
            << fmt_double(r.report.harmonic_03) << '\n';
    }
}

inline void write_sweep_csv(const std::filesystem::path& path,
                            const std::vector<RunRecord>& runs) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "lambda_val,seed,image_sim,text_sim,harmonic_03\n";
    for (const auto& r : runs) {
        if (!r.ok) continue;
        out << fmt_double(r.lambda_val) << ',' << r.seed << ','
            << fmt_double(r.report.image_sim) << ','
            << fmt_double(r.report.text_sim) << ','
            << fmt_double(r.report.harmonic_03) << '\n';
    }
}

}  // namespace detail

// One finetune + evaluation with the given regularization flags; the
// common path shared by the ablation grid and the lambda sweep.
inline RunRecord run_arm(const SubjectWorld& world, const DenoiserModel& base,
                         const SubjectSpec& subject,
                         const NoiseSchedule& schedule, TrainConfig tcfg,
                         RewardConfig rcfg, const EvalParams& ep,
                         const ArmSpec& arm, std::uint64_t seed,
                         const std::string& config_hash,
                         const std::optional<std::filesystem::path>& run_dir) {
    RunRecord rec;
    rec.arm = arm.name;
    rec.seed = seed;
    rec.lambda_val = rcfg.lambda_val;
    tcfg.use_pref_loss = arm.use_pref_loss;
    tcfg.early_stop = arm.early_stop;
    try {
        FinetuneState st =
            train_rpo(world, base, subject, schedule, tcfg, rcfg, seed, run_dir);
        DenoiserModel selected = st.selected_model();
        OracleEmbedder embedder =
            OracleEmbedder(world).with_binding(kSubjectToken, subject);
        rec.report = evaluate(selected, st.prompts, st.refs, embedder, schedule,
                              ep, seed, config_hash, rcfg.score_floor);
        if (run_dir) {
            std::ofstream out(*run_dir / "eval_report.json");
            out << nlohmann::json(rec.report).dump(2) << '\n';
        }
        rec.ok = true;
    } catch (const std::exception& e) {
        rec.ok = false;
        rec.error = e.what();
    }
    return rec;
}

inline AblationGrid run_ablation(
    const SubjectWorld& world, const DenoiserModel& base,
    const SubjectSpec& subject, const NoiseSchedule& schedule,
    const TrainConfig& tcfg, const RewardConfig& rcfg, const EvalParams& ep,
    const std::vector<std::uint64_t>& seeds, const std::string& config_hash,
    const std::optional<std::filesystem::path>& out_dir, int jobs = 1) {
    if (seeds.size() < 3)
        throw std::invalid_argument("run_ablation: need >= 3 seeds");

    AblationGrid grid;
    grid.runs.resize(ablation_arms().size() * seeds.size());
    std::vector<std::function<void()>> tasks;
    for (std::size_t a = 0; a < ablation_arms().size(); ++a) {
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            std::size_t slot = a * seeds.size() + s;
            tasks.push_back([&, a, s, slot]() {
                const ArmSpec& arm = ablation_arms()[a];
                std::optional<std::filesystem::path> run_dir;
                if (out_dir) {
                    run_dir = *out_dir / arm.name /
                              ("seed" + std::to_string(seeds[s]));
                    std::filesystem::create_directories(*run_dir);
                }
                grid.runs[slot] =
                    run_arm(world, base, subject, schedule, tcfg, rcfg, ep, arm,
                            seeds[s], config_hash, run_dir);
            });
        }
    }
    detail::run_parallel(tasks, jobs);

    grid.complete = std::all_of(grid.runs.begin(), grid.runs.end(),
                                [](const RunRecord& r) { return r.ok; });
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        detail::write_ablation_csv(*out_dir / "ablation.csv", grid.runs);
    }

    // paper-trend tallies: full RPO wins on text faithfulness, pure
    // similarity training wins on image similarity
    const int n = static_cast<int>(seeds.size());
    TrendCheck text{"full_rpo.text_sim > pure_sim.text_sim", 0, n,
                    trend_threshold(n)};
    TrendCheck harm{"full_rpo.harmonic_03 > pure_sim.harmonic_03", 0, n,
                    trend_threshold(n)};
    TrendCheck image{"pure_sim.image_sim > full_rpo.image_sim", 0, n,
                     trend_threshold(n)};
    for (std::uint64_t seed : seeds) {
        const RunRecord* full = grid.find("full_rpo", seed);
        const RunRecord* pure = grid.find("pure_sim", seed);
        if (!full || !pure || !full->ok || !pure->ok) continue;
        if (full->report.text_sim > pure->report.text_sim) ++text.wins;
        if (full->report.harmonic_03 > pure->report.harmonic_03) ++harm.wins;
        if (pure->report.image_sim > full->report.image_sim) ++image.wins;
    }
    grid.trends = {text, harm, image};
    return grid;
}

// ------------------------------------------------------------ lambda sweep

struct SweepReport {
    std::vector<RunRecord> runs;
    std::vector<double> lambdas;
    bool complete = false;
    std::vector<TrendCheck> trends;

    const RunRecord* find(double lambda, std::uint64_t seed) const {
        for (const auto& r : runs)
            if (r.lambda_val == lambda && r.seed == seed) return &r;
        return nullptr;
    }

    bool trends_pass() const {
        return complete &&
               std::all_of(trends.begin(), trends.end(),
                           [](const TrendCheck& t) { return t.pass(); });
    }
};

inline SweepReport run_lambda_sweep(
    const SubjectWorld& world, const DenoiserModel& base,
    const SubjectSpec& subject, const NoiseSchedule& schedule,
    const TrainConfig& tcfg, const RewardConfig& rcfg, const EvalParams& ep,
    std::vector<double> lambdas, const std::vector<std::uint64_t>& seeds,
    const std::string& config_hash,
    const std::optional<std::filesystem::path>& out_dir, int jobs = 1) {
    if (lambdas.empty())
        throw std::invalid_argument("run_lambda_sweep: empty lambda set");
    for (double l : lambdas)
        if (l < 0.0 || l > 1.0)
            throw std::invalid_argument("run_lambda_sweep: lambda outside [0,1]");
    std::sort(lambdas.begin(), lambdas.end());

    SweepReport report;
    report.lambdas = lambdas;
    report.runs.resize(lambdas.size() * seeds.size());
    const ArmSpec full{"full_rpo", true, true};

    std::vector<std::function<void()>> tasks;
    for (std::size_t li = 0; li < lambdas.size(); ++li) {
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            std::size_t slot = li * seeds.size() + s;
            tasks.push_back([&, li, s, slot]() {
                RewardConfig rc = rcfg;
                rc.lambda_val = lambdas[li];
                std::optional<std::filesystem::path> run_dir;
                if (out_dir) {
                    run_dir = *out_dir / ("lambda_" + fmt_double(lambdas[li])) /
                              ("seed" + std::to_string(seeds[s]));
                    std::filesystem::create_directories(*run_dir);
                }
                report.runs[slot] =
                    run_arm(world, base, subject, schedule, tcfg, rc, ep, full,
                            seeds[s], config_hash, run_dir);
            });
        }
    }
    detail::run_parallel(tasks, jobs);

    report.complete = std::all_of(report.runs.begin(), report.runs.end(),
                                  [](const RunRecord& r) { return r.ok; });
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        detail::write_sweep_csv(*out_dir / "sweep.csv", report.runs);
    }

    const int n = static_cast<int>(seeds.size());
    TrendCheck img{"image_sim non-decreasing in lambda_val", 0, n,
                   trend_threshold(n)};
    TrendCheck txt{"text_sim non-increasing in lambda_val", 0, n,
                   trend_threshold(n)};
    for (std::uint64_t seed : seeds) {
        bool img_ok = true, txt_ok = true;
        for (std::size_t li = 0; li + 1 < lambdas.size(); ++li) {
            const RunRecord* lo = report.find(lambdas[li], seed);
            const RunRecord* hi = report.find(lambdas[li + 1], seed);
            if (!lo || !hi || !lo->ok || !hi->ok) {
                img_ok = txt_ok = false;
                break;
            }
            if (hi->report.image_sim < lo->report.image_sim) img_ok = false;
            if (hi->report.text_sim > lo->report.text_sim) txt_ok = false;
        }
        if (img_ok) ++img.wins;
        if (txt_ok) ++txt.wins;
    }
    report.trends = {img, txt};
    return report;
}

// ------------------------------------------------------------ reward curve

struct CurvePoint {
    int step = 0;
    double val_reward = 0.0;
    bool is_best = false;
};

// reads the validation entries out of a run's train_log.csv
inline std::vector<CurvePoint> read_reward_curve(
    const std::filesystem::path& run_dir) {
    std::filesystem::path log = run_dir / "train_log.csv";
    std::ifstream in(log);
    if (!in)
        throw std::runtime_error("export_reward_curve: missing " + log.string());
    std::string line;
    std::getline(in, line);  // header
    std::vector<CurvePoint> points;
    while (std::getline(in, line)) {
        // columns: step,sim_loss,pre_loss,grad_norm,val_reward
        std::array<std::string, 5> cols{};
        std::size_t start = 0;
        for (int c = 0; c < 5; ++c) {
            std::size_t comma = line.find(',', start);
            if (comma == std::string::npos) comma = line.size();
            cols[static_cast<std::size_t>(c)] = line.substr(start, comma - start);
            start = comma + 1;
        }
        if (cols[4].empty()) continue;
        CurvePoint p;
        p.step = static_cast<int>(parse_double(cols[0]));
        p.val_reward = parse_double(cols[4]);
        points.push_back(p);
    }
    if (!points.empty()) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < points.size(); ++i)
            if (points[i].val_reward > points[best].val_reward) best = i;
        points[best].is_best = true;
    }
    return points;
}

namespace detail {

inline void write_curve_svg(const std::filesystem::path& path,
                            const std::vector<CurvePoint>& points) {
    const int w = 640, h = 400, ml = 60, mr = 20, mt = 20, mb = 40;
    double xmin = points.front().step, xmax = points.back().step;
    double ymin = points.front().val_reward, ymax = ymin;
    for (const auto& p : points) {
        ymin = std::min(ymin, p.val_reward);
        ymax = std::max(ymax, p.val_reward);
    }
    if (xmax == xmin) xmax = xmin + 1.0;
    if (ymax == ymin) ymax = ymin + 1e-9;
    double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
    auto sx = [&](double x) {
        return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr);
    };
    auto sy = [&](double y) {
        return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb);
    };

    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
        << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << ' ' << h
        << "\">\n";
    out << "<rect width=\"" << w << "\" height=\"" << h
        << "\" fill=\"white\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr
        << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
        << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
    out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" "
           "points=\"";
    for (const auto& p : points)
        out << sx(p.step) << ',' << sy(p.val_reward) << ' ';
    out << "\"/>\n";
    for (const auto& p : points) {
        out << "<circle cx=\"" << sx(p.step) << "\" cy=\"" << sy(p.val_reward)
            << "\" r=\"" << (p.is_best ? 6 : 3) << "\" fill=\""
            << (p.is_best ? "crimson" : "steelblue") << "\"/>\n";
        if (p.is_best)
            out << "<text x=\"" << sx(p.step) << "\" y=\""
                << sy(p.val_reward) - 10
                << "\" font-size=\"12\" text-anchor=\"middle\">best @ "
                << p.step << "</text>\n";
    }
    out << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 8
        << "\" font-size=\"13\" text-anchor=\"middle\">gradient step</text>\n";
    out << "<text x=\"14\" y=\"" << (mt + h - mb) / 2
        << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 "
           "14 "
        << (mt + h - mb) / 2 << ")\">validation reward</text>\n";
    out << "</svg>\n";
}

}  // namespace detail

// writes reward_curve.csv (step,val_reward,is_best) and reward_curve.svg
// next to the run's training log; returns the plotted points
inline std::vector<CurvePoint> export_reward_curve(
    const std::filesystem::path& run_dir) {
    auto points = read_reward_curve(run_dir);
    if (points.empty())
        throw std::runtime_error(
            "export_reward_curve: no validation entries in " +
            (run_dir / "train_log.csv").string());
    std::ofstream csv(run_dir / "reward_curve.csv");
    if (!csv)
        throw std::runtime_error("cannot write reward_curve.csv in " +
                                 run_dir.string());
    csv << "step,val_reward,is_best\n";
    for (const auto& p : points)
        csv << p.step << ',' << fmt_double(p.val_reward) << ','
            << (p.is_best ? 1 : 0) << '\n';
    detail::write_curve_svg(run_dir / "reward_curve.svg", points);
    return points;
}

}  // namespace rpo
