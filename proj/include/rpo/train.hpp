#pragma once

#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>

#include "rpo/checkpoint.hpp"
#include "rpo/diffusion.hpp"
#include "rpo/reward.hpp"

namespace rpo {

// learning rate the paper's full-scale backbone uses; the toy default
// below is deliberately larger so 400 steps move a small MLP
constexpr double kPaperLearningRate = 5e-6;

constexpr const char* kSubjectToken = "[V]";

struct TrainConfig {
    double beta = 1.0;
    double lr = 1e-3;
    bool use_paper_lr = false;  // selects kPaperLearningRate instead of lr
    double weight_decay = 0.01;
    double grad_clip_norm = 1.0;
    int max_steps = 400;
    int validate_every = 40;
    int n_train_prompts = 8;
    int n_gen_per_prompt = 4;
    int n_refs = 4;
    int sim_batch = 4;
    int pref_batch = 8;
    int n_val_images_per_prompt = 2;
    int val_sampler_steps = 20;  // deterministic reduced-step validation
    int neg_sampler_steps = 0;   // 0 = full T, stochastic ancestral
    bool early_stop = true;
    bool use_pref_loss = true;
    bool resample_labels = true;   // redrawn each epoch over the fixed negatives
    int label_resample_every = 4;  // steps per epoch with the default batches
    bool shared_timestep = true;   // one t for all four evaluations in l_theta
    bool v_token_random_init = false;

    double effective_lr() const { return use_paper_lr ? kPaperLearningRate : lr; }

    void validate() const {
        auto positive = [](double v, const char* name) {
            if (!(v > 0.0))
                throw std::invalid_argument(std::string("train.") + name +
                                            " must be > 0");
        };
        positive(lr, "lr");
        positive(max_steps, "max_steps");
        positive(validate_every, "validate_every");
        positive(n_train_prompts, "n_train_prompts");
        positive(n_refs, "n_refs");
        positive(sim_batch, "sim_batch");
        positive(pref_batch, "pref_batch");
        positive(n_val_images_per_prompt, "n_val_images_per_prompt");
        positive(val_sampler_steps, "val_sampler_steps");
        positive(label_resample_every, "label_resample_every");
        if (beta < 0.0)
            throw std::invalid_argument("train.beta must be >= 0");
        if (n_gen_per_prompt < 0)
            throw std::invalid_argument("train.n_gen_per_prompt must be >= 0");
        if (weight_decay < 0.0)
            throw std::invalid_argument("train.weight_decay must be >= 0");
        if (max_steps % validate_every != 0)
            throw std::invalid_argument(
                "train.validate_every must divide train.max_steps");
    }
};

// ------------------------------------------------------------ references

// The subject's fixed reference set; derived from the world seed so every
// run over the same world sees the same references.
inline std::vector<RenderedImage> reference_images(const SubjectWorld& world,
                                                   const SubjectSpec& subject,
                                                   int n) {
    std::vector<RenderedImage> refs;
    PromptSpec prompt = SubjectWorld::subject_prompt(kSubjectToken);
    for (int k = 0; k < n; ++k) {
        Rng rng = Rng::stream(world.seed, "world.refs",
                              hash_bytes(subject.subject_id),
                              static_cast<std::uint64_t>(k));
        refs.push_back(render(subject, prompt, rng));
    }
    return refs;
}

// ------------------------------------------------------------- negatives

struct NegativeImage {
    Vec pixels;
    int prompt_index = 0;
    int id = 0;
};

inline std::vector<NegativeImage> generate_negatives(
    const DenoiserModel& base, const std::vector<PromptSpec>& prompts,
    int n_per_prompt, const NoiseSchedule& schedule, int sampler_steps,
    std::uint64_t seed) {
    const int steps = sampler_steps > 0 ? sampler_steps : schedule.T;
    std::vector<NegativeImage> out;
    out.reserve(prompts.size() * static_cast<std::size_t>(n_per_prompt));
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        auto ids = base.resolve_tokens(prompts[p].tokens());
        for (int j = 0; j < n_per_prompt; ++j) {
            Rng rng = Rng::stream(seed, "ft.negatives", p,
                                  static_cast<std::uint64_t>(j));
            ForwardCache cache;
            auto predict = [&](const Vec& x, int t) {
                return denoiser_forward(base, x, ids, t, cache);
            };
            NegativeImage img;
            img.pixels = sample_generic(
                predict, schedule, steps, 1.0, rng,
                static_cast<std::size_t>(base.dims.data_dim));
            img.prompt_index = static_cast<int>(p);
            img.id = static_cast<int>(out.size());
            out.push_back(std::move(img));
        }
    }
    return out;
}

// ------------------------------------------------------ preference data

inline std::vector<PreferenceTuple> build_preference_dataset(
    const std::vector<RenderedImage>& refs,
    const std::vector<NegativeImage>& negatives,
    const std::vector<PromptSpec>& prompts, const RewardConfig& rcfg,
    const OracleEmbedder& embedder, Rng& rng) {
    if (refs.empty())
        throw std::invalid_argument("build_preference_dataset: empty I_ref");
    if (negatives.empty())
        throw std::invalid_argument("build_preference_dataset: empty I_gen");

    std::vector<Vec> ref_embeddings;
    ref_embeddings.reserve(refs.size());
    for (const auto& r : refs)
        ref_embeddings.push_back(embedder.embed_image(r.pixels));

    std::vector<PreferenceTuple> tuples;
    tuples.reserve(negatives.size());
    for (const auto& neg : negatives) {
        const PromptSpec& prompt =
            prompts[static_cast<std::size_t>(neg.prompt_index)];
        int ref_idx = rng.uniform_int(static_cast<int>(refs.size()));

        PreferenceTuple t;
        t.x_ref = refs[static_cast<std::size_t>(ref_idx)].pixels;
        t.x_gen = neg.pixels;
        t.prompt = prompt;
        t.ref_id = ref_idx;
        t.gen_id = neg.id;

        Vec gen_emb = embedder.embed_image(neg.pixels);
        Vec ref_emb = ref_embeddings[static_cast<std::size_t>(ref_idx)];
        Vec txt_emb = embedder.embed_text(prompt);

        t.gen_scores.align_i = align_i(gen_emb, ref_embeddings);
        t.gen_scores.align_t = (cosine(gen_emb, txt_emb) + 1.0) / 2.0;
        ScorePair ref_scores;
        ref_scores.align_i = align_i(ref_emb, ref_embeddings);
        ref_scores.align_t = (cosine(ref_emb, txt_emb) + 1.0) / 2.0;

        t.r_ref = harmonic_reward(ref_scores, rcfg.lambda_train, rcfg.score_floor);
        t.r_gen =
            harmonic_reward(t.gen_scores, rcfg.lambda_train, rcfg.score_floor);
        t.p_ref_preferred =
            bt_probability(t.r_ref / rcfg.temperature, t.r_gen / rcfg.temperature);
        t.y = sample_label(t.p_ref_preferred, rng);
        tuples.push_back(std::move(t));
    }
    return tuples;
}

// -------------------------------------------------------------- sim loss

// Eq-style similarity loss: the denoising objective restricted to the
// reference images under the fixed subject prompt.
inline LossOut sim_loss(const DenoiserModel& model,
                        const std::vector<const Vec*>& ref_pixels,
                        const PromptSpec& subject_prompt,
                        const NoiseSchedule& schedule, Rng rng) {
    std::vector<TrainItem> items;
    items.reserve(ref_pixels.size());
    auto token_ids = model.resolve_tokens(subject_prompt.tokens());
    for (const Vec* px : ref_pixels) items.push_back({*px, token_ids});
    return denoising_loss(model, schedule, items, rng);
}

// -------------------------------------------------------------- pre loss

// per-sample binary cross-entropy given u = beta * l_theta
inline double preference_nll(double u, int y) {
    if (y != 0 && y != 1)
        throw std::invalid_argument("preference_nll: label must be 0/1");
    return y == 1 ? -log_sigmoid(u) : -log_sigmoid(-u);
}

struct PreferenceDraw {
    int t_ref = 1;
    int t_gen = 1;
    Vec eps_ref;
    Vec eps_gen;
};

inline std::vector<PreferenceDraw> sample_preference_draws(
    const NoiseSchedule& s, std::size_t n, std::size_t dim, bool shared_t,
    Rng& rng) {
    std::vector<PreferenceDraw> draws(n);
    for (auto& d : draws) {
        d.t_ref = 1 + rng.uniform_int(s.T);
        d.t_gen = shared_t ? d.t_ref : 1 + rng.uniform_int(s.T);
        d.eps_ref = rng.normal_vec(dim);
        d.eps_gen = rng.normal_vec(dim);
    }
    return draws;
}

namespace detail {

inline double squared_error(const DenoiserModel& m, std::span<const double> x_t,
                            const std::vector<int>& token_ids, int t,
                            std::span<const double> eps, ForwardCache& cache) {
    denoiser_forward(m, x_t, token_ids, t, cache);
    return sq_dist(cache.out, eps);
}

}  // namespace detail

// l_theta: four-term squared-error contrast between the finetuned and
// frozen models on the (preferred) reference vs the generated image
inline double inner_l(const DenoiserModel& model, const DenoiserModel& base,
                      const PreferenceTuple& tuple, int t,
                      std::span<const double> eps_ref,
                      std::span<const double> eps_gen,
                      const NoiseSchedule& schedule) {
    auto token_ids = model.resolve_tokens(tuple.prompt.tokens());
    auto base_ids = base.resolve_tokens(tuple.prompt.tokens());
    Vec x_ref_t = forward_noise(tuple.x_ref, t, eps_ref, schedule);
    Vec x_gen_t = forward_noise(tuple.x_gen, t, eps_gen, schedule);
    ForwardCache cache;
    double base_ref =
        detail::squared_error(base, x_ref_t, base_ids, t, eps_ref, cache);
    double theta_ref =
        detail::squared_error(model, x_ref_t, token_ids, t, eps_ref, cache);
    double base_gen =
        detail::squared_error(base, x_gen_t, base_ids, t, eps_gen, cache);
    double theta_gen =
        detail::squared_error(model, x_gen_t, token_ids, t, eps_gen, cache);
    return (base_ref - theta_ref) - (base_gen - theta_gen);
}

// Preference loss: mean over the batch of
//   -[ y log sigma(beta * l_theta) + (1-y) log sigma(-beta * l_theta) ]
inline LossOut pre_loss_with_draws(const DenoiserModel& model,
                                   const DenoiserModel& base,
                                   std::span<const PreferenceTuple> tuples,
                                   std::span<const PreferenceDraw> draws,
                                   const NoiseSchedule& schedule, double beta) {
    if (tuples.empty()) throw std::invalid_argument("pre_loss: empty batch");
    if (tuples.size() != draws.size())
        throw std::invalid_argument("pre_loss: draws/batch mismatch");

    LossOut out;
    out.grad.assign(model.param_count(), 0.0);
    const double inv_b = 1.0 / static_cast<double>(tuples.size());
    ForwardCache base_cache, ref_cache, gen_cache;

    for (std::size_t i = 0; i < tuples.size(); ++i) {
        const auto& tp = tuples[i];
        const auto& dr = draws[i];
        auto token_ids = model.resolve_tokens(tp.prompt.tokens());
        auto base_ids = base.resolve_tokens(tp.prompt.tokens());

        Vec x_ref_t = forward_noise(tp.x_ref, dr.t_ref, dr.eps_ref, schedule);
        Vec x_gen_t = forward_noise(tp.x_gen, dr.t_gen, dr.eps_gen, schedule);

        double base_ref = detail::squared_error(base, x_ref_t, base_ids,
                                                dr.t_ref, dr.eps_ref, base_cache);
        double base_gen = detail::squared_error(base, x_gen_t, base_ids,
                                                dr.t_gen, dr.eps_gen, base_cache);
        denoiser_forward(model, x_ref_t, token_ids, dr.t_ref, ref_cache);
        double theta_ref = sq_dist(ref_cache.out, dr.eps_ref);
        denoiser_forward(model, x_gen_t, token_ids, dr.t_gen, gen_cache);
        double theta_gen = sq_dist(gen_cache.out, dr.eps_gen);

        double ell = (base_ref - theta_ref) - (base_gen - theta_gen);
        double u = beta * ell;
        out.value += inv_b * preference_nll(u, tp.y);

        // d(loss)/d(ell) = beta * (sigma(u) - y)
        double dell = beta * (sigmoid(u) - static_cast<double>(tp.y)) * inv_b;

        // d(ell)/d(theta_ref) = -1, d(ell)/d(theta_gen) = +1
        Vec dout(ref_cache.out.size());
        for (std::size_t k = 0; k < dout.size(); ++k)
            dout[k] = dell * -2.0 * (ref_cache.out[k] - dr.eps_ref[k]);
        denoiser_backward(model, ref_cache, dout, out.grad);
        for (std::size_t k = 0; k < dout.size(); ++k)
            dout[k] = dell * 2.0 * (gen_cache.out[k] - dr.eps_gen[k]);
        denoiser_backward(model, gen_cache, dout, out.grad);
    }
    return out;
}

inline LossOut pre_loss(const DenoiserModel& model, const DenoiserModel& base,
                        std::span<const PreferenceTuple> tuples,
                        const NoiseSchedule& schedule, double beta, Rng rng,
                        bool shared_timestep = true) {
    auto draws = sample_preference_draws(
        schedule, tuples.size(), static_cast<std::size_t>(model.dims.data_dim),
        shared_timestep, rng);
    return pre_loss_with_draws(model, base, tuples, draws, schedule, beta);
}

// ------------------------------------------------------------ total loss

struct TotalLoss {
    double value = 0.0;
    Vec grad;
    double sim_value = 0.0;
    double pre_value = 0.0;
};

// L = L_sim + L_pre with one summed gradient. The incoming rng is split
// into two sub-streams by drawing two seeds (sim first, then pre).
inline TotalLoss total_loss(const DenoiserModel& model,
                            const DenoiserModel& base,
                            const std::vector<const Vec*>& ref_pixels,
                            const PromptSpec& subject_prompt,
                            std::span<const PreferenceTuple> tuples,
                            const NoiseSchedule& schedule, double beta, Rng rng,
                            bool shared_timestep = true) {
    Rng sim_rng(rng.u64());
    Rng pre_rng(rng.u64());
    LossOut sim = sim_loss(model, ref_pixels, subject_prompt, schedule, sim_rng);
    LossOut pre = pre_loss(model, base, tuples, schedule, beta, pre_rng,
                           shared_timestep);
    TotalLoss out;
    out.sim_value = sim.value;
    out.pre_value = pre.value;
    out.value = sim.value + pre.value;
    out.grad = std::move(sim.grad);
    axpy(1.0, pre.grad, out.grad);
    return out;
}

// ------------------------------------------------------------ validation

using ImageSampler = std::function<Vec(const PromptSpec&, int sample_idx)>;

// mean lambda_val-harmonic reward over n samples per validation prompt
inline double validate_with_sampler(const ImageSampler& sampler,
                                    const std::vector<PromptSpec>& val_prompts,
                                    const std::vector<Vec>& ref_embeddings,
                                    double lambda_val,
                                    const OracleEmbedder& embedder,
                                    int n_per_prompt,
                                    double score_floor = 1e-6) {
    if (lambda_val < 0.0 || lambda_val > 1.0)
        throw std::invalid_argument("validate: lambda_val outside [0,1]");
    double total = 0.0;
    int count = 0;
    for (const auto& prompt : val_prompts) {
        Vec txt = embedder.embed_text(prompt);
        for (int j = 0; j < n_per_prompt; ++j) {
            Vec img = sampler(prompt, j);
            Vec emb = embedder.embed_image(img);
            ScorePair s;
            s.align_i = align_i(emb, ref_embeddings);
            s.align_t = (cosine(emb, txt) + 1.0) / 2.0;
            total += harmonic_reward(s, lambda_val, score_floor);
            ++count;
        }
    }
    return total / count;
}

// Deterministic reduced-step sampler; the initial noise per (prompt,
// sample) is derived from the run seed only, so successive validation
// events of one run score checkpoints on identical noise.
inline double validate(const DenoiserModel& model,
                       const std::vector<PromptSpec>& val_prompts,
                       const std::vector<Vec>& ref_embeddings, double lambda_val,
                       const OracleEmbedder& embedder,
                       const NoiseSchedule& schedule, int sampler_steps,
                       int n_per_prompt, std::uint64_t seed,
                       double score_floor = 1e-6) {
    auto sampler = [&](const PromptSpec& prompt, int j) {
        std::uint64_t p_tag = hash_bytes(prompt.text());
        Rng rng = Rng::stream(seed, "ft.val.noise", p_tag,
                              static_cast<std::uint64_t>(j));
        return sample(model, prompt.tokens(), schedule, sampler_steps, 0.0, rng);
    };
    return validate_with_sampler(sampler, val_prompts, ref_embeddings,
                                 lambda_val, embedder, n_per_prompt,
                                 score_floor);
}

// ----------------------------------------------------------- RPO trainer

class TrainAbort : public std::runtime_error {
public:
    TrainAbort(int step, const std::string& what)
        : std::runtime_error("training aborted at step " +
                             std::to_string(step) + ": " + what),
          step(step) {}
    int step;
};

struct TrainLogRow {
    int step = 0;
    double sim_loss = 0.0;
    double pre_loss = 0.0;
    double grad_norm = 0.0;
    std::optional<double> val_reward;
};

struct FinetuneState {
    DenoiserModel model;  // final parameters
    DenoiserModel base;   // frozen snapshot, [V] token included
    int steps_run = 0;

    double best_reward = -std::numeric_limits<double>::infinity();
    int best_step = 0;
    Vec best_theta;

    std::vector<TrainLogRow> log;
    std::vector<PreferenceTuple> dataset;
    std::vector<NegativeImage> negatives;
    std::vector<RenderedImage> refs;
    std::vector<PromptSpec> prompts;
    bool early_stop = true;
    std::uint64_t seed = 0;

    DenoiserModel best_model() const {
        DenoiserModel m = model;
        m.theta = best_theta;
        return m;
    }

    // argmax-validation checkpoint under early stopping, else final
    DenoiserModel selected_model() const {
        return early_stop ? best_model() : model;
    }

    std::vector<std::pair<int, double>> validation_curve() const {
        std::vector<std::pair<int, double>> out;
        for (const auto& row : log)
            if (row.val_reward) out.emplace_back(row.step, *row.val_reward);
        return out;
    }
};

namespace detail {

inline void write_train_log(const std::filesystem::path& path,
                            const std::vector<TrainLogRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "step,sim_loss,pre_loss,grad_norm,val_reward\n";
    for (const auto& r : rows) {
        out << r.step << ',' << fmt_double(r.sim_loss) << ','
            << fmt_double(r.pre_loss) << ',' << fmt_double(r.grad_norm) << ',';
        if (r.val_reward) out << fmt_double(*r.val_reward);
        out << '\n';
    }
}

inline void write_preference_log(const std::filesystem::path& path,
                                 const std::vector<PreferenceTuple>& tuples) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& t : tuples) {
        nlohmann::json j{{"ref_id", t.ref_id},
                         {"gen_id", t.gen_id},
                         {"prompt", t.prompt.text()},
                         {"s_i", t.gen_scores.align_i},
                         {"s_t", t.gen_scores.align_t},
                         {"r_ref", t.r_ref},
                         {"r_gen", t.r_gen},
                         {"p", t.p_ref_preferred},
                         {"y", t.y}};
        out << j.dump() << '\n';
    }
}

}  // namespace detail

// Full RPO finetuning run for one subject. Writes run artifacts
// (train_log.csv, preferences.log, best.ckpt, final.ckpt) when run_dir is
// given; the caller owns the directory and the config snapshot.
inline FinetuneState train_rpo(
    const SubjectWorld& world, const DenoiserModel& base_in,
    const SubjectSpec& subject, const NoiseSchedule& schedule,
    const TrainConfig& cfg, const RewardConfig& rcfg, std::uint64_t seed,
    const std::optional<std::filesystem::path>& run_dir = std::nullopt) {
    cfg.validate();
    rcfg.validate();

    FinetuneState st;
    st.seed = seed;
    st.early_stop = cfg.early_stop;

    // fresh subject token, initialized from the subject's class token
    st.model = base_in;
    if (!st.model.has_token(kSubjectToken)) {
        std::string cls = SubjectWorld::class_token(subject.shape);
        Rng vrng = Rng::stream(seed, "ft.init.vtoken");
        if (cfg.v_token_random_init)
            st.model.add_token(kSubjectToken, nullptr, &vrng);
        else
            st.model.add_token(kSubjectToken, &cls, nullptr);
    }
    st.base = st.model;

    st.prompts = SubjectWorld::training_prompts(subject.shape, kSubjectToken);
    if (static_cast<int>(st.prompts.size()) != cfg.n_train_prompts)
        throw std::invalid_argument(
            "train_rpo: world provides " + std::to_string(st.prompts.size()) +
            " training prompts, config expects " +
            std::to_string(cfg.n_train_prompts));
    PromptSpec subject_prompt = SubjectWorld::subject_prompt(kSubjectToken);

    OracleEmbedder embedder =
        OracleEmbedder(world).with_binding(kSubjectToken, subject);

    st.refs = reference_images(world, subject, cfg.n_refs);
    std::vector<Vec> ref_embeddings;
    for (const auto& r : st.refs)
        ref_embeddings.push_back(embedder.embed_image(r.pixels));

    st.negatives =
        generate_negatives(st.base, st.prompts, cfg.n_gen_per_prompt, schedule,
                           cfg.neg_sampler_steps, seed);
    Rng label_rng = Rng::stream(seed, "ft.labels.build");
    st.dataset = build_preference_dataset(st.refs, st.negatives, st.prompts,
                                          rcfg, embedder, label_rng);

    AdamW opt;
    opt.lr = cfg.effective_lr();
    opt.weight_decay = cfg.weight_decay;
    opt.init(st.model.param_count());

    std::vector<const Vec*> ref_pixels;
    for (const auto& r : st.refs) ref_pixels.push_back(&r.pixels);

    auto run_validation = [&]() {
        return validate(st.model, st.prompts, ref_embeddings, rcfg.lambda_val,
                        embedder, schedule, cfg.val_sampler_steps,
                        cfg.n_val_images_per_prompt, seed, rcfg.score_floor);
    };

    st.best_theta = st.model.theta;
    int label_event = 0;

    for (int step = 1; step <= cfg.max_steps; ++step) {
        if (cfg.use_pref_loss && cfg.resample_labels &&
            (step - 1) % cfg.label_resample_every == 0 && step > 1) {
            ++label_event;
            Rng resample = Rng::stream(seed, "ft.labels",
                                       static_cast<std::uint64_t>(label_event));
            for (auto& t : st.dataset)
                t.y = sample_label(t.p_ref_preferred, resample);
        }

        Rng batch_rng = Rng::stream(seed, "ft.batch",
                                    static_cast<std::uint64_t>(step));
        std::vector<const Vec*> sim_batch;
        for (int i = 0; i < cfg.sim_batch; ++i)
            sim_batch.push_back(
                ref_pixels[static_cast<std::size_t>(batch_rng.uniform_int(
                    static_cast<int>(ref_pixels.size())))]);

        TrainLogRow row;
        row.step = step;

        LossOut sim =
            sim_loss(st.model, sim_batch, subject_prompt, schedule,
                     Rng::stream(seed, "ft.sim", static_cast<std::uint64_t>(step)));
        row.sim_loss = sim.value;
        Vec grad = std::move(sim.grad);

        if (cfg.use_pref_loss && !st.dataset.empty()) {
            std::vector<PreferenceTuple> pref_batch;
            for (int i = 0; i < cfg.pref_batch; ++i)
                pref_batch.push_back(
                    st.dataset[static_cast<std::size_t>(batch_rng.uniform_int(
                        static_cast<int>(st.dataset.size())))]);
            LossOut pre = pre_loss(
                st.model, st.base, pref_batch, schedule, cfg.beta,
                Rng::stream(seed, "ft.pre", static_cast<std::uint64_t>(step)),
                cfg.shared_timestep);
            row.pre_loss = pre.value;
            axpy(1.0, pre.grad, grad);
        }

        if (!std::isfinite(row.sim_loss) || !std::isfinite(row.pre_loss))
            throw TrainAbort(step, "non-finite loss");

        row.grad_norm = clip_grad_norm(grad, cfg.grad_clip_norm);
        if (!std::isfinite(row.grad_norm))
            throw TrainAbort(step, "non-finite gradient");
        opt.step(st.model.theta, grad);

        if (step % cfg.validate_every == 0) {
            double reward = run_validation();
            row.val_reward = reward;
            if (reward > st.best_reward) {
                st.best_reward = reward;
                st.best_step = step;
                st.best_theta = st.model.theta;
            }
        }
        st.log.push_back(std::move(row));
        st.steps_run = step;
    }

    if (run_dir) {
        std::filesystem::create_directories(*run_dir);
        detail::write_train_log(*run_dir / "train_log.csv", st.log);
        detail::write_preference_log(*run_dir / "preferences.log", st.dataset);
        Checkpoint best{schedule, st.best_model(), seed, 0};
        save_checkpoint(best, *run_dir / "best.ckpt");
        Checkpoint fin{schedule, st.model, seed, 0};
        save_checkpoint(fin, *run_dir / "final.ckpt");
    }
    return st;
}

// ---------------------------------------------------------------- config io

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"beta", c.beta},
                       {"lr", c.lr},
                       {"use_paper_lr", c.use_paper_lr},
                       {"weight_decay", c.weight_decay},
                       {"grad_clip_norm", c.grad_clip_norm},
                       {"max_steps", c.max_steps},
                       {"validate_every", c.validate_every},
                       {"n_train_prompts", c.n_train_prompts},
                       {"n_gen_per_prompt", c.n_gen_per_prompt},
                       {"n_refs", c.n_refs},
                       {"sim_batch", c.sim_batch},
                       {"pref_batch", c.pref_batch},
                       {"n_val_images_per_prompt", c.n_val_images_per_prompt},
                       {"val_sampler_steps", c.val_sampler_steps},
                       {"neg_sampler_steps", c.neg_sampler_steps},
                       {"early_stop", c.early_stop},
                       {"use_pref_loss", c.use_pref_loss},
                       {"resample_labels", c.resample_labels},
                       {"label_resample_every", c.label_resample_every},
                       {"shared_timestep", c.shared_timestep},
                       {"v_token_random_init", c.v_token_random_init}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    j.at("beta").get_to(c.beta);
    j.at("lr").get_to(c.lr);
    j.at("use_paper_lr").get_to(c.use_paper_lr);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("grad_clip_norm").get_to(c.grad_clip_norm);
    j.at("max_steps").get_to(c.max_steps);
    j.at("validate_every").get_to(c.validate_every);
    j.at("n_train_prompts").get_to(c.n_train_prompts);
    j.at("n_gen_per_prompt").get_to(c.n_gen_per_prompt);
    j.at("n_refs").get_to(c.n_refs);
    j.at("sim_batch").get_to(c.sim_batch);
    j.at("pref_batch").get_to(c.pref_batch);
    j.at("n_val_images_per_prompt").get_to(c.n_val_images_per_prompt);
    j.at("val_sampler_steps").get_to(c.val_sampler_steps);
    j.at("neg_sampler_steps").get_to(c.neg_sampler_steps);
    j.at("early_stop").get_to(c.early_stop);
    j.at("use_pref_loss").get_to(c.use_pref_loss);
    j.at("resample_labels").get_to(c.resample_labels);
    j.at("label_resample_every").get_to(c.label_resample_every);
    j.at("shared_timestep").get_to(c.shared_timestep);
    j.at("v_token_random_init").get_to(c.v_token_random_init);
}

inline void to_json(nlohmann::json& j, const RewardConfig& c) {
    j = nlohmann::json{{"lambda_train", c.lambda_train},
                       {"lambda_val", c.lambda_val},
                       {"score_floor", c.score_floor},
                       {"temperature", c.temperature}};
}

inline void from_json(const nlohmann::json& j, RewardConfig& c) {
    j.at("lambda_train").get_to(c.lambda_train);
    j.at("lambda_val").get_to(c.lambda_val);
    j.at("score_floor").get_to(c.score_floor);
    j.at("temperature").get_to(c.temperature);
}

}  // namespace rpo
