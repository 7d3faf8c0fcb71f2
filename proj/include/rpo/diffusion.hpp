#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rpo/common.hpp"
#include "rpo/optim.hpp"
#include "rpo/subject_world.hpp"

namespace rpo {

// ------------------------------------------------------------- schedule

enum class ScheduleKind { cosine = 0, linear = 1 };

inline const char* schedule_kind_name(ScheduleKind k) {
    return k == ScheduleKind::cosine ? "cosine" : "linear";
}

inline ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "cosine") return ScheduleKind::cosine;
    if (s == "linear") return ScheduleKind::linear;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

// Cumulative signal coefficients: x_t = sqrt(ab[t]) x0 + sqrt(1-ab[t]) eps.
struct NoiseSchedule {
    int T = 0;
    ScheduleKind kind = ScheduleKind::cosine;
    Vec alpha_bar;  // alpha_bar[t-1] holds the value for step t, t in 1..T

    // ab(0) == 1 by convention (no noise)
    double ab(int t) const {
        if (t == 0) return 1.0;
        if (t < 1 || t > T) throw std::invalid_argument("schedule: t out of range");
        return alpha_bar[static_cast<std::size_t>(t - 1)];
    }
};

// cosine: ab(t) = cos^2(((t/T + s)/(1 + s)) * pi/2) / cos^2((s/(1+s)) * pi/2),
//         s = 0.008, clamped to >= 1e-6   (needs T >= 20 to satisfy the
//         endpoint invariants below)
// linear: ab(t) interpolates 0.9995 -> 0.005 linearly in t
inline NoiseSchedule make_schedule(int T, ScheduleKind kind) {
    if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
    NoiseSchedule s;
    s.T = T;
    s.kind = kind;
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    constexpr double pi = 3.14159265358979323846;
    if (kind == ScheduleKind::cosine) {
        const double offs = 0.008;
        auto f = [&](double t) {
            double a = std::cos(((t / T + offs) / (1.0 + offs)) * pi / 2.0);
            return a * a;
        };
        const double f0 = f(0.0);
        for (int t = 1; t <= T; ++t)
            s.alpha_bar[static_cast<std::size_t>(t - 1)] =
                std::max(1e-6, f(static_cast<double>(t)) / f0);
    } else {
        const double hi = 0.9995, lo = 0.005;
        for (int t = 1; t <= T; ++t)
            s.alpha_bar[static_cast<std::size_t>(t - 1)] =
                hi + (lo - hi) * static_cast<double>(t - 1) / (T - 1);
    }
    if (s.alpha_bar.back() >= 0.01)
        throw std::runtime_error(
            "make_schedule: alpha_bar[T] not small enough (increase T)");
    for (std::size_t i = 0; i < s.alpha_bar.size(); ++i) {
        double v = s.alpha_bar[i];
        if (!(v > 0.0 && v < 1.0))
            throw std::runtime_error("make_schedule: alpha_bar out of (0,1)");
        if (i > 0 && v >= s.alpha_bar[i - 1])
            throw std::runtime_error("make_schedule: alpha_bar not decreasing");
    }
    return s;
}

inline Vec forward_noise(std::span<const double> x0, int t,
                         std::span<const double> eps, const NoiseSchedule& s) {
    if (t < 1 || t > s.T)
        throw std::invalid_argument("forward_noise: t out of range");
    if (x0.size() != eps.size())
        throw std::invalid_argument("forward_noise: size mismatch");
    const double a = std::sqrt(s.ab(t));
    const double b = std::sqrt(1.0 - s.ab(t));
    Vec out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

// --------------------------------------------------------------- denoiser
//
// Conditional noise predictor: a 2-hidden-layer SiLU MLP over the
// concatenation (x_t | sinusoidal time features | mean token embedding).
// Parameters live in one flat vector so the optimizer, gradient checks
// and checkpointing all operate on plain arrays.

struct ModelDims {
    int data_dim = kDataDim;
    int time_dim = 16;
    int cond_dim = 16;
    int hidden = 256;

    int input_dim() const { return data_dim + time_dim + cond_dim; }
};

inline Vec time_embedding(int t, int dim) {
    Vec te(static_cast<std::size_t>(dim));
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / half);
        te[static_cast<std::size_t>(2 * i)] = std::sin(t * freq);
        te[static_cast<std::size_t>(2 * i + 1)] = std::cos(t * freq);
    }
    return te;
}

struct DenoiserModel {
    ModelDims dims;
    std::vector<std::string> vocab;
    Vec theta;

    std::size_t w1_off = 0, b1_off = 0, w2_off = 0, b2_off = 0, w3_off = 0,
                b3_off = 0, emb_off = 0;

    std::size_t param_count() const { return theta.size(); }

    void compute_offsets() {
        const std::size_t in = static_cast<std::size_t>(dims.input_dim());
        const std::size_t h = static_cast<std::size_t>(dims.hidden);
        const std::size_t d = static_cast<std::size_t>(dims.data_dim);
        const std::size_t cd = static_cast<std::size_t>(dims.cond_dim);
        w1_off = 0;
        b1_off = w1_off + h * in;
        w2_off = b1_off + h;
        b2_off = w2_off + h * h;
        w3_off = b2_off + h;
        b3_off = w3_off + d * h;
        emb_off = b3_off + d;
        theta.resize(emb_off + vocab.size() * cd, 0.0);
    }

    int token_id(const std::string& tok) const {
        auto it = token_ids_.find(tok);
        if (it == token_ids_.end())
            throw std::invalid_argument("denoiser: unknown token '" + tok + "'");
        return it->second;
    }

    bool has_token(const std::string& tok) const {
        return token_ids_.contains(tok);
    }

    std::vector<int> resolve_tokens(const std::vector<std::string>& toks) const {
        std::vector<int> ids;
        ids.reserve(toks.size());
        for (const auto& t : toks) ids.push_back(token_id(t));
        return ids;
    }

    void rebuild_token_index() {
        token_ids_.clear();
        for (std::size_t i = 0; i < vocab.size(); ++i)
            token_ids_[vocab[i]] = static_cast<int>(i);
    }

    std::span<const double> embedding_row(int id) const {
        const std::size_t cd = static_cast<std::size_t>(dims.cond_dim);
        return {theta.data() + emb_off + static_cast<std::size_t>(id) * cd, cd};
    }

    // appends a fresh token; its embedding row is copied from init_from
    // (the class-token row by default) or drawn from rng when null
    void add_token(const std::string& tok, const std::string* init_from,
                   Rng* rng) {
        if (has_token(tok))
            throw std::invalid_argument("add_token: token exists: " + tok);
        Vec row(static_cast<std::size_t>(dims.cond_dim), 0.0);
        if (init_from != nullptr) {
            auto src = embedding_row(token_id(*init_from));
            std::copy(src.begin(), src.end(), row.begin());
        } else if (rng != nullptr) {
            for (double& v : row) v = rng->normal();
        }
        vocab.push_back(tok);
        theta.insert(theta.end(), row.begin(), row.end());
        rebuild_token_index();
    }

private:
    std::map<std::string, int> token_ids_;
};

inline DenoiserModel make_denoiser(const ModelDims& dims,
                                   std::vector<std::string> vocab, Rng& rng) {
    if (dims.time_dim % 2 != 0)
        throw std::invalid_argument("make_denoiser: time_dim must be even");
    DenoiserModel m;
    m.dims = dims;
    m.vocab = std::move(vocab);
    m.compute_offsets();
    m.rebuild_token_index();

    const std::size_t in = static_cast<std::size_t>(dims.input_dim());
    const std::size_t h = static_cast<std::size_t>(dims.hidden);
    auto init_block = [&](std::size_t off, std::size_t rows, std::size_t cols) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
        for (std::size_t i = 0; i < rows * cols; ++i)
            m.theta[off + i] = scale * rng.normal();
    };
    init_block(m.w1_off, h, in);
    init_block(m.w2_off, h, h);
    init_block(m.w3_off, static_cast<std::size_t>(dims.data_dim), h);
    for (std::size_t i = m.emb_off; i < m.theta.size(); ++i)
        m.theta[i] = rng.normal();
    return m;
}

namespace detail {

inline double silu(double a) { return a * sigmoid(a); }
inline double silu_deriv(double a) {
    double s = sigmoid(a);
    return s * (1.0 + a * (1.0 - s));
}

// y = W x, W row-major (rows x cols)
inline void matvec(std::span<const double> w, std::span<const double> x,
                   std::span<double> y) {
    const std::size_t rows = y.size(), cols = x.size();
    for (std::size_t r = 0; r < rows; ++r)
        y[r] = dot(w.subspan(r * cols, cols), x);
}

// dx += W^T dy
inline void matvec_t(std::span<const double> w, std::span<const double> dy,
                     std::span<double> dx) {
    const std::size_t rows = dy.size(), cols = dx.size();
    for (std::size_t r = 0; r < rows; ++r)
        axpy(dy[r], w.subspan(r * cols, cols), dx);
}

// dW += dy x^T
inline void outer_acc(std::span<double> dw, std::span<const double> dy,
                      std::span<const double> x) {
    const std::size_t rows = dy.size(), cols = x.size();
    for (std::size_t r = 0; r < rows; ++r)
        axpy(dy[r], x, dw.subspan(r * cols, cols));
}

}  // namespace detail

struct ForwardCache {
    std::vector<int> token_ids;
    Vec input;    // x_t | time | cond
    Vec a1, h1;   // first hidden pre/post activation
    Vec a2, h2;   // second hidden pre/post activation
    Vec out;
};

inline const Vec& denoiser_forward(const DenoiserModel& m,
                                   std::span<const double> x_t,
                                   const std::vector<int>& token_ids, int t,
                                   ForwardCache& cache) {
    const auto& d = m.dims;
    if (x_t.size() != static_cast<std::size_t>(d.data_dim))
        throw std::invalid_argument("denoiser_forward: bad input size");
    if (token_ids.empty())
        throw std::invalid_argument("denoiser_forward: empty condition");

    cache.token_ids = token_ids;
    cache.input.assign(static_cast<std::size_t>(d.input_dim()), 0.0);
    std::copy(x_t.begin(), x_t.end(), cache.input.begin());
    Vec te = time_embedding(t, d.time_dim);
    std::copy(te.begin(), te.end(), cache.input.begin() + d.data_dim);
    const double inv_n = 1.0 / static_cast<double>(token_ids.size());
    for (int id : token_ids) {
        auto row = m.embedding_row(id);
        for (int i = 0; i < d.cond_dim; ++i)
            cache.input[static_cast<std::size_t>(d.data_dim + d.time_dim + i)] +=
                inv_n * row[static_cast<std::size_t>(i)];
    }

    const std::size_t in = static_cast<std::size_t>(d.input_dim());
    const std::size_t h = static_cast<std::size_t>(d.hidden);
    const std::size_t out_dim = static_cast<std::size_t>(d.data_dim);
    std::span<const double> th(m.theta);

    cache.a1.assign(h, 0.0);
    detail::matvec(th.subspan(m.w1_off, h * in), cache.input, cache.a1);
    for (std::size_t i = 0; i < h; ++i) cache.a1[i] += m.theta[m.b1_off + i];
    cache.h1.resize(h);
    for (std::size_t i = 0; i < h; ++i) cache.h1[i] = detail::silu(cache.a1[i]);

    cache.a2.assign(h, 0.0);
    detail::matvec(th.subspan(m.w2_off, h * h), cache.h1, cache.a2);
    for (std::size_t i = 0; i < h; ++i) cache.a2[i] += m.theta[m.b2_off + i];
    cache.h2.resize(h);
    for (std::size_t i = 0; i < h; ++i) cache.h2[i] = detail::silu(cache.a2[i]);

    cache.out.assign(out_dim, 0.0);
    detail::matvec(th.subspan(m.w3_off, out_dim * h), cache.h2, cache.out);
    for (std::size_t i = 0; i < out_dim; ++i) cache.out[i] += m.theta[m.b3_off + i];

    for (double v : cache.out)
        if (!std::isfinite(v))
            throw std::runtime_error("denoiser_forward: non-finite output");
    return cache.out;
}

// convenience overload; resolves tokens and allocates its own cache
inline Vec denoiser_forward(const DenoiserModel& m, std::span<const double> x_t,
                            const std::vector<std::string>& tokens, int t) {
    ForwardCache cache;
    denoiser_forward(m, x_t, m.resolve_tokens(tokens), t, cache);
    return cache.out;
}

// accumulates d(loss)/d(theta) into grad given d(loss)/d(out)
inline void denoiser_backward(const DenoiserModel& m, const ForwardCache& cache,
                              std::span<const double> dout, Vec& grad) {
    const auto& d = m.dims;
    const std::size_t in = static_cast<std::size_t>(d.input_dim());
    const std::size_t h = static_cast<std::size_t>(d.hidden);
    const std::size_t out_dim = static_cast<std::size_t>(d.data_dim);
    if (grad.size() != m.theta.size()) grad.assign(m.theta.size(), 0.0);
    std::span<double> g(grad);
    std::span<const double> th(m.theta);

    // output layer
    detail::outer_acc(g.subspan(m.w3_off, out_dim * h), dout, cache.h2);
    axpy(1.0, dout, g.subspan(m.b3_off, out_dim));
    Vec dh2(h, 0.0);
    detail::matvec_t(th.subspan(m.w3_off, out_dim * h), dout, dh2);

    // second hidden layer
    Vec da2(h);
    for (std::size_t i = 0; i < h; ++i)
        da2[i] = dh2[i] * detail::silu_deriv(cache.a2[i]);
    detail::outer_acc(g.subspan(m.w2_off, h * h), da2, cache.h1);
    axpy(1.0, da2, g.subspan(m.b2_off, h));
    Vec dh1(h, 0.0);
    detail::matvec_t(th.subspan(m.w2_off, h * h), da2, dh1);

    // first hidden layer
    Vec da1(h);
    for (std::size_t i = 0; i < h; ++i)
        da1[i] = dh1[i] * detail::silu_deriv(cache.a1[i]);
    detail::outer_acc(g.subspan(m.w1_off, h * in), da1, cache.input);
    axpy(1.0, da1, g.subspan(m.b1_off, h));

    // condition embeddings: input grad restricted to the cond slice,
    // split evenly over the prompt tokens
    Vec dinput_cond(static_cast<std::size_t>(d.cond_dim), 0.0);
    const std::size_t cond_base = static_cast<std::size_t>(d.data_dim + d.time_dim);
    for (std::size_t r = 0; r < h; ++r) {
        auto row = th.subspan(m.w1_off + r * in + cond_base,
                              static_cast<std::size_t>(d.cond_dim));
        axpy(da1[r], row, dinput_cond);
    }
    const double inv_n = 1.0 / static_cast<double>(cache.token_ids.size());
    for (int id : cache.token_ids) {
        auto dst = g.subspan(
            m.emb_off + static_cast<std::size_t>(id) *
                            static_cast<std::size_t>(d.cond_dim),
            static_cast<std::size_t>(d.cond_dim));
        axpy(inv_n, dinput_cond, dst);
    }
}

// ------------------------------------------------------------------ loss

struct TrainItem {
    Vec x0;
    std::vector<int> token_ids;
};

struct DenoiseDraw {
    int t = 1;
    Vec eps;
};

struct LossOut {
    double value = 0.0;
    Vec grad;
};

inline std::vector<DenoiseDraw> sample_denoise_draws(const NoiseSchedule& s,
                                                     std::size_t n,
                                                     std::size_t dim, Rng& rng) {
    std::vector<DenoiseDraw> draws(n);
    for (auto& d : draws) {
        d.t = 1 + rng.uniform_int(s.T);
        d.eps = rng.normal_vec(dim);
    }
    return draws;
}

// value-only core over an arbitrary predictor; the seam used by test
// oracles (e.g. a stub that returns the injected noise exactly)
template <class EpsFn>
inline double denoising_loss_value(EpsFn&& predict, const NoiseSchedule& s,
                                   std::span<const TrainItem> items,
                                   std::span<const DenoiseDraw> draws) {
    if (items.empty())
        throw std::invalid_argument("denoising_loss: empty batch");
    if (items.size() != draws.size())
        throw std::invalid_argument("denoising_loss: draws/batch mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        Vec x_t = forward_noise(items[i].x0, draws[i].t, draws[i].eps, s);
        Vec eps_hat = predict(x_t, items[i].token_ids, draws[i].t);
        total += sq_dist(eps_hat, draws[i].eps);
    }
    return total / static_cast<double>(items.size());
}

inline LossOut denoising_loss_with_draws(const DenoiserModel& m,
                                         const NoiseSchedule& s,
                                         std::span<const TrainItem> items,
                                         std::span<const DenoiseDraw> draws) {
    if (items.empty())
        throw std::invalid_argument("denoising_loss: empty batch");
    if (items.size() != draws.size())
        throw std::invalid_argument("denoising_loss: draws/batch mismatch");
    LossOut out;
    out.grad.assign(m.param_count(), 0.0);
    ForwardCache cache;
    const double inv_b = 1.0 / static_cast<double>(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        Vec x_t = forward_noise(items[i].x0, draws[i].t, draws[i].eps, s);
        denoiser_forward(m, x_t, items[i].token_ids, draws[i].t, cache);
        Vec dout(cache.out.size());
        double sq = 0.0;
        for (std::size_t k = 0; k < cache.out.size(); ++k) {
            double r = cache.out[k] - draws[i].eps[k];
            sq += r * r;
            dout[k] = 2.0 * inv_b * r;
        }
        out.value += inv_b * sq;
        denoiser_backward(m, cache, dout, out.grad);
    }
    return out;
}

// rng is taken by value: a copied Rng replays the identical draws, which
// is what the finite-difference suite relies on
inline LossOut denoising_loss(const DenoiserModel& m, const NoiseSchedule& s,
                              std::span<const TrainItem> items, Rng rng) {
    auto draws = sample_denoise_draws(
        s, items.size(), static_cast<std::size_t>(m.dims.data_dim), rng);
    return denoising_loss_with_draws(m, s, items, draws);
}

// --------------------------------------------------------------- sampler

// n_steps timesteps, descending from T to 1, evenly spaced
inline std::vector<int> sample_timesteps(int T, int n_steps) {
    if (n_steps < 1 || n_steps > T)
        throw std::invalid_argument("sample: n_steps out of range");
    std::vector<int> ts(static_cast<std::size_t>(n_steps));
    if (n_steps == 1) {
        ts[0] = T;
        return ts;
    }
    for (int i = 0; i < n_steps; ++i) {
        double t = T - static_cast<double>(i) * (T - 1) / (n_steps - 1);
        ts[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(t));
    }
    return ts;
}

// Generalized reverse process over a strided timestep subset.
// eta = 1 gives the stochastic ancestral sampler, eta = 0 the
// deterministic variant used for validation. Output clamped to [0,1]
// at the end only.
template <class EpsFn>
inline Vec sample_generic(EpsFn&& predict, const NoiseSchedule& s, int n_steps,
                          double eta, Rng rng, std::size_t dim) {
    auto ts = sample_timesteps(s.T, n_steps);
    Vec x = rng.normal_vec(dim);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = (i + 1 < ts.size()) ? ts[i + 1] : 0;
        const double ab_t = s.ab(t);
        const double ab_prev = s.ab(t_prev);
        Vec eps_hat = predict(x, t);

        const double sa = std::sqrt(ab_t);
        const double sb = std::sqrt(1.0 - ab_t);
        Vec x0_hat(dim);
        for (std::size_t k = 0; k < dim; ++k)
            x0_hat[k] = (x[k] - sb * eps_hat[k]) / sa;

        double sigma = 0.0;
        if (eta > 0.0 && t_prev > 0) {
            sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) *
                    std::sqrt(1.0 - ab_t / ab_prev);
        }
        const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
        const double sp = std::sqrt(ab_prev);
        for (std::size_t k = 0; k < dim; ++k)
            x[k] = sp * x0_hat[k] + dir * eps_hat[k];
        if (sigma > 0.0)
            for (std::size_t k = 0; k < dim; ++k) x[k] += sigma * rng.normal();
    }
    for (double& v : x) v = clamp01(v);
    return x;
}

inline Vec sample(const DenoiserModel& m, const std::vector<std::string>& tokens,
                  const NoiseSchedule& s, int n_steps, double eta, Rng rng) {
    auto ids = m.resolve_tokens(tokens);
    ForwardCache cache;
    auto predict = [&](const Vec& x, int t) {
        return denoiser_forward(m, x, ids, t, cache);
    };
    return sample_generic(predict, s, n_steps, eta, rng,
                          static_cast<std::size_t>(m.dims.data_dim));
}

// ----------------------------------------------------------- pretraining

struct PretrainConfig {
    int steps = 20000;
    int batch = 16;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double grad_clip_norm = 0.0;  // disabled
    int log_every = 200;
    double convergence_ratio = 0.5;  // final heldback loss must drop below
                                     // ratio * initial heldback loss
    int heldback_stride = 10;        // every n-th corpus item held back
    int heldback_eval_draws = 64;
    int hidden = 256;
    int time_dim = 16;
    int cond_dim = 16;
};

struct PretrainRow {
    int step = 0;
    double train_loss = 0.0;
    double heldback_loss = 0.0;
};

struct PretrainResult {
    DenoiserModel model;
    std::vector<PretrainRow> log;
    double initial_heldback = 0.0;
    double final_heldback = 0.0;
};

class PretrainDivergence : public std::runtime_error {
public:
    PretrainDivergence(double final_loss, double bound)
        : std::runtime_error("pretrain did not converge: heldback loss " +
                             fmt_double(final_loss) + " above bound " +
                             fmt_double(bound)),
          final_loss(final_loss) {}
    double final_loss;
};

// fixed vocabulary of the base model: classes, contexts, styles, prompt
// kinds and one token per pretraining subject (held-out subject excluded)
inline std::vector<std::string> pretrain_vocabulary(const SubjectWorld& world) {
    std::vector<std::string> vocab;
    for (int s = 0; s < kNumShapes; ++s)
        vocab.push_back(SubjectWorld::class_token(static_cast<Shape>(s)));
    for (int c = 0; c < kNumContexts; ++c)
        vocab.push_back("ctx:" + std::to_string(c));
    for (const char* st : {"none", "invert", "accessory"})
        vocab.push_back(std::string("style:") + st);
    for (const char* k : {"recon", "propmod", "style", "accessory"})
        vocab.push_back(std::string("kind:") + k);
    for (const auto& s : world.pretrain_subjects())
        vocab.push_back(SubjectWorld::subject_token(s));
    return vocab;
}

namespace detail {

struct CorpusEntry {
    SubjectSpec subject;
    PromptSpec prompt;  // subject_token already set (subject or class token)
};

inline std::vector<CorpusEntry> pretrain_corpus(const SubjectWorld& world) {
    std::vector<CorpusEntry> corpus;
    for (const auto& s : world.pretrain_subjects()) {
        std::vector<PromptSpec> prompts = world.training_prompts_for(s);
        prompts.push_back(
            SubjectWorld::subject_prompt(SubjectWorld::subject_token(s)));
        for (const auto& p : prompts) {
            corpus.push_back({s, p});
            PromptSpec cls = p;
            cls.subject_token = SubjectWorld::class_token(s.shape);
            corpus.push_back({s, cls});
        }
    }
    return corpus;
}

}  // namespace detail

inline TrainItem make_train_item(const DenoiserModel& model,
                                 const detail::CorpusEntry& e, Rng& rng) {
    TrainItem item;
    item.x0 = render(e.subject, e.prompt, rng).pixels;
    item.token_ids = model.resolve_tokens(e.prompt.tokens());
    return item;
}

inline double heldback_loss(const DenoiserModel& model,
                            const NoiseSchedule& schedule,
                            std::span<const detail::CorpusEntry> heldback,
                            const PretrainConfig& cfg, std::uint64_t seed) {
    Rng rng = Rng::stream(seed, "pretrain.heldback");
    std::vector<TrainItem> items;
    items.reserve(static_cast<std::size_t>(cfg.heldback_eval_draws));
    for (int i = 0; i < cfg.heldback_eval_draws; ++i) {
        const auto& e = heldback[static_cast<std::size_t>(
            rng.uniform_int(static_cast<int>(heldback.size())))];
        items.push_back(make_train_item(model, e, rng));
    }
    auto draws = sample_denoise_draws(
        schedule, items.size(), static_cast<std::size_t>(model.dims.data_dim),
        rng);
    auto predict = [&](const Vec& x, const std::vector<int>& ids, int t) {
        ForwardCache cache;
        return denoiser_forward(model, x, ids, t, cache);
    };
    return denoising_loss_value(predict, schedule, items, draws);
}

inline PretrainResult pretrain(const SubjectWorld& world,
                               const NoiseSchedule& schedule,
                               const PretrainConfig& cfg, std::uint64_t seed) {
    auto corpus = detail::pretrain_corpus(world);
    if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
    std::vector<detail::CorpusEntry> train_set, heldback;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (cfg.heldback_stride > 0 &&
            i % static_cast<std::size_t>(cfg.heldback_stride) ==
                static_cast<std::size_t>(cfg.heldback_stride) - 1)
            heldback.push_back(corpus[i]);
        else
            train_set.push_back(corpus[i]);
    }
    if (train_set.empty())
        throw std::invalid_argument("pretrain: empty training corpus");
    if (heldback.empty()) heldback = train_set;

    ModelDims dims;
    dims.hidden = cfg.hidden;
    dims.time_dim = cfg.time_dim;
    dims.cond_dim = cfg.cond_dim;
    Rng init_rng = Rng::stream(seed, "pretrain.init");
    DenoiserModel model =
        make_denoiser(dims, pretrain_vocabulary(world), init_rng);

    PretrainResult result;
    result.initial_heldback =
        heldback_loss(model, schedule, heldback, cfg, seed);

    AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    opt.init(model.param_count());

    for (int step = 1; step <= cfg.steps; ++step) {
        Rng step_rng = Rng::stream(seed, "pretrain.step",
                                   static_cast<std::uint64_t>(step));
        std::vector<TrainItem> items;
        items.reserve(static_cast<std::size_t>(cfg.batch));
        for (int i = 0; i < cfg.batch; ++i) {
            const auto& e = train_set[static_cast<std::size_t>(
                step_rng.uniform_int(static_cast<int>(train_set.size())))];
            items.push_back(make_train_item(model, e, step_rng));
        }
        LossOut loss = denoising_loss(model, schedule, items, step_rng);
        if (!std::isfinite(loss.value))
            throw std::runtime_error("pretrain: non-finite loss at step " +
                                     std::to_string(step));
        clip_grad_norm(loss.grad, cfg.grad_clip_norm);
        opt.step(model.theta, loss.grad);

        if (step % cfg.log_every == 0 || step == cfg.steps) {
            PretrainRow row;
            row.step = step;
            row.train_loss = loss.value;
            row.heldback_loss =
                heldback_loss(model, schedule, heldback, cfg, seed);
            result.log.push_back(row);
        }
    }

    result.final_heldback = heldback_loss(model, schedule, heldback, cfg, seed);
    const double bound = cfg.convergence_ratio * result.initial_heldback;
    if (result.final_heldback > bound)
        throw PretrainDivergence(result.final_heldback, bound);
    result.model = std::move(model);
    return result;
}

}  // namespace rpo
