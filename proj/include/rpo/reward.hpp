#pragma once

#include <span>
#include <vector>

#include "rpo/common.hpp"
#include "rpo/subject_world.hpp"

namespace rpo {

struct RewardConfig {
    double lambda_train = 0.0;
    double lambda_val = 0.3;
    double score_floor = 1e-6;
    double temperature = 1.0;  // divides rewards inside the preference model;
                               // 1 reproduces the plain Bradley-Terry form

    void validate() const {
        if (lambda_train < 0.0 || lambda_train > 1.0)
            throw std::invalid_argument("reward.lambda_train must be in [0,1]");
        if (lambda_val < 0.0 || lambda_val > 1.0)
            throw std::invalid_argument("reward.lambda_val must be in [0,1]");
        if (!(score_floor > 0.0))
            throw std::invalid_argument("reward.score_floor must be > 0");
        if (!(temperature > 0.0))
            throw std::invalid_argument("reward.temperature must be > 0");
    }
};

struct ScorePair {
    double align_i = 0.0;
    double align_t = 0.0;
};

// mean over references of (cosine + 1) / 2, computed in embedding space
inline double align_i(std::span<const double> x_embedding,
                      const std::vector<Vec>& ref_embeddings) {
    if (ref_embeddings.empty())
        throw std::invalid_argument("align_i: empty reference set");
    double total = 0.0;
    for (const auto& ref : ref_embeddings)
        total += (cosine(x_embedding, ref) + 1.0) / 2.0;
    return total / static_cast<double>(ref_embeddings.size());
}

inline double align_i(const OracleEmbedder& e, std::span<const double> pixels,
                      const std::vector<Vec>& ref_embeddings) {
    Vec emb = e.embed_image(pixels);
    return align_i(emb, ref_embeddings);
}

inline double align_t(const OracleEmbedder& e, std::span<const double> pixels,
                      const PromptSpec& prompt) {
    Vec img = e.embed_image(pixels);
    Vec txt = e.embed_text(prompt);
    return (cosine(img, txt) + 1.0) / 2.0;
}

// Weighted harmonic mean of the two alignment scores. Scores are clamped
// to [floor, 1] before the division, which keeps the zero-score limit
// (reward -> 0) without a singularity. The lambda = 0 and lambda = 1
// endpoints return the clamped score itself, exactly.
inline double harmonic_reward(const ScorePair& s, double lambda,
                              double score_floor = 1e-6) {
    if (lambda < 0.0 || lambda > 1.0)
        throw std::invalid_argument("harmonic_reward: lambda outside [0,1]");
    const double si = std::clamp(s.align_i, score_floor, 1.0);
    const double st = std::clamp(s.align_t, score_floor, 1.0);
    if (lambda == 0.0) return st;
    if (lambda == 1.0) return si;
    return 1.0 / (lambda / si + (1.0 - lambda) / st);
}

// P(ref > gen) = exp(r_ref) / (exp(r_ref) + exp(r_gen)), overflow-free
inline double bt_probability(double r_ref, double r_gen) {
    if (!std::isfinite(r_ref) || !std::isfinite(r_gen))
        throw std::invalid_argument("bt_probability: non-finite reward");
    return sigmoid(r_ref - r_gen);
}

// y = 1 encodes "reference preferred"
inline int sample_label(double p, Rng& rng) {
    if (p < 0.0 || p > 1.0)
        throw std::invalid_argument("sample_label: p outside [0,1]");
    return rng.bernoulli(p) ? 1 : 0;
}

struct PreferenceTuple {
    Vec x_ref;          // reference image pixels
    Vec x_gen;          // generated image pixels
    PromptSpec prompt;  // the training prompt that produced x_gen
    int y = 1;          // 1 iff x_ref preferred

    // bookkeeping for the preference log
    int ref_id = 0;
    int gen_id = 0;
    ScorePair gen_scores;
    double r_ref = 0.0;
    double r_gen = 0.0;
    double p_ref_preferred = 0.5;
};

}  // namespace rpo
