#include <catch2/catch_amalgamated.hpp>

#include "rpo/reward.hpp"
#include "rpo/train.hpp"

using namespace rpo;

TEST_CASE("harmonic reward reproduces the worked example") {
    // two images: high similarity / unfaithful vs balanced
    double r1 = harmonic_reward({0.9, 0.01}, 0.5);
    double r2 = harmonic_reward({0.7, 0.21}, 0.5);
    REQUIRE(r1 == Catch::Approx(0.020).margin(0.001));
    REQUIRE(r2 == Catch::Approx(0.323).margin(0.001));
    // the arithmetic mean cannot tell the two apart
    REQUIRE(0.5 * (0.9 + 0.01) == Catch::Approx(0.455).margin(0.001));
    REQUIRE(0.5 * (0.7 + 0.21) == Catch::Approx(0.455).margin(0.001));
    REQUIRE(r2 > r1);
}

TEST_CASE("harmonic reward endpoint reductions are exact") {
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        ScorePair s{rng.uniform(), rng.uniform()};
        double si = std::clamp(s.align_i, 1e-6, 1.0);
        double st = std::clamp(s.align_t, 1e-6, 1.0);
        REQUIRE(harmonic_reward(s, 0.0) == st);
        REQUIRE(harmonic_reward(s, 1.0) == si);
    }
    REQUIRE_THROWS_AS(harmonic_reward({0.5, 0.5}, -0.1), std::invalid_argument);
    REQUIRE_THROWS_AS(harmonic_reward({0.5, 0.5}, 1.1), std::invalid_argument);
}

TEST_CASE("harmonic reward clamps zero scores instead of dividing by zero") {
    double r = harmonic_reward({0.0, 0.9}, 0.5);
    REQUIRE(std::isfinite(r));
    REQUIRE(r > 0.0);
    REQUIRE(r <= 2e-6 / 0.5);  // pinned near the floor
}

TEST_CASE("harmonic reward properties over random triples") {
    Rng rng(101);
    for (int i = 0; i < 10000; ++i) {
        ScorePair s{rng.uniform(), rng.uniform()};
        double lambda = rng.uniform();
        double si = std::clamp(s.align_i, 1e-6, 1.0);
        double st = std::clamp(s.align_t, 1e-6, 1.0);
        double h = harmonic_reward(s, lambda);

        // weighted AM >= weighted HM
        REQUIRE(h <= lambda * si + (1.0 - lambda) * st + 1e-12);
        // bounded by the two scores
        REQUIRE(h >= std::min(si, st) - 1e-12);
        REQUIRE(h <= std::max(si, st) + 1e-12);
        // min-sensitivity bounds
        if (lambda > 0.0 && lambda < 1.0) {
            REQUIRE(h <= st / (1.0 - lambda) + 1e-12);
            REQUIRE(h <= si / lambda + 1e-12);
        }
    }
}

TEST_CASE("harmonic reward is strictly monotone in each score") {
    Rng rng(7);
    for (int i = 0; i < 10000; ++i) {
        double lambda = 0.05 + 0.9 * rng.uniform();
        double si = 0.05 + 0.9 * rng.uniform();
        double st = 0.05 + 0.9 * rng.uniform();
        double h = harmonic_reward({si, st}, lambda);
        REQUIRE(harmonic_reward({si + 0.04, st}, lambda) > h);
        REQUIRE(harmonic_reward({si, st + 0.04}, lambda) > h);
    }
}

TEST_CASE("bradley-terry probability identities") {
    REQUIRE(bt_probability(0.7, 0.7) == 0.5);
    REQUIRE(bt_probability(std::log(2.0), 0.0) == Catch::Approx(2.0 / 3.0).margin(1e-12));

    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        double a = 4.0 * rng.uniform() - 2.0;
        double b = 4.0 * rng.uniform() - 2.0;
        double c = 10.0 * rng.uniform() - 5.0;
        REQUIRE(bt_probability(a, b) + bt_probability(b, a) ==
                Catch::Approx(1.0).margin(1e-12));
        REQUIRE(bt_probability(a + c, b + c) ==
                Catch::Approx(bt_probability(a, b)).margin(1e-12));
        REQUIRE(bt_probability(a + 0.1, b) > bt_probability(a, b));
    }
    REQUIRE_THROWS_AS(
        bt_probability(std::numeric_limits<double>::infinity(), 0.0),
        std::invalid_argument);
}

TEST_CASE("sample_label matches its probability") {
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        REQUIRE(sample_label(1.0, rng) == 1);
        REQUIRE(sample_label(0.0, rng) == 0);
    }
    long ones = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) ones += sample_label(0.5, rng);
    REQUIRE(static_cast<double>(ones) / n == Catch::Approx(0.5).margin(0.01));
    REQUIRE_THROWS_AS(sample_label(1.5, rng), std::invalid_argument);
}

TEST_CASE("align_i endpoint values") {
    Vec e1{1.0, 0.0, 0.0};
    Vec e2{0.0, 1.0, 0.0};
    Vec neg{-1.0, 0.0, 0.0};
    std::vector<Vec> refs{e1};
    REQUIRE(align_i(e1, refs) == 1.0);
    REQUIRE(align_i(e2, refs) == 0.5);
    REQUIRE(align_i(neg, refs) == 0.0);
    REQUIRE_THROWS_AS(align_i(e1, std::vector<Vec>{}), std::invalid_argument);

    std::vector<Vec> two{e1, e2};
    REQUIRE(align_i(e1, two) == Catch::Approx(0.75));
}

TEST_CASE("align_t on clean renders and synthetic embeddings") {
    auto world = build_world(12, 7);
    OracleEmbedder emb(world);
    Rng rng(2);
    // clean-render consistency bound, measured over the whole world
    for (const auto& s : world.subjects) {
        for (const auto& p : world.training_prompts_for(s)) {
            auto img = render(s, p, rng);
            REQUIRE(align_t(emb, img.pixels, p) >= 0.95);
        }
    }
}

TEST_CASE("score pair cosine-to-unit-interval mapping endpoints") {
    // orthogonal/opposite embeddings map to 0.5 / 0.0
    Vec a{1.0, 0.0};
    Vec b{0.0, 1.0};
    Vec c{-1.0, 0.0};
    REQUIRE((cosine(a, b) + 1.0) / 2.0 == 0.5);
    REQUIRE((cosine(a, c) + 1.0) / 2.0 == 0.0);
}

TEST_CASE("preference dataset respects lambda_train = 0") {
    auto world = build_world(6, 19);
    const auto& subject = world.held_out();
    OracleEmbedder emb =
        OracleEmbedder(world).with_binding(kSubjectToken, subject);
    auto refs = reference_images(world, subject, 4);
    auto prompts = SubjectWorld::training_prompts(subject.shape, kSubjectToken);

    // synthetic negatives: renders of other subjects under the prompts
    std::vector<NegativeImage> negatives;
    Rng rng(3);
    for (int i = 0; i < 8; ++i) {
        const auto& other = world.subjects[static_cast<std::size_t>(i % 4)];
        NegativeImage n;
        n.pixels = render(other, prompts[static_cast<std::size_t>(i)], rng).pixels;
        n.prompt_index = i;
        n.id = i;
        negatives.push_back(std::move(n));
    }

    RewardConfig rcfg;  // lambda_train = 0
    Rng label_rng(5);
    auto tuples = build_preference_dataset(refs, negatives, prompts, rcfg, emb,
                                           label_rng);
    REQUIRE(tuples.size() == negatives.size());
    for (const auto& t : tuples) {
        // at lambda_train = 0 the reward inside the preference model is the
        // (clamped) text-alignment score alone
        REQUIRE(t.r_gen ==
                std::clamp(t.gen_scores.align_t, rcfg.score_floor, 1.0));
        REQUIRE((t.y == 0 || t.y == 1));
        REQUIRE(t.p_ref_preferred == bt_probability(t.r_ref, t.r_gen));
    }

    REQUIRE_THROWS_AS(build_preference_dataset({}, negatives, prompts, rcfg,
                                               emb, label_rng),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(
        build_preference_dataset(refs, {}, prompts, rcfg, emb, label_rng),
        std::invalid_argument);
}

TEST_CASE("identical rewards give balanced labels") {
    // a pair with r_ref == r_gen resamples to the empirical mean 1/2
    double p = bt_probability(0.42, 0.42);
    REQUIRE(p == 0.5);
    Rng rng(77);
    long ones = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) ones += sample_label(p, rng);
    REQUIRE(static_cast<double>(ones) / n == Catch::Approx(0.5).margin(0.02));
}
