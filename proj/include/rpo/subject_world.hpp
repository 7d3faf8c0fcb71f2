#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rpo/common.hpp"

namespace rpo {

// Synthetic subject-driven world: procedural sprites over patterned
// backgrounds, structured token prompts, and an oracle embedder that
// recovers the generative factors directly from pixels. The embedder
// plays the role of a pretrained dual encoder: f maps images and g maps
// prompts into one shared unit-sphere feature space.

constexpr int kImageSize = 16;
constexpr int kDataDim = kImageSize * kImageSize;

constexpr int kNumShapes = 4;
constexpr int kNumContexts = 8;
constexpr int kNumStyles = 2;  // invert, accessory

// factor-space layout: shape one-hot | color | context one-hot | styles | residual
constexpr int kShapeOffset = 0;
constexpr int kColorOffset = kNumShapes;
constexpr int kContextOffset = kColorOffset + 1;
constexpr int kStyleOffset = kContextOffset + kNumContexts;
constexpr int kResidualOffset = kStyleOffset + kNumStyles;
constexpr int kFactorDim = kResidualOffset + 1;

// sprite box: rows/cols 3..12 inclusive
constexpr int kBoxLo = 3;
constexpr int kBoxHi = 13;  // exclusive
constexpr int kBoxSize = kBoxHi - kBoxLo;

// accessory zone: top-right margin corner, never part of context matching
constexpr int kAccRowLo = 0, kAccRowHi = 3;
constexpr int kAccColLo = 13, kAccColHi = 16;

constexpr double kContextLo = 0.05;
constexpr double kContextHi = 0.33;
constexpr double kSpriteBase = 0.55;
constexpr double kSpriteGain = 0.40;
constexpr double kAccessoryIntensity = 0.90;
constexpr double kRenderJitterSigma = 0.01;
constexpr double kMaskThreshold = 0.45;
constexpr double kPropertyModShift = 0.40;  // color shift for property-modification prompts

enum class Shape { circle = 0, square = 1, triangle = 2, cross = 3 };
enum class StyleId { none = -1, invert = 0, accessory = 1 };
enum class PromptKind {
    recontextualization = 0,
    property_modification = 1,
    style_transfer = 2,
    accessorization = 3
};

inline const char* shape_name(Shape s) {
    static const char* names[] = {"circle", "square", "triangle", "cross"};
    return names[static_cast<int>(s)];
}

inline const char* kind_name(PromptKind k) {
    static const char* names[] = {"recon", "propmod", "style", "accessory"};
    return names[static_cast<int>(k)];
}

inline const char* style_name(StyleId s) {
    switch (s) {
        case StyleId::invert: return "invert";
        case StyleId::accessory: return "accessory";
        default: return "none";
    }
}

// object subjects carry 6 recon / 1 propmod / 1 style prompts,
// live subjects 5 recon / 1 propmod / 1 style / 1 accessory
inline bool is_live_shape(Shape s) {
    return s == Shape::triangle || s == Shape::cross;
}

struct SubjectSpec {
    std::string subject_id;
    Shape shape = Shape::circle;
    double color = 0.0;  // in [0,1]
    std::uint32_t texture_seed = 0;
};

struct PromptSpec {
    std::string subject_token;  // "subj:<id>", "class:<shape>" or a bound token like "[V]"
    int context_id = 0;
    StyleId style = StyleId::none;
    PromptKind kind = PromptKind::recontextualization;

    // canonical token sequence; also the conditioning fed to the denoiser
    std::vector<std::string> tokens() const {
        return {subject_token, std::string("ctx:") + std::to_string(context_id),
                std::string("style:") + style_name(style),
                std::string("kind:") + kind_name(kind)};
    }

    std::string text() const {
        std::string out;
        for (const auto& t : tokens()) {
            if (!out.empty()) out += ' ';
            out += t;
        }
        return out;
    }
};

struct RenderedImage {
    Vec pixels;  // kDataDim values in [0,1]
    Vec truth;   // unit-norm factor vector
};

// ----------------------------------------------------------------- masks

namespace detail {

inline std::array<std::array<bool, kBoxSize * kBoxSize>, kNumShapes>
make_shape_masks() {
    std::array<std::array<bool, kBoxSize * kBoxSize>, kNumShapes> masks{};
    auto at = [](int r, int c) { return r * kBoxSize + c; };
    for (int r = 0; r < kBoxSize; ++r) {
        for (int c = 0; c < kBoxSize; ++c) {
            double dr = r - 4.5, dc = c - 4.5;
            // circle: filled disc
            masks[0][at(r, c)] = dr * dr + dc * dc <= 4.0 * 4.0;
            // square: hollow ring of width 2
            bool outer = true;
            bool inner = r >= 2 && r < kBoxSize - 2 && c >= 2 && c < kBoxSize - 2;
            masks[1][at(r, c)] = outer && !inner;
            // triangle: filled, apex at top
            masks[2][at(r, c)] = std::abs(dc) <= 0.55 * r + 0.3;
            // cross: plus sign, arms 2 px wide
            bool vbar = c == 4 || c == 5;
            bool hbar = r == 4 || r == 5;
            masks[3][at(r, c)] = vbar || hbar;
        }
    }
    return masks;
}

inline const std::array<std::array<bool, kBoxSize * kBoxSize>, kNumShapes>&
shape_masks() {
    static const auto masks = make_shape_masks();
    return masks;
}

// context background patterns, values in {lo, hi}
inline double context_pixel(int ctx, int r, int c) {
    const double lo = kContextLo, hi = kContextHi;
    switch (ctx) {
        case 0: return lo;                                   // plain
        case 1: return ((r / 2) % 2 == 0) ? hi : lo;         // h-stripes
        case 2: return ((c / 2) % 2 == 0) ? hi : lo;         // v-stripes
        case 3: return ((r / 2 + c / 2) % 2 == 0) ? hi : lo; // checker 2
        case 4: return ((r / 4 + c / 4) % 2 == 0) ? hi : lo; // checker 4
        case 5: return (((r + c) / 2) % 2 == 0) ? hi : lo;   // diagonal
        case 6: return (r % 4 == 1 && c % 2 == 1) ? hi : lo; // dots
        case 7:                                              // frame
            return (r < 2 || r >= kImageSize - 2 || c < 2 || c >= kImageSize - 2)
                       ? hi
                       : lo;
        default: throw std::invalid_argument("context_pixel: bad context id");
    }
}

inline bool in_sprite_box(int r, int c) {
    return r >= kBoxLo && r < kBoxHi && c >= kBoxLo && c < kBoxHi;
}

inline bool in_accessory_zone(int r, int c) {
    return r >= kAccRowLo && r < kAccRowHi && c >= kAccColLo && c < kAccColHi;
}

}  // namespace detail

// ----------------------------------------------------------------- world

struct SubjectWorld {
    std::uint64_t seed = 0;
    std::vector<SubjectSpec> subjects;  // includes the held-out subject
    std::string held_out_id;

    const SubjectSpec& subject(const std::string& id) const {
        for (const auto& s : subjects)
            if (s.subject_id == id) return s;
        throw std::invalid_argument("unknown subject id: " + id);
    }

    const SubjectSpec& held_out() const { return subject(held_out_id); }

    std::vector<SubjectSpec> pretrain_subjects() const {
        std::vector<SubjectSpec> out;
        for (const auto& s : subjects)
            if (s.subject_id != held_out_id) out.push_back(s);
        return out;
    }

    static std::string subject_token(const SubjectSpec& s) {
        return "subj:" + s.subject_id;
    }
    static std::string class_token(Shape shape) {
        return std::string("class:") + shape_name(shape);
    }

    // the reference prompt ("a photo of [V] <class>" analog): plain context
    static PromptSpec subject_prompt(const std::string& token) {
        PromptSpec p;
        p.subject_token = token;
        p.context_id = 0;
        p.style = StyleId::none;
        p.kind = PromptKind::recontextualization;
        return p;
    }

    // 8 training prompts; kind counts depend on subject category
    static std::vector<PromptSpec> training_prompts(Shape shape,
                                                    const std::string& token) {
        std::vector<PromptSpec> out;
        auto add = [&](int ctx, StyleId st, PromptKind k) {
            PromptSpec p;
            p.subject_token = token;
            p.context_id = ctx;
            p.style = st;
            p.kind = k;
            out.push_back(p);
        };
        if (is_live_shape(shape)) {
            for (int ctx = 1; ctx <= 5; ++ctx)
                add(ctx, StyleId::none, PromptKind::recontextualization);
            add(0, StyleId::none, PromptKind::property_modification);
            add(0, StyleId::invert, PromptKind::style_transfer);
            add(0, StyleId::accessory, PromptKind::accessorization);
        } else {
            for (int ctx = 1; ctx <= 6; ++ctx)
                add(ctx, StyleId::none, PromptKind::recontextualization);
            add(0, StyleId::none, PromptKind::property_modification);
            add(0, StyleId::invert, PromptKind::style_transfer);
        }
        return out;
    }

    std::vector<PromptSpec> training_prompts_for(const SubjectSpec& s) const {
        return training_prompts(s.shape, subject_token(s));
    }
};

inline SubjectWorld build_world(int n_subjects, std::uint64_t seed) {
    constexpr int kPaletteSize = 4;
    static const double palette[kPaletteSize] = {0.20, 0.45, 0.70, 0.95};
    const int max_subjects = kNumShapes * kPaletteSize;
    if (n_subjects < 2)
        throw std::invalid_argument("build_world: n_subjects must be >= 2");
    if (n_subjects > max_subjects)
        throw std::invalid_argument(
            "build_world: n_subjects exceeds distinct (shape,color) pairs (" +
            std::to_string(max_subjects) + ")");

    // deterministic shuffle of all (shape,color) combinations
    std::vector<std::pair<int, int>> combos;
    for (int s = 0; s < kNumShapes; ++s)
        for (int c = 0; c < kPaletteSize; ++c) combos.emplace_back(s, c);
    Rng rng = Rng::stream(seed, "world.combos");
    for (int i = static_cast<int>(combos.size()) - 1; i > 0; --i) {
        int j = rng.uniform_int(i + 1);
        std::swap(combos[static_cast<std::size_t>(i)],
                  combos[static_cast<std::size_t>(j)]);
    }

    SubjectWorld world;
    world.seed = seed;
    for (int i = 0; i < n_subjects; ++i) {
        SubjectSpec s;
        char buf[8];
        std::snprintf(buf, sizeof(buf), "s%02d", i);
        s.subject_id = buf;
        s.shape = static_cast<Shape>(combos[static_cast<std::size_t>(i)].first);
        s.color = palette[combos[static_cast<std::size_t>(i)].second];
        s.texture_seed = static_cast<std::uint32_t>(
            mix64(seed, static_cast<std::uint64_t>(i)) & 0xffffffffu);
        world.subjects.push_back(std::move(s));
    }
    world.held_out_id = world.subjects.back().subject_id;
    return world;
}

// ---------------------------------------------------------------- render

namespace detail {

inline double effective_color(const SubjectSpec& s, const PromptSpec& p) {
    if (p.kind == PromptKind::property_modification)
        return std::min(1.0, s.color + kPropertyModShift);
    return s.color;
}

inline Vec factor_vector(Shape shape, double color, int ctx, StyleId style) {
    Vec f(kFactorDim, 0.0);
    f[kShapeOffset + static_cast<int>(shape)] = 1.0;
    f[kColorOffset] = color;
    f[kContextOffset + ctx] = 1.0;
    if (style != StyleId::none) f[kStyleOffset + static_cast<int>(style)] = 1.0;
    double n = nrm2(f);
    for (double& x : f) x /= n;
    return f;
}

}  // namespace detail

inline RenderedImage render(const SubjectSpec& subject, const PromptSpec& prompt,
                            Rng& rng) {
    if (prompt.context_id < 0 || prompt.context_id >= kNumContexts)
        throw std::invalid_argument("render: bad context id");

    RenderedImage img;
    img.pixels.assign(kDataDim, 0.0);

    const double color = detail::effective_color(subject, prompt);
    const double intensity = kSpriteBase + kSpriteGain * color;
    const auto& mask = detail::shape_masks()[static_cast<int>(subject.shape)];
    Rng speckle = Rng::stream(subject.texture_seed, "render.speckle");

    for (int r = 0; r < kImageSize; ++r) {
        for (int c = 0; c < kImageSize; ++c) {
            double v = detail::context_pixel(prompt.context_id, r, c);
            if (detail::in_sprite_box(r, c)) {
                int br = r - kBoxLo, bc = c - kBoxLo;
                if (mask[static_cast<std::size_t>(br * kBoxSize + bc)]) {
                    v = intensity + 0.03 * (2.0 * speckle.uniform() - 1.0);
                }
            }
            if (prompt.style == StyleId::accessory &&
                detail::in_accessory_zone(r, c)) {
                v = kAccessoryIntensity;
            }
            img.pixels[static_cast<std::size_t>(r * kImageSize + c)] = v;
        }
    }

    if (prompt.style == StyleId::invert)
        for (double& v : img.pixels) v = 1.0 - v;

    for (double& v : img.pixels)
        v = clamp01(v + kRenderJitterSigma * rng.normal());

    img.truth = detail::factor_vector(subject.shape, color, prompt.context_id,
                                      prompt.style);
    return img;
}

// --------------------------------------------------------------- embedder

// Oracle stand-in for the pretrained dual encoder. It shares the renderer's
// templates and decodes factors back out of pixels; confidence mass that
// cannot be attributed to any factor lands on a dedicated residual axis,
// so unstructured images embed far away from every truth vector.
class OracleEmbedder {
public:
    // embedding returned for an all-zero image (documented reserved constant)
    static Vec zero_image_embedding() {
        Vec v(kFactorDim, 0.0);
        v[kResidualOffset] = 1.0;
        return v;
    }

    explicit OracleEmbedder(const SubjectWorld& world) {
        for (const auto& s : world.subjects) {
            subjects_[SubjectWorld::subject_token(s)] = s;
        }
    }

    // bind an extra token (the "[V]" analog) to an existing subject
    OracleEmbedder with_binding(const std::string& token,
                                const SubjectSpec& subject) const {
        OracleEmbedder copy = *this;
        copy.subjects_[token] = subject;
        return copy;
    }

    Vec embed_image(std::span<const double> pixels) const {
        if (pixels.size() != static_cast<std::size_t>(kDataDim))
            throw std::invalid_argument("embed_image: wrong pixel count");
        for (double v : pixels)
            if (!std::isfinite(v))
                throw std::invalid_argument("embed_image: non-finite pixel");

        bool all_zero = true;
        for (double v : pixels)
            if (v != 0.0) { all_zero = false; break; }
        if (all_zero) return zero_image_embedding();

        // polarity: margin mean below 0.5 means normal, above means inverted
        double margin_sum = 0.0;
        int margin_n = 0;
        for (int r = 0; r < kImageSize; ++r)
            for (int c = 0; c < kImageSize; ++c)
                if (!detail::in_sprite_box(r, c) &&
                    !detail::in_accessory_zone(r, c)) {
                    margin_sum += pixels[static_cast<std::size_t>(
                        r * kImageSize + c)];
                    ++margin_n;
                }
        const double margin_mean = margin_sum / margin_n;
        const bool inverted = margin_mean > 0.5;
        const double style_conf =
            std::min(1.0, std::abs(margin_mean - 0.5) / 0.17);

        auto px = [&](int r, int c) {
            double v = pixels[static_cast<std::size_t>(r * kImageSize + c)];
            return inverted ? 1.0 - v : v;
        };

        // context scores: RBF similarity over the margin region
        std::array<double, kNumContexts> ctx_scores{};
        for (int k = 0; k < kNumContexts; ++k) {
            double sq = 0.0;
            for (int r = 0; r < kImageSize; ++r)
                for (int c = 0; c < kImageSize; ++c) {
                    if (detail::in_sprite_box(r, c) ||
                        detail::in_accessory_zone(r, c))
                        continue;
                    double d = px(r, c) - detail::context_pixel(k, r, c);
                    sq += d * d;
                }
            ctx_scores[static_cast<std::size_t>(k)] =
                std::exp(-(sq / margin_n) / 0.0025);
        }
        double ctx_conf = *std::max_element(ctx_scores.begin(), ctx_scores.end());

        // sprite mask decode inside the box
        std::array<bool, kBoxSize * kBoxSize> est{};
        double on_sum = 0.0;
        int on_n = 0;
        for (int r = 0; r < kBoxSize; ++r)
            for (int c = 0; c < kBoxSize; ++c) {
                double v = px(r + kBoxLo, c + kBoxLo);
                bool on = v > kMaskThreshold;
                est[static_cast<std::size_t>(r * kBoxSize + c)] = on;
                if (on) {
                    on_sum += v;
                    ++on_n;
                }
            }

        std::array<double, kNumShapes> shape_scores{};
        for (int m = 0; m < kNumShapes; ++m) {
            const auto& mask = detail::shape_masks()[m];
            int ham = 0;
            for (int i = 0; i < kBoxSize * kBoxSize; ++i)
                if (est[static_cast<std::size_t>(i)] !=
                    mask[static_cast<std::size_t>(i)])
                    ++ham;
            shape_scores[static_cast<std::size_t>(m)] = std::exp(-ham / 6.0);
        }
        double shape_conf =
            *std::max_element(shape_scores.begin(), shape_scores.end());

        double color_est = 0.0;
        if (on_n > 0)
            color_est = clamp01((on_sum / on_n - kSpriteBase) / kSpriteGain);

        // accessory: fraction of the zone above threshold
        double acc_on = 0.0;
        for (int r = kAccRowLo; r < kAccRowHi; ++r)
            for (int c = kAccColLo; c < kAccColHi; ++c)
                if (px(r, c) > kMaskThreshold) acc_on += 1.0;
        acc_on /= (kAccRowHi - kAccRowLo) * (kAccColHi - kAccColLo);

        Vec v(kFactorDim, 0.0);
        for (int m = 0; m < kNumShapes; ++m)
            v[kShapeOffset + m] = shape_scores[static_cast<std::size_t>(m)];
        v[kColorOffset] = color_est * shape_conf;
        for (int k = 0; k < kNumContexts; ++k)
            v[kContextOffset + k] = ctx_scores[static_cast<std::size_t>(k)];
        v[kStyleOffset + static_cast<int>(StyleId::invert)] =
            inverted ? style_conf : 0.0;
        v[kStyleOffset + static_cast<int>(StyleId::accessory)] = acc_on;
        v[kResidualOffset] = (1.0 - shape_conf) * (1.0 - ctx_conf);

        double n = nrm2(v);
        if (n < 1e-12) return zero_image_embedding();
        for (double& x : v) x /= n;
        return v;
    }

    Vec embed_text(const PromptSpec& prompt) const {
        if (prompt.context_id < 0 || prompt.context_id >= kNumContexts)
            throw std::invalid_argument("embed_text: bad context id");
        Shape shape;
        double color;
        if (auto it = subjects_.find(prompt.subject_token);
            it != subjects_.end()) {
            shape = it->second.shape;
            color = detail::effective_color(it->second, prompt);
        } else if (auto cls = class_of_token(prompt.subject_token)) {
            shape = *cls;
            color = 0.0;  // class token: subject-identity factors zeroed
        } else {
            throw std::invalid_argument("embed_text: unknown token '" +
                                        prompt.subject_token + "'");
        }
        return detail::factor_vector(shape, color, prompt.context_id,
                                     prompt.style);
    }

    const std::map<std::string, SubjectSpec>& bindings() const {
        return subjects_;
    }

private:
    static std::optional<Shape> class_of_token(const std::string& token) {
        for (int s = 0; s < kNumShapes; ++s) {
            if (token == SubjectWorld::class_token(static_cast<Shape>(s)))
                return static_cast<Shape>(s);
        }
        return std::nullopt;
    }

    std::map<std::string, SubjectSpec> subjects_;
};

// ------------------------------------------------------------------- io

inline void to_json(nlohmann::json& j, const SubjectSpec& s) {
    j = nlohmann::json{{"subject_id", s.subject_id},
                       {"shape", shape_name(s.shape)},
                       {"color", s.color},
                       {"texture_seed", s.texture_seed}};
}

inline void from_json(const nlohmann::json& j, SubjectSpec& s) {
    j.at("subject_id").get_to(s.subject_id);
    std::string shape = j.at("shape").get<std::string>();
    bool found = false;
    for (int k = 0; k < kNumShapes; ++k)
        if (shape == shape_name(static_cast<Shape>(k))) {
            s.shape = static_cast<Shape>(k);
            found = true;
        }
    if (!found) throw std::invalid_argument("bad shape name: " + shape);
    j.at("color").get_to(s.color);
    j.at("texture_seed").get_to(s.texture_seed);
}

inline void to_json(nlohmann::json& j, const SubjectWorld& w) {
    j = nlohmann::json{{"seed", w.seed},
                       {"image_size", kImageSize},
                       {"subjects", w.subjects},
                       {"held_out_id", w.held_out_id}};
}

inline void from_json(const nlohmann::json& j, SubjectWorld& w) {
    j.at("seed").get_to(w.seed);
    j.at("subjects").get_to(w.subjects);
    j.at("held_out_id").get_to(w.held_out_id);
}

inline void save_world(const SubjectWorld& w, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << nlohmann::json(w).dump(2) << '\n';
}

inline SubjectWorld load_world(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    nlohmann::json j;
    in >> j;
    return j.get<SubjectWorld>();
}

// ASCII portable graymap export for visual inspection
inline void write_pgm(const std::filesystem::path& path,
                      std::span<const double> pixels) {
    if (pixels.size() != static_cast<std::size_t>(kDataDim))
        throw std::invalid_argument("write_pgm: wrong pixel count");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P2\n" << kImageSize << ' ' << kImageSize << "\n255\n";
    for (int r = 0; r < kImageSize; ++r) {
        for (int c = 0; c < kImageSize; ++c) {
            int v = static_cast<int>(std::lround(
                clamp01(pixels[static_cast<std::size_t>(r * kImageSize + c)]) *
                255.0));
            out << v << (c + 1 == kImageSize ? '\n' : ' ');
        }
    }
}

}  // namespace rpo
