#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "rpo/diffusion.hpp"

namespace rpo {

// Checkpoint file layout (version 1, all integers and doubles little-endian):
//
//   bytes 0..7    magic "RPOCKPT1"
//   u32           format version (1)
//   i32           schedule T
//   i32           schedule kind (0 cosine, 1 linear)
//   f64 * T       alpha_bar
//   i32 * 4       dims: data_dim, time_dim, cond_dim, hidden
//   u32           vocab size, then per token: u32 length + raw bytes
//   u64           parameter count, then f64 * count (theta)
//   u64 * 2       rng bookkeeping (stream seed, draw counter); zero unless
//                 the writer tracks a live training stream
//
// Doubles are stored bit-exact, so save/load round-trips losslessly.

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

inline void put_f64(std::ostream& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline std::uint64_t get_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline double get_f64(std::istream& in) {
    return std::bit_cast<double>(get_u64(in));
}

}  // namespace detail

struct Checkpoint {
    NoiseSchedule schedule;
    DenoiserModel model;
    std::uint64_t rng_seed = 0;
    std::uint64_t rng_counter = 0;
};

inline void save_checkpoint(const Checkpoint& ckpt,
                            const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write("RPOCKPT1", 8);
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.schedule.T));
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.schedule.kind));
    for (double v : ckpt.schedule.alpha_bar) detail::put_f64(out, v);
    const auto& d = ckpt.model.dims;
    detail::put_u32(out, static_cast<std::uint32_t>(d.data_dim));
    detail::put_u32(out, static_cast<std::uint32_t>(d.time_dim));
    detail::put_u32(out, static_cast<std::uint32_t>(d.cond_dim));
    detail::put_u32(out, static_cast<std::uint32_t>(d.hidden));
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.model.vocab.size()));
    for (const auto& tok : ckpt.model.vocab) {
        detail::put_u32(out, static_cast<std::uint32_t>(tok.size()));
        out.write(tok.data(), static_cast<std::streamsize>(tok.size()));
    }
    detail::put_u64(out, ckpt.model.theta.size());
    for (double v : ckpt.model.theta) detail::put_f64(out, v);
    detail::put_u64(out, ckpt.rng_seed);
    detail::put_u64(out, ckpt.rng_counter);
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "RPOCKPT1", 8) != 0)
        throw std::runtime_error("bad checkpoint magic: " + path.string());
    std::uint32_t version = detail::get_u32(in);
    if (version != 1)
        throw std::runtime_error("unsupported checkpoint version " +
                                 std::to_string(version));
    Checkpoint ckpt;
    ckpt.schedule.T = static_cast<int>(detail::get_u32(in));
    ckpt.schedule.kind = static_cast<ScheduleKind>(detail::get_u32(in));
    if (ckpt.schedule.T < 2 || ckpt.schedule.T > 1000000)
        throw std::runtime_error("corrupt checkpoint: bad T");
    ckpt.schedule.alpha_bar.resize(static_cast<std::size_t>(ckpt.schedule.T));
    for (double& v : ckpt.schedule.alpha_bar) v = detail::get_f64(in);

    auto& m = ckpt.model;
    m.dims.data_dim = static_cast<int>(detail::get_u32(in));
    m.dims.time_dim = static_cast<int>(detail::get_u32(in));
    m.dims.cond_dim = static_cast<int>(detail::get_u32(in));
    m.dims.hidden = static_cast<int>(detail::get_u32(in));
    std::uint32_t vocab_size = detail::get_u32(in);
    m.vocab.resize(vocab_size);
    for (auto& tok : m.vocab) {
        std::uint32_t len = detail::get_u32(in);
        if (len > 4096) throw std::runtime_error("corrupt checkpoint: token");
        tok.resize(len);
        in.read(tok.data(), static_cast<std::streamsize>(len));
    }
    std::uint64_t n = detail::get_u64(in);
    m.compute_offsets();
    if (n != m.theta.size())
        throw std::runtime_error("corrupt checkpoint: parameter count");
    for (double& v : m.theta) v = detail::get_f64(in);
    m.rebuild_token_index();
    ckpt.rng_seed = detail::get_u64(in);
    ckpt.rng_counter = detail::get_u64(in);
    if (!in) throw std::runtime_error("truncated checkpoint: " + path.string());
    return ckpt;
}

inline std::uint64_t hash_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::uint64_t h = kFnvOffset;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
        if (!in) break;
    }
    return h;
}

}  // namespace rpo
