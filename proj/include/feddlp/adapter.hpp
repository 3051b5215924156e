// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "feddlp/error.hpp"
#include "feddlp/linalg.hpp"
#include "feddlp/rng.hpp"

namespace feddlp {

/// Low-rank additive update `up * diag(gate) * down` on a frozen linear map.
/// Without a gate the inner scaling is the identity.
struct LoraAdapter {
    std::size_t rank = 0;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    Matrix down;                 // rank x d_in
    Matrix up;                   // d_out x rank
    std::optional<Vector> gate;  // rank

    bool has_gate() const noexcept { return gate.has_value(); }

    double gate_at(std::size_t j) const noexcept { return gate ? (*gate)[j] : 1.0; }

    bool structurally_equal(const LoraAdapter& o) const noexcept {
        return rank == o.rank && d_in == o.d_in && d_out == o.d_out && has_gate() == o.has_gate();
    }

    void validate() const {
        if (down.rows() != rank || down.cols() != d_in || up.rows() != d_out || up.cols() != rank) {
            throw ShapeError("LoraAdapter: matrices do not match rank/d_in/d_out");
        }
        if (gate && gate->size() != rank) throw ShapeError("LoraAdapter: gate length != rank");
    }

    friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

struct AdapterGrads {
    Matrix d_down;
    Matrix d_up;
    std::optional<Vector> d_gate;

    static AdapterGrads zeros_like(const LoraAdapter& ad) {
        AdapterGrads g{Matrix(ad.rank, ad.d_in), Matrix(ad.d_out, ad.rank), std::nullopt};
        if (ad.has_gate()) g.d_gate = Vector(ad.rank, 0.0);
        return g;
    }
};

/// down ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), up = 0, gate = 1. The initial delta is exactly zero.
inline LoraAdapter init_adapter(std::size_t rank, std::size_t d_in, std::size_t d_out, bool with_gate,
                                std::uint64_t seed) {
    if (rank == 0 || d_in == 0 || d_out == 0) {
        throw ConfigError("init_adapter: rank and dimensions must be >= 1");
    }
    LoraAdapter ad{rank, d_in, d_out, Matrix(rank, d_in), Matrix(d_out, rank), std::nullopt};
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : ad.down.data()) v = dist(rng);
    if (with_gate) ad.gate = Vector(rank, 1.0);
    return ad;
}

/// Inner activations of the adapter for one input: h = down * x.
inline Vector adapter_hidden(const LoraAdapter& ad, std::span<const double> x) {
    if (x.size() != ad.d_in) throw ShapeError("apply_delta: input length != d_in");
    return matvec(ad.down, x);
}

inline Vector apply_delta(const LoraAdapter& ad, std::span<const double> x) {
    Vector h = adapter_hidden(ad, x);
    for (std::size_t j = 0; j < ad.rank; ++j) h[j] *= ad.gate_at(j);
    return matvec(ad.up, h);
}

/// Concatenates two adapters over the same dims into one of rank r_a + r_b whose
/// delta is the sum of both deltas. The result is gated iff either input is.
inline LoraAdapter merge_adapters(const LoraAdapter& a, const LoraAdapter& b) {
    if (a.d_in != b.d_in || a.d_out != b.d_out) throw ShapeError("merge_adapters: dims differ");
    const std::size_t r = a.rank + b.rank;
    LoraAdapter m{r, a.d_in, a.d_out, Matrix(r, a.d_in), Matrix(a.d_out, r), std::nullopt};
    for (std::size_t j = 0; j < r; ++j) {
        const auto& src = j < a.rank ? a : b;
        const std::size_t sj = j < a.rank ? j : j - a.rank;
        auto dst_row = m.down.row(j);
        auto src_row = src.down.row(sj);
        std::copy(src_row.begin(), src_row.end(), dst_row.begin());
        for (std::size_t o = 0; o < a.d_out; ++o) m.up(o, j) = src.up(o, sj);
    }
    if (a.has_gate() || b.has_gate()) {
        m.gate = Vector(r);
        for (std::size_t j = 0; j < r; ++j) {
            (*m.gate)[j] = j < a.rank ? a.gate_at(j) : b.gate_at(j - a.rank);
        }
    }
    return m;
}

enum class ThresholdKind { soft, hard };

inline Vector soft_threshold(std::span<const double> g, double threshold) {
    if (!(threshold >= 0.0)) throw ConfigError("soft_threshold: negative threshold");
    Vector out(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double mag = std::abs(g[i]) - threshold;
        out[i] = mag > 0.0 ? std::copysign(mag, g[i]) : 0.0;
    }
    return out;
}

/// Zeroes entries with |g| <= threshold and leaves the rest untouched.
inline Vector hard_threshold(std::span<const double> g, double threshold) {
    if (!(threshold >= 0.0)) throw ConfigError("hard_threshold: negative threshold");
    Vector out(g.begin(), g.end());
    for (double& v : out) {
        if (std::abs(v) <= threshold) v = 0.0;
    }
    return out;
}

/// gate <- T_{lr*xi}(gate - lr * d_gate). Returns the indices of zero gates afterwards.
inline std::vector<std::size_t> proximal_gate_step(LoraAdapter& ad, std::span<const double> d_gate,
                                                   double lr, double xi,
                                                   ThresholdKind kind = ThresholdKind::soft) {
    if (!ad.has_gate()) throw ContractError("proximal_gate_step: adapter has no gate");
    if (d_gate.size() != ad.rank) throw ShapeError("proximal_gate_step: d_gate length != rank");
    if (!(lr >= 0.0) || !(xi >= 0.0)) throw ConfigError("proximal_gate_step: negative lr or xi");
    Vector& g = *ad.gate;
    Vector moved(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) moved[i] = g[i] - lr * d_gate[i];
    g = kind == ThresholdKind::soft ? soft_threshold(moved, lr * xi) : hard_threshold(moved, lr * xi);
    std::vector<std::size_t> pruned;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (g[i] == 0.0) pruned.push_back(i);
    }
    return pruned;
}

inline std::size_t active_rank(const LoraAdapter& ad) noexcept {
    if (!ad.has_gate()) return ad.rank;
    std::size_t n = 0;
    for (double v : *ad.gate) n += v != 0.0;
    return n;
}

/// Raw: r*(d_in + d_out) (+ r for the gate). Effective: r replaced by the number of
/// nonzero gates.
inline std::size_t param_count(const LoraAdapter& ad, bool effective = false) noexcept {
    const std::size_t r = effective ? active_rank(ad) : ad.rank;
    return r * (ad.d_in + ad.d_out) + (ad.has_gate() ? r : 0);
}

// --- wire format --------------------------------------------------------------
//
//   offset  size  field
//   0       4     magic "FDLP"
//   4       2     version (u16)
//   6       4     rank (u32)
//   10      4     d_in (u32)
//   14      4     d_out (u32)
//   18      1     gate present (u8, 0 or 1)
//   19      ...   down, up, [gate] as f32, row-major
//
// All integers and floats are little-endian.

inline constexpr std::uint16_t kAdapterFormatVersion = 1;
inline constexpr std::size_t kAdapterHeaderBytes = 19;

inline std::size_t serialized_size(const LoraAdapter& ad) noexcept {
    return kAdapterHeaderBytes + 4 * param_count(ad, false);
}

namespace detail {

inline void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void put_f32(std::vector<std::uint8_t>& out, double v) {
    put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline std::uint32_t to_u32(std::size_t v, const char* what) {
    if (v > 0xffffffffULL) throw FormatError(std::string("value too large for u32: ") + what);
    return static_cast<std::uint32_t>(v);
}

/// Bounds-checked little-endian reader that reports the failing section and offset.
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t offset() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

    void need(std::size_t n, const char* section) const {
        if (remaining() < n) {
            throw FormatError(std::string("truncated input in section '") + section + "' at byte offset " +
                              std::to_string(pos_) + ": need " + std::to_string(n) + " bytes, have " +
                              std::to_string(remaining()));
        }
    }

    std::uint8_t u8(const char* section) {
        need(1, section);
        return bytes_[pos_++];
    }

    std::uint16_t u16(const char* section) {
        need(2, section);
        const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }

    std::uint32_t u32(const char* section) {
        need(4, section);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    double f32(const char* section) { return static_cast<double>(std::bit_cast<float>(u32(section))); }

    void magic(const char (&expected)[5], const char* section) {
        need(4, section);
        for (int i = 0; i < 4; ++i) {
            if (bytes_[pos_ + i] != static_cast<std::uint8_t>(expected[i])) {
                throw FormatError(std::string("bad magic at byte offset ") + std::to_string(pos_) +
                                  ": expected \"" + expected + "\"");
            }
        }
        pos_ += 4;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::vector<std::uint8_t> serialize(const LoraAdapter& ad) {
    ad.validate();
    std::vector<std::uint8_t> out;
    out.reserve(serialized_size(ad));
    for (char c : {'F', 'D', 'L', 'P'}) out.push_back(static_cast<std::uint8_t>(c));
    detail::put_u16(out, kAdapterFormatVersion);
    detail::put_u32(out, detail::to_u32(ad.rank, "rank"));
    detail::put_u32(out, detail::to_u32(ad.d_in, "d_in"));
    detail::put_u32(out, detail::to_u32(ad.d_out, "d_out"));
    detail::put_u8(out, ad.has_gate() ? 1 : 0);
    for (double v : ad.down.data()) detail::put_f32(out, v);
    for (double v : ad.up.data()) detail::put_f32(out, v);
    if (ad.gate) {
        for (double v : *ad.gate) detail::put_f32(out, v);
    }
    return out;
}

inline LoraAdapter deserialize(std::span<const std::uint8_t> bytes) {
    detail::ByteReader in(bytes);
    in.magic("FDLP", "magic");
    const auto version = in.u16("version");
    if (version != kAdapterFormatVersion) {
        throw FormatError("unsupported adapter format version " + std::to_string(version));
    }
    const std::size_t rank = in.u32("rank");
    const std::size_t d_in = in.u32("d_in");
    const std::size_t d_out = in.u32("d_out");
    const auto gate_flag = in.u8("gate flag");
    if (gate_flag > 1) throw FormatError("invalid gate flag " + std::to_string(gate_flag) + " at byte offset 18");
    if (rank == 0 || d_in == 0 || d_out == 0) throw FormatError("adapter header has zero rank or dimension");

    LoraAdapter ad{rank, d_in, d_out, Matrix(rank, d_in), Matrix(d_out, rank), std::nullopt};
    in.need(4 * ad.down.size(), "down");
    for (double& v : ad.down.data()) v = in.f32("down");
    in.need(4 * ad.up.size(), "up");
    for (double& v : ad.up.data()) v = in.f32("up");
    if (gate_flag == 1) {
        ad.gate = Vector(rank);
        in.need(4 * rank, "gate");
        for (double& v : *ad.gate) v = in.f32("gate");
    }
    if (in.remaining() != 0) {
        throw FormatError("trailing bytes after adapter payload at byte offset " + std::to_string(in.offset()));
    }
    return ad;
}

} // namespace feddlp
