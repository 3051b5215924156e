// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "feddlp/adapter.hpp"
#include "feddlp/error.hpp"
#include "feddlp/linalg.hpp"
#include "feddlp/rng.hpp"

namespace feddlp {

/// N feature vectors with labels, plus K class prototypes in the same space.
struct EmbeddingDataset {
    Matrix embeddings;                // n x d
    std::vector<std::size_t> labels;  // n
    Matrix prototypes;                // k x d

    std::size_t n() const noexcept { return embeddings.rows(); }
    std::size_t d() const noexcept { return embeddings.cols(); }
    std::size_t k() const noexcept { return prototypes.rows(); }

    void validate() const {
        if (n() == 0) throw FormatError("dataset has no samples");
        if (labels.size() != n()) throw FormatError("dataset label count != sample count");
        if (prototypes.cols() != d()) throw FormatError("prototype width != embedding width");
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] >= k()) {
                throw FormatError("label " + std::to_string(labels[i]) + " at sample " + std::to_string(i) +
                                  " is >= class count " + std::to_string(k()));
            }
        }
        for (std::size_t c = 0; c < k(); ++c) {
            if (norm2(prototypes.row(c)) == 0.0) throw FormatError("prototype " + std::to_string(c) + " has zero norm");
        }
    }

    friend bool operator==(const EmbeddingDataset&, const EmbeddingDataset&) = default;
};

/// Orthonormal prototypes (Gram-Schmidt on Gaussians); sample = prototype[label] + sigma * N(0, I),
/// renormalized to unit length. Labels are assigned round-robin.
inline EmbeddingDataset generate_synthetic(std::size_t k, std::size_t d, std::size_t n, double sigma,
                                           std::uint64_t seed) {
    if (k == 0 || d == 0 || n == 0) throw ConfigError("generate_synthetic: k, d, n must be >= 1");
    if (k > n) throw ConfigError("generate_synthetic: more classes than samples");
    if (k > d) throw ConfigError("generate_synthetic: cannot build " + std::to_string(k) + " orthonormal prototypes in " + std::to_string(d) + " dims");
    if (!(sigma >= 0.0)) throw ConfigError("generate_synthetic: sigma must be >= 0");

    Rng rng = make_rng(seed, {stream::kData});
    std::normal_distribution<double> normal(0.0, 1.0);

    EmbeddingDataset ds{Matrix(n, d), std::vector<std::size_t>(n), Matrix(k, d)};
    for (std::size_t c = 0; c < k; ++c) {
        auto row = ds.prototypes.row(c);
        for (;;) {
            for (double& v : row) v = normal(rng);
            for (std::size_t p = 0; p < c; ++p) {
                const double proj = dot(row, ds.prototypes.row(p));
                auto prev = ds.prototypes.row(p);
                for (std::size_t j = 0; j < d; ++j) row[j] -= proj * prev[j];
            }
            const double nr = norm2(row);
            if (nr > 1e-8) {
                for (double& v : row) v /= nr;
                break;
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = i % k;
        ds.labels[i] = y;
        auto row = ds.embeddings.row(i);
        auto proto = ds.prototypes.row(y);
        for (std::size_t j = 0; j < d; ++j) row[j] = proto[j] + sigma * normal(rng);
        const double nr = norm2(row);
        if (nr > 0.0) {
            for (double& v : row) v /= nr;
        } else {
            std::copy(proto.begin(), proto.end(), row.begin());
        }
    }
    return ds;
}

/// Per-client lists of sample indices; pairwise disjoint, covering 0..n-1.
struct Partition {
    std::vector<std::vector<std::size_t>> assignments;

    std::size_t num_clients() const noexcept { return assignments.size(); }
};

namespace detail {

/// Dirichlet(beta * 1) sample computed in log space so that tiny beta does not underflow.
/// Uses Gamma(a) = Gamma(a + 1) * U^(1/a).
inline Vector sample_dirichlet(std::size_t dim, double beta, Rng& rng) {
    std::gamma_distribution<double> gamma(beta + 1.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Vector logs(dim);
    for (double& lg : logs) {
        const double g = gamma(rng);
        double u = unif(rng);
        while (u <= 0.0) u = unif(rng);
        lg = std::log(g) + std::log(u) / beta;
    }
    return softmax(logs);
}

/// Integer counts summing to `total`, proportional to `props`; leftovers go to the largest
/// fractional remainders (lowest index on ties).
inline std::vector<std::size_t> largest_remainder(std::span<const double> props, std::size_t total) {
    std::vector<std::size_t> counts(props.size());
    std::vector<double> rem(props.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < props.size(); ++i) {
        const double exact = props[i] * static_cast<double>(total);
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        rem[i] = exact - static_cast<double>(counts[i]);
        assigned += counts[i];
    }
    // floor can overshoot only through rounding of props summing slightly above 1
    while (assigned > total) {
        const auto it = std::max_element(counts.begin(), counts.end());
        --*it;
        --assigned;
    }
    std::vector<std::size_t> order(props.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t i = 0; assigned < total; i = (i + 1) % order.size()) {
        ++counts[order[i]];
        ++assigned;
    }
    return counts;
}

} // namespace detail

/// Class-wise Dirichlet allocation: for each class, proportions ~ Dir(beta) across clients,
/// converted to counts by largest remainder.
inline Partition dirichlet_partition(std::span<const std::size_t> labels, std::size_t n_clients, double beta,
                                     std::uint64_t seed) {
    if (n_clients == 0) throw ConfigError("dirichlet_partition: n_clients must be >= 1");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("dirichlet_partition: beta must be > 0");
    Partition part{std::vector<std::vector<std::size_t>>(n_clients)};
    if (labels.empty()) return part;

    const std::size_t k = *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<std::vector<std::size_t>> by_class(k);
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

    Rng rng = make_rng(seed, {stream::kPartition});
    for (auto& members : by_class) {
        if (members.empty()) continue;
        std::shuffle(members.begin(), members.end(), rng);
        const Vector props = n_clients == 1 ? Vector{1.0} : detail::sample_dirichlet(n_clients, beta, rng);
        const auto counts = detail::largest_remainder(props, members.size());
        std::size_t pos = 0;
        for (std::size_t c = 0; c < n_clients; ++c) {
            auto& dst = part.assignments[c];
            dst.insert(dst.end(), members.begin() + static_cast<std::ptrdiff_t>(pos),
                       members.begin() + static_cast<std::ptrdiff_t>(pos + counts[c]));
            pos += counts[c];
        }
    }
    for (auto& a : part.assignments) std::sort(a.begin(), a.end());
    return part;
}

/// Per-client class histogram.
inline std::vector<std::vector<std::size_t>> class_histograms(const Partition& part,
                                                              std::span<const std::size_t> labels, std::size_t k) {
    std::vector<std::vector<std::size_t>> hist(part.num_clients(), std::vector<std::size_t>(k, 0));
    for (std::size_t c = 0; c < part.num_clients(); ++c) {
        for (std::size_t idx : part.assignments[c]) ++hist[c][labels[idx]];
    }
    return hist;
}

/// Mean over non-empty clients of the largest single-class share of that client's data.
inline double heterogeneity(const Partition& part, std::span<const std::size_t> labels, std::size_t k) {
    const auto hist = class_histograms(part, labels, k);
    double sum = 0.0;
    std::size_t counted = 0;
    for (const auto& h : hist) {
        const std::size_t total = std::accumulate(h.begin(), h.end(), std::size_t{0});
        if (total == 0) continue;
        sum += static_cast<double>(*std::max_element(h.begin(), h.end())) / static_cast<double>(total);
        ++counted;
    }
    return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

struct TrainTestSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
    bool degenerate = false;  // shard had fewer than 2 samples
};

/// Seeded shuffle, then the first round(ratio * len) indices train and the rest test.
/// Any non-empty shard keeps at least one test sample.
inline TrainTestSplit split_train_test(std::span<const std::size_t> shard, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split_train_test: ratio must be in (0, 1)");
    std::vector<std::size_t> idx(shard.begin(), shard.end());
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t len = idx.size();
    auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(len)));
    if (len >= 1 && n_train >= len) n_train = len - 1;
    TrainTestSplit out;
    out.degenerate = len < 2;
    out.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    return out;
}

// --- FDEM file format ------------------------------------------------------------
//
//   magic "FDEM", version u16, n u32, d u32, k u32,
//   embeddings f32[n*d], labels u32[n], prototypes f32[k*d]; little-endian.

inline constexpr std::uint16_t kEmbeddingFormatVersion = 1;

inline std::vector<std::uint8_t> encode_embeddings(const EmbeddingDataset& ds) {
    std::vector<std::uint8_t> out;
    out.reserve(18 + 4 * (ds.embeddings.size() + ds.labels.size() + ds.prototypes.size()));
    for (char c : {'F', 'D', 'E', 'M'}) out.push_back(static_cast<std::uint8_t>(c));
    detail::put_u16(out, kEmbeddingFormatVersion);
    detail::put_u32(out, detail::to_u32(ds.n(), "n"));
    detail::put_u32(out, detail::to_u32(ds.d(), "d"));
    detail::put_u32(out, detail::to_u32(ds.k(), "k"));
    for (double v : ds.embeddings.data()) detail::put_f32(out, v);
    for (std::size_t y : ds.labels) detail::put_u32(out, detail::to_u32(y, "label"));
    for (double v : ds.prototypes.data()) detail::put_f32(out, v);
    return out;
}

inline EmbeddingDataset decode_embeddings(std::span<const std::uint8_t> bytes) {
    detail::ByteReader in(bytes);
    in.magic("FDEM", "magic");
    const auto version = in.u16("version");
    if (version != kEmbeddingFormatVersion) {
        throw FormatError("unsupported embedding format version " + std::to_string(version));
    }
    const std::size_t n = in.u32("header n");
    const std::size_t d = in.u32("header d");
    const std::size_t k = in.u32("header k");
    if (n == 0 || d == 0 || k == 0) throw FormatError("embedding header has zero n, d or k");

    // sizes are checked before allocating, so a corrupt header cannot ask for huge buffers
    using Wide = unsigned __int128;
    Wide at = in.offset();
    const std::pair<const char*, Wide> sections[] = {{"embeddings", Wide{4} * n * d},
                                                     {"labels", Wide{4} * n},
                                                     {"prototypes", Wide{4} * k * d}};
    for (const auto& [section, len] : sections) {
        if (at + len > bytes.size()) {
            throw FormatError(std::string("truncated input in section '") + section + "' at byte offset " +
                              std::to_string(static_cast<std::size_t>(at)) + ": file has " +
                              std::to_string(bytes.size()) + " bytes");
        }
        at += len;
    }

    EmbeddingDataset ds{Matrix(n, d), std::vector<std::size_t>(n), Matrix(k, d)};
    in.need(4 * n * d, "embeddings");
    for (double& v : ds.embeddings.data()) v = in.f32("embeddings");
    in.need(4 * n, "labels");
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = in.offset();
        ds.labels[i] = in.u32("labels");
        if (ds.labels[i] >= k) {
            throw FormatError("label " + std::to_string(ds.labels[i]) + " >= k=" + std::to_string(k) +
                              " at byte offset " + std::to_string(off));
        }
    }
    in.need(4 * k * d, "prototypes");
    for (double& v : ds.prototypes.data()) v = in.f32("prototypes");
    if (in.remaining() != 0) {
        throw FormatError("trailing bytes after prototypes at byte offset " + std::to_string(in.offset()));
    }
    if (!all_finite(ds.embeddings.data()) || !all_finite(ds.prototypes.data())) {
        throw FormatError("non-finite values in embedding file");
    }
    ds.validate();
    return ds;
}

inline void save_embeddings(const EmbeddingDataset& ds, const std::filesystem::path& path) {
    const auto bytes = encode_embeddings(ds);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

inline EmbeddingDataset load_embeddings(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_embeddings(bytes);
}

} // namespace feddlp
