// SPDX-License-Identifier: Apache-2.0
// Independent reference implementations. Written directly from the formulas, in long
// double where it matters, and sharing no code paths with the library math.
#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "feddlp/adapter.hpp"
#include "feddlp/linalg.hpp"
#include "feddlp/model.hpp"

namespace oracle {

using feddlp::LoraAdapter;
using feddlp::Matrix;
using LVec = std::vector<long double>;
using LMat = std::vector<std::vector<long double>>;

// mpmath, 50 digits
namespace golden {
inline const std::vector<double> kLogitsA = {0.3, -1.2, 2.5, 0.0, -0.7, 1.1, 0.4};
inline const std::vector<double> kLogitsB = {-0.4, 0.9, 1.7, 0.2, 0.0, -1.5, 0.8};
inline const std::vector<double> kSoftmaxA = {0.068084859919244752965, 0.015191785697464492919,
                                              0.61446677987826500786,  0.050438504780738907052,
                                              0.025047020219327691313, 0.15152564236095556045,
                                              0.07524540714400358744};
inline constexpr double kCeA2 = 0.48700041184702239904;
inline constexpr double kCeA5 = 1.887000411847022399;
inline constexpr double kKlAB = 0.44238060195873497345;
inline constexpr double kKlBA = 0.51956030687676186324;
} // namespace golden

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            long double s = 0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += (long double)a(i, k) * b(k, j);
            out(i, j) = (double)s;
        }
    }
    return out;
}

inline LVec softmax(const std::vector<double>& z) {
    long double m = z[0];
    for (double v : z) m = std::max<long double>(m, v);
    LVec e(z.size());
    long double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp((long double)z[i] - m);
    for (auto& v : e) v /= s;
    return e;
}

inline long double cross_entropy(const std::vector<double>& z, std::size_t y) { return -std::log(softmax(z)[y]); }

inline long double kl(const std::vector<double>& pz, const std::vector<double>& qz) {
    const LVec p = softmax(pz), q = softmax(qz);
    long double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * (std::log(p[i]) - std::log(q[i]));
    return s;
}

/// W_eff = B * diag(g) * A as a dense d_out x d_in matrix.
inline LMat dense_delta(const LoraAdapter& ad) {
    LMat w(ad.d_out, LVec(ad.d_in, 0));
    for (std::size_t o = 0; o < ad.d_out; ++o)
        for (std::size_t i = 0; i < ad.d_in; ++i)
            for (std::size_t j = 0; j < ad.rank; ++j)
                w[o][i] += (long double)ad.up(o, j) * (ad.gate ? (*ad.gate)[j] : 1.0) * ad.down(j, i);
    return w;
}

/// e' = w0 x + W_eff x, done from the dense matrices.
inline LVec embedding(const feddlp::FrozenHead& head, const LoraAdapter& ad, const std::vector<double>& x) {
    const LMat w = dense_delta(ad);
    LVec e(head.d_out(), 0);
    for (std::size_t o = 0; o < head.d_out(); ++o)
        for (std::size_t i = 0; i < head.d_in(); ++i) e[o] += ((long double)head.w0()(o, i) + w[o][i]) * x[i];
    return e;
}

/// Logits of the cosine head, one formula at a time.
inline std::vector<double> logits(const feddlp::FrozenHead& head, const LoraAdapter& ad, const std::vector<double>& x) {
    const LVec e = embedding(head, ad, x);
    long double en = 0;
    for (auto v : e) en += v * v;
    en = std::sqrt(en);
    std::vector<double> s(head.num_classes());
    for (std::size_t c = 0; c < head.num_classes(); ++c) {
        long double dotp = 0, pn = 0;
        for (std::size_t o = 0; o < e.size(); ++o) {
            dotp += e[o] * head.prototypes()(c, o);
            pn += (long double)head.prototypes()(c, o) * head.prototypes()(c, o);
        }
        s[c] = (double)(dotp / (en * std::sqrt(pn)) / head.temperature());
    }
    return s;
}

inline std::size_t argmax(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

/// Zero-shot prediction: frozen projection only, no adapter at all.
inline std::size_t zero_shot_predict(const feddlp::FrozenHead& head, const std::vector<double>& x) {
    LVec e(head.d_out(), 0);
    for (std::size_t o = 0; o < head.d_out(); ++o)
        for (std::size_t i = 0; i < head.d_in(); ++i) e[o] += (long double)head.w0()(o, i) * x[i];
    long double en = 0;
    for (auto v : e) en += v * v;
    std::vector<double> s(head.num_classes());
    for (std::size_t c = 0; c < head.num_classes(); ++c) {
        long double dotp = 0, pn = 0;
        for (std::size_t o = 0; o < e.size(); ++o) {
            dotp += e[o] * head.prototypes()(c, o);
            pn += (long double)head.prototypes()(c, o) * head.prototypes()(c, o);
        }
        s[c] = (double)(dotp / std::sqrt(en * pn) / head.temperature());
    }
    return argmax(s);
}

/// Gradient of mean CE over a batch w.r.t. (A, B, g), via dL/dW_eff of the dense form:
///   dB = dW A^T diag(g), dA = diag(g) B^T dW, dg_j = (B^T dW A^T)_jj.
struct CeGrads {
    Matrix d_down, d_up;
    std::vector<double> d_gate;
};

inline CeGrads ce_grads(const feddlp::FrozenHead& head, const LoraAdapter& ad, const Matrix& x,
                        const std::vector<std::size_t>& labels, const std::vector<std::size_t>& idx) {
    LMat dW(ad.d_out, LVec(ad.d_in, 0));
    for (std::size_t n : idx) {
        std::vector<double> xv(x.row(n).begin(), x.row(n).end());
        const LVec e = embedding(head, ad, xv);
        long double en2 = 0;
        for (auto v : e) en2 += v * v;
        const long double en = std::sqrt(en2);
        const std::vector<double> s = logits(head, ad, xv);
        const LVec p = softmax(s);
        LVec de(e.size(), 0);
        for (std::size_t c = 0; c < head.num_classes(); ++c) {
            const long double ds = (p[c] - (c == labels[n] ? 1 : 0)) / idx.size();
            long double pn2 = 0;
            for (std::size_t o = 0; o < e.size(); ++o) pn2 += (long double)head.prototypes()(c, o) * head.prototypes()(c, o);
            const long double cosv = s[c] * head.temperature();
            for (std::size_t o = 0; o < e.size(); ++o) {
                const long double dcos = head.prototypes()(c, o) / (en * std::sqrt(pn2)) - cosv * e[o] / en2;
                de[o] += ds * dcos / head.temperature();
            }
        }
        for (std::size_t o = 0; o < e.size(); ++o)
            for (std::size_t i = 0; i < ad.d_in; ++i) dW[o][i] += de[o] * xv[i];
    }
    auto g = [&](std::size_t j) -> long double { return ad.gate ? (*ad.gate)[j] : 1.0; };
    CeGrads out{Matrix(ad.rank, ad.d_in), Matrix(ad.d_out, ad.rank), std::vector<double>(ad.rank, 0.0)};
    for (std::size_t o = 0; o < ad.d_out; ++o)
        for (std::size_t j = 0; j < ad.rank; ++j) {
            long double s = 0;
            for (std::size_t i = 0; i < ad.d_in; ++i) s += dW[o][i] * ad.down(j, i);
            out.d_up(o, j) = (double)(s * g(j));
        }
    for (std::size_t j = 0; j < ad.rank; ++j)
        for (std::size_t i = 0; i < ad.d_in; ++i) {
            long double s = 0;
            for (std::size_t o = 0; o < ad.d_out; ++o) s += (long double)ad.up(o, j) * dW[o][i];
            out.d_down(j, i) = (double)(s * g(j));
        }
    for (std::size_t j = 0; j < ad.rank; ++j) {
        long double s = 0;
        for (std::size_t o = 0; o < ad.d_out; ++o)
            for (std::size_t i = 0; i < ad.d_in; ++i) s += (long double)ad.up(o, j) * dW[o][i] * ad.down(j, i);
        out.d_gate[j] = (double)s;
    }
    return out;
}

/// Scalar Adam with decoupled weight decay, one parameter at a time.
struct Adam {
    std::vector<long double> m, v;
    long double b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0;
    int t = 0;
    explicit Adam(std::size_t n) : m(n, 0), v(n, 0) {}
    void step(std::vector<double*> params, const std::vector<double>& g, long double lr) {
        ++t;
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * (long double)g[i] * g[i];
            const long double mh = m[i] / (1 - std::pow(b1, (long double)t));
            const long double vh = v[i] / (1 - std::pow(b2, (long double)t));
            *params[i] = (double)(*params[i] * (1 - lr * wd) - lr * mh / (std::sqrt(vh) + eps));
        }
    }
};

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    std::vector<double> v(n);
    for (double& x : v) x = d(rng);
    return v;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
    Matrix m(r, c);
    std::normal_distribution<double> d(0.0, scale);
    for (double& x : m.data()) x = d(rng);
    return m;
}

inline LoraAdapter random_adapter(std::size_t r, std::size_t d_in, std::size_t d_out, bool gated,
                                  std::mt19937_64& rng) {
    LoraAdapter ad{r, d_in, d_out, random_matrix(r, d_in, rng, 0.5), random_matrix(d_out, r, rng, 0.5), std::nullopt};
    if (gated) ad.gate = random_vector(r, rng);
    return ad;
}

} // namespace oracle
