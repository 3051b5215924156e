// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "feddlp/adapter.hpp"
#include "feddlp/error.hpp"
#include "feddlp/linalg.hpp"

namespace feddlp {

/// Frozen projection, class prototypes and temperature. Immutable after construction.
class FrozenHead {
public:
    FrozenHead(Matrix w0, Matrix prototypes, double temperature)
        : w0_(std::move(w0)), prototypes_(std::move(prototypes)), temperature_(temperature) {
        if (!(temperature_ > 0.0) || !std::isfinite(temperature_)) {
            throw ConfigError("FrozenHead: temperature must be > 0");
        }
        if (prototypes_.rows() == 0) throw ConfigError("FrozenHead: no class prototypes");
        if (prototypes_.cols() != w0_.rows()) {
            throw ShapeError("FrozenHead: prototype width " + std::to_string(prototypes_.cols()) +
                             " != projection output " + std::to_string(w0_.rows()));
        }
        proto_norms_.resize(prototypes_.rows());
        for (std::size_t i = 0; i < prototypes_.rows(); ++i) {
            proto_norms_[i] = norm2(prototypes_.row(i));
            if (proto_norms_[i] == 0.0) {
                throw DegenerateInputError("FrozenHead: prototype " + std::to_string(i) + " has zero norm");
            }
        }
    }

    /// Identity projection over the prototype space.
    static FrozenHead with_identity(Matrix prototypes, double temperature) {
        const std::size_t d = prototypes.cols();
        return FrozenHead(Matrix::identity(d), std::move(prototypes), temperature);
    }

    const Matrix& w0() const noexcept { return w0_; }
    const Matrix& prototypes() const noexcept { return prototypes_; }
    double temperature() const noexcept { return temperature_; }
    double prototype_norm(std::size_t i) const noexcept { return proto_norms_[i]; }
    std::size_t num_classes() const noexcept { return prototypes_.rows(); }
    std::size_t d_in() const noexcept { return w0_.cols(); }
    std::size_t d_out() const noexcept { return w0_.rows(); }

private:
    Matrix w0_;
    Matrix prototypes_;
    double temperature_;
    Vector proto_norms_;
};

struct ForwardTrace {
    Vector x;
    Vector hidden;      // down * x, before gating
    Vector embedding;   // w0 * x + delta(x)
    double embedding_norm = 0.0;
    Vector cosines;
    Vector logits;
};

inline void check_compatible(const FrozenHead& head, const LoraAdapter& ad) {
    if (ad.d_in != head.d_in() || ad.d_out != head.d_out()) {
        throw ShapeError("adapter dims (" + std::to_string(ad.d_in) + "->" + std::to_string(ad.d_out) +
                         ") do not match head (" + std::to_string(head.d_in()) + "->" +
                         std::to_string(head.d_out()) + ")");
    }
}

inline ForwardTrace forward(const FrozenHead& head, const LoraAdapter& ad, std::span<const double> x) {
    check_compatible(head, ad);
    if (x.size() != head.d_in()) throw ShapeError("forward: input length != d_in");
    ForwardTrace t;
    t.x.assign(x.begin(), x.end());
    t.hidden = adapter_hidden(ad, x);
    Vector gated = t.hidden;
    for (std::size_t j = 0; j < ad.rank; ++j) gated[j] *= ad.gate_at(j);
    t.embedding = matvec(head.w0(), x);
    const Vector delta = matvec(ad.up, gated);
    for (std::size_t i = 0; i < delta.size(); ++i) t.embedding[i] += delta[i];
    t.embedding_norm = norm2(t.embedding);
    if (t.embedding_norm == 0.0 || !std::isfinite(t.embedding_norm)) {
        throw DegenerateInputError("forward: adapted embedding has zero or non-finite norm");
    }
    const std::size_t k = head.num_classes();
    t.cosines.resize(k);
    t.logits.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
        const double c = dot(t.embedding, head.prototypes().row(i)) / (t.embedding_norm * head.prototype_norm(i));
        t.cosines[i] = c;
        t.logits[i] = c / head.temperature();
    }
    return t;
}

/// Index of the maximal logit; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
    if (v.empty()) throw ShapeError("argmax: empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

inline std::size_t predict(const FrozenHead& head, const LoraAdapter& ad, std::span<const double> x) {
    return argmax(forward(head, ad, x).logits);
}

/// Accumulates scale * dL/dθ into `grads`, given dL/ds for a traced sample.
inline void backward(const FrozenHead& head, const LoraAdapter& ad, const ForwardTrace& t,
                     std::span<const double> dlogits, double scale, AdapterGrads& grads) {
    const std::size_t k = head.num_classes();
    const double inv_norm = 1.0 / t.embedding_norm;
    // d cos(e, p)/de = p / (|e||p|) - cos(e, p) * e / |e|^2
    Vector d_emb(t.embedding.size(), 0.0);
    double radial = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double dc = dlogits[i] / head.temperature();
        if (dc == 0.0) continue;
        const double w = dc * inv_norm / head.prototype_norm(i);
        auto p = head.prototypes().row(i);
        for (std::size_t j = 0; j < d_emb.size(); ++j) d_emb[j] += w * p[j];
        radial += dc * t.cosines[i];
    }
    const double rw = radial * inv_norm * inv_norm;
    for (std::size_t j = 0; j < d_emb.size(); ++j) d_emb[j] -= rw * t.embedding[j];

    Vector gated = t.hidden;
    for (std::size_t r = 0; r < ad.rank; ++r) gated[r] *= ad.gate_at(r);
    add_outer(grads.d_up, scale, d_emb, gated);

    Vector d_gated = matvec_transposed(ad.up, d_emb);
    if (grads.d_gate) {
        for (std::size_t r = 0; r < ad.rank; ++r) (*grads.d_gate)[r] += scale * d_gated[r] * t.hidden[r];
    }
    for (std::size_t r = 0; r < ad.rank; ++r) d_gated[r] *= ad.gate_at(r);
    add_outer(grads.d_down, scale, d_gated, t.x);
}

/// Which distribution is the first argument of the distillation KL.
enum class KdDirection {
    student_first,  // KL(student || teacher)
    teacher_first,  // KL(teacher || student)
};

struct LossAndGrads {
    double loss = 0.0;
    AdapterGrads grads;
};

namespace detail {

/// Per-sample loss CE(s_student, y) + weight * KD, with dL/ds_student written to `dlogits`.
/// `teacher_logits` may be empty when weight == 0.
inline double distill_sample(std::span<const double> student_logits, std::span<const double> teacher_logits,
                             std::size_t label, double weight, KdDirection dir, Vector& dlogits) {
    const std::size_t k = student_logits.size();
    if (label >= k) throw IndexError("label " + std::to_string(label) + " out of range for " + std::to_string(k) + " classes");
    const Vector lp = log_softmax(student_logits);
    dlogits.assign(k, 0.0);
    double loss = -lp[label];
    for (std::size_t i = 0; i < k; ++i) dlogits[i] = std::exp(lp[i]);
    dlogits[label] -= 1.0;
    if (weight == 0.0) return loss;

    const Vector lq = log_softmax(teacher_logits);
    if (dir == KdDirection::student_first) {
        double kl = 0.0;
        for (std::size_t i = 0; i < k; ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
        for (std::size_t i = 0; i < k; ++i) dlogits[i] += weight * std::exp(lp[i]) * (lp[i] - lq[i] - kl);
        loss += weight * kl;
    } else {
        double kl = 0.0;
        for (std::size_t i = 0; i < k; ++i) kl += std::exp(lq[i]) * (lq[i] - lp[i]);
        for (std::size_t i = 0; i < k; ++i) dlogits[i] += weight * (std::exp(lp[i]) - std::exp(lq[i]));
        loss += weight * kl;
    }
    return loss;
}

} // namespace detail

/// Mean over `indices` of CE(student) + weight * KL, with gradients for the student only.
/// `teacher` is ignored (and may be null) when weight == 0.
inline LossAndGrads distill_loss(const FrozenHead& head, const LoraAdapter& student, const LoraAdapter* teacher,
                                 const Matrix& features, std::span<const std::size_t> labels,
                                 std::span<const std::size_t> indices, double weight,
                                 KdDirection dir = KdDirection::student_first) {
    if (!(weight >= 0.0)) throw ConfigError("distillation weight must be >= 0");
    if (weight > 0.0 && teacher == nullptr) throw ContractError("distill_loss: teacher required when weight > 0");
    if (indices.empty()) throw ContractError("distill_loss: empty batch");
    LossAndGrads out{0.0, AdapterGrads::zeros_like(student)};
    const double scale = 1.0 / static_cast<double>(indices.size());
    Vector dlogits;
    for (std::size_t idx : indices) {
        auto x = features.row(idx);
        const ForwardTrace ts = forward(head, student, x);
        Vector teacher_logits;
        if (weight > 0.0) teacher_logits = forward(head, *teacher, x).logits;
        out.loss += scale * detail::distill_sample(ts.logits, teacher_logits, labels[idx], weight, dir, dlogits);
        backward(head, student, ts, dlogits, scale, out.grads);
    }
    return out;
}

/// CE(s_local, y) + alpha * KL(local || global); the global adapter is frozen.
inline LossAndGrads local_loss(const FrozenHead& head, const LoraAdapter& local, const LoraAdapter& global,
                               const Matrix& features, std::span<const std::size_t> labels,
                               std::span<const std::size_t> indices, double alpha,
                               KdDirection dir = KdDirection::student_first) {
    if (!(alpha >= 0.0)) throw ConfigError("local_loss: alpha must be >= 0");
    return distill_loss(head, local, &global, features, labels, indices, alpha, dir);
}

/// CE(s_global, y) + KL(global || local); the local adapter is frozen.
inline LossAndGrads global_loss(const FrozenHead& head, const LoraAdapter& global, const LoraAdapter& local,
                                const Matrix& features, std::span<const std::size_t> labels,
                                std::span<const std::size_t> indices,
                                KdDirection dir = KdDirection::student_first) {
    return distill_loss(head, global, &local, features, labels, indices, 1.0, dir);
}

/// Single-sample conveniences.
inline LossAndGrads local_loss(const FrozenHead& head, const LoraAdapter& local, const LoraAdapter& global,
                               std::span<const double> x, std::size_t y, double alpha,
                               KdDirection dir = KdDirection::student_first) {
    Matrix f(1, x.size());
    std::copy(x.begin(), x.end(), f.data().begin());
    const std::size_t labels[] = {y};
    const std::size_t idx[] = {0};
    return local_loss(head, local, global, f, labels, idx, alpha, dir);
}

inline LossAndGrads global_loss(const FrozenHead& head, const LoraAdapter& global, const LoraAdapter& local,
                                std::span<const double> x, std::size_t y,
                                KdDirection dir = KdDirection::student_first) {
    Matrix f(1, x.size());
    std::copy(x.begin(), x.end(), f.data().begin());
    const std::size_t labels[] = {y};
    const std::size_t idx[] = {0};
    return global_loss(head, global, local, f, labels, idx, dir);
}

} // namespace feddlp
