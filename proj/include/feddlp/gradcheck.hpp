// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "feddlp/adapter.hpp"
#include "feddlp/linalg.hpp"
#include "feddlp/model.hpp"
#include "feddlp/rng.hpp"

namespace feddlp {

struct GradcheckOptions {
    std::size_t trials = 100;
    std::uint64_t seed = 0;
    double h = 1e-5;
    double floor = 1e-6;  // denominator floor for the relative error
    bool corrupt = false; // perturb one analytic component, to exercise the failure path
};

struct GradcheckReport {
    std::size_t trials = 0;
    std::size_t components = 0;
    double max_rel_err = 0.0;
    std::string worst;  // description of the worst component
};

inline double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

/// Every trainable scalar of an adapter, in down, up, gate order.
inline std::vector<double*> adapter_params(LoraAdapter& ad) {
    std::vector<double*> out;
    for (double& v : ad.down.data()) out.push_back(&v);
    for (double& v : ad.up.data()) out.push_back(&v);
    if (ad.gate) {
        for (double& v : *ad.gate) out.push_back(&v);
    }
    return out;
}

inline std::vector<double> grad_values(const AdapterGrads& g) {
    std::vector<double> out(g.d_down.data().begin(), g.d_down.data().end());
    out.insert(out.end(), g.d_up.data().begin(), g.d_up.data().end());
    if (g.d_gate) out.insert(out.end(), g.d_gate->begin(), g.d_gate->end());
    return out;
}

inline Matrix gaussian_matrix(std::size_t r, std::size_t c, double scale, Rng& rng) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (double& v : m.data()) v = n(rng);
    return m;
}

} // namespace detail

/// Compares the analytic local and global loss gradients with central differences on
/// random small instances (d <= 8, K <= 5, batches of 1 to 3 samples).
inline GradcheckReport gradcheck(const GradcheckOptions& opt) {
    GradcheckReport rep;
    for (std::size_t t = 0; t < opt.trials; ++t) {
        Rng rng = make_rng(opt.seed, {0x6772616463686bULL, t});
        std::uniform_int_distribution<std::size_t> dim(2, 8), cls(2, 5), rank(1, 4), bsz(1, 3);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const std::size_t d_in = dim(rng), d_out = dim(rng), k = cls(rng);
        const double tau = 0.05 + 0.95 * unif(rng);
        const double alpha = t % 4 == 0 ? 0.0 : 2.0 * unif(rng);
        const KdDirection dir = t % 5 == 4 ? KdDirection::teacher_first : KdDirection::student_first;

        const FrozenHead head(detail::gaussian_matrix(d_out, d_in, 1.0, rng),
                              detail::gaussian_matrix(k, d_out, 1.0, rng), tau);
        auto random_adapter = [&](std::size_t r, bool gated) {
            LoraAdapter ad{r, d_in, d_out, detail::gaussian_matrix(r, d_in, 0.5, rng),
                           detail::gaussian_matrix(d_out, r, 0.5, rng), std::nullopt};
            if (gated) {
                Vector g(r);
                for (double& v : g) v = -1.5 + 3.0 * unif(rng);
                ad.gate = std::move(g);
            }
            return ad;
        };
        LoraAdapter local = random_adapter(rank(rng), true);
        LoraAdapter global = random_adapter(std::min<std::size_t>(rank(rng), 3), false);

        const std::size_t n = bsz(rng);
        const Matrix x = detail::gaussian_matrix(n, d_in, 1.0, rng);
        std::vector<std::size_t> labels(n), idx(n);
        std::uniform_int_distribution<std::size_t> lab(0, k - 1);
        for (std::size_t i = 0; i < n; ++i) {
            labels[i] = lab(rng);
            idx[i] = i;
        }

        auto check = [&](const char* name, LoraAdapter& student, const std::function<LossAndGrads()>& eval) {
            std::vector<double> analytic = detail::grad_values(eval().grads);
            if (opt.corrupt && t == 0) analytic[0] += 1e-2 + 0.5 * std::abs(analytic[0]);
            auto params = detail::adapter_params(student);
            for (std::size_t p = 0; p < params.size(); ++p) {
                const double saved = *params[p];
                *params[p] = saved + opt.h;
                const double up = eval().loss;
                *params[p] = saved - opt.h;
                const double down = eval().loss;
                *params[p] = saved;
                const double numeric = (up - down) / (2.0 * opt.h);
                const double err = relative_error(analytic[p], numeric, opt.floor);
                ++rep.components;
                if (err > rep.max_rel_err || std::isnan(err)) {
                    rep.max_rel_err = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
                    rep.worst = std::string(name) + " trial " + std::to_string(t) + " param " + std::to_string(p);
                }
            }
        };
        check("local", local, [&] { return local_loss(head, local, global, x, labels, idx, alpha, dir); });
        check("global", global, [&] { return global_loss(head, global, local, x, labels, idx, dir); });
        ++rep.trials;
    }
    return rep;
}

} // namespace feddlp
