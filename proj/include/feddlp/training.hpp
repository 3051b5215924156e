// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "feddlp/adapter.hpp"
#include "feddlp/data.hpp"
#include "feddlp/error.hpp"
#include "feddlp/linalg.hpp"
#include "feddlp/model.hpp"
#include "feddlp/rng.hpp"

namespace feddlp {

// --- AdamW ------------------------------------------------------------------------

struct OptimState {
    Vector m;
    Vector v;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    OptimState() = default;
    explicit OptimState(std::size_t n, double wd = 0.0) : m(n, 0.0), v(n, 0.0), weight_decay(wd) {}

    void reset() {
        std::fill(m.begin(), m.end(), 0.0);
        std::fill(v.begin(), v.end(), 0.0);
        step = 0;
    }
};

/// Bias-corrected Adam with decoupled weight decay, in place.
inline void adamw_step(OptimState& st, std::span<double> params, std::span<const double> grads, double lr) {
    if (params.size() != grads.size() || params.size() != st.m.size() || st.v.size() != st.m.size()) {
        throw ContractError("adamw_step: parameter/gradient/state sizes differ");
    }
    ++st.step;
    const double t = static_cast<double>(st.step);
    const double bc1 = 1.0 - std::pow(st.beta1, t);
    const double bc2 = 1.0 - std::pow(st.beta2, t);
    const double decay = 1.0 - lr * st.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
        const double m_hat = st.m[i] / bc1;
        const double v_hat = st.v[i] / bc2;
        params[i] = params[i] * decay - lr * m_hat / (std::sqrt(v_hat) + st.eps);
    }
}

/// AdamW over the adapter's down and up matrices. The gate is not touched.
inline OptimState make_adapter_optim(const LoraAdapter& ad, double weight_decay) {
    return OptimState(ad.down.size() + ad.up.size(), weight_decay);
}

inline void adamw_step(OptimState& st, LoraAdapter& ad, const AdapterGrads& g, double lr) {
    if (!g.d_down.same_shape(ad.down) || !g.d_up.same_shape(ad.up)) {
        throw ContractError("adamw_step: gradient shapes do not match adapter");
    }
    const std::size_t nd = ad.down.size();
    const std::size_t nu = ad.up.size();
    if (st.m.size() != nd + nu) throw ContractError("adamw_step: optimizer state does not match adapter");
    // One step counter for both matrices: advance on the first segment only.
    Vector flat_p(nd + nu);
    Vector flat_g(nd + nu);
    std::copy(ad.down.data().begin(), ad.down.data().end(), flat_p.begin());
    std::copy(ad.up.data().begin(), ad.up.data().end(), flat_p.begin() + static_cast<std::ptrdiff_t>(nd));
    std::copy(g.d_down.data().begin(), g.d_down.data().end(), flat_g.begin());
    std::copy(g.d_up.data().begin(), g.d_up.data().end(), flat_g.begin() + static_cast<std::ptrdiff_t>(nd));
    adamw_step(st, flat_p, flat_g, lr);
    std::copy(flat_p.begin(), flat_p.begin() + static_cast<std::ptrdiff_t>(nd), ad.down.data().begin());
    std::copy(flat_p.begin() + static_cast<std::ptrdiff_t>(nd), flat_p.end(), ad.up.data().begin());
}

// --- configuration -------------------------------------------------------------------

enum class Mode { feddlp, local_only, local_only_pruned, homogeneous_lora, combined };

/// Granularity of the local/global alternation.
enum class PhaseSchedule { per_batch, per_epoch };

/// Which adapter a client evaluates with. `automatic` picks the mode's default.
enum class InferenceAdapter { automatic, local, global, sum };

inline std::string_view to_string(Mode m) {
    switch (m) {
        case Mode::feddlp: return "feddlp";
        case Mode::local_only: return "local_only";
        case Mode::local_only_pruned: return "local_only_pruned";
        case Mode::homogeneous_lora: return "homogeneous_lora";
        case Mode::combined: return "combined";
    }
    return "?";
}

inline Mode parse_mode(std::string_view s) {
    for (Mode m : {Mode::feddlp, Mode::local_only, Mode::local_only_pruned, Mode::homogeneous_lora, Mode::combined}) {
        if (to_string(m) == s) return m;
    }
    throw ConfigError("unknown mode '" + std::string(s) + "'");
}

/// True for modes that exchange adapters with a server.
inline bool communicates(Mode m) noexcept { return m != Mode::local_only && m != Mode::local_only_pruned; }

struct TrainConfig {
    Mode mode = Mode::feddlp;
    std::size_t rounds = 100;
    std::size_t local_epochs = 1;
    std::size_t batch_size = 32;
    double lr_local = 1e-3;
    double lr_global = 1e-3;
    std::optional<double> gate_lr;  // mu; defaults to lr_local
    double alpha = 1.0;
    double xi = 5e-5;
    std::size_t n_clients = 10;
    double beta = 0.1;
    std::size_t rank_local = 4;
    std::size_t rank_global = 2;
    std::uint64_t seed = 0;
    double weight_decay = 0.0;
    double train_ratio = 0.75;
    ThresholdKind threshold = ThresholdKind::soft;
    KdDirection kd_direction = KdDirection::student_first;
    PhaseSchedule schedule = PhaseSchedule::per_batch;
    InferenceAdapter inference = InferenceAdapter::automatic;
    std::size_t workers = 1;
    std::size_t layer_multiplier = 1;

    double mu() const noexcept { return gate_lr.value_or(lr_local); }

    void validate() const {
        auto positive = [](double v, const char* name) {
            if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be > 0");
        };
        positive(lr_local, "lr_local");
        positive(lr_global, "lr_global");
        positive(mu(), "gate_lr");
        positive(beta, "beta");
        if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
        if (!(xi >= 0.0)) throw ConfigError("xi must be >= 0");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
        if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw ConfigError("train_ratio must be in (0, 1)");
        if (rounds == 0) throw ConfigError("rounds must be >= 1");
        if (local_epochs == 0) throw ConfigError("local_epochs must be >= 1");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (n_clients == 0) throw ConfigError("n_clients must be >= 1");
        if (rank_local == 0 || rank_global == 0) throw ConfigError("ranks must be >= 1");
        if (workers == 0) throw ConfigError("workers must be >= 1");
        if (layer_multiplier == 0) throw ConfigError("layer_multiplier must be >= 1");
    }
};

// --- client --------------------------------------------------------------------------

/// One client's private state. In feddlp mode `local` is the gated personal adapter and
/// `global` the working copy of the shared adapter. Single-adapter modes keep their
/// adapter in whichever slot matches its role: `local` for local-only training, `global`
/// for adapters that are exchanged with the server.
struct ClientState {
    std::size_t id = 0;
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
    std::optional<LoraAdapter> local;
    std::optional<LoraAdapter> global;
    OptimState local_optim;
    OptimState global_optim;
};

/// Shape of the adapter exchanged with the server for a mode (none for local-only modes).
inline std::optional<LoraAdapter> initial_shared_adapter(const TrainConfig& cfg, std::size_t d_in, std::size_t d_out) {
    const std::uint64_t seed = derive_seed(cfg.seed, {stream::kGlobalInit});
    switch (cfg.mode) {
        case Mode::feddlp: return init_adapter(cfg.rank_global, d_in, d_out, false, seed);
        case Mode::homogeneous_lora: return init_adapter(cfg.rank_local, d_in, d_out, false, seed);
        case Mode::combined: return init_adapter(cfg.rank_local + cfg.rank_global, d_in, d_out, false, seed);
        case Mode::local_only:
        case Mode::local_only_pruned: return std::nullopt;
    }
    return std::nullopt;
}

inline ClientState make_client(std::size_t id, std::vector<std::size_t> train, std::vector<std::size_t> test,
                               const TrainConfig& cfg, std::size_t d_in, std::size_t d_out) {
    ClientState c;
    c.id = id;
    c.train = std::move(train);
    c.test = std::move(test);
    const std::uint64_t local_seed = derive_seed(cfg.seed, {stream::kLocalInit, id});
    switch (cfg.mode) {
        case Mode::feddlp:
        case Mode::local_only_pruned:
            c.local = init_adapter(cfg.rank_local, d_in, d_out, true, local_seed);
            break;
        case Mode::local_only:
            c.local = init_adapter(cfg.rank_local, d_in, d_out, false, local_seed);
            break;
        case Mode::homogeneous_lora:
        case Mode::combined:
            break;
    }
    if (c.local) c.local_optim = make_adapter_optim(*c.local, cfg.weight_decay);
    c.global = initial_shared_adapter(cfg, d_in, d_out);
    if (c.global) c.global_optim = make_adapter_optim(*c.global, cfg.weight_decay);
    return c;
}

enum class Phase { local_update, global_update };

/// Called after each phase of each batch; used to observe the freeze schedule.
using PhaseObserver = std::function<void(Phase, const ClientState&)>;

struct ClientUpdate {
    std::optional<LoraAdapter> upload;
    std::size_t sample_count = 0;
    bool skipped = false;  // empty train shard; contributes weight 0
};

inline std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> train, std::size_t batch_size,
                                                          Rng& rng) {
    std::vector<std::size_t> order(train.begin(), train.end());
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        const std::size_t end = std::min(order.size(), i + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

namespace detail {

inline void local_phase(ClientState& c, const FrozenHead& head, const EmbeddingDataset& data,
                        std::span<const std::size_t> batch, const TrainConfig& cfg) {
    LoraAdapter& local = *c.local;
    // Local-only baselines train with CE alone; there is no teacher to distill from.
    const bool distill = cfg.mode == Mode::feddlp && cfg.alpha > 0.0;
    const LossAndGrads lg = distill_loss(head, local, distill ? &*c.global : nullptr, data.embeddings, data.labels,
                                         batch, distill ? cfg.alpha : 0.0, cfg.kd_direction);
    adamw_step(c.local_optim, local, lg.grads, cfg.lr_local);
    if (local.has_gate()) proximal_gate_step(local, *lg.grads.d_gate, cfg.mu(), cfg.xi, cfg.threshold);
}

inline void global_phase(ClientState& c, const FrozenHead& head, const EmbeddingDataset& data,
                         std::span<const std::size_t> batch, const TrainConfig& cfg) {
    LoraAdapter& global = *c.global;
    const bool distill = cfg.mode == Mode::feddlp;
    const LossAndGrads lg = distill_loss(head, global, distill ? &*c.local : nullptr, data.embeddings, data.labels,
                                         batch, distill ? 1.0 : 0.0, cfg.kd_direction);
    adamw_step(c.global_optim, global, lg.grads, cfg.lr_global);
}

} // namespace detail

/// One round of local training. The incoming shared adapter replaces the client's working
/// copy (and its optimizer state is reset); the local adapter and its optimizer persist.
/// Returns the trained shared adapter for upload, if the mode communicates.
inline ClientUpdate train_client_round(ClientState& c, const FrozenHead& head, const EmbeddingDataset& data,
                                       const LoraAdapter* globals_in, const TrainConfig& cfg, std::size_t round,
                                       const PhaseObserver& observer = {}) {
    const bool shared = communicates(cfg.mode);
    if (shared) {
        if (globals_in == nullptr) throw ContractError("train_client_round: mode requires a broadcast adapter");
        if (!c.global || !globals_in->structurally_equal(*c.global)) {
            throw ContractError("train_client_round: broadcast adapter does not match client slot");
        }
        c.global = *globals_in;
        c.global_optim.reset();
    }
    ClientUpdate out;
    if (c.train.empty()) {
        out.skipped = true;
        return out;
    }

    const bool has_local_phase = c.local.has_value();
    const bool has_global_phase = shared;
    Rng rng = make_rng(cfg.seed, {stream::kClientRound, c.id, round});
    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        const auto batches = make_batches(c.train, cfg.batch_size, rng);
        if (cfg.schedule == PhaseSchedule::per_batch) {
            for (const auto& batch : batches) {
                if (has_local_phase) {
                    detail::local_phase(c, head, data, batch, cfg);
                    if (observer) observer(Phase::local_update, c);
                }
                if (has_global_phase) {
                    detail::global_phase(c, head, data, batch, cfg);
                    if (observer) observer(Phase::global_update, c);
                }
            }
        } else {
            if (has_local_phase) {
                for (const auto& batch : batches) {
                    detail::local_phase(c, head, data, batch, cfg);
                    if (observer) observer(Phase::local_update, c);
                }
            }
            if (has_global_phase) {
                for (const auto& batch : batches) {
                    detail::global_phase(c, head, data, batch, cfg);
                    if (observer) observer(Phase::global_update, c);
                }
            }
        }
    }
    out.sample_count = c.train.size();
    if (shared) out.upload = *c.global;
    return out;
}

/// The adapter a client predicts with under the configured inference choice. When the
/// server's aggregated adapter is given it stands in for the client's shared slot, since
/// that is what the client holds once the round closes.
inline LoraAdapter inference_adapter(const ClientState& c, const TrainConfig& cfg,
                                     const LoraAdapter* server_global = nullptr) {
    InferenceAdapter which = cfg.inference;
    if (which == InferenceAdapter::automatic) which = c.local ? InferenceAdapter::local : InferenceAdapter::global;
    const LoraAdapter* shared = server_global ? server_global : (c.global ? &*c.global : nullptr);
    switch (which) {
        case InferenceAdapter::local:
            if (!c.local) throw ConfigError("inference=local but mode has no local adapter");
            return *c.local;
        case InferenceAdapter::global:
            if (!shared) throw ConfigError("inference=global but mode has no shared adapter");
            return *shared;
        case InferenceAdapter::sum:
            if (!c.local || !shared) throw ConfigError("inference=sum needs both adapters");
            return merge_adapters(*c.local, *shared);
        case InferenceAdapter::automatic: break;
    }
    throw ContractError("inference_adapter: unreachable");
}

/// Fraction of the client's test shard classified correctly.
inline double evaluate_client(const ClientState& c, const FrozenHead& head, const EmbeddingDataset& data,
                              const TrainConfig& cfg, const LoraAdapter* server_global = nullptr) {
    if (c.test.empty()) throw EvaluationError("client " + std::to_string(c.id) + " has an empty test shard");
    const LoraAdapter ad = inference_adapter(c, cfg, server_global);
    std::size_t correct = 0;
    for (std::size_t idx : c.test) correct += predict(head, ad, data.embeddings.row(idx)) == data.labels[idx];
    return static_cast<double>(correct) / static_cast<double>(c.test.size());
}

} // namespace feddlp
