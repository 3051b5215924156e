// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "feddlp/adapter.hpp"
#include "feddlp/data.hpp"
#include "feddlp/error.hpp"
#include "feddlp/metrics.hpp"
#include "feddlp/model.hpp"
#include "feddlp/training.hpp"

namespace feddlp {

/// Error raised inside a client's work, tagged with the client id.
class ClientError : public Error {
public:
    ClientError(std::size_t client_id, const std::string& what)
        : Error("client " + std::to_string(client_id) + ": " + what), client_id_(client_id) {}

    std::size_t client_id() const noexcept { return client_id_; }

private:
    std::size_t client_id_;
};

// --- aggregation ----------------------------------------------------------------------

struct AdapterUpdate {
    std::size_t client_id = 0;
    LoraAdapter adapter;
    std::size_t sample_count = 0;
};

struct AggregationResult {
    LoraAdapter adapter;
    std::vector<std::pair<std::size_t, double>> weights;  // (client id, n_i / sum n)
};

/// Sample-count weighted mean of structurally identical gateless adapters. Updates with
/// zero samples are ignored. Summation runs in ascending client id.
inline AggregationResult aggregate_weighted(std::span<const AdapterUpdate> updates) {
    std::vector<const AdapterUpdate*> live;
    for (const auto& u : updates) {
        if (u.sample_count > 0) live.push_back(&u);
    }
    if (live.empty()) throw AggregationError("aggregate: no update with a positive sample count");
    std::sort(live.begin(), live.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });

    const LoraAdapter& ref = live.front()->adapter;
    for (const auto* u : live) {
        if (u->adapter.has_gate()) {
            throw AggregationError("aggregate: client " + std::to_string(u->client_id) + " sent a gated adapter");
        }
        if (!u->adapter.structurally_equal(ref)) {
            throw AggregationError("aggregate: client " + std::to_string(u->client_id) +
                                   " sent an adapter whose shape differs from client " +
                                   std::to_string(live.front()->client_id));
        }
        u->adapter.validate();
    }
    double total = 0.0;
    for (const auto* u : live) total += static_cast<double>(u->sample_count);

    AggregationResult out{LoraAdapter{ref.rank, ref.d_in, ref.d_out, Matrix(ref.rank, ref.d_in),
                                      Matrix(ref.d_out, ref.rank), std::nullopt},
                          {}};
    if (live.size() == 1) {
        out.adapter = live.front()->adapter;
        out.weights.emplace_back(live.front()->client_id, 1.0);
        return out;
    }
    for (const auto* u : live) {
        const double w = static_cast<double>(u->sample_count) / total;
        out.weights.emplace_back(u->client_id, w);
        auto& dd = out.adapter.down.data();
        const auto& sd = u->adapter.down.data();
        for (std::size_t i = 0; i < dd.size(); ++i) dd[i] += w * sd[i];
        auto& du = out.adapter.up.data();
        const auto& su = u->adapter.up.data();
        for (std::size_t i = 0; i < du.size(); ++i) du[i] += w * su[i];
    }
    return out;
}

inline LoraAdapter aggregate(std::span<const AdapterUpdate> updates) { return aggregate_weighted(updates).adapter; }

// --- wire -----------------------------------------------------------------------------

enum class Direction { downlink, uplink };

struct WireRecord {
    std::size_t round = 0;
    std::size_t client_id = 0;
    Direction direction = Direction::downlink;
    std::size_t rank = 0;
    bool gated = false;
    std::uint64_t bytes = 0;
};

/// Simulated channel. Every transfer goes through the adapter wire format, so the
/// receiver sees f32-rounded values, and the counted bytes are the encoded size times
/// the layer multiplier.
class Wire {
public:
    explicit Wire(std::size_t layer_multiplier = 1) : layer_multiplier_(layer_multiplier) {}

    LoraAdapter transmit(const LoraAdapter& ad, Direction dir, std::size_t round, std::size_t client_id) {
        const auto bytes = serialize(ad);
        const std::uint64_t counted = static_cast<std::uint64_t>(bytes.size()) * layer_multiplier_;
        {
            std::lock_guard lock(mu_);
            (dir == Direction::uplink ? uplink_ : downlink_) += counted;
            log_.push_back({round, client_id, dir, ad.rank, ad.has_gate(), counted});
        }
        return deserialize(bytes);
    }

    std::uint64_t uplink_bytes() const noexcept { return uplink_; }
    std::uint64_t downlink_bytes() const noexcept { return downlink_; }
    std::size_t layer_multiplier() const noexcept { return layer_multiplier_; }
    const std::vector<WireRecord>& log() const noexcept { return log_; }

private:
    std::size_t layer_multiplier_;
    std::uint64_t uplink_ = 0;
    std::uint64_t downlink_ = 0;
    std::vector<WireRecord> log_;
    std::mutex mu_;
};

// --- server ---------------------------------------------------------------------------

struct ServerState {
    std::optional<LoraAdapter> global;  // canonical shared adapter; empty in local-only modes
    std::vector<std::size_t> sample_counts;
    std::size_t round = 0;  // rounds completed
    std::vector<std::pair<std::size_t, double>> last_weights;
    std::vector<RoundMetrics> log;
};

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Exceptions are rethrown as
/// ClientError for the lowest failing index.
inline void parallel_for_clients(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    std::vector<std::exception_ptr> errors(n);
    auto run_one = [&](std::size_t i) {
        try {
            fn(i);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    const std::size_t nthreads = std::min(workers, n);
    if (nthreads <= 1) {
        for (std::size_t i = 0; i < n; ++i) run_one(i);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < nthreads; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < n; i += nthreads) run_one(i);
            });
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!errors[i]) continue;
        try {
            std::rethrow_exception(errors[i]);
        } catch (const ClientError&) {
            throw;
        } catch (const std::exception& e) {
            throw ClientError(i, e.what());
        }
    }
}

/// Broadcast, local training, upload, aggregation and evaluation for one round.
inline RoundMetrics run_round(ServerState& server, std::vector<ClientState>& clients, const FrozenHead& head,
                              const EmbeddingDataset& data, const TrainConfig& cfg, Wire& wire) {
    if (server.round >= cfg.rounds) throw ContractError("run_round: all configured rounds already ran");
    const std::size_t round = server.round;
    const bool shared = communicates(cfg.mode);
    const std::size_t n = clients.size();

    std::vector<std::optional<LoraAdapter>> received(n);
    if (shared) {
        if (!server.global) throw ContractError("run_round: communicating mode without a server adapter");
        for (std::size_t i = 0; i < n; ++i) {
            received[i] = wire.transmit(*server.global, Direction::downlink, round, clients[i].id);
        }
    }

    std::vector<ClientUpdate> results(n);
    parallel_for_clients(n, cfg.workers, [&](std::size_t i) {
        results[i] = train_client_round(clients[i], head, data, received[i] ? &*received[i] : nullptr, cfg, round);
    });

    if (shared) {
        std::vector<AdapterUpdate> updates;
        for (std::size_t i = 0; i < n; ++i) {
            if (!results[i].upload || results[i].skipped) continue;
            updates.push_back({clients[i].id, wire.transmit(*results[i].upload, Direction::uplink, round, clients[i].id),
                               results[i].sample_count});
        }
        if (!updates.empty()) {
            auto agg = aggregate_weighted(updates);
            server.global = std::move(agg.adapter);
            server.last_weights = std::move(agg.weights);
        }
    }

    RoundMetrics m;
    m.round = round + 1;
    m.client_acc.assign(n, std::numeric_limits<double>::quiet_NaN());
    m.effective_params.assign(n, 0);
    parallel_for_clients(n, cfg.workers, [&](std::size_t i) {
        const LoraAdapter* server_global = server.global ? &*server.global : nullptr;
        m.effective_params[i] = param_count(inference_adapter(clients[i], cfg, server_global), true);
        if (!clients[i].test.empty()) m.client_acc[i] = evaluate_client(clients[i], head, data, cfg, server_global);
    });
    m.summary = summarize_observed(m.client_acc);
    m.cum_uplink_bytes = wire.uplink_bytes();
    m.cum_downlink_bytes = wire.downlink_bytes();
    server.log.push_back(m);
    server.round = round + 1;
    return m;
}

/// Cumulative bytes at the first round whose mean accuracy reaches `target`.
inline std::optional<std::uint64_t> comm_to_target(std::span<const RoundMetrics> log, double target) {
    if (log.empty()) throw ContractError("comm_to_target: empty log");
    for (const auto& m : log) {
        if (m.summary.mean >= target) return m.cum_bytes();
    }
    return std::nullopt;
}

// --- experiment -----------------------------------------------------------------------

/// A full simulated federation over one dataset: partitioning, client setup, and the
/// round loop.
class Experiment {
public:
    Experiment(EmbeddingDataset data, TrainConfig cfg, double temperature)
        : data_(std::move(data)),
          cfg_(std::move(cfg)),
          head_(FrozenHead::with_identity(data_.prototypes, temperature)),
          wire_(cfg_.layer_multiplier) {
        cfg_.validate();
        data_.validate();
        partition_ = dirichlet_partition(data_.labels, cfg_.n_clients, cfg_.beta, cfg_.seed);
        for (std::size_t c = 0; c < cfg_.n_clients; ++c) {
            auto split = split_train_test(partition_.assignments[c], cfg_.train_ratio,
                                          derive_seed(cfg_.seed, {stream::kSplit, c}));
            if (split.degenerate) degenerate_clients_.push_back(c);
            clients_.push_back(make_client(c, std::move(split.train), std::move(split.test), cfg_, data_.d(), data_.d()));
            server_.sample_counts.push_back(clients_.back().train.size());
        }
        server_.global = initial_shared_adapter(cfg_, data_.d(), data_.d());
    }

    const RoundMetrics& step() {
        run_round(server_, clients_, head_, data_, cfg_, wire_);
        return server_.log.back();
    }

    const std::vector<RoundMetrics>& run(const std::function<void(const RoundMetrics&)>& on_round = {}) {
        while (server_.round < cfg_.rounds) {
            const auto& m = step();
            if (on_round) on_round(m);
        }
        return server_.log;
    }

    const EmbeddingDataset& data() const noexcept { return data_; }
    const TrainConfig& config() const noexcept { return cfg_; }
    const FrozenHead& head() const noexcept { return head_; }
    const Partition& partition() const noexcept { return partition_; }
    const std::vector<ClientState>& clients() const noexcept { return clients_; }
    const ServerState& server() const noexcept { return server_; }
    const Wire& wire() const noexcept { return wire_; }
    const std::vector<std::size_t>& degenerate_clients() const noexcept { return degenerate_clients_; }

private:
    EmbeddingDataset data_;
    TrainConfig cfg_;
    FrozenHead head_;
    Partition partition_;
    std::vector<ClientState> clients_;
    ServerState server_;
    Wire wire_;
    std::vector<std::size_t> degenerate_clients_;
};

} // namespace feddlp
