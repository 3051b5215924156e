// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "feddlp/data.hpp"
#include "feddlp/error.hpp"
#include "feddlp/training.hpp"

namespace feddlp {

enum class DatasetSource { synthetic, file };

/// Everything needed to reproduce a run.
struct RunConfig {
    TrainConfig train;
    double tau = 0.01;
    DatasetSource source = DatasetSource::synthetic;
    std::string dataset_path;
    std::size_t synth_k = 10;
    std::size_t synth_d = 32;
    std::size_t synth_n = 4000;
    double synth_sigma = 0.56;
    std::optional<std::uint64_t> synth_seed;  // defaults to train.seed
    std::string out_dir = ".";
    std::optional<double> target_acc;  // fraction; reported in the manifest

    std::uint64_t dataset_seed() const noexcept { return synth_seed.value_or(train.seed); }

    void validate() const {
        train.validate();
        if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
        if (source == DatasetSource::file && dataset_path.empty()) {
            throw ConfigError("dataset=file requires dataset_path");
        }
        if (source == DatasetSource::synthetic) {
            if (synth_k == 0 || synth_d == 0 || synth_n == 0) throw ConfigError("synth_k, synth_d, synth_n must be >= 1");
            if (synth_k > synth_n) throw ConfigError("synth_k must be <= synth_n");
            if (synth_k > synth_d) throw ConfigError("synth_k must be <= synth_d");
            if (!(synth_sigma >= 0.0)) throw ConfigError("synth_sigma must be >= 0");
        }
        if (target_acc && !(*target_acc >= 0.0)) throw ConfigError("target_acc must be >= 0");
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const char* first = v.data();
    const char* last = v.data() + v.size();
    std::from_chars_result r;
    if constexpr (std::is_floating_point_v<T>) {
        // from_chars for double is available in libstdc++ >= 11
        r = std::from_chars(first, last, out, std::chars_format::general);
    } else {
        r = std::from_chars(first, last, out);
    }
    if (r.ec != std::errc{} || r.ptr != last) {
        throw ConfigError("invalid value '" + v + "' for key '" + key + "'");
    }
    return out;
}

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

template <class E>
E parse_enum(const std::string& key, const std::string& v, std::initializer_list<std::pair<const char*, E>> table) {
    for (const auto& [name, value] : table) {
        if (v == name) return value;
    }
    std::string allowed;
    for (const auto& [name, value] : table) allowed += std::string(allowed.empty() ? "" : "|") + name;
    throw ConfigError("invalid value '" + v + "' for key '" + key + "' (expected " + allowed + ")");
}

} // namespace detail

/// Applies one key=value pair. Unknown keys are rejected.
inline void set_config_value(RunConfig& rc, const std::string& key, const std::string& v) {
    using namespace detail;
    TrainConfig& t = rc.train;
    const std::map<std::string, std::function<void()>> setters = {
        {"mode", [&] { t.mode = parse_mode(v); }},
        {"rounds", [&] { t.rounds = parse_number<std::size_t>(key, v); }},
        {"local_epochs", [&] { t.local_epochs = parse_number<std::size_t>(key, v); }},
        {"batch_size", [&] { t.batch_size = parse_number<std::size_t>(key, v); }},
        {"lr_local", [&] { t.lr_local = parse_number<double>(key, v); }},
        {"lr_global", [&] { t.lr_global = parse_number<double>(key, v); }},
        {"gate_lr", [&] { t.gate_lr = parse_number<double>(key, v); }},
        {"alpha", [&] { t.alpha = parse_number<double>(key, v); }},
        {"xi", [&] { t.xi = parse_number<double>(key, v); }},
        {"n_clients", [&] { t.n_clients = parse_number<std::size_t>(key, v); }},
        {"beta", [&] { t.beta = parse_number<double>(key, v); }},
        {"rank_local", [&] { t.rank_local = parse_number<std::size_t>(key, v); }},
        {"rank_global", [&] { t.rank_global = parse_number<std::size_t>(key, v); }},
        {"seed", [&] { t.seed = parse_number<std::uint64_t>(key, v); }},
        {"weight_decay", [&] { t.weight_decay = parse_number<double>(key, v); }},
        {"train_ratio", [&] { t.train_ratio = parse_number<double>(key, v); }},
        {"threshold", [&] { t.threshold = parse_enum<ThresholdKind>(key, v, {{"soft", ThresholdKind::soft}, {"hard", ThresholdKind::hard}}); }},
        {"kd_direction",
         [&] {
             t.kd_direction = parse_enum<KdDirection>(key, v, {{"student_first", KdDirection::student_first},
                                                  {"teacher_first", KdDirection::teacher_first}});
         }},
        {"schedule",
         [&] {
             t.schedule = parse_enum<PhaseSchedule>(key, v, {{"per_batch", PhaseSchedule::per_batch}, {"per_epoch", PhaseSchedule::per_epoch}});
         }},
        {"inference",
         [&] {
             t.inference = parse_enum<InferenceAdapter>(key, v, {{"auto", InferenceAdapter::automatic}, {"local", InferenceAdapter::local},
                                               {"global", InferenceAdapter::global}, {"sum", InferenceAdapter::sum}});
         }},
        {"workers", [&] { t.workers = parse_number<std::size_t>(key, v); }},
        {"layer_multiplier", [&] { t.layer_multiplier = parse_number<std::size_t>(key, v); }},
        {"tau", [&] { rc.tau = parse_number<double>(key, v); }},
        {"dataset",
         [&] { rc.source = parse_enum<DatasetSource>(key, v, {{"synthetic", DatasetSource::synthetic}, {"file", DatasetSource::file}}); }},
        {"dataset_path", [&] { rc.dataset_path = v; }},
        {"synth_k", [&] { rc.synth_k = parse_number<std::size_t>(key, v); }},
        {"synth_d", [&] { rc.synth_d = parse_number<std::size_t>(key, v); }},
        {"synth_n", [&] { rc.synth_n = parse_number<std::size_t>(key, v); }},
        {"synth_sigma", [&] { rc.synth_sigma = parse_number<double>(key, v); }},
        {"synth_seed", [&] { rc.synth_seed = parse_number<std::uint64_t>(key, v); }},
        {"out_dir", [&] { rc.out_dir = v; }},
        {"target_acc", [&] { rc.target_acc = parse_number<double>(key, v); }},
    };
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second();
}

/// Parses flat `key = value` text. '#' starts a comment; blank lines are ignored;
/// duplicate keys are an error.
inline RunConfig parse_config(std::string_view text) {
    RunConfig rc;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    std::map<std::string, std::size_t> seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = detail::trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = detail::trim(std::string_view(body).substr(0, eq));
        const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
        if (auto [pos, inserted] = seen.emplace(key, line_no); !inserted) {
            throw ConfigError("duplicate config key '" + key + "' on lines " + std::to_string(pos->second) + " and " +
                              std::to_string(line_no));
        }
        set_config_value(rc, key, value);
    }
    rc.validate();
    return rc;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

/// Canonical, fully resolved key=value listing; parse_config(render_config(c)) reproduces c.
inline std::string render_config(const RunConfig& rc) {
    using detail::fmt_double;
    const TrainConfig& t = rc.train;
    std::ostringstream os;
    auto kv = [&](const char* k, const std::string& v) { os << k << " = " << v << '\n'; };
    kv("mode", std::string(to_string(t.mode)));
    kv("rounds", std::to_string(t.rounds));
    kv("local_epochs", std::to_string(t.local_epochs));
    kv("batch_size", std::to_string(t.batch_size));
    kv("lr_local", fmt_double(t.lr_local));
    kv("lr_global", fmt_double(t.lr_global));
    kv("gate_lr", fmt_double(t.mu()));
    kv("alpha", fmt_double(t.alpha));
    kv("xi", fmt_double(t.xi));
    kv("n_clients", std::to_string(t.n_clients));
    kv("beta", fmt_double(t.beta));
    kv("rank_local", std::to_string(t.rank_local));
    kv("rank_global", std::to_string(t.rank_global));
    kv("seed", std::to_string(t.seed));
    kv("weight_decay", fmt_double(t.weight_decay));
    kv("train_ratio", fmt_double(t.train_ratio));
    kv("threshold", t.threshold == ThresholdKind::soft ? "soft" : "hard");
    kv("kd_direction", t.kd_direction == KdDirection::student_first ? "student_first" : "teacher_first");
    kv("schedule", t.schedule == PhaseSchedule::per_batch ? "per_batch" : "per_epoch");
    const char* inf = "auto";
    switch (t.inference) {
        case InferenceAdapter::automatic: inf = "auto"; break;
        case InferenceAdapter::local: inf = "local"; break;
        case InferenceAdapter::global: inf = "global"; break;
        case InferenceAdapter::sum: inf = "sum"; break;
    }
    kv("inference", inf);
    kv("workers", std::to_string(t.workers));
    kv("layer_multiplier", std::to_string(t.layer_multiplier));
    kv("tau", fmt_double(rc.tau));
    kv("dataset", rc.source == DatasetSource::synthetic ? "synthetic" : "file");
    if (rc.source == DatasetSource::file) {
        kv("dataset_path", rc.dataset_path);
    } else {
        kv("synth_k", std::to_string(rc.synth_k));
        kv("synth_d", std::to_string(rc.synth_d));
        kv("synth_n", std::to_string(rc.synth_n));
        kv("synth_sigma", fmt_double(rc.synth_sigma));
        kv("synth_seed", std::to_string(rc.dataset_seed()));
    }
    kv("out_dir", rc.out_dir);
    if (rc.target_acc) kv("target_acc", fmt_double(*rc.target_acc));
    return os.str();
}

inline EmbeddingDataset load_dataset(const RunConfig& rc) {
    if (rc.source == DatasetSource::file) return load_embeddings(rc.dataset_path);
    return generate_synthetic(rc.synth_k, rc.synth_d, rc.synth_n, rc.synth_sigma, rc.dataset_seed());
}

} // namespace feddlp
