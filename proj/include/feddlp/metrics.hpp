// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "feddlp/error.hpp"

namespace feddlp {

struct AccuracySummary {
    double mean = 0.0;
    double std_x100 = 0.0;  // population standard deviation, times 100
    double lowest = 0.0;
};

inline AccuracySummary summarize(std::span<const double> accs) {
    if (accs.empty()) throw ContractError("summarize: empty accuracy vector");
    AccuracySummary s;
    const double n = static_cast<double>(accs.size());
    s.mean = std::accumulate(accs.begin(), accs.end(), 0.0) / n;
    double ss = 0.0;
    for (double a : accs) ss += (a - s.mean) * (a - s.mean);
    s.std_x100 = 100.0 * std::sqrt(ss / n);
    s.lowest = *std::min_element(accs.begin(), accs.end());
    return s;
}

/// Metrics after one round. Accuracies are fractions; a client with no test data has NaN
/// and is left out of the summary.
struct RoundMetrics {
    std::size_t round = 0;  // 1-based
    std::vector<double> client_acc;
    AccuracySummary summary;
    std::vector<std::size_t> effective_params;
    std::uint64_t cum_uplink_bytes = 0;
    std::uint64_t cum_downlink_bytes = 0;

    std::uint64_t cum_bytes() const noexcept { return cum_uplink_bytes + cum_downlink_bytes; }

    double effective_params_mean() const {
        if (effective_params.empty()) return 0.0;
        const double sum = std::accumulate(effective_params.begin(), effective_params.end(), 0.0);
        return sum / static_cast<double>(effective_params.size());
    }
};

inline AccuracySummary summarize_observed(std::span<const double> accs) {
    std::vector<double> seen;
    for (double a : accs) {
        if (!std::isnan(a)) seen.push_back(a);
    }
    return summarize(seen);
}

namespace detail {

inline std::string fixed6(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace detail

inline std::string metrics_csv_header(std::size_t n_clients) {
    std::string h = "round,mean_acc,std_x100,lowest_acc";
    for (std::size_t c = 0; c < n_clients; ++c) h += ",acc_client_" + std::to_string(c);
    h += ",eff_params_mean,cum_bytes\n";
    return h;
}

/// Accuracy columns are percentages; std_x100 is already on the percentage scale.
inline std::string metrics_csv(std::span<const RoundMetrics> log, std::size_t n_clients) {
    std::string out = metrics_csv_header(n_clients);
    for (const auto& m : log) {
        if (m.client_acc.size() != n_clients) throw ContractError("metrics_csv: client count differs from header");
        out += std::to_string(m.round);
        out += ',' + detail::fixed6(100.0 * m.summary.mean);
        out += ',' + detail::fixed6(m.summary.std_x100);
        out += ',' + detail::fixed6(100.0 * m.summary.lowest);
        for (double a : m.client_acc) out += ',' + detail::fixed6(100.0 * a);
        out += ',' + detail::fixed6(m.effective_params_mean());
        out += ',' + std::to_string(m.cum_bytes());
        out += '\n';
    }
    return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

inline void emit_csv(std::span<const RoundMetrics> log, std::size_t n_clients, const std::filesystem::path& path) {
    write_text(path, metrics_csv(log, n_clients));
}

/// Round vs. mean accuracy (percent), tagged with the mode, for plotting curves.
inline std::string plot_data_csv(std::span<const RoundMetrics> log, std::string_view mode) {
    std::string out = "round,mode,mean_acc\n";
    for (const auto& m : log) {
        out += std::to_string(m.round) + ',' + std::string(mode) + ',' + detail::fixed6(100.0 * m.summary.mean) + '\n';
    }
    return out;
}

/// One parsed metrics row, values as written (percentages).
struct MetricsRow {
    std::size_t round = 0;
    double mean_acc = 0.0;
    double std_x100 = 0.0;
    double lowest_acc = 0.0;
    std::vector<double> client_acc;
    double eff_params_mean = 0.0;
    std::uint64_t cum_bytes = 0;
};

inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("metrics csv: missing header");
    std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (cols < 6) throw FormatError("metrics csv: header too short");
    const std::size_t n_clients = cols - 6;
    std::vector<MetricsRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (cells.size() != cols) throw FormatError("metrics csv: wrong column count on line " + std::to_string(line_no));
        auto num = [&](const std::string& s) {
            return s == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
        };
        MetricsRow r;
        r.round = std::stoul(cells[0]);
        r.mean_acc = num(cells[1]);
        r.std_x100 = num(cells[2]);
        r.lowest_acc = num(cells[3]);
        for (std::size_t c = 0; c < n_clients; ++c) r.client_acc.push_back(num(cells[4 + c]));
        r.eff_params_mean = num(cells[4 + n_clients]);
        r.cum_bytes = std::stoull(cells[5 + n_clients]);
        rows.push_back(std::move(r));
    }
    return rows;
}

} // namespace feddlp
