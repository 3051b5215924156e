// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <unistd.h>

#include "feddlp/metrics.hpp"

using namespace feddlp;

namespace {

RoundMetrics make_round(std::size_t round, std::vector<double> accs, std::uint64_t bytes) {
    RoundMetrics m;
    m.round = round;
    m.client_acc = std::move(accs);
    m.summary = summarize_observed(m.client_acc);
    m.effective_params.assign(m.client_acc.size(), 260);
    m.cum_uplink_bytes = bytes / 2;
    m.cum_downlink_bytes = bytes - bytes / 2;
    return m;
}

} // namespace

TEST(Summarize, ConstantVector) {
    const auto s = summarize(std::vector<double>(7, 0.9));
    EXPECT_NEAR(s.mean, 0.9, 1e-15);
    EXPECT_NEAR(s.std_x100, 0.0, 1e-12);
    EXPECT_EQ(s.lowest, 0.9);
}

TEST(Summarize, TwoClients) {
    const auto s = summarize(std::vector<double>{1.0, 0.0});
    EXPECT_EQ(s.mean, 0.5);
    EXPECT_EQ(s.std_x100, 50.0);
    EXPECT_EQ(s.lowest, 0.0);
}

TEST(Summarize, EmptyIsContractError) {
    EXPECT_THROW(summarize(std::vector<double>{}), ContractError);
    EXPECT_THROW(summarize_observed(std::vector<double>{NAN}), ContractError);
}

TEST(Summarize, MatchesExtendedPrecision) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> a(1 + t % 20);
        for (double& v : a) v = u(rng);
        long double mean = 0;
        for (double v : a) mean += v;
        mean /= a.size();
        long double var = 0;
        for (double v : a) var += (v - mean) * (v - mean);
        var /= a.size();
        const auto s = summarize(a);
        EXPECT_LT(std::abs(s.mean - (double)mean), 1e-12);
        EXPECT_LT(std::abs(s.std_x100 - (double)(100 * std::sqrt(var))), 1e-12);
        EXPECT_EQ(s.lowest, *std::min_element(a.begin(), a.end()));
    }
}

TEST(Summarize, PermutationInvariant) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> a(10);
        for (double& v : a) v = u(rng);
        const auto s = summarize(a);
        std::shuffle(a.begin(), a.end(), rng);
        const auto p = summarize(a);
        EXPECT_NEAR(s.mean, p.mean, 1e-15);
        EXPECT_NEAR(s.std_x100, p.std_x100, 1e-12);
        EXPECT_EQ(s.lowest, p.lowest);
    }
}

TEST(Summarize, NanClientsLeftOut) {
    const auto s = summarize_observed(std::vector<double>{0.5, NAN, 1.0});
    EXPECT_EQ(s.mean, 0.75);
    EXPECT_EQ(s.lowest, 0.5);
}

TEST(Csv, EmptyLogIsHeaderOnly) {
    EXPECT_EQ(metrics_csv(std::vector<RoundMetrics>{}, 2),
              "round,mean_acc,std_x100,lowest_acc,acc_client_0,acc_client_1,eff_params_mean,cum_bytes\n");
}

TEST(Csv, RowFormat) {
    const std::vector<RoundMetrics> log = {make_round(1, {0.5, 0.25}, 1234)};
    EXPECT_EQ(metrics_csv(log, 2).substr(metrics_csv_header(2).size()),
              "1,37.500000,12.500000,25.000000,50.000000,25.000000,260.000000,1234\n");
}

TEST(Csv, RoundTripWithinMicroUnits) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<RoundMetrics> log;
    for (std::size_t r = 1; r <= 12; ++r) {
        std::vector<double> a(4);
        for (double& v : a) v = u(rng);
        if (r == 5) a[2] = NAN;
        log.push_back(make_round(r, a, 1000 * r));
    }
    const auto rows = parse_metrics_csv(metrics_csv(log, 4));
    ASSERT_EQ(rows.size(), log.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].round, log[i].round);
        EXPECT_NEAR(rows[i].mean_acc, 100 * log[i].summary.mean, 1e-6);
        EXPECT_NEAR(rows[i].std_x100, log[i].summary.std_x100, 1e-6);
        EXPECT_NEAR(rows[i].lowest_acc, 100 * log[i].summary.lowest, 1e-6);
        for (std::size_t c = 0; c < 4; ++c) {
            if (std::isnan(log[i].client_acc[c])) {
                EXPECT_TRUE(std::isnan(rows[i].client_acc[c]));
            } else {
                EXPECT_NEAR(rows[i].client_acc[c], 100 * log[i].client_acc[c], 1e-6);
            }
        }
        EXPECT_EQ(rows[i].cum_bytes, log[i].cum_bytes());
    }
}

TEST(Csv, RowCountIsRoundsPlusHeader) {
    std::vector<RoundMetrics> log;
    for (std::size_t r = 1; r <= 7; ++r) log.push_back(make_round(r, {0.1, 0.2, 0.3}, r));
    const std::string csv = metrics_csv(log, 3);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);
    EXPECT_EQ(csv.back(), '\n');
}

TEST(Csv, ClientCountMismatch) {
    const std::vector<RoundMetrics> log = {make_round(1, {0.5, 0.25}, 1)};
    EXPECT_THROW(metrics_csv(log, 3), ContractError);
}

TEST(Csv, EmitWritesFileAndReportsIoErrors) {
    const auto path = std::filesystem::temp_directory_path() / ("feddlp_metrics_" + std::to_string(::getpid()) + ".csv");
    const std::vector<RoundMetrics> log = {make_round(1, {0.5}, 10)};
    emit_csv(log, 1, path);
    std::ifstream f(path);
    std::stringstream ss;
    ss << f.rdbuf();
    EXPECT_EQ(ss.str(), metrics_csv(log, 1));
    std::filesystem::remove(path);
    EXPECT_THROW(emit_csv(log, 1, "/nonexistent/dir/metrics.csv"), IoError);
}

TEST(PlotData, OneRowPerRound) {
    const std::vector<RoundMetrics> log = {make_round(1, {0.5}, 10), make_round(2, {0.75}, 20)};
    EXPECT_EQ(plot_data_csv(log, "feddlp"), "round,mode,mean_acc\n1,feddlp,50.000000\n2,feddlp,75.000000\n");
}

TEST(RoundMetrics, InvariantsHold) {
    const auto m = make_round(3, {0.2, 0.9, 0.4}, 99);
    EXPECT_EQ(m.summary.lowest, 0.2);
    EXPECT_NEAR(m.summary.mean, 0.5, 1e-15);
    EXPECT_EQ(m.cum_bytes(), 99u);
    EXPECT_EQ(m.effective_params_mean(), 260.0);
}
