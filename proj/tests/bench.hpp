// SPDX-License-Identifier: Apache-2.0
// Loads configs/benchmark.cfg with per-test overrides.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "feddlp/config.hpp"
#include "feddlp/federation.hpp"

#ifndef FEDDLP_CONFIG_DIR
#error "FEDDLP_CONFIG_DIR must point at the configs directory"
#endif

namespace bench {

inline feddlp::RunConfig config(const std::vector<std::pair<std::string, std::string>>& overrides) {
    feddlp::RunConfig rc = feddlp::load_config(std::string(FEDDLP_CONFIG_DIR) + "/benchmark.cfg");
    for (const auto& [k, v] : overrides) feddlp::set_config_value(rc, k, v);
    rc.validate();
    return rc;
}

inline feddlp::Experiment experiment(const feddlp::RunConfig& rc) {
    return feddlp::Experiment(feddlp::load_dataset(rc), rc.train, rc.tau);
}

/// Final-round mean accuracy of a full run.
inline double final_mean(const feddlp::RunConfig& rc) {
    auto exp = experiment(rc);
    return exp.run().back().summary.mean;
}

} // namespace bench
