// SPDX-License-Identifier: Apache-2.0
// feddlp command-line driver: run, gradcheck, partition-inspect.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "feddlp/feddlp.hpp"

namespace fs = std::filesystem;
using namespace feddlp;

namespace {

enum Exit { kOk = 0, kVerifyFailed = 1, kUsage = 2, kIo = 3 };

// FNV-1a over a file, so a manifest pins the exact dataset bytes.
std::uint64_t file_digest(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open " + p.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 14];
    while (f.read(buf, sizeof buf) || f.gcount() > 0) {
        for (std::streamsize i = 0; i < f.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

RunConfig load_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    std::string text = ss.str();
    // overrides replace earlier lines with the same key
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        const std::string key = detail::trim(std::string_view(kv).substr(0, eq));
        std::istringstream in(text);
        std::string line, kept;
        while (std::getline(in, line)) {
            std::string body = line;
            if (auto h = body.find('#'); h != std::string::npos) body.erase(h);
            const auto e = body.find('=');
            if (e != std::string::npos && detail::trim(std::string_view(body).substr(0, e)) == key) continue;
            kept += line + '\n';
        }
        text = kept + kv + '\n';
    }
    return parse_config(text);
}

std::string manifest(const RunConfig& rc, const Experiment& exp) {
    std::ostringstream os;
    os << "# feddlp run manifest\n";
    os << "# code_version " << FEDDLP_VERSION << '\n';
    os << "# adapter_format_version " << kAdapterFormatVersion << '\n';
    os << "# embedding_format_version " << kEmbeddingFormatVersion << '\n';
    os << "# run_seed " << rc.train.seed << '\n';
    os << "# dataset_seed " << rc.dataset_seed() << '\n';
    os << "# partition_seed " << derive_seed(rc.train.seed, {stream::kPartition}) << '\n';
    os << "# global_init_seed " << derive_seed(rc.train.seed, {stream::kGlobalInit}) << '\n';
    if (rc.source == DatasetSource::file) {
        os << "# dataset_fnv1a " << std::hex << file_digest(rc.dataset_path) << std::dec << '\n';
    }
    os << "# dataset n=" << exp.data().n() << " d=" << exp.data().d() << " k=" << exp.data().k() << '\n';
    for (std::size_t c : exp.degenerate_clients()) os << "# degenerate_shard client " << c << '\n';
    os << render_config(rc);
    return os.str();
}

int cmd_run(const std::string& config, const std::string& out_override, const std::vector<std::string>& sets,
            bool quiet) {
    RunConfig rc = load_with_overrides(config, sets);
    if (!out_override.empty()) rc.out_dir = out_override;
    const EmbeddingDataset data = load_dataset(rc);
    Experiment exp(data, rc.train, rc.tau);
    for (std::size_t c : exp.degenerate_clients()) {
        std::fprintf(stderr, "warning: client %zu has fewer than 2 samples\n", c);
    }

    std::error_code ec;
    fs::create_directories(rc.out_dir, ec);
    if (ec) throw IoError("cannot create " + rc.out_dir + ": " + ec.message());
    const fs::path out(rc.out_dir);

    const auto& log = exp.run([&](const RoundMetrics& m) {
        if (!quiet && (m.round == 1 || m.round % 10 == 0 || m.round == rc.train.rounds)) {
            std::printf("round %3zu  mean %.2f%%  std %.2f  lowest %.2f%%  bytes %llu\n", m.round,
                        100.0 * m.summary.mean, m.summary.std_x100, 100.0 * m.summary.lowest,
                        static_cast<unsigned long long>(m.cum_bytes()));
        }
    });

    emit_csv(log, rc.train.n_clients, out / "metrics.csv");
    write_text(out / "plot_data.csv", plot_data_csv(log, to_string(rc.train.mode)));
    std::string man = manifest(rc, exp);
    if (rc.target_acc) {
        const auto bytes = comm_to_target(log, *rc.target_acc);
        man += "# bytes_to_target " + (bytes ? std::to_string(*bytes) : std::string("not-reached")) + '\n';
    }
    write_text(out / "manifest.txt", man);
    if (exp.server().global) {
        const auto bytes = serialize(*exp.server().global);
        write_text(out / "global_adapter.fdlp", std::string(bytes.begin(), bytes.end()));
    }
    if (!quiet) std::printf("wrote %s\n", (out / "metrics.csv").string().c_str());
    return kOk;
}

int cmd_gradcheck(std::size_t trials, std::uint64_t seed, bool corrupt) {
    if (trials == 0) throw ConfigError("--trials must be >= 1");
    GradcheckOptions opt;
    opt.trials = trials;
    opt.seed = seed;
    opt.corrupt = corrupt;
    const GradcheckReport rep = gradcheck(opt);
    const double tol = 1e-4;
    std::printf("trials %zu  components %zu  max relative error %.6e  (%s)\n", rep.trials, rep.components,
                rep.max_rel_err, rep.worst.c_str());
    if (rep.max_rel_err < tol) {
        std::printf("gradcheck ok\n");
        return kOk;
    }
    std::printf("gradcheck FAILED: tolerance %.0e\n", tol);
    return kVerifyFailed;
}

int cmd_partition_inspect(const std::string& config, const std::vector<std::string>& sets) {
    const RunConfig rc = load_with_overrides(config, sets);
    const EmbeddingDataset data = load_dataset(rc);
    const Partition part = dirichlet_partition(data.labels, rc.train.n_clients, rc.train.beta, rc.train.seed);
    const auto hist = class_histograms(part, data.labels, data.k());
    std::printf("beta %g  seed %llu  clients %zu  classes %zu\n", rc.train.beta,
                static_cast<unsigned long long>(rc.train.seed), rc.train.n_clients, data.k());
    for (std::size_t c = 0; c < hist.size(); ++c) {
        std::printf("client %zu  n=%zu  [", c, part.assignments[c].size());
        for (std::size_t j = 0; j < hist[c].size(); ++j) std::printf(j ? " %zu" : "%zu", hist[c][j]);
        std::printf("]\n");
    }
    std::printf("heterogeneity %.6f\n", heterogeneity(part, data.labels, data.k()));
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"FedDLP federated simulator"};
    app.set_version_flag("--version", std::string(FEDDLP_VERSION));
    app.require_subcommand(1);

    std::string config, out_dir;
    std::vector<std::string> sets;
    bool quiet = false;
    auto* run = app.add_subcommand("run", "run an experiment from a config file");
    run->add_option("config", config, "config file (key = value)")->required();
    run->add_option("--out", out_dir, "output directory (overrides out_dir)");
    run->add_option("--set", sets, "override a config key, key=value (repeatable)");
    run->add_flag("-q,--quiet", quiet, "no per-round progress");

    std::size_t trials = 100;
    std::uint64_t seed = 0;
    bool corrupt = false;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the loss gradients");
    gc->add_option("--trials", trials, "random instances")->capture_default_str();
    gc->add_option("--seed", seed, "seed")->capture_default_str();
    gc->add_flag("--corrupt-gradient", corrupt, "perturb an analytic gradient (test hook)");

    std::string pi_config;
    std::vector<std::string> pi_sets;
    auto* pi = app.add_subcommand("partition-inspect", "print per-client class histograms");
    pi->add_option("config", pi_config, "config file")->required();
    pi->add_option("--set", pi_sets, "override a config key, key=value (repeatable)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*run) return cmd_run(config, out_dir, sets, quiet);
        if (*gc) return cmd_gradcheck(trials, seed, corrupt);
        if (*pi) return cmd_partition_inspect(pi_config, pi_sets);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kUsage;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return kIo;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return kIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kVerifyFailed;
    }
    return kUsage;
}
