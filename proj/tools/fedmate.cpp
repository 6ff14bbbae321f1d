#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedmate/harness.hpp"
#include "fedmate/selftest.hpp"

using namespace fedmate;

namespace {

void print_summary(const RunResult& r) {
    const CommSummary comm = comm_ledger_totals(r);
    std::printf("method=%s seed=%llu rounds=%d clients=%zu\n", to_string(r.cfg.method).c_str(),
                (unsigned long long)r.cfg.seed, r.cfg.rounds, r.cfg.num_clients);
    std::printf("  final balanced acc : %.4f\n", r.final_balanced);
    std::printf("  final matched acc  : %.4f\n", r.final_matched);
    if (r.pre_ft_balanced >= 0.0)
        std::printf("  pre-finetune acc   : balanced %.4f matched %.4f\n", r.pre_ft_balanced,
                    r.pre_ft_matched);
    std::printf("  uploads (params)   : extractor %zu classifier %zu prototypes %zu\n",
                comm.up_total.extractor, comm.up_total.classifier, comm.up_total.prototypes);
    std::printf("  upload ratio vs per-round full model: %.4f\n", comm.upload_ratio);
    if (r.schedule)
        std::printf("  cft: q=%.3f stride=%zu\n", r.schedule->q, r.schedule->skip_stride);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FedMate federated learning simulator"};
    app.require_subcommand(1);

    // run
    auto* run = app.add_subcommand("run", "execute one simulation");
    std::string config_path, method_override, out_override;
    std::uint64_t seed_override = 0;
    bool have_seed = false;
    run->add_option("--config", config_path, "config file (key=value)")->required();
    run->add_option("--seed", seed_override, "override master seed")->each([&](const std::string&) {
        have_seed = true;
    });
    run->add_option("--method", method_override, "override method: fedmate|fedavg_ft|local_only");
    run->add_option("--out", out_override, "override output directory");

    // compare
    auto* compare = app.add_subcommand("compare", "run several configs and summarize side by side");
    std::vector<std::string> config_paths;
    compare->add_option("--configs", config_paths, "config files")->required()->expected(-1);

    // selftest
    auto* selftest = app.add_subcommand("selftest", "run the built-in oracle and property suites");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            RunConfig cfg = load_config(config_path);
            if (have_seed) cfg.seed = seed_override;
            if (!method_override.empty()) cfg.method = parse_method(method_override);
            if (!out_override.empty()) cfg.out_dir = out_override;
            const RunResult r = run_simulation(cfg);
            write_run_outputs(r);
            print_summary(r);
            std::printf("outputs written to %s\n", cfg.out_dir.c_str());
        } else if (*compare) {
            std::printf("%-28s %-10s %10s %10s %14s\n", "config", "method", "balanced", "matched",
                        "upload_ratio");
            for (const auto& path : config_paths) {
                const RunConfig cfg = load_config(path);
                const RunResult r = run_simulation(cfg);
                const CommSummary comm = comm_ledger_totals(r);
                std::printf("%-28s %-10s %10.4f %10.4f %14.4f\n", path.c_str(),
                            to_string(cfg.method).c_str(), r.final_balanced, r.final_matched,
                            comm.upload_ratio);
            }
        } else if (*selftest) {
            return run_selftest(std::cout) ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
