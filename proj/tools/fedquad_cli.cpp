// fedquad: run, compare and calibrate simulated federated fine-tuning experiments.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedquad/fedquad.hpp"

namespace fs = std::filesystem;
using namespace fedquad;

namespace {

ExperimentConfig load(const std::string& path) {
    ExperimentConfig cfg = path.empty() ? ExperimentConfig::defaults() : load_config(path);
    apply_seed_override(cfg);
    return cfg;
}

std::vector<PolicyKind> parse_policies(const std::string& list) {
    std::vector<PolicyKind> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(policy_from_string(item));
    return out;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("n/a"); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FedQuad federated fine-tuning simulator"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;

    auto* run = app.add_subcommand("run", "Run one experiment");
    std::string policy;
    std::uint64_t seed = 0;
    int rounds = 0;
    bool full = false;
    run->add_option("--config", config_path, "Experiment config (JSON)");
    run->add_option("--policy", policy, "acs, max_depth, random_subset, from_input, uniform_fixed, rank_scaled");
    run->add_option("--seed", seed, "Seed (overrides config and FEDQUAD_SEED)");
    run->add_option("--rounds", rounds, "Round budget");
    run->add_option("--out", out_dir, "Output directory");
    run->add_flag("--full", full, "Run the whole budget even after the target is sustained");

    auto* cmp = app.add_subcommand("compare", "Compare policies on paired fleets");
    std::string policies = "acs,max_depth,random_subset,from_input";
    int seeds = 1;
    cmp->add_option("--config", config_path, "Experiment config (JSON)");
    cmp->add_option("--policies", policies, "Comma-separated policy list");
    cmp->add_option("--seeds", seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
    cmp->add_option("--out", out_dir, "Output directory");

    auto* cal = app.add_subcommand("calibrate", "Fit the cost model to the miniature model");
    int repeats = 5;
    cal->add_option("--config", config_path, "Experiment config (JSON)");
    cal->add_option("--repeats", repeats, "Timed steps per configuration")->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = load(config_path);
        if (!out_dir.empty()) cfg.out_dir = out_dir;

        if (*run) {
            if (!policy.empty()) cfg.policy.kind = policy_from_string(policy);
            if (run->count("--seed")) cfg.seed = seed;
            if (rounds > 0) cfg.rounds = rounds;
            cfg.validate();
            fs::create_directories(cfg.out_dir);
            RunOptions opts;
            opts.early_stop = !full;
            opts.metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
            opts.summary_path = (fs::path(cfg.out_dir) / "summary.json").string();
            opts.on_round = [](const RoundRecord& r) {
                std::cerr << "round " << r.round << "  acc " << r.accuracy << "  W " << r.waiting << "  clock " << r.clock << '\n';
            };
            const auto res = run_experiment(cfg, opts);
            std::cout << summary_json(res.summary).dump(2) << '\n';
        } else if (*cmp) {
            const auto kinds = parse_policies(policies);
            fs::create_directories(cfg.out_dir);
            const auto result = compare_policies(cfg, kinds, seeds, [](const RunSummary& s) {
                std::cerr << s.policy << " seed " << s.seed << "  final " << s.final_accuracy << "  W " << s.mean_waiting << '\n';
            });
            write_comparison_csv(result, (fs::path(cfg.out_dir) / "comparison.csv").string());
            write_timeseries_csv(result, (fs::path(cfg.out_dir) / "timeseries.csv").string());
            for (const auto& r : result.rows)
                std::cout << r.policy << " seed=" << r.seed << " tta=" << fmt_opt(r.time_to_accuracy) << " wait=" << r.mean_waiting
                          << " final=" << r.final_accuracy << '\n';
        } else if (*cal) {
            const auto res = calibrate_cost_model(cfg.model, cfg.quant, static_cast<std::size_t>(cfg.training.batch_size), repeats, cfg.cost);
            for (const auto& s : res.samples)
                std::cerr << "d=" << s.cfg.depth << " a=" << s.cfg.quantized << "  bytes " << s.measured_bytes << "  predicted "
                          << s.predicted_bytes << "  step " << s.step_seconds * 1e3 << " ms\n";
            std::cerr << "max residual " << res.max_abs_residual_bytes << " B (" << res.max_rel_residual * 100 << "%)\n";
            std::cout << cost_model_fragment(res.cost).dump(2) << '\n';
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
