#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedquad/experiment.hpp"

using namespace fedquad;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_json() {
    return nlohmann::json::parse(R"({
      "seed": 5,
      "model": {"layers": 3, "hidden": 8, "ffn": 16, "rank": 2, "classes": 3},
      "devices": [
        {"class": "strong", "count": 1, "depth_range": [3, 3], "modes": [60]},
        {"class": "moderate", "count": 1, "depth_range": [2, 2], "modes": [30, 40]},
        {"class": "weak", "count": 2, "depth_range": [1, 1], "modes": [10, 14]}
      ],
      "workload": {"samples": 400, "test_samples": 200},
      "training": {"lr": 0.003},
      "rounds": 5
    })");
}

ExperimentConfig tiny() { return config_from_json(tiny_json()); }

std::string config_error(const nlohmann::json& j) {
    try {
        config_from_json(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("fedquad_exp_" + name);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST(Config, DefaultsValidate) {
    const auto c = ExperimentConfig::defaults();
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.device_count(), 12);
}

TEST(Config, ShippedConfigsLoad) {
    for (const char* name : {"desk.json", "smoke.json", "depth_sweep.json"}) {
        const auto c = load_config(std::string(FEDQUAD_CONFIG_DIR) + "/" + name);
        EXPECT_GE(c.device_count(), 1) << name;
    }
    const auto desk = load_config(std::string(FEDQUAD_CONFIG_DIR) + "/desk.json");
    EXPECT_EQ(desk.device_count(), 12);
    EXPECT_EQ(desk.policy.kind, PolicyKind::acs);
    EXPECT_EQ(desk.device_classes[0].depth_lo, 5);
    EXPECT_EQ(desk.device_classes[2].depth_hi, 2);
}

TEST(Config, ErrorsNameTheField) {
    auto j = tiny_json();
    j["bogus"] = 1;
    EXPECT_NE(config_error(j).find("bogus"), std::string::npos);

    j = tiny_json();
    j["model"]["depth"] = 3;
    EXPECT_NE(config_error(j).find("model.depth"), std::string::npos);

    j = tiny_json();
    j["rounds"] = "many";
    EXPECT_NE(config_error(j).find("rounds"), std::string::npos);

    j = tiny_json();
    j["rounds"] = 0;
    EXPECT_NE(config_error(j).find("rounds"), std::string::npos);

    j = tiny_json();
    j["devices"][1]["class"] = "fast";
    EXPECT_NE(config_error(j).find("devices[1].class"), std::string::npos);

    j = tiny_json();
    j["devices"][0]["modes"] = nlohmann::json::array();
    EXPECT_NE(config_error(j).find("devices[0].modes"), std::string::npos);

    j = tiny_json();
    j["devices"][0]["depth_range"] = {2, 9};
    EXPECT_NE(config_error(j).find("devices[0].depth_range"), std::string::npos);

    j = tiny_json();
    j["policy"] = {{"kind", "greedy"}};
    EXPECT_NE(config_error(j).find("policy.kind"), std::string::npos);

    j = tiny_json();
    j["training"]["optimizer"] = "lion";
    EXPECT_NE(config_error(j).find("training.optimizer"), std::string::npos);

    j = tiny_json();
    j["cost_model"] = {{"memory", {{"fixed", 10}, {"per_depth", 5}, {"saved_per_quant", 6}}}};
    EXPECT_NE(config_error(j).find("cost_model"), std::string::npos);

    EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, RewardFloorDefaultsToTenthOfOffset) {
    auto j = tiny_json();
    j["policy"] = {{"kind", "acs"}, {"reward", {{"offset", 2.0}, {"waiting_threshold", 5.0}}}};
    const auto c = config_from_json(j);
    EXPECT_DOUBLE_EQ(c.policy.reward.floor, 0.2);
    EXPECT_EQ(c.policy.reward.waiting_threshold, 5.0);
}

TEST(Config, SeedOverrideFromEnvironment) {
    auto c = tiny();
    ::setenv("FEDQUAD_SEED", "77", 1);
    apply_seed_override(c);
    EXPECT_EQ(c.seed, 77u);
    ::setenv("FEDQUAD_SEED", "x1", 1);
    EXPECT_THROW(apply_seed_override(c), ConfigError);
    ::unsetenv("FEDQUAD_SEED");
    c.seed = 5;
    apply_seed_override(c);
    EXPECT_EQ(c.seed, 5u);
}

TEST(Calibration, DeskModelFitsExactly) {
    const auto res = calibrate_cost_model(ModelDims{6, 32, 64, 4, 3, 0.0}, QuantSpec{}, 32, 0);
    EXPECT_EQ(res.cost.mem_fixed, 8192.0);        // head input, 32 x 32 doubles
    EXPECT_EQ(res.cost.mem_per_depth, 49152.0);   // x, u, v, z at full precision
    EXPECT_EQ(res.cost.mem_saved_per_quant, 42240.0);
    EXPECT_EQ(res.max_abs_residual_bytes, 0.0);
    EXPECT_EQ(res.samples.size(), 21u);
    EXPECT_GT(res.cost.mem_per_depth, res.cost.mem_saved_per_quant);
    // Compute coefficients pass through when timing is skipped.
    EXPECT_EQ(res.cost.work_per_depth, CostModel{}.work_per_depth);
}

TEST(Calibration, ResidualWithinTenPercentOnOddShapes) {
    const auto res = calibrate_cost_model(ModelDims{5, 12, 20, 2, 3, 0.0}, QuantSpec{7, 8, Rounding::nearest}, 9, 0);
    EXPECT_LE(res.max_rel_residual, 0.10);
    EXPECT_GT(res.cost.mem_per_depth, 0.0);
    EXPECT_GT(res.cost.mem_saved_per_quant, 0.0);
}

TEST(Calibration, TimingFitProducesNonNegativeCoefficients) {
    const auto res = calibrate_cost_model(ModelDims{3, 8, 16, 2, 3, 0.0}, QuantSpec{}, 16, 1);
    EXPECT_GE(res.cost.work_base, 0.0);
    EXPECT_GE(res.cost.work_per_depth, 0.0);
    EXPECT_GE(res.cost.work_per_quant, 0.0);
    for (const auto& s : res.samples) EXPECT_GT(s.step_seconds, 0.0);
}

TEST(Calibration, SingleLayerSweepIsRejected) {
    EXPECT_THROW(calibrate_cost_model(ModelDims{1, 8, 16, 2, 3, 0.0}, QuantSpec{}, 8, 0), std::invalid_argument);
}

TEST(TimeToAccuracy, SustainSemantics) {
    std::vector<RoundRecord> recs;
    const double acc[] = {0.5, 0.8, 0.7, 0.82, 0.85, 0.9};
    for (int i = 0; i < 6; ++i) {
        RoundRecord r;
        r.round = i + 1;
        r.accuracy = acc[i];
        r.clock = 10.0 * (i + 1);
        recs.push_back(r);
    }
    EXPECT_EQ(time_to_accuracy(recs, 0.8, 1), 20.0);
    EXPECT_EQ(time_to_accuracy(recs, 0.8, 3), 40.0);
    EXPECT_EQ(time_to_accuracy(recs, 0.88, 3), 60.0);  // a streak cut off by the end still counts
    EXPECT_EQ(time_to_accuracy(recs, 0.95, 1), std::nullopt);
    EXPECT_EQ(time_to_accuracy(recs, 0.0, 3), 10.0);
}

TEST(Run, OneRoundGivesOneMetricsRow) {
    auto cfg = tiny();
    cfg.rounds = 1;
    const auto dir = scratch("one");
    RunOptions opts;
    opts.metrics_path = (dir / "metrics.jsonl").string();
    opts.summary_path = (dir / "summary.json").string();
    const auto res = run_experiment(cfg, opts);
    EXPECT_EQ(res.records.size(), 1u);
    std::ifstream in(*opts.metrics_path);
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j.at("round"), 1);
        EXPECT_EQ(j.at("devices").size(), 4u);
        ++rows;
    }
    EXPECT_EQ(rows, 1);
    const auto summary = nlohmann::json::parse(slurp(*opts.summary_path));
    EXPECT_EQ(summary.at("rounds_run"), 1);
    fs::remove_all(dir);
}

TEST(Run, MetricsSchemaAndOrdering) {
    auto cfg = tiny();
    const auto dir = scratch("schema");
    RunOptions opts;
    opts.metrics_path = (dir / "metrics.jsonl").string();
    run_experiment(cfg, opts);
    std::ifstream in(*opts.metrics_path);
    std::string line;
    int expected_round = 1;
    while (std::getline(in, line)) {
        const auto j = nlohmann::ordered_json::parse(line);
        std::vector<std::string> keys;
        for (const auto& [k, v] : j.items()) keys.push_back(k);
        EXPECT_EQ(keys, (std::vector<std::string>{"round", "policy", "seed", "clock_s", "t_max_s", "waiting_s", "running_mean_waiting_s",
                                                  "accuracy", "time_to_accuracy_s", "t_avg_used_s", "oom_faults", "gain", "devices"}));
        EXPECT_EQ(j.at("round"), expected_round++);
    }
    EXPECT_EQ(expected_round, 6);
    fs::remove_all(dir);
}

TEST(Run, ZeroTargetReachedAtFirstRound) {
    auto cfg = tiny();
    cfg.target_accuracy = 0.0;
    cfg.sustain = 3;
    const auto res = run_experiment(cfg);
    ASSERT_TRUE(res.summary.time_to_accuracy);
    EXPECT_EQ(*res.summary.time_to_accuracy, res.records.front().clock);
    EXPECT_EQ(res.summary.rounds_run, 3);  // stops once the target has held for three rounds
}

TEST(Run, StreakMatchesOfflineComputation) {
    auto cfg = tiny();
    cfg.rounds = 8;
    RunOptions full;
    full.early_stop = false;
    const auto base = run_experiment(cfg, full);
    for (double target : {0.3, 0.5, 0.6, 0.7, 0.8})
        for (int sustain : {1, 2, 3}) {
            auto c = cfg;
            c.target_accuracy = target;
            c.sustain = sustain;
            const auto res = run_experiment(c, full);
            EXPECT_EQ(res.summary.time_to_accuracy, time_to_accuracy(base.records, target, sustain)) << target << "/" << sustain;
        }
}

TEST(Run, TimeToAccuracyMonotoneInTarget) {
    auto cfg = tiny();
    cfg.rounds = 8;
    const auto res = run_experiment(cfg);
    double prev = 0.0;
    for (double t = 0.0; t <= 1.0; t += 0.02) {
        const auto tta = time_to_accuracy(res.records, t, 2);
        const double v = tta ? *tta : std::numeric_limits<double>::infinity();
        EXPECT_GE(v, prev) << "target " << t;
        prev = v;
    }
}

TEST(Run, ByteIdenticalMetricsForSameSeed) {
    auto cfg = tiny();
    const auto dir = scratch("repro");
    RunOptions a, b;
    a.metrics_path = (dir / "a.jsonl").string();
    b.metrics_path = (dir / "b.jsonl").string();
    run_experiment(cfg, a);
    run_experiment(cfg, b);
    const auto sa = slurp(*a.metrics_path);
    EXPECT_FALSE(sa.empty());
    EXPECT_EQ(sa, slurp(*b.metrics_path));
    cfg.seed = 6;
    run_experiment(cfg, b);
    EXPECT_NE(sa, slurp(*b.metrics_path));
    fs::remove_all(dir);
}

TEST(Run, NoOutOfMemoryWithCalibratedCosts) {
    for (auto kind : {PolicyKind::acs, PolicyKind::max_depth, PolicyKind::random_subset, PolicyKind::from_input, PolicyKind::rank_scaled}) {
        auto cfg = tiny();
        cfg.policy.kind = kind;
        cfg.rounds = 3;
        const auto res = run_experiment(cfg);
        EXPECT_EQ(res.summary.oom_faults, 0) << to_string(kind);
        for (const auto& r : res.records)
            for (const auto& d : r.devices)
                if (d.participated) {
                    EXPECT_LE(static_cast<double>(d.measured_bytes), d.memory);
                }
    }
}

TEST(Run, FixedMemoryCoefficientsAreUsed) {
    auto j = tiny_json();
    j["cost_model"] = {{"memory", {{"fixed", 100.0}, {"per_depth", 10.0}, {"saved_per_quant", 4.0}}}};
    j["rounds"] = 1;
    const auto res = run_experiment(config_from_json(j));
    EXPECT_EQ(res.summary.cost.mem_fixed, 100.0);
    // Budgets expressed in these units are far below the real store, so every device faults.
    EXPECT_EQ(res.summary.oom_faults, 4);
}

TEST(Compare, PairedFleetsAndTargets) {
    auto cfg = tiny();
    cfg.rounds = 3;
    const auto cmp = compare_policies(cfg, {PolicyKind::acs, PolicyKind::max_depth}, 2);
    ASSERT_EQ(cmp.rows.size(), 4u);
    ASSERT_EQ(cmp.runs.size(), 4u);
    for (int s = 0; s < 2; ++s) {
        const auto& a = cmp.runs[2 * s];
        const auto& b = cmp.runs[2 * s + 1];
        EXPECT_EQ(a.summary.seed, b.summary.seed);
        for (std::size_t i = 0; i < a.records[0].devices.size(); ++i) EXPECT_EQ(a.records[0].devices[i].memory, b.records[0].devices[i].memory);
        const double target = std::min(a.summary.final_accuracy, b.summary.final_accuracy);
        EXPECT_EQ(cmp.rows[2 * s].target, target);
        EXPECT_TRUE(cmp.rows[2 * s].time_to_accuracy.has_value());
        EXPECT_TRUE(cmp.rows[2 * s + 1].time_to_accuracy.has_value());
    }
    EXPECT_THROW(compare_policies(cfg, {PolicyKind::acs}, 1), std::invalid_argument);
    const auto dir = scratch("cmp");
    write_comparison_csv(cmp, (dir / "comparison.csv").string());
    write_timeseries_csv(cmp, (dir / "timeseries.csv").string());
    const auto csv = slurp((dir / "comparison.csv").string());
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "policy,seed,time_to_accuracy_s,mean_waiting_s,final_acc");
    std::ifstream ts(dir / "timeseries.csv");
    std::string line;
    int lines = 0;
    while (std::getline(ts, line)) ++lines;
    EXPECT_EQ(lines, 1 + 4 * 3);
    fs::remove_all(dir);
}

TEST(Compare, IdenticalPoliciesGiveIdenticalRows) {
    auto cfg = tiny();
    cfg.rounds = 2;
    const auto cmp = compare_policies(cfg, {PolicyKind::max_depth, PolicyKind::max_depth}, 1);
    EXPECT_EQ(cmp.rows[0].final_accuracy, cmp.rows[1].final_accuracy);
    EXPECT_EQ(cmp.rows[0].mean_waiting, cmp.rows[1].mean_waiting);
    EXPECT_EQ(cmp.rows[0].time_to_accuracy, cmp.rows[1].time_to_accuracy);
}
