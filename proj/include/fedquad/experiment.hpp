#pragma once

// Experiment configuration, runner, policy comparison and cost-model
// calibration.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fedquad/federation.hpp"
#include "fedquad/model.hpp"
#include "fedquad/resource.hpp"
#include "fedquad/scheduler.hpp"
#include "fedquad/workload.hpp"

namespace fedquad {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct WorkloadParams {
    TaskParams task;
    std::size_t test_samples = 1500;
    double alpha = 10.0;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    ModelDims model;
    QuantSpec quant;
    bool calibrate_memory = true;  // derive memory coefficients from the model's activation store
    CostModel cost;
    std::vector<DeviceClassSpec> device_classes;
    PolicySpec policy;
    WorkloadParams workload;
    TrainingParams training;
    int rounds = 50;
    std::optional<double> target_accuracy;
    int sustain = 3;
    std::string out_dir = "out";

    /// Desk-scale defaults: 3 strong / 3 moderate / 6 weak devices.
    static ExperimentConfig defaults() {
        ExperimentConfig c;
        c.device_classes = default_device_classes(c.model.layers);
        return c;
    }

    static std::vector<DeviceClassSpec> default_device_classes(int layers) {
        std::vector<DeviceClassSpec> out;
        auto add = [&](DeviceClass cls, int count, std::vector<double> modes) {
            auto [lo, hi] = scaled_depth_range(cls, layers);
            out.push_back({cls, lo, hi, std::move(modes), count});
        };
        add(DeviceClass::strong, 3, {60, 70, 80, 90, 100, 110, 120, 130});
        add(DeviceClass::moderate, 3, {30, 40, 50, 60});
        add(DeviceClass::weak, 6, {10, 14, 18, 22});
        return out;
    }

    int device_count() const {
        int n = 0;
        for (const auto& c : device_classes) n += c.count;
        return n;
    }

    void validate() const {
        try {
            model.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("model: ") + e.what());
        }
        try {
            quant.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("quant: ") + e.what());
        }
        if (!calibrate_memory) try {
                cost.validate();
            } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("cost_model: ") + e.what());
            }
        if (device_classes.empty()) throw ConfigError("devices: at least one device class is required");
        for (std::size_t i = 0; i < device_classes.size(); ++i) {
            const auto& d = device_classes[i];
            const std::string path = "devices[" + std::to_string(i) + "]";
            if (d.count < 0) throw ConfigError(path + ".count: must be >= 0");
            if (d.depth_lo < 1 || d.depth_hi < d.depth_lo || d.depth_hi > model.layers)
                throw ConfigError(path + ".depth_range: must satisfy 1 <= lo <= hi <= layers");
            if (d.modes.empty()) throw ConfigError(path + ".modes: must not be empty");
            for (double m : d.modes)
                if (!(m > 0.0)) throw ConfigError(path + ".modes: throughputs must be positive");
        }
        if (device_count() < 1) throw ConfigError("devices: total device count must be >= 1");
        try {
            policy.reward.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("policy.reward: ") + e.what());
        }
        if (policy.baseline.uniform_depth < 1 || policy.baseline.uniform_depth > model.layers)
            throw ConfigError("policy.uniform_depth: must be in [1, layers]");
        if (workload.task.input_dim != model.hidden) throw ConfigError("workload.input_dim: must equal model.hidden");
        if (workload.task.classes != model.classes) throw ConfigError("workload.classes: must equal model.classes");
        if (workload.task.samples < static_cast<std::size_t>(device_count())) throw ConfigError("workload.samples: fewer samples than devices");
        if (workload.test_samples < 1) throw ConfigError("workload.test_samples: must be >= 1");
        if (!(workload.alpha > 0.0)) throw ConfigError("workload.alpha: must be positive");
        if (workload.task.label_noise < 0.0 || workload.task.label_noise > 1.0) throw ConfigError("workload.label_noise: must be in [0, 1]");
        if (!(training.lr > 0.0)) throw ConfigError("training.lr: must be positive");
        if (training.batch_size < 1) throw ConfigError("training.batch_size: must be >= 1");
        if (training.local_epochs < 1) throw ConfigError("training.local_epochs: must be >= 1");
        if (rounds < 1) throw ConfigError("rounds: must be >= 1");
        if (sustain < 1) throw ConfigError("sustain: must be >= 1");
        if (target_accuracy && (*target_accuracy < 0.0 || *target_accuracy > 1.0)) throw ConfigError("target_accuracy: must be in [0, 1]");
    }
};

// ---------------------------------------------------------------------------
// JSON loading

namespace detail {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& path) {
    if (!j.contains(key) || j.at(key).is_null()) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(path + key + ": wrong type");
    }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& path) {
    if (!j.is_object()) throw ConfigError((path.empty() ? std::string("<root>") : path.substr(0, path.size() - 1)) + ": expected an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* name : known) ok = ok || k == name;
        if (!ok) throw ConfigError(path + k + ": unknown field");
    }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using detail::read_opt;
    using detail::reject_unknown;
    ExperimentConfig c = ExperimentConfig::defaults();
    reject_unknown(j, {"seed", "model", "quant", "cost_model", "devices", "policy", "workload", "training", "rounds", "target_accuracy",
                       "sustain", "output"},
                   "");
    read_opt(j, "seed", c.seed, "");
    if (j.contains("model")) {
        const auto& m = j["model"];
        reject_unknown(m, {"layers", "hidden", "ffn", "rank", "classes", "lora_alpha"}, "model.");
        read_opt(m, "layers", c.model.layers, "model.");
        read_opt(m, "hidden", c.model.hidden, "model.");
        read_opt(m, "ffn", c.model.ffn, "model.");
        read_opt(m, "rank", c.model.rank, "model.");
        read_opt(m, "classes", c.model.classes, "model.");
        read_opt(m, "lora_alpha", c.model.lora_alpha, "model.");
        c.workload.task.input_dim = c.model.hidden;
        c.workload.task.classes = c.model.classes;
        c.device_classes = ExperimentConfig::default_device_classes(c.model.layers);
    }
    if (j.contains("quant")) {
        const auto& q = j["quant"];
        reject_unknown(q, {"block_size", "rounding"}, "quant.");
        read_opt(q, "block_size", c.quant.block_size, "quant.");
        std::string r = c.quant.rounding == Rounding::nearest ? "nearest" : "stochastic";
        read_opt(q, "rounding", r, "quant.");
        if (r != "nearest" && r != "stochastic") throw ConfigError("quant.rounding: expected 'nearest' or 'stochastic'");
        c.quant.rounding = r == "nearest" ? Rounding::nearest : Rounding::stochastic;
    }
    if (j.contains("cost_model")) {
        const auto& cm = j["cost_model"];
        reject_unknown(cm, {"memory", "work"}, "cost_model.");
        if (cm.contains("memory")) {
            const auto& mem = cm["memory"];
            if (mem.is_string()) {
                if (mem.get<std::string>() != "calibrate") throw ConfigError("cost_model.memory: expected 'calibrate' or an object");
                c.calibrate_memory = true;
            } else {
                reject_unknown(mem, {"fixed", "per_depth", "saved_per_quant"}, "cost_model.memory.");
                c.calibrate_memory = false;
                read_opt(mem, "fixed", c.cost.mem_fixed, "cost_model.memory.");
                read_opt(mem, "per_depth", c.cost.mem_per_depth, "cost_model.memory.");
                read_opt(mem, "saved_per_quant", c.cost.mem_saved_per_quant, "cost_model.memory.");
            }
        }
        if (cm.contains("work")) {
            const auto& w = cm["work"];
            reject_unknown(w, {"base", "per_depth", "per_quant"}, "cost_model.work.");
            read_opt(w, "base", c.cost.work_base, "cost_model.work.");
            read_opt(w, "per_depth", c.cost.work_per_depth, "cost_model.work.");
            read_opt(w, "per_quant", c.cost.work_per_quant, "cost_model.work.");
        }
    }
    if (j.contains("devices")) {
        if (!j["devices"].is_array()) throw ConfigError("devices: expected an array");
        c.device_classes.clear();
        for (std::size_t i = 0; i < j["devices"].size(); ++i) {
            const auto& d = j["devices"][i];
            const std::string path = "devices[" + std::to_string(i) + "].";
            reject_unknown(d, {"class", "count", "depth_range", "modes"}, path);
            std::string cls;
            read_opt(d, "class", cls, path);
            DeviceClassSpec spec;
            try {
                spec.cls = device_class_from_string(cls);
            } catch (const std::invalid_argument&) {
                throw ConfigError(path + "class: expected strong, moderate or weak");
            }
            std::tie(spec.depth_lo, spec.depth_hi) = scaled_depth_range(spec.cls, c.model.layers);
            if (d.contains("depth_range")) {
                std::vector<int> r;
                read_opt(d, "depth_range", r, path);
                if (r.size() != 2) throw ConfigError(path + "depth_range: expected [lo, hi]");
                spec.depth_lo = r[0];
                spec.depth_hi = r[1];
            }
            read_opt(d, "count", spec.count, path);
            for (const auto& def : ExperimentConfig::default_device_classes(c.model.layers))
                if (def.cls == spec.cls) spec.modes = def.modes;
            read_opt(d, "modes", spec.modes, path);
            c.device_classes.push_back(std::move(spec));
        }
    }
    if (j.contains("policy")) {
        const auto& p = j["policy"];
        reject_unknown(p, {"kind", "reward", "uniform_depth"}, "policy.");
        std::string kind = to_string(c.policy.kind);
        read_opt(p, "kind", kind, "policy.");
        try {
            c.policy.kind = policy_from_string(kind);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("policy.kind: ") + e.what());
        }
        read_opt(p, "uniform_depth", c.policy.baseline.uniform_depth, "policy.");
        if (p.contains("reward")) {
            const auto& r = p["reward"];
            reject_unknown(r, {"offset", "floor", "waiting_threshold"}, "policy.reward.");
            read_opt(r, "offset", c.policy.reward.offset, "policy.reward.");
            c.policy.reward.floor = 0.1 * c.policy.reward.offset;
            read_opt(r, "floor", c.policy.reward.floor, "policy.reward.");
            if (r.contains("waiting_threshold") && !r["waiting_threshold"].is_null()) {
                double theta = 0.0;
                read_opt(r, "waiting_threshold", theta, "policy.reward.");
                c.policy.reward.waiting_threshold = theta;
            }
        }
    }
    if (j.contains("workload")) {
        const auto& w = j["workload"];
        reject_unknown(w, {"samples", "test_samples", "alpha", "label_noise", "spread"}, "workload.");
        read_opt(w, "samples", c.workload.task.samples, "workload.");
        read_opt(w, "test_samples", c.workload.test_samples, "workload.");
        read_opt(w, "alpha", c.workload.alpha, "workload.");
        read_opt(w, "label_noise", c.workload.task.label_noise, "workload.");
        read_opt(w, "spread", c.workload.task.spread, "workload.");
    }
    if (j.contains("training")) {
        const auto& t = j["training"];
        reject_unknown(t, {"lr", "lr_schedule", "batch_size", "local_epochs", "optimizer", "weight_decay", "aggregation"}, "training.");
        read_opt(t, "lr", c.training.lr, "training.");
        std::string sched = "cosine";
        read_opt(t, "lr_schedule", sched, "training.");
        if (sched != "cosine" && sched != "constant") throw ConfigError("training.lr_schedule: expected 'cosine' or 'constant'");
        c.training.cosine_decay = sched == "cosine";
        read_opt(t, "batch_size", c.training.batch_size, "training.");
        read_opt(t, "local_epochs", c.training.local_epochs, "training.");
        std::string opt = "adamw";
        read_opt(t, "optimizer", opt, "training.");
        if (opt != "adamw" && opt != "sgd") throw ConfigError("training.optimizer: expected 'adamw' or 'sgd'");
        c.training.optimizer = opt == "sgd" ? OptimizerKind::sgd : OptimizerKind::adamw;
        read_opt(t, "weight_decay", c.training.adamw.weight_decay, "training.");
        std::string agg = "uniform";
        read_opt(t, "aggregation", agg, "training.");
        if (agg != "uniform" && agg != "samples") throw ConfigError("training.aggregation: expected 'uniform' or 'samples'");
        c.training.weighting = agg == "samples" ? AggregationWeighting::samples : AggregationWeighting::uniform;
    }
    read_opt(j, "rounds", c.rounds, "");
    if (j.contains("target_accuracy") && !j["target_accuracy"].is_null()) {
        double t = 0.0;
        read_opt(j, "target_accuracy", t, "");
        c.target_accuracy = t;
    }
    read_opt(j, "sustain", c.sustain, "");
    if (j.contains("output")) {
        reject_unknown(j["output"], {"dir"}, "output.");
        read_opt(j["output"], "dir", c.out_dir, "output.");
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return config_from_json(j);
}

/// FEDQUAD_SEED, when set, replaces the configured seed.
inline void apply_seed_override(ExperimentConfig& cfg) {
    if (const char* env = std::getenv("FEDQUAD_SEED"); env && *env) {
        try {
            cfg.seed = std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError("FEDQUAD_SEED: not an unsigned integer");
        }
    }
}

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationSample {
    Configuration cfg;
    std::size_t measured_bytes = 0;
    double predicted_bytes = 0.0;
    double step_seconds = 0.0;
};

struct CalibrationResult {
    CostModel cost;
    std::vector<CalibrationSample> samples;
    double max_abs_residual_bytes = 0.0;
    double max_rel_residual = 0.0;
};

namespace detail {

/// Least-squares coefficients for rows of `design`; rejects rank-deficient sweeps.
inline Eigen::VectorXd least_squares(const Eigen::MatrixXd& design, const Eigen::VectorXd& target, const char* what) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (qr.rank() < design.cols())
        throw std::invalid_argument(std::string("calibrate_cost_model: singular ") + what + " fit (sweep does not vary d and a)");
    return qr.solve(target);
}

}  // namespace detail

/// Activation-store bytes of one training batch under `cfg`.
inline std::size_t measure_store_bytes(const LayeredModel& base, const Configuration& cfg, std::size_t batch, RngStream rng) {
    LayeredModel m = base;
    apply_configuration(m, cfg);
    const Matrix x = Matrix::normal(batch, static_cast<std::size_t>(m.dims.hidden), 1.0, rng);
    return forward(m, x, rng).store.measured_bytes;
}

/// Sweeps every valid (d, a), fits memory = m_f + m_o d - m_q a to the
/// measured store bytes and step seconds = c_base + c_d d + c_a a to timed
/// training steps. A fit that is exact to within half a byte is snapped to
/// integer byte coefficients. `timing_repeats` = 0 skips the timing fit and
/// keeps `work_defaults`' compute coefficients.
inline CalibrationResult calibrate_cost_model(const ModelDims& dims, const QuantSpec& quant, std::size_t batch, int timing_repeats = 3,
                                              const CostModel& work_defaults = {}, std::uint64_t seed = 7) {
    dims.validate();
    RngStream rng(seed);
    const LayeredModel base = LayeredModel::init(dims, rng, quant);
    const int L = dims.layers;

    CalibrationResult res;
    for (int d = 1; d <= L; ++d)
        for (int a = 0; a <= d - 1; ++a) res.samples.push_back({{d, a}, 0, 0.0, 0.0});

    const auto n = static_cast<Eigen::Index>(res.samples.size());
    Eigen::MatrixXd mem_design(n, 3), work_design(n, 3);
    Eigen::VectorXd bytes(n), seconds(n);
    const Matrix x = Matrix::normal(batch, static_cast<std::size_t>(dims.hidden), 1.0, rng);
    std::vector<int> labels(batch);
    for (std::size_t i = 0; i < batch; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(dims.classes));

    for (Eigen::Index i = 0; i < n; ++i) {
        auto& s = res.samples[static_cast<std::size_t>(i)];
        s.measured_bytes = measure_store_bytes(base, s.cfg, batch, rng.fork(static_cast<std::uint64_t>(i)));
        mem_design.row(i) << 1.0, s.cfg.depth, -s.cfg.quantized;
        work_design.row(i) << 1.0, s.cfg.depth, s.cfg.quantized;
        bytes(i) = static_cast<double>(s.measured_bytes);
        if (timing_repeats > 0) {
            LayeredModel m = base;
            apply_configuration(m, s.cfg);
            AdamWState opt;
            RngStream step_rng = rng.fork(1000 + static_cast<std::uint64_t>(i));
            const auto t0 = std::chrono::steady_clock::now();
            for (int r = 0; r < timing_repeats; ++r) {
                auto fwd = forward(m, x, step_rng);
                auto bwd = backward(m, fwd.store, fwd.logits, labels);
                adamw_step(m, opt, bwd.grads, 1e-3);
            }
            const auto t1 = std::chrono::steady_clock::now();
            s.step_seconds = std::chrono::duration<double>(t1 - t0).count() / timing_repeats;
            seconds(i) = s.step_seconds;
        }
    }

    Eigen::VectorXd mem = detail::least_squares(mem_design, bytes, "memory");
    Eigen::VectorXd snapped = mem.array().round().matrix();
    if (((mem_design * snapped) - bytes).cwiseAbs().maxCoeff() < 0.5) mem = snapped;
    res.cost = work_defaults;
    res.cost.mem_fixed = mem(0);
    res.cost.mem_per_depth = mem(1);
    res.cost.mem_saved_per_quant = mem(2);
    if (timing_repeats > 0) {
        const Eigen::VectorXd w = detail::least_squares(work_design, seconds, "latency");
        res.cost.work_base = std::max(0.0, w(0));
        res.cost.work_per_depth = std::max(0.0, w(1));
        res.cost.work_per_quant = std::max(0.0, w(2));
    }
    for (auto& s : res.samples) {
        s.predicted_bytes = estimate_memory(res.cost, s.cfg);
        const double err = std::abs(s.predicted_bytes - static_cast<double>(s.measured_bytes));
        res.max_abs_residual_bytes = std::max(res.max_abs_residual_bytes, err);
        res.max_rel_residual = std::max(res.max_rel_residual, err / static_cast<double>(s.measured_bytes));
    }
    res.cost.validate();
    return res;
}

// ---------------------------------------------------------------------------
// Running experiments

/// First round whose accuracy reaches `target` and stays there for the next
/// `sustain - 1` evaluations (or through the end of the run); returns its clock.
inline std::optional<double> time_to_accuracy(const std::vector<RoundRecord>& records, double target, int sustain) {
    for (std::size_t i = 0; i < records.size(); ++i) {
        const std::size_t end = std::min(records.size(), i + static_cast<std::size_t>(sustain));
        bool ok = true;
        for (std::size_t k = i; k < end && ok; ++k) ok = records[k].accuracy >= target;
        if (ok) return records[i].clock;
    }
    return std::nullopt;
}

inline Federation build_federation(const ExperimentConfig& cfg) {
    cfg.validate();
    const RngStream root(cfg.seed);
    RngStream model_rng = root.fork(1);
    RngStream data_rng = root.fork(2);
    RngStream part_rng = root.fork(3);

    CostModel cost = cfg.cost;
    if (cfg.calibrate_memory) {
        const auto cal = calibrate_cost_model(cfg.model, cfg.quant, static_cast<std::size_t>(cfg.training.batch_size), 0, cfg.cost);
        cost = cal.cost;
    }

    LayeredModel base = LayeredModel::init(cfg.model, model_rng, cfg.quant);

    TaskParams all = cfg.workload.task;
    all.samples = cfg.workload.task.samples + cfg.workload.test_samples;
    const Dataset full = generate_task(data_rng, all);
    const Dataset train = full.slice(0, cfg.workload.task.samples);
    Dataset test = full.slice(cfg.workload.task.samples, full.size());
    const auto plan = dirichlet_partition(train.labels, train.classes, cfg.device_count(), cfg.workload.alpha, part_rng);

    std::vector<SimDevice> devices;
    int id = 0;
    for (const auto& cls : cfg.device_classes) {
        for (int k = 0; k < cls.count; ++k, ++id) {
            SimDevice dev;
            dev.profile = make_device(id, cls, cost, root.fork(100 + static_cast<std::uint64_t>(id)));
            dev.data = train.subset(plan.devices[static_cast<std::size_t>(id)]);
            dev.model = base;
            dev.train_rng = root.fork(10000 + static_cast<std::uint64_t>(id));
            devices.push_back(std::move(dev));
        }
    }
    TrainingParams tp = cfg.training;
    tp.schedule_rounds = cfg.rounds;
    PolicySpec policy = cfg.policy;
    policy.baseline.full_rank = cfg.model.rank;
    return Federation(std::move(base), std::move(devices), std::move(test), cost, policy, tp, root.fork(4));
}

struct RunSummary {
    std::string policy;
    std::uint64_t seed = 0;
    int rounds_run = 0;
    double final_accuracy = 0.0;
    std::optional<double> time_to_accuracy;
    double mean_waiting = 0.0;
    double total_clock = 0.0;
    int oom_faults = 0;
    CostModel cost;
};

struct RunResult {
    RunSummary summary;
    std::vector<RoundRecord> records;
};

/// One metrics line per round. Field order and number formatting are fixed so
/// identical runs produce identical bytes.
inline nlohmann::ordered_json metrics_row(const RoundRecord& r, const std::string& policy, std::uint64_t seed, double running_wait,
                                          const std::optional<double>& tta) {
    nlohmann::ordered_json j;
    j["round"] = r.round;
    j["policy"] = policy;
    j["seed"] = seed;
    j["clock_s"] = r.clock;
    j["t_max_s"] = r.t_max;
    j["waiting_s"] = r.waiting;
    j["running_mean_waiting_s"] = running_wait;
    j["accuracy"] = r.accuracy;
    j["time_to_accuracy_s"] = tta ? nlohmann::ordered_json(*tta) : nlohmann::ordered_json(nullptr);
    j["t_avg_used_s"] = r.t_avg_used;
    j["oom_faults"] = r.oom_faults;
    j["gain"] = r.gain_norms;
    auto& devs = j["devices"] = nlohmann::ordered_json::array();
    for (const auto& d : r.devices) {
        nlohmann::ordered_json e;
        e["id"] = d.id;
        e["class"] = to_string(d.cls);
        e["participated"] = d.participated;
        e["d"] = d.assignment.cfg.depth;
        e["a"] = d.assignment.cfg.quantized;
        e["layers"] = d.assignment.layers;
        e["rank"] = d.assignment.rank;
        e["latency_s"] = d.latency;
        e["memory"] = d.memory;
        e["measured_bytes"] = d.measured_bytes;
        e["train_loss"] = d.train_loss;
        devs.push_back(std::move(e));
    }
    return j;
}

struct RunOptions {
    bool early_stop = true;                   // stop once the target is sustained
    std::optional<std::string> metrics_path;  // metrics.jsonl
    std::optional<std::string> summary_path;  // summary.json
    std::function<void(const RoundRecord&)> on_round;
};

inline nlohmann::ordered_json summary_json(const RunSummary& s) {
    nlohmann::ordered_json j;
    j["policy"] = s.policy;
    j["seed"] = s.seed;
    j["rounds_run"] = s.rounds_run;
    j["final_accuracy"] = s.final_accuracy;
    j["time_to_accuracy_s"] = s.time_to_accuracy ? nlohmann::ordered_json(*s.time_to_accuracy) : nlohmann::ordered_json(nullptr);
    j["mean_waiting_s"] = s.mean_waiting;
    j["total_clock_s"] = s.total_clock;
    j["oom_faults"] = s.oom_faults;
    j["cost_model"] = {{"mem_fixed", s.cost.mem_fixed},          {"mem_per_depth", s.cost.mem_per_depth},
                       {"mem_saved_per_quant", s.cost.mem_saved_per_quant}, {"work_base", s.cost.work_base},
                       {"work_per_depth", s.cost.work_per_depth}, {"work_per_quant", s.cost.work_per_quant}};
    return j;
}

inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
    Federation fed = build_federation(cfg);
    RunResult res;
    res.summary.policy = to_string(cfg.policy.kind);
    res.summary.seed = cfg.seed;
    res.summary.cost = fed.cost_model();

    std::ofstream metrics;
    if (opts.metrics_path) {
        metrics.open(*opts.metrics_path, std::ios::out | std::ios::trunc);
        if (!metrics) throw std::runtime_error("cannot open " + *opts.metrics_path);
    }
    double wait_sum = 0.0;
    std::optional<double> tta;
    int streak = 0;
    for (int h = 1; h <= cfg.rounds; ++h) {
        RoundRecord rec;
        try {
            rec = fed.run_round();
        } catch (const SchedulingError& e) {
            throw SchedulingError("round " + std::to_string(h) + ": " + e.what());
        }
        wait_sum += rec.waiting;
        res.summary.oom_faults += rec.oom_faults;
        res.records.push_back(std::move(rec));
        const RoundRecord& cur = res.records.back();
        if (cfg.target_accuracy && !tta) {
            streak = cur.accuracy >= *cfg.target_accuracy ? streak + 1 : 0;
            if (streak >= cfg.sustain) tta = res.records[res.records.size() - static_cast<std::size_t>(cfg.sustain)].clock;
        }
        if (metrics) metrics << metrics_row(cur, res.summary.policy, cfg.seed, wait_sum / h, tta).dump() << '\n';
        if (opts.on_round) opts.on_round(cur);
        if (opts.early_stop && tta) break;
    }
    res.summary.rounds_run = static_cast<int>(res.records.size());
    res.summary.final_accuracy = res.records.back().accuracy;
    res.summary.mean_waiting = wait_sum / res.summary.rounds_run;
    res.summary.total_clock = res.records.back().clock;
    // A streak cut short by the round budget still counts once the run ends.
    if (cfg.target_accuracy && !tta) tta = time_to_accuracy(res.records, *cfg.target_accuracy, cfg.sustain);
    res.summary.time_to_accuracy = tta;
    if (opts.summary_path) {
        std::ofstream out(*opts.summary_path);
        if (!out) throw std::runtime_error("cannot open " + *opts.summary_path);
        out << summary_json(res.summary).dump(2) << '\n';
    }
    return res;
}

struct ComparisonRow {
    std::string policy;
    std::uint64_t seed = 0;
    std::optional<double> time_to_accuracy;
    double mean_waiting = 0.0;
    double final_accuracy = 0.0;
    double target = 0.0;
    int oom_faults = 0;
};

struct Comparison {
    std::vector<ComparisonRow> rows;
    std::vector<RunResult> runs;  // same order as rows
};

/// Runs every policy on the same seed-derived fleet, data and partition for
/// `seeds` consecutive seeds. Each policy runs the full budget; time-to-accuracy
/// then uses the configured target, or by default the lowest final accuracy
/// any policy reached on that seed.
inline Comparison compare_policies(const ExperimentConfig& base_cfg, const std::vector<PolicyKind>& policies, int seeds = 1,
                                   const std::function<void(const RunSummary&)>& on_run = {}) {
    if (policies.size() < 2) throw std::invalid_argument("compare_policies: need at least two policies");
    if (seeds < 1) throw std::invalid_argument("compare_policies: seeds must be >= 1");
    Comparison cmp;
    for (int s = 0; s < seeds; ++s) {
        const std::size_t first = cmp.runs.size();
        for (auto kind : policies) {
            ExperimentConfig cfg = base_cfg;
            cfg.seed = base_cfg.seed + static_cast<std::uint64_t>(s);
            cfg.policy.kind = kind;
            RunOptions opts;
            opts.early_stop = false;
            cmp.runs.push_back(run_experiment(cfg, opts));
            if (on_run) on_run(cmp.runs.back().summary);
        }
        double target = 1.0;
        for (std::size_t i = first; i < cmp.runs.size(); ++i) target = std::min(target, cmp.runs[i].summary.final_accuracy);
        if (base_cfg.target_accuracy) target = *base_cfg.target_accuracy;
        for (std::size_t i = first; i < cmp.runs.size(); ++i) {
            const auto& r = cmp.runs[i];
            cmp.rows.push_back({r.summary.policy, r.summary.seed, time_to_accuracy(r.records, target, base_cfg.sustain), r.summary.mean_waiting,
                                r.summary.final_accuracy, target, r.summary.oom_faults});
        }
    }
    return cmp;
}

namespace detail {
inline std::string fmt_num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}
}  // namespace detail

inline void write_comparison_csv(const Comparison& cmp, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "policy,seed,time_to_accuracy_s,mean_waiting_s,final_acc\n";
    for (const auto& r : cmp.rows)
        out << r.policy << ',' << r.seed << ',' << (r.time_to_accuracy ? detail::fmt_num(*r.time_to_accuracy) : "") << ','
            << detail::fmt_num(r.mean_waiting) << ',' << detail::fmt_num(r.final_accuracy) << '\n';
}

inline void write_timeseries_csv(const Comparison& cmp, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "policy,seed,round,clock_s,accuracy,waiting_s\n";
    for (const auto& run : cmp.runs)
        for (const auto& r : run.records)
            out << run.summary.policy << ',' << run.summary.seed << ',' << r.round << ',' << detail::fmt_num(r.clock) << ','
                << detail::fmt_num(r.accuracy) << ',' << detail::fmt_num(r.waiting) << '\n';
}

inline nlohmann::ordered_json cost_model_fragment(const CostModel& cm) {
    nlohmann::ordered_json j;
    j["cost_model"]["memory"] = {{"fixed", cm.mem_fixed}, {"per_depth", cm.mem_per_depth}, {"saved_per_quant", cm.mem_saved_per_quant}};
    j["cost_model"]["work"] = {{"base", cm.work_base}, {"per_depth", cm.work_per_depth}, {"per_quant", cm.work_per_quant}};
    return j;
}

}  // namespace fedquad
