#pragma once

// Per-round configuration selection: the reward-driven greedy scheduler over
// memory-feasible (depth, quantized) pairs, and the baseline policies it is
// compared against.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedquad/configuration.hpp"
#include "fedquad/model.hpp"
#include "fedquad/resource.hpp"
#include "fedquad/rng.hpp"

namespace fedquad {

class SchedulingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Feasible configurations of one device, ascending in depth, each with the
/// smallest quantized-layer count that fits its memory.
using FeasibleSet = std::vector<Configuration>;

/// Walks depth upward while carrying the last quantized count forward; the
/// first fitting count for each depth is kept and the scan for that depth
/// stops. Once a depth has no fitting count, no deeper one can fit either.
inline FeasibleSet enumerate_feasible(const CostModel& cm, double memory, int layers) {
    if (layers < 1) throw std::invalid_argument("enumerate_feasible: layers must be >= 1");
    FeasibleSet out;
    int a_cur = 0;
    for (int d = 1; d <= layers; ++d) {
        bool found = false;
        for (int a = a_cur; a <= d - 1; ++a) {
            if (is_feasible(cm, {d, a}, memory)) {
                out.push_back({d, a});
                a_cur = a;
                found = true;
                break;
            }
        }
        if (!found) break;
    }
    return out;
}

/// Per-layer gradient norms g_l; gain(d) sums the top d of them.
struct GainProfile {
    std::vector<double> norms;

    static GainProfile uniform(int layers, double value = 1.0) { return {std::vector<double>(layers, value)}; }

    int num_layers() const { return static_cast<int>(norms.size()); }

    double gain(int depth) const {
        const int L = num_layers();
        if (depth < 1 || depth > L) throw std::out_of_range("GainProfile::gain: depth " + std::to_string(depth) + " outside [1, L]");
        double g = 0.0;
        for (int l = L - depth; l < L; ++l) g += norms[l];
        return g;
    }
};

struct RewardParams {
    double offset = 1.0;  // c, in seconds
    double floor = 0.1;   // smallest admissible denominator
    std::optional<double> waiting_threshold;  // theta; unset = no filter

    void validate() const {
        if (!(offset > 0.0)) throw std::invalid_argument("RewardParams: offset must be positive");
        if (!(floor > 0.0)) throw std::invalid_argument("RewardParams: floor must be positive");
        if (waiting_threshold && !(*waiting_threshold >= 0.0)) throw std::invalid_argument("RewardParams: threshold must be >= 0");
    }
};

/// G / max(t - t_avg + c, floor)
inline double reward(double gain, double time, double t_avg, const RewardParams& rp) {
    return gain / std::max(time - t_avg + rp.offset, rp.floor);
}

/// What the server learns from a device before scheduling it. Throughput is
/// per round of local work, so estimate_latency gives the round completion time.
struct DeviceStatus {
    int id = 0;
    double memory = 0.0;
    double throughput = 1.0;
};

/// True when (r, d, a) beats (best_r, best_d, best_a): higher reward, then larger d, then smaller a.
inline bool better_choice(double r, const Configuration& c, double best_r, const Configuration& best) {
    if (r != best_r) return r > best_r;
    if (c.depth != best.depth) return c.depth > best.depth;
    return c.quantized < best.quantized;
}

/// Best configuration for one device, or nullopt if nothing fits.
inline std::optional<Configuration> select_config(const DeviceStatus& dev, const CostModel& cm, const GainProfile& gp, double t_avg,
                                                  const RewardParams& rp) {
    FeasibleSet candidates = enumerate_feasible(cm, dev.memory, gp.num_layers());
    if (candidates.empty()) return std::nullopt;
    if (rp.waiting_threshold) {
        // Others are expected to finish near t_avg, so a device running past
        // t_avg by more than theta would alone push the average wait above it.
        FeasibleSet kept;
        for (const auto& c : candidates)
            if (estimate_latency(cm, c, dev.throughput) - t_avg <= *rp.waiting_threshold) kept.push_back(c);
        if (kept.empty()) kept.push_back(candidates.front());
        candidates = std::move(kept);
    }
    std::optional<Configuration> best;
    double best_r = 0.0;
    for (const auto& c : candidates) {
        const double r = reward(gp.gain(c.depth), estimate_latency(cm, c, dev.throughput), t_avg, rp);
        if (!best || better_choice(r, c, best_r, *best)) {
            best = c;
            best_r = r;
        }
    }
    return best;
}

/// One entry per device; nullopt marks a device skipped this round.
inline std::vector<std::optional<Configuration>> select_configs(const std::vector<DeviceStatus>& devices, const CostModel& cm,
                                                                const GainProfile& gp, double t_avg_prev, const RewardParams& rp) {
    rp.validate();
    if (!(t_avg_prev > 0.0)) throw std::invalid_argument("select_configs: previous average completion time must be positive");
    std::vector<std::optional<Configuration>> out;
    out.reserve(devices.size());
    bool any = false;
    for (const auto& dev : devices) {
        out.push_back(select_config(dev, cm, gp, t_avg_prev, rp));
        any = any || out.back().has_value();
    }
    if (!any) throw SchedulingError("select_configs: no device can fit any configuration");
    return out;
}

/// First-round stand-in for t_avg: median latency of each device's smallest feasible configuration.
inline double bootstrap_t_avg(const std::vector<DeviceStatus>& devices, const CostModel& cm, int layers) {
    std::vector<double> times;
    for (const auto& dev : devices) {
        const auto fs = enumerate_feasible(cm, dev.memory, layers);
        if (!fs.empty()) times.push_back(estimate_latency(cm, fs.front(), dev.throughput));
    }
    if (times.empty()) throw SchedulingError("bootstrap_t_avg: no device can fit any configuration");
    std::sort(times.begin(), times.end());
    const std::size_t n = times.size();
    return n % 2 == 1 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
}

/// g_l = ||new_l - prev_l||_F over the layer's four adapter matrices, for the
/// layers some device updated this round; the rest keep their previous value.
inline GainProfile update_gain_profile(const GainProfile& prev, const GlobalAdapters& prev_global, const GlobalAdapters& new_global,
                                       const std::vector<bool>& updated) {
    const std::size_t L = prev.norms.size();
    if (prev_global.layers.size() != L || new_global.layers.size() != L || updated.size() != L)
        throw std::invalid_argument("update_gain_profile: layer count mismatch");
    GainProfile out = prev;
    for (std::size_t l = 0; l < L; ++l) {
        if (!updated[l]) continue;
        double sq = 0.0;
        for (int s = 0; s < kAdapterSlots; ++s) {
            const double n = frobenius_norm(sub(new_global.layers[l][s], prev_global.layers[l][s]));
            sq += n * n;
        }
        out.norms[l] = std::sqrt(sq);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Policies

enum class PolicyKind { acs, random_subset, from_input, max_depth, uniform_fixed, rank_scaled };

inline std::string to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::acs: return "acs";
        case PolicyKind::random_subset: return "random_subset";
        case PolicyKind::from_input: return "from_input";
        case PolicyKind::max_depth: return "max_depth";
        case PolicyKind::uniform_fixed: return "uniform_fixed";
        case PolicyKind::rank_scaled: return "rank_scaled";
    }
    return "?";
}

inline PolicyKind policy_from_string(const std::string& s) {
    for (auto k : {PolicyKind::acs, PolicyKind::random_subset, PolicyKind::from_input, PolicyKind::max_depth, PolicyKind::uniform_fixed,
                   PolicyKind::rank_scaled})
        if (to_string(k) == s) return k;
    throw std::invalid_argument("unknown policy '" + s + "'");
}

/// A device's training layout for the round. `layers` non-empty means a
/// sub-model: exactly those layers run and train, the rest are bypassed.
/// `rank` 0 means the full adapter rank.
struct Assignment {
    Configuration cfg;
    std::vector<int> layers;
    int rank = 0;

    bool submodel() const { return !layers.empty(); }
};

inline void apply_assignment(LayeredModel& model, const Assignment& as) {
    if (as.submodel())
        apply_submodel(model, as.layers);
    else
        apply_configuration(model, as.cfg);
    set_active_rank(model, as.rank > 0 ? as.rank : model.dims.rank);
}

/// Largest depth that fits without quantization, 0 if even depth 1 does not.
inline int max_feasible_depth(const CostModel& cm, double memory, int layers) {
    int best = 0;
    for (int d = 1; d <= layers; ++d)
        if (is_feasible(cm, {d, 0}, memory)) best = d;
    return best;
}

struct BaselineParams {
    int uniform_depth = 1;
    int full_rank = 4;
};

/// Baseline assignments. Every device gets a quantization-free layout sized by
/// its memory budget k = max_feasible_depth:
///  - max_depth:     top k layers
///  - uniform_fixed: top min(uniform_depth, k) layers
///  - from_input:    sub-model of layers 0..k-1
///  - random_subset: sub-model of k layers drawn uniformly without replacement
///  - rank_scaled:   top k layers at rank ceil(full_rank * k / L)
/// Devices with k = 0 are skipped.
inline std::vector<std::optional<Assignment>> baseline_assign(PolicyKind kind, const std::vector<DeviceStatus>& devices,
                                                              const CostModel& cm, int layers, const BaselineParams& bp,
                                                              RngStream& rng) {
    if (kind == PolicyKind::acs) throw std::invalid_argument("baseline_assign: acs is not a baseline");
    std::vector<std::optional<Assignment>> out;
    bool any = false;
    for (const auto& dev : devices) {
        const int k = max_feasible_depth(cm, dev.memory, layers);
        if (k == 0) {
            out.emplace_back();
            continue;
        }
        Assignment as;
        switch (kind) {
            case PolicyKind::max_depth: as.cfg = {k, 0}; break;
            case PolicyKind::uniform_fixed: as.cfg = {std::clamp(bp.uniform_depth, 1, k), 0}; break;
            case PolicyKind::from_input:
                as.cfg = {k, 0};
                for (int l = 0; l < k; ++l) as.layers.push_back(l);
                break;
            case PolicyKind::random_subset: {
                as.cfg = {k, 0};
                std::vector<int> idx(layers);
                std::iota(idx.begin(), idx.end(), 0);
                for (int i = 0; i < k; ++i) {
                    const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(layers - i)));
                    std::swap(idx[i], idx[j]);
                }
                as.layers.assign(idx.begin(), idx.begin() + k);
                std::sort(as.layers.begin(), as.layers.end());
                break;
            }
            case PolicyKind::rank_scaled:
                as.cfg = {k, 0};
                as.rank = std::max(1, static_cast<int>(std::ceil(static_cast<double>(bp.full_rank) * k / layers)));
                break;
            case PolicyKind::acs: break;
        }
        out.push_back(std::move(as));
        any = true;
    }
    if (!any) throw SchedulingError("baseline_assign: no device can fit any configuration");
    return out;
}

}  // namespace fedquad
