#pragma once

// In-process parameter server and simulated device fleet.
//
// One round: (1) every device drifts and reports memory/throughput,
// (2) the active policy picks each device's layout, (3-4) devices import the
// global adapters and apply their layout, (5) each trains one local epoch,
// (6) reports come back, (7) the server aggregates layer by layer, refreshes
// the gain profile and t_avg, and evaluates the global model.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <future>
#include <numbers>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fedquad/model.hpp"
#include "fedquad/resource.hpp"
#include "fedquad/scheduler.hpp"
#include "fedquad/workload.hpp"

namespace fedquad {

enum class OptimizerKind { sgd, adamw };
enum class AggregationWeighting { uniform, samples };

struct TrainingParams {
    double lr = 0.001;
    bool cosine_decay = true;
    int schedule_rounds = 50;  // horizon of the cosine schedule
    int batch_size = 32;
    int local_epochs = 1;
    OptimizerKind optimizer = OptimizerKind::adamw;
    AdamWParams adamw;
    AggregationWeighting weighting = AggregationWeighting::uniform;

    double lr_at(int round) const {
        if (!cosine_decay) return lr;
        const double progress = static_cast<double>(round - 1) / static_cast<double>(std::max(1, schedule_rounds));
        return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
    }
};

struct SimDevice {
    DeviceProfile profile;
    Dataset data;
    LayeredModel model;
    RngStream train_rng;

    int local_steps(const TrainingParams& tp) const {
        const auto n = static_cast<int>(data.size());
        return tp.local_epochs * ((n + tp.batch_size - 1) / tp.batch_size);
    }

    /// Throughput normalized to one round of local work.
    DeviceStatus status(const TrainingParams& tp) const {
        return {profile.id, profile.memory, profile.throughput / static_cast<double>(local_steps(tp))};
    }
};

struct DeviceReport {
    int device_id = 0;
    Assignment assignment;
    AdapterSnapshot update;
    double latency = 0.0;
    std::size_t peak_bytes = 0;
    std::size_t samples = 0;
    double train_loss = 0.0;
};

struct ServerState {
    GlobalAdapters global;
    GainProfile gain;
    std::vector<double> t_avg_history;
    int round = 0;
    RngStream rng;
};

struct DeviceRoundEntry {
    int id = 0;
    DeviceClass cls = DeviceClass::moderate;
    bool participated = false;
    Assignment assignment;
    double latency = 0.0;
    double memory = 0.0;
    std::size_t measured_bytes = 0;
    double train_loss = 0.0;
};

struct RoundRecord {
    int round = 0;
    std::vector<DeviceRoundEntry> devices;
    double t_max = 0.0;
    double waiting = 0.0;
    double accuracy = 0.0;
    double clock = 0.0;
    int oom_faults = 0;
    double t_avg_used = 0.0;
    std::vector<double> gain_norms;
};

/// Trains one device for its round: import global, apply layout, run the
/// local epochs, and report the resulting adapters.
inline DeviceReport local_train(SimDevice& dev, const GlobalAdapters& global, const Assignment& as, const TrainingParams& tp,
                                const CostModel& cm, int round) {
    import_global(dev.model, global);
    apply_assignment(dev.model, as);

    DeviceReport rep;
    rep.device_id = dev.profile.id;
    rep.assignment = as;
    rep.samples = dev.data.size();

    const double lr = tp.lr_at(round);
    AdamWState opt{tp.adamw, 0, {}};
    std::vector<std::size_t> order(dev.data.size());
    double loss_sum = 0.0;
    int steps = 0;
    for (int e = 0; e < tp.local_epochs; ++e) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[dev.train_rng.below(i)]);
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(tp.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(tp.batch_size));
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                               order.begin() + static_cast<std::ptrdiff_t>(end));
            const Dataset batch = dev.data.subset(idx);
            auto fwd = forward(dev.model, batch.inputs, dev.train_rng);
            rep.peak_bytes = std::max(rep.peak_bytes, fwd.store.measured_bytes);
            auto bwd = backward(dev.model, fwd.store, fwd.logits, batch.labels);
            if (tp.optimizer == OptimizerKind::adamw)
                adamw_step(dev.model, opt, bwd.grads, lr);
            else
                sgd_step(dev.model, bwd.grads, lr);
            loss_sum += bwd.loss;
            ++steps;
        }
    }
    rep.train_loss = steps > 0 ? loss_sum / steps : 0.0;
    rep.latency = estimate_latency(cm, as.cfg, dev.status(tp).throughput);
    rep.update = export_updates(dev.model);
    return rep;
}

struct AggregationResult {
    GlobalAdapters global;
    std::vector<int> contributors;  // n_l per layer
};

namespace detail {

/// mean += (w / total) * (x - mean). A running mean reproduces identical
/// inputs bit for bit, which a sum-then-divide does not.
inline void running_mean_update(Matrix& mean, const Matrix& x, double w, double total) {
    const double f = w / total;
    auto& m = mean.data();
    const auto& v = x.data();
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += f * (v[i] - m[i]);
}

}  // namespace detail

/// Layer l becomes the mean of the n_l reports that carry it; layers nobody
/// trained keep their previous value. The head is averaged over all reports.
/// Accumulation runs in ascending device-id order.
inline AggregationResult aggregate_layerwise(const GlobalAdapters& prev, std::vector<const DeviceReport*> reports,
                                             AggregationWeighting weighting = AggregationWeighting::uniform) {
    if (reports.empty()) throw std::invalid_argument("aggregate_layerwise: no reports");
    std::sort(reports.begin(), reports.end(), [](const DeviceReport* a, const DeviceReport* b) { return a->device_id < b->device_id; });
    const std::size_t L = prev.layers.size();
    AggregationResult res{prev, std::vector<int>(L, 0)};
    auto weight_of = [&](const DeviceReport& r) { return weighting == AggregationWeighting::samples ? static_cast<double>(r.samples) : 1.0; };

    for (const auto* r : reports)
        if (r->update.layers.size() != L) throw std::invalid_argument("aggregate_layerwise: report layer count mismatch");

    for (std::size_t l = 0; l < L; ++l) {
        LayerParams mean;
        double total = 0.0;
        for (const auto* r : reports) {
            const auto& upd = r->update.layers[l];
            if (!upd) continue;
            const double w = weight_of(*r);
            if (!(w > 0.0)) continue;
            total += w;
            for (int s = 0; s < kAdapterSlots; ++s) {
                if (!(*upd)[s].same_shape(prev.layers[l][s]))
                    throw ShapeError("aggregate_layerwise: shape mismatch at layer " + std::to_string(l));
                if (mean[s].empty())
                    mean[s] = (*upd)[s];
                else
                    detail::running_mean_update(mean[s], (*upd)[s], w, total);
            }
            ++res.contributors[l];
        }
        if (res.contributors[l] > 0) res.global.layers[l] = std::move(mean);
    }

    HeadParams head;
    double total = 0.0;
    for (const auto* r : reports) {
        if (!r->update.head.w.same_shape(prev.head.w) || !r->update.head.b.same_shape(prev.head.b))
            throw ShapeError("aggregate_layerwise: head shape mismatch");
        const double w = weight_of(*r);
        if (!(w > 0.0)) continue;
        total += w;
        if (head.w.empty()) {
            head = r->update.head;
        } else {
            detail::running_mean_update(head.w, r->update.head.w, w, total);
            detail::running_mean_update(head.b, r->update.head.b, w, total);
        }
    }
    if (!head.w.empty()) res.global.head = std::move(head);
    return res;
}

/// Plain federated averaging: every report must carry every layer.
inline AggregationResult fedavg(const GlobalAdapters& prev, const std::vector<const DeviceReport*>& reports) {
    for (const auto* r : reports)
        if (r->update.layer_count() != prev.layers.size()) throw std::invalid_argument("fedavg: every report must carry all layers");
    return aggregate_layerwise(prev, reports, AggregationWeighting::uniform);
}

/// Accuracy of base weights + global adapters at full depth without quantization.
inline double evaluate_global(const LayeredModel& base, const GlobalAdapters& global, const Dataset& test) {
    if (test.size() == 0) throw std::invalid_argument("evaluate_global: empty held-out set");
    LayeredModel m = base;
    import_global(m, global);
    apply_configuration(m, {m.num_layers(), 0});
    std::size_t correct = 0;
    constexpr std::size_t kChunk = 256;
    for (std::size_t begin = 0; begin < test.size(); begin += kChunk) {
        const Dataset part = test.slice(begin, std::min(test.size(), begin + kChunk));
        const auto pred = argmax_rows(predict(m, part.inputs));
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == part.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

struct PolicySpec {
    PolicyKind kind = PolicyKind::acs;
    RewardParams reward;
    BaselineParams baseline;
};

/// Server, fleet and held-out set for one simulated run.
class Federation {
public:
    Federation(LayeredModel base, std::vector<SimDevice> devices, Dataset test, CostModel cm, PolicySpec policy, TrainingParams training,
               RngStream server_rng, bool parallel = false)
        : base_(std::move(base)),
          devices_(std::move(devices)),
          test_(std::move(test)),
          cm_(cm),
          policy_(std::move(policy)),
          training_(training),
          parallel_(parallel) {
        if (devices_.empty()) throw std::invalid_argument("Federation: at least one device is required");
        cm_.validate();
        policy_.reward.validate();
        state_.global = export_all(base_);
        state_.gain = GainProfile::uniform(base_.num_layers());
        state_.rng = server_rng;
    }

    const ServerState& state() const { return state_; }
    const std::vector<SimDevice>& devices() const { return devices_; }
    const LayeredModel& base() const { return base_; }
    const CostModel& cost_model() const { return cm_; }
    double clock() const { return clock_; }

    RoundRecord run_round() {
        const int h = ++state_.round;
        const int L = base_.num_layers();

        // (1) status collection
        std::vector<DeviceStatus> statuses;
        for (auto& d : devices_) {
            fluctuate(d.profile, h);
            statuses.push_back(d.status(training_));
        }

        // (2) configuration selection
        std::vector<std::optional<Assignment>> plan;
        double t_avg = 0.0;
        if (policy_.kind == PolicyKind::acs) {
            t_avg = state_.t_avg_history.empty() ? bootstrap_t_avg(statuses, cm_, L) : state_.t_avg_history.back();
            for (auto& c : select_configs(statuses, cm_, state_.gain, t_avg, policy_.reward)) {
                if (c)
                    plan.push_back(Assignment{*c, {}, 0});
                else
                    plan.emplace_back();
            }
        } else {
            plan = baseline_assign(policy_.kind, statuses, cm_, L, policy_.baseline, state_.rng);
        }

        // (3)-(6) dispatch, local training, reports
        std::vector<std::optional<DeviceReport>> reports(devices_.size());
        auto train_one = [&](std::size_t i) {
            if (plan[i]) reports[i] = local_train(devices_[i], state_.global, *plan[i], training_, cm_, h);
        };
        if (parallel_ && std::thread::hardware_concurrency() > 1) {
            std::vector<std::future<void>> jobs;
            for (std::size_t i = 0; i < devices_.size(); ++i) jobs.push_back(std::async(std::launch::async, train_one, i));
            for (auto& j : jobs) j.get();
        } else {
            for (std::size_t i = 0; i < devices_.size(); ++i) train_one(i);
        }

        RoundRecord rec;
        rec.round = h;
        rec.t_avg_used = t_avg;
        std::vector<const DeviceReport*> received;
        std::vector<double> times;
        for (std::size_t i = 0; i < devices_.size(); ++i) {
            DeviceRoundEntry e;
            e.id = devices_[i].profile.id;
            e.cls = devices_[i].profile.cls;
            e.memory = devices_[i].profile.memory;
            if (reports[i]) {
                const auto& r = *reports[i];
                e.participated = true;
                e.assignment = r.assignment;
                e.latency = r.latency;
                e.measured_bytes = r.peak_bytes;
                e.train_loss = r.train_loss;
                if (static_cast<double>(r.peak_bytes) > e.memory) ++rec.oom_faults;
                received.push_back(&r);
                times.push_back(r.latency);
            }
            rec.devices.push_back(std::move(e));
        }

        // (7) aggregation and server bookkeeping
        auto agg = aggregate_layerwise(state_.global, received, training_.weighting);
        std::vector<bool> updated(L);
        for (int l = 0; l < L; ++l) updated[l] = agg.contributors[l] > 0;
        state_.gain = update_gain_profile(state_.gain, state_.global, agg.global, updated);
        state_.global = std::move(agg.global);
        state_.t_avg_history.push_back(std::accumulate(times.begin(), times.end(), 0.0) / static_cast<double>(times.size()));

        rec.t_max = *std::max_element(times.begin(), times.end());
        rec.waiting = waiting_time(times);
        clock_ += rec.t_max;
        rec.clock = clock_;
        rec.accuracy = evaluate_global(base_, state_.global, test_);
        rec.gain_norms = state_.gain.norms;
        return rec;
    }

private:
    LayeredModel base_;
    std::vector<SimDevice> devices_;
    Dataset test_;
    CostModel cm_;
    PolicySpec policy_;
    TrainingParams training_;
    bool parallel_ = false;
    ServerState state_;
    double clock_ = 0.0;
};

}  // namespace fedquad
