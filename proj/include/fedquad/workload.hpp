#pragma once

// Synthetic Gaussian-cluster classification task and Dirichlet label-skew
// partitioning.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedquad/rng.hpp"
#include "fedquad/tensor.hpp"

namespace fedquad {

struct Dataset {
    Matrix inputs;  // N x input_dim
    std::vector<int> labels;
    int classes = 0;

    std::size_t size() const { return labels.size(); }

    Dataset subset(const std::vector<std::size_t>& idx) const {
        Dataset out;
        out.classes = classes;
        out.inputs = Matrix(idx.size(), inputs.cols());
        out.labels.reserve(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= size()) throw std::out_of_range("Dataset::subset: index " + std::to_string(idx[i]) + " out of range");
            const auto src = inputs.row(idx[i]);
            std::copy(src.begin(), src.end(), out.inputs.row(i).begin());
            out.labels.push_back(labels[idx[i]]);
        }
        return out;
    }

    Dataset slice(std::size_t begin, std::size_t end) const {
        std::vector<std::size_t> idx(end - begin);
        std::iota(idx.begin(), idx.end(), begin);
        return subset(idx);
    }
};

struct TaskParams {
    std::size_t samples = 6000;
    int input_dim = 32;
    int classes = 3;
    double label_noise = 0.05;
    double spread = 0.3;   // per-coordinate stddev around each center
};

/// C unit-norm centers at the vertices of a regular simplex, randomly rotated.
/// Pairwise distance is sqrt(2C/(C-1)), which is >= 1.5 for C <= 9.
inline Matrix simplex_centers(int classes, int dim, RngStream& rng) {
    if (dim < classes) throw std::invalid_argument("simplex_centers: input_dim must be >= classes");
    // Random orthonormal frame via Gram-Schmidt on Gaussian vectors.
    Matrix frame(classes, dim);
    for (int i = 0; i < classes; ++i) {
        for (;;) {
            auto r = frame.row(i);
            for (auto& v : r) v = rng.normal();
            for (int j = 0; j < i; ++j) {
                double dot = 0.0;
                for (int k = 0; k < dim; ++k) dot += r[k] * frame(j, k);
                for (int k = 0; k < dim; ++k) r[k] -= dot * frame(j, k);
            }
            double norm = 0.0;
            for (double v : r) norm += v * v;
            norm = std::sqrt(norm);
            if (norm < 1e-8) continue;
            for (auto& v : r) v /= norm;
            break;
        }
    }
    // Simplex vertex i = (e_i - 1/C) / ||e_i - 1/C||, expressed in the frame.
    const double c = static_cast<double>(classes);
    const double norm = std::sqrt((c - 1.0) / c);
    Matrix centers(classes, dim);
    for (int i = 0; i < classes; ++i)
        for (int j = 0; j < classes; ++j) {
            const double coef = ((i == j ? 1.0 : 0.0) - 1.0 / c) / norm;
            for (int k = 0; k < dim; ++k) centers(i, k) += coef * frame(j, k);
        }
    return centers;
}

inline double min_center_distance(const Matrix& centers) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < centers.rows(); ++i)
        for (std::size_t j = i + 1; j < centers.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < centers.cols(); ++k) s += (centers(i, k) - centers(j, k)) * (centers(i, k) - centers(j, k));
            best = std::min(best, std::sqrt(s));
        }
    return best;
}

/// Samples with uniformly drawn labels placed around their class center; each
/// label is then replaced by a different class with probability `label_noise`.
inline Dataset sample_task(const Matrix& centers, const TaskParams& p, RngStream& rng) {
    Dataset ds;
    ds.classes = p.classes;
    ds.inputs = Matrix(p.samples, static_cast<std::size_t>(p.input_dim));
    ds.labels.resize(p.samples);
    for (std::size_t i = 0; i < p.samples; ++i) {
        const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(p.classes)));
        for (int k = 0; k < p.input_dim; ++k) ds.inputs(i, k) = centers(y, k) + p.spread * rng.normal();
        int label = y;
        if (rng.uniform() < p.label_noise)
            label = (y + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(p.classes - 1)))) % p.classes;
        ds.labels[i] = label;
    }
    return ds;
}

inline Dataset generate_task(RngStream& rng, const TaskParams& p) {
    if (p.classes < 2 || p.samples < static_cast<std::size_t>(p.classes))
        throw std::invalid_argument("generate_task: need N >= C >= 2");
    if (p.label_noise < 0.0 || p.label_noise > 1.0) throw std::invalid_argument("generate_task: label noise must be in [0, 1]");
    const Matrix centers = simplex_centers(p.classes, p.input_dim, rng);
    if (min_center_distance(centers) < 1.5 - 1e-9) throw std::invalid_argument("generate_task: too many classes for center separation >= 1.5");
    return sample_task(centers, p, rng);
}

/// Classifies each row by its nearest per-class mean; returns accuracy.
/// Used as an independent reference for task difficulty.
inline double nearest_centroid_accuracy(const Dataset& train, const Dataset& test) {
    const std::size_t dim = train.inputs.cols();
    Matrix means(train.classes, dim);
    std::vector<double> count(train.classes, 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) {
        count[train.labels[i]] += 1.0;
        for (std::size_t k = 0; k < dim; ++k) means(train.labels[i], k) += train.inputs(i, k);
    }
    for (int c = 0; c < train.classes; ++c)
        for (std::size_t k = 0; k < dim; ++k) means(c, k) /= std::max(1.0, count[c]);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int c = 0; c < train.classes; ++c) {
            double d = 0.0;
            for (std::size_t k = 0; k < dim; ++k) d += (test.inputs(i, k) - means(c, k)) * (test.inputs(i, k) - means(c, k));
            if (d < best_d) best_d = d, best = c;
        }
        correct += best == test.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

// ---------------------------------------------------------------------------
// Partitioning

struct PartitionPlan {
    std::vector<std::vector<std::size_t>> devices;  // ascending indices per device
};

/// Per class: shuffle that class's indices, draw device shares from
/// Dir(alpha, ..., alpha), and cut the shuffled list at the rounded cumulative
/// shares.
inline PartitionPlan dirichlet_partition(const std::vector<int>& labels, int classes, int n_devices, double alpha, RngStream& rng) {
    if (!(alpha > 0.0)) throw std::invalid_argument("dirichlet_partition: alpha must be positive");
    if (n_devices < 1) throw std::invalid_argument("dirichlet_partition: need at least one device");
    PartitionPlan plan;
    plan.devices.resize(n_devices);
    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= classes) throw std::out_of_range("dirichlet_partition: label out of range");
        by_class[labels[i]].push_back(i);
    }
    for (auto& idx : by_class) {
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
        std::vector<double> share(n_devices);
        double total = 0.0;
        for (auto& s : share) total += (s = rng.gamma(alpha));
        double cum = 0.0;
        std::size_t begin = 0;
        for (int d = 0; d < n_devices; ++d) {
            cum += share[d] / total;
            const std::size_t end =
                d + 1 == n_devices ? idx.size() : std::min(idx.size(), static_cast<std::size_t>(std::llround(cum * static_cast<double>(idx.size()))));
            for (std::size_t i = begin; i < std::max(begin, end); ++i) plan.devices[d].push_back(idx[i]);
            begin = std::max(begin, end);
        }
    }
    for (std::size_t d = 0; d < plan.devices.size(); ++d) {
        if (plan.devices[d].empty()) throw std::invalid_argument("dirichlet_partition: device " + std::to_string(d) + " received no samples");
        std::sort(plan.devices[d].begin(), plan.devices[d].end());
    }
    return plan;
}

// ---------------------------------------------------------------------------
// CSV persistence: header x0..x{D-1},label; one sample per line.

inline void save_dataset_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_dataset_csv: cannot open " + path);
    out << std::setprecision(17);
    for (std::size_t k = 0; k < ds.inputs.cols(); ++k) out << 'x' << k << ',';
    out << "label\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (double v : ds.inputs.row(i)) out << v << ',';
        out << ds.labels[i] << '\n';
    }
}

inline Dataset load_dataset_csv(const std::string& path, int classes) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_dataset_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_dataset_csv: empty file");
    const auto dim = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    std::vector<double> values;
    Dataset ds;
    ds.classes = classes;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        for (std::size_t k = 0; k < dim; ++k) {
            if (!std::getline(ss, cell, ',')) throw std::runtime_error("load_dataset_csv: short row");
            values.push_back(std::stod(cell));
        }
        if (!std::getline(ss, cell)) throw std::runtime_error("load_dataset_csv: missing label");
        ds.labels.push_back(std::stoi(cell));
    }
    ds.inputs = Matrix(ds.labels.size(), dim, std::move(values));
    return ds;
}

}  // namespace fedquad
