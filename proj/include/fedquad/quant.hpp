#pragma once

// Block-wise absmax int8 codec for stored activations.
//
// Layout: the row-major buffer is cut into runs of `block_size` elements (the
// last run may be short). Each run keeps one fp32 scale = max|x| / 127 and one
// signed code per element in [-127, 127]. No header bytes are counted, so
//   stored_bytes = rows*cols + ceil(rows*cols / block_size) * 4.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "fedquad/rng.hpp"
#include "fedquad/tensor.hpp"

namespace fedquad {

enum class Rounding { nearest, stochastic };

struct QuantSpec {
    std::size_t block_size = 32;
    int bits = 8;
    Rounding rounding = Rounding::stochastic;

    void validate() const {
        if (block_size < 1) throw std::invalid_argument("QuantSpec: block_size must be >= 1");
        if (bits != 8) throw std::invalid_argument("QuantSpec: only 8-bit codes are supported");
    }
};

struct QuantizedTensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> codes;
    std::vector<float> scales;
    QuantSpec spec;

    std::size_t num_blocks() const { return scales.size(); }
};

inline constexpr int kCodeMax = 127;

inline std::size_t num_blocks(std::size_t elements, std::size_t block_size) {
    return (elements + block_size - 1) / block_size;
}

inline std::size_t stored_bytes(std::size_t rows, std::size_t cols, const QuantSpec& spec) {
    const std::size_t n = rows * cols;
    return n * sizeof(std::int8_t) + num_blocks(n, spec.block_size) * sizeof(float);
}

inline std::size_t stored_bytes(const QuantizedTensor& qt) {
    return qt.codes.size() * sizeof(std::int8_t) + qt.scales.size() * sizeof(float);
}

/// Full-precision (64-bit) storage, the format the model keeps unquantized activations in.
inline std::size_t full_bytes(std::size_t rows, std::size_t cols) { return rows * cols * sizeof(double); }

/// Reference footprints for the narrower float baselines commonly used on accelerators.
inline std::size_t fp32_bytes(std::size_t rows, std::size_t cols) { return rows * cols * 4; }
inline std::size_t fp16_bytes(std::size_t rows, std::size_t cols) { return rows * cols * 2; }

inline QuantizedTensor quantize(const Matrix& x, const QuantSpec& spec, RngStream& rng) {
    spec.validate();
    if (!all_finite(x)) throw std::invalid_argument("quantize: input contains non-finite values");

    const std::size_t n = x.size();
    const std::size_t bs = spec.block_size;
    QuantizedTensor qt{x.rows(), x.cols(), std::vector<std::int8_t>(n, 0), std::vector<float>(num_blocks(n, bs), 0.0f), spec};
    const auto& src = x.data();

    for (std::size_t b = 0; b < qt.scales.size(); ++b) {
        const std::size_t begin = b * bs;
        const std::size_t end = std::min(n, begin + bs);
        double absmax = 0.0;
        for (std::size_t i = begin; i < end; ++i) absmax = std::max(absmax, std::abs(src[i]));

        if (absmax == 0.0) {
            // Codes stay zero, but stochastic mode still consumes one draw per
            // element so the stream position depends only on the shape.
            if (spec.rounding == Rounding::stochastic)
                for (std::size_t i = begin; i < end; ++i) rng.next_u64();
            continue;
        }
        float sf = static_cast<float>(absmax / kCodeMax);
        if (sf == 0.0f) sf = std::numeric_limits<float>::denorm_min();
        if (!std::isfinite(sf)) throw std::invalid_argument("quantize: block scale overflows fp32");
        qt.scales[b] = sf;
        const double s = static_cast<double>(sf);

        for (std::size_t i = begin; i < end; ++i) {
            const double y = src[i] / s;
            double code = 0.0;
            if (spec.rounding == Rounding::nearest) {
                code = std::nearbyint(y);
            } else {
                const double lo = std::floor(y);
                code = lo + (rng.uniform() < (y - lo) ? 1.0 : 0.0);
            }
            code = std::clamp(code, -static_cast<double>(kCodeMax), static_cast<double>(kCodeMax));
            qt.codes[i] = static_cast<std::int8_t>(code);
        }
    }
    return qt;
}

inline Matrix dequantize(const QuantizedTensor& qt) {
    const std::size_t n = qt.rows * qt.cols;
    if (qt.codes.size() != n || qt.scales.size() != num_blocks(n, qt.spec.block_size))
        throw std::invalid_argument("dequantize: malformed QuantizedTensor");
    Matrix out(qt.rows, qt.cols);
    auto& dst = out.data();
    const std::size_t bs = qt.spec.block_size;
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<double>(qt.codes[i]) * static_cast<double>(qt.scales[i / bs]);
    return out;
}

}  // namespace fedquad
