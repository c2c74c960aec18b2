#pragma once

#include <stdexcept>
#include <string>

namespace fedquad {

/// Per-device training setup for one round.
/// `depth`: number of trainable adapter layers counted from the output side.
/// `quantized`: how many of those, starting at the lowest trainable layer,
/// keep their stored activations in int8 form.
struct Configuration {
    int depth = 1;
    int quantized = 0;

    bool operator==(const Configuration&) const = default;

    bool valid_for(int num_layers) const {
        return depth >= 1 && depth <= num_layers && quantized >= 0 && quantized <= depth - 1;
    }

    void validate(int num_layers) const {
        if (!valid_for(num_layers))
            throw std::invalid_argument("Configuration (" + std::to_string(depth) + ", " + std::to_string(quantized) +
                                        ") outside 1 <= d <= " + std::to_string(num_layers) + ", 0 <= a <= d-1");
    }
};

}  // namespace fedquad
