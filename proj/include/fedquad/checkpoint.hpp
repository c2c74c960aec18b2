#pragma once

// JSON checkpoint form. Every matrix is {"rows": r, "cols": c, "data": [...]}
// with row-major data; doubles round-trip exactly through nlohmann's
// shortest-representation printer.
//
// {
//   "format": "fedquad-checkpoint", "version": 1,
//   "dims": {"layers", "hidden", "ffn", "rank", "classes", "lora_alpha"},
//   "quant": {"block_size", "rounding"}, "active_rank": r,
//   "layers": [{"w_in", "w_out", "norm_gain", "norm_bias",
//               "in_a", "in_b", "out_a", "out_b",
//               "trainable", "quantize_activations", "skipped"}, ...],
//   "head": {"w", "b"}
// }

#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "fedquad/model.hpp"

namespace fedquad {

inline nlohmann::json matrix_to_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(), j.at("data").get<std::vector<double>>());
}

inline nlohmann::json checkpoint_to_json(const LayeredModel& model) {
    nlohmann::json j;
    j["format"] = "fedquad-checkpoint";
    j["version"] = 1;
    j["dims"] = {{"layers", model.dims.layers}, {"hidden", model.dims.hidden}, {"ffn", model.dims.ffn},
                 {"rank", model.dims.rank},     {"classes", model.dims.classes}, {"lora_alpha", model.dims.lora_alpha}};
    j["quant"] = {{"block_size", model.quant.block_size},
                  {"rounding", model.quant.rounding == Rounding::nearest ? "nearest" : "stochastic"}};
    j["active_rank"] = model.active_rank;
    auto& layers = j["layers"] = nlohmann::json::array();
    for (const auto& l : model.layers) {
        layers.push_back({{"w_in", matrix_to_json(l.w_in)},
                          {"w_out", matrix_to_json(l.w_out)},
                          {"norm_gain", matrix_to_json(l.norm_gain)},
                          {"norm_bias", matrix_to_json(l.norm_bias)},
                          {"in_a", matrix_to_json(l.adapter_in.a)},
                          {"in_b", matrix_to_json(l.adapter_in.b)},
                          {"out_a", matrix_to_json(l.adapter_out.a)},
                          {"out_b", matrix_to_json(l.adapter_out.b)},
                          {"trainable", l.trainable},
                          {"quantize_activations", l.quantize_activations},
                          {"skipped", l.skipped}});
    }
    j["head"] = {{"w", matrix_to_json(model.head.w)}, {"b", matrix_to_json(model.head.b)}};
    return j;
}

inline LayeredModel checkpoint_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "fedquad-checkpoint") throw std::invalid_argument("checkpoint: unrecognized format");
    LayeredModel m;
    const auto& d = j.at("dims");
    m.dims = {d.at("layers").get<int>(), d.at("hidden").get<int>(), d.at("ffn").get<int>(),
              d.at("rank").get<int>(),   d.at("classes").get<int>(), d.at("lora_alpha").get<double>()};
    m.dims.validate();
    m.quant.block_size = j.at("quant").at("block_size").get<std::size_t>();
    m.quant.rounding = j.at("quant").at("rounding").get<std::string>() == "nearest" ? Rounding::nearest : Rounding::stochastic;
    m.active_rank = j.at("active_rank").get<int>();
    const double alpha = m.dims.alpha();
    for (const auto& lj : j.at("layers")) {
        ModelLayer l;
        l.w_in = matrix_from_json(lj.at("w_in"));
        l.w_out = matrix_from_json(lj.at("w_out"));
        l.norm_gain = matrix_from_json(lj.at("norm_gain"));
        l.norm_bias = matrix_from_json(lj.at("norm_bias"));
        l.adapter_in = {matrix_from_json(lj.at("in_a")), matrix_from_json(lj.at("in_b")), m.dims.rank, alpha};
        l.adapter_out = {matrix_from_json(lj.at("out_a")), matrix_from_json(lj.at("out_b")), m.dims.rank, alpha};
        l.trainable = lj.at("trainable").get<bool>();
        l.quantize_activations = lj.at("quantize_activations").get<bool>();
        l.skipped = lj.at("skipped").get<bool>();
        m.layers.push_back(std::move(l));
    }
    if (m.num_layers() != m.dims.layers) throw std::invalid_argument("checkpoint: layer count does not match dims");
    m.head.w = matrix_from_json(j.at("head").at("w"));
    m.head.b = matrix_from_json(j.at("head").at("b"));
    return m;
}

inline void save_checkpoint(const LayeredModel& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << checkpoint_to_json(model).dump() << '\n';
}

inline LayeredModel load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace fedquad
