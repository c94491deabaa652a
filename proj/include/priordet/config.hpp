// Run configuration: a single JSON document with defaults, strict unknown-key
// rejection and dotted --set overrides. The loaded config is embedded in
// every output artifact so runs are reproducible from (config, seed) alone.

#pragma once

#include <fstream>
#include <nlohmann/json.hpp>

#include "priordet/tensor.hpp"

namespace priordet {

using Json = nlohmann::json;

inline Json default_config() {
    return Json{
        {"seed", 0},
        {"classes", 2},
        {"data",
         {{"height", 96},
          {"width", 96},
          {"min_nodules", 1},
          {"max_nodules", 3},
          {"speckle_scale", 0.3},
          {"boundary_blur", 1.2},
          {"texture", 0.15},
          {"shadow_prob", 0.25},
          {"shadow_strength", 0.35},
          {"malignant_waviness", 0.22}}},
        {"backbone", {{"stem_width", 16}, {"widths", {32, 64, 128}}}},
        {"sdfpr",
         {{"enabled", true},
          {"kernel_points", 9},
          {"s_max", 4.0},
          {"groups", 4},
          {"droppath_keep", 0.9},
          {"ffn_ratio", 2.0},
          {"resample_each_forward", true},
          {"prior_file", ""},
          {"w_clip", {0.1, 2.0}},
          {"r_clip", {0.2, 5.0}}}},
        {"msffm",
         {{"enabled", true},
          {"perception_kernel", 7},
          {"aggregate_kernel", 3},
          {"groups", 4},
          {"embed_ratio", 0.25}}},
        {"transformer",
         {{"d_model", 64},
          {"heads", 4},
          {"encoder_layers", 6},
          {"decoder_layers", 6},
          {"ffn_ratio", 4.0},
          {"num_queries", 300},
          {"temperature", 20.0},
          {"interaction", "dfi"},
          {"dfi_iterative", false}}},
        {"loss",
         {{"lambda_cls", 2.0},
          {"lambda_l1", 5.0},
          {"lambda_giou", 2.0},
          {"focal_alpha", 0.25},
          {"focal_gamma", 2.0},
          {"aux_losses", true}}},
        {"train",
         {{"lr", 1e-4},
          {"weight_decay", 1e-4},
          {"epochs", 50},
          {"batch_size", 2},
          {"grad_clip", 0.1},
          {"lr_drop_epoch", 0},
          {"eval_every", 1}}},
    };
}

namespace detail {

inline void check_known_keys(const Json& given, const Json& schema, const std::string& path) {
    if (!given.is_object()) return;
    if (!schema.is_object())
        throw std::invalid_argument("config: unexpected object at " + (path.empty() ? "/" : path));
    for (auto it = given.begin(); it != given.end(); ++it) {
        const std::string p = path + "/" + it.key();
        if (!schema.contains(it.key()))
            throw std::invalid_argument("config: unknown key " + p);
        check_known_keys(it.value(), schema.at(it.key()), p);
    }
}

}  // namespace detail

// Defaults overlaid with the user document; unknown keys are rejected.
inline Json load_config_json(const Json& user) {
    Json cfg = default_config();
    detail::check_known_keys(user, cfg, "");
    cfg.merge_patch(user);
    return cfg;
}

inline Json load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("config: cannot open " + path);
    Json user;
    try {
        is >> user;
    } catch (const std::exception& e) {
        throw std::invalid_argument("config: parse error in " + path + ": " + e.what());
    }
    return load_config_json(user);
}

// Dotted-path override, e.g. "train.lr=3e-4" or "transformer.interaction=dfi".
// The value is parsed as JSON when possible and as a bare string otherwise.
inline void apply_override(Json& cfg, const std::string& expr) {
    const auto eq = expr.find('=');
    if (eq == std::string::npos)
        throw std::invalid_argument("--set expects key=value, got: " + expr);
    const std::string keypath = expr.substr(0, eq);
    const std::string raw = expr.substr(eq + 1);
    Json value;
    try {
        value = Json::parse(raw);
    } catch (...) {
        value = raw;
    }
    Json* node = &cfg;
    std::size_t pos = 0;
    while (true) {
        const auto dot = keypath.find('.', pos);
        const std::string key = keypath.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (!node->contains(key))
            throw std::invalid_argument("--set: unknown key " + keypath);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        pos = dot + 1;
    }
}

}  // namespace priordet
