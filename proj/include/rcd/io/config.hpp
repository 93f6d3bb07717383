// Copyright 2026 The RCD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#pragma once

// JSON run configuration for `rcd train`. Levels and noise bounds are given
// on the [0, 255] scale; unknown keys are rejected so typos fail loudly.
//
//   {
//     "schedule": [15, 30, 45, 60], "lambda": 0.1, "iterations": 4,
//     "noise_decorrelation": true, "loss": "mse", "steps": 2000,
//     "learning_rate": 0.05, "momentum": 0.9, "grad_clip": 1.0,
//     "batch": 8, "patch": 16, "channels": 1, "sigma_min": 10, "sigma_max": 60,
//     "tau": 0.05, "hidden": 8, "depth": 3, "seed": 1, "log_interval": 50,
//     "checkpoint": "model.rcdw", "log": "train.jsonl",
//     "eval": {"sigma": 30, "count": 32, "seed": 7}
//   }

#include <cstdint>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "rcd/error.hpp"
#include "rcd/training.hpp"

namespace rcd::io {

struct EvalSettings {
    double sigma = 30.0 / 255.0;
    std::size_t count = 32;
    std::uint64_t seed = 7;
};

struct RunConfig {
    TrainConfig train;
    std::string checkpoint = "model.rcdw";
    std::string log = "train.jsonl";
    EvalSettings eval;
};

namespace detail {

template <typename T>
T field(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigurationError(std::string("config field '") + key + "' has the wrong type");
    }
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    for (const auto& [key, _] : j.items())
        if (!known.contains(key)) throw ConfigurationError("unknown config key '" + key + "'" + where);
}

}  // namespace detail

inline RunConfig parse_run_config(std::string_view text) {
    const nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigurationError("config is not valid JSON");
    if (!j.is_object()) throw ConfigurationError("config must be a JSON object");
    detail::reject_unknown(j,
                           {"schedule", "lambda", "iterations", "noise_decorrelation", "loss", "steps", "learning_rate",
                            "momentum", "grad_clip", "batch", "patch", "channels", "sigma_min", "sigma_max", "tau",
                            "hidden", "depth", "seed", "log_interval", "checkpoint", "log", "eval"},
                           "");
    using detail::field;
    RunConfig rc;
    TrainConfig& t = rc.train;
    if (j.contains("schedule")) t.schedule = LevelSchedule::from_255(field<std::vector<double>>(j, "schedule", {}));
    t.lambda = field(j, "lambda", t.lambda);
    t.iterations = field(j, "iterations", t.iterations);
    t.noise_decorrelation = field(j, "noise_decorrelation", t.noise_decorrelation);
    const std::string loss = field<std::string>(j, "loss", "mse");
    if (loss == "mse") t.loss = LevelLossKind::mse;
    else if (loss == "psnr") t.loss = LevelLossKind::psnr;
    else throw ConfigurationError("loss must be \"mse\" or \"psnr\"");
    t.steps = field(j, "steps", t.steps);
    t.learning_rate = field(j, "learning_rate", t.learning_rate);
    t.momentum = field(j, "momentum", t.momentum);
    t.grad_clip = field(j, "grad_clip", t.grad_clip);
    t.batch = field(j, "batch", t.batch);
    t.patch = field(j, "patch", t.patch);
    t.channels = field(j, "channels", t.channels);
    t.sigma_min = field(j, "sigma_min", t.sigma_min * 255.0) / 255.0;
    t.sigma_max = field(j, "sigma_max", t.sigma_max * 255.0) / 255.0;
    t.tau = field(j, "tau", t.tau);
    t.hidden = field(j, "hidden", t.hidden);
    t.depth = field(j, "depth", t.depth);
    t.seed = field(j, "seed", t.seed);
    t.log_interval = field(j, "log_interval", t.log_interval);
    rc.checkpoint = field(j, "checkpoint", rc.checkpoint);
    rc.log = field(j, "log", rc.log);
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        if (!e.is_object()) throw ConfigurationError("config field 'eval' must be an object");
        detail::reject_unknown(e, {"sigma", "count", "seed"}, " in 'eval'");
        rc.eval.sigma = field(e, "sigma", rc.eval.sigma * 255.0) / 255.0;
        rc.eval.count = field(e, "count", rc.eval.count);
        rc.eval.seed = field(e, "seed", rc.eval.seed);
    }
    t.validate();
    if (rc.eval.count == 0 || !(rc.eval.sigma > 0.0)) throw ConfigurationError("eval needs count >= 1 and sigma > 0");
    return rc;
}

/// RCD_SEED, when set, replaces the configured seed.
inline void apply_seed_override(RunConfig& rc, const char* env_value) {
    if (!env_value) return;
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(env_value, &used);
        if (used != std::string_view(env_value).size()) throw std::invalid_argument("trailing characters");
        rc.train.seed = v;
    } catch (const std::exception&) {
        throw ConfigurationError(std::string("RCD_SEED is not an unsigned integer: ") + env_value);
    }
}

}  // namespace rcd::io
