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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rcd/autodiff.hpp"
#include "rcd/backbone.hpp"
#include "rcd/pipeline.hpp"
#include "rcd/random.hpp"
#include "rcd/tensor.hpp"

namespace rcd {

enum class ControlSource : std::uint8_t { user = 0, autotune = 1 };

/// Interpolation coefficients c_i, one per level.
struct ControlVector {
    std::vector<double> coeffs;
    ControlSource source = ControlSource::user;

    std::size_t size() const { return coeffs.size(); }
    double operator[](std::size_t i) const { return coeffs[i]; }

    static ControlVector one_hot(std::size_t levels, std::size_t i) {
        ControlVector c{std::vector<double>(levels, 0.0)};
        c.coeffs.at(i) = 1.0;
        return c;
    }
};

/// Single linear layer on the pooled raw output followed by a temperature
/// softmax. `weights` is levels x features, row-major.
struct AutoTuneHead {
    std::size_t levels = 0;
    std::size_t features = 0;
    std::vector<double> weights;
    std::vector<double> bias;
    double tau = 0.05;

    void validate() const {
        if (!(tau > 0.0)) throw ConfigurationError("AutoTune temperature must be positive");
        if (weights.size() != levels * features || bias.size() != levels)
            throw ConfigurationError("AutoTune head arrays have the wrong size");
    }

    std::size_t parameter_count() const { return weights.size() + bias.size(); }

    std::vector<double> flatten() const {
        std::vector<double> out(weights);
        out.insert(out.end(), bias.begin(), bias.end());
        return out;
    }

    void assign(std::span<const double> flat) {
        if (flat.size() != parameter_count()) throw ConfigurationError("AutoTune parameter vector has the wrong length");
        std::copy_n(flat.begin(), weights.size(), weights.begin());
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(weights.size()), flat.end(), bias.begin());
    }

    friend bool operator==(const AutoTuneHead&, const AutoTuneHead&) = default;
};

inline AutoTuneHead make_autotune_head(std::size_t levels, std::size_t channels, std::uint64_t seed,
                                       double tau = 0.05) {
    AutoTuneHead head{levels, levels * channels, std::vector<double>(levels * levels * channels),
                      std::vector<double>(levels), tau};
    Rng rng(seed);
    const double s = 1.0 / std::sqrt(static_cast<double>(head.features));
    for (double& w : head.weights) w = rng.uniform(-s, s);
    for (double& b : head.bias) b = rng.uniform(-s, s);
    head.validate();
    return head;
}

// ---------------------------------------------------------------------------
// Editing

/// out = base + sum_i c_i * maps[i]. Works on 32-bit bundle storage as well
/// as 64-bit stacks; accumulation is always 64-bit.
template <typename T>
void interpolate(std::span<const T> base, std::span<const std::span<const T>> maps, std::span<const double> coeffs,
                 std::span<double> out) {
    if (maps.size() != coeffs.size())
        throw ConfigurationError("control vector has length " + std::to_string(coeffs.size()) + ", expected " +
                                 std::to_string(maps.size()));
    if (out.size() != base.size()) throw ConfigurationError("output buffer has the wrong size");
    for (std::size_t p = 0; p < base.size(); ++p) out[p] = static_cast<double>(base[p]);
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const double c = coeffs[i];
        if (c == 0.0) continue;
        const std::span<const T> m = maps[i];
        if (m.size() != base.size()) throw ConfigurationError("noise map size does not match the base image");
        for (std::size_t p = 0; p < base.size(); ++p) out[p] += c * static_cast<double>(m[p]);
    }
}

/// I_c = I_n + sum_i c_i N~_i. No clamping; see `clamp_for_display`.
inline ImageTensor edit(const ImageTensor& noisy, const NoiseMapStack& stack, const ControlVector& c) {
    if (c.size() != stack.levels())
        throw ConfigurationError("control vector has length " + std::to_string(c.size()) + ", expected " +
                                 std::to_string(stack.levels()));
    std::vector<std::span<const double>> maps;
    for (const auto& m : stack.maps) {
        require_same_shape(noisy, m, "edit");
        maps.push_back(m.values());
    }
    ImageTensor out(noisy.height(), noisy.width(), noisy.channels());
    interpolate<double>(noisy.values(), maps, c.coeffs, out.values());
    return out;
}

inline ImageTensor clamp_for_display(ImageTensor image) {
    for (double& v : image.data()) v = std::clamp(v, 0.0, 1.0);
    return image;
}

// ---------------------------------------------------------------------------
// Intensity arithmetic

/// sqrt(sum_i c_i^2 l_i^2), in the schedule's units.
inline double intensity(std::span<const double> c, const LevelSchedule& schedule) {
    if (c.size() != schedule.size())
        throw ConfigurationError("control vector has length " + std::to_string(c.size()) + ", expected " +
                                 std::to_string(schedule.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * c[i] * schedule[i] * schedule[i];
    return std::sqrt(s);
}

inline double intensity(const ControlVector& c, const LevelSchedule& schedule) {
    return intensity(c.coeffs, schedule);
}

/// Scales c uniformly so that its intensity equals `target`.
inline ControlVector rescale_to_intensity(const ControlVector& c, const LevelSchedule& schedule, double target) {
    if (!(target >= 0.0)) throw ConfigurationError("target intensity must be non-negative");
    const double current = intensity(c, schedule);
    ControlVector out{c.coeffs, ControlSource::user};
    if (target == 0.0) {
        std::fill(out.coeffs.begin(), out.coeffs.end(), 0.0);
        return out;
    }
    if (!(current > 0.0))
        throw UnderdeterminedError("control vector has zero intensity; a direction is needed to reach the target");
    const double k = target / current;
    for (double& v : out.coeffs) v *= k;
    return out;
}

/// Largest |delta| for moving weight onto component i while j compensates,
/// in the direction of `delta`.
inline double max_feasible_step(const ControlVector& c, const LevelSchedule& schedule, std::size_t i, std::size_t j,
                                double delta) {
    const double ratio = schedule[j] / schedule[i];
    const double radius = std::sqrt(c[i] * c[i] + c[j] * c[j] * ratio * ratio);
    return delta >= 0.0 ? radius - c[i] : -radius - c[i];
}

/// c_i += delta, with c_j re-solved (keeping its sign) so that
/// sum_k c_k^2 l_k^2 is unchanged.
inline ControlVector component_step(const ControlVector& c, const LevelSchedule& schedule, std::size_t i,
                                    std::size_t j, double delta) {
    if (c.size() != schedule.size()) throw ConfigurationError("control vector length does not match the schedule");
    if (i >= c.size() || j >= c.size()) throw ConfigurationError("component index out of range");
    if (i == j) throw ConfigurationError("component step needs two distinct indices");
    ControlVector out{c.coeffs, ControlSource::user};
    if (delta == 0.0) return out;
    const double li = schedule[i], lj = schedule[j];
    const double ci = c[i] + delta;
    const double energy_j = c[j] * c[j] * lj * lj + c[i] * c[i] * li * li - ci * ci * li * li;
    if (energy_j < 0.0) {
        const double limit = max_feasible_step(c, schedule, i, j, delta);
        throw BoundaryError("component step " + std::to_string(delta) + " is infeasible; max feasible step is " +
                                std::to_string(limit),
                            limit);
    }
    out.coeffs[i] = ci;
    const double cj = std::sqrt(energy_j) / lj;
    out.coeffs[j] = std::signbit(c[j]) ? -cj : cj;
    return out;
}

/// Default compensating index: the largest-magnitude coefficient other than i.
inline std::size_t default_compensator(const ControlVector& c, std::size_t i) {
    std::size_t best = i == 0 ? 1 : 0;
    for (std::size_t k = 0; k < c.size(); ++k)
        if (k != i && std::abs(c[k]) > std::abs(c[best])) best = k;
    return best;
}

// ---------------------------------------------------------------------------
// AutoTune

inline std::vector<double> pooled_features(const RawMultiOutput& raw) {
    const std::size_t total = raw.levels * raw.channels;
    const std::size_t pixels = raw.tensor.height() * raw.tensor.width();
    std::vector<double> f(total, 0.0);
    for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t k = 0; k < total; ++k) f[k] += raw.tensor[p * total + k];
    for (double& v : f) v /= static_cast<double>(pixels);
    return f;
}

inline std::vector<double> temperature_softmax(std::span<const double> scores, double tau) {
    for (double s : scores)
        if (!std::isfinite(s)) throw NumericError("AutoTune produced a non-finite score");
    const double mx = *std::max_element(scores.begin(), scores.end());
    std::vector<double> p(scores.size());
    double z = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) z += (p[i] = std::exp((scores[i] - mx) / tau));
    for (double& v : p) v /= z;
    return p;
}

/// c_bar = softmax(W pool(raw) + b, tau).
inline ControlVector autotune(const AutoTuneHead& head, const RawMultiOutput& raw) {
    head.validate();
    if (raw.levels * raw.channels != head.features || raw.levels != head.levels)
        throw ConfigurationError("AutoTune head expects " + std::to_string(head.features) + " features");
    const std::vector<double> f = pooled_features(raw);
    std::vector<double> scores(head.levels);
    for (std::size_t i = 0; i < head.levels; ++i) {
        double s = head.bias[i];
        for (std::size_t k = 0; k < head.features; ++k) s += head.weights[i * head.features + k] * f[k];
        scores[i] = s;
    }
    return {temperature_softmax(scores, head.tau), ControlSource::autotune};
}

struct AutoTuneVars {
    ad::Var weights;
    ad::Var bias;
};

/// Differentiable AutoTune on a raw output node laid out H*W x (L*C).
inline ad::Var autotune_on_tape(ad::Tape& tape, const AutoTuneHead& head, const AutoTuneVars& vars, ad::Var raw,
                                std::size_t pixels) {
    const ad::Var f = ad::global_avg_pool(tape, raw, pixels, head.features);
    const ad::Var scores = ad::linear(tape, vars.weights, f, vars.bias, head.levels, head.features);
    return ad::softmax(tape, scores, head.tau);
}

struct AutoTuneRecording {
    AutoTuneVars head;
    ad::Var raw;
    ad::Var output;
};

inline AutoTuneRecording record_autotune(ad::Tape& tape, const AutoTuneHead& head, const RawMultiOutput& raw) {
    head.validate();
    if (raw.levels * raw.channels != head.features) throw ConfigurationError("AutoTune head/raw size mismatch");
    AutoTuneRecording rec;
    rec.head = {tape.leaf(head.weights), tape.leaf(head.bias)};
    rec.raw = tape.leaf(raw.tensor.data());
    rec.output = autotune_on_tape(tape, head, rec.head, rec.raw, raw.tensor.height() * raw.tensor.width());
    return rec;
}

struct AutoTuneGradients {
    AutoTuneHead head;
    RawMultiOutput raw;
};

inline AutoTuneGradients autotune_backward(ad::Tape& tape, const AutoTuneRecording& rec, const AutoTuneHead& head,
                                           const RawMultiOutput& raw, std::span<const double> upstream) {
    if (!rec.output.valid() || rec.output.id >= tape.size())
        throw TapeCorruptionError("AutoTune output is not recorded on this tape");
    if (tape.size_of(rec.output) != upstream.size() || tape.size_of(rec.raw) != raw.tensor.size())
        throw TapeCorruptionError("AutoTune cotangent does not match the recording");
    tape.backward(rec.output, upstream);
    AutoTuneGradients g{head, raw};
    g.head.weights = tape.grad(rec.head.weights);
    g.head.bias = tape.grad(rec.head.bias);
    g.raw.tensor.data() = tape.grad(rec.raw);
    return g;
}

}  // namespace rcd
