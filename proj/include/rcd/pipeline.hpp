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

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rcd/autodiff.hpp"
#include "rcd/backbone.hpp"
#include "rcd/numerics.hpp"
#include "rcd/random.hpp"
#include "rcd/tensor.hpp"

namespace rcd {

/// Strictly increasing noise levels l_1 < ... < l_L, stored as fractions of
/// full scale (a level of 15 on the 0..255 convention is 15/255).
class LevelSchedule {
public:
    LevelSchedule() = default;

    explicit LevelSchedule(std::vector<double> fractions) : levels_(std::move(fractions)) { validate(); }

    static LevelSchedule from_255(const std::vector<double>& levels) {
        std::vector<double> f;
        for (double l : levels) f.push_back(l / 255.0);
        return LevelSchedule(std::move(f));
    }

    /// l_i = 5 i for i = 1..count, on the 0..255 convention.
    static LevelSchedule uniform_steps(std::size_t count, double step_255 = 5.0) {
        std::vector<double> l;
        for (std::size_t i = 1; i <= count; ++i) l.push_back(step_255 * static_cast<double>(i));
        return from_255(l);
    }

    std::size_t size() const { return levels_.size(); }
    double operator[](std::size_t i) const { return levels_[i]; }
    double level_255(std::size_t i) const { return levels_[i] * 255.0; }
    const std::vector<double>& fractions() const { return levels_; }
    double max() const { return levels_.back(); }

    std::vector<double> values_255() const {
        std::vector<double> out;
        for (double l : levels_) out.push_back(l * 255.0);
        return out;
    }

    friend bool operator==(const LevelSchedule&, const LevelSchedule&) = default;

private:
    void validate() const {
        if (levels_.empty()) throw ConfigurationError("level schedule is empty");
        for (std::size_t i = 0; i < levels_.size(); ++i) {
            if (!(levels_[i] > 0.0) || !std::isfinite(levels_[i]))
                throw ConfigurationError("levels must be positive and finite");
            if (i > 0 && !(levels_[i] > levels_[i - 1]))
                throw ConfigurationError("levels must be strictly increasing");
        }
    }

    std::vector<double> levels_;
};

/// L noise maps with their schedule.
struct NoiseMapStack {
    std::vector<ImageTensor> maps;
    LevelSchedule schedule;
    bool decorrelated = false;

    std::size_t levels() const { return maps.size(); }

    FlatStack to_flat() const {
        if (maps.empty()) throw ConfigurationError("empty noise map stack");
        RowMatrix rows(static_cast<Eigen::Index>(maps.size()), static_cast<Eigen::Index>(maps.front().size()));
        for (std::size_t i = 0; i < maps.size(); ++i) {
            if (!maps[i].same_shape(maps.front())) throw ConfigurationError("noise maps differ in shape");
            for (std::size_t j = 0; j < maps[i].size(); ++j)
                rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = maps[i][j];
        }
        return FlatStack(std::move(rows));
    }
};

/// Standard deviation over all elements, mean-subtracted, denominator M - 1.
inline double sd(std::span<const double> values) {
    const std::size_t m = values.size();
    if (m < 2) throw DegenerateInputError("sd needs at least 2 elements");
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(m);
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / static_cast<double>(m - 1));
}

inline double sd(const ImageTensor& map) { return sd(map.values()); }

struct NormalizeOptions {
    double min_sd = 1e-8;
    std::uint64_t fallback_seed = 0x5eed;
};

/// Seeded white noise with sample sd exactly `level`; stands in for a
/// degenerate (constant) map.
inline std::vector<double> white_noise_at_level(std::size_t count, double level, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(count);
    for (double& x : v) x = rng.normal();
    const double s = sd(v);
    for (double& x : v) x *= level / s;
    return v;
}

/// N_i = l_i * raw_i / sd(raw_i).
inline NoiseMapStack normalize_to_levels(const RawMultiOutput& raw, const LevelSchedule& schedule,
                                         const NormalizeOptions& opt = {}, Diagnostics* diag = nullptr) {
    if (raw.levels != schedule.size())
        throw ConfigurationError("raw output has " + std::to_string(raw.levels) + " levels, schedule has " +
                                 std::to_string(schedule.size()));
    NoiseMapStack stack{{}, schedule, false};
    for (std::size_t i = 0; i < raw.levels; ++i) {
        ImageTensor map = raw.split(i);
        const double s = sd(map);
        if (!(s > opt.min_sd)) {
            warn(diag, "level " + std::to_string(i + 1) + " map is degenerate (sd " + std::to_string(s) +
                           "); substituting seeded white noise");
            map.data() = white_noise_at_level(map.size(), schedule[i], mix_seed(opt.fallback_seed, i));
        } else {
            for (double& v : map.data()) v *= schedule[i] / s;
        }
        stack.maps.push_back(std::move(map));
    }
    return stack;
}

enum class Whitening { newton, eigen };

struct DecorrelateOptions {
    Whitening method = Whitening::newton;
    int iterations = 4;
    NormalizeOptions normalize{};
};

/// The whitening matrix that `decorrelate` applies, and how it was obtained.
struct WhiteningResult {
    Eigen::MatrixXd matrix;
    bool fell_back_to_eigen = false;
    bool identity = false;
    std::optional<double> near_zero_eigenvalue;
};

/// Inverse square root of the trace-normalized covariance of `flat`.
inline WhiteningResult whitening_matrix(const FlatStack& flat, const DecorrelateOptions& opt,
                                        Diagnostics* diag = nullptr) {
    const Eigen::Index l = flat.rows();
    const CovarianceMatrix sigma = covariance(flat);
    WhiteningResult result;
    if (!(sigma.trace() > 0.0)) {
        warn(diag, "all-zero noise stack; using identity whitening");
        result.matrix = Eigen::MatrixXd::Identity(l, l);
        result.identity = true;
        return result;
    }
    const CovarianceMatrix normalized = trace_normalize(sigma);
    const double smallest = smallest_eigenvalue(normalized.data);
    const bool singular = !(smallest > 1e-10);

    auto eigen_path = [&] {
        try {
            result.matrix = eigen_inv_sqrt_oracle(normalized).data;
        } catch (const SingularityError& e) {
            result.near_zero_eigenvalue = e.eigenvalue();
            std::ostringstream msg;
            msg << "near-zero covariance eigenvalue " << e.eigenvalue()
                << " (noise level collapse); clamping before inversion";
            warn(diag, msg.str());
            result.matrix = eigen_inv_sqrt_clamped(normalized, 1e-10).data;
        }
    };

    if (opt.method == Whitening::eigen) {
        eigen_path();
        return result;
    }
    if (singular) {
        warn(diag, "covariance is singular; Newton-Schulz cannot whiten it, falling back to the eigen path");
        result.fell_back_to_eigen = true;
        eigen_path();
        return result;
    }
    try {
        result.matrix = newton_schulz_inv_sqrt(normalized, opt.iterations).data;
    } catch (const DivergenceError& e) {
        warn(diag, std::string(e.what()) + "; falling back to the eigen path");
        result.fell_back_to_eigen = true;
        eigen_path();
    }
    return result;
}

/// Steps (a)-(e): whiten the centered rows and restore the row means. The
/// result is not yet re-normalized to the schedule.
inline FlatStack whiten(const FlatStack& flat, const DecorrelateOptions& opt, Diagnostics* diag = nullptr,
                        WhiteningResult* info = nullptr) {
    WhiteningResult w = whitening_matrix(flat, opt, diag);
    RowMatrix out = w.matrix * flat.centered();
    out.colwise() += flat.row_means;
    if (info) *info = std::move(w);
    return FlatStack(std::move(out));
}

inline NoiseMapStack stack_from_flat(const FlatStack& flat, const NoiseMapStack& like) {
    NoiseMapStack out{{}, like.schedule, like.decorrelated};
    const ImageTensor& shape = like.maps.front();
    for (Eigen::Index i = 0; i < flat.rows(); ++i) {
        std::vector<double> v(flat.data.row(i).begin(), flat.data.row(i).end());
        out.maps.emplace_back(shape.height(), shape.width(), shape.channels(), std::move(v));
    }
    return out;
}

/// Re-applies the level normalization to maps that are already split.
inline NoiseMapStack renormalize(NoiseMapStack stack, const NormalizeOptions& opt = {}, Diagnostics* diag = nullptr) {
    for (std::size_t i = 0; i < stack.maps.size(); ++i) {
        ImageTensor& map = stack.maps[i];
        const double s = sd(map);
        if (!(s > opt.min_sd)) {
            warn(diag, "level " + std::to_string(i + 1) + " map is degenerate after whitening");
            map.data() = white_noise_at_level(map.size(), stack.schedule[i], mix_seed(opt.fallback_seed, i));
        } else {
            for (double& v : map.data()) v *= stack.schedule[i] / s;
        }
    }
    return stack;
}

/// Noise decorrelation: whiten the stacked maps with Sigma^{-1/2} of the
/// trace-normalized covariance, then re-normalize each map to its level.
inline NoiseMapStack decorrelate(const NoiseMapStack& stack, const DecorrelateOptions& opt = {},
                                 Diagnostics* diag = nullptr, WhiteningResult* info = nullptr) {
    if (stack.maps.size() != stack.schedule.size())
        throw ConfigurationError("stack has " + std::to_string(stack.maps.size()) + " maps for " +
                                 std::to_string(stack.schedule.size()) + " levels");
    if (stack.maps.size() == 1) {
        NoiseMapStack out = stack;
        out.decorrelated = true;
        return out;
    }
    const FlatStack white = whiten(stack.to_flat(), opt, diag, info);
    NoiseMapStack out = stack_from_flat(white, stack);
    out.decorrelated = true;
    return renormalize(std::move(out), opt.normalize, diag);
}

struct PipelineOptions {
    bool decorrelate = true;
    DecorrelateOptions decorrelation{};
};

/// Raw generator output -> level-calibrated, decorrelated maps.
inline NoiseMapStack pipeline_from_raw(const RawMultiOutput& raw, const LevelSchedule& schedule,
                                       const PipelineOptions& opt = {}, Diagnostics* diag = nullptr) {
    NoiseMapStack stack = normalize_to_levels(raw, schedule, opt.decorrelation.normalize, diag);
    if (!opt.decorrelate) return stack;
    return decorrelate(stack, opt.decorrelation, diag);
}

inline NoiseMapStack run_pipeline(const BackboneParams& params, const ImageTensor& image,
                                  const LevelSchedule& schedule, const PipelineOptions& opt = {},
                                  Diagnostics* diag = nullptr) {
    if (params.levels != schedule.size())
        throw ConfigurationError("backbone emits " + std::to_string(params.levels) + " levels, schedule has " +
                                 std::to_string(schedule.size()));
    return pipeline_from_raw(tiny_backbone_forward(params, image), schedule, opt, diag);
}

/// Differentiable version of `pipeline_from_raw`. `raw` is an H*W x (L*C)
/// node; the result is an L x (H*W*C) node whose rows are the editable maps.
/// Degenerate maps are replaced by constant seeded noise (no gradient).
inline ad::Var pipeline_on_tape(ad::Tape& tape, ad::Var raw, std::size_t pixels, std::size_t channels,
                                const LevelSchedule& schedule, const PipelineOptions& opt = {},
                                Diagnostics* diag = nullptr) {
    const std::size_t l = schedule.size();
    const std::size_t m = pixels * channels;
    auto normalize_rows = [&](const std::vector<ad::Var>& maps) {
        std::vector<ad::Var> out;
        for (std::size_t i = 0; i < l; ++i) {
            const double s = sd(tape.value(maps[i]));
            if (!(s > opt.decorrelation.normalize.min_sd)) {
                warn(diag, "level " + std::to_string(i + 1) + " map is degenerate; substituting seeded white noise");
                out.push_back(tape.constant(
                    white_noise_at_level(m, schedule[i], mix_seed(opt.decorrelation.normalize.fallback_seed, i))));
            } else {
                out.push_back(ad::sd_normalize(tape, maps[i], schedule[i]));
            }
        }
        return out;
    };

    std::vector<ad::Var> maps;
    for (std::size_t i = 0; i < l; ++i)
        maps.push_back(ad::channel_slice(tape, raw, pixels, l * channels, i * channels, channels));
    maps = normalize_rows(maps);
    ad::Var stacked = ad::concat(tape, maps);
    if (!opt.decorrelate || l == 1) return stacked;

    const ad::Var cov = ad::covariance(tape, stacked, l, m);
    const ad::Var normalized = ad::trace_normalize(tape, cov, l);
    const ad::Var inv_sqrt = ad::newton_schulz(tape, normalized, l, opt.decorrelation.iterations);
    const ad::Var means = ad::row_means(tape, stacked, l, m);
    const ad::Var centered = ad::center_rows(tape, stacked, l, m);
    const ad::Var whitened = ad::add_row_broadcast(tape, ad::matmul(tape, inv_sqrt, centered, l, l, m), means, l, m);
    std::vector<ad::Var> rows;
    for (std::size_t i = 0; i < l; ++i) rows.push_back(ad::slice(tape, whitened, i * m, m));
    return ad::concat(tape, normalize_rows(rows));
}

}  // namespace rcd
