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

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "rcd/autodiff.hpp"
#include "rcd/backbone.hpp"
#include "rcd/control.hpp"
#include "rcd/pipeline.hpp"
#include "rcd/random.hpp"
#include "rcd/tensor.hpp"

namespace rcd {

// ---------------------------------------------------------------------------
// Data

struct SyntheticSample {
    ImageTensor clean;
    ImageTensor noisy;
    double sigma = 0.0;
};

/// Piecewise-smooth test image: a linear gradient, a few flat rectangles and
/// soft-edged disks, all clamped to [0, 1].
inline ImageTensor synthetic_image(std::size_t height, std::size_t width, std::size_t channels,
                                   std::uint64_t seed) {
    Rng rng(seed);
    ImageTensor img(height, width, channels);
    const double h = static_cast<double>(height), w = static_cast<double>(width);
    std::vector<double> base(channels), gx(channels), gy(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        base[c] = rng.uniform(0.25, 0.75);
        gx[c] = rng.uniform(-0.3, 0.3);
        gy[c] = rng.uniform(-0.3, 0.3);
    }
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            for (std::size_t c = 0; c < channels; ++c)
                img(y, x, c) = base[c] + gx[c] * (static_cast<double>(x) / w - 0.5) +
                               gy[c] * (static_cast<double>(y) / h - 0.5);

    const int rects = 1 + static_cast<int>(rng.uniform() * 3.0);
    for (int r = 0; r < rects; ++r) {
        const double x0 = rng.uniform(0.0, w * 0.8), y0 = rng.uniform(0.0, h * 0.8);
        const double x1 = x0 + rng.uniform(w * 0.2, w * 0.6), y1 = y0 + rng.uniform(h * 0.2, h * 0.6);
        std::vector<double> value(channels);
        for (double& v : value) v = rng.uniform(0.05, 0.95);
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x)
                if (static_cast<double>(x) >= x0 && static_cast<double>(x) < x1 && static_cast<double>(y) >= y0 &&
                    static_cast<double>(y) < y1)
                    for (std::size_t c = 0; c < channels; ++c) img(y, x, c) = value[c];
    }

    const int disks = 1 + static_cast<int>(rng.uniform() * 2.0);
    for (int d = 0; d < disks; ++d) {
        const double cx = rng.uniform(0.0, w), cy = rng.uniform(0.0, h);
        const double radius = rng.uniform(0.15, 0.4) * std::min(w, h);
        const double softness = rng.uniform(0.5, 2.0);
        std::vector<double> value(channels);
        for (double& v : value) v = rng.uniform(0.05, 0.95);
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) {
                const double dist = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
                const double alpha = 1.0 / (1.0 + std::exp((dist - radius) / softness));
                for (std::size_t c = 0; c < channels; ++c)
                    img(y, x, c) = (1.0 - alpha) * img(y, x, c) + alpha * value[c];
            }
    }
    for (double& v : img.data()) v = std::clamp(v, 0.0, 1.0);
    return img;
}

/// noisy = clean + N(0, sigma^2) per element, seeded. sigma is a fraction of full scale.
inline SyntheticSample make_awgn_sample(const ImageTensor& clean, double sigma, std::uint64_t seed) {
    if (!(sigma >= 0.0)) throw ConfigurationError("noise sigma must be non-negative");
    SyntheticSample s{clean, clean, sigma};
    if (sigma == 0.0) return s;
    Rng rng(seed);
    for (double& v : s.noisy.data()) v += sigma * rng.normal();
    return s;
}

// ---------------------------------------------------------------------------
// Metrics and losses

inline double mse(const ImageTensor& a, const ImageTensor& b) {
    require_same_shape(a, b, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

/// 10 log10(1 / MSE) for peak 1; +infinity when the images are identical.
inline double psnr(const ImageTensor& a, const ImageTensor& b) {
    const double m = mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / m);
}

/// Mean over levels of MSE(gt, noisy + N~_i).
inline double level_loss(const ImageTensor& gt, const ImageTensor& noisy, const NoiseMapStack& stack) {
    require_same_shape(gt, noisy, "level_loss");
    if (stack.levels() == 0) throw ConfigurationError("level_loss of an empty stack");
    double total = 0.0;
    for (std::size_t i = 0; i < stack.levels(); ++i)
        total += mse(gt, edit(noisy, stack, ControlVector::one_hot(stack.levels(), i)));
    return total / static_cast<double>(stack.levels());
}

/// lambda * level_loss + MSE(gt, noisy + sum_i c_bar_i N~_i).
inline double total_loss(const ImageTensor& gt, const ImageTensor& noisy, const NoiseMapStack& stack,
                         const AutoTuneHead& head, const RawMultiOutput& raw, double lambda) {
    const ControlVector c = autotune(head, raw);
    return lambda * level_loss(gt, noisy, stack) + mse(gt, edit(noisy, stack, c));
}

/// Frobenius norm of the off-diagonal covariance of a stack: the noise level
/// collapse indicator. Zero for mutually uncorrelated maps.
inline double collapse_diagnostic(const NoiseMapStack& stack) {
    if (stack.levels() < 2) throw ConfigurationError("collapse_diagnostic needs at least two maps");
    return off_diagonal_frobenius(covariance(stack.to_flat()).data);
}

// ---------------------------------------------------------------------------
// Training

enum class LevelLossKind { mse, psnr };

struct TrainConfig {
    LevelSchedule schedule = LevelSchedule::from_255({15, 30, 45, 60});
    double lambda = 0.1;
    int iterations = 4;
    bool noise_decorrelation = true;
    LevelLossKind loss = LevelLossKind::mse;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double grad_clip = 1.0;  // global L2 norm; 0 disables
    int steps = 2000;
    std::size_t batch = 8;
    std::size_t patch = 16;
    std::size_t channels = 1;
    double sigma_min = 10.0 / 255.0;
    double sigma_max = 60.0 / 255.0;
    double tau = 0.05;
    std::size_t hidden = 8;
    std::size_t depth = 3;
    std::uint64_t seed = 1;
    int log_interval = 50;

    void validate() const {
        if (!(lambda >= 0.0)) throw ConfigurationError("lambda must be >= 0");
        if (!(learning_rate > 0.0)) throw ConfigurationError("learning rate must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigurationError("momentum must be in [0, 1)");
        if (!(sigma_min > 0.0) || !(sigma_max >= sigma_min) || sigma_max > schedule.max() * (1.0 + 1e-12))
            throw ConfigurationError("sigma range must lie within (0, max level]");
        if (iterations < 1) throw ConfigurationError("Newton iterations must be >= 1");
        if (steps < 0) throw ConfigurationError("step count must be >= 0");
        if (batch < 1 || patch < 2 || channels < 1) throw ConfigurationError("batch, patch and channels must be positive");
        if (!(tau > 0.0)) throw ConfigurationError("tau must be > 0");
        if (hidden < 1 || depth < 1) throw ConfigurationError("backbone needs hidden >= 1 and depth >= 1");
        if (log_interval < 1) throw ConfigurationError("log interval must be >= 1");
    }

    PipelineOptions pipeline() const {
        PipelineOptions p;
        p.decorrelate = noise_decorrelation;
        p.decorrelation.iterations = iterations;
        return p;
    }
};

/// Supplies the training sample for (step, index within batch).
using DataSource = std::function<SyntheticSample(int, std::size_t)>;

/// Fresh synthetic patch and AWGN level for every (step, index).
inline DataSource synthetic_source(const TrainConfig& cfg) {
    return [cfg](int step, std::size_t index) {
        const std::uint64_t key = mix_seed(cfg.seed, static_cast<std::uint64_t>(step) * 1024 + index);
        Rng rng(key);
        const double sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max);
        const ImageTensor clean = synthetic_image(cfg.patch, cfg.patch, cfg.channels, mix_seed(key, 1));
        return make_awgn_sample(clean, sigma, mix_seed(key, 2));
    };
}

struct LossNodes {
    ad::Var total;
    ad::Var level;
    ad::Var maps;  // L x M editable maps
    ad::Var raw;
};

/// Records L_total for one sample. Parameters come from `flat` laid out as
/// backbone.flatten() followed by head.flatten().
inline LossNodes record_total_loss(ad::Tape& tape, ad::Var flat, const BackboneParams& arch,
                                   const AutoTuneHead& head, const SyntheticSample& sample,
                                   const LevelSchedule& schedule, double lambda, const PipelineOptions& opt,
                                   LevelLossKind kind = LevelLossKind::mse, Diagnostics* diag = nullptr) {
    const std::size_t h = sample.noisy.height(), w = sample.noisy.width(), c = sample.noisy.channels();
    const std::size_t m = h * w * c;
    const std::size_t l = schedule.size();
    const BackboneVars bb = backbone_slices(tape, arch, flat);
    const std::size_t head_off = arch.parameter_count();
    const AutoTuneVars hv{ad::slice(tape, flat, head_off, head.weights.size()),
                          ad::slice(tape, flat, head_off + head.weights.size(), head.bias.size())};

    const ad::Var noisy = tape.constant(sample.noisy.data());
    const ad::Var gt = tape.constant(sample.clean.data());
    const ad::Var raw = backbone_on_tape(tape, arch, bb, noisy, h, w);
    const ad::Var maps = pipeline_on_tape(tape, raw, h * w, c, schedule, opt, diag);

    auto per_level = [&](ad::Var edited) {
        const ad::Var e = ad::mse(tape, edited, gt);
        if (kind == LevelLossKind::mse) return e;
        // 10 log10(MSE), i.e. negative PSNR.
        return ad::scale(tape, ad::log(tape, e), 10.0 / std::numbers::ln10);
    };

    std::vector<ad::Var> losses;
    for (std::size_t i = 0; i < l; ++i)
        losses.push_back(per_level(ad::add(tape, noisy, ad::slice(tape, maps, i * m, m))));
    const ad::Var level = ad::mean_of(tape, losses);

    const ad::Var cbar = autotune_on_tape(tape, head, hv, raw, h * w);
    const ad::Var mix = ad::matmul(tape, cbar, maps, 1, l, m);
    const ad::Var autotuned = ad::mse(tape, ad::add(tape, noisy, mix), gt);
    const ad::Var total = ad::add(tape, ad::scale(tape, level, lambda), autotuned);
    return {total, level, maps, raw};
}

struct TrainLogRecord {
    int step = 0;
    double total_loss = 0.0;
    double level_loss = 0.0;
    double collapse = 0.0;             // off-diagonal covariance norm of the editable maps
    double collapse_before_nd = 0.0;   // same, on the level-normalized maps before decorrelation
    double calibration_error = 0.0;    // max_i |sd(N~_i) - l_i| / l_i over the batch
    double wall_seconds = 0.0;
};

struct TrainResult {
    BackboneParams backbone;
    AutoTuneHead head;
    std::vector<TrainLogRecord> log;
};

using LogCallback = std::function<void(const TrainLogRecord&)>;

inline BackboneParams initial_backbone(const TrainConfig& cfg) {
    return make_tiny_backbone(cfg.channels, cfg.schedule.size(), mix_seed(cfg.seed, 0xb0),
                              TinyBackboneOptions{cfg.hidden, cfg.depth, 3});
}

inline AutoTuneHead initial_head(const TrainConfig& cfg) {
    // Small weights so the initial tempered softmax is not saturated.
    AutoTuneHead head = make_autotune_head(cfg.schedule.size(), cfg.channels, mix_seed(cfg.seed, 0xa7), cfg.tau);
    for (double& w : head.weights) w *= cfg.tau;
    for (double& b : head.bias) b *= cfg.tau;
    return head;
}

namespace detail {

inline NoiseMapStack stack_from_rows(const std::vector<double>& rows, std::size_t h, std::size_t w, std::size_t c,
                                     const LevelSchedule& schedule) {
    NoiseMapStack s{{}, schedule, false};
    const std::size_t m = h * w * c;
    for (std::size_t i = 0; i < schedule.size(); ++i)
        s.maps.emplace_back(h, w, c,
                            std::vector<double>(rows.begin() + static_cast<std::ptrdiff_t>(i * m),
                                                rows.begin() + static_cast<std::ptrdiff_t>((i + 1) * m)));
    return s;
}

}  // namespace detail

/// Momentum SGD on the mean batch L_total. Deterministic for a given config
/// and data source.
inline TrainResult train(const TrainConfig& cfg, const DataSource& data = {}, const LogCallback& on_log = {}) {
    cfg.validate();
    const DataSource source = data ? data : synthetic_source(cfg);
    TrainResult result{initial_backbone(cfg), initial_head(cfg), {}};
    const PipelineOptions popt = cfg.pipeline();
    const std::size_t l = cfg.schedule.size();

    std::vector<double> params = result.backbone.flatten();
    const std::vector<double> head_flat = result.head.flatten();
    params.insert(params.end(), head_flat.begin(), head_flat.end());
    std::vector<double> velocity(params.size(), 0.0);
    const auto start = std::chrono::steady_clock::now();

    for (int step = 0; step < cfg.steps; ++step) {
        ad::Tape tape;
        const ad::Var flat = tape.leaf(params);
        std::vector<ad::Var> totals, levels;
        std::vector<LossNodes> nodes;
        std::vector<SyntheticSample> samples;
        try {
            for (std::size_t b = 0; b < cfg.batch; ++b) {
                samples.push_back(source(step, b));
                Diagnostics diag;
                nodes.push_back(record_total_loss(tape, flat, result.backbone, result.head, samples.back(),
                                                  cfg.schedule, cfg.lambda, popt, cfg.loss, &diag));
                totals.push_back(nodes.back().total);
                levels.push_back(nodes.back().level);
            }
        } catch (const NumericError& e) {
            throw DivergenceError("forward pass broke down at step " + std::to_string(step) + ": " + e.what(), step);
        }
        const ad::Var loss = ad::mean_of(tape, totals);
        const double loss_value = tape.scalar(loss);
        if (!std::isfinite(loss_value))
            throw DivergenceError("training loss is not finite at step " + std::to_string(step), step);
        tape.backward(loss);
        std::vector<double> grad = tape.grad(flat);

        double norm = 0.0;
        for (double g : grad) norm += g * g;
        norm = std::sqrt(norm);
        if (!std::isfinite(norm))
            throw DivergenceError("gradient is not finite at step " + std::to_string(step), step);
        const double clip = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

        const bool log_now = step % cfg.log_interval == 0 || step + 1 == cfg.steps;
        if (log_now) {
            TrainLogRecord rec;
            rec.step = step;
            rec.total_loss = loss_value;
            double level_sum = 0.0;
            for (ad::Var v : levels) level_sum += tape.scalar(v);
            rec.level_loss = level_sum / static_cast<double>(levels.size());
            for (std::size_t b = 0; b < cfg.batch; ++b) {
                const auto& s = samples[b];
                const NoiseMapStack editable = detail::stack_from_rows(
                    tape.value(nodes[b].maps), s.noisy.height(), s.noisy.width(), s.noisy.channels(), cfg.schedule);
                rec.collapse += collapse_diagnostic(editable) / static_cast<double>(cfg.batch);
                const RawMultiOutput raw{ImageTensor(s.noisy.height(), s.noisy.width(), l * s.noisy.channels(),
                                                     tape.value(nodes[b].raw)),
                                         l, s.noisy.channels()};
                Diagnostics quiet;
                rec.collapse_before_nd +=
                    collapse_diagnostic(normalize_to_levels(raw, cfg.schedule, popt.decorrelation.normalize, &quiet)) /
                    static_cast<double>(cfg.batch);
                for (std::size_t i = 0; i < l; ++i)
                    rec.calibration_error = std::max(
                        rec.calibration_error, std::abs(sd(editable.maps[i]) - cfg.schedule[i]) / cfg.schedule[i]);
            }
            rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            result.log.push_back(rec);
            if (on_log) on_log(rec);
        }

        for (std::size_t k = 0; k < params.size(); ++k) {
            velocity[k] = cfg.momentum * velocity[k] + grad[k] * clip;
            params[k] -= cfg.learning_rate * velocity[k];
        }
    }

    const std::size_t nb = result.backbone.parameter_count();
    result.backbone.assign(std::span<const double>(params.data(), nb));
    result.head.assign(std::span<const double>(params.data() + nb, params.size() - nb));
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
    double noisy_psnr = 0.0;
    double autotune_psnr = 0.0;
    double autotune_intensity = 0.0;  // mean analytic intensity of c_bar, fraction units
};

/// Mean PSNR over `count` held-out synthetic patches at noise level `sigma`.
inline EvalReport evaluate_autotune(const BackboneParams& backbone, const AutoTuneHead& head,
                                    const LevelSchedule& schedule, const PipelineOptions& opt, double sigma,
                                    std::size_t count, std::size_t patch, std::size_t channels, std::uint64_t seed) {
    EvalReport r;
    for (std::size_t k = 0; k < count; ++k) {
        const ImageTensor clean = synthetic_image(patch, patch, channels, mix_seed(seed, 2 * k));
        const SyntheticSample s = make_awgn_sample(clean, sigma, mix_seed(seed, 2 * k + 1));
        const RawMultiOutput raw = tiny_backbone_forward(backbone, s.noisy);
        Diagnostics quiet;
        const NoiseMapStack stack = pipeline_from_raw(raw, schedule, opt, &quiet);
        const ControlVector c = autotune(head, raw);
        r.noisy_psnr += psnr(s.noisy, s.clean) / static_cast<double>(count);
        r.autotune_psnr += psnr(edit(s.noisy, stack, c), s.clean) / static_cast<double>(count);
        r.autotune_intensity += intensity(c, schedule) / static_cast<double>(count);
    }
    return r;
}

/// Mean PSNR of the one-hot edit at `level_index` and of the noisy input, on
/// held-out patches whose noise level equals that level.
inline std::pair<double, double> evaluate_one_hot(const BackboneParams& backbone, const LevelSchedule& schedule,
                                                  const PipelineOptions& opt, std::size_t level_index,
                                                  std::size_t count, std::size_t patch, std::size_t channels,
                                                  std::uint64_t seed) {
    double edited = 0.0, noisy = 0.0;
    const double sigma = schedule[level_index];
    for (std::size_t k = 0; k < count; ++k) {
        const ImageTensor clean = synthetic_image(patch, patch, channels, mix_seed(seed, 2 * k));
        const SyntheticSample s = make_awgn_sample(clean, sigma, mix_seed(seed, 2 * k + 1));
        Diagnostics quiet;
        const NoiseMapStack stack = run_pipeline(backbone, s.noisy, schedule, opt, &quiet);
        edited += psnr(edit(s.noisy, stack, ControlVector::one_hot(schedule.size(), level_index)), s.clean);
        noisy += psnr(s.noisy, s.clean);
    }
    return {edited / static_cast<double>(count), noisy / static_cast<double>(count)};
}

}  // namespace rcd
