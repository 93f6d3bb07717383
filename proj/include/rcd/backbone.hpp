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
#include <span>
#include <string>
#include <vector>

#include "rcd/autodiff.hpp"
#include "rcd/random.hpp"
#include "rcd/tensor.hpp"

namespace rcd {

enum class Activation : std::uint8_t { none = 0, tanh = 1 };

/// One stride-1 zero-padded convolution followed by a pointwise nonlinearity.
struct ConvLayer {
    std::size_t kernel = 3;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    Activation activation = Activation::none;
    std::vector<double> weights;  // [ky][kx][in][out]
    std::vector<double> bias;     // [out]

    std::size_t weight_count() const { return kernel * kernel * in_channels * out_channels; }
    ad::ConvShape shape(std::size_t h, std::size_t w) const { return {h, w, in_channels, out_channels, kernel}; }

    friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

/// Parameters of the generator. The last layer emits levels * channels maps.
/// Gradients use the same type.
struct BackboneParams {
    std::vector<ConvLayer> layers;
    std::size_t levels = 0;
    std::size_t image_channels = 0;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weights.size() + l.bias.size();
        return n;
    }

    /// Weights then bias, layer by layer.
    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(parameter_count());
        for (const auto& l : layers) {
            out.insert(out.end(), l.weights.begin(), l.weights.end());
            out.insert(out.end(), l.bias.begin(), l.bias.end());
        }
        return out;
    }

    void assign(std::span<const double> flat) {
        if (flat.size() != parameter_count()) throw ConfigurationError("parameter vector has the wrong length");
        std::size_t off = 0;
        for (auto& l : layers) {
            std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), l.weights.size(), l.weights.begin());
            off += l.weights.size();
            std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), l.bias.size(), l.bias.begin());
            off += l.bias.size();
        }
    }

    /// Same architecture, all parameters zero.
    BackboneParams zeros_like() const {
        BackboneParams z = *this;
        for (auto& l : z.layers) {
            std::fill(l.weights.begin(), l.weights.end(), 0.0);
            std::fill(l.bias.begin(), l.bias.end(), 0.0);
        }
        return z;
    }

    void validate() const {
        if (layers.empty()) throw ConfigurationError("backbone has no layers");
        if (levels < 1 || image_channels < 1) throw ConfigurationError("backbone needs levels >= 1 and channels >= 1");
        if (layers.front().in_channels != image_channels)
            throw ConfigurationError("first layer expects " + std::to_string(layers.front().in_channels) +
                                     " channels, backbone declares " + std::to_string(image_channels));
        if (layers.back().out_channels != levels * image_channels)
            throw ConfigurationError("final layer must emit L*C = " + std::to_string(levels * image_channels) +
                                     " channels, has " + std::to_string(layers.back().out_channels));
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.kernel % 2 == 0) throw ConfigurationError("kernel size must be odd");
            if (l.weights.size() != l.weight_count() || l.bias.size() != l.out_channels)
                throw ConfigurationError("layer " + std::to_string(i) + " parameter arrays have the wrong size");
            if (i > 0 && layers[i - 1].out_channels != l.in_channels)
                throw ConfigurationError("layer " + std::to_string(i) + " input channels do not chain");
            for (double v : l.weights)
                if (!std::isfinite(v)) throw ConfigurationError("non-finite backbone weight");
            for (double v : l.bias)
                if (!std::isfinite(v)) throw ConfigurationError("non-finite backbone bias");
        }
    }

    friend bool operator==(const BackboneParams&, const BackboneParams&) = default;
};

/// H x W x (L*C) generator output; map i is channels [i*C, (i+1)*C).
struct RawMultiOutput {
    ImageTensor tensor;
    std::size_t levels = 0;
    std::size_t channels = 0;

    ImageTensor split(std::size_t i) const {
        if (i >= levels) throw ConfigurationError("split index out of range");
        ImageTensor map(tensor.height(), tensor.width(), channels);
        const std::size_t total = levels * channels;
        const std::size_t pixels = tensor.height() * tensor.width();
        for (std::size_t p = 0; p < pixels; ++p)
            for (std::size_t c = 0; c < channels; ++c) map[p * channels + c] = tensor[p * total + i * channels + c];
        return map;
    }
};

/// Uniform init in [-s, s], s = fan_in^{-1/2}, for kernels and biases.
inline ConvLayer make_conv_layer(std::size_t in, std::size_t out, std::size_t kernel, Activation act, Rng& rng) {
    ConvLayer layer{kernel, in, out, act, std::vector<double>(kernel * kernel * in * out), std::vector<double>(out)};
    const double s = 1.0 / std::sqrt(static_cast<double>(kernel * kernel * in));
    for (double& w : layer.weights) w = rng.uniform(-s, s);
    for (double& b : layer.bias) b = rng.uniform(-s, s);
    return layer;
}

struct TinyBackboneOptions {
    std::size_t hidden = 8;
    std::size_t depth = 3;
    std::size_t kernel = 3;
};

/// conv-tanh, conv-tanh, ..., conv (linear) emitting L*C channels.
inline BackboneParams make_tiny_backbone(std::size_t image_channels, std::size_t levels, std::uint64_t seed,
                                         const TinyBackboneOptions& opt = {}) {
    if (opt.depth < 1) throw ConfigurationError("backbone depth must be >= 1");
    Rng rng(seed);
    BackboneParams p;
    p.levels = levels;
    p.image_channels = image_channels;
    std::size_t in = image_channels;
    for (std::size_t d = 0; d + 1 < opt.depth; ++d) {
        p.layers.push_back(make_conv_layer(in, opt.hidden, opt.kernel, Activation::tanh, rng));
        in = opt.hidden;
    }
    p.layers.push_back(make_conv_layer(in, levels * image_channels, opt.kernel, Activation::none, rng));
    p.validate();
    return p;
}

inline RawMultiOutput tiny_backbone_forward(const BackboneParams& params, const ImageTensor& image) {
    params.validate();
    if (image.channels() != params.image_channels)
        throw ConfigurationError("image has " + std::to_string(image.channels()) + " channels, backbone expects " +
                                 std::to_string(params.image_channels));
    const std::size_t h = image.height(), w = image.width();
    std::vector<double> x = image.data();
    for (const auto& layer : params.layers) {
        std::vector<double> y(h * w * layer.out_channels);
        ad::conv2d_forward(x, layer.weights, layer.bias, layer.shape(h, w), y);
        if (layer.activation == Activation::tanh)
            for (double& v : y) v = std::tanh(v);
        x = std::move(y);
    }
    return {ImageTensor(h, w, params.levels * params.image_channels, std::move(x)), params.levels,
            params.image_channels};
}

/// Parameter leaves of a backbone on a tape.
struct BackboneVars {
    std::vector<ad::Var> weights;
    std::vector<ad::Var> biases;
};

inline BackboneVars backbone_leaves(ad::Tape& tape, const BackboneParams& params) {
    BackboneVars v;
    for (const auto& l : params.layers) {
        v.weights.push_back(tape.leaf(l.weights));
        v.biases.push_back(tape.leaf(l.bias));
    }
    return v;
}

/// Forward pass on a tape using caller-provided parameter nodes (which may be
/// leaves or slices of a flat vector). Only the architecture is read from `arch`.
inline ad::Var backbone_on_tape(ad::Tape& tape, const BackboneParams& arch, const BackboneVars& vars, ad::Var image,
                                std::size_t height, std::size_t width) {
    if (vars.weights.size() != arch.layers.size() || vars.biases.size() != arch.layers.size())
        throw ConfigurationError("parameter nodes do not match the architecture");
    ad::Var x = image;
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
        const auto& l = arch.layers[i];
        x = ad::conv2d(tape, x, vars.weights[i], vars.biases[i], l.shape(height, width));
        if (l.activation == Activation::tanh) x = ad::tanh(tape, x);
    }
    return x;
}

/// Splits a flat parameter node into per-layer nodes (see BackboneParams::flatten).
inline BackboneVars backbone_slices(ad::Tape& tape, const BackboneParams& arch, ad::Var flat, std::size_t offset = 0) {
    BackboneVars v;
    for (const auto& l : arch.layers) {
        v.weights.push_back(ad::slice(tape, flat, offset, l.weights.size()));
        offset += l.weights.size();
        v.biases.push_back(ad::slice(tape, flat, offset, l.bias.size()));
        offset += l.bias.size();
    }
    return v;
}

/// A recorded forward pass, kept for the backward call.
struct BackboneRecording {
    BackboneVars params;
    ad::Var input;
    ad::Var output;
    std::size_t height = 0;
    std::size_t width = 0;
};

inline BackboneRecording record_tiny_backbone(ad::Tape& tape, const BackboneParams& params,
                                              const ImageTensor& image) {
    params.validate();
    if (image.channels() != params.image_channels) throw ConfigurationError("image channel count mismatch");
    BackboneRecording rec;
    rec.params = backbone_leaves(tape, params);
    rec.input = tape.constant(image.data());
    rec.output = backbone_on_tape(tape, params, rec.params, rec.input, image.height(), image.width());
    rec.height = image.height();
    rec.width = image.width();
    return rec;
}

/// Parameter gradients for an upstream cotangent on the raw output.
inline BackboneParams tiny_backbone_backward(ad::Tape& tape, const BackboneRecording& rec,
                                             const BackboneParams& arch, const RawMultiOutput& upstream) {
    if (!rec.output.valid() || rec.output.id >= tape.size())
        throw TapeCorruptionError("backbone output is not recorded on this tape");
    if (tape.size_of(rec.output) != upstream.tensor.size())
        throw TapeCorruptionError("upstream cotangent does not match the recorded output");
    if (rec.params.weights.size() != arch.layers.size())
        throw TapeCorruptionError("recording does not match the architecture");
    tape.backward(rec.output, upstream.tensor.values());
    BackboneParams grad = arch.zeros_like();
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
        grad.layers[i].weights = tape.grad(rec.params.weights[i]);
        grad.layers[i].bias = tape.grad(rec.params.biases[i]);
    }
    return grad;
}

struct OracleOptions {
    double perturbation = 0.0;
    std::uint64_t seed = 42;
};

/// Test double for the generator: every level slot holds the true residual
/// (clean - noisy) plus a seeded Gaussian perturbation of the given scale.
inline RawMultiOutput oracle_backbone(const ImageTensor& image, const ImageTensor& true_clean, std::size_t levels,
                                      const OracleOptions& opt = {}) {
    require_same_shape(image, true_clean, "oracle_backbone");
    if (levels < 1) throw ConfigurationError("oracle_backbone needs at least one level");
    const std::size_t c = image.channels();
    const std::size_t pixels = image.height() * image.width();
    ImageTensor out(image.height(), image.width(), levels * c);
    for (std::size_t i = 0; i < levels; ++i) {
        Rng rng(mix_seed(opt.seed, i));
        for (std::size_t p = 0; p < pixels; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double residual = true_clean[p * c + ch] - image[p * c + ch];
                const double noise = opt.perturbation == 0.0 ? 0.0 : opt.perturbation * rng.normal();
                out[p * levels * c + i * c + ch] = residual + noise;
            }
    }
    return {std::move(out), levels, c};
}

}  // namespace rcd
