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

// RCDB v1 edit bundle, little-endian:
//
//   "RCDB"  u16 version (1)  u16 flags (bit 0: ground truth present)
//   u32 H  u32 W  u32 C  u32 L
//   f32 schedule[L]           levels as fractions of full scale
//   f32 autotune[L]           c_bar
//   f32 base[H*W*C]           noisy input, row-major, channel-last
//   f32 maps[L][H*W*C]        decorrelated, level-calibrated noise maps
//   f32 ground_truth[H*W*C]   only when flag bit 0 is set

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rcd/control.hpp"
#include "rcd/io/bytes.hpp"
#include "rcd/pipeline.hpp"
#include "rcd/tensor.hpp"

namespace rcd::io {

inline constexpr std::string_view kBundleMagic = "RCDB";
inline constexpr std::uint16_t kBundleVersion = 1;
inline constexpr double kBundleCalibrationTolerance = 1e-3;

struct EditBundle {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::uint32_t channels = 0;
    std::vector<float> schedule;
    std::vector<float> autotune;
    std::vector<float> base;
    std::vector<std::vector<float>> maps;
    std::optional<std::vector<float>> ground_truth;

    std::size_t levels() const { return schedule.size(); }
    std::size_t pixels() const { return static_cast<std::size_t>(height) * width * channels; }

    LevelSchedule level_schedule() const { return LevelSchedule(std::vector<double>(schedule.begin(), schedule.end())); }

    ControlVector autotune_vector() const {
        return {std::vector<double>(autotune.begin(), autotune.end()), ControlSource::autotune};
    }

    ImageTensor base_image() const {
        return {height, width, channels, std::vector<double>(base.begin(), base.end())};
    }

    std::optional<ImageTensor> ground_truth_image() const {
        if (!ground_truth) return std::nullopt;
        return ImageTensor(height, width, channels, std::vector<double>(ground_truth->begin(), ground_truth->end()));
    }

    NoiseMapStack stack() const {
        NoiseMapStack s{{}, level_schedule(), true};
        for (const auto& m : maps) s.maps.emplace_back(height, width, channels, std::vector<double>(m.begin(), m.end()));
        return s;
    }

    /// Max relative deviation of sd(map_i) from l_i.
    double calibration_error() const {
        double worst = 0.0;
        for (std::size_t i = 0; i < maps.size(); ++i) {
            const std::vector<double> v(maps[i].begin(), maps[i].end());
            worst = std::max(worst, std::abs(sd(v) - schedule[i]) / schedule[i]);
        }
        return worst;
    }

    friend bool operator==(const EditBundle&, const EditBundle&) = default;
};

template <typename T>
std::vector<float> to_f32(std::span<const T> v) {
    return std::vector<float>(v.begin(), v.end());
}

inline EditBundle make_bundle(const ImageTensor& noisy, const NoiseMapStack& stack, const ControlVector& cbar,
                              const std::optional<ImageTensor>& ground_truth = std::nullopt) {
    if (stack.levels() != stack.schedule.size() || cbar.size() != stack.levels())
        throw ConfigurationError("bundle parts disagree on the level count");
    EditBundle b;
    b.height = static_cast<std::uint32_t>(noisy.height());
    b.width = static_cast<std::uint32_t>(noisy.width());
    b.channels = static_cast<std::uint32_t>(noisy.channels());
    b.schedule = to_f32<double>(stack.schedule.fractions());
    b.autotune = to_f32<double>(cbar.coeffs);
    b.base = to_f32<double>(noisy.values());
    for (const auto& m : stack.maps) {
        require_same_shape(noisy, m, "bundle map");
        b.maps.push_back(to_f32<double>(m.values()));
    }
    if (ground_truth) {
        require_same_shape(noisy, *ground_truth, "bundle ground truth");
        b.ground_truth = to_f32<double>(ground_truth->values());
    }
    return b;
}

inline std::string encode_bundle(const EditBundle& b) {
    ByteWriter w;
    w.bytes(kBundleMagic);
    w.u16(kBundleVersion);
    w.u16(b.ground_truth ? 1 : 0);
    w.u32(b.height);
    w.u32(b.width);
    w.u32(b.channels);
    w.u32(static_cast<std::uint32_t>(b.levels()));
    w.f32s<float>(b.schedule);
    w.f32s<float>(b.autotune);
    w.f32s<float>(b.base);
    for (const auto& m : b.maps) w.f32s<float>(m);
    if (b.ground_truth) w.f32s<float>(*b.ground_truth);
    return w.take();
}

/// Parses and validates an RCDB v1 payload, including the level calibration
/// of the stored maps.
inline EditBundle decode_bundle(std::string_view data) {
    ByteReader r(data);
    if (r.bytes(4, "magic") != kBundleMagic) throw FormatError("not an RCDB bundle (bad magic)");
    const std::uint16_t version = r.u16("version");
    if (version != kBundleVersion) throw FormatError("unsupported RCDB version " + std::to_string(version));
    const std::uint16_t flags = r.u16("flags");
    EditBundle b;
    b.height = r.u32("header dimensions");
    b.width = r.u32("header dimensions");
    b.channels = r.u32("header dimensions");
    const std::uint32_t levels = r.u32("header dimensions");
    if (b.height == 0 || b.width == 0 || b.channels == 0 || levels == 0)
        throw FormatError("bundle header has a zero dimension");
    const std::size_t n = b.pixels();
    b.schedule = r.f32s(levels, "level schedule");
    b.autotune = r.f32s(levels, "autotune vector");
    b.base = r.f32s(n, "base image");
    for (std::uint32_t i = 0; i < levels; ++i) b.maps.push_back(r.f32s(n, "noise maps"));
    if (flags & 1u) b.ground_truth = r.f32s(n, "ground truth");
    if (r.remaining() != 0) throw FormatError("trailing bytes after bundle payload");

    try {
        (void)b.level_schedule();
    } catch (const ConfigurationError& e) {
        throw FormatError(std::string("bundle schedule is invalid: ") + e.what());
    }
    const double err = b.calibration_error();
    if (!(err <= kBundleCalibrationTolerance))
        throw FormatError("bundle maps violate level calibration (relative error " + std::to_string(err) + ")");
    return b;
}

/// base + sum_i c_i maps_i straight from 32-bit storage.
inline ImageTensor edit_bundle(const EditBundle& b, std::span<const double> coeffs) {
    std::vector<std::span<const float>> maps;
    for (const auto& m : b.maps) maps.emplace_back(m);
    ImageTensor out(b.height, b.width, b.channels);
    interpolate<float>(b.base, maps, coeffs, out.values());
    return out;
}

inline EditBundle load_bundle(const std::string& path) { return decode_bundle(read_file(path)); }
inline void save_bundle(const std::string& path, const EditBundle& b) { write_file(path, encode_bundle(b)); }

}  // namespace rcd::io
