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

// RCDW v1 checkpoint, little-endian:
//
//   "RCDW"  u16 version (1)  u16 layer count
//   per layer: u32 kernel  u32 in  u32 out  u32 activation
//              f32 weights[kernel*kernel*in*out]  f32 bias[out]
//   optional AutoTune section:
//   "RCDA"  u32 levels  u32 channels  f32 tau  u32 newton iterations
//           u32 flags (bit 0: noise decorrelation on)
//           f32 schedule[levels]  f32 weights[levels*levels*channels]  f32 bias[levels]

#include <cstdint>
#include <optional>
#include <string>

#include "rcd/backbone.hpp"
#include "rcd/control.hpp"
#include "rcd/io/bytes.hpp"
#include "rcd/pipeline.hpp"

namespace rcd::io {

inline constexpr std::string_view kCheckpointMagic = "RCDW";
inline constexpr std::string_view kHeadMagic = "RCDA";
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct ModelSection {
    AutoTuneHead head;
    LevelSchedule schedule;
    int iterations = 4;
    bool noise_decorrelation = true;

    friend bool operator==(const ModelSection&, const ModelSection&) = default;
};

struct Checkpoint {
    BackboneParams backbone;
    std::optional<ModelSection> model;

    PipelineOptions pipeline() const {
        PipelineOptions p;
        if (model) {
            p.decorrelate = model->noise_decorrelation;
            p.decorrelation.iterations = model->iterations;
        }
        return p;
    }

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
    ck.backbone.validate();
    ByteWriter w;
    w.bytes(kCheckpointMagic);
    w.u16(kCheckpointVersion);
    w.u16(static_cast<std::uint16_t>(ck.backbone.layers.size()));
    for (const auto& l : ck.backbone.layers) {
        w.u32(static_cast<std::uint32_t>(l.kernel));
        w.u32(static_cast<std::uint32_t>(l.in_channels));
        w.u32(static_cast<std::uint32_t>(l.out_channels));
        w.u32(static_cast<std::uint32_t>(l.activation));
        w.f32s<double>(l.weights);
        w.f32s<double>(l.bias);
    }
    if (ck.model) {
        const auto& m = *ck.model;
        m.head.validate();
        w.bytes(kHeadMagic);
        w.u32(static_cast<std::uint32_t>(m.head.levels));
        w.u32(static_cast<std::uint32_t>(m.head.features / m.head.levels));
        w.f32(static_cast<float>(m.head.tau));
        w.u32(static_cast<std::uint32_t>(m.iterations));
        w.u32(m.noise_decorrelation ? 1u : 0u);
        w.f32s<double>(m.schedule.fractions());
        w.f32s<double>(m.head.weights);
        w.f32s<double>(m.head.bias);
    }
    return w.take();
}

namespace detail {
inline std::vector<double> widen(const std::vector<float>& v) { return {v.begin(), v.end()}; }
}  // namespace detail

inline Checkpoint decode_checkpoint(std::string_view data) {
    ByteReader r(data);
    if (r.bytes(4, "magic") != kCheckpointMagic) throw FormatError("not an RCDW checkpoint (bad magic)");
    const std::uint16_t version = r.u16("version");
    if (version != kCheckpointVersion) throw FormatError("unsupported RCDW version " + std::to_string(version));
    const std::uint16_t count = r.u16("layer count");
    if (count == 0) throw FormatError("checkpoint has no layers");
    Checkpoint ck;
    for (std::uint16_t i = 0; i < count; ++i) {
        ConvLayer l;
        l.kernel = r.u32("layer dims");
        l.in_channels = r.u32("layer dims");
        l.out_channels = r.u32("layer dims");
        const std::uint32_t act = r.u32("layer dims");
        if (act > 1) throw FormatError("unknown activation " + std::to_string(act));
        l.activation = static_cast<Activation>(act);
        if (l.kernel == 0 || l.in_channels == 0 || l.out_channels == 0 || l.weight_count() > (1u << 28))
            throw FormatError("implausible layer dimensions");
        l.weights = detail::widen(r.f32s(l.weight_count(), "layer weights"));
        l.bias = detail::widen(r.f32s(l.out_channels, "layer bias"));
        ck.backbone.layers.push_back(std::move(l));
    }
    ck.backbone.image_channels = ck.backbone.layers.front().in_channels;
    const std::size_t out = ck.backbone.layers.back().out_channels;

    if (r.remaining() == 0) {
        ck.backbone.levels = out / ck.backbone.image_channels;
    } else {
        if (r.bytes(4, "AutoTune section magic") != kHeadMagic) throw FormatError("bad AutoTune section magic");
        ModelSection m;
        const std::uint32_t levels = r.u32("AutoTune header");
        const std::uint32_t channels = r.u32("AutoTune header");
        m.head.tau = r.f32("AutoTune header");
        m.iterations = static_cast<int>(r.u32("AutoTune header"));
        m.noise_decorrelation = (r.u32("AutoTune header") & 1u) != 0;
        if (levels == 0 || channels == 0 || levels > 4096 || channels > 64)
            throw FormatError("implausible AutoTune dimensions");
        m.head.levels = levels;
        m.head.features = static_cast<std::size_t>(levels) * channels;
        try {
            m.schedule = LevelSchedule(detail::widen(r.f32s(levels, "level schedule")));
        } catch (const ConfigurationError& e) {
            throw FormatError(std::string("checkpoint schedule is invalid: ") + e.what());
        }
        m.head.weights = detail::widen(r.f32s(static_cast<std::size_t>(levels) * m.head.features, "AutoTune weights"));
        m.head.bias = detail::widen(r.f32s(levels, "AutoTune bias"));
        if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint");
        ck.backbone.levels = levels;
        if (channels != ck.backbone.image_channels) throw FormatError("AutoTune channel count disagrees with backbone");
        ck.model = std::move(m);
    }
    try {
        ck.backbone.validate();
    } catch (const ConfigurationError& e) {
        throw FormatError(std::string("checkpoint backbone is inconsistent: ") + e.what());
    }
    return ck;
}

/// Round-trips through 32-bit storage, matching what a saved checkpoint loads as.
inline Checkpoint quantized(const Checkpoint& ck) { return decode_checkpoint(encode_checkpoint(ck)); }

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }

}  // namespace rcd::io
