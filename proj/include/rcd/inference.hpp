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

#include <optional>

#include "rcd/backbone.hpp"
#include "rcd/control.hpp"
#include "rcd/error.hpp"
#include "rcd/io/bundle.hpp"
#include "rcd/io/checkpoint.hpp"
#include "rcd/pipeline.hpp"

namespace rcd {

/// Everything the single network evaluation of an image produces.
struct Inference {
    NoiseMapStack stack;
    ControlVector cbar;

    /// The AutoTune edit at 64-bit precision.
    ImageTensor autotune_edit(const ImageTensor& noisy) const { return edit(noisy, stack, cbar); }
};

inline const io::ModelSection& require_model(const io::Checkpoint& ck) {
    if (!ck.model) throw ConfigurationError("checkpoint carries no AutoTune section and cannot drive inference");
    return *ck.model;
}

inline Inference infer(const io::Checkpoint& ck, const ImageTensor& noisy, Diagnostics* diag = nullptr) {
    const io::ModelSection& model = require_model(ck);
    const RawMultiOutput raw = tiny_backbone_forward(ck.backbone, noisy);
    return {pipeline_from_raw(raw, model.schedule, ck.pipeline(), diag), autotune(model.head, raw)};
}

/// Runs the network once and packages the result for offline editing.
inline io::EditBundle denoise_to_bundle(const io::Checkpoint& ck, const ImageTensor& noisy,
                                        const std::optional<ImageTensor>& ground_truth = std::nullopt,
                                        Diagnostics* diag = nullptr) {
    const Inference inf = infer(ck, noisy, diag);
    return io::make_bundle(noisy, inf.stack, inf.cbar, ground_truth);
}

}  // namespace rcd
