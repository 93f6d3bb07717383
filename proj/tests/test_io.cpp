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


#include <gtest/gtest.h>

#include <bit>

#include "rcd/io/bundle.hpp"
#include "rcd/io/checkpoint.hpp"
#include "rcd/io/config.hpp"
#include "rcd/io/image_io.hpp"
#include "rcd/training.hpp"
#include "support.hpp"

namespace {

using rcd::ImageTensor;
using rcd::LevelSchedule;
namespace io = rcd::io;

ImageTensor quantized_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
    rcd::Rng rng(seed);
    ImageTensor t(h, w, c);
    for (double& v : t.data()) v = static_cast<double>(rng.next() % 256) / 255.0;
    return t;
}

// A bundle built from a seeded tiny network run on a seeded image.
io::EditBundle fixture_bundle(bool with_gt) {
    rcd::TrainConfig cfg;
    cfg.channels = 3;
    const auto backbone = rcd::initial_backbone(cfg);
    const auto head = rcd::initial_head(cfg);
    const ImageTensor clean = rcd::synthetic_image(8, 6, 3, 4);
    const auto s = rcd::make_awgn_sample(clean, 25.0 / 255.0, 5);
    const auto raw = rcd::tiny_backbone_forward(backbone, s.noisy);
    const auto stack = rcd::pipeline_from_raw(raw, cfg.schedule, cfg.pipeline());
    return io::make_bundle(s.noisy, stack, rcd::autotune(head, raw),
                           with_gt ? std::optional<ImageTensor>(clean) : std::nullopt);
}

TEST(Pnm, HandWorkedGrayBytes) {
    const ImageTensor img(1, 2, 1, std::vector<double>{0.0, 1.0});
    EXPECT_EQ(io::encode_pnm(img), std::string("P5\n2 1\n255\n\x00\xff", 13));
}

TEST(Pnm, EightBitRoundTripIsExact) {
    for (std::size_t c : {1u, 3u}) {
        const ImageTensor img = quantized_image(5, 7, c, c);
        const std::string bytes = io::encode_pnm(img);
        EXPECT_EQ(io::decode_image(bytes), img);
        EXPECT_EQ(io::encode_pnm(io::decode_image(bytes)), bytes);
    }
}

TEST(Pnm, SixteenBitAndCommentsAndClamping) {
    const std::string raw = std::string("P5 # comment\n# another\n1 1\n65535\n") + std::string("\x80\x01", 2);
    EXPECT_DOUBLE_EQ(io::decode_image(raw)[0], 32769.0 / 65535.0);
    const ImageTensor wild(1, 2, 1, std::vector<double>{-0.5, 1.5});
    EXPECT_EQ(io::decode_image(io::encode_pnm(wild)).data(), (std::vector<double>{0.0, 1.0}));
}

TEST(Pnm, MalformedInputsAreFormatErrors) {
    EXPECT_THROW(io::decode_image("P3\n1 1\n255\n0"), rcd::FormatError);
    EXPECT_THROW(io::decode_image("P5\n2 2\n255\n\x01"), rcd::FormatError);
    EXPECT_THROW(io::decode_image("P5\n2 x\n255\n"), rcd::FormatError);
    EXPECT_THROW(io::decode_image(""), rcd::FormatError);
    EXPECT_THROW(io::decode_image("Pf\n1 1\nabc\n"), rcd::FormatError);
    EXPECT_THROW(io::encode_pnm(ImageTensor(2, 2, 2)), rcd::ConfigurationError);
}

TEST(Pfm, RoundTripKeepsFloatValuesUnclamped) {
    ImageTensor img = rcd::testing::random_image(4, 3, 3, 2, -0.5, 1.5);
    for (double& v : img.data()) v = static_cast<float>(v);
    EXPECT_EQ(io::decode_image(io::encode_pfm(img)), img);
}

TEST(Pfm, BigEndianAndBottomUpRows) {
    // 1x2 image, rows stored bottom first: bottom = 2.0, top = 1.0.
    std::string data = "Pf\n1 2\n1.0\n";
    for (float f : {2.0f, 1.0f}) {
        const auto bits = std::bit_cast<std::uint32_t>(f);
        for (int k = 3; k >= 0; --k) data.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
    }
    const ImageTensor img = io::decode_image(data);
    EXPECT_EQ(img(0, 0, 0), 1.0);
    EXPECT_EQ(img(1, 0, 0), 2.0);
}

TEST(Bundle, RoundTripIsBitIdentical) {
    for (bool gt : {false, true}) {
        const io::EditBundle b = fixture_bundle(gt);
        const std::string bytes = io::encode_bundle(b);
        const io::EditBundle back = io::decode_bundle(bytes);
        EXPECT_EQ(back, b);
        EXPECT_EQ(io::encode_bundle(back), bytes);
        EXPECT_EQ(back.ground_truth.has_value(), gt);
    }
}

TEST(Bundle, HeaderLayout) {
    const io::EditBundle b = fixture_bundle(true);
    const std::string bytes = io::encode_bundle(b);
    EXPECT_EQ(bytes.substr(0, 4), "RCDB");
    EXPECT_EQ(bytes.substr(4, 4), std::string("\x01\x00\x01\x00", 4));
    EXPECT_EQ(bytes.substr(8, 16), std::string("\x08\0\0\0\x06\0\0\0\x03\0\0\0\x04\0\0\0", 16));
    const std::size_t n = 8 * 6 * 3;
    EXPECT_EQ(bytes.size(), 24 + 4 * (4 + 4 + n + 4 * n + n));
}

TEST(Bundle, FrozenEncoding) {
    const std::string bytes = io::encode_bundle(fixture_bundle(true));
    EXPECT_EQ(rcd::testing::fnv1a(bytes), 0xd816e1393f4626bcull) << std::hex << rcd::testing::fnv1a(bytes);
}

TEST(Bundle, StoredMapsStayCalibratedAfter32BitStorage) {
    const io::EditBundle b = fixture_bundle(false);
    EXPECT_LE(b.calibration_error(), io::kBundleCalibrationTolerance);
    EXPECT_LE(b.calibration_error(), 1e-6);
}

TEST(Bundle, DecodeRejectsCorruptPayloads) {
    const std::string good = io::encode_bundle(fixture_bundle(true));
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_THROW(io::decode_bundle(bad_magic), rcd::FormatError);
    std::string bad_version = good;
    bad_version[4] = 2;
    EXPECT_THROW(io::decode_bundle(bad_version), rcd::FormatError);
    EXPECT_THROW(io::decode_bundle(good + "x"), rcd::FormatError);
    try {
        io::decode_bundle(good.substr(0, good.size() - 10));
        FAIL() << "expected FormatError";
    } catch (const rcd::FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("ground truth"), std::string::npos) << e.what();
    }
    try {
        io::decode_bundle(good.substr(0, 30));
        FAIL() << "expected FormatError";
    } catch (const rcd::FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("level schedule"), std::string::npos) << e.what();
    }
}

TEST(Bundle, DecodeRejectsMiscalibratedMaps) {
    io::EditBundle b = fixture_bundle(false);
    for (float& v : b.maps[2]) v *= 1.01f;
    EXPECT_THROW(io::decode_bundle(io::encode_bundle(b)), rcd::FormatError);
}

TEST(Bundle, EditMatches64BitPath) {
    const io::EditBundle b = fixture_bundle(false);
    const std::vector<double> zero(4, 0.0);
    EXPECT_EQ(io::edit_bundle(b, zero), b.base_image());
    const rcd::ControlVector c{{0.4, -0.3, 1.1, 0.2}};
    const ImageTensor fast = io::edit_bundle(b, c.coeffs);
    const ImageTensor slow = rcd::edit(b.base_image(), b.stack(), c);
    EXPECT_LE(rcd::testing::max_abs_diff(fast.values(), slow.values()), 1e-12);
    EXPECT_THROW(io::edit_bundle(b, std::vector<double>{1.0}), rcd::ConfigurationError);
}

TEST(Checkpoint, RoundTripThroughFloatStorage) {
    rcd::TrainConfig cfg;
    const io::Checkpoint ck{rcd::initial_backbone(cfg),
                            io::ModelSection{rcd::initial_head(cfg), cfg.schedule, 4, true}};
    const io::Checkpoint q = io::quantized(ck);
    EXPECT_EQ(io::quantized(q), q);
    EXPECT_EQ(q.backbone.layers.size(), ck.backbone.layers.size());
    EXPECT_LE(rcd::testing::max_abs_diff(q.backbone.flatten(), ck.backbone.flatten()), 1e-7);
    EXPECT_EQ(q.model->iterations, 4);
    EXPECT_TRUE(q.model->noise_decorrelation);
    EXPECT_EQ(q.model->schedule.size(), 4u);
    EXPECT_EQ(q.pipeline().decorrelation.iterations, 4);
}

TEST(Checkpoint, BackboneOnlyAndCorruption) {
    const io::Checkpoint bare{rcd::make_tiny_backbone(3, 2, 1), std::nullopt};
    const std::string bytes = io::encode_checkpoint(bare);
    const io::Checkpoint back = io::decode_checkpoint(bytes);
    EXPECT_FALSE(back.model.has_value());
    EXPECT_EQ(back.backbone.levels, 2u);
    EXPECT_EQ(back.backbone.image_channels, 3u);
    EXPECT_THROW(io::decode_checkpoint(bytes.substr(0, bytes.size() - 1)), rcd::FormatError);
    EXPECT_THROW(io::decode_checkpoint(bytes + "RCDX"), rcd::FormatError);
    std::string bad_act = bytes;
    bad_act[8 + 12] = 7;  // first layer activation
    EXPECT_THROW(io::decode_checkpoint(bad_act), rcd::FormatError);
}

TEST(Config, ParsesAllFieldsIn255Units) {
    const io::RunConfig rc = io::parse_run_config(R"({
        "schedule": [10, 20, 40], "lambda": 0.5, "iterations": 6, "noise_decorrelation": false,
        "loss": "psnr", "steps": 7, "learning_rate": 0.01, "momentum": 0.5, "grad_clip": 0,
        "batch": 3, "patch": 12, "channels": 3, "sigma_min": 5, "sigma_max": 40, "tau": 0.1,
        "hidden": 6, "depth": 2, "seed": 99, "log_interval": 3,
        "checkpoint": "a.rcdw", "log": "b.jsonl", "eval": {"sigma": 20, "count": 4, "seed": 1}})");
    const rcd::TrainConfig& t = rc.train;
    EXPECT_EQ(t.schedule, LevelSchedule::from_255({10, 20, 40}));
    EXPECT_EQ(t.lambda, 0.5);
    EXPECT_EQ(t.iterations, 6);
    EXPECT_FALSE(t.noise_decorrelation);
    EXPECT_EQ(t.loss, rcd::LevelLossKind::psnr);
    EXPECT_EQ(t.steps, 7);
    EXPECT_DOUBLE_EQ(t.sigma_min, 5.0 / 255.0);
    EXPECT_DOUBLE_EQ(t.sigma_max, 40.0 / 255.0);
    EXPECT_EQ(t.hidden, 6u);
    EXPECT_EQ(t.depth, 2u);
    EXPECT_EQ(t.seed, 99u);
    EXPECT_EQ(rc.checkpoint, "a.rcdw");
    EXPECT_EQ(rc.log, "b.jsonl");
    EXPECT_DOUBLE_EQ(rc.eval.sigma, 20.0 / 255.0);
    EXPECT_EQ(rc.eval.count, 4u);
}

TEST(Config, DefaultsMatchDeskSettings) {
    const io::RunConfig rc = io::parse_run_config("{}");
    EXPECT_EQ(rc.train.schedule, LevelSchedule::from_255({15, 30, 45, 60}));
    EXPECT_EQ(rc.train.lambda, 0.1);
    EXPECT_EQ(rc.train.iterations, 4);
    EXPECT_EQ(rc.train.steps, 2000);
    EXPECT_EQ(rc.train.patch, 16u);
    EXPECT_EQ(rc.train.batch, 8u);
    EXPECT_EQ(rc.train.tau, 0.05);
}

TEST(Config, RejectsBadInput) {
    EXPECT_THROW(io::parse_run_config("{"), rcd::ConfigurationError);
    EXPECT_THROW(io::parse_run_config("[]"), rcd::ConfigurationError);
    EXPECT_THROW(io::parse_run_config(R"({"lamda": 0.1})"), rcd::ConfigurationError);
    EXPECT_THROW(io::parse_run_config(R"({"steps": "many"})"), rcd::ConfigurationError);
    EXPECT_THROW(io::parse_run_config(R"({"schedule": [30, 15]})"), rcd::ConfigurationError);
    EXPECT_THROW(io::parse_run_config(R"({"loss": "l1"})"), rcd::ConfigurationError);
    EXPECT_THROW(io::parse_run_config(R"({"eval": {"sigma": 30, "n": 2}})"), rcd::ConfigurationError);
    EXPECT_THROW(io::parse_run_config(R"({"sigma_max": 90})"), rcd::ConfigurationError);
}

TEST(Config, SeedOverride) {
    io::RunConfig rc = io::parse_run_config(R"({"seed": 5})");
    io::apply_seed_override(rc, nullptr);
    EXPECT_EQ(rc.train.seed, 5u);
    io::apply_seed_override(rc, "123");
    EXPECT_EQ(rc.train.seed, 123u);
    EXPECT_THROW(io::apply_seed_override(rc, "12a"), rcd::ConfigurationError);
}

}  // namespace
