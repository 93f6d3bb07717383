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

#include "rcd/backbone.hpp"
#include "rcd/pipeline.hpp"
#include "support.hpp"

namespace {

using rcd::ImageTensor;
using rcd::LevelSchedule;
using rcd::NoiseMapStack;
using rcd::testing::reference_corr;
using rcd::testing::reference_sd;

const LevelSchedule kDesk = LevelSchedule::from_255({15, 30, 45, 60});

rcd::RawMultiOutput raw_from_maps(const std::vector<ImageTensor>& maps) {
    const std::size_t l = maps.size(), c = maps.front().channels();
    const std::size_t pixels = maps.front().height() * maps.front().width();
    ImageTensor t(maps.front().height(), maps.front().width(), l * c);
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t p = 0; p < pixels; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) t[p * l * c + i * c + ch] = maps[i][p * c + ch];
    return {std::move(t), l, c};
}

NoiseMapStack correlated_stack(double shared, std::uint64_t seed, std::size_t h = 24, std::size_t w = 24,
                               std::size_t c = 1) {
    return rcd::normalize_to_levels(raw_from_maps(rcd::testing::shared_component_maps(4, h, w, c, shared, seed)), kDesk);
}

double max_abs_corr(const NoiseMapStack& s) {
    double worst = 0.0;
    for (std::size_t i = 0; i < s.levels(); ++i)
        for (std::size_t j = i + 1; j < s.levels(); ++j)
            worst = std::max(worst, std::abs(reference_corr(s.maps[i].data(), s.maps[j].data())));
    return worst;
}

double off_diag(const NoiseMapStack& s) {
    return rcd::off_diagonal_frobenius(rcd::covariance(s.to_flat()).data);
}

TEST(LevelSchedule, ValidationAndUnits) {
    EXPECT_THROW(LevelSchedule(std::vector<double>{}), rcd::ConfigurationError);
    EXPECT_THROW(LevelSchedule({0.1, 0.1}), rcd::ConfigurationError);
    EXPECT_THROW(LevelSchedule({-0.1, 0.1}), rcd::ConfigurationError);
    const auto u = LevelSchedule::uniform_steps(12);
    EXPECT_EQ(u.size(), 12u);
    EXPECT_DOUBLE_EQ(u.level_255(11), 60.0);
    EXPECT_DOUBLE_EQ(kDesk[0], 15.0 / 255.0);
}

TEST(Sd, MatchesTwoPassReference) {
    const ImageTensor x = rcd::testing::random_image(7, 9, 2, 4, -3, 5);
    EXPECT_NEAR(rcd::sd(x), reference_sd(x.data()), 1e-14);
    const std::vector<double> v{1, 2, 3, 4};
    EXPECT_DOUBLE_EQ(rcd::sd(v), std::sqrt(5.0 / 3.0));
}

TEST(Normalize, CalibratesEveryLevelProperty) {
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
        rcd::Rng rng(trial);
        const std::size_t l = 1 + trial % 6, c = 1 + trial % 3;
        std::vector<double> lv;
        double acc = 0;
        for (std::size_t i = 0; i < l; ++i) lv.push_back(acc += rng.uniform(1, 20));
        const LevelSchedule sched = LevelSchedule::from_255(lv);
        const ImageTensor raw = rcd::testing::random_image(5, 6, l * c, trial, -rng.uniform(0, 9), rng.uniform(0, 9));
        const NoiseMapStack s = rcd::normalize_to_levels({raw, l, c}, sched);
        for (std::size_t i = 0; i < l; ++i)
            EXPECT_LE(std::abs(reference_sd(s.maps[i].data()) - sched[i]) / sched[i], 1e-9) << trial;
    }
}

TEST(Normalize, DegenerateMapBecomesSeededWhiteNoiseWithWarning) {
    ImageTensor raw(4, 4, 2, 0.0);
    for (std::size_t p = 0; p < 16; ++p) raw[p * 2] = 0.01 * static_cast<double>(p);  // level 1 fine, level 2 flat
    const LevelSchedule sched = LevelSchedule::from_255({10, 20});
    rcd::Diagnostics d;
    const NoiseMapStack s = rcd::normalize_to_levels({raw, 2, 1}, sched, {}, &d);
    EXPECT_TRUE(d.mentions("degenerate"));
    EXPECT_NEAR(rcd::sd(s.maps[1]), sched[1], 1e-12);
    EXPECT_EQ(s.maps[1], rcd::normalize_to_levels({raw, 2, 1}, sched, {}, nullptr).maps[1]);
}

TEST(Normalize, LevelCountMismatchIsConfigurationError) {
    EXPECT_THROW(rcd::normalize_to_levels({ImageTensor(3, 3, 3), 3, 1}, kDesk), rcd::ConfigurationError);
}

TEST(Decorrelate, EigenOracleWhitensSharedComponentStacks) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const NoiseMapStack in = correlated_stack(1.5, seed);
        ASSERT_GT(max_abs_corr(in), 0.5);
        const NoiseMapStack out = rcd::decorrelate(in, {rcd::Whitening::eigen});
        EXPECT_LE(max_abs_corr(out), 0.05) << seed;
        EXPECT_GE(off_diag(in) / off_diag(out), 10.0) << seed;
        EXPECT_TRUE(out.decorrelated);
        for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(rcd::sd(out.maps[i]), kDesk[i], 1e-12 * kDesk[i]);
    }
}

TEST(Decorrelate, NewtonAtFourIterationsReducesCorrelation) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const NoiseMapStack in = correlated_stack(0.8, 100 + seed);
        const NoiseMapStack out = rcd::decorrelate(in, {rcd::Whitening::newton, 4});
        EXPECT_LT(off_diag(out), off_diag(in)) << seed;
        EXPECT_LT(max_abs_corr(out), max_abs_corr(in)) << seed;
    }
}

TEST(Decorrelate, NewtonConvergesToEigenWithMoreIterations) {
    const NoiseMapStack in = correlated_stack(1.0, 9);
    const NoiseMapStack eig = rcd::decorrelate(in, {rcd::Whitening::eigen});
    rcd::WhiteningResult info;
    const NoiseMapStack ns = rcd::decorrelate(in, {rcd::Whitening::newton, 10}, nullptr, &info);
    EXPECT_FALSE(info.fell_back_to_eigen);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_LT(rcd::testing::max_abs_diff(eig.maps[i].values(), ns.maps[i].values()), 1e-6);
}

TEST(Decorrelate, WhitenedCovarianceIsIdentityBeforeRenormalization) {
    const NoiseMapStack in = correlated_stack(1.2, 4);
    const rcd::FlatStack flat = in.to_flat();
    const rcd::FlatStack white = rcd::whiten(flat, {rcd::Whitening::eigen});
    const Eigen::MatrixXd cov = rcd::covariance(white).data;
    const double tr = rcd::covariance(flat).trace();
    EXPECT_LT((cov / tr - Eigen::MatrixXd::Identity(4, 4)).norm(), 1e-9);
    EXPECT_LT((white.row_means - flat.row_means).norm(), 1e-15);
}

TEST(Decorrelate, SingleLevelPassesThrough) {
    const NoiseMapStack in = rcd::normalize_to_levels({rcd::testing::random_image(4, 4, 1, 3), 1, 1},
                                                      LevelSchedule::from_255({25}));
    const NoiseMapStack out = rcd::decorrelate(in);
    EXPECT_EQ(out.maps, in.maps);
    EXPECT_TRUE(out.decorrelated);
}

TEST(Decorrelate, DuplicateMapsFallBackToEigenWithDiagnostic) {
    const ImageTensor m = rcd::testing::random_image(6, 6, 1, 2, -1, 1);
    const NoiseMapStack in = rcd::normalize_to_levels(raw_from_maps({m, m}), LevelSchedule::from_255({10, 20}));
    rcd::Diagnostics d;
    rcd::WhiteningResult info;
    const NoiseMapStack out = rcd::decorrelate(in, {}, &d, &info);
    EXPECT_TRUE(info.fell_back_to_eigen);
    ASSERT_TRUE(info.near_zero_eigenvalue.has_value());
    EXPECT_LT(std::abs(*info.near_zero_eigenvalue), 1e-10);
    EXPECT_TRUE(d.mentions("collapse"));
    for (const auto& map : out.maps)
        for (double v : map.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Decorrelate, AllZeroStackUsesIdentityWhitening) {
    const rcd::FlatStack zero(rcd::RowMatrix::Zero(3, 10));
    rcd::Diagnostics d;
    const rcd::WhiteningResult w = rcd::whitening_matrix(zero, {}, &d);
    EXPECT_TRUE(w.identity);
    EXPECT_TRUE(d.mentions("identity"));
}

TEST(VarianceLinearity, HoldsForRandomControlsOnOracleStack) {
    // Var(sum c_i N_i) = sum c_i^2 l_i^2 once the maps are uncorrelated.
    const NoiseMapStack s = rcd::decorrelate(correlated_stack(1.0, 21, 32, 32), {rcd::Whitening::eigen});
    rcd::Rng rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> c(4), mix(s.maps[0].size(), 0.0);
        double expected = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            c[i] = rng.uniform(-2, 2);
            expected += c[i] * c[i] * kDesk[i] * kDesk[i];
            for (std::size_t k = 0; k < mix.size(); ++k) mix[k] += c[i] * s.maps[i][k];
        }
        const double got = reference_sd(mix) * reference_sd(mix);
        EXPECT_LE(std::abs(got - expected), 0.01 * expected) << trial;
    }
}

TEST(Pipeline, TapedPipelineMatchesForward) {
    for (bool nd : {false, true}) {
        const auto p = rcd::make_tiny_backbone(2, 4, 5);
        const ImageTensor img = rcd::testing::random_image(6, 5, 2, 6);
        const rcd::PipelineOptions opt{nd, {rcd::Whitening::newton, 4}};
        const NoiseMapStack fwd = rcd::run_pipeline(p, img, kDesk, opt);
        rcd::ad::Tape t;
        const auto raw = rcd::tiny_backbone_forward(p, img);
        const rcd::ad::Var maps = rcd::pipeline_on_tape(t, t.constant(raw.tensor.data()), 30, 2, kDesk, opt);
        const auto& v = t.value(maps);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t k = 0; k < 60; ++k) EXPECT_NEAR(v[i * 60 + k], fwd.maps[i][k], 1e-12);
    }
}

TEST(Pipeline, ScheduleMismatchIsConfigurationError) {
    const auto p = rcd::make_tiny_backbone(1, 3, 5);
    EXPECT_THROW(rcd::run_pipeline(p, ImageTensor(4, 4, 1, 0.5), kDesk), rcd::ConfigurationError);
}

}  // namespace
