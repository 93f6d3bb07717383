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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "rcd/autodiff.hpp"
#include "rcd/numerics.hpp"
#include "support.hpp"

namespace {

namespace ad = rcd::ad;
using ad::Buffer;
using ad::Tape;
using ad::Var;

Buffer random_buffer(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    rcd::Rng rng(seed);
    Buffer b(n);
    for (double& v : b) v = rng.uniform(lo, hi);
    return b;
}

// Projects a node onto a fixed random direction so every op reduces to a
// scalar with a generic (non-symmetric) cotangent.
Var project(Tape& t, Var v, std::uint64_t seed) {
    const Var w = t.constant(random_buffer(t.size_of(v), seed));
    return ad::sum(t, ad::mse(t, ad::add(t, v, w), t.constant(Buffer(t.size_of(v), 0.0))));
}

struct OpCase {
    const char* name;
    std::size_t input_size;
    std::function<Var(Tape&, Var)> f;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
    const OpCase& c = GetParam();
    const Buffer x = random_buffer(c.input_size, 11, 0.2, 1.0);
    const ad::GradCheckReport r = ad::gradient_check(c.f, x, 1e-6);
    EXPECT_LE(r.max_relative_error, 1e-6) << c.name << " worst coordinate " << r.worst_index;
}

const ad::ConvShape kConv{4, 5, 2, 3, 3};

INSTANTIATE_TEST_SUITE_P(
    Ops, OpGradient,
    ::testing::Values(
        OpCase{"add_sub_scale", 6,
               [](Tape& t, Var x) {
                   const Var k = t.constant(random_buffer(6, 1));
                   return project(t, ad::scale(t, ad::sub(t, ad::add(t, x, k), ad::scale(t, x, 0.3)), -1.7), 2);
               }},
        OpCase{"slice_concat", 8,
               [](Tape& t, Var x) {
                   std::vector<Var> parts{ad::slice(t, x, 5, 3), ad::slice(t, x, 0, 4), ad::slice(t, x, 2, 2)};
                   return project(t, ad::concat(t, parts), 3);
               }},
        OpCase{"tanh", 7, [](Tape& t, Var x) { return project(t, ad::tanh(t, ad::scale(t, x, 2.0)), 4); }},
        OpCase{"log", 5, [](Tape& t, Var x) { return project(t, ad::log(t, x), 5); }},
        OpCase{"conv2d_input", 4 * 5 * 2,
               [](Tape& t, Var x) {
                   const Var w = t.constant(random_buffer(kConv.weight_count(), 6));
                   const Var b = t.constant(random_buffer(3, 7));
                   return project(t, ad::conv2d(t, x, w, b, kConv), 8);
               }},
        OpCase{"conv2d_weights_bias", 3 * 3 * 2 * 3 + 3,
               [](Tape& t, Var x) {
                   const Var img = t.constant(random_buffer(4 * 5 * 2, 9));
                   const Var w = ad::slice(t, x, 0, kConv.weight_count());
                   const Var b = ad::slice(t, x, kConv.weight_count(), 3);
                   return project(t, ad::conv2d(t, img, w, b, kConv), 10);
               }},
        OpCase{"channel_slice_pool", 6 * 4,
               [](Tape& t, Var x) {
                   const Var s = ad::channel_slice(t, x, 6, 4, 1, 2);
                   return project(t, ad::concat(t, std::vector<Var>{s, ad::global_avg_pool(t, x, 6, 4)}), 11);
               }},
        OpCase{"sd_normalize", 9, [](Tape& t, Var x) { return project(t, ad::sd_normalize(t, x, 0.3), 12); }},
        OpCase{"matmul_symmetrize", 12,
               [](Tape& t, Var x) {
                   const Var a = ad::slice(t, x, 0, 6);   // 2x3
                   const Var b = ad::slice(t, x, 6, 6);   // 3x2
                   return project(t, ad::symmetrize(t, ad::matmul(t, a, b, 2, 3, 2), 2), 13);
               }},
        OpCase{"row_ops", 3 * 5,
               [](Tape& t, Var x) {
                   const Var m = ad::row_means(t, x, 3, 5);
                   const Var c = ad::center_rows(t, x, 3, 5);
                   return project(t, ad::add_row_broadcast(t, c, ad::scale(t, m, 2.0), 3, 5), 14);
               }},
        OpCase{"covariance_trace_normalize", 3 * 6,
               [](Tape& t, Var x) {
                   return project(t, ad::trace_normalize(t, ad::covariance(t, x, 3, 6), 3), 15);
               }},
        OpCase{"newton_schulz", 3 * 8,
               [](Tape& t, Var x) {
                   const Var s = ad::trace_normalize(t, ad::covariance(t, x, 3, 8), 3);
                   return project(t, ad::newton_schulz(t, s, 3, 4), 16);
               }},
        OpCase{"linear_softmax", 3 * 4 + 4 + 3,
               [](Tape& t, Var x) {
                   const Var w = ad::slice(t, x, 0, 12);
                   const Var in = ad::slice(t, x, 12, 4);
                   const Var b = ad::slice(t, x, 16, 3);
                   return project(t, ad::softmax(t, ad::linear(t, w, in, b, 3, 4), 0.5), 17);
               }},
        OpCase{"mse_mean_of", 6,
               [](Tape& t, Var x) {
                   const Var a = ad::mse(t, ad::slice(t, x, 0, 3), t.constant({0.1, 0.2, 0.3}));
                   const Var b = ad::mse(t, ad::slice(t, x, 3, 3), ad::slice(t, x, 0, 3));
                   return ad::mean_of(t, std::vector<Var>{a, b, a});
               }}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(Softmax, JacobianMatchesClosedForm) {
    const double tau = 0.05;
    const Buffer s{0.01, 0.03, -0.02, 0.04};
    for (std::size_t j = 0; j < s.size(); ++j) {
        Tape t;
        const Var x = t.leaf(s);
        const Var p = ad::softmax(t, x, tau);
        Buffer seed(s.size(), 0.0);
        seed[j] = 1.0;
        t.backward(p, seed);
        const Buffer& pv = t.value(p);
        const Buffer g = t.grad(x);
        for (std::size_t i = 0; i < s.size(); ++i)
            EXPECT_NEAR(g[i], pv[j] * ((i == j ? 1.0 : 0.0) - pv[i]) / tau, 1e-12);
    }
}

TEST(SdNormalize, OutputHasExactLevelAndGradientIsOrthogonalToInput) {
    const Buffer x = random_buffer(40, 3);
    Tape t;
    const Var xv = t.leaf(x);
    const Var y = ad::sd_normalize(t, xv, 0.25);
    EXPECT_NEAR(rcd::testing::reference_sd(t.value(y)), 0.25, 1e-14);
    // y is invariant to scaling x, so the directional derivative along x is 0.
    const Buffer seed = random_buffer(40, 4);
    t.backward(y, seed);
    const Buffer g = t.grad(xv);
    EXPECT_NEAR(std::inner_product(g.begin(), g.end(), x.begin(), 0.0), 0.0, 1e-12);
}

TEST(CovarianceNode, AgreesWithMatrixCovariance) {
    const Buffer x = random_buffer(4 * 30, 5);
    Tape t;
    const Buffer& c = t.value(ad::covariance(t, t.constant(x), 4, 30));
    rcd::RowMatrix rows = Eigen::Map<const rcd::RowMatrix>(x.data(), 4, 30);
    const Eigen::MatrixXd expected = rcd::covariance(rcd::FlatStack(rows)).data;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_NEAR(c[i * 4 + j], expected(i, j), 1e-14);
}

TEST(NewtonSchulzNode, AgreesWithMatrixIteration) {
    const Eigen::MatrixXd s = rcd::trace_normalize({rcd::testing::random_spd(5, 20, 3), false}).data;
    Buffer flat(25);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) flat[i * 5 + j] = s(i, j);
    Tape t;
    const Buffer& got = t.value(ad::newton_schulz(t, t.constant(flat), 5, 4));
    const Eigen::MatrixXd expected = rcd::newton_schulz_inv_sqrt({s, true}, 4).data;
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) EXPECT_NEAR(got[i * 5 + j], expected(i, j), 1e-13);
}

TEST(Tape, EachNodeVisitedOnceInReverseOrder) {
    Tape t;
    const Var x = t.leaf({1.0, 2.0});
    const Var a = ad::tanh(t, x);
    const Var b = ad::add(t, a, a);  // diamond through a
    const Var c = ad::add(t, b, x);
    const Var y = ad::sum(t, ad::scale(t, c, 3.0));
    t.backward(y);
    const auto& order = t.sweep_order();
    EXPECT_TRUE(std::is_sorted(order.rbegin(), order.rend()));
    EXPECT_EQ(std::set<std::size_t>(order.begin(), order.end()).size(), order.size());
    // dy/dx = 3 (2 (1 - tanh^2 x) + 1)
    const Buffer g = t.grad(x);
    for (int i = 0; i < 2; ++i) {
        const double th = std::tanh(i + 1.0);
        EXPECT_NEAR(g[i], 3.0 * (2.0 * (1.0 - th * th) + 1.0), 1e-14);
    }
}

TEST(Tape, ConstantsReceiveNoGradientAndGradientsResetPerSweep) {
    Tape t;
    const Var k = t.constant({2.0});
    const Var x = t.leaf({3.0});
    const Var y = ad::sum(t, ad::add(t, ad::scale(t, x, 2.0), k));
    EXPECT_FALSE(t.needs_grad(k));
    t.backward(y);
    t.backward(y);
    EXPECT_EQ(t.grad(x)[0], 2.0);
    EXPECT_EQ(t.grad(k)[0], 0.0);
}

TEST(Tape, MissingSavedValueIsCorruption) {
    Tape t;
    const Var x = t.leaf({0.5, 0.25});
    const Var a = ad::tanh(t, x);
    const Var y = ad::sum(t, a);
    t.drop_value(x);
    EXPECT_THROW(t.backward(y), rcd::TapeCorruptionError);
    EXPECT_THROW(t.value(Var{999}), rcd::TapeCorruptionError);
}

TEST(Tape, NonScalarRootNeedsSeed) {
    Tape t;
    const Var x = t.leaf({1.0, 2.0});
    EXPECT_THROW(t.backward(ad::tanh(t, x)), rcd::ConfigurationError);
}

TEST(GradientCheck, DetectsAWrongBackward) {
    // A deliberately wrong primitive: value x^2, claimed derivative x.
    const ad::ScalarFunction bad = [](Tape& t, Var x) {
        const double v = t.value(x)[0];
        return t.record("bad_square", {v * v}, {x}, [x, v](Tape& tp, const Buffer& g) {
            const double d = g[0] * v;
            tp.accumulate(x, std::span<const double>(&d, 1));
        });
    };
    const Buffer p{1.5};
    EXPECT_NEAR(ad::gradient_check(bad, p).max_relative_error, 0.5, 1e-6);
}

TEST(GradientCheck, NonFiniteFunctionFailsLoudly) {
    const ad::ScalarFunction f = [](Tape& t, Var x) { return ad::sum(t, ad::log(t, x)); };
    const Buffer p{-1.0};
    EXPECT_THROW(ad::gradient_check(f, p), rcd::Error);
}

}  // namespace
