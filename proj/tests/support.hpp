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

// Helpers shared by the unit tests: independent reference computations and
// seeded fixtures. Nothing here calls into the code under test except for
// plain data types.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rcd/random.hpp"
#include "rcd/tensor.hpp"

namespace rcd::testing {

/// Two-pass sample standard deviation in long double, denominator n - 1.
inline double reference_sd(const std::vector<double>& v) {
    long double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<long double>(v.size());
    long double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return static_cast<double>(std::sqrt(ss / static_cast<long double>(v.size() - 1)));
}

/// Pearson correlation, computed directly from the definition.
inline double reference_corr(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    long double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) ma += a[i], mb += b[i];
    ma /= n;
    mb /= n;
    long double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return static_cast<double>(sab / std::sqrt(saa * sbb));
}

/// Element-by-element covariance of row vectors, denominator n - 1.
inline Eigen::MatrixXd reference_covariance(const std::vector<std::vector<double>>& rows) {
    const std::size_t l = rows.size(), n = rows.front().size();
    std::vector<long double> mean(l, 0);
    for (std::size_t i = 0; i < l; ++i) {
        for (double x : rows[i]) mean[i] += x;
        mean[i] /= n;
    }
    Eigen::MatrixXd c(l, l);
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < l; ++j) {
            long double s = 0;
            for (std::size_t k = 0; k < n; ++k) s += (rows[i][k] - mean[i]) * (rows[j][k] - mean[j]);
            c(i, j) = static_cast<double>(s / (n - 1));
        }
    return c;
}

/// Random SPD matrix Q diag(e) Q^T with eigenvalues log-uniform in
/// [1, condition] (both ends included), Q from a Householder QR of a
/// Gaussian matrix.
inline Eigen::MatrixXd random_spd(int n, double condition, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> g;
    Eigen::MatrixXd a(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = g(gen);
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
    std::uniform_real_distribution<double> u(0.0, std::log(condition));
    Eigen::VectorXd e(n);
    for (int i = 0; i < n; ++i) e(i) = std::exp(u(gen));
    e(0) = 1.0;
    e(n - 1) = condition;
    Eigen::MatrixXd s = q * e.asDiagonal() * q.transpose();
    return 0.5 * (s + s.transpose());
}

/// Noise maps sharing one common component: map_i = a_i * S + E_i with S and
/// E_i independent unit Gaussians. `shared` sets a_i's magnitude.
inline std::vector<ImageTensor> shared_component_maps(std::size_t levels, std::size_t h, std::size_t w, std::size_t c,
                                                      double shared, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t m = h * w * c;
    std::vector<double> s(m);
    for (double& v : s) v = rng.normal();
    std::vector<ImageTensor> maps;
    for (std::size_t i = 0; i < levels; ++i) {
        ImageTensor t(h, w, c);
        const double a = shared * (1.0 + 0.25 * static_cast<double>(i));
        for (std::size_t k = 0; k < m; ++k) t[k] = a * s[k] + rng.normal();
        maps.push_back(std::move(t));
    }
    return maps;
}

inline ImageTensor random_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed, double lo = 0.0,
                                double hi = 1.0) {
    Rng rng(seed);
    ImageTensor t(h, w, c);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

/// 64-bit FNV-1a, used to freeze serialized outputs.
inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class ScratchDir {
public:
    explicit ScratchDir(std::string_view tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("rcd-" + std::string(tag) + "-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~ScratchDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    ScratchDir(const ScratchDir&) = delete;
    ScratchDir& operator=(const ScratchDir&) = delete;

    std::string file(std::string_view name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace rcd::testing
