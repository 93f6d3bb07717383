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

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <sstream>
#include <string>

#include "rcd/error.hpp"

namespace rcd {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// L noise maps flattened to the rows of an L x M matrix, plus their row means.
struct FlatStack {
    RowMatrix data;
    Eigen::VectorXd row_means;

    FlatStack() = default;
    explicit FlatStack(RowMatrix rows) : data(std::move(rows)), row_means(data.rowwise().mean()) {}

    Eigen::Index rows() const { return data.rows(); }
    Eigen::Index cols() const { return data.cols(); }

    RowMatrix centered() const { return data.colwise() - row_means; }
};

/// Symmetric PSD L x L matrix; `trace_normalized` marks Sigma / tr(Sigma).
struct CovarianceMatrix {
    Eigen::MatrixXd data;
    bool trace_normalized = false;

    Eigen::Index dim() const { return data.rows(); }
    double trace() const { return data.trace(); }
};

inline double off_diagonal_frobenius(const Eigen::MatrixXd& m) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            if (i != j) sum += m(i, j) * m(i, j);
    return std::sqrt(sum);
}

inline Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& m) { return 0.5 * (m + m.transpose()); }

/// Sample covariance of the rows, 1/(M-1) (N - mean)(N - mean)^T.
inline CovarianceMatrix covariance(const FlatStack& stack) {
    if (stack.cols() < 2)
        throw DegenerateInputError("covariance needs at least 2 columns, got " + std::to_string(stack.cols()));
    const RowMatrix centered = stack.centered();
    Eigen::MatrixXd sigma = centered * centered.transpose() / static_cast<double>(stack.cols() - 1);
    return {symmetrized(sigma), false};
}

inline CovarianceMatrix trace_normalize(const CovarianceMatrix& sigma) {
    const double tr = sigma.trace();
    if (!(tr > 0.0))
        throw DegenerateInputError("covariance trace is " + std::to_string(tr) + "; noise stack is all-zero");
    return {sigma.data / tr, true};
}

/// ||I - Sigma||_2 < 1 for a symmetric matrix: every eigenvalue in (0, 2).
inline bool satisfies_newton_condition(const Eigen::MatrixXd& sigma) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(symmetrized(sigma), Eigen::EigenvaluesOnly);
    const auto& ev = solver.eigenvalues();
    return ev.minCoeff() > 0.0 && ev.maxCoeff() < 2.0;
}

/// Called after every Newton iterate with (k, Sigma_k).
using IterateObserver = std::function<void(int, const Eigen::MatrixXd&)>;

/// Newton-Schulz iteration for Sigma^{-1/2}:
///   Sigma_0 = I,  Sigma_k = (3 Sigma_{k-1} - Sigma_{k-1}^3 Sigma) / 2.
/// Each iterate is symmetrized. The input must be trace-normalized, or at least
/// satisfy ||I - Sigma||_2 < 1.
///
/// This uncoupled form is numerically unstable once converged: roundoff in the
/// iterate grows by roughly 10x per step on spread spectra, so a large T can
/// return a finite but wrong result. Keep T near the point of convergence
/// (T = 4 in the pipeline; about 10 to 12 when tight whitening is wanted).
inline CovarianceMatrix newton_schulz_inv_sqrt(const CovarianceMatrix& sigma, int iterations,
                                               const IterateObserver& observer = {}) {
    if (iterations < 1) throw PreconditionError("Newton-Schulz needs at least one iteration");
    if (!sigma.trace_normalized && !satisfies_newton_condition(sigma.data))
        throw PreconditionError("Newton-Schulz input is not trace-normalized and ||I - Sigma||_2 >= 1");

    const Eigen::Index n = sigma.dim();
    Eigen::MatrixXd iterate = Eigen::MatrixXd::Identity(n, n);
    for (int k = 1; k <= iterations; ++k) {
        const Eigen::MatrixXd cube = iterate * iterate * iterate;
        iterate = symmetrized(0.5 * (3.0 * iterate - cube * sigma.data));
        if (!iterate.allFinite())
            throw DivergenceError("Newton-Schulz iterate " + std::to_string(k) + " is not finite", k);
        if (observer) observer(k, iterate);
    }
    return {iterate, false};
}

/// ||S Sigma S - I||_F: how far S is from whitening Sigma.
inline double whitening_residual(const Eigen::MatrixXd& inv_sqrt, const Eigen::MatrixXd& sigma) {
    const Eigen::Index n = sigma.rows();
    return (inv_sqrt * sigma * inv_sqrt - Eigen::MatrixXd::Identity(n, n)).norm();
}

/// Exact Sigma^{-1/2} by symmetric eigendecomposition. Reference path for tests
/// and for the decorrelation fallback.
inline CovarianceMatrix eigen_inv_sqrt_oracle(const CovarianceMatrix& sigma) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(symmetrized(sigma.data));
    if (solver.info() != Eigen::Success) throw NumericError("symmetric eigendecomposition failed");
    const Eigen::VectorXd& ev = solver.eigenvalues();
    const double floor = 1e-10 * std::max(sigma.trace(), 0.0);
    const double smallest = ev.minCoeff();
    if (!(smallest > floor)) {
        std::ostringstream msg;
        msg << "covariance is near-singular: smallest eigenvalue " << smallest << " (trace " << sigma.trace()
            << ")";
        throw SingularityError(msg.str(), smallest);
    }
    const Eigen::MatrixXd& v = solver.eigenvectors();
    Eigen::MatrixXd result = v * ev.cwiseInverse().cwiseSqrt().asDiagonal() * v.transpose();
    return {symmetrized(result), false};
}

/// Eigen inverse square root with eigenvalues clamped to `relative_floor * trace`.
/// Only used when the covariance is rank-deficient.
inline CovarianceMatrix eigen_inv_sqrt_clamped(const CovarianceMatrix& sigma, double relative_floor) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(symmetrized(sigma.data));
    const double floor = relative_floor * std::max(sigma.trace(), std::numeric_limits<double>::min());
    Eigen::VectorXd ev = solver.eigenvalues().cwiseMax(floor);
    const Eigen::MatrixXd& v = solver.eigenvectors();
    return {symmetrized(v * ev.cwiseInverse().cwiseSqrt().asDiagonal() * v.transpose()), false};
}

inline double smallest_eigenvalue(const Eigen::MatrixXd& sym) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(symmetrized(sym), Eigen::EigenvaluesOnly);
    return solver.eigenvalues().minCoeff();
}

}  // namespace rcd
