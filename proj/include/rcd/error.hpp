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

#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rcd {

/// Base of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input too small or all-zero where a spread is required.
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Non-finite values appeared during an iterative computation.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, long step = -1) : Error(what), step_(step) {}
    long step() const { return step_; }

private:
    long step_;
};

class SingularityError : public Error {
public:
    SingularityError(const std::string& what, double eigenvalue) : Error(what), eigenvalue_(eigenvalue) {}
    double eigenvalue() const { return eigenvalue_; }

private:
    double eigenvalue_;
};

class TapeCorruptionError : public Error {
public:
    using Error::Error;
};

/// Shapes, lengths or dimensions that do not fit together.
class ConfigurationError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class UnderdeterminedError : public Error {
public:
    using Error::Error;
};

/// A component step left the feasible ellipsoid; carries the largest step allowed.
class BoundaryError : public Error {
public:
    BoundaryError(const std::string& what, double max_feasible_delta)
        : Error(what), max_feasible_delta_(max_feasible_delta) {}
    double max_feasible_delta() const { return max_feasible_delta_; }

private:
    double max_feasible_delta_;
};

class CheckFailedError : public Error {
public:
    using Error::Error;
};

/// Malformed file or wire payload.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Collects non-fatal warnings. Functions accept a nullable pointer; with no
/// sink the warning goes to stderr.
struct Diagnostics {
    std::vector<std::string> warnings;

    void warn(std::string message) { warnings.push_back(std::move(message)); }

    bool mentions(const std::string& needle) const {
        for (const auto& w : warnings)
            if (w.find(needle) != std::string::npos) return true;
        return false;
    }
};

inline void warn(Diagnostics* diag, std::string message) {
    if (diag)
        diag->warn(std::move(message));
    else
        std::cerr << "rcd: warning: " << message << '\n';
}

}  // namespace rcd
