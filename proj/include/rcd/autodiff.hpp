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

// Minimal reverse-mode differentiation over flat double buffers. Each
// primitive records its output value and a backward rule (vector-Jacobian
// product) that reads the saved values of its inputs from the tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rcd/error.hpp"

namespace rcd::ad {

using Buffer = std::vector<double>;

struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;
    bool valid() const { return id != npos; }
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Buffer& out_grad)>;

    /// Value that never receives a gradient.
    Var constant(Buffer value) { return push("constant", std::move(value), {}, {}, false); }

    /// Differentiable input.
    Var leaf(Buffer value) { return push("leaf", std::move(value), {}, {}, true); }

    /// Records a primitive. The node needs a gradient when any input does.
    Var record(const char* op, Buffer value, std::vector<Var> inputs, Backward backward) {
        bool needs = false;
        for (Var in : inputs) needs = needs || node(in).needs_grad;
        return push(op, std::move(value), std::move(inputs), std::move(backward), needs);
    }

    const Buffer& value(Var v) const {
        const Node& n = node(v);
        if (n.value.size() != n.size)
            throw TapeCorruptionError(std::string("saved value of '") + n.op + "' node " + std::to_string(v.id) +
                                      " is missing");
        return n.value;
    }

    double scalar(Var v) const {
        const Buffer& b = value(v);
        if (b.size() != 1) throw ConfigurationError("expected a scalar node, got size " + std::to_string(b.size()));
        return b[0];
    }

    std::size_t size_of(Var v) const { return node(v).size; }
    bool needs_grad(Var v) const { return node(v).needs_grad; }
    const char* op_name(Var v) const { return node(v).op; }

    /// Gradient of the last backward sweep; zeros when the node was not reached.
    Buffer grad(Var v) const {
        const Node& n = node(v);
        return n.grad.empty() ? Buffer(n.size, 0.0) : n.grad;
    }

    void accumulate(Var v, std::span<const double> g) {
        Node& n = node(v);
        if (!n.needs_grad) return;
        if (g.size() != n.size)
            throw TapeCorruptionError(std::string("cotangent size ") + std::to_string(g.size()) + " for '" + n.op +
                                      "' node of size " + std::to_string(n.size));
        if (n.grad.empty()) n.grad.assign(n.size, 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }

    /// Reverse sweep from `root`. A scalar root is seeded with 1 unless a seed is given.
    void backward(Var root, std::span<const double> seed = {}) {
        for (Node& n : nodes_) n.grad.clear();
        sweep_.clear();
        const Node& r = node(root);
        if (seed.empty()) {
            if (r.size != 1) throw ConfigurationError("backward from a non-scalar node needs an explicit seed");
            const double one = 1.0;
            accumulate(root, std::span<const double>(&one, 1));
        } else {
            accumulate(root, seed);
        }
        for (std::size_t id = root.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
            sweep_.push_back(id);
            n.backward(*this, n.grad);
        }
    }

    /// Node ids visited by the last backward sweep, in visiting order.
    const std::vector<std::size_t>& sweep_order() const { return sweep_; }

    std::size_t size() const { return nodes_.size(); }

    /// Discards a saved value. Only useful for exercising the corruption checks.
    void drop_value(Var v) { node(v).value.clear(); }

private:
    struct Node {
        const char* op;
        Buffer value;
        std::size_t size;
        Buffer grad;
        std::vector<Var> inputs;
        Backward backward;
        bool needs_grad;
    };

    Var push(const char* op, Buffer value, std::vector<Var> inputs, Backward backward, bool needs) {
        const std::size_t size = value.size();
        nodes_.push_back(Node{op, std::move(value), size, {}, std::move(inputs), std::move(backward), needs});
        return Var{nodes_.size() - 1};
    }

    Node& node(Var v) {
        if (v.id >= nodes_.size()) throw TapeCorruptionError("node " + std::to_string(v.id) + " is not on this tape");
        return nodes_[v.id];
    }
    const Node& node(Var v) const {
        if (v.id >= nodes_.size()) throw TapeCorruptionError("node " + std::to_string(v.id) + " is not on this tape");
        return nodes_[v.id];
    }

    std::vector<Node> nodes_;
    std::vector<std::size_t> sweep_;
};

namespace detail {

inline void require_size(const Tape& t, Var v, std::size_t n, const char* op) {
    if (t.size_of(v) != n)
        throw ConfigurationError(std::string(op) + ": operand has size " + std::to_string(t.size_of(v)) +
                                 ", expected " + std::to_string(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reshaping primitives

inline Var add(Tape& t, Var a, Var b) {
    const Buffer& av = t.value(a);
    detail::require_size(t, b, av.size(), "add");
    const Buffer& bv = t.value(b);
    Buffer out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return t.record("add", std::move(out), {a, b}, [a, b](Tape& tp, const Buffer& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

inline Var sub(Tape& t, Var a, Var b) {
    const Buffer& av = t.value(a);
    detail::require_size(t, b, av.size(), "sub");
    const Buffer& bv = t.value(b);
    Buffer out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return t.record("sub", std::move(out), {a, b}, [a, b](Tape& tp, const Buffer& g) {
        tp.accumulate(a, g);
        Buffer neg(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
        tp.accumulate(b, neg);
    });
}

inline Var scale(Tape& t, Var a, double s) {
    Buffer out = t.value(a);
    for (double& v : out) v *= s;
    return t.record("scale", std::move(out), {a}, [a, s](Tape& tp, const Buffer& g) {
        Buffer ga(g);
        for (double& v : ga) v *= s;
        tp.accumulate(a, ga);
    });
}

inline Var sum(Tape& t, Var a) {
    const Buffer& av = t.value(a);
    double s = 0.0;
    for (double v : av) s += v;
    const std::size_t n = av.size();
    return t.record("sum", {s}, {a}, [a, n](Tape& tp, const Buffer& g) { tp.accumulate(a, Buffer(n, g[0])); });
}

/// Mean of several scalar nodes.
inline Var mean_of(Tape& t, std::span<const Var> scalars) {
    if (scalars.empty()) throw ConfigurationError("mean_of: no operands");
    double s = 0.0;
    for (Var v : scalars) s += t.scalar(v);
    const double inv = 1.0 / static_cast<double>(scalars.size());
    std::vector<Var> inputs(scalars.begin(), scalars.end());
    return t.record("mean_of", {s * inv}, inputs, [inputs, inv](Tape& tp, const Buffer& g) {
        const double gi = g[0] * inv;
        for (Var v : inputs) tp.accumulate(v, std::span<const double>(&gi, 1));
    });
}

inline Var slice(Tape& t, Var a, std::size_t offset, std::size_t length) {
    const Buffer& av = t.value(a);
    if (offset + length > av.size()) throw ConfigurationError("slice out of range");
    Buffer out(av.begin() + static_cast<std::ptrdiff_t>(offset),
               av.begin() + static_cast<std::ptrdiff_t>(offset + length));
    const std::size_t n = av.size();
    return t.record("slice", std::move(out), {a}, [a, offset, n](Tape& tp, const Buffer& g) {
        Buffer ga(n, 0.0);
        std::copy(g.begin(), g.end(), ga.begin() + static_cast<std::ptrdiff_t>(offset));
        tp.accumulate(a, ga);
    });
}

inline Var concat(Tape& t, std::span<const Var> parts) {
    Buffer out;
    std::vector<std::size_t> sizes;
    for (Var p : parts) {
        const Buffer& pv = t.value(p);
        out.insert(out.end(), pv.begin(), pv.end());
        sizes.push_back(pv.size());
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return t.record("concat", std::move(out), inputs, [inputs, sizes](Tape& tp, const Buffer& g) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            tp.accumulate(inputs[k], std::span<const double>(g.data() + off, sizes[k]));
            off += sizes[k];
        }
    });
}

inline Var tanh(Tape& t, Var a) {
    Buffer out = t.value(a);
    for (double& v : out) v = std::tanh(v);
    return t.record("tanh", std::move(out), {a}, [a](Tape& tp, const Buffer& g) {
        const Buffer& xv = tp.value(a);
        Buffer ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = std::tanh(xv[i]);
            ga[i] = g[i] * (1.0 - y * y);
        }
        tp.accumulate(a, ga);
    });
}

inline Var log(Tape& t, Var a) {
    Buffer out = t.value(a);
    for (double& v : out) {
        if (!(v > 0.0)) throw NumericError("log of a non-positive value");
        v = std::log(v);
    }
    return t.record("log", std::move(out), {a}, [a](Tape& tp, const Buffer& g) {
        const Buffer& xv = tp.value(a);
        Buffer ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / xv[i];
        tp.accumulate(a, ga);
    });
}

// ---------------------------------------------------------------------------
// Image primitives (H x W x C, channel-last)

struct ConvShape {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 3;  // odd, square

    std::size_t weight_count() const { return kernel * kernel * in_channels * out_channels; }
};

/// Plain stride-1, zero-padded "same" convolution. Weights are laid out
/// [ky][kx][in][out].
inline void conv2d_forward(std::span<const double> x, std::span<const double> w, std::span<const double> b,
                           const ConvShape& s, std::span<double> y) {
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(s.kernel / 2);
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(s.height);
    const std::ptrdiff_t wd = static_cast<std::ptrdiff_t>(s.width);
    const std::size_t ci = s.in_channels, co = s.out_channels;
    for (std::ptrdiff_t py = 0; py < h; ++py) {
        for (std::ptrdiff_t px = 0; px < wd; ++px) {
            double* out = &y[static_cast<std::size_t>(py * wd + px) * co];
            for (std::size_t o = 0; o < co; ++o) out[o] = b[o];
            for (std::ptrdiff_t ky = -r; ky <= r; ++ky) {
                const std::ptrdiff_t sy = py + ky;
                if (sy < 0 || sy >= h) continue;
                for (std::ptrdiff_t kx = -r; kx <= r; ++kx) {
                    const std::ptrdiff_t sx = px + kx;
                    if (sx < 0 || sx >= wd) continue;
                    const double* in = &x[static_cast<std::size_t>(sy * wd + sx) * ci];
                    const double* wk =
                        &w[static_cast<std::size_t>((ky + r) * static_cast<std::ptrdiff_t>(s.kernel) + (kx + r)) *
                           ci * co];
                    for (std::size_t i = 0; i < ci; ++i) {
                        const double xi = in[i];
                        const double* wrow = wk + i * co;
                        for (std::size_t o = 0; o < co; ++o) out[o] += xi * wrow[o];
                    }
                }
            }
        }
    }
}

inline Var conv2d(Tape& t, Var x, Var w, Var b, const ConvShape& s) {
    detail::require_size(t, x, s.height * s.width * s.in_channels, "conv2d input");
    detail::require_size(t, w, s.weight_count(), "conv2d weights");
    detail::require_size(t, b, s.out_channels, "conv2d bias");
    Buffer out(s.height * s.width * s.out_channels);
    conv2d_forward(t.value(x), t.value(w), t.value(b), s, out);
    return t.record("conv2d", std::move(out), {x, w, b}, [x, w, b, s](Tape& tp, const Buffer& g) {
        const Buffer& xv = tp.value(x);
        const Buffer& wv = tp.value(w);
        const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(s.kernel / 2);
        const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(s.height);
        const std::ptrdiff_t wd = static_cast<std::ptrdiff_t>(s.width);
        const std::size_t ci = s.in_channels, co = s.out_channels;
        Buffer gx(xv.size(), 0.0), gw(wv.size(), 0.0), gb(co, 0.0);
        for (std::ptrdiff_t py = 0; py < h; ++py) {
            for (std::ptrdiff_t px = 0; px < wd; ++px) {
                const double* go = &g[static_cast<std::size_t>(py * wd + px) * co];
                for (std::size_t o = 0; o < co; ++o) gb[o] += go[o];
                for (std::ptrdiff_t ky = -r; ky <= r; ++ky) {
                    const std::ptrdiff_t sy = py + ky;
                    if (sy < 0 || sy >= h) continue;
                    for (std::ptrdiff_t kx = -r; kx <= r; ++kx) {
                        const std::ptrdiff_t sx = px + kx;
                        if (sx < 0 || sx >= wd) continue;
                        const std::size_t in_off = static_cast<std::size_t>(sy * wd + sx) * ci;
                        const std::size_t w_off =
                            static_cast<std::size_t>((ky + r) * static_cast<std::ptrdiff_t>(s.kernel) + (kx + r)) *
                            ci * co;
                        for (std::size_t i = 0; i < ci; ++i) {
                            const double xi = xv[in_off + i];
                            const double* wrow = &wv[w_off + i * co];
                            double* gwrow = &gw[w_off + i * co];
                            double acc = 0.0;
                            for (std::size_t o = 0; o < co; ++o) {
                                gwrow[o] += xi * go[o];
                                acc += wrow[o] * go[o];
                            }
                            gx[in_off + i] += acc;
                        }
                    }
                }
            }
        }
        tp.accumulate(x, gx);
        tp.accumulate(w, gw);
        tp.accumulate(b, gb);
    });
}

/// Channels [first, first + count) of an H*W x total image.
inline Var channel_slice(Tape& t, Var x, std::size_t pixels, std::size_t total, std::size_t first,
                         std::size_t count) {
    detail::require_size(t, x, pixels * total, "channel_slice");
    if (first + count > total) throw ConfigurationError("channel_slice out of range");
    const Buffer& xv = t.value(x);
    Buffer out(pixels * count);
    for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t c = 0; c < count; ++c) out[p * count + c] = xv[p * total + first + c];
    return t.record("channel_slice", std::move(out), {x}, [=](Tape& tp, const Buffer& g) {
        Buffer gx(pixels * total, 0.0);
        for (std::size_t p = 0; p < pixels; ++p)
            for (std::size_t c = 0; c < count; ++c) gx[p * total + first + c] = g[p * count + c];
        tp.accumulate(x, gx);
    });
}

/// Per-channel mean over all pixels: H*W x C -> C.
inline Var global_avg_pool(Tape& t, Var x, std::size_t pixels, std::size_t channels) {
    detail::require_size(t, x, pixels * channels, "global_avg_pool");
    const Buffer& xv = t.value(x);
    Buffer out(channels, 0.0);
    for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t c = 0; c < channels; ++c) out[c] += xv[p * channels + c];
    for (double& v : out) v /= static_cast<double>(pixels);
    return t.record("global_avg_pool", std::move(out), {x}, [=](Tape& tp, const Buffer& g) {
        Buffer gx(pixels * channels);
        const double inv = 1.0 / static_cast<double>(pixels);
        for (std::size_t p = 0; p < pixels; ++p)
            for (std::size_t c = 0; c < channels; ++c) gx[p * channels + c] = g[c] * inv;
        tp.accumulate(x, gx);
    });
}

/// y = level * x / sd(x), sd centered with denominator M - 1.
inline Var sd_normalize(Tape& t, Var x, double level) {
    const Buffer& xv = t.value(x);
    const std::size_t m = xv.size();
    if (m < 2) throw DegenerateInputError("sd needs at least 2 elements");
    double mean = 0.0;
    for (double v : xv) mean += v;
    mean /= static_cast<double>(m);
    double ss = 0.0;
    for (double v : xv) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(m - 1));
    if (!(sd > 0.0)) throw DegenerateInputError("sd_normalize of a constant map");
    Buffer out(m);
    for (std::size_t i = 0; i < m; ++i) out[i] = level * xv[i] / sd;
    return t.record("sd_normalize", std::move(out), {x}, [x, level, sd, mean, m](Tape& tp, const Buffer& g) {
        const Buffer& xv = tp.value(x);
        double gx_dot = 0.0;
        for (std::size_t i = 0; i < m; ++i) gx_dot += g[i] * xv[i];
        const double a = level / sd;
        const double b = level * gx_dot / (sd * sd * sd * static_cast<double>(m - 1));
        Buffer gx(m);
        for (std::size_t i = 0; i < m; ++i) gx[i] = a * g[i] - b * (xv[i] - mean);
        tp.accumulate(x, gx);
    });
}

// ---------------------------------------------------------------------------
// Matrix primitives (row-major)

inline Var matmul(Tape& t, Var a, Var b, std::size_t n, std::size_t k, std::size_t m) {
    detail::require_size(t, a, n * k, "matmul lhs");
    detail::require_size(t, b, k * m, "matmul rhs");
    const Buffer& av = t.value(a);
    const Buffer& bv = t.value(b);
    Buffer out(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            for (std::size_t j = 0; j < m; ++j) out[i * m + j] += aip * bv[p * m + j];
        }
    return t.record("matmul", std::move(out), {a, b}, [=](Tape& tp, const Buffer& g) {
        const Buffer& av = tp.value(a);
        const Buffer& bv = tp.value(b);
        if (tp.needs_grad(a)) {
            Buffer ga(n * k, 0.0);  // G B^T
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * bv[p * m + j];
                    ga[i * k + p] = acc;
                }
            tp.accumulate(a, ga);
        }
        if (tp.needs_grad(b)) {
            Buffer gb(k * m, 0.0);  // A^T G
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += aip * g[i * m + j];
                }
            tp.accumulate(b, gb);
        }
    });
}

inline Var symmetrize(Tape& t, Var a, std::size_t n) {
    detail::require_size(t, a, n * n, "symmetrize");
    const Buffer& av = t.value(a);
    Buffer out(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = 0.5 * (av[i * n + j] + av[j * n + i]);
    return t.record("symmetrize", std::move(out), {a}, [a, n](Tape& tp, const Buffer& g) {
        Buffer ga(n * n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = 0.5 * (g[i * n + j] + g[j * n + i]);
        tp.accumulate(a, ga);
    });
}

/// Row means of an L x M matrix.
inline Var row_means(Tape& t, Var x, std::size_t rows, std::size_t cols) {
    detail::require_size(t, x, rows * cols, "row_means");
    const Buffer& xv = t.value(x);
    Buffer out(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) out[i] += xv[i * cols + j];
        out[i] /= static_cast<double>(cols);
    }
    return t.record("row_means", std::move(out), {x}, [=](Tape& tp, const Buffer& g) {
        Buffer gx(rows * cols);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] = g[i] / static_cast<double>(cols);
        tp.accumulate(x, gx);
    });
}

/// X[i][j] + v[i].
inline Var add_row_broadcast(Tape& t, Var x, Var v, std::size_t rows, std::size_t cols) {
    detail::require_size(t, x, rows * cols, "add_row_broadcast matrix");
    detail::require_size(t, v, rows, "add_row_broadcast vector");
    Buffer out = t.value(x);
    const Buffer& vv = t.value(v);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += vv[i];
    return t.record("add_row_broadcast", std::move(out), {x, v}, [=](Tape& tp, const Buffer& g) {
        tp.accumulate(x, g);
        Buffer gv(rows, 0.0);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) gv[i] += g[i * cols + j];
        tp.accumulate(v, gv);
    });
}

/// X - rowmean(X).
inline Var center_rows(Tape& t, Var x, std::size_t rows, std::size_t cols) {
    detail::require_size(t, x, rows * cols, "center_rows");
    Buffer out = t.value(x);
    for (std::size_t i = 0; i < rows; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mean += out[i * cols + j];
        mean /= static_cast<double>(cols);
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] -= mean;
    }
    return t.record("center_rows", std::move(out), {x}, [=](Tape& tp, const Buffer& g) {
        Buffer gx(g);
        for (std::size_t i = 0; i < rows; ++i) {
            double mean = 0.0;
            for (std::size_t j = 0; j < cols; ++j) mean += g[i * cols + j];
            mean /= static_cast<double>(cols);
            for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] -= mean;
        }
        tp.accumulate(x, gx);
    });
}

/// Sample covariance of the rows of an L x M matrix, 1/(M-1) Xc Xc^T.
inline Var covariance(Tape& t, Var x, std::size_t rows, std::size_t cols) {
    if (cols < 2) throw DegenerateInputError("covariance needs at least 2 columns");
    const Var centered = center_rows(t, x, rows, cols);
    const Buffer& xc = t.value(centered);
    const double inv = 1.0 / static_cast<double>(cols - 1);
    Buffer out(rows * rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = i; j < rows; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < cols; ++k) acc += xc[i * cols + k] * xc[j * cols + k];
            out[i * rows + j] = out[j * rows + i] = acc * inv;
        }
    return t.record("covariance", std::move(out), {centered}, [=](Tape& tp, const Buffer& g) {
        const Buffer& xc = tp.value(centered);
        // d/dXc of (Xc Xc^T)/(M-1) against G is (G + G^T) Xc / (M-1).
        Buffer gx(rows * cols, 0.0);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < rows; ++j) {
                const double s = (g[i * rows + j] + g[j * rows + i]) * inv;
                if (s == 0.0) continue;
                for (std::size_t k = 0; k < cols; ++k) gx[i * cols + k] += s * xc[j * cols + k];
            }
        tp.accumulate(centered, gx);
    });
}

inline Var trace_normalize(Tape& t, Var s, std::size_t n) {
    detail::require_size(t, s, n * n, "trace_normalize");
    const Buffer& sv = t.value(s);
    double tr = 0.0;
    for (std::size_t i = 0; i < n; ++i) tr += sv[i * n + i];
    if (!(tr > 0.0)) throw DegenerateInputError("trace_normalize: trace is not positive");
    Buffer out(sv);
    for (double& v : out) v /= tr;
    return t.record("trace_normalize", std::move(out), {s}, [s, n, tr](Tape& tp, const Buffer& g) {
        const Buffer& sv = tp.value(s);
        double gs = 0.0;
        for (std::size_t i = 0; i < n * n; ++i) gs += g[i] * sv[i];
        Buffer ga(n * n);
        for (std::size_t i = 0; i < n * n; ++i) ga[i] = g[i] / tr;
        for (std::size_t i = 0; i < n; ++i) ga[i * n + i] -= gs / (tr * tr);
        tp.accumulate(s, ga);
    });
}

/// Unrolled Newton-Schulz iterations; the backward pass runs through every
/// iterate.
inline Var newton_schulz(Tape& t, Var sigma, std::size_t n, int iterations) {
    if (iterations < 1) throw PreconditionError("Newton-Schulz needs at least one iteration");
    Buffer eye(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
    Var iterate = t.constant(std::move(eye));
    for (int k = 1; k <= iterations; ++k) {
        const Var sq = matmul(t, iterate, iterate, n, n, n);
        const Var cube = matmul(t, sq, iterate, n, n, n);
        const Var prod = matmul(t, cube, sigma, n, n, n);
        const Var next = sub(t, scale(t, iterate, 1.5), scale(t, prod, 0.5));
        iterate = symmetrize(t, next, n);
        for (double v : t.value(iterate))
            if (!std::isfinite(v))
                throw DivergenceError("Newton-Schulz iterate " + std::to_string(k) + " is not finite", k);
    }
    return iterate;
}

// ---------------------------------------------------------------------------
// Heads and losses

/// W x + b with W of shape out x in.
inline Var linear(Tape& t, Var w, Var x, Var b, std::size_t out, std::size_t in) {
    const Var wx = matmul(t, w, x, out, in, 1);
    return add(t, wx, b);
}

/// Temperature softmax with max-score subtraction.
inline Var softmax(Tape& t, Var scores, double tau) {
    const Buffer& sv = t.value(scores);
    if (sv.empty()) throw ConfigurationError("softmax of an empty vector");
    for (double v : sv)
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite score");
    const double mx = *std::max_element(sv.begin(), sv.end());
    Buffer out(sv.size());
    double z = 0.0;
    for (std::size_t i = 0; i < sv.size(); ++i) z += (out[i] = std::exp((sv[i] - mx) / tau));
    for (double& v : out) v /= z;
    Buffer p = out;
    return t.record("softmax", std::move(out), {scores}, [scores, p, tau](Tape& tp, const Buffer& g) {
        double dot = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) dot += g[i] * p[i];
        Buffer gs(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) gs[i] = p[i] * (g[i] - dot) / tau;
        tp.accumulate(scores, gs);
    });
}

/// Mean squared difference.
inline Var mse(Tape& t, Var a, Var b) {
    const Buffer& av = t.value(a);
    detail::require_size(t, b, av.size(), "mse");
    const Buffer& bv = t.value(b);
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
    const double inv = 1.0 / static_cast<double>(av.size());
    return t.record("mse", {s * inv}, {a, b}, [a, b, inv](Tape& tp, const Buffer& g) {
        const Buffer& av = tp.value(a);
        const Buffer& bv = tp.value(b);
        Buffer ga(av.size()), gb(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) {
            ga[i] = 2.0 * inv * g[0] * (av[i] - bv[i]);
            gb[i] = -ga[i];
        }
        tp.accumulate(a, ga);
        tp.accumulate(b, gb);
    });
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    Buffer analytic;
    Buffer numeric;
};

using ScalarFunction = std::function<Var(Tape&, Var)>;

/// Compares the tape gradient of f at `point` with central differences.
/// The error of coordinate k is |a_k - n_k| / max(|a_k|, |n_k|, floor) where
/// floor is 1e-3 of the largest numeric gradient magnitude, so coordinates
/// whose true derivative is ~0 are judged against the gradient's scale.
/// `coords` restricts the check to a subset of coordinates.
inline GradCheckReport gradient_check(const ScalarFunction& f, std::span<const double> point,
                                      double step = 1e-5, std::span<const std::size_t> coords = {}) {
    std::vector<std::size_t> idx(coords.begin(), coords.end());
    if (idx.empty())
        for (std::size_t i = 0; i < point.size(); ++i) idx.push_back(i);

    Tape tape;
    const Var x = tape.leaf(Buffer(point.begin(), point.end()));
    const Var y = f(tape, x);
    if (!std::isfinite(tape.scalar(y))) throw CheckFailedError("gradient_check: f is not finite at the point");
    tape.backward(y);
    const Buffer full = tape.grad(x);

    auto eval = [&](const Buffer& p) {
        Tape tp;
        const double v = tp.scalar(f(tp, tp.leaf(p)));
        if (!std::isfinite(v)) throw CheckFailedError("gradient_check: f is not finite near the point");
        return v;
    };

    GradCheckReport report;
    Buffer p(point.begin(), point.end());
    for (std::size_t i : idx) {
        if (i >= p.size()) throw ConfigurationError("gradient_check: coordinate out of range");
        const double orig = p[i];
        p[i] = orig + step;
        const double up = eval(p);
        p[i] = orig - step;
        const double down = eval(p);
        p[i] = orig;
        report.analytic.push_back(full[i]);
        report.numeric.push_back((up - down) / (2.0 * step));
    }
    double scale = 0.0;
    for (double v : report.numeric) scale = std::max(scale, std::abs(v));
    const double floor = std::max(1e-3 * scale, 1e-12);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const double a = report.analytic[k], n = report.numeric[k];
        const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
        if (k == 0 || err > report.max_relative_error) {
            report.max_relative_error = err;
            report.worst_index = idx[k];
        }
    }
    return report;
}

}  // namespace rcd::ad
