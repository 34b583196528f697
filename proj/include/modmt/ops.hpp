// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over Tensor<T>, sufficient for a small
// transformer and its training step. Every op validates shapes, checks the
// output for NaN/Inf (hard error by contract), and appends one backward
// node to the tape when recording and some input requires a gradient.
//
// Layout convention: activations are rank-2 row-major [rows x width] where
// rows = batch * seq_len. Attention is a single fused op so the tape stays
// short and the inner loops stay cache-friendly on one core.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "modmt/common.hpp"
#include "modmt/rng.hpp"
#include "modmt/tensor.hpp"

namespace modmt {

template <class T>
inline void check_finite(const char* op, const Tensor<T>& t) {
    if (!all_finite(t.data(), t.numel())) {
        throw DivergenceError(std::string(op) + ": non-finite value in forward output " +
                              shape_str(t.shape()));
    }
}

template <class T>
inline void require_rank2(const char* op, const Tensor<T>& t) {
    if (t.rank() != 2) {
        throw ContractError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
    }
}

namespace detail {

template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
    T s = T(0);
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <class T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: [m x k] . [k x n] -> [m x n]
// Backward: dA += dC . B^T, dB += A^T . dC
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    require_rank2("matmul", a);
    require_rank2("matmul", b);
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw ContractError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                            shape_str(b.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    const T* ap = a.data();
    const T* bp = b.data();
    T* cp = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = ap + i * k;
        T* crow = cp + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            detail::axpy(arow[p], bp + p * n, crow, n);
        }
    }
    check_finite("matmul", out);
    if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        tape.record("matmul", out, [ac, bc, oc, m, k, n]() mutable {
            if (!oc.has_grad()) return;
            const T* go = oc.grad().data();
            if (ac.requires_grad()) {
                auto& ga = ac.grad();
                const T* bp2 = bc.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const T* grow = go + i * n;
                    T* garow = ga.data() + i * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        garow[p] += detail::dot(grow, bp2 + p * n, n);
                    }
                }
            }
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                const T* ap2 = ac.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const T* grow = go + i * n;
                    const T* arow = ap2 + i * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        detail::axpy(arow[p], grow, gb.data() + p * n, n);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul_bt: [n x d] . [v x d]^T -> [n x v], without materializing the
// transpose. This is how the tied output projection reads the embedding
// table directly.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> matmul_bt(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w) {
    require_rank2("matmul_bt", x);
    require_rank2("matmul_bt", w);
    const std::size_t n = x.dim(0), d = x.dim(1), v = w.dim(0);
    if (w.dim(1) != d) {
        throw ContractError("matmul_bt: width mismatch, " + shape_str(x.shape()) + " x " +
                            shape_str(w.shape()) + "^T");
    }
    Tensor<T> out = Tensor<T>::zeros({n, v});
    const T* xp = x.data();
    const T* wp = w.data();
    T* op = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        const T* xrow = xp + i * d;
        T* orow = op + i * v;
        for (std::size_t j = 0; j < v; ++j) {
            orow[j] = detail::dot(xrow, wp + j * d, d);
        }
    }
    check_finite("matmul_bt", out);
    if (tape.recording() && (x.requires_grad() || w.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, wc = w, oc = out;
        tape.record("matmul_bt", out, [xc, wc, oc, n, d, v]() mutable {
            if (!oc.has_grad()) return;
            const T* go = oc.grad().data();
            if (xc.requires_grad()) {
                auto& gx = xc.grad();
                const T* wp2 = wc.data();
                for (std::size_t i = 0; i < n; ++i) {
                    const T* grow = go + i * v;
                    T* gxrow = gx.data() + i * d;
                    for (std::size_t j = 0; j < v; ++j) {
                        detail::axpy(grow[j], wp2 + j * d, gxrow, d);
                    }
                }
            }
            if (wc.requires_grad()) {
                auto& gw = wc.grad();
                const T* xp2 = xc.data();
                for (std::size_t i = 0; i < n; ++i) {
                    const T* grow = go + i * v;
                    const T* xrow = xp2 + i * d;
                    for (std::size_t j = 0; j < v; ++j) {
                        detail::axpy(grow[j], xrow, gw.data() + j * d, d);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ContractError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    }
    const std::size_t n = a.numel();
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* ap = a.data();
    const T* bp = b.data();
    T* op = out.data();
    for (std::size_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
    check_finite("add", out);
    if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        tape.record("add", out, [ac, bc, oc, n]() mutable {
            if (!oc.has_grad()) return;
            const T* go = oc.grad().data();
            ac.accumulate_grad(go, n);
            bc.accumulate_grad(go, n);
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ContractError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    }
    const std::size_t n = a.numel();
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
    check_finite("mul", out);
    if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        tape.record("mul", out, [ac, bc, oc, n]() mutable {
            if (!oc.has_grad()) return;
            const T* go = oc.grad().data();
            if (ac.requires_grad()) {
                auto& ga = ac.grad();
                for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * bc[i];
            }
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                for (std::size_t i = 0; i < n; ++i) gb[i] += go[i] * ac[i];
            }
        });
    }
    return out;
}

// x [rows x d] + bias [d], broadcast over rows.
template <class T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
    require_rank2("add_bias", x);
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (bias.numel() != d) {
        throw ContractError("add_bias: bias length " + std::to_string(bias.numel()) +
                            " does not match width of " + shape_str(x.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* xp = x.data();
    const T* bp = bias.data();
    T* op = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) op[r * d + j] = xp[r * d + j] + bp[j];
    }
    check_finite("add_bias", out);
    if (tape.recording() && (x.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, bc = bias, oc = out;
        tape.record("add_bias", out, [xc, bc, oc, rows, d]() mutable {
            if (!oc.has_grad()) return;
            const T* go = oc.grad().data();
            xc.accumulate_grad(go, rows * d);
            if (bc.requires_grad()) {
                auto& gb = bc.grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) gb[j] += go[r * d + j];
                }
            }
        });
    }
    return out;
}

// x [batch*seq x d] + table rows cycled by position: row r uses
// table[r % seq]. Used for the fixed sinusoidal positional encoding; the
// table never carries a gradient.
template <class T>
Tensor<T> add_position(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& table,
                       std::size_t seq_len) {
    require_rank2("add_position", x);
    require_rank2("add_position", table);
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (table.dim(1) != d || table.dim(0) < seq_len) {
        throw ContractError("add_position: table " + shape_str(table.shape()) +
                            " too small for seq_len " + std::to_string(seq_len));
    }
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* xp = x.data();
    const T* tp = table.data();
    T* op = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* prow = tp + (r % seq_len) * d;
        for (std::size_t j = 0; j < d; ++j) op[r * d + j] = xp[r * d + j] + prow[j];
    }
    check_finite("add_position", out);
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        tape.record("add_position", out, [xc, oc]() mutable {
            if (!oc.has_grad()) return;
            xc.accumulate_grad(oc.grad().data(), oc.numel());
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
    const std::size_t n = x.numel();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * factor;
    check_finite("scale", out);
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        tape.record("scale", out, [xc, oc, factor, n]() mutable {
            if (!oc.has_grad()) return;
            const T* go = oc.grad().data();
            auto& gx = xc.grad();
            for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * factor;
        });
    }
    return out;
}

template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
    const std::size_t n = x.numel();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    check_finite("relu", out);
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        tape.record("relu", out, [xc, oc, n]() mutable {
            if (!oc.has_grad()) return;
            const T* go = oc.grad().data();
            auto& gx = xc.grad();
            for (std::size_t i = 0; i < n; ++i) {
                if (xc[i] > T(0)) gx[i] += go[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
    T s = T(0);
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) s += x[i];
    Tensor<T> out = Tensor<T>::scalar(s);
    check_finite("sum", out);
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        tape.record("sum", out, [xc, oc, n]() mutable {
            if (!oc.has_grad()) return;
            const T g = oc.grad()[0];
            auto& gx = xc.grad();
            for (std::size_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax along an arbitrary axis, max-subtracted for stability. Rows of
// the output sum to 1 within 1e-6 for any finite input.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ContractError("softmax: axis " + std::to_string(axis) + " out of range for " +
                            shape_str(x.shape()));
    }
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t lane = s[axis];

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* xp = x.data();
    T* op = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * lane * inner + in;
            T mx = xp[base];
            for (std::size_t l = 1; l < lane; ++l) mx = std::max(mx, xp[base + l * inner]);
            T denom = T(0);
            for (std::size_t l = 0; l < lane; ++l) {
                const T e = std::exp(xp[base + l * inner] - mx);
                op[base + l * inner] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (std::size_t l = 0; l < lane; ++l) op[base + l * inner] *= inv;
        }
    }
    check_finite("softmax", out);
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        tape.record("softmax", out, [xc, oc, outer, inner, lane]() mutable {
            if (!oc.has_grad()) return;
            const T* y = oc.data();
            const T* go = oc.grad().data();
            auto& gx = xc.grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * lane * inner + in;
                    T acc = T(0);
                    for (std::size_t l = 0; l < lane; ++l) {
                        acc += go[base + l * inner] * y[base + l * inner];
                    }
                    for (std::size_t l = 0; l < lane; ++l) {
                        const std::size_t idx = base + l * inner;
                        gx[idx] += y[idx] * (go[idx] - acc);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis with affine gain/bias.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5)) {
    if (x.rank() < 1) throw ContractError("layer_norm: rank-0 input");
    const std::size_t d = x.shape().back();
    if (gain.numel() != d || bias.numel() != d) {
        throw ContractError("layer_norm: gain/bias length does not match last axis of " +
                            shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto stats = std::make_shared<std::vector<T>>(2 * rows);  // mu, inv_std per row
    const T* xp = x.data();
    const T* gp = gain.data();
    const T* bp = bias.data();
    T* op = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xp + r * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= T(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            const T c = row[j] - mu;
            var += c * c;
        }
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        (*stats)[2 * r] = mu;
        (*stats)[2 * r + 1] = inv;
        T* orow = op + r * d;
        for (std::size_t j = 0; j < d; ++j) orow[j] = gp[j] * (row[j] - mu) * inv + bp[j];
    }
    check_finite("layer_norm", out);
    if (tape.recording() && (x.requires_grad() || gain.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, gc = gain, bc = bias, oc = out;
        tape.record("layer_norm", out, [xc, gc, bc, oc, stats, rows, d]() mutable {
            if (!oc.has_grad()) return;
            const T* go = oc.grad().data();
            const T* xp2 = xc.data();
            const T* gp2 = gc.data();
            const bool need_x = xc.requires_grad();
            const bool need_g = gc.requires_grad();
            const bool need_b = bc.requires_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T mu = (*stats)[2 * r];
                const T inv = (*stats)[2 * r + 1];
                const T* row = xp2 + r * d;
                const T* grow = go + r * d;
                if (need_x) {
                    T sum1 = T(0), sum2 = T(0);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T xh = (row[j] - mu) * inv;
                        const T dxh = grow[j] * gp2[j];
                        sum1 += dxh;
                        sum2 += dxh * xh;
                    }
                    auto& gx = xc.grad();
                    T* gxrow = gx.data() + r * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const T xh = (row[j] - mu) * inv;
                        const T dxh = grow[j] * gp2[j];
                        gxrow[j] += inv * (dxh - sum1 / T(d) - xh * sum2 / T(d));
                    }
                }
                if (need_g) {
                    auto& gg = gc.grad();
                    for (std::size_t j = 0; j < d; ++j) {
                        gg[j] += grow[j] * (row[j] - mu) * inv;
                    }
                }
                if (need_b) {
                    auto& gb = bc.grad();
                    for (std::size_t j = 0; j < d; ++j) gb[j] += grow[j];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// cross_entropy: mean negative log-likelihood over non-pad positions of
// logits [rows x vocab]. Pad targets contribute zero loss and gradient.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                        const std::vector<std::int32_t>& targets, std::int32_t pad_id) {
    require_rank2("cross_entropy", logits);
    const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != rows) {
        throw ContractError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                            std::to_string(rows) + " logit rows");
    }
    std::size_t live = 0;
    for (std::int32_t t : targets) {
        if (t == pad_id) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw ContractError("cross_entropy: target id " + std::to_string(t) +
                                " out of range [0, " + std::to_string(vocab) + ")");
        }
        ++live;
    }
    if (live == 0) throw ContractError("cross_entropy: no non-pad targets");

    auto lse = std::make_shared<std::vector<T>>(rows, T(0));
    const T* lp = logits.data();
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] == pad_id) continue;
        const T* row = lp + r * vocab;
        T mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
        const T l = mx + std::log(denom);
        (*lse)[r] = l;
        total += static_cast<double>(l - row[targets[r]]);
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(live)));
    check_finite("cross_entropy", out);
    if (tape.recording() && logits.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> lc = logits, oc = out;
        auto tgt = std::make_shared<std::vector<std::int32_t>>(targets);
        tape.record("cross_entropy", out, [lc, oc, tgt, lse, rows, vocab, pad_id, live]() mutable {
            if (!oc.has_grad()) return;
            const T g = oc.grad()[0] / static_cast<T>(live);
            const T* lp2 = lc.data();
            auto& gl = lc.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                if ((*tgt)[r] == pad_id) continue;
                const T* row = lp2 + r * vocab;
                T* grow = gl.data() + r * vocab;
                const T l = (*lse)[r];
                for (std::size_t j = 0; j < vocab; ++j) {
                    grow[j] += g * std::exp(row[j] - l);
                }
                grow[(*tgt)[r]] -= g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// dropout: in training mode each element survives with probability
// 1 - rate and is scaled by 1/(1 - rate); the mask is fully determined by
// the seed. Eval mode and rate 0 are the identity.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double rate, std::uint64_t seed,
                  bool training) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) return x;

    const std::size_t n = x.numel();
    auto mask = std::make_shared<std::vector<std::uint8_t>>(n);
    Rng rng(seed);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const bool keep = rng.uniform01() >= rate;
        (*mask)[i] = keep ? 1 : 0;
        out[i] = keep ? x[i] * keep_scale : T(0);
    }
    check_finite("dropout", out);
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        tape.record("dropout", out, [xc, oc, mask, keep_scale, n]() mutable {
            if (!oc.has_grad()) return;
            const T* go = oc.grad().data();
            auto& gx = xc.grad();
            for (std::size_t i = 0; i < n; ++i) {
                if ((*mask)[i]) gx[i] += go[i] * keep_scale;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// embedding: gather rows of table [vocab x d] by token id -> [n x d].
// Backward scatter-adds into the table gradient.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, const std::vector<std::int32_t>& ids) {
    require_rank2("embedding", table);
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    const std::size_t n = ids.size();
    for (std::int32_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw ContractError("embedding: token id " + std::to_string(id) + " out of range [0, " +
                                std::to_string(vocab) + ")");
        }
    }
    Tensor<T> out = Tensor<T>::zeros({n, d});
    const T* tp = table.data();
    T* op = out.data();
    for (std::size_t r = 0; r < n; ++r) {
        const T* src = tp + static_cast<std::size_t>(ids[r]) * d;
        std::copy(src, src + d, op + r * d);
    }
    check_finite("embedding", out);
    if (tape.recording() && table.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> tc = table, oc = out;
        auto idc = std::make_shared<std::vector<std::int32_t>>(ids);
        tape.record("embedding", out, [tc, oc, idc, d]() mutable {
            if (!oc.has_grad()) return;
            const T* go = oc.grad().data();
            auto& gt = tc.grad();
            for (std::size_t r = 0; r < idc->size(); ++r) {
                detail::axpy(T(1), go + r * d, gt.data() + static_cast<std::size_t>((*idc)[r]) * d, d);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fused scaled dot-product attention over all batch rows and heads.
//
// q is [batch*q_len x d]; k and v are [batch*kv_len x d]. kv_mask (when
// non-empty) flags real keys with 1 per [batch x kv_len] position; masked
// keys are skipped outright, so padding never perturbs live rows even at
// the bit level. causal restricts query t to keys <= t and requires
// q_len == kv_len. A query with no visible key yields a zero row.
// ---------------------------------------------------------------------------
struct AttentionSpec {
    std::size_t batch = 1;
    std::size_t heads = 1;
    std::size_t q_len = 0;
    std::size_t kv_len = 0;
    bool causal = false;
};

template <class T>
Tensor<T> attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionSpec& spec, const std::vector<std::uint8_t>& kv_mask) {
    require_rank2("attention", q);
    require_rank2("attention", k);
    require_rank2("attention", v);
    const std::size_t d = q.dim(1);
    if (k.dim(1) != d || v.dim(1) != d) {
        throw ContractError("attention: q/k/v widths disagree");
    }
    if (spec.heads == 0 || d % spec.heads != 0) {
        throw ContractError("attention: width " + std::to_string(d) + " not divisible by " +
                            std::to_string(spec.heads) + " heads");
    }
    if (q.dim(0) != spec.batch * spec.q_len || k.dim(0) != spec.batch * spec.kv_len ||
        v.dim(0) != spec.batch * spec.kv_len) {
        throw ContractError("attention: row counts do not match batch/lengths");
    }
    if (spec.causal && spec.q_len != spec.kv_len) {
        throw ContractError("attention: causal masking requires q_len == kv_len");
    }
    if (!kv_mask.empty() && kv_mask.size() != spec.batch * spec.kv_len) {
        throw ContractError("attention: kv_mask size mismatch");
    }

    const std::size_t hd = d / spec.heads;
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    auto weights = std::make_shared<std::vector<T>>(
        spec.batch * spec.heads * spec.q_len * spec.kv_len, T(0));
    Tensor<T> out = Tensor<T>::zeros(q.shape());

    const T* qp = q.data();
    const T* kp = k.data();
    const T* vp = v.data();
    T* op = out.data();
    const std::uint8_t* mp = kv_mask.empty() ? nullptr : kv_mask.data();

    for (std::size_t b = 0; b < spec.batch; ++b) {
        const std::uint8_t* bm = mp ? mp + b * spec.kv_len : nullptr;
        for (std::size_t h = 0; h < spec.heads; ++h) {
            const std::size_t hoff = h * hd;
            for (std::size_t t = 0; t < spec.q_len; ++t) {
                const T* qrow = qp + (b * spec.q_len + t) * d + hoff;
                T* wrow = weights->data() +
                          ((b * spec.heads + h) * spec.q_len + t) * spec.kv_len;
                const std::size_t hi = spec.causal ? t + 1 : spec.kv_len;
                T mx = std::numeric_limits<T>::lowest();
                bool any = false;
                for (std::size_t s = 0; s < hi; ++s) {
                    if (bm && !bm[s]) continue;
                    const T sc = inv_sqrt *
                                 detail::dot(qrow, kp + (b * spec.kv_len + s) * d + hoff, hd);
                    wrow[s] = sc;
                    if (!any || sc > mx) mx = sc;
                    any = true;
                }
                if (!any) continue;  // no visible key: zero output row
                T denom = T(0);
                for (std::size_t s = 0; s < hi; ++s) {
                    if (bm && !bm[s]) continue;
                    const T e = std::exp(wrow[s] - mx);
                    wrow[s] = e;
                    denom += e;
                }
                const T inv = T(1) / denom;
                T* orow = op + (b * spec.q_len + t) * d + hoff;
                for (std::size_t s = 0; s < hi; ++s) {
                    if (bm && !bm[s]) continue;
                    wrow[s] *= inv;
                    detail::axpy(wrow[s], vp + (b * spec.kv_len + s) * d + hoff, orow, hd);
                }
            }
        }
    }
    check_finite("attention", out);

    if (tape.recording() && (q.requires_grad() || k.requires_grad() || v.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> qc = q, kc = k, vc = v, oc = out;
        auto maskc = std::make_shared<std::vector<std::uint8_t>>(kv_mask);
        const AttentionSpec sp = spec;
        tape.record("attention", out, [qc, kc, vc, oc, weights, maskc, sp, hd, d, inv_sqrt]() mutable {
            if (!oc.has_grad()) return;
            const T* go = oc.grad().data();
            const T* qp2 = qc.data();
            const T* kp2 = kc.data();
            const T* vp2 = vc.data();
            const std::uint8_t* mp2 = maskc->empty() ? nullptr : maskc->data();
            const bool need_q = qc.requires_grad();
            const bool need_k = kc.requires_grad();
            const bool need_v = vc.requires_grad();
            const bool need_z = need_q || need_k;
            std::vector<T> dw(sp.kv_len);
            for (std::size_t b = 0; b < sp.batch; ++b) {
                const std::uint8_t* bm = mp2 ? mp2 + b * sp.kv_len : nullptr;
                for (std::size_t h = 0; h < sp.heads; ++h) {
                    const std::size_t hoff = h * hd;
                    for (std::size_t t = 0; t < sp.q_len; ++t) {
                        const T* grow = go + (b * sp.q_len + t) * d + hoff;
                        const T* wrow = weights->data() +
                                        ((b * sp.heads + h) * sp.q_len + t) * sp.kv_len;
                        const std::size_t hi = sp.causal ? t + 1 : sp.kv_len;
                        if (need_v) {
                            auto& gv = vc.grad();
                            for (std::size_t s = 0; s < hi; ++s) {
                                if (bm && !bm[s]) continue;
                                if (wrow[s] == T(0)) continue;
                                detail::axpy(wrow[s], grow,
                                             gv.data() + (b * sp.kv_len + s) * d + hoff, hd);
                            }
                        }
                        if (!need_z) continue;
                        T acc = T(0);
                        for (std::size_t s = 0; s < hi; ++s) {
                            if (bm && !bm[s]) continue;
                            dw[s] = detail::dot(grow, vp2 + (b * sp.kv_len + s) * d + hoff, hd);
                            acc += dw[s] * wrow[s];
                        }
                        const T* qrow = qp2 + (b * sp.q_len + t) * d + hoff;
                        for (std::size_t s = 0; s < hi; ++s) {
                            if (bm && !bm[s]) continue;
                            const T dz = wrow[s] * (dw[s] - acc) * inv_sqrt;
                            if (dz == T(0)) continue;
                            if (need_q) {
                                detail::axpy(dz, kp2 + (b * sp.kv_len + s) * d + hoff,
                                             qc.grad().data() + (b * sp.q_len + t) * d + hoff, hd);
                            }
                            if (need_k) {
                                detail::axpy(dz, qrow,
                                             kc.grad().data() + (b * sp.kv_len + s) * d + hoff, hd);
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace modmt
