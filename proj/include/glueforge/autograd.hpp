#pragma once

// Minimal reverse-mode differentiation over row-major float matrices. Enough to run the toy
// transformer and its mixtures, and to train routers through them.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

namespace glueforge {

struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> v;

    Matrix() = default;
    Matrix(int r, int c, float fill = 0.0f) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {}
    Matrix(int r, int c, std::vector<float> values) : rows(r), cols(c), v(std::move(values)) {
        if (v.size() != static_cast<std::size_t>(r) * c) throw Error("matrix value count does not match shape");
    }

    float& operator()(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    float operator()(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
    std::span<float> row(int r) { return {v.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
    std::span<const float> row(int r) const {
        return {v.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }

    /// 1-D tensors become a single row; higher ranks fold trailing dims into columns.
    static Matrix from_tensor(const Tensor& t) {
        if (t.shape.size() == 1) return {1, static_cast<int>(t.shape[0]), t.data};
        return {static_cast<int>(t.rows()), static_cast<int>(t.cols()), t.data};
    }

    bool operator==(const Matrix&) const = default;
};

namespace ag {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
public:
    /// With `record` false no backward closures are kept; the tape is a plain evaluator.
    explicit Tape(bool record = false) : record_(record) {}

    bool recording() const { return record_; }

    Var leaf(Matrix value, bool requires_grad = false) {
        nodes_.push_back({std::move(value), {}, record_ && requires_grad, {}});
        return {static_cast<int>(nodes_.size()) - 1};
    }

    Var constant(const Tensor& t) { return leaf(Matrix::from_tensor(t), false); }

    const Matrix& value(Var x) const { return nodes_.at(static_cast<std::size_t>(x.id)).value; }
    bool needs_grad(Var x) const { return x.valid() && nodes_[static_cast<std::size_t>(x.id)].needs_grad; }

    const Matrix& grad(Var x) {
        auto& n = nodes_.at(static_cast<std::size_t>(x.id));
        ensure_grad(n);
        return n.grad;
    }

    Matrix& grad_mut(Var x) {
        auto& n = nodes_[static_cast<std::size_t>(x.id)];
        ensure_grad(n);
        return n.grad;
    }

    /// Appends an op node. `back` receives this tape and the node's own Var; it runs only when
    /// some parent needs a gradient.
    Var push(Matrix value, std::initializer_list<Var> parents, std::function<void(Tape&, Var)> back) {
        return push(std::move(value), std::vector<Var>(parents), std::move(back));
    }

    Var push(Matrix value, const std::vector<Var>& parents, std::function<void(Tape&, Var)> back) {
        bool any = false;
        for (auto p : parents) any = any || needs_grad(p);
        nodes_.push_back({std::move(value), {}, any, any ? std::move(back) : nullptr});
        return {static_cast<int>(nodes_.size()) - 1};
    }

    /// Backpropagates from a 1x1 node.
    void backward(Var loss) {
        if (!record_) throw Error("backward on a tape that does not record");
        auto& root = nodes_.at(static_cast<std::size_t>(loss.id));
        if (root.value.rows != 1 || root.value.cols != 1) throw Error("backward needs a scalar loss");
        ensure_grad(root);
        root.grad.v[0] = 1.0f;
        for (int i = loss.id; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.back && !n.grad.v.empty()) n.back(*this, Var{i});
        }
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool needs_grad = false;
        std::function<void(Tape&, Var)> back;
    };

    static void ensure_grad(Node& n) {
        if (n.grad.v.empty()) n.grad = Matrix(n.value.rows, n.value.cols);
    }

    bool record_;
    std::vector<Node> nodes_;
};

namespace detail {

inline float dot(const float* a, const float* b, int n) {
    float s = 0.0f;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline void require_shape(const Matrix& m, int rows, int cols, const char* op) {
    if (m.rows != rows || m.cols != cols)
        throw Error(std::string(op) + ": shape mismatch (" + std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                    " vs " + std::to_string(rows) + "x" + std::to_string(cols) + ")");
}

} // namespace detail

/// a (n x k) times w^T (m x k) -> n x m
inline Var matmul_nt(Tape& t, Var a, Var w) {
    const Matrix& A = t.value(a);
    const Matrix& W = t.value(w);
    if (A.cols != W.cols) throw Error("matmul_nt: inner dimensions differ");
    Matrix out(A.rows, W.rows);
    for (int i = 0; i < A.rows; ++i)
        for (int j = 0; j < W.rows; ++j) out(i, j) = detail::dot(&A.v[i * A.cols], &W.v[j * W.cols], A.cols);
    return t.push(std::move(out), {a, w}, [a, w](Tape& t, Var self) {
        const Matrix& A = t.value(a);
        const Matrix& W = t.value(w);
        const Matrix G = t.grad(self);
        if (t.needs_grad(a)) {
            Matrix& GA = t.grad_mut(a);
            for (int i = 0; i < A.rows; ++i)
                for (int j = 0; j < W.rows; ++j) {
                    float g = G(i, j);
                    if (g == 0.0f) continue;
                    for (int c = 0; c < A.cols; ++c) GA(i, c) += g * W(j, c);
                }
        }
        if (t.needs_grad(w)) {
            Matrix& GW = t.grad_mut(w);
            for (int i = 0; i < A.rows; ++i)
                for (int j = 0; j < W.rows; ++j) {
                    float g = G(i, j);
                    if (g == 0.0f) continue;
                    for (int c = 0; c < A.cols; ++c) GW(j, c) += g * A(i, c);
                }
        }
    });
}

inline Var add(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    detail::require_shape(t.value(b), A.rows, A.cols, "add");
    Matrix out = A;
    const Matrix& B = t.value(b);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += B.v[i];
    return t.push(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Matrix G = t.grad(self);
        for (Var p : {a, b})
            if (t.needs_grad(p)) {
                Matrix& GP = t.grad_mut(p);
                for (std::size_t i = 0; i < G.v.size(); ++i) GP.v[i] += G.v[i];
            }
    });
}

inline Var mul(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    detail::require_shape(B, A.rows, A.cols, "mul");
    Matrix out(A.rows, A.cols);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = A.v[i] * B.v[i];
    return t.push(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Matrix G = t.grad(self);
        const Matrix& A = t.value(a);
        const Matrix& B = t.value(b);
        if (t.needs_grad(a)) {
            Matrix& GA = t.grad_mut(a);
            for (std::size_t i = 0; i < G.v.size(); ++i) GA.v[i] += G.v[i] * B.v[i];
        }
        if (t.needs_grad(b)) {
            Matrix& GB = t.grad_mut(b);
            for (std::size_t i = 0; i < G.v.size(); ++i) GB.v[i] += G.v[i] * A.v[i];
        }
    });
}

/// x (n x d) normalized per row by its RMS, scaled by w (1 x d).
inline Var rmsnorm(Tape& t, Var x, Var w, float eps = 1e-5f) {
    const Matrix& X = t.value(x);
    const Matrix& W = t.value(w);
    detail::require_shape(W, 1, X.cols, "rmsnorm");
    Matrix out(X.rows, X.cols);
    std::vector<float> inv(static_cast<std::size_t>(X.rows));
    for (int r = 0; r < X.rows; ++r) {
        float ms = detail::dot(&X.v[r * X.cols], &X.v[r * X.cols], X.cols) / static_cast<float>(X.cols);
        inv[r] = 1.0f / std::sqrt(ms + eps);
        for (int c = 0; c < X.cols; ++c) out(r, c) = X(r, c) * inv[r] * W.v[c];
    }
    return t.push(std::move(out), {x, w}, [x, w, inv = std::move(inv)](Tape& t, Var self) {
        const Matrix G = t.grad(self);
        const Matrix& X = t.value(x);
        const Matrix& W = t.value(w);
        const int d = X.cols;
        if (t.needs_grad(w)) {
            Matrix& GW = t.grad_mut(w);
            for (int r = 0; r < X.rows; ++r)
                for (int c = 0; c < d; ++c) GW.v[c] += G(r, c) * X(r, c) * inv[r];
        }
        if (t.needs_grad(x)) {
            Matrix& GX = t.grad_mut(x);
            for (int r = 0; r < X.rows; ++r) {
                float s = 0.0f;
                for (int c = 0; c < d; ++c) s += G(r, c) * W.v[c] * X(r, c);
                float i3 = inv[r] * inv[r] * inv[r] / static_cast<float>(d);
                for (int c = 0; c < d; ++c) GX(r, c) += G(r, c) * W.v[c] * inv[r] - X(r, c) * i3 * s;
            }
        }
    });
}

inline Var silu(Tape& t, Var x) {
    const Matrix& X = t.value(x);
    Matrix out(X.rows, X.cols);
    for (std::size_t i = 0; i < X.v.size(); ++i) out.v[i] = X.v[i] / (1.0f + std::exp(-X.v[i]));
    return t.push(std::move(out), {x}, [x](Tape& t, Var self) {
        const Matrix G = t.grad(self);
        const Matrix& X = t.value(x);
        Matrix& GX = t.grad_mut(x);
        for (std::size_t i = 0; i < X.v.size(); ++i) {
            float s = 1.0f / (1.0f + std::exp(-X.v[i]));
            GX.v[i] += G.v[i] * s * (1.0f + X.v[i] * (1.0f - s));
        }
    });
}

inline Var relu(Tape& t, Var x) {
    const Matrix& X = t.value(x);
    Matrix out(X.rows, X.cols);
    for (std::size_t i = 0; i < X.v.size(); ++i) out.v[i] = X.v[i] > 0.0f ? X.v[i] : 0.0f;
    return t.push(std::move(out), {x}, [x](Tape& t, Var self) {
        const Matrix G = t.grad(self);
        const Matrix& X = t.value(x);
        Matrix& GX = t.grad_mut(x);
        for (std::size_t i = 0; i < X.v.size(); ++i)
            if (X.v[i] > 0.0f) GX.v[i] += G.v[i];
    });
}

namespace detail {

/// Rotates each (2i, 2i+1) pair inside every head by position * base^(-2i / head_dim); sign -1 inverts.
inline void rotate_pairs(Matrix& m, int heads, float theta_base, float sign) {
    const int hd = m.cols / heads;
    for (int pos = 0; pos < m.rows; ++pos)
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < hd / 2; ++i) {
                double freq = std::pow(static_cast<double>(theta_base), -2.0 * i / hd);
                double ang = sign * pos * freq;
                float c = static_cast<float>(std::cos(ang)), s = static_cast<float>(std::sin(ang));
                float& a = m(pos, h * hd + 2 * i);
                float& b = m(pos, h * hd + 2 * i + 1);
                float x0 = a, x1 = b;
                a = x0 * c - x1 * s;
                b = x0 * s + x1 * c;
            }
}

} // namespace detail

/// Rotary position embedding; row index is the position.
inline Var rope(Tape& t, Var x, int heads, float theta_base = 10000.0f) {
    Matrix out = t.value(x);
    if (out.cols % heads != 0 || (out.cols / heads) % 2 != 0) throw Error("rope: bad head layout");
    detail::rotate_pairs(out, heads, theta_base, 1.0f);
    return t.push(std::move(out), {x}, [x, heads, theta_base](Tape& t, Var self) {
        Matrix G = t.grad(self);
        detail::rotate_pairs(G, heads, theta_base, -1.0f);
        Matrix& GX = t.grad_mut(x);
        for (std::size_t i = 0; i < G.v.size(); ++i) GX.v[i] += G.v[i];
    });
}

/// Multi-head causal softmax attention over one sequence. q, k, v: n x d.
inline Var causal_attention(Tape& t, Var q, Var k, Var v, int heads) {
    const Matrix& Q = t.value(q);
    const Matrix& K = t.value(k);
    const Matrix& V = t.value(v);
    const int n = Q.rows, d = Q.cols, hd = d / heads;
    detail::require_shape(K, n, d, "causal_attention");
    detail::require_shape(V, n, d, "causal_attention");
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    // probs[h] is n x n, zero above the diagonal
    std::vector<Matrix> probs(static_cast<std::size_t>(heads), Matrix(n, n));
    Matrix out(n, d);
    for (int h = 0; h < heads; ++h) {
        Matrix& P = probs[h];
        for (int i = 0; i < n; ++i) {
            float mx = -INFINITY;
            for (int j = 0; j <= i; ++j) {
                P(i, j) = detail::dot(&Q.v[i * d + h * hd], &K.v[j * d + h * hd], hd) * scale;
                mx = std::max(mx, P(i, j));
            }
            float sum = 0.0f;
            for (int j = 0; j <= i; ++j) {
                P(i, j) = std::exp(P(i, j) - mx);
                sum += P(i, j);
            }
            for (int j = 0; j <= i; ++j) P(i, j) /= sum;
            for (int j = 0; j <= i; ++j) {
                float p = P(i, j);
                for (int c = 0; c < hd; ++c) out(i, h * hd + c) += p * V(j, h * hd + c);
            }
        }
    }
    return t.push(std::move(out), {q, k, v}, [q, k, v, heads, scale, probs = std::move(probs)](Tape& t, Var self) {
        const Matrix G = t.grad(self);
        const Matrix& Q = t.value(q);
        const Matrix& K = t.value(k);
        const Matrix& V = t.value(v);
        const int n = Q.rows, d = Q.cols, hd = d / heads;
        Matrix GQ(n, d), GK(n, d), GV(n, d);
        std::vector<float> dp(static_cast<std::size_t>(n));
        for (int h = 0; h < heads; ++h) {
            const Matrix& P = probs[h];
            for (int i = 0; i < n; ++i) {
                float rowdot = 0.0f;
                for (int j = 0; j <= i; ++j) {
                    dp[j] = detail::dot(&G.v[i * d + h * hd], &V.v[j * d + h * hd], hd);
                    rowdot += dp[j] * P(i, j);
                    for (int c = 0; c < hd; ++c) GV(j, h * hd + c) += P(i, j) * G(i, h * hd + c);
                }
                for (int j = 0; j <= i; ++j) {
                    float ds = P(i, j) * (dp[j] - rowdot) * scale;
                    if (ds == 0.0f) continue;
                    for (int c = 0; c < hd; ++c) {
                        GQ(i, h * hd + c) += ds * K(j, h * hd + c);
                        GK(j, h * hd + c) += ds * Q(i, h * hd + c);
                    }
                }
            }
        }
        auto accumulate = [&](Var p, const Matrix& src) {
            if (!t.needs_grad(p)) return;
            Matrix& dst = t.grad_mut(p);
            for (std::size_t i = 0; i < src.v.size(); ++i) dst.v[i] += src.v[i];
        };
        accumulate(q, GQ);
        accumulate(k, GK);
        accumulate(v, GV);
    });
}

/// Gathers rows of `table` (V x d) for the given ids.
inline Var embedding(Tape& t, Var table, std::span<const int> ids) {
    const Matrix& T = t.value(table);
    Matrix out(static_cast<int>(ids.size()), T.cols);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || ids[r] >= T.rows) throw Error("token id " + std::to_string(ids[r]) + " out of range");
        std::copy_n(&T.v[static_cast<std::size_t>(ids[r]) * T.cols], T.cols, &out.v[r * T.cols]);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return t.push(std::move(out), {table}, [table, idv = std::move(idv)](Tape& t, Var self) {
        const Matrix G = t.grad(self);
        Matrix& GT = t.grad_mut(table);
        for (std::size_t r = 0; r < idv.size(); ++r)
            for (int c = 0; c < G.cols; ++c) GT(idv[r], c) += G(static_cast<int>(r), c);
    });
}

/// Mean over rows -> 1 x d.
inline Var mean_rows(Tape& t, Var x) {
    const Matrix& X = t.value(x);
    if (X.rows == 0) throw Error("mean of an empty sequence");
    Matrix out(1, X.cols);
    for (int c = 0; c < X.cols; ++c) {
        double s = 0.0;
        for (int r = 0; r < X.rows; ++r) s += X(r, c);
        out.v[c] = static_cast<float>(s / X.rows);
    }
    return t.push(std::move(out), {x}, [x](Tape& t, Var self) {
        const Matrix G = t.grad(self);
        Matrix& GX = t.grad_mut(x);
        const float inv = 1.0f / static_cast<float>(GX.rows);
        for (int r = 0; r < GX.rows; ++r)
            for (int c = 0; c < GX.cols; ++c) GX(r, c) += G.v[c] * inv;
    });
}

inline Var softmax_rows(Tape& t, Var x) {
    const Matrix& X = t.value(x);
    Matrix out(X.rows, X.cols);
    for (int r = 0; r < X.rows; ++r) {
        auto row = X.row(r);
        double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (int c = 0; c < X.cols; ++c) sum += std::exp(row[c] - mx);
        for (int c = 0; c < X.cols; ++c) out(r, c) = static_cast<float>(std::exp(row[c] - mx) / sum);
    }
    return t.push(std::move(out), {x}, [x](Tape& t, Var self) {
        const Matrix G = t.grad(self);
        const Matrix& Y = t.value(self);
        Matrix& GX = t.grad_mut(x);
        for (int r = 0; r < Y.rows; ++r) {
            float s = detail::dot(&G.v[r * Y.cols], &Y.v[r * Y.cols], Y.cols);
            for (int c = 0; c < Y.cols; ++c) GX(r, c) += Y(r, c) * (G(r, c) - s);
        }
    });
}

/// out[r] = sum_i gates[r or 0][i] * outs[i][r]. Gate rows broadcast when `gates` has one row.
/// Terms with a zero gate are skipped (and may be invalid Vars); the first term is copied, so a
/// lone weight of 1 reproduces its expert exactly.
inline Var mix(Tape& t, Var gates, const std::vector<Var>& outs) {
    const Matrix& Gt = t.value(gates);
    if (static_cast<std::size_t>(Gt.cols) != outs.size()) throw Error("mix: gate count does not match experts");
    int n = -1, d = -1;
    for (auto o : outs)
        if (o.valid()) {
            n = t.value(o).rows;
            d = t.value(o).cols;
            break;
        }
    if (n < 0) throw Error("mix: no expert outputs");
    if (Gt.rows != 1 && Gt.rows != n) throw Error("mix: gate rows must be 1 or the sequence length");
    auto gate = [&Gt](int r, std::size_t i) { return Gt(Gt.rows == 1 ? 0 : r, static_cast<int>(i)); };
    Matrix out(n, d);
    for (int r = 0; r < n; ++r) {
        bool first = true;
        for (std::size_t i = 0; i < outs.size(); ++i) {
            float g = gate(r, i);
            if (g == 0.0f) continue;
            if (!outs[i].valid()) throw Error("mix: selected expert has no output");
            auto src = t.value(outs[i]).row(r);
            auto dst = out.row(r);
            for (int c = 0; c < d; ++c) dst[c] = first ? g * src[c] : dst[c] + g * src[c];
            first = false;
        }
    }
    std::vector<Var> parents{gates};
    for (auto o : outs)
        if (o.valid()) parents.push_back(o);
    return t.push(std::move(out), parents, [gates, outs](Tape& t, Var self) {
        const Matrix G = t.grad(self);
        const Matrix Gt = t.value(gates);
        auto gate = [&Gt](int r, std::size_t i) { return Gt(Gt.rows == 1 ? 0 : r, static_cast<int>(i)); };
        for (std::size_t i = 0; i < outs.size(); ++i) {
            if (!outs[i].valid()) continue;
            const Matrix& O = t.value(outs[i]);
            if (t.needs_grad(gates)) {
                Matrix& GG = t.grad_mut(gates);
                for (int r = 0; r < O.rows; ++r)
                    GG(GG.rows == 1 ? 0 : r, static_cast<int>(i)) += detail::dot(&G.v[r * O.cols], &O.v[r * O.cols], O.cols);
            }
            if (t.needs_grad(outs[i])) {
                Matrix& GO = t.grad_mut(outs[i]);
                for (int r = 0; r < O.rows; ++r) {
                    float g = gate(r, i);
                    for (int c = 0; c < O.cols; ++c) GO(r, c) += g * G(r, c);
                }
            }
        }
    });
}

/// Sums scalar (1x1) nodes and multiplies by `scale`.
inline Var sum_scaled(Tape& t, const std::vector<Var>& parts, float scale) {
    double s = 0.0;
    for (auto p : parts) s += t.value(p).v.at(0);
    Matrix out(1, 1, static_cast<float>(s * scale));
    return t.push(std::move(out), parts, [parts, scale](Tape& t, Var self) {
        float g = t.grad(self).v[0] * scale;
        for (auto p : parts)
            if (t.needs_grad(p)) t.grad_mut(p).v[0] += g;
    });
}

/// Summed next-token cross-entropy of logits rows against targets (1x1). Rows with target < 0 are skipped.
inline Var cross_entropy_sum(Tape& t, Var logits, std::span<const int> targets) {
    const Matrix& L = t.value(logits);
    if (static_cast<int>(targets.size()) != L.rows) throw Error("cross_entropy: target count does not match rows");
    double total = 0.0;
    std::vector<float> lse(static_cast<std::size_t>(L.rows));
    for (int r = 0; r < L.rows; ++r) {
        if (targets[r] < 0) continue;
        auto row = L.row(r);
        double mx = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (float x : row) s += std::exp(static_cast<double>(x) - mx);
        double l = mx + std::log(s);
        lse[r] = static_cast<float>(l);
        total += l - row[static_cast<std::size_t>(targets[r])];
    }
    std::vector<int> tg(targets.begin(), targets.end());
    return t.push(Matrix(1, 1, static_cast<float>(total)), {logits},
                  [logits, tg = std::move(tg), lse = std::move(lse)](Tape& t, Var self) {
                      float g = t.grad(self).v[0];
                      const Matrix& L = t.value(logits);
                      Matrix& GL = t.grad_mut(logits);
                      for (int r = 0; r < L.rows; ++r) {
                          if (tg[r] < 0) continue;
                          for (int c = 0; c < L.cols; ++c) GL(r, c) += g * std::exp(L(r, c) - lse[r]);
                          GL(r, tg[r]) -= g;
                      }
                  });
}

} // namespace ag
} // namespace glueforge
