#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "vivid/common.hpp"

namespace vivid {

// ---------------------------------------------------------------------------
// Dense f64 tensor with an accumulated-gradient buffer. Row-major. Rank is
// arbitrary for elementwise ops; matrix ops require rank 2, vectors rank 1,
// scalars are shape {1}. No broadcasting beyond scalar-times-tensor; the one
// structured exception is add_rowwise (bias add), which has its own exact
// backward rule.
// ---------------------------------------------------------------------------

struct Tensor {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad;    // same length as values, zero-initialized
    bool requires_grad = false;  // leaves: trainable; op outputs: grad flows here
    int node = -1;               // tape entry that produced this tensor, -1 for leaves

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }
    int rank() const { return static_cast<int>(shape.size()); }
    int rows() const { return shape[0]; }
    int cols() const { return shape[1]; }
    double& at(int r, int c) { return values[static_cast<std::size_t>(r) * shape[1] + c]; }
    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * shape[1] + c]; }

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += " x ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

inline TensorPtr make_tensor(std::vector<int> shape, std::vector<double> values,
                             bool requires_grad = false) {
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    for (int d : t->shape) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(t->shape));
    }
    if (t->shape.empty()) throw ShapeError("tensor rank must be at least 1");
    if (static_cast<std::int64_t>(values.size()) != t->numel()) {
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(t->shape));
    }
    t->values = std::move(values);
    t->grad.assign(t->values.size(), 0.0);
    t->requires_grad = requires_grad;
    return t;
}

inline TensorPtr zeros(std::vector<int> shape, bool requires_grad = false) {
    std::vector<int> s = shape;
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return make_tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                       requires_grad);
}

inline TensorPtr full(std::vector<int> shape, double value, bool requires_grad = false) {
    std::vector<int> s = shape;
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return make_tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), value),
                       requires_grad);
}

inline TensorPtr scalar_tensor(double value, bool requires_grad = false) {
    return make_tensor({1}, {value}, requires_grad);
}

inline TensorPtr randn(Rng& rng, std::vector<int> shape, double stddev, bool requires_grad = false) {
    std::vector<int> s = shape;
    std::int64_t n = 1;
    for (int d : s) n *= d;
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.gaussian(stddev);
    return make_tensor(std::move(s), std::move(v), requires_grad);
}

// ---------------------------------------------------------------------------
// Tape: ordered record of operations for reverse-mode differentiation.
// Inputs always precede their consumers, so replaying the entries in reverse
// visits each node exactly once. One tape per training step / per sample;
// a single tape must not be recorded onto from multiple threads.
// ---------------------------------------------------------------------------

class Tape {
  public:
    struct Entry {
        std::vector<int> inputs;  // node ids of inputs, -1 for leaves
        int output = -1;
        TensorPtr out;
        std::function<void()> backward;
    };

    int record(const std::vector<TensorPtr>& inputs, const TensorPtr& output,
               std::function<void()> backward) {
        const int id = static_cast<int>(entries_.size());
        Entry e;
        e.inputs.reserve(inputs.size());
        for (const auto& in : inputs) e.inputs.push_back(in->node);
        e.output = id;
        e.out = output;
        e.backward = std::move(backward);
        output->node = id;
        entries_.push_back(std::move(e));
        return id;
    }

    // Seeds d(loss)/d(loss) = 1 and replays all rules in reverse order. The
    // grads of tensors this tape produced are cleared first, so every call
    // deposits exactly one gradient unit into the leaves: calling twice
    // accumulates exactly 2x there.
    void backward(const TensorPtr& loss) {
        if (loss->numel() != 1) {
            throw ShapeError("backward requires a scalar loss, got " + shape_str(loss->shape));
        }
        for (auto& e : entries_) e.out->zero_grad();
        loss->grad[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->backward) it->backward();
        }
    }

    void clear() { entries_.clear(); }
    std::size_t size() const { return entries_.size(); }
    const Entry& entry(std::size_t i) const { return entries_[i]; }

  private:
    std::vector<Entry> entries_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const TensorPtr*> ts) {
    for (const auto* t : ts) {
        if ((*t)->requires_grad) return true;
    }
    return false;
}

inline void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->shape != b->shape) {
        throw ShapeError(std::string(op) + ": shape mismatch: " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    }
}

inline void require_matrix(const TensorPtr& t, const char* op) {
    if (t->rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " + shape_str(t->shape));
    }
}

inline void require_vector(const TensorPtr& t, const char* op) {
    if (t->rank() != 1) {
        throw ShapeError(std::string(op) + ": expected a rank-1 tensor, got " + shape_str(t->shape));
    }
}

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_accumulate(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<std::size_t>(i) * n;
        const double* ai = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// c[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt_accumulate(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn_accumulate(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        const double* bi = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = ai[p];
            double* cp = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] += aip * bi[j];
        }
    }
}

// Backward rules stage multi-term contributions in a scratch buffer and then
// deposit with one += per entry. A rule that touches each grad entry exactly
// once per invocation makes repeated backward passes add identical increments,
// which keeps double-backward exactly 2x on single-consumer graphs.
inline void deposit(std::vector<double>& grad, const std::vector<double>& delta) {
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    detail::require_same_shape(a, b, "add");
    auto out = zeros(a->shape);
    const std::size_t n = a->values.size();
    for (std::size_t i = 0; i < n; ++i) out->values[i] = a->values[i] + b->values[i];
    out->requires_grad = a->requires_grad || b->requires_grad;
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out]() {
            const std::size_t m = out->grad.size();
            if (a->requires_grad) {
                for (std::size_t i = 0; i < m; ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                for (std::size_t i = 0; i < m; ++i) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

inline TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    detail::require_same_shape(a, b, "mul");
    auto out = zeros(a->shape);
    const std::size_t n = a->values.size();
    for (std::size_t i = 0; i < n; ++i) out->values[i] = a->values[i] * b->values[i];
    out->requires_grad = a->requires_grad || b->requires_grad;
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out]() {
            const std::size_t m = out->grad.size();
            if (a->requires_grad) {
                for (std::size_t i = 0; i < m; ++i) a->grad[i] += out->grad[i] * b->values[i];
            }
            if (b->requires_grad) {
                for (std::size_t i = 0; i < m; ++i) b->grad[i] += out->grad[i] * a->values[i];
            }
        });
    }
    return out;
}

inline TensorPtr scale(Tape& tape, const TensorPtr& a, double c) {
    auto out = zeros(a->shape);
    const std::size_t n = a->values.size();
    for (std::size_t i = 0; i < n; ++i) out->values[i] = a->values[i] * c;
    out->requires_grad = a->requires_grad;
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, c]() {
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * c;
        });
    }
    return out;
}

// m[r x c] + v[c] added to every row. Backward for v sums over rows.
inline TensorPtr add_rowwise(Tape& tape, const TensorPtr& m, const TensorPtr& v) {
    detail::require_matrix(m, "add_rowwise");
    detail::require_vector(v, "add_rowwise");
    if (m->cols() != v->shape[0]) {
        throw ShapeError("add_rowwise: width mismatch: " + shape_str(m->shape) + " vs " +
                         shape_str(v->shape));
    }
    auto out = zeros(m->shape);
    const int r = m->rows(), c = m->cols();
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) out->at(i, j) = m->at(i, j) + v->values[j];
    }
    out->requires_grad = m->requires_grad || v->requires_grad;
    if (out->requires_grad) {
        tape.record({m, v}, out, [m, v, out, r, c]() {
            if (m->requires_grad) {
                for (std::size_t i = 0; i < out->grad.size(); ++i) m->grad[i] += out->grad[i];
            }
            if (v->requires_grad) {
                std::vector<double> dv(static_cast<std::size_t>(c), 0.0);
                for (int i = 0; i < r; ++i) {
                    const double* g = out->grad.data() + static_cast<std::size_t>(i) * c;
                    for (int j = 0; j < c; ++j) dv[j] += g[j];
                }
                detail::deposit(v->grad, dv);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    if (a->cols() != b->rows()) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    }
    const int m = a->rows(), k = a->cols(), n = b->cols();
    auto out = zeros({m, n});
    detail::gemm_accumulate(a->values.data(), b->values.data(), out->values.data(), m, k, n);
    out->requires_grad = a->requires_grad || b->requires_grad;
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out, m, k, n]() {
            if (a->requires_grad) {  // dA += dC * B^T (single += per entry already)
                detail::gemm_nt_accumulate(out->grad.data(), b->values.data(), a->grad.data(), m, n, k);
            }
            if (b->requires_grad) {  // dB += A^T * dC
                std::vector<double> db(b->values.size(), 0.0);
                detail::gemm_tn_accumulate(a->values.data(), out->grad.data(), db.data(), m, k, n);
                detail::deposit(b->grad, db);
            }
        });
    }
    return out;
}

inline TensorPtr transpose(Tape& tape, const TensorPtr& a) {
    detail::require_matrix(a, "transpose");
    const int r = a->rows(), c = a->cols();
    auto out = zeros({c, r});
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) out->at(j, i) = a->at(i, j);
    }
    out->requires_grad = a->requires_grad;
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, r, c]() {
            for (int i = 0; i < r; ++i) {
                for (int j = 0; j < c; ++j) {
                    a->grad[static_cast<std::size_t>(i) * c + j] +=
                        out->grad[static_cast<std::size_t>(j) * r + i];
                }
            }
        });
    }
    return out;
}

// q[M x d] k[L x d] -> q k^T / sqrt(d). The attention-score product.
inline TensorPtr scaled_dot(Tape& tape, const TensorPtr& q, const TensorPtr& k) {
    detail::require_matrix(q, "scaled_dot");
    detail::require_matrix(k, "scaled_dot");
    if (q->cols() != k->cols()) {
        throw ShapeError("scaled_dot: width mismatch: " + shape_str(q->shape) + " vs " +
                         shape_str(k->shape));
    }
    const int m = q->rows(), d = q->cols(), l = k->rows();
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    auto out = zeros({m, l});
    detail::gemm_nt_accumulate(q->values.data(), k->values.data(), out->values.data(), m, d, l);
    for (auto& x : out->values) x *= inv;
    out->requires_grad = q->requires_grad || k->requires_grad;
    if (out->requires_grad) {
        tape.record({q, k}, out, [q, k, out, m, d, l, inv]() {
            std::vector<double> g(out->grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = out->grad[i] * inv;
            if (q->requires_grad) {  // dQ += g * K
                std::vector<double> dq(q->values.size(), 0.0);
                detail::gemm_accumulate(g.data(), k->values.data(), dq.data(), m, l, d);
                detail::deposit(q->grad, dq);
            }
            if (k->requires_grad) {  // dK += g^T * Q
                std::vector<double> dk(k->values.size(), 0.0);
                detail::gemm_tn_accumulate(g.data(), q->values.data(), dk.data(), m, l, d);
                detail::deposit(k->grad, dk);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

inline TensorPtr softmax_rows(Tape& tape, const TensorPtr& x) {
    detail::require_matrix(x, "softmax_rows");
    for (double v : x->values) {
        if (!std::isfinite(v)) throw DomainError("softmax_rows: non-finite input");
    }
    const int r = x->rows(), c = x->cols();
    auto out = zeros({r, c});
    for (int i = 0; i < r; ++i) {
        const double* xi = x->values.data() + static_cast<std::size_t>(i) * c;
        double* yi = out->values.data() + static_cast<std::size_t>(i) * c;
        double mx = xi[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            sum += yi[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < c; ++j) yi[j] *= inv;
    }
    out->requires_grad = x->requires_grad;
    if (out->requires_grad) {
        tape.record({x}, out, [x, out, r, c]() {
            for (int i = 0; i < r; ++i) {
                const double* y = out->values.data() + static_cast<std::size_t>(i) * c;
                const double* gy = out->grad.data() + static_cast<std::size_t>(i) * c;
                double* gx = x->grad.data() + static_cast<std::size_t>(i) * c;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += gy[j] * y[j];
                for (int j = 0; j < c; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        });
    }
    return out;
}

// Row softmax restricted to `allowed` entries (row-major bytes, size r*c).
// Disallowed inputs are never read; disallowed outputs are exactly 0. Every
// row needs at least one allowed entry.
inline TensorPtr masked_softmax_rows(Tape& tape, const TensorPtr& x,
                                     const std::vector<std::uint8_t>& allowed) {
    detail::require_matrix(x, "masked_softmax_rows");
    const int r = x->rows(), c = x->cols();
    if (allowed.size() != x->values.size()) {
        throw ShapeError("masked_softmax_rows: mask size " + std::to_string(allowed.size()) +
                         " does not match " + shape_str(x->shape));
    }
    auto out = zeros({r, c});
    for (int i = 0; i < r; ++i) {
        const double* xi = x->values.data() + static_cast<std::size_t>(i) * c;
        const std::uint8_t* mi = allowed.data() + static_cast<std::size_t>(i) * c;
        double* yi = out->values.data() + static_cast<std::size_t>(i) * c;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j) {
            if (!mi[j]) continue;
            if (!std::isfinite(xi[j])) throw DomainError("masked_softmax_rows: non-finite input");
            mx = std::max(mx, xi[j]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw DomainError("masked_softmax_rows: row " + std::to_string(i) +
                              " has no allowed entries");
        }
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            if (!mi[j]) continue;
            yi[j] = std::exp(xi[j] - mx);
            sum += yi[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < c; ++j) {
            if (mi[j]) yi[j] *= inv;
        }
    }
    out->requires_grad = x->requires_grad;
    if (out->requires_grad) {
        tape.record({x}, out, [x, out, r, c]() {
            for (int i = 0; i < r; ++i) {
                const double* y = out->values.data() + static_cast<std::size_t>(i) * c;
                const double* gy = out->grad.data() + static_cast<std::size_t>(i) * c;
                double* gx = x->grad.data() + static_cast<std::size_t>(i) * c;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += gy[j] * y[j];
                for (int j = 0; j < c; ++j) gx[j] += y[j] * (gy[j] - dot);  // y=0 where masked
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

// Exact GELU: x * Phi(x) with the Gaussian CDF, not the tanh approximation.
inline TensorPtr gelu(Tape& tape, const TensorPtr& x) {
    auto out = zeros(x->shape);
    const std::size_t n = x->values.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x->values[i];
        out->values[i] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
    }
    out->requires_grad = x->requires_grad;
    if (out->requires_grad) {
        tape.record({x}, out, [x, out, n]() {
            constexpr double kInvSqrt2Pi = 0.3989422804014326779;
            for (std::size_t i = 0; i < n; ++i) {
                const double v = x->values[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                x->grad[i] += out->grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// Row-wise layer normalization with learnable gain/bias vectors.
inline TensorPtr layer_norm(Tape& tape, const TensorPtr& x, const TensorPtr& gamma,
                            const TensorPtr& beta, double eps = 1e-5) {
    detail::require_matrix(x, "layer_norm");
    detail::require_vector(gamma, "layer_norm");
    detail::require_vector(beta, "layer_norm");
    const int r = x->rows(), c = x->cols();
    if (gamma->shape[0] != c || beta->shape[0] != c) {
        throw ShapeError("layer_norm: gain/bias width must be " + std::to_string(c));
    }
    auto out = zeros({r, c});
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(r) * c);
    auto inv_std = std::make_shared<std::vector<double>>(r);
    for (int i = 0; i < r; ++i) {
        const double* xi = x->values.data() + static_cast<std::size_t>(i) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += xi[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = xi[j] - mean;
            var += d * d;
        }
        var /= c;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = inv;
        double* xh = xhat->data() + static_cast<std::size_t>(i) * c;
        double* yi = out->values.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
            xh[j] = (xi[j] - mean) * inv;
            yi[j] = xh[j] * gamma->values[j] + beta->values[j];
        }
    }
    out->requires_grad = x->requires_grad || gamma->requires_grad || beta->requires_grad;
    if (out->requires_grad) {
        tape.record({x, gamma, beta}, out, [x, gamma, beta, out, xhat, inv_std, r, c]() {
            std::vector<double> dgamma, dbeta;
            if (gamma->requires_grad) dgamma.assign(static_cast<std::size_t>(c), 0.0);
            if (beta->requires_grad) dbeta.assign(static_cast<std::size_t>(c), 0.0);
            for (int i = 0; i < r; ++i) {
                const double* gy = out->grad.data() + static_cast<std::size_t>(i) * c;
                const double* xh = xhat->data() + static_cast<std::size_t>(i) * c;
                if (gamma->requires_grad) {
                    for (int j = 0; j < c; ++j) dgamma[j] += gy[j] * xh[j];
                }
                if (beta->requires_grad) {
                    for (int j = 0; j < c; ++j) dbeta[j] += gy[j];
                }
                if (x->requires_grad) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int j = 0; j < c; ++j) {
                        const double g = gy[j] * gamma->values[j];
                        sum_g += g;
                        sum_gx += g * xh[j];
                    }
                    const double inv = (*inv_std)[i];
                    double* gx = x->grad.data() + static_cast<std::size_t>(i) * c;
                    for (int j = 0; j < c; ++j) {
                        const double g = gy[j] * gamma->values[j];
                        gx[j] += inv * (g - sum_g / c - xh[j] * sum_gx / c);
                    }
                }
            }
            if (gamma->requires_grad) detail::deposit(gamma->grad, dgamma);
            if (beta->requires_grad) detail::deposit(beta->grad, dbeta);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gather / reshuffle ops
// ---------------------------------------------------------------------------

// Row gather: serves both embedding lookup (table, token ids) and patch-token
// selection (features, strided row ids). Backward scatter-adds into the table.
inline TensorPtr lookup_rows(Tape& tape, const TensorPtr& table, const std::vector<int>& ids) {
    detail::require_matrix(table, "lookup_rows");
    const int r = table->rows(), c = table->cols();
    for (int id : ids) {
        if (id < 0 || id >= r) {
            throw IndexError("lookup_rows: id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(r) + ")");
        }
    }
    if (ids.empty()) throw ShapeError("lookup_rows: empty id list");
    auto out = zeros({static_cast<int>(ids.size()), c});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const double* src = table->values.data() + static_cast<std::size_t>(ids[i]) * c;
        double* dst = out->values.data() + i * c;
        std::copy(src, src + c, dst);
    }
    out->requires_grad = table->requires_grad;
    if (out->requires_grad) {
        auto ids_copy = ids;
        tape.record({table}, out, [table, out, ids_copy, c]() {
            std::vector<double> dt(table->values.size(), 0.0);
            for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                double* dst = dt.data() + static_cast<std::size_t>(ids_copy[i]) * c;
                const double* g = out->grad.data() + i * c;
                for (int j = 0; j < c; ++j) dst[j] += g[j];
            }
            detail::deposit(table->grad, dt);
        });
    }
    return out;
}

inline TensorPtr concat_rows(Tape& tape, const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input list");
    const int c = parts[0]->rank() == 2 ? parts[0]->cols() : -1;
    int total = 0;
    bool needs = false;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_rows");
        if (p->cols() != c) {
            throw ShapeError("concat_rows: column mismatch: " + shape_str(parts[0]->shape) + " vs " +
                             shape_str(p->shape));
        }
        total += p->rows();
        needs = needs || p->requires_grad;
    }
    auto out = zeros({total, c});
    int row = 0;
    for (const auto& p : parts) {
        std::copy(p->values.begin(), p->values.end(),
                  out->values.begin() + static_cast<std::size_t>(row) * c);
        row += p->rows();
    }
    out->requires_grad = needs;
    if (needs) {
        auto parts_copy = parts;
        tape.record(parts, out, [parts_copy, out, c]() {
            int r0 = 0;
            for (const auto& p : parts_copy) {
                if (p->requires_grad) {
                    const double* g = out->grad.data() + static_cast<std::size_t>(r0) * c;
                    for (std::size_t i = 0; i < p->values.size(); ++i) p->grad[i] += g[i];
                }
                r0 += p->rows();
            }
        });
    }
    return out;
}

inline TensorPtr concat_cols(Tape& tape, const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input list");
    detail::require_matrix(parts[0], "concat_cols");
    const int r = parts[0]->rows();
    int total = 0;
    bool needs = false;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_cols");
        if (p->rows() != r) {
            throw ShapeError("concat_cols: row mismatch: " + shape_str(parts[0]->shape) + " vs " +
                             shape_str(p->shape));
        }
        total += p->cols();
        needs = needs || p->requires_grad;
    }
    auto out = zeros({r, total});
    int col = 0;
    for (const auto& p : parts) {
        const int pc = p->cols();
        for (int i = 0; i < r; ++i) {
            std::copy(p->values.begin() + static_cast<std::size_t>(i) * pc,
                      p->values.begin() + static_cast<std::size_t>(i + 1) * pc,
                      out->values.begin() + static_cast<std::size_t>(i) * total + col);
        }
        col += pc;
    }
    out->requires_grad = needs;
    if (needs) {
        auto parts_copy = parts;
        tape.record(parts, out, [parts_copy, out, r, total]() {
            int c0 = 0;
            for (const auto& p : parts_copy) {
                const int pc = p->cols();
                if (p->requires_grad) {
                    for (int i = 0; i < r; ++i) {
                        const double* g = out->grad.data() + static_cast<std::size_t>(i) * total + c0;
                        double* dst = p->grad.data() + static_cast<std::size_t>(i) * pc;
                        for (int j = 0; j < pc; ++j) dst[j] += g[j];
                    }
                }
                c0 += pc;
            }
        });
    }
    return out;
}

// Submatrix copy [r0, r1) x [c0, c1).
inline TensorPtr slice(Tape& tape, const TensorPtr& a, int r0, int r1, int c0, int c1) {
    detail::require_matrix(a, "slice");
    if (r0 < 0 || c0 < 0 || r1 > a->rows() || c1 > a->cols() || r0 >= r1 || c0 >= c1) {
        throw ShapeError("slice: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ")x[" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                         shape_str(a->shape));
    }
    const int rc = a->cols();
    auto out = zeros({r1 - r0, c1 - c0});
    for (int i = r0; i < r1; ++i) {
        std::copy(a->values.begin() + static_cast<std::size_t>(i) * rc + c0,
                  a->values.begin() + static_cast<std::size_t>(i) * rc + c1,
                  out->values.begin() + static_cast<std::size_t>(i - r0) * (c1 - c0));
    }
    out->requires_grad = a->requires_grad;
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, r0, r1, c0, c1, rc]() {
            const int w = c1 - c0;
            for (int i = r0; i < r1; ++i) {
                const double* g = out->grad.data() + static_cast<std::size_t>(i - r0) * w;
                double* dst = a->grad.data() + static_cast<std::size_t>(i) * rc + c0;
                for (int j = 0; j < w; ++j) dst[j] += g[j];
            }
        });
    }
    return out;
}

inline TensorPtr slice_rows(Tape& tape, const TensorPtr& a, int r0, int r1) {
    return slice(tape, a, r0, r1, 0, a->cols());
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline TensorPtr sum_all(Tape& tape, const TensorPtr& a) {
    double s = 0.0;
    for (double v : a->values) s += v;
    auto out = scalar_tensor(s);
    out->requires_grad = a->requires_grad;
    if (out->requires_grad) {
        tape.record({a}, out, [a, out]() {
            const double g = out->grad[0];
            for (auto& x : a->grad) x += g;
        });
    }
    return out;
}

inline TensorPtr frobenius_sq(Tape& tape, const TensorPtr& a) {
    double s = 0.0;
    for (double v : a->values) s += v * v;
    auto out = scalar_tensor(s);
    out->requires_grad = a->requires_grad;
    if (out->requires_grad) {
        tape.record({a}, out, [a, out]() {
            const double g = out->grad[0];
            for (std::size_t i = 0; i < a->values.size(); ++i) a->grad[i] += 2.0 * a->values[i] * g;
        });
    }
    return out;
}

// -sum_t w_t * log softmax(logits_t)[target_t], computed with log-sum-exp.
// Positions with weight 0 contribute exactly zero to value and gradient:
// they are skipped, not multiplied.
inline TensorPtr weighted_cross_entropy(Tape& tape, const TensorPtr& logits,
                                        const std::vector<int>& targets,
                                        const std::vector<double>& weights) {
    detail::require_matrix(logits, "weighted_cross_entropy");
    const int t_len = logits->rows(), vocab = logits->cols();
    if (static_cast<int>(targets.size()) != t_len || static_cast<int>(weights.size()) != t_len) {
        throw ShapeError("weighted_cross_entropy: logits " + shape_str(logits->shape) + " vs " +
                         std::to_string(targets.size()) + " targets, " +
                         std::to_string(weights.size()) + " weights");
    }
    for (int id : targets) {
        if (id < 0 || id >= vocab) {
            throw IndexError("weighted_cross_entropy: target id " + std::to_string(id) +
                             " out of vocabulary [0, " + std::to_string(vocab) + ")");
        }
    }
    for (double w : weights) {
        if (!(w >= 0.0)) throw DomainError("weighted_cross_entropy: weights must be nonnegative");
    }
    // Cache softmax probabilities of weighted rows for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(logits->values.size(), 0.0);
    double loss = 0.0;
    for (int t = 0; t < t_len; ++t) {
        if (weights[t] == 0.0) continue;
        const double* z = logits->values.data() + static_cast<std::size_t>(t) * vocab;
        double mx = z[0];
        for (int v = 1; v < vocab; ++v) mx = std::max(mx, z[v]);
        double sum = 0.0;
        double* p = probs->data() + static_cast<std::size_t>(t) * vocab;
        for (int v = 0; v < vocab; ++v) {
            p[v] = std::exp(z[v] - mx);
            sum += p[v];
        }
        const double inv = 1.0 / sum;
        for (int v = 0; v < vocab; ++v) p[v] *= inv;
        loss += weights[t] * (std::log(sum) + mx - z[targets[t]]);
    }
    auto out = scalar_tensor(loss);
    out->requires_grad = logits->requires_grad;
    if (out->requires_grad) {
        auto targets_copy = targets;
        auto weights_copy = weights;
        tape.record({logits}, out, [logits, out, probs, targets_copy, weights_copy, t_len, vocab]() {
            const double g = out->grad[0];
            for (int t = 0; t < t_len; ++t) {
                const double w = weights_copy[t];
                if (w == 0.0) continue;
                const double* p = probs->data() + static_cast<std::size_t>(t) * vocab;
                double* gz = logits->grad.data() + static_cast<std::size_t>(t) * vocab;
                const double gw = g * w;
                const int tgt = targets_copy[t];
                for (int v = 0; v < vocab; ++v) {
                    gz[v] += gw * (p[v] - (v == tgt ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

// Mean sigmoid binary cross-entropy over entries with weight 1; entries with
// weight 0 are excluded from both the mean and the gradient. Numerically
// stable log1p/exp formulation.
inline TensorPtr sigmoid_bce(Tape& tape, const TensorPtr& logits, const std::vector<double>& targets,
                             const std::vector<double>& weights) {
    if (targets.size() != logits->values.size() || weights.size() != logits->values.size()) {
        throw ShapeError("sigmoid_bce: logits " + shape_str(logits->shape) + " vs " +
                         std::to_string(targets.size()) + " targets, " +
                         std::to_string(weights.size()) + " weights");
    }
    double wsum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw DomainError("sigmoid_bce: weights must be nonnegative");
        wsum += w;
    }
    double loss = 0.0;
    if (wsum > 0.0) {
        for (std::size_t i = 0; i < targets.size(); ++i) {
            if (weights[i] == 0.0) continue;
            const double z = logits->values[i];
            const double y = targets[i];
            loss += weights[i] * (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))));
        }
        loss /= wsum;
    }
    auto out = scalar_tensor(loss);
    out->requires_grad = logits->requires_grad;
    if (out->requires_grad && wsum > 0.0) {
        auto targets_copy = targets;
        auto weights_copy = weights;
        tape.record({logits}, out, [logits, out, targets_copy, weights_copy, wsum]() {
            const double g = out->grad[0] / wsum;
            for (std::size_t i = 0; i < targets_copy.size(); ++i) {
                if (weights_copy[i] == 0.0) continue;
                const double z = logits->values[i];
                const double sig = 1.0 / (1.0 + std::exp(-z));
                logits->grad[i] += g * weights_copy[i] * (sig - targets_copy[i]);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    bool ok = true;
    std::string note;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    bool passed = true;
    double worst = 0.0;

    std::string summary() const {
        std::string s;
        for (const auto& e : entries) {
            s += (e.ok ? "pass " : "FAIL ") + e.name + " max_rel_err=" +
                 std::to_string(e.max_rel_err) + (e.note.empty() ? "" : " (" + e.note + ")") + "\n";
        }
        s += passed ? "grad check passed" : "grad check FAILED";
        return s;
    }
};

// Relative error with a unit floor: |a - b| / max(1, |a|, |b|). Gradients of
// order 1 are compared relatively; tiny gradients effectively absolutely.
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Central finite differences against the tape gradient for every entry of
// every listed parameter. f must be deterministic in the parameters.
inline GradCheckReport grad_check(const std::function<TensorPtr(Tape&)>& f,
                                  const std::vector<std::pair<std::string, TensorPtr>>& params,
                                  double eps, double tol) {
    if (!(eps > 0.0)) throw DomainError("grad_check: eps must be positive");
    GradCheckReport report;

    for (const auto& [name, p] : params) p->zero_grad();
    {
        Tape tape;
        auto out = f(tape);
        if (out->numel() != 1) throw ShapeError("grad_check: f must return a scalar");
        tape.backward(out);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, p] : params) analytic.push_back(p->grad);

    auto eval = [&]() -> double {
        Tape tape;
        auto out = f(tape);
        return out->values[0];
    };

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& [name, p] = params[pi];
        GradCheckEntry entry;
        entry.name = name;
        for (std::size_t i = 0; i < p->values.size(); ++i) {
            const double orig = p->values[i];
            p->values[i] = orig + eps;
            const double f_plus = eval();
            p->values[i] = orig - eps;
            const double f_minus = eval();
            p->values[i] = orig;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
                entry.ok = false;
                entry.note = "non-finite value at perturbed entry " + std::to_string(i);
                entry.max_rel_err = std::numeric_limits<double>::infinity();
                break;
            }
            const double fd = (f_plus - f_minus) / (2.0 * eps);
            entry.max_rel_err = std::max(entry.max_rel_err, rel_err(analytic[pi][i], fd));
        }
        if (entry.ok && entry.max_rel_err > tol) entry.ok = false;
        report.worst = std::max(report.worst, entry.max_rel_err);
        report.passed = report.passed && entry.ok;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace vivid
