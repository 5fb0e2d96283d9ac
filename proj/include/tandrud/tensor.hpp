#pragma once

// Dense 64-bit tensors plus a tape for reverse-mode differentiation.
// Everything the model computes goes through ops on a Tape; backward()
// sweeps the tape in reverse and accumulates gradients per node.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tandrud {

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> values;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        values.assign(numel(), 0.0);
    }
    Tensor(std::vector<std::size_t> s, std::vector<double> v)
        : shape(std::move(s)), values(std::move(v)) {
        if (numel() != values.size())
            throw DimensionError("tensor shape/value count mismatch");
    }

    std::size_t numel() const {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               std::multiplies<>());
    }
    std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

    bool finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }
    static Tensor vec(std::vector<double> v) {
        std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    std::string shape_str() const {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < shape.size(); ++i)
            os << shape[i] << (i + 1 < shape.size() ? "," : "");
        os << ')';
        return os.str();
    }
};

using Var = std::int32_t;  // node id on a tape

class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&)> back;  // null for leaves/constants
    };

    Var leaf(Tensor t) { return push(std::move(t), nullptr); }
    Var constant(Tensor t) { return push(std::move(t), nullptr); }

    const Tensor& value(Var v) const { return nodes_[v].value; }
    const Tensor& grad(Var v) const { return nodes_[v].grad; }
    Tensor& grad_mut(Var v) { return nodes_[v].grad; }
    std::size_t size() const { return nodes_.size(); }

    // ---- ops ----

    Var matmul(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        require_matrix(A, "matmul lhs");
        require_matrix(B, "matmul rhs");
        if (A.cols() != B.rows())
            throw DimensionError("matmul: inner dimensions disagree, lhs " +
                                 A.shape_str() + " rhs " + B.shape_str());
        std::size_t m = A.rows(), k = A.cols(), n = B.cols();
        Tensor out({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
                double av = A.at(i, l);
                if (av == 0.0) continue;
                for (std::size_t j = 0; j < n; ++j)
                    out.at(i, j) += av * B.at(l, j);
            }
        return push(std::move(out), [a, b](Tape& t) {
            Var self = t.current_;
            const Tensor& g = t.grad(self);
            const Tensor& A = t.value(a);
            const Tensor& B = t.value(b);
            Tensor& ga = t.grad_mut(a);
            Tensor& gb = t.grad_mut(b);
            std::size_t m = A.rows(), k = A.cols(), n = B.cols();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t l = 0; l < k; ++l) {
                    double acc = 0;
                    for (std::size_t j = 0; j < n; ++j)
                        acc += g.at(i, j) * B.at(l, j);
                    ga.at(i, l) += acc;
                }
            for (std::size_t l = 0; l < k; ++l)
                for (std::size_t j = 0; j < n; ++j) {
                    double acc = 0;
                    for (std::size_t i = 0; i < m; ++i)
                        acc += A.at(i, l) * g.at(i, j);
                    gb.at(l, j) += acc;
                }
        });
    }

    // A * B^T; saves a transpose node for the attention logit matrices.
    Var matmul_nt(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        require_matrix(A, "matmul_nt lhs");
        require_matrix(B, "matmul_nt rhs");
        if (A.cols() != B.cols())
            throw DimensionError("matmul_nt: inner dimensions disagree, lhs " +
                                 A.shape_str() + " rhs " + B.shape_str());
        std::size_t m = A.rows(), k = A.cols(), n = B.rows();
        Tensor out({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0;
                for (std::size_t l = 0; l < k; ++l)
                    acc += A.at(i, l) * B.at(j, l);
                out.at(i, j) = acc;
            }
        return push(std::move(out), [a, b](Tape& t) {
            Var self = t.current_;
            const Tensor& g = t.grad(self);
            const Tensor& A = t.value(a);
            const Tensor& B = t.value(b);
            Tensor& ga = t.grad_mut(a);
            Tensor& gb = t.grad_mut(b);
            std::size_t m = A.rows(), k = A.cols(), n = B.rows();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t l = 0; l < k; ++l) {
                    double acc = 0;
                    for (std::size_t j = 0; j < n; ++j)
                        acc += g.at(i, j) * B.at(j, l);
                    ga.at(i, l) += acc;
                }
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t l = 0; l < k; ++l) {
                    double acc = 0;
                    for (std::size_t i = 0; i < m; ++i)
                        acc += g.at(i, j) * A.at(i, l);
                    gb.at(j, l) += acc;
                }
        });
    }

    // M[m x k] * v[k] -> [m]
    Var matvec(Var a, Var x) {
        const Tensor& A = value(a);
        const Tensor& v = value(x);
        if (A.cols() != v.numel())
            throw DimensionError("matvec: dims disagree, matrix " + A.shape_str() +
                                 " vector " + v.shape_str());
        std::size_t m = A.rows(), k = A.cols();
        Tensor out({m});
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0;
            for (std::size_t l = 0; l < k; ++l) acc += A.at(i, l) * v.values[l];
            out.values[i] = acc;
        }
        return push(std::move(out), [a, x](Tape& t) {
            Var self = t.current_;
            const Tensor& g = t.grad(self);
            const Tensor& A = t.value(a);
            const Tensor& v = t.value(x);
            Tensor& ga = t.grad_mut(a);
            Tensor& gx = t.grad_mut(x);
            std::size_t m = A.rows(), k = A.cols();
            for (std::size_t i = 0; i < m; ++i) {
                double gi = g.values[i];
                for (std::size_t l = 0; l < k; ++l) {
                    ga.at(i, l) += gi * v.values[l];
                    gx.values[l] += gi * A.at(i, l);
                }
            }
        });
    }

    // v[m]^T * M[m x k] -> [k]
    Var vecmat(Var x, Var a) {
        const Tensor& v = value(x);
        const Tensor& A = value(a);
        if (A.rows() != v.numel())
            throw DimensionError("vecmat: dims disagree, vector " + v.shape_str() +
                                 " matrix " + A.shape_str());
        std::size_t m = A.rows(), k = A.cols();
        Tensor out({k});
        for (std::size_t i = 0; i < m; ++i) {
            double vi = v.values[i];
            if (vi == 0.0) continue;
            for (std::size_t l = 0; l < k; ++l) out.values[l] += vi * A.at(i, l);
        }
        return push(std::move(out), [x, a](Tape& t) {
            Var self = t.current_;
            const Tensor& g = t.grad(self);
            const Tensor& v = t.value(x);
            const Tensor& A = t.value(a);
            Tensor& gx = t.grad_mut(x);
            Tensor& ga = t.grad_mut(a);
            std::size_t m = A.rows(), k = A.cols();
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0;
                for (std::size_t l = 0; l < k; ++l) {
                    acc += g.values[l] * A.at(i, l);
                    ga.at(i, l) += v.values[i] * g.values[l];
                }
                gx.values[i] += acc;
            }
        });
    }

    Var add(Var a, Var b) {
        return binary_same_shape(a, b, "add",
                                 [](double x, double y) { return x + y; },
                                 [](Tape& t, Var self, Var a, Var b) {
                                     const Tensor& g = t.grad(self);
                                     Tensor& ga = t.grad_mut(a);
                                     Tensor& gb = t.grad_mut(b);
                                     for (std::size_t i = 0; i < g.values.size(); ++i) {
                                         ga.values[i] += g.values[i];
                                         gb.values[i] += g.values[i];
                                     }
                                 });
    }

    Var sub(Var a, Var b) {
        return binary_same_shape(a, b, "sub",
                                 [](double x, double y) { return x - y; },
                                 [](Tape& t, Var self, Var a, Var b) {
                                     const Tensor& g = t.grad(self);
                                     Tensor& ga = t.grad_mut(a);
                                     Tensor& gb = t.grad_mut(b);
                                     for (std::size_t i = 0; i < g.values.size(); ++i) {
                                         ga.values[i] += g.values[i];
                                         gb.values[i] -= g.values[i];
                                     }
                                 });
    }

    Var mul(Var a, Var b) {
        return binary_same_shape(a, b, "mul",
                                 [](double x, double y) { return x * y; },
                                 [](Tape& t, Var self, Var a, Var b) {
                                     const Tensor& g = t.grad(self);
                                     const Tensor& A = t.value(a);
                                     const Tensor& B = t.value(b);
                                     Tensor& ga = t.grad_mut(a);
                                     Tensor& gb = t.grad_mut(b);
                                     for (std::size_t i = 0; i < g.values.size(); ++i) {
                                         ga.values[i] += g.values[i] * B.values[i];
                                         gb.values[i] += g.values[i] * A.values[i];
                                     }
                                 });
    }

    // M[i x d] + row-broadcast v[d]
    Var add_row_broadcast(Var a, Var x) {
        const Tensor& A = value(a);
        const Tensor& v = value(x);
        if (A.cols() != v.numel())
            throw DimensionError("add_row_broadcast: dims disagree");
        Tensor out = A;
        for (std::size_t i = 0; i < A.rows(); ++i)
            for (std::size_t j = 0; j < A.cols(); ++j)
                out.at(i, j) += v.values[j];
        return push(std::move(out), [a, x](Tape& t) {
            Var self = t.current_;
            const Tensor& g = t.grad(self);
            Tensor& ga = t.grad_mut(a);
            Tensor& gx = t.grad_mut(x);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) {
                    ga.at(i, j) += g.at(i, j);
                    gx.values[j] += g.at(i, j);
                }
        });
    }

    Var scale(Var a, double c) {
        Tensor out = value(a);
        for (double& v : out.values) v *= c;
        return push(std::move(out), [a, c](Tape& t) {
            Var self = t.current_;
            const Tensor& g = t.grad(self);
            Tensor& ga = t.grad_mut(a);
            for (std::size_t i = 0; i < g.values.size(); ++i)
                ga.values[i] += c * g.values[i];
        });
    }

    // tensor scaled by a scalar tape node
    Var scale_by(Var a, Var s) {
        const Tensor& S = value(s);
        if (S.numel() != 1) throw ContractError("scale_by: scalar expected");
        Tensor out = value(a);
        for (double& v : out.values) v *= S.values[0];
        return push(std::move(out), [a, s](Tape& t) {
            Var self = t.current_;
            const Tensor& g = t.grad(self);
            const Tensor& A = t.value(a);
            double sv = t.value(s).values[0];
            Tensor& ga = t.grad_mut(a);
            Tensor& gs = t.grad_mut(s);
            double acc = 0;
            for (std::size_t i = 0; i < g.values.size(); ++i) {
                ga.values[i] += sv * g.values[i];
                acc += g.values[i] * A.values[i];
            }
            gs.values[0] += acc;
        });
    }

    Var sigmoid(Var a) {
        return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                     [](double, double y) { return y * (1.0 - y); });
    }
    Var tanh_(Var a) {
        return unary(a, [](double x) { return std::tanh(x); },
                     [](double, double y) { return 1.0 - y * y; });
    }
    Var exp_(Var a) {
        return unary(a, [](double x) { return std::exp(x); },
                     [](double, double y) { return y; });
    }
    Var log_(Var a) {
        return unary(a, [](double x) { return std::log(x); },
                     [](double x, double) { return 1.0 / x; });
    }

    Var reciprocal(Var a) {
        return unary(a, [](double x) { return 1.0 / x; },
                     [](double x, double) { return -1.0 / (x * x); });
    }

    // v / sum(v); the usual renormalization of non-negative weights.
    Var normalize_sum(Var a) {
        return scale_by(a, reciprocal(sum(a)));
    }

    Var sum(Var a) {
        double acc = 0;
        for (double v : value(a).values) acc += v;
        return push(Tensor::scalar(acc), [a](Tape& t) {
            Var self = t.current_;
            double g = t.grad(self).values[0];
            Tensor& ga = t.grad_mut(a);
            for (double& v : ga.values) v += g;
        });
    }

    Var dot(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (!A.same_shape(B))
            throw DimensionError("dot: shapes disagree, " + A.shape_str() + " vs " +
                                 B.shape_str());
        double acc = 0;
        for (std::size_t i = 0; i < A.values.size(); ++i)
            acc += A.values[i] * B.values[i];
        return push(Tensor::scalar(acc), [a, b](Tape& t) {
            Var self = t.current_;
            double g = t.grad(self).values[0];
            const Tensor& A = t.value(a);
            const Tensor& B = t.value(b);
            Tensor& ga = t.grad_mut(a);
            Tensor& gb = t.grad_mut(b);
            for (std::size_t i = 0; i < A.values.size(); ++i) {
                ga.values[i] += g * B.values[i];
                gb.values[i] += g * A.values[i];
            }
        });
    }

    Var softmax(Var a) {
        const Tensor& x = value(a);
        Tensor out = x;
        double mx = -1e300;
        for (double v : x.values) mx = std::max(mx, v);
        double z = 0;
        for (std::size_t i = 0; i < x.values.size(); ++i) {
            out.values[i] = std::exp(x.values[i] - mx);
            z += out.values[i];
        }
        for (double& v : out.values) v /= z;
        return push(std::move(out), [a](Tape& t) {
            Var self = t.current_;
            const Tensor& y = t.value(self);
            const Tensor& g = t.grad(self);
            Tensor& ga = t.grad_mut(a);
            double gy = 0;
            for (std::size_t i = 0; i < y.values.size(); ++i)
                gy += g.values[i] * y.values[i];
            for (std::size_t i = 0; i < y.values.size(); ++i)
                ga.values[i] += y.values[i] * (g.values[i] - gy);
        });
    }

    // Softmax over the true entries of mask; masked-out entries are exactly 0.
    Var masked_softmax(Var a, const std::vector<bool>& mask) {
        const Tensor& x = value(a);
        if (mask.size() != x.numel())
            throw DimensionError("masked_softmax: mask length disagrees with logits");
        bool any = false;
        double mx = -1e300;
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i]) {
                any = true;
                mx = std::max(mx, x.values[i]);
            }
        if (!any) throw ContractError("masked_softmax: empty support");
        Tensor out = Tensor::zeros_like(x);
        double z = 0;
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i]) {
                out.values[i] = std::exp(x.values[i] - mx);
                z += out.values[i];
            }
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask[i]) out.values[i] /= z;
        return push(std::move(out), [a, mask](Tape& t) {
            Var self = t.current_;
            const Tensor& y = t.value(self);
            const Tensor& g = t.grad(self);
            Tensor& ga = t.grad_mut(a);
            double gy = 0;
            for (std::size_t i = 0; i < y.values.size(); ++i)
                if (mask[i]) gy += g.values[i] * y.values[i];
            for (std::size_t i = 0; i < y.values.size(); ++i)
                if (mask[i]) ga.values[i] += y.values[i] * (g.values[i] - gy);
        });
    }

    // Row gather with scatter-add backward; rows may repeat.
    Var gather_rows(Var a, std::vector<std::size_t> idx) {
        const Tensor& A = value(a);
        require_matrix(A, "gather_rows");
        std::size_t d = A.cols();
        Tensor out({idx.size(), d});
        for (std::size_t r = 0; r < idx.size(); ++r) {
            if (idx[r] >= A.rows())
                throw DimensionError("gather_rows: row index out of range");
            for (std::size_t j = 0; j < d; ++j) out.at(r, j) = A.at(idx[r], j);
        }
        return push(std::move(out), [a, idx = std::move(idx)](Tape& t) {
            Var self = t.current_;
            const Tensor& g = t.grad(self);
            Tensor& ga = t.grad_mut(a);
            std::size_t d = g.cols();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < d; ++j)
                    ga.at(idx[r], j) += g.at(r, j);
        });
    }

    // One row of a matrix node as a vector.
    Var row(Var a, std::size_t r) {
        const Tensor& A = value(a);
        require_matrix(A, "row");
        if (r >= A.rows()) throw DimensionError("row: index out of range");
        std::size_t d = A.cols();
        Tensor out({d});
        for (std::size_t j = 0; j < d; ++j) out.values[j] = A.at(r, j);
        return push(std::move(out), [a, r](Tape& t) {
            Var self = t.current_;
            const Tensor& g = t.grad(self);
            Tensor& ga = t.grad_mut(a);
            for (std::size_t j = 0; j < g.numel(); ++j) ga.at(r, j) += g.values[j];
        });
    }

    // Column slice M[r0:r1, c] as a vector.
    Var slice_col(Var a, std::size_t c, std::size_t r0, std::size_t r1) {
        const Tensor& A = value(a);
        require_matrix(A, "slice_col");
        if (c >= A.cols() || r1 > A.rows() || r0 >= r1)
            throw DimensionError("slice_col: range out of bounds");
        Tensor out({r1 - r0});
        for (std::size_t r = r0; r < r1; ++r) out.values[r - r0] = A.at(r, c);
        return push(std::move(out), [a, c, r0](Tape& t) {
            Var self = t.current_;
            const Tensor& g = t.grad(self);
            Tensor& ga = t.grad_mut(a);
            for (std::size_t k = 0; k < g.numel(); ++k) ga.at(r0 + k, c) += g.values[k];
        });
    }

    // Column of a matrix node as a vector (W_t one-hot selection).
    Var col(Var a, std::size_t c) {
        return slice_col(a, c, 0, value(a).rows());
    }

    Var stack_scalars(const std::vector<Var>& parts) {
        Tensor out({parts.size()});
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (value(parts[i]).numel() != 1)
                throw ContractError("stack_scalars: non-scalar part");
            out.values[i] = value(parts[i]).values[0];
        }
        return push(std::move(out), [parts](Tape& t) {
            Var self = t.current_;
            const Tensor& g = t.grad(self);
            for (std::size_t i = 0; i < parts.size(); ++i)
                t.grad_mut(parts[i]).values[0] += g.values[i];
        });
    }

    Var stack_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw ContractError("stack_rows: empty");
        std::size_t d = value(parts[0]).numel();
        Tensor out({parts.size(), d});
        for (std::size_t i = 0; i < parts.size(); ++i) {
            const Tensor& v = value(parts[i]);
            if (v.numel() != d) throw DimensionError("stack_rows: ragged parts");
            for (std::size_t j = 0; j < d; ++j) out.at(i, j) = v.values[j];
        }
        return push(std::move(out), [parts, d](Tape& t) {
            Var self = t.current_;
            const Tensor& g = t.grad(self);
            for (std::size_t i = 0; i < parts.size(); ++i) {
                Tensor& gp = t.grad_mut(parts[i]);
                for (std::size_t j = 0; j < d; ++j) gp.values[j] += g.at(i, j);
            }
        });
    }

    Var pick(Var a, std::size_t i) {
        const Tensor& v = value(a);
        if (i >= v.numel()) throw DimensionError("pick: index out of range");
        return push(Tensor::scalar(v.values[i]), [a, i](Tape& t) {
            Var self = t.current_;
            t.grad_mut(a).values[i] += t.grad(self).values[0];
        });
    }

    Var log_sum_exp(Var a) {
        const Tensor& x = value(a);
        double mx = -1e300;
        for (double v : x.values) mx = std::max(mx, v);
        double z = 0;
        for (double v : x.values) z += std::exp(v - mx);
        return push(Tensor::scalar(mx + std::log(z)), [a](Tape& t) {
            Var self = t.current_;
            double g = t.grad(self).values[0];
            double lse = t.value(self).values[0];
            const Tensor& x = t.value(a);
            Tensor& ga = t.grad_mut(a);
            for (std::size_t i = 0; i < x.values.size(); ++i)
                ga.values[i] += g * std::exp(x.values[i] - lse);
        });
    }

    // Reverse sweep from a scalar loss node; grad of loss seeded to 1.
    void backward(Var loss) {
        if (value(loss).numel() != 1)
            throw ContractError("backward: loss must be scalar, got shape " +
                                value(loss).shape_str());
        grad_mut(loss).values[0] = 1.0;
        for (Var v = loss; v >= 0; --v) {
            if (nodes_[v].back) {
                current_ = v;
                nodes_[v].back(*this);
            }
        }
    }

private:
    std::vector<Node> nodes_;
    Var current_ = -1;  // node whose backward is executing

    Var push(Tensor t, std::function<void(Tape&)> back) {
        Node n;
        n.grad = Tensor::zeros_like(t);
        n.value = std::move(t);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<Var>(nodes_.size() - 1);
    }

    static void require_matrix(const Tensor& t, const char* where) {
        if (t.shape.size() != 2)
            throw DimensionError(std::string(where) + ": matrix expected, got " +
                                 t.shape_str());
    }

    template <class F, class B>
    Var binary_same_shape(Var a, Var b, const char* name, F f, B back) {
        const Tensor& A = value(a);
        const Tensor& B_ = value(b);
        if (!A.same_shape(B_))
            throw DimensionError(std::string(name) + ": shapes disagree, " +
                                 A.shape_str() + " vs " + B_.shape_str());
        Tensor out = A;
        for (std::size_t i = 0; i < out.values.size(); ++i)
            out.values[i] = f(A.values[i], B_.values[i]);
        return push(std::move(out), [a, b, back](Tape& t) {
            back(t, t.current_, a, b);
        });
    }

    template <class F, class DF>
    Var unary(Var a, F f, DF df) {
        Tensor out = value(a);
        for (double& v : out.values) v = f(v);
        return push(std::move(out), [a, df](Tape& t) {
            Var self = t.current_;
            const Tensor& x = t.value(a);
            const Tensor& y = t.value(self);
            const Tensor& g = t.grad(self);
            Tensor& ga = t.grad_mut(a);
            for (std::size_t i = 0; i < x.values.size(); ++i)
                ga.values[i] += g.values[i] * df(x.values[i], y.values[i]);
        });
    }
};

}  // namespace tandrud
