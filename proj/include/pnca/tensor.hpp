#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pnca/errors.hpp"

namespace pnca {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

// One recorded operation per node: the node is the op's output, `parents` are
// its inputs and `backward_fn` pulls this node's grad into the parents' grads.
// Nodes are created in forward order, so walking consumers before producers
// (reverse topological order) replays the tape backwards, each op exactly once.
template <typename S>
struct Node {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until first needed; same length as data after
    bool requires_grad = false;  // leaf flag, set by the owner
    bool tracked = false;        // participates in a recorded graph
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return parents.empty(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
};

// Recording is disabled inside evaluation paths.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Dense row-major tensor. A Tensor is a shared handle to its node; ops build
/// a fresh graph every forward pass and backward() replays it in reverse.
/// Training runs in float, gradient-check tests in double.
template <typename S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }

    static Tensor filled(Shape shape, S value, bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<detail::Node<S>>();
        t.node_->shape = std::move(shape);
        t.node_->data.assign(shape_numel(t.node_->shape), value);
        t.node_->requires_grad = requires_grad;
        t.node_->tracked = requires_grad;
        return t;
    }

    static Tensor from(std::vector<S> data, Shape shape, bool requires_grad = false) {
        if (data.size() != shape_numel(shape))
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<detail::Node<S>>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        t.node_->requires_grad = requires_grad;
        t.node_->tracked = requires_grad;
        return t;
    }

    static Tensor scalar(S value, bool requires_grad = false) {
        return from({value}, {1}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t size() const { return node_->data.size(); }

    const std::vector<S>& data() const { return node_->data; }
    /// Mutating values of a tensor that already fed a recorded graph is not
    /// supported; only leaves (parameters, inputs) should be written through.
    std::vector<S>& data_mut() { return node_->data; }

    S item() const {
        if (size() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) {
        node_->requires_grad = v;
        if (v) node_->tracked = true;
    }
    bool tracked() const { return node_ && node_->tracked; }

    bool has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
    const std::vector<S>& grad() const {
        if (!has_grad()) throw ContractError("tensor has no gradient (run backward first)");
        return node_->grad;
    }
    std::vector<S>& grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (node_) node_->grad.assign(node_->data.size(), S(0));
    }

    std::shared_ptr<detail::Node<S>> node() const { return node_; }

private:
    std::shared_ptr<detail::Node<S>> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// op recording helpers

namespace detail {

template <typename S>
Tensor<S> make_result(Shape shape, std::vector<S> data, const char* op,
                      std::vector<std::shared_ptr<Node<S>>> parents,
                      std::function<void(Node<S>&)> backward_fn) {
    Tensor<S> out = Tensor<S>::from(std::move(data), std::move(shape));
    bool any_tracked = false;
    for (const auto& p : parents)
        if (p->tracked) any_tracked = true;
    if (grad_mode_flag() && any_tracked) {
        auto n = out.node();
        n->tracked = true;
        n->op = op;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return out;
}

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "add");
    std::vector<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<S>(
        a.shape(), std::move(out), "add", {an, bn}, [an, bn](detail::Node<S>& self) {
            if (an->tracked) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->tracked) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
            }
        });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "sub");
    std::vector<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<S>(
        a.shape(), std::move(out), "sub", {an, bn}, [an, bn](detail::Node<S>& self) {
            if (an->tracked) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->tracked) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
            }
        });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "mul");
    std::vector<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<S>(
        a.shape(), std::move(out), "mul", {an, bn}, [an, bn](detail::Node<S>& self) {
            if (an->tracked) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] * bn->data[i];
            }
            if (bn->tracked) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    bn->grad[i] += self.grad[i] * an->data[i];
            }
        });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    std::vector<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    auto an = a.node();
    return detail::make_result<S>(a.shape(), std::move(out), "scale", {an},
                                  [an, c](detail::Node<S>& self) {
                                      if (!an->tracked) return;
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                                          an->grad[i] += self.grad[i] * c;
                                  });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
    std::vector<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > S(0) ? a.data()[i] : S(0);
    auto an = a.node();
    return detail::make_result<S>(a.shape(), std::move(out), "relu", {an},
                                  [an](detail::Node<S>& self) {
                                      if (!an->tracked) return;
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                                          if (an->data[i] > S(0)) an->grad[i] += self.grad[i];
                                  });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
    std::vector<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
    auto an = a.node();
    return detail::make_result<S>(a.shape(), std::move(out), "log", {an},
                                  [an](detail::Node<S>& self) {
                                      if (!an->tracked) return;
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                                          an->grad[i] += self.grad[i] / an->data[i];
                                  });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
    std::vector<S> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    auto an = a.node();
    return detail::make_result<S>(a.shape(), std::move(out), "exp", {an},
                                  [an](detail::Node<S>& self) {
                                      if (!an->tracked) return;
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                                          an->grad[i] += self.grad[i] * self.data[i];
                                  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
    S acc = 0;
    for (S v : a.data()) acc += v;
    auto an = a.node();
    return detail::make_result<S>({1}, {acc}, "sum", {an}, [an](detail::Node<S>& self) {
        if (!an->tracked) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[0];
    });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
    if (a.size() == 0) throw ContractError("mean of empty tensor");
    S acc = 0;
    for (S v : a.data()) acc += v;
    const S inv = S(1) / static_cast<S>(a.size());
    auto an = a.node();
    return detail::make_result<S>({1}, {acc * inv}, "mean", {an},
                                  [an, inv](detail::Node<S>& self) {
                                      if (!an->tracked) return;
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < an->grad.size(); ++i)
                                          an->grad[i] += self.grad[0] * inv;
                                  });
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<S> out(m * n);
    {
        detail::ConstMatMap<S> A(a.data().data(), m, k), B(b.data().data(), k, n);
        detail::MatMap<S> C(out.data(), m, n);
        C.noalias() = A * B;
    }
    auto an = a.node(), bn = b.node();
    return detail::make_result<S>(
        {m, n}, std::move(out), "matmul", {an, bn}, [an, bn, m, k, n](detail::Node<S>& self) {
            detail::ConstMatMap<S> G(self.grad.data(), m, n);
            if (an->tracked) {
                an->ensure_grad();
                detail::ConstMatMap<S> B(bn->data.data(), k, n);
                detail::MatMap<S> GA(an->grad.data(), m, k);
                GA.noalias() += G * B.transpose();
            }
            if (bn->tracked) {
                bn->ensure_grad();
                detail::ConstMatMap<S> A(an->data.data(), m, k);
                detail::MatMap<S> GB(bn->grad.data(), k, n);
                GB.noalias() += A.transpose() * G;
            }
        });
}

/// Adds a length-C bias vector to every row of an [B x C] matrix.
template <typename S>
Tensor<S> add_row_bias(const Tensor<S>& m, const Tensor<S>& bias) {
    if (m.rank() != 2 || bias.rank() != 1 || m.dim(1) != bias.dim(0))
        throw DimensionError("add_row_bias: shapes " + shape_str(m.shape()) + " vs " +
                             shape_str(bias.shape()));
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    std::vector<S> out(m.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = m.data()[r * cols + c] + bias.data()[c];
    auto mn = m.node(), bn = bias.node();
    return detail::make_result<S>(
        m.shape(), std::move(out), "add_row_bias", {mn, bn},
        [mn, bn, rows, cols](detail::Node<S>& self) {
            if (mn->tracked) {
                mn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) mn->grad[i] += self.grad[i];
            }
            if (bn->tracked) {
                bn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) bn->grad[c] += self.grad[r * cols + c];
            }
        });
}

// ---------------------------------------------------------------------------
// normalization / distances

inline constexpr double kNormEps = 1e-12;

/// v / ||v||_2 for a rank-1 tensor. Near-zero input is an error: callers must
/// not feed zero embeddings into a direction-based loss.
template <typename S>
Tensor<S> l2_normalize(const Tensor<S>& v) {
    if (v.rank() != 1)
        throw DimensionError("l2_normalize expects a rank-1 tensor, got " + shape_str(v.shape()));
    S sq = 0;
    for (S x : v.data()) sq += x * x;
    const S norm = std::sqrt(sq);
    if (!(norm > S(kNormEps)))
        throw DegenerateInputError("l2_normalize: vector norm " + std::to_string((double)norm) +
                                   " below epsilon");
    std::vector<S> out(v.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v.data()[i] / norm;
    auto vn = v.node();
    return detail::make_result<S>(
        v.shape(), std::move(out), "l2_normalize", {vn}, [vn, norm](detail::Node<S>& self) {
            if (!vn->tracked) return;
            vn->ensure_grad();
            S dot = 0;
            for (std::size_t i = 0; i < self.data.size(); ++i) dot += self.grad[i] * self.data[i];
            for (std::size_t i = 0; i < self.data.size(); ++i)
                vn->grad[i] += (self.grad[i] - self.data[i] * dot) / norm;
        });
}

/// Row-wise L2 normalization of an [N x D] matrix.
template <typename S>
Tensor<S> normalize_rows(const Tensor<S>& m) {
    if (m.rank() != 2)
        throw DimensionError("normalize_rows expects a rank-2 tensor, got " + shape_str(m.shape()));
    const std::size_t n = m.dim(0), d = m.dim(1);
    std::vector<S> out(m.size());
    std::vector<S> norms(n);
    for (std::size_t r = 0; r < n; ++r) {
        S sq = 0;
        for (std::size_t j = 0; j < d; ++j) {
            S x = m.data()[r * d + j];
            sq += x * x;
        }
        norms[r] = std::sqrt(sq);
        if (!(norms[r] > S(kNormEps)))
            throw DegenerateInputError("normalize_rows: row " + std::to_string(r) +
                                       " has near-zero norm");
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = m.data()[r * d + j] / norms[r];
    }
    auto mn = m.node();
    return detail::make_result<S>(
        m.shape(), std::move(out), "normalize_rows", {mn},
        [mn, n, d, norms](detail::Node<S>& self) {
            if (!mn->tracked) return;
            mn->ensure_grad();
            for (std::size_t r = 0; r < n; ++r) {
                S dot = 0;
                for (std::size_t j = 0; j < d; ++j)
                    dot += self.grad[r * d + j] * self.data[r * d + j];
                for (std::size_t j = 0; j < d; ++j)
                    mn->grad[r * d + j] +=
                        (self.grad[r * d + j] - self.data[r * d + j] * dot) / norms[r];
            }
        });
}

/// Euclidean distance between two rank-1 tensors, as a scalar tensor.
template <typename S>
Tensor<S> euclidean_distance(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "euclidean_distance");
    if (a.rank() != 1)
        throw DimensionError("euclidean_distance expects rank-1 tensors, got " +
                             shape_str(a.shape()));
    S sq = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        S diff = a.data()[i] - b.data()[i];
        sq += diff * diff;
    }
    const S dist = std::sqrt(sq);
    auto an = a.node(), bn = b.node();
    return detail::make_result<S>(
        {1}, {dist}, "euclidean_distance", {an, bn}, [an, bn, dist](detail::Node<S>& self) {
            if (dist == S(0)) return;  // subgradient 0 at coincident points
            const S g = self.grad[0] / dist;
            if (an->tracked) {
                an->ensure_grad();
                for (std::size_t i = 0; i < an->data.size(); ++i)
                    an->grad[i] += g * (an->data[i] - bn->data[i]);
            }
            if (bn->tracked) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < bn->data.size(); ++i)
                    bn->grad[i] -= g * (an->data[i] - bn->data[i]);
            }
        });
}

/// Pairwise distances between rows of a [B x D] and rows of p [C x D];
/// result [B x C]. `squared` selects d^2 instead of d.
template <typename S>
Tensor<S> pairwise_distance(const Tensor<S>& a, const Tensor<S>& p, bool squared = false) {
    if (a.rank() != 2 || p.rank() != 2 || a.dim(1) != p.dim(1))
        throw DimensionError("pairwise_distance: shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(p.shape()));
    const std::size_t bsz = a.dim(0), c = p.dim(0), d = a.dim(1);
    std::vector<S> out(bsz * c);
    for (std::size_t i = 0; i < bsz; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            S sq = 0;
            for (std::size_t k = 0; k < d; ++k) {
                S diff = a.data()[i * d + k] - p.data()[j * d + k];
                sq += diff * diff;
            }
            out[i * c + j] = squared ? sq : std::sqrt(sq);
        }
    auto an = a.node(), pn = p.node();
    std::vector<S> dists = out;  // saved for backward
    return detail::make_result<S>(
        {bsz, c}, std::move(out), "pairwise_distance", {an, pn},
        [an, pn, bsz, c, d, squared, dists](detail::Node<S>& self) {
            if (an->tracked) an->ensure_grad();
            if (pn->tracked) pn->ensure_grad();
            for (std::size_t i = 0; i < bsz; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    S g = self.grad[i * c + j];
                    if (g == S(0)) continue;
                    S factor;
                    if (squared) {
                        factor = S(2) * g;
                    } else {
                        S dist = dists[i * c + j];
                        if (dist == S(0)) continue;
                        factor = g / dist;
                    }
                    for (std::size_t k = 0; k < d; ++k) {
                        S diff = an->data[i * d + k] - pn->data[j * d + k];
                        if (an->tracked) an->grad[i * d + k] += factor * diff;
                        if (pn->tracked) pn->grad[j * d + k] -= factor * diff;
                    }
                }
        });
}

/// out[i] = m[i, idx[i]] for an [B x C] matrix.
template <typename S>
Tensor<S> pick_columns(const Tensor<S>& m, const std::vector<int>& idx) {
    if (m.rank() != 2) throw DimensionError("pick_columns expects rank-2, got " + shape_str(m.shape()));
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    if (idx.size() != rows) throw ContractError("pick_columns: index count != row count");
    std::vector<S> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= cols)
            throw ContractError("pick_columns: index " + std::to_string(idx[r]) +
                                " out of range [0," + std::to_string(cols) + ")");
        out[r] = m.data()[r * cols + static_cast<std::size_t>(idx[r])];
    }
    auto mn = m.node();
    return detail::make_result<S>({rows}, std::move(out), "pick_columns", {mn},
                                  [mn, cols, idx](detail::Node<S>& self) {
                                      if (!mn->tracked) return;
                                      mn->ensure_grad();
                                      for (std::size_t r = 0; r < self.grad.size(); ++r)
                                          mn->grad[r * cols + static_cast<std::size_t>(idx[r])] +=
                                              self.grad[r];
                                  });
}

/// Row-wise log(sum_j exp(m[i,j])) with column excl[i] excluded, computed with
/// a max shift. Each row must keep at least one included column.
template <typename S>
Tensor<S> logsumexp_rows_excluding(const Tensor<S>& m, const std::vector<int>& excl) {
    if (m.rank() != 2)
        throw DimensionError("logsumexp_rows_excluding expects rank-2, got " + shape_str(m.shape()));
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    if (excl.size() != rows) throw ContractError("logsumexp_rows_excluding: index count != row count");
    if (cols < 2) throw ContractError("logsumexp_rows_excluding: need at least 2 columns");
    std::vector<S> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        if (excl[r] < 0 || static_cast<std::size_t>(excl[r]) >= cols)
            throw ContractError("logsumexp_rows_excluding: index " + std::to_string(excl[r]) +
                                " out of range [0," + std::to_string(cols) + ")");
        const std::size_t e = static_cast<std::size_t>(excl[r]);
        S mx = -std::numeric_limits<S>::infinity();
        for (std::size_t c = 0; c < cols; ++c)
            if (c != e && m.data()[r * cols + c] > mx) mx = m.data()[r * cols + c];
        S s = 0;
        for (std::size_t c = 0; c < cols; ++c)
            if (c != e) s += std::exp(m.data()[r * cols + c] - mx);
        out[r] = mx + std::log(s);
    }
    auto mn = m.node();
    std::vector<S> lse = out;
    return detail::make_result<S>(
        {rows}, std::move(out), "logsumexp_rows_excluding", {mn},
        [mn, rows, cols, excl, lse](detail::Node<S>& self) {
            if (!mn->tracked) return;
            mn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t e = static_cast<std::size_t>(excl[r]);
                for (std::size_t c = 0; c < cols; ++c) {
                    if (c == e) continue;
                    mn->grad[r * cols + c] +=
                        self.grad[r] * std::exp(mn->data[r * cols + c] - lse[r]);
                }
            }
        });
}

/// Per-row cross entropy -log softmax(logits)[label], max-shift stable.
template <typename S>
Tensor<S> softmax_cross_entropy_rows(const Tensor<S>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2)
        throw DimensionError("softmax_cross_entropy_rows expects rank-2, got " +
                             shape_str(logits.shape()));
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    if (labels.size() != rows) throw ContractError("cross entropy: label count != batch size");
    std::vector<S> out(rows);
    std::vector<S> lse(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols)
            throw ContractError("cross entropy: label " + std::to_string(labels[r]) +
                                " out of range [0," + std::to_string(cols) + ")");
        S mx = logits.data()[r * cols];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, logits.data()[r * cols + c]);
        S s = 0;
        for (std::size_t c = 0; c < cols; ++c) s += std::exp(logits.data()[r * cols + c] - mx);
        lse[r] = mx + std::log(s);
        out[r] = lse[r] - logits.data()[r * cols + static_cast<std::size_t>(labels[r])];
    }
    auto ln = logits.node();
    return detail::make_result<S>(
        {rows}, std::move(out), "softmax_cross_entropy", {ln},
        [ln, rows, cols, labels, lse](detail::Node<S>& self) {
            if (!ln->tracked) return;
            ln->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    S p = std::exp(ln->data[r * cols + c] - lse[r]);
                    S ind = (static_cast<std::size_t>(labels[r]) == c) ? S(1) : S(0);
                    ln->grad[r * cols + c] += self.grad[r] * (p - ind);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// convolutional ops (NCHW layout)

namespace detail {

template <typename S>
void im2col(const S* img, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, S* col) {
    // col layout: [cin*k*k] x [oh*ow], row-major
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                S* dst = col + ((c * k + ky) * k + kx) * (oh * ow);
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        S v = S(0);
                        if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 &&
                            ix < static_cast<std::ptrdiff_t>(w))
                            v = img[(c * h + static_cast<std::size_t>(iy)) * w +
                                    static_cast<std::size_t>(ix)];
                        dst[oy * ow + ox] = v;
                    }
                }
            }
}

template <typename S>
void col2im_accum(const S* col, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
                  std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, S* img) {
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const S* src = col + ((c * k + ky) * k + kx) * (oh * ow);
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        img[(c * h + static_cast<std::size_t>(iy)) * w +
                            static_cast<std::size_t>(ix)] += src[oy * ow + ox];
                    }
                }
            }
}

}  // namespace detail

/// 2-D convolution, square kernel, zero padding. x: [B x Cin x H x W],
/// w: [Cout x Cin x K x K] -> [B x Cout x OH x OW]. Forward and both backward
/// passes are im2col + GEMM; columns are rebuilt in backward instead of saved.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, std::size_t stride = 1,
                 std::size_t pad = 0) {
    if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) || w.dim(2) != w.dim(3))
        throw DimensionError("conv2d: shapes " + shape_str(x.shape()) + " vs " +
                             shape_str(w.shape()));
    if (stride == 0) throw ContractError("conv2d: stride must be >= 1");
    const std::size_t bsz = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t cout = w.dim(0), k = w.dim(2);
    if (h + 2 * pad < k || wd + 2 * pad < k)
        throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                             shape_str(x.shape()));
    const std::size_t oh = (h + 2 * pad - k) / stride + 1;
    const std::size_t ow = (wd + 2 * pad - k) / stride + 1;
    const std::size_t ck = cin * k * k;

    std::vector<S> out(bsz * cout * oh * ow);
    {
        std::vector<S> col(ck * oh * ow);
        detail::ConstMatMap<S> W(w.data().data(), cout, ck);
        for (std::size_t b = 0; b < bsz; ++b) {
            detail::im2col(x.data().data() + b * cin * h * wd, cin, h, wd, k, stride, pad, oh, ow,
                           col.data());
            detail::ConstMatMap<S> C(col.data(), ck, oh * ow);
            detail::MatMap<S> O(out.data() + b * cout * oh * ow, cout, oh * ow);
            O.noalias() = W * C;
        }
    }
    auto xn = x.node(), wn = w.node();
    return detail::make_result<S>(
        {bsz, cout, oh, ow}, std::move(out), "conv2d", {xn, wn},
        [xn, wn, bsz, cin, h, wd, cout, k, stride, pad, oh, ow, ck](detail::Node<S>& self) {
            std::vector<S> col(ck * oh * ow);
            if (xn->tracked) xn->ensure_grad();
            if (wn->tracked) wn->ensure_grad();
            detail::ConstMatMap<S> W(wn->data.data(), cout, ck);
            for (std::size_t b = 0; b < bsz; ++b) {
                detail::ConstMatMap<S> G(self.grad.data() + b * cout * oh * ow, cout, oh * ow);
                if (wn->tracked) {
                    detail::im2col(xn->data.data() + b * cin * h * wd, cin, h, wd, k, stride, pad,
                                   oh, ow, col.data());
                    detail::ConstMatMap<S> C(col.data(), ck, oh * ow);
                    detail::MatMap<S> GW(wn->grad.data(), cout, ck);
                    GW.noalias() += G * C.transpose();
                }
                if (xn->tracked) {
                    detail::MatMap<S> GC(col.data(), ck, oh * ow);
                    GC.noalias() = W.transpose() * G;
                    detail::col2im_accum(col.data(), cin, h, wd, k, stride, pad, oh, ow,
                                         xn->grad.data() + b * cin * h * wd);
                }
            }
        });
}

/// Per-channel affine y = x * gain[c] + bias[c] on [B x C x H x W].
/// Stands in for batch norm: same shape contract, no running statistics.
template <typename S>
Tensor<S> channel_affine(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias) {
    if (x.rank() != 4 || gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != x.dim(1) ||
        bias.dim(0) != x.dim(1))
        throw DimensionError("channel_affine: shapes " + shape_str(x.shape()) + ", " +
                             shape_str(gain.shape()) + ", " + shape_str(bias.shape()));
    const std::size_t bsz = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<S> out(x.size());
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t c = 0; c < ch; ++c) {
            const S g = gain.data()[c], bb = bias.data()[c];
            const S* src = x.data().data() + (b * ch + c) * hw;
            S* dst = out.data() + (b * ch + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] * g + bb;
        }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return detail::make_result<S>(
        x.shape(), std::move(out), "channel_affine", {xn, gn, bn},
        [xn, gn, bn, bsz, ch, hw](detail::Node<S>& self) {
            if (xn->tracked) xn->ensure_grad();
            if (gn->tracked) gn->ensure_grad();
            if (bn->tracked) bn->ensure_grad();
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t c = 0; c < ch; ++c) {
                    const S* g = self.grad.data() + (b * ch + c) * hw;
                    const S* xv = xn->data.data() + (b * ch + c) * hw;
                    if (xn->tracked) {
                        S* gx = xn->grad.data() + (b * ch + c) * hw;
                        const S gc = gn->data[c];
                        for (std::size_t i = 0; i < hw; ++i) gx[i] += g[i] * gc;
                    }
                    if (gn->tracked) {
                        S acc = 0;
                        for (std::size_t i = 0; i < hw; ++i) acc += g[i] * xv[i];
                        gn->grad[c] += acc;
                    }
                    if (bn->tracked) {
                        S acc = 0;
                        for (std::size_t i = 0; i < hw; ++i) acc += g[i];
                        bn->grad[c] += acc;
                    }
                }
        });
}

/// Global average pool: [B x C x H x W] -> [B x C].
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
    if (x.rank() != 4)
        throw DimensionError("global_avg_pool expects rank-4, got " + shape_str(x.shape()));
    const std::size_t bsz = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
    const S inv = S(1) / static_cast<S>(hw);
    std::vector<S> out(bsz * ch);
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t c = 0; c < ch; ++c) {
            S acc = 0;
            const S* src = x.data().data() + (b * ch + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) acc += src[i];
            out[b * ch + c] = acc * inv;
        }
    auto xn = x.node();
    return detail::make_result<S>({bsz, ch}, std::move(out), "global_avg_pool", {xn},
                                  [xn, bsz, ch, hw, inv](detail::Node<S>& self) {
                                      if (!xn->tracked) return;
                                      xn->ensure_grad();
                                      for (std::size_t b = 0; b < bsz; ++b)
                                          for (std::size_t c = 0; c < ch; ++c) {
                                              const S g = self.grad[b * ch + c] * inv;
                                              S* gx = xn->grad.data() + (b * ch + c) * hw;
                                              for (std::size_t i = 0; i < hw; ++i) gx[i] += g;
                                          }
                                  });
}

// ---------------------------------------------------------------------------
// backward

/// Reverse-mode sweep from a scalar loss. Walks the recorded graph in reverse
/// topological order, visiting each recorded op exactly once. Leaf gradients
/// accumulate across calls; intermediate gradients are reset per call.
template <typename S>
void backward(const Tensor<S>& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward requires a scalar loss tensor");
    auto root = loss.node();
    if (!root->tracked)
        throw ContractError("backward: loss is not connected to a recorded graph");

    // iterative DFS post-order over tracked parents; reversed => consumers first
    std::vector<detail::Node<S>*> order;
    std::unordered_set<detail::Node<S>*> seen;
    std::vector<std::pair<detail::Node<S>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node<S>* p = node->parents[next++].get();
            if (p->tracked && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* n : order) {
        n->ensure_grad();
        if (!n->is_leaf()) std::fill(n->grad.begin(), n->grad.end(), S(0));
    }
    root->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace pnca
