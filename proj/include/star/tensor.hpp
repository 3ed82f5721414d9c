#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "star/rng.hpp"

namespace star {

// Dense matrix of doubles participating in a reverse-mode computation graph.
// Handles share storage; ops record their adjoint step on an explicit Graph
// tape which is rebuilt on every forward pass.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(int rows, int cols, bool requires_grad = false) {
        return Tensor(rows, cols, requires_grad);
    }

    static Tensor constant(int rows, int cols, double value) {
        Tensor t(rows, cols, false);
        for (double& v : t.values()) v = value;
        return t;
    }

    static Tensor row(std::vector<double> vals) {
        Tensor t(1, static_cast<int>(vals.size()), false);
        t.data_->value = std::move(vals);
        return t;
    }

    static Tensor scalar(double v) { return row({v}); }

    static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
        if (rows.empty()) throw std::invalid_argument("Tensor::from_rows: no rows");
        Tensor t(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()), false);
        for (int i = 0; i < t.rows(); ++i) {
            if (static_cast<int>(rows[i].size()) != t.cols())
                throw std::invalid_argument("Tensor::from_rows: ragged rows");
            for (int j = 0; j < t.cols(); ++j) t.at(i, j) = rows[i][j];
        }
        return t;
    }

    static Tensor uniform(int rows, int cols, Rng& rng, double lo, double hi,
                          bool requires_grad = false) {
        Tensor t(rows, cols, requires_grad);
        for (double& v : t.values()) v = rng.uniform(lo, hi);
        return t;
    }

    static Tensor glorot(int rows, int cols, Rng& rng, bool requires_grad = true) {
        const double lim = glorot_limit(rows, cols);
        return uniform(rows, cols, rng, -lim, lim, requires_grad);
    }

    bool defined() const { return static_cast<bool>(data_); }
    int rows() const { return data_->shape[0]; }
    int cols() const { return data_->shape[1]; }
    int size() const { return rows() * cols(); }
    const std::vector<int>& shape() const { return data_->shape; }

    double at(int r, int c) const { return data_->value[idx(r, c)]; }
    double& at(int r, int c) { return data_->value[idx(r, c)]; }

    std::vector<double>& values() { return data_->value; }
    const std::vector<double>& values() const { return data_->value; }

    bool requires_grad() const { return data_->requires_grad; }
    bool tracked() const { return data_->tracked; }

    // Adjoint buffer; allocated (zeroed) on first use.
    std::vector<double>& grad() {
        ensure_grad();
        return data_->grad;
    }
    const std::vector<double>& grad() const {
        const_cast<Tensor*>(this)->ensure_grad();
        return data_->grad;
    }
    bool grad_allocated() const { return !data_->grad.empty(); }

    void zero_grad() {
        if (!data_->grad.empty()) std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
    }

    void ensure_grad() {
        if (data_->grad.empty()) data_->grad.assign(data_->value.size(), 0.0);
    }

    // Deep copy; the copy is a fresh leaf with its own grad buffer.
    Tensor clone() const {
        Tensor t(rows(), cols(), data_->requires_grad);
        t.data_->value = data_->value;
        return t;
    }

    void copy_values_from(const Tensor& other) {
        if (other.size() != size())
            throw std::invalid_argument("copy_values_from: size mismatch");
        data_->value = other.data_->value;
    }

    bool same_storage(const Tensor& other) const { return data_ == other.data_; }

    std::string shape_str() const {
        return "[" + std::to_string(rows()) + " x " + std::to_string(cols()) + "]";
    }

private:
    struct Data {
        std::vector<int> shape;
        std::vector<double> value;
        std::vector<double> grad;  // empty until first needed
        bool requires_grad = false;
        bool tracked = false;
    };

    Tensor(int rows, int cols, bool requires_grad) : data_(std::make_shared<Data>()) {
        if (rows <= 0 || cols <= 0)
            throw std::invalid_argument("Tensor: extents must be positive, got " +
                                        std::to_string(rows) + " x " + std::to_string(cols));
        data_->shape = {rows, cols};
        data_->value.assign(static_cast<size_t>(rows) * cols, 0.0);
        data_->requires_grad = requires_grad;
        data_->tracked = requires_grad;
    }

    size_t idx(int r, int c) const { return static_cast<size_t>(r) * cols() + c; }

    friend class Graph;
    friend Tensor make_tracked(int, int, bool);

    std::shared_ptr<Data> data_;
};

// Interior node factory: tracked iff any input is tracked.
inline Tensor make_tracked(int rows, int cols, bool tracked) {
    Tensor t = Tensor::zeros(rows, cols, false);
    t.data_->tracked = tracked;
    return t;
}

// Tape of recorded operations. Closures run in reverse record order, so the
// topological invariant (inputs recorded before outputs) holds by
// construction. One backward pass per recorded forward; reset() starts over.
class Graph {
public:
    void record(std::function<void()> backward_step) {
        tape_.push_back(std::move(backward_step));
    }

    void backward(Tensor loss) {
        if (loss.size() != 1)
            throw std::logic_error("backward: loss must be scalar, got " + loss.shape_str());
        if (!loss.tracked())
            throw std::logic_error("backward: loss does not depend on any tracked tensor");
        if (consumed_)
            throw std::logic_error("backward: tape already consumed; rebuild the graph first");
        consumed_ = true;
        loss.grad()[0] = 1.0;
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    }

    void reset() {
        tape_.clear();
        consumed_ = false;
    }

    size_t num_ops() const { return tape_.size(); }

private:
    std::vector<std::function<void()>> tape_;
    bool consumed_ = false;
};

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

inline CMap as_mat(const Tensor& t) { return CMap(t.values().data(), t.rows(), t.cols()); }
inline Map as_mat_mut(Tensor& t) { return Map(t.values().data(), t.rows(), t.cols()); }
inline Map grad_mat(Tensor& t) { return Map(t.grad().data(), t.rows(), t.cols()); }

[[noreturn]] inline void dim_error(const std::string& op, const Tensor& a, const Tensor& b,
                                   const std::string& what) {
    throw std::invalid_argument(op + ": " + what + ": " + a.shape_str() + " vs " +
                                b.shape_str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Recorded operations. Each computes its value eagerly and, when the output is
// tracked, pushes the adjoint step onto the tape. Closures skip work when the
// output adjoint was never touched (node off the loss path).
// ---------------------------------------------------------------------------

inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) detail::dim_error("matmul", a, b, "inner extents disagree");
    Tensor out = make_tracked(a.rows(), b.cols(), a.tracked() || b.tracked());
    detail::as_mat_mut(out).noalias() = detail::as_mat(a) * detail::as_mat(b);
    if (out.tracked()) {
        g.record([a, b, out]() mutable {
            if (!out.grad_allocated()) return;
            auto d_out = detail::grad_mat(out);
            if (a.tracked()) detail::grad_mat(a).noalias() += d_out * detail::as_mat(b).transpose();
            if (b.tracked()) detail::grad_mat(b).noalias() += detail::as_mat(a).transpose() * d_out;
        });
    }
    return out;
}

// a * b^T (saves explicit transposes in attention score computation)
inline Tensor matmul_nt(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) detail::dim_error("matmul_nt", a, b, "inner extents disagree");
    Tensor out = make_tracked(a.rows(), b.rows(), a.tracked() || b.tracked());
    detail::as_mat_mut(out).noalias() = detail::as_mat(a) * detail::as_mat(b).transpose();
    if (out.tracked()) {
        g.record([a, b, out]() mutable {
            if (!out.grad_allocated()) return;
            auto d_out = detail::grad_mat(out);
            if (a.tracked()) detail::grad_mat(a).noalias() += d_out * detail::as_mat(b);
            if (b.tracked()) detail::grad_mat(b).noalias() += d_out.transpose() * detail::as_mat(a);
        });
    }
    return out;
}

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        detail::dim_error("add", a, b, "shapes disagree");
    Tensor out = make_tracked(a.rows(), a.cols(), a.tracked() || b.tracked());
    for (int i = 0; i < out.size(); ++i)
        out.values()[i] = a.values()[i] + b.values()[i];
    if (out.tracked()) {
        g.record([a, b, out]() mutable {
            if (!out.grad_allocated()) return;
            const auto& d = out.grad();
            if (a.tracked()) {
                auto& ga = a.grad();
                for (size_t i = 0; i < d.size(); ++i) ga[i] += d[i];
            }
            if (b.tracked()) {
                auto& gb = b.grad();
                for (size_t i = 0; i < d.size(); ++i) gb[i] += d[i];
            }
        });
    }
    return out;
}

inline Tensor scale(Graph& g, const Tensor& x, double c) {
    Tensor out = make_tracked(x.rows(), x.cols(), x.tracked());
    for (int i = 0; i < out.size(); ++i) out.values()[i] = c * x.values()[i];
    if (out.tracked()) {
        g.record([x, out, c]() mutable {
            if (!out.grad_allocated()) return;
            const auto& d = out.grad();
            auto& gx = x.grad();
            for (size_t i = 0; i < d.size(); ++i) gx[i] += c * d[i];
        });
    }
    return out;
}

inline Tensor relu(Graph& g, const Tensor& x) {
    Tensor out = make_tracked(x.rows(), x.cols(), x.tracked());
    for (int i = 0; i < out.size(); ++i)
        out.values()[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
    if (out.tracked()) {
        g.record([x, out]() mutable {
            if (!out.grad_allocated()) return;
            const auto& d = out.grad();
            auto& gx = x.grad();
            for (size_t i = 0; i < d.size(); ++i)
                if (x.values()[i] > 0.0) gx[i] += d[i];
        });
    }
    return out;
}

// Row-wise softmax with max subtraction. NaN inputs are rejected up front so
// a poisoned forward pass fails loudly instead of propagating.
inline Tensor softmax_rows(Graph& g, const Tensor& x) {
    for (double v : x.values())
        if (std::isnan(v)) throw std::domain_error("softmax_rows: NaN input");
    Tensor out = make_tracked(x.rows(), x.cols(), x.tracked());
    const int n = x.cols();
    for (int r = 0; r < x.rows(); ++r) {
        double mx = x.at(r, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, x.at(r, j));
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            const double e = std::exp(x.at(r, j) - mx);
            out.at(r, j) = e;
            sum += e;
        }
        for (int j = 0; j < n; ++j) out.at(r, j) /= sum;
    }
    if (out.tracked()) {
        g.record([x, out]() mutable {
            if (!out.grad_allocated()) return;
            auto& gx = x.grad();
            const int n = x.cols();
            for (int r = 0; r < x.rows(); ++r) {
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += out.grad()[r * n + j] * out.at(r, j);
                for (int j = 0; j < n; ++j)
                    gx[r * n + j] += out.at(r, j) * (out.grad()[r * n + j] - dot);
            }
        });
    }
    return out;
}

inline Tensor concat_rows(Graph& g, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    int total = 0;
    bool tracked = false;
    for (const Tensor& p : parts) {
        if (p.cols() != parts[0].cols())
            detail::dim_error("concat_rows", parts[0], p, "column counts disagree");
        total += p.rows();
        tracked = tracked || p.tracked();
    }
    Tensor out = make_tracked(total, parts[0].cols(), tracked);
    int r0 = 0;
    for (const Tensor& p : parts) {
        std::copy(p.values().begin(), p.values().end(), out.values().begin() + r0 * out.cols());
        r0 += p.rows();
    }
    if (out.tracked()) {
        g.record([parts, out]() mutable {
            if (!out.grad_allocated()) return;
            int r0 = 0;
            for (Tensor& p : parts) {
                if (p.tracked()) {
                    auto& gp = p.grad();
                    const double* src = out.grad().data() + static_cast<size_t>(r0) * out.cols();
                    for (size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
                }
                r0 += p.rows();
            }
        });
    }
    return out;
}

inline Tensor concat_cols(Graph& g, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    int total = 0;
    bool tracked = false;
    for (const Tensor& p : parts) {
        if (p.rows() != parts[0].rows())
            detail::dim_error("concat_cols", parts[0], p, "row counts disagree");
        total += p.cols();
        tracked = tracked || p.tracked();
    }
    const int rows = parts[0].rows();
    Tensor out = make_tracked(rows, total, tracked);
    int c0 = 0;
    for (const Tensor& p : parts) {
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < p.cols(); ++c) out.at(r, c0 + c) = p.at(r, c);
        c0 += p.cols();
    }
    if (out.tracked()) {
        g.record([parts, out, rows]() mutable {
            if (!out.grad_allocated()) return;
            int c0 = 0;
            for (Tensor& p : parts) {
                if (p.tracked()) {
                    auto& gp = p.grad();
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < p.cols(); ++c)
                            gp[static_cast<size_t>(r) * p.cols() + c] +=
                                out.grad()[static_cast<size_t>(r) * out.cols() + c0 + c];
                }
                c0 += p.cols();
            }
        });
    }
    return out;
}

inline Tensor slice_rows(Graph& g, const Tensor& x, int from, int to) {
    if (from < 0 || to > x.rows() || from >= to)
        throw std::invalid_argument("slice_rows: bad range [" + std::to_string(from) + ", " +
                                    std::to_string(to) + ") for " + x.shape_str());
    Tensor out = make_tracked(to - from, x.cols(), x.tracked());
    std::copy(x.values().begin() + static_cast<size_t>(from) * x.cols(),
              x.values().begin() + static_cast<size_t>(to) * x.cols(), out.values().begin());
    if (out.tracked()) {
        g.record([x, out, from]() mutable {
            if (!out.grad_allocated()) return;
            auto& gx = x.grad();
            const auto& d = out.grad();
            const size_t off = static_cast<size_t>(from) * x.cols();
            for (size_t i = 0; i < d.size(); ++i) gx[off + i] += d[i];
        });
    }
    return out;
}

inline Tensor mean_rows(Graph& g, const Tensor& x) {
    Tensor out = make_tracked(1, x.cols(), x.tracked());
    const double inv = 1.0 / x.rows();
    for (int r = 0; r < x.rows(); ++r)
        for (int c = 0; c < x.cols(); ++c) out.at(0, c) += x.at(r, c);
    for (int c = 0; c < x.cols(); ++c) out.at(0, c) *= inv;
    if (out.tracked()) {
        g.record([x, out, inv]() mutable {
            if (!out.grad_allocated()) return;
            auto& gx = x.grad();
            for (int r = 0; r < x.rows(); ++r)
                for (int c = 0; c < x.cols(); ++c)
                    gx[static_cast<size_t>(r) * x.cols() + c] += inv * out.grad()[c];
        });
    }
    return out;
}

// Column-wise max over rows. The adjoint is routed to the argmax entry of each
// column; ties resolve to the lowest row index.
inline Tensor max_pool_rows(Graph& g, const Tensor& x) {
    Tensor out = make_tracked(1, x.cols(), x.tracked());
    std::vector<int> argmax(x.cols(), 0);
    for (int c = 0; c < x.cols(); ++c) {
        double best = x.at(0, c);
        for (int r = 1; r < x.rows(); ++r) {
            if (x.at(r, c) > best) {
                best = x.at(r, c);
                argmax[c] = r;
            }
        }
        out.at(0, c) = best;
    }
    if (out.tracked()) {
        g.record([x, out, argmax = std::move(argmax)]() mutable {
            if (!out.grad_allocated()) return;
            auto& gx = x.grad();
            for (int c = 0; c < x.cols(); ++c)
                gx[static_cast<size_t>(argmax[c]) * x.cols() + c] += out.grad()[c];
        });
    }
    return out;
}

// Row-wise layer normalization with affine gain/bias (each 1 x d). The spec
// contract is a single row; multi-row inputs normalize each row independently,
// which is what the baseline encoder layers need.
inline Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gain, const Tensor& bias) {
    constexpr double kEps = 1e-5;
    const int d = x.cols();
    if (d < 2)
        throw std::invalid_argument("layer_norm: need at least 2 features, got " + x.shape_str());
    if (gain.rows() != 1 || gain.cols() != d) detail::dim_error("layer_norm", x, gain, "gain shape");
    if (bias.rows() != 1 || bias.cols() != d) detail::dim_error("layer_norm", x, bias, "bias shape");

    Tensor out = make_tracked(x.rows(), d, x.tracked() || gain.tracked() || bias.tracked());
    Tensor xhat = Tensor::zeros(x.rows(), d);  // cached for the adjoint
    std::vector<double> inv_sigma(x.rows());
    for (int r = 0; r < x.rows(); ++r) {
        double mu = 0.0;
        for (int c = 0; c < d; ++c) mu += x.at(r, c);
        mu /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) {
            const double dv = x.at(r, c) - mu;
            var += dv * dv;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + kEps);
        inv_sigma[r] = inv;
        for (int c = 0; c < d; ++c) {
            xhat.at(r, c) = (x.at(r, c) - mu) * inv;
            out.at(r, c) = gain.at(0, c) * xhat.at(r, c) + bias.at(0, c);
        }
    }
    if (out.tracked()) {
        g.record([x, gain, bias, out, xhat, inv_sigma = std::move(inv_sigma), d]() mutable {
            if (!out.grad_allocated()) return;
            for (int r = 0; r < x.rows(); ++r) {
                const double* dy = out.grad().data() + static_cast<size_t>(r) * d;
                if (gain.tracked())
                    for (int c = 0; c < d; ++c) gain.grad()[c] += dy[c] * xhat.at(r, c);
                if (bias.tracked())
                    for (int c = 0; c < d; ++c) bias.grad()[c] += dy[c];
                if (x.tracked()) {
                    double mean_dxh = 0.0, mean_dxh_xhat = 0.0;
                    for (int c = 0; c < d; ++c) {
                        const double dxh = dy[c] * gain.at(0, c);
                        mean_dxh += dxh;
                        mean_dxh_xhat += dxh * xhat.at(r, c);
                    }
                    mean_dxh /= d;
                    mean_dxh_xhat /= d;
                    auto& gx = x.grad();
                    for (int c = 0; c < d; ++c) {
                        const double dxh = dy[c] * gain.at(0, c);
                        gx[static_cast<size_t>(r) * d + c] +=
                            inv_sigma[r] * (dxh - mean_dxh - xhat.at(r, c) * mean_dxh_xhat);
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor mse_loss(Graph& g, const Tensor& pred, const Tensor& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols())
        detail::dim_error("mse_loss", pred, target, "shapes disagree");
    Tensor out = make_tracked(1, 1, pred.tracked() || target.tracked());
    const double inv = 1.0 / pred.size();
    double acc = 0.0;
    for (int i = 0; i < pred.size(); ++i) {
        const double diff = pred.values()[i] - target.values()[i];
        acc += diff * diff;
    }
    out.at(0, 0) = acc * inv;
    if (out.tracked()) {
        g.record([pred, target, out, inv]() mutable {
            if (!out.grad_allocated()) return;
            const double d = out.grad()[0];
            for (int i = 0; i < pred.size(); ++i) {
                const double diff = pred.values()[i] - target.values()[i];
                if (pred.tracked()) pred.grad()[i] += d * 2.0 * diff * inv;
                if (target.tracked()) target.grad()[i] -= d * 2.0 * diff * inv;
            }
        });
    }
    return out;
}

}  // namespace star
