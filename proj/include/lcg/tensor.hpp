#pragma once

// Dense f64 tensors with reverse-mode automatic differentiation.
//
// A Tape records one computation (typically a single training step) as a
// sequence of tensor-level nodes.  Calling backward(loss) walks the nodes in
// reverse and accumulates gradients into every leaf tensor that has
// requires_grad set.  Gradients accumulate across backward calls; zeroing
// them between steps is the caller's responsibility.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "lcg/common.hpp"

namespace lcg {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

class Tape;

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

class Tensor {
  public:
    struct Data {
        std::vector<int64_t> shape;
        std::vector<double> values;
        std::vector<double> grad;  // allocated on first accumulation
        bool requires_grad = false;
        // Cache of the node id on the most recent tape that saw this tensor.
        uint64_t tape_epoch = 0;
        int32_t tape_node = -1;
    };

    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape) {
        Tensor t;
        t.d_ = std::make_shared<Data>();
        int64_t n = 1;
        for (int64_t s : shape) {
            if (s <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
            n *= s;
        }
        t.d_->shape = std::move(shape);
        t.d_->values.assign(static_cast<size_t>(n), 0.0);
        return t;
    }

    static Tensor from(std::vector<int64_t> shape, std::vector<double> values) {
        Tensor t = zeros(std::move(shape));
        if (values.size() != t.d_->values.size()) {
            throw ShapeError(format_msg("value count %zu does not match shape %s", values.size(),
                                        shape_str(t.d_->shape).c_str()));
        }
        t.d_->values = std::move(values);
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    static Tensor trunc_normal(std::vector<int64_t> shape, Rng& rng, double mean, double stddev) {
        Tensor t = zeros(std::move(shape));
        for (double& v : t.d_->values) v = truncated_normal(rng, mean, stddev);
        return t;
    }

    bool defined() const { return static_cast<bool>(d_); }
    const std::vector<int64_t>& shape() const { return d_->shape; }
    int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }
    int64_t dim(size_t i) const { return d_->shape.at(i); }
    int64_t rows() const { return d_->shape.size() == 2 ? d_->shape[0] : 1; }
    int64_t cols() const { return d_->shape.size() == 2 ? d_->shape[1] : static_cast<int64_t>(d_->values.size()); }

    std::vector<double>& values() { return d_->values; }
    const std::vector<double>& values() const { return d_->values; }
    double item() const {
        if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
        return d_->values[0];
    }
    double at(int64_t i, int64_t j) const { return d_->values[static_cast<size_t>(i * cols() + j)]; }

    Tensor& set_requires_grad(bool b = true) {
        d_->requires_grad = b;
        return *this;
    }
    bool requires_grad() const { return d_->requires_grad; }

    std::vector<double>& grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
        return d_->grad;
    }
    bool has_grad() const { return !d_->grad.empty(); }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
    }

    MapMat mat() { return MapMat(d_->values.data(), rows(), cols()); }
    ConstMapMat mat() const { return ConstMapMat(d_->values.data(), rows(), cols()); }

    std::shared_ptr<Data> ptr() const { return d_; }

  private:
    std::shared_ptr<Data> d_;
    friend class Tape;
};

struct CrossEntropyOut {
    Tensor loss;        // shape [1]
    int64_t counted;    // number of scored positions
    bool all_masked;    // true when every position was masked out
};

// Row layout shared by the batched ops: n_seq sequences, each padded to
// seq_len rows, with lengths giving the live prefix of every sequence.
struct SeqLayout {
    int n_seq = 0;
    int seq_len = 0;
    std::vector<int> lengths;
};

class Tape {
  public:
    Tape() : epoch_(next_epoch()++) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- elementwise -------------------------------------------------------

    Tensor add(const Tensor& a, const Tensor& b) { return binary_ew(a, b, /*sign=*/+1.0); }
    Tensor sub(const Tensor& a, const Tensor& b) { return binary_ew(a, b, /*sign=*/-1.0); }

    Tensor mul(const Tensor& a, const Tensor& b) {
        require_same_shape("mul", a, b);
        int ia = node_of(a), ib = node_of(b);
        Tensor out = Tensor::zeros(a.shape());
        for (size_t i = 0; i < out.values().size(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
        int io = attach(out, {ia, ib});
        node(io).backward = [ia, ib, io, pa = a.ptr(), pb = b.ptr()](Tape& t) {
            const auto& go = t.node_grad(io);
            if (t.needs(ia)) {
                auto& ga = t.grad_buf(ia, pa->values.size());
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * pb->values[i];
            }
            if (t.needs(ib)) {
                auto& gb = t.grad_buf(ib, pb->values.size());
                for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * pa->values[i];
            }
        };
        return out;
    }

    Tensor scale(const Tensor& a, double c) {
        int ia = node_of(a);
        Tensor out = Tensor::zeros(a.shape());
        for (size_t i = 0; i < out.values().size(); ++i) out.values()[i] = c * a.values()[i];
        int io = attach(out, {ia});
        node(io).backward = [ia, io, c, n = a.numel()](Tape& t) {
            const auto& go = t.node_grad(io);
            if (!t.needs(ia)) return;
            auto& ga = t.grad_buf(ia, static_cast<size_t>(n));
            for (size_t i = 0; i < go.size(); ++i) ga[i] += c * go[i];
        };
        return out;
    }

    // out = x * s where s is a learnable single-element tensor.
    Tensor scale_by(const Tensor& x, const Tensor& s) {
        if (s.numel() != 1) throw ShapeError("scale_by expects a single-element scale, got " + shape_str(s.shape()));
        int ix = node_of(x), is = node_of(s);
        double sv = s.values()[0];
        Tensor out = Tensor::zeros(x.shape());
        for (size_t i = 0; i < out.values().size(); ++i) out.values()[i] = sv * x.values()[i];
        int io = attach(out, {ix, is});
        node(io).backward = [ix, is, io, sv, px = x.ptr()](Tape& t) {
            const auto& go = t.node_grad(io);
            if (t.needs(ix)) {
                auto& gx = t.grad_buf(ix, px->values.size());
                for (size_t i = 0; i < go.size(); ++i) gx[i] += sv * go[i];
            }
            if (t.needs(is)) {
                double acc = 0.0;
                for (size_t i = 0; i < go.size(); ++i) acc += go[i] * px->values[i];
                t.grad_buf(is, 1)[0] += acc;
            }
        };
        return out;
    }

    Tensor relu(const Tensor& x) {
        return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                     [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
    }

    Tensor tanh_op(const Tensor& x) {
        return unary(x, [](double v) { return std::tanh(v); },
                     [](double, double y) { return 1.0 - y * y; });
    }

    Tensor exp_op(const Tensor& x) {
        return unary(x, [](double v) { return std::exp(v); },
                     [](double, double y) { return y; });
    }

    // min(x, cap); subgradient 0 at the boundary.
    Tensor clamp_max(const Tensor& x, double cap) {
        return unary(x, [cap](double v) { return v < cap ? v : cap; },
                     [cap](double v, double) { return v < cap ? 1.0 : 0.0; });
    }

    // GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
    Tensor gelu(const Tensor& x) {
        int ix = node_of(x);
        Tensor out = Tensor::zeros(x.shape());
        for (size_t i = 0; i < out.values().size(); ++i) {
            double v = x.values()[i];
            out.values()[i] = 0.5 * v * (1.0 + std::tanh(detail::kGeluC * (v + detail::kGeluA * v * v * v)));
        }
        int io = attach(out, {ix});
        node(io).backward = [ix, io, px = x.ptr()](Tape& t) {
            const auto& go = t.node_grad(io);
            if (!t.needs(ix)) return;
            auto& gx = t.grad_buf(ix, px->values.size());
            for (size_t i = 0; i < go.size(); ++i) {
                double v = px->values[i];
                double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
                double th = std::tanh(u);
                double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * v * v);
                double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                gx[i] += go[i] * d;
            }
        };
        return out;
    }

    // ---- linear algebra ----------------------------------------------------

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows()) {
            throw ShapeError(format_msg("matmul shape mismatch: %s x %s", shape_str(a.shape()).c_str(),
                                        shape_str(b.shape()).c_str()));
        }
        int ia = node_of(a), ib = node_of(b);
        Tensor out = Tensor::zeros({a.rows(), b.cols()});
        out.mat().noalias() = a.mat() * b.mat();
        int io = attach(out, {ia, ib});
        node(io).backward = [ia, ib, io, pa = a.ptr(), pb = b.ptr(), p = a.rows(), q = a.cols(),
                             r = b.cols()](Tape& t) {
            ConstMapMat go(t.node_grad(io).data(), p, r);
            ConstMapMat A(pa->values.data(), p, q);
            ConstMapMat B(pb->values.data(), q, r);
            if (t.needs(ia)) {
                MapMat ga(t.grad_buf(ia, pa->values.size()).data(), p, q);
                ga.noalias() += go * B.transpose();
            }
            if (t.needs(ib)) {
                MapMat gb(t.grad_buf(ib, pb->values.size()).data(), q, r);
                gb.noalias() += A.transpose() * go;
            }
        };
        return out;
    }

    Tensor transpose(const Tensor& a) {
        if (a.shape().size() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(a.shape()));
        int ia = node_of(a);
        Tensor out = Tensor::zeros({a.cols(), a.rows()});
        out.mat().noalias() = a.mat().transpose();
        int io = attach(out, {ia});
        node(io).backward = [ia, io, p = a.rows(), q = a.cols(), n = a.numel()](Tape& t) {
            if (!t.needs(ia)) return;
            ConstMapMat go(t.node_grad(io).data(), q, p);
            MapMat ga(t.grad_buf(ia, static_cast<size_t>(n)).data(), p, q);
            ga.noalias() += go.transpose();
        };
        return out;
    }

    Tensor add_bias(const Tensor& x, const Tensor& b) {
        if (x.shape().size() != 2 || b.numel() != x.cols()) {
            throw ShapeError(format_msg("add_bias shape mismatch: %s + %s", shape_str(x.shape()).c_str(),
                                        shape_str(b.shape()).c_str()));
        }
        int ix = node_of(x), ib = node_of(b);
        Tensor out = Tensor::zeros(x.shape());
        out.mat() = x.mat();
        out.mat().rowwise() += ConstMapMat(b.values().data(), 1, b.numel()).row(0);
        int io = attach(out, {ix, ib});
        node(io).backward = [ix, ib, io, n = x.rows(), d = x.cols(), nb = b.numel()](Tape& t) {
            ConstMapMat go(t.node_grad(io).data(), n, d);
            if (t.needs(ix)) {
                MapMat gx(t.grad_buf(ix, static_cast<size_t>(n * d)).data(), n, d);
                gx.noalias() += go;
            }
            if (t.needs(ib)) {
                // plain loop: Eigen's column-wise redux peels by pointer alignment,
                // which makes bitwise results depend on where the heap put the buffer
                double* gb = t.grad_buf(ib, static_cast<size_t>(nb)).data();
                const double* g = t.node_grad(io).data();
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
            }
        };
        return out;
    }

    // ---- row selection and assembly ---------------------------------------

    Tensor embedding(const Tensor& table, std::span<const int> ids) {
        if (table.shape().size() != 2) throw ShapeError("embedding table must be a matrix");
        int64_t V = table.rows(), d = table.cols();
        for (int id : ids) {
            if (id < 0 || id >= V) throw IndexError(format_msg("embedding id %d out of range [0, %lld)", id, (long long)V));
        }
        int it = node_of(table);
        Tensor out = Tensor::zeros({static_cast<int64_t>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i) {
            out.mat().row(static_cast<int64_t>(i)) = table.mat().row(ids[i]);
        }
        int io = attach(out, {it});
        node(io).backward = [it, io, idv = std::vector<int>(ids.begin(), ids.end()), V, d](Tape& t) {
            if (!t.needs(it)) return;
            ConstMapMat go(t.node_grad(io).data(), static_cast<int64_t>(idv.size()), d);
            MapMat gt(t.grad_buf(it, static_cast<size_t>(V * d)).data(), V, d);
            for (size_t i = 0; i < idv.size(); ++i) gt.row(idv[i]) += go.row(static_cast<int64_t>(i));
        };
        return out;
    }

    Tensor gather_rows(const Tensor& x, std::span<const int> rows) {
        for (int r : rows) {
            if (r < 0 || r >= x.rows()) throw IndexError(format_msg("row %d out of range [0, %lld)", r, (long long)x.rows()));
        }
        return embedding(x, rows);
    }

    Tensor concat_rows(const Tensor& a, const Tensor& b) {
        if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols()) {
            throw ShapeError(format_msg("concat_rows column mismatch: %s vs %s", shape_str(a.shape()).c_str(),
                                        shape_str(b.shape()).c_str()));
        }
        int ia = node_of(a), ib = node_of(b);
        Tensor out = Tensor::zeros({a.rows() + b.rows(), a.cols()});
        out.mat().topRows(a.rows()) = a.mat();
        out.mat().bottomRows(b.rows()) = b.mat();
        int io = attach(out, {ia, ib});
        node(io).backward = [ia, ib, io, ra = a.rows(), rb = b.rows(), d = a.cols()](Tape& t) {
            ConstMapMat go(t.node_grad(io).data(), ra + rb, d);
            if (t.needs(ia)) {
                MapMat ga(t.grad_buf(ia, static_cast<size_t>(ra * d)).data(), ra, d);
                ga.noalias() += go.topRows(ra);
            }
            if (t.needs(ib)) {
                MapMat gb(t.grad_buf(ib, static_cast<size_t>(rb * d)).data(), rb, d);
                gb.noalias() += go.bottomRows(rb);
            }
        };
        return out;
    }

    Tensor slice_rows(const Tensor& x, int64_t start, int64_t count) {
        if (start < 0 || count <= 0 || start + count > x.rows()) {
            throw IndexError(format_msg("slice_rows [%lld, %lld) out of range for %lld rows", (long long)start,
                                        (long long)(start + count), (long long)x.rows()));
        }
        int ix = node_of(x);
        Tensor out = Tensor::zeros({count, x.cols()});
        out.mat() = x.mat().middleRows(start, count);
        int io = attach(out, {ix});
        node(io).backward = [ix, io, start, count, rows = x.rows(), d = x.cols()](Tape& t) {
            if (!t.needs(ix)) return;
            ConstMapMat go(t.node_grad(io).data(), count, d);
            MapMat gx(t.grad_buf(ix, static_cast<size_t>(rows * d)).data(), rows, d);
            gx.middleRows(start, count) += go;
        };
        return out;
    }

    // ---- reductions --------------------------------------------------------

    Tensor sum_all(const Tensor& x) { return reduce(x, /*mean=*/false); }
    Tensor mean_all(const Tensor& x) { return reduce(x, /*mean=*/true); }

    // ---- normalisation and softmax -----------------------------------------

    // Row softmax with max subtraction; 1-D input is treated as one row.
    Tensor softmax(const Tensor& x) {
        int64_t n = x.rows(), d = x.cols();
        int ix = node_of(x);
        Tensor out = Tensor::zeros(x.shape());
        for (int64_t r = 0; r < n; ++r) {
            const double* xv = x.values().data() + r * d;
            double* ov = out.values().data() + r * d;
            double mx = *std::max_element(xv, xv + d);
            double z = 0.0;
            for (int64_t j = 0; j < d; ++j) z += (ov[j] = std::exp(xv[j] - mx));
            for (int64_t j = 0; j < d; ++j) ov[j] /= z;
        }
        int io = attach(out, {ix});
        node(io).backward = [ix, io, po = out.ptr(), n, d](Tape& t) {
            if (!t.needs(ix)) return;
            const auto& go = t.node_grad(io);
            auto& gx = t.grad_buf(ix, static_cast<size_t>(n * d));
            for (int64_t r = 0; r < n; ++r) {
                const double* y = po->values.data() + r * d;
                const double* g = go.data() + r * d;
                double dot = 0.0;
                for (int64_t j = 0; j < d; ++j) dot += y[j] * g[j];
                double* gr = gx.data() + r * d;
                for (int64_t j = 0; j < d; ++j) gr[j] += y[j] * (g[j] - dot);
            }
        };
        return out;
    }

    // Per-row layer norm with learnable gain and bias; population variance.
    Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
        int64_t n = x.rows(), d = x.cols();
        if (gain.numel() != d || bias.numel() != d) {
            throw ShapeError(format_msg("layer_norm parameter size mismatch: features %lld, gain %s, bias %s",
                                        (long long)d, shape_str(gain.shape()).c_str(), shape_str(bias.shape()).c_str()));
        }
        int ix = node_of(x), ig = node_of(gain), ib = node_of(bias);
        Tensor out = Tensor::zeros(x.shape());
        std::vector<double> inv_std(static_cast<size_t>(n));
        std::vector<double> xhat(x.values().size());
        for (int64_t r = 0; r < n; ++r) {
            const double* xv = x.values().data() + r * d;
            double mu = 0.0;
            for (int64_t j = 0; j < d; ++j) mu += xv[j];
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (int64_t j = 0; j < d; ++j) var += (xv[j] - mu) * (xv[j] - mu);
            var /= static_cast<double>(d);
            double is = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<size_t>(r)] = is;
            double* xh = xhat.data() + r * d;
            double* ov = out.values().data() + r * d;
            for (int64_t j = 0; j < d; ++j) {
                xh[j] = (xv[j] - mu) * is;
                ov[j] = gain.values()[static_cast<size_t>(j)] * xh[j] + bias.values()[static_cast<size_t>(j)];
            }
        }
        int io = attach(out, {ix, ig, ib});
        node(io).backward = [ix, ig, ib, io, pg = gain.ptr(), inv_std = std::move(inv_std),
                             xhat = std::move(xhat), n, d](Tape& t) {
            const auto& go = t.node_grad(io);
            std::vector<double>* gx = t.needs(ix) ? &t.grad_buf(ix, static_cast<size_t>(n * d)) : nullptr;
            std::vector<double>* gg = t.needs(ig) ? &t.grad_buf(ig, static_cast<size_t>(d)) : nullptr;
            std::vector<double>* gb = t.needs(ib) ? &t.grad_buf(ib, static_cast<size_t>(d)) : nullptr;
            for (int64_t r = 0; r < n; ++r) {
                const double* g = go.data() + r * d;
                const double* xh = xhat.data() + r * d;
                if (gg || gb) {
                    for (int64_t j = 0; j < d; ++j) {
                        if (gg) (*gg)[static_cast<size_t>(j)] += g[j] * xh[j];
                        if (gb) (*gb)[static_cast<size_t>(j)] += g[j];
                    }
                }
                if (gx) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t j = 0; j < d; ++j) {
                        double gy = g[j] * pg->values[static_cast<size_t>(j)];
                        m1 += gy;
                        m2 += gy * xh[j];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    double is = inv_std[static_cast<size_t>(r)];
                    double* gr = gx->data() + r * d;
                    for (int64_t j = 0; j < d; ++j) {
                        double gy = g[j] * pg->values[static_cast<size_t>(j)];
                        gr[j] += is * (gy - m1 - xh[j] * m2);
                    }
                }
            }
        };
        return out;
    }

    // ---- losses ------------------------------------------------------------

    // Mean negative log-likelihood over positions where mask is nonzero.
    // With zero scored positions the loss is 0 and all_masked is reported.
    CrossEntropyOut cross_entropy(const Tensor& logits, std::span<const int> targets,
                                  std::span<const uint8_t> mask = {}) {
        int64_t n = logits.rows(), V = logits.cols();
        if (static_cast<int64_t>(targets.size()) != n) {
            throw ShapeError(format_msg("cross_entropy target count %zu does not match %lld rows", targets.size(),
                                        (long long)n));
        }
        if (!mask.empty() && static_cast<int64_t>(mask.size()) != n) {
            throw ShapeError("cross_entropy mask length does not match row count");
        }
        int il = node_of(logits);
        std::vector<double> lse(static_cast<size_t>(n));
        int64_t counted = 0;
        double total = 0.0;
        for (int64_t r = 0; r < n; ++r) {
            bool scored = mask.empty() || mask[static_cast<size_t>(r)] != 0;
            if (!scored) continue;
            int tgt = targets[static_cast<size_t>(r)];
            if (tgt < 0 || tgt >= V) throw IndexError(format_msg("cross_entropy target %d out of range [0, %lld)", tgt, (long long)V));
            const double* lv = logits.values().data() + r * V;
            double mx = *std::max_element(lv, lv + V);
            double z = 0.0;
            for (int64_t j = 0; j < V; ++j) z += std::exp(lv[j] - mx);
            lse[static_cast<size_t>(r)] = mx + std::log(z);
            total += lse[static_cast<size_t>(r)] - lv[tgt];
            ++counted;
        }
        CrossEntropyOut result;
        result.counted = counted;
        result.all_masked = counted == 0;
        result.loss = Tensor::scalar(counted > 0 ? total / static_cast<double>(counted) : 0.0);
        int io = attach(result.loss, {il});
        if (counted > 0) {
            node(io).backward = [il, io, pl = logits.ptr(), tg = std::vector<int>(targets.begin(), targets.end()),
                                 mk = std::vector<uint8_t>(mask.begin(), mask.end()), lse = std::move(lse), n, V,
                                 counted](Tape& t) {
                if (!t.needs(il)) return;
                double g = t.node_grad(io)[0] / static_cast<double>(counted);
                auto& gl = t.grad_buf(il, pl->values.size());
                for (int64_t r = 0; r < n; ++r) {
                    if (!mk.empty() && mk[static_cast<size_t>(r)] == 0) continue;
                    const double* lv = pl->values.data() + r * V;
                    double* gr = gl.data() + r * V;
                    double l = lse[static_cast<size_t>(r)];
                    for (int64_t j = 0; j < V; ++j) gr[j] += g * std::exp(lv[j] - l);
                    gr[tg[static_cast<size_t>(r)]] -= g;
                }
            };
        }
        return result;
    }

    // ---- fused attention ----------------------------------------------------
    //
    // q, k, v: [n_seq*seq_len, d_model] row blocks per sequence.  Causal mask;
    // when window is set, position i additionally attends only to keys j with
    // i - j <= window.  Rows at or beyond a sequence's length produce zeros.
    Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v, const SeqLayout& lay, int n_heads,
                          std::optional<int> window) {
        const int64_t d_model = q.cols();
        if (d_model % n_heads != 0) throw ShapeError(format_msg("d_model %lld not divisible by %d heads", (long long)d_model, n_heads));
        const int64_t dh = d_model / n_heads;
        const int64_t T = lay.seq_len;
        const int64_t rows = static_cast<int64_t>(lay.n_seq) * T;
        if (q.rows() != rows || k.rows() != rows || v.rows() != rows) {
            throw ShapeError("self_attention inputs do not match the sequence layout");
        }
        if (window && *window < 0) throw UsageError("attention window must be non-negative");
        int iq = node_of(q), ik = node_of(k), iv = node_of(v);
        Tensor out = Tensor::zeros({rows, d_model});
        const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
        auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(lay.n_seq) * n_heads * T * T, 0.0);
        for (int c = 0; c < lay.n_seq; ++c) {
            const int len = lay.lengths[static_cast<size_t>(c)];
            for (int h = 0; h < n_heads; ++h) {
                double* P = probs->data() + (static_cast<size_t>(c) * n_heads + h) * T * T;
                for (int i = 0; i < len; ++i) {
                    const double* qi = q.values().data() + (c * T + i) * d_model + h * dh;
                    const int lo = window ? std::max(0, i - *window) : 0;
                    double mx = -1e300;
                    for (int j = lo; j <= i; ++j) {
                        const double* kj = k.values().data() + (c * T + j) * d_model + h * dh;
                        double s = 0.0;
                        for (int64_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
                        s *= scl;
                        P[i * T + j] = s;
                        mx = std::max(mx, s);
                    }
                    double z = 0.0;
                    for (int j = lo; j <= i; ++j) z += (P[i * T + j] = std::exp(P[i * T + j] - mx));
                    double* oi = out.values().data() + (c * T + i) * d_model + h * dh;
                    for (int j = lo; j <= i; ++j) {
                        double p = (P[i * T + j] /= z);
                        const double* vj = v.values().data() + (c * T + j) * d_model + h * dh;
                        for (int64_t e = 0; e < dh; ++e) oi[e] += p * vj[e];
                    }
                }
            }
        }
        int io = attach(out, {iq, ik, iv});
        node(io).backward = [iq, ik, iv, io, pq = q.ptr(), pk = k.ptr(), pv = v.ptr(), probs, lay, n_heads, window,
                             d_model, dh, T, scl](Tape& t) {
            const auto& go = t.node_grad(io);
            bool nq = t.needs(iq), nk = t.needs(ik), nv = t.needs(iv);
            if (!nq && !nk && !nv) return;
            auto& gq = t.grad_buf(iq, pq->values.size());
            auto& gk = t.grad_buf(ik, pk->values.size());
            auto& gv = t.grad_buf(iv, pv->values.size());
            std::vector<double> dP(static_cast<size_t>(T) * T);
            for (int c = 0; c < lay.n_seq; ++c) {
                const int len = lay.lengths[static_cast<size_t>(c)];
                for (int h = 0; h < n_heads; ++h) {
                    const double* P = probs->data() + (static_cast<size_t>(c) * n_heads + h) * T * T;
                    for (int i = 0; i < len; ++i) {
                        const double* goi = go.data() + (c * T + i) * d_model + h * dh;
                        const int lo = window ? std::max(0, i - *window) : 0;
                        double dot = 0.0;
                        for (int j = lo; j <= i; ++j) {
                            const double* vj = pv->values.data() + (c * T + j) * d_model + h * dh;
                            double s = 0.0;
                            for (int64_t e = 0; e < dh; ++e) s += goi[e] * vj[e];
                            dP[static_cast<size_t>(j)] = s;
                            dot += s * P[i * T + j];
                            double* gvj = gv.data() + (c * T + j) * d_model + h * dh;
                            double p = P[i * T + j];
                            for (int64_t e = 0; e < dh; ++e) gvj[e] += p * goi[e];
                        }
                        const double* qi = pq->values.data() + (c * T + i) * d_model + h * dh;
                        double* gqi = gq.data() + (c * T + i) * d_model + h * dh;
                        for (int j = lo; j <= i; ++j) {
                            double ds = P[i * T + j] * (dP[static_cast<size_t>(j)] - dot) * scl;
                            const double* kj = pk->values.data() + (c * T + j) * d_model + h * dh;
                            double* gkj = gk.data() + (c * T + j) * d_model + h * dh;
                            for (int64_t e = 0; e < dh; ++e) {
                                gqi[e] += ds * kj[e];
                                gkj[e] += ds * qi[e];
                            }
                        }
                    }
                }
            }
        };
        return out;
    }

    // Unmasked cross-attention: every live query row attends to all kv_len
    // rows of its own sequence. q: [n_seq*q_len, d], kv: [n_seq*kv_len, d].
    Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_seq, int q_len, int kv_len,
                           int n_heads, const std::vector<int>& q_lengths) {
        const int64_t d_model = q.cols();
        if (d_model % n_heads != 0) throw ShapeError(format_msg("d_model %lld not divisible by %d heads", (long long)d_model, n_heads));
        const int64_t dh = d_model / n_heads;
        if (q.rows() != static_cast<int64_t>(n_seq) * q_len || k.rows() != static_cast<int64_t>(n_seq) * kv_len ||
            v.rows() != k.rows() || k.cols() != d_model || v.cols() != d_model) {
            throw ShapeError("cross_attention inputs do not match the sequence layout");
        }
        int iq = node_of(q), ik = node_of(k), iv = node_of(v);
        Tensor out = Tensor::zeros({q.rows(), d_model});
        const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
        auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n_seq) * n_heads * q_len * kv_len, 0.0);
        for (int c = 0; c < n_seq; ++c) {
            const int len = q_lengths.empty() ? q_len : q_lengths[static_cast<size_t>(c)];
            for (int h = 0; h < n_heads; ++h) {
                double* P = probs->data() + (static_cast<size_t>(c) * n_heads + h) * q_len * kv_len;
                for (int i = 0; i < len; ++i) {
                    const double* qi = q.values().data() + (c * q_len + i) * d_model + h * dh;
                    double mx = -1e300;
                    for (int j = 0; j < kv_len; ++j) {
                        const double* kj = k.values().data() + (c * kv_len + j) * d_model + h * dh;
                        double s = 0.0;
                        for (int64_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
                        s *= scl;
                        P[i * kv_len + j] = s;
                        mx = std::max(mx, s);
                    }
                    double z = 0.0;
                    for (int j = 0; j < kv_len; ++j) z += (P[i * kv_len + j] = std::exp(P[i * kv_len + j] - mx));
                    double* oi = out.values().data() + (c * q_len + i) * d_model + h * dh;
                    for (int j = 0; j < kv_len; ++j) {
                        double p = (P[i * kv_len + j] /= z);
                        const double* vj = v.values().data() + (c * kv_len + j) * d_model + h * dh;
                        for (int64_t e = 0; e < dh; ++e) oi[e] += p * vj[e];
                    }
                }
            }
        }
        int io = attach(out, {iq, ik, iv});
        node(io).backward = [iq, ik, iv, io, pq = q.ptr(), pk = k.ptr(), pv = v.ptr(), probs, n_seq, q_len, kv_len,
                             n_heads, d_model, dh, scl, q_lengths](Tape& t) {
            const auto& go = t.node_grad(io);
            if (!t.needs(iq) && !t.needs(ik) && !t.needs(iv)) return;
            auto& gq = t.grad_buf(iq, pq->values.size());
            auto& gk = t.grad_buf(ik, pk->values.size());
            auto& gv = t.grad_buf(iv, pv->values.size());
            std::vector<double> dP(static_cast<size_t>(kv_len));
            for (int c = 0; c < n_seq; ++c) {
                const int len = q_lengths.empty() ? q_len : q_lengths[static_cast<size_t>(c)];
                for (int h = 0; h < n_heads; ++h) {
                    const double* P = probs->data() + (static_cast<size_t>(c) * n_heads + h) * q_len * kv_len;
                    for (int i = 0; i < len; ++i) {
                        const double* goi = go.data() + (c * q_len + i) * d_model + h * dh;
                        double dot = 0.0;
                        for (int j = 0; j < kv_len; ++j) {
                            const double* vj = pv->values.data() + (c * kv_len + j) * d_model + h * dh;
                            double s = 0.0;
                            for (int64_t e = 0; e < dh; ++e) s += goi[e] * vj[e];
                            dP[static_cast<size_t>(j)] = s;
                            dot += s * P[i * kv_len + j];
                            double* gvj = gv.data() + (c * kv_len + j) * d_model + h * dh;
                            double p = P[i * kv_len + j];
                            for (int64_t e = 0; e < dh; ++e) gvj[e] += p * goi[e];
                        }
                        const double* qi = pq->values.data() + (c * q_len + i) * d_model + h * dh;
                        double* gqi = gq.data() + (c * q_len + i) * d_model + h * dh;
                        for (int j = 0; j < kv_len; ++j) {
                            double ds = P[i * kv_len + j] * (dP[static_cast<size_t>(j)] - dot) * scl;
                            const double* kj = pk->values.data() + (c * kv_len + j) * d_model + h * dh;
                            double* gkj = gk.data() + (c * kv_len + j) * d_model + h * dh;
                            for (int64_t e = 0; e < dh; ++e) {
                                gqi[e] += ds * kj[e];
                                gkj[e] += ds * qi[e];
                            }
                        }
                    }
                }
            }
        };
        return out;
    }

    // ---- token-level contrastive objective ----------------------------------
    //
    // scores: [n_images, n_tokens] matching scores; token_caption[t] names the
    // caption (= paired image) each token column belongs to.  For each token
    // the loss averages two InfoNCE directions: against all images down its
    // column, and against the union of its own score and this image's scores
    // for tokens of *other* captions along the row.  Mean over tokens; a
    // single-caption batch yields exactly zero.
    Tensor lexi_contrastive(const Tensor& scores, const std::vector<int>& token_caption) {
        const int64_t n = scores.rows(), T = scores.cols();
        if (static_cast<int64_t>(token_caption.size()) != T) {
            throw ShapeError("token_caption length does not match the score columns");
        }
        for (int c : token_caption) {
            if (c < 0 || c >= n) throw IndexError(format_msg("token caption %d out of range [0, %lld)", c, (long long)n));
        }
        int is = node_of(scores);
        const double* S = scores.values().data();

        // Column direction: log-softmax over images at the paired row.
        std::vector<double> col_lse(static_cast<size_t>(T));
        for (int64_t tkn = 0; tkn < T; ++tkn) {
            double mx = -1e300;
            for (int64_t i = 0; i < n; ++i) mx = std::max(mx, S[i * T + tkn]);
            double z = 0.0;
            for (int64_t i = 0; i < n; ++i) z += std::exp(S[i * T + tkn] - mx);
            col_lse[static_cast<size_t>(tkn)] = mx + std::log(z);
        }
        // Row direction: per image, the log-sum-exp over tokens of other
        // captions is shared by all of its own tokens.
        std::vector<double> other_max(static_cast<size_t>(n), -1e300);
        std::vector<double> other_sum(static_cast<size_t>(n), 0.0);
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t tkn = 0; tkn < T; ++tkn) {
                if (token_caption[static_cast<size_t>(tkn)] == i) continue;
                other_max[static_cast<size_t>(i)] = std::max(other_max[static_cast<size_t>(i)], S[i * T + tkn]);
            }
            for (int64_t tkn = 0; tkn < T; ++tkn) {
                if (token_caption[static_cast<size_t>(tkn)] == i) continue;
                other_sum[static_cast<size_t>(i)] += std::exp(S[i * T + tkn] - other_max[static_cast<size_t>(i)]);
            }
        }
        std::vector<double> row_lse(static_cast<size_t>(T));
        double total = 0.0;
        for (int64_t tkn = 0; tkn < T; ++tkn) {
            const int64_t i = token_caption[static_cast<size_t>(tkn)];
            const double own = S[i * T + tkn];
            double lse;
            if (other_sum[static_cast<size_t>(i)] == 0.0) {
                lse = own;  // no other captions in the batch
            } else {
                double mx = std::max(own, other_max[static_cast<size_t>(i)]);
                lse = mx + std::log(std::exp(own - mx) +
                                    other_sum[static_cast<size_t>(i)] * std::exp(other_max[static_cast<size_t>(i)] - mx));
            }
            row_lse[static_cast<size_t>(tkn)] = lse;
            total += 0.5 * (col_lse[static_cast<size_t>(tkn)] - own) + 0.5 * (lse - own);
        }
        Tensor out = Tensor::scalar(total / static_cast<double>(T));
        int io = attach(out, {is});
        node(io).backward = [is, io, ps = scores.ptr(), tc = token_caption, col_lse = std::move(col_lse),
                             row_lse = std::move(row_lse), other_max = std::move(other_max), n, T](Tape& t) {
            if (!t.needs(is)) return;
            const double g = t.node_grad(io)[0] / static_cast<double>(T);
            const double* S = ps->values.data();
            auto& gs = t.grad_buf(is, ps->values.size());
            // Row-direction negatives accumulate once per image: each token of
            // image i adds exp(S[i,t'] - row_lse(token)) at every column t' of
            // another caption.  Sum the weights per image first, factored by
            // other_max so no bare exp(S) is ever formed.
            std::vector<double> wsum(static_cast<size_t>(n), 0.0);
            for (int64_t tkn = 0; tkn < T; ++tkn) {
                const int64_t i = tc[static_cast<size_t>(tkn)];
                const double own = S[i * T + tkn];
                // paired column entry: both directions see it as the positive
                gs[i * T + tkn] += 0.5 * g * (std::exp(own - col_lse[static_cast<size_t>(tkn)]) - 1.0);
                gs[i * T + tkn] += 0.5 * g * (std::exp(own - row_lse[static_cast<size_t>(tkn)]) - 1.0);
                // column softmax over the other images
                for (int64_t r = 0; r < n; ++r) {
                    if (r == i) continue;
                    gs[r * T + tkn] += 0.5 * g * std::exp(S[r * T + tkn] - col_lse[static_cast<size_t>(tkn)]);
                }
                wsum[static_cast<size_t>(i)] +=
                    std::exp(other_max[static_cast<size_t>(i)] - row_lse[static_cast<size_t>(tkn)]);
            }
            for (int64_t i = 0; i < n; ++i) {
                if (wsum[static_cast<size_t>(i)] == 0.0) continue;
                for (int64_t tkn = 0; tkn < T; ++tkn) {
                    if (tc[static_cast<size_t>(tkn)] == i) continue;
                    gs[i * T + tkn] +=
                        0.5 * g * std::exp(S[i * T + tkn] - other_max[static_cast<size_t>(i)]) * wsum[static_cast<size_t>(i)];
                }
            }
        };
        return out;
    }

    // ---- backward ------------------------------------------------------------

    void backward(const Tensor& loss) {
        if (loss.numel() != 1) throw ShapeError("backward expects a scalar loss, got " + shape_str(loss.shape()));
        if (!on_this_tape(loss)) throw UsageError("backward target was not produced on this tape");
        grad_buf(loss.d_->tape_node, 1)[0] += 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& nd = nodes_[static_cast<size_t>(i)];
            if (nd.grad.empty()) continue;
            if (nd.backward) {
                nd.backward(*this);
            } else if (nd.leaf && nd.leaf->requires_grad) {
                if (nd.leaf->grad.empty()) nd.leaf->grad.assign(nd.leaf->values.size(), 0.0);
                for (size_t j = 0; j < nd.grad.size(); ++j) nd.leaf->grad[j] += nd.grad[j];
            }
        }
    }

    size_t node_count() const { return nodes_.size(); }

    bool needs(int id) const { return nodes_[static_cast<size_t>(id)].needs; }
    const std::vector<double>& node_grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
    std::vector<double>& grad_buf(int id, size_t numel) {
        auto& g = nodes_[static_cast<size_t>(id)].grad;
        if (g.empty()) g.assign(numel, 0.0);
        return g;
    }

  private:
    struct Node {
        std::vector<double> grad;
        std::function<void(Tape&)> backward;      // null for leaves
        std::shared_ptr<Tensor::Data> leaf;       // set for leaves
        bool needs = false;
    };

    static uint64_t& next_epoch() {
        static uint64_t e = 1;
        return e;
    }

    bool on_this_tape(const Tensor& t) const {
        return t.d_ && t.d_->tape_epoch == epoch_ && t.d_->tape_node >= 0;
    }

    int node_of(const Tensor& t) {
        if (!t.defined()) throw UsageError("undefined tensor passed to a tape op");
        if (on_this_tape(t)) return t.d_->tape_node;
        Node nd;
        nd.leaf = t.d_;
        nd.needs = t.d_->requires_grad;
        nodes_.push_back(std::move(nd));
        int id = static_cast<int>(nodes_.size()) - 1;
        t.d_->tape_epoch = epoch_;
        t.d_->tape_node = id;
        return id;
    }

    int attach(Tensor& out, std::initializer_list<int> inputs) {
        Node nd;
        for (int i : inputs) nd.needs = nd.needs || nodes_[static_cast<size_t>(i)].needs;
        nodes_.push_back(std::move(nd));
        int id = static_cast<int>(nodes_.size()) - 1;
        out.d_->tape_epoch = epoch_;
        out.d_->tape_node = id;
        return id;
    }

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }

    void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
        if (a.shape() != b.shape()) {
            throw ShapeError(format_msg("%s shape mismatch: %s vs %s", op, shape_str(a.shape()).c_str(),
                                        shape_str(b.shape()).c_str()));
        }
    }

    Tensor binary_ew(const Tensor& a, const Tensor& b, double sign) {
        require_same_shape(sign > 0 ? "add" : "sub", a, b);
        int ia = node_of(a), ib = node_of(b);
        Tensor out = Tensor::zeros(a.shape());
        for (size_t i = 0; i < out.values().size(); ++i) out.values()[i] = a.values()[i] + sign * b.values()[i];
        int io = attach(out, {ia, ib});
        node(io).backward = [ia, ib, io, sign, n = a.numel()](Tape& t) {
            const auto& go = t.node_grad(io);
            if (t.needs(ia)) {
                auto& ga = t.grad_buf(ia, static_cast<size_t>(n));
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (t.needs(ib)) {
                auto& gb = t.grad_buf(ib, static_cast<size_t>(n));
                for (size_t i = 0; i < go.size(); ++i) gb[i] += sign * go[i];
            }
        };
        return out;
    }

    template <typename F, typename DF>
    Tensor unary(const Tensor& x, F f, DF df) {
        int ix = node_of(x);
        Tensor out = Tensor::zeros(x.shape());
        for (size_t i = 0; i < out.values().size(); ++i) out.values()[i] = f(x.values()[i]);
        int io = attach(out, {ix});
        node(io).backward = [ix, io, px = x.ptr(), po = out.ptr(), df](Tape& t) {
            if (!t.needs(ix)) return;
            const auto& go = t.node_grad(io);
            auto& gx = t.grad_buf(ix, px->values.size());
            for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * df(px->values[i], po->values[i]);
        };
        return out;
    }

    Tensor reduce(const Tensor& x, bool mean) {
        int ix = node_of(x);
        double total = 0.0;
        for (double v : x.values()) total += v;
        double denom = mean ? static_cast<double>(x.numel()) : 1.0;
        Tensor out = Tensor::scalar(total / denom);
        int io = attach(out, {ix});
        node(io).backward = [ix, io, denom, n = x.numel()](Tape& t) {
            if (!t.needs(ix)) return;
            double g = t.node_grad(io)[0] / denom;
            auto& gx = t.grad_buf(ix, static_cast<size_t>(n));
            for (auto& v : gx) v += g;
        };
        return out;
    }

    std::vector<Node> nodes_;
    uint64_t epoch_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check.  Returns the maximum relative error
// max_i |g_analytic[i] - g_numeric[i]| / max(1, |g_numeric[i]|) across all
// elements of all listed leaves.  f must rebuild the loss from the leaves on
// the tape it is given.
// ---------------------------------------------------------------------------

inline double grad_check(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> leaves, double h = 1e-5) {
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    {
        Tape tape;
        Tensor loss = f(tape);
        tape.backward(loss);
    }
    double worst = 0.0;
    for (auto& l : leaves) {
        std::vector<double> analytic = l.has_grad() ? l.grad() : std::vector<double>(l.values().size(), 0.0);
        for (size_t i = 0; i < l.values().size(); ++i) {
            double keep = l.values()[i];
            l.values()[i] = keep + h;
            Tape tp;
            double up = f(tp).item();
            l.values()[i] = keep - h;
            Tape tm;
            double dn = f(tm).item();
            l.values()[i] = keep;
            double numeric = (up - dn) / (2.0 * h);
            double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace lcg
