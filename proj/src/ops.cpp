#include "flowvos/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace flowvos {

namespace {

using Rule = Tape::Rule;

bool any_requires_grad(const std::vector<Tensor>& inputs) {
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

Tensor finish(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, Rule backward,
              Rule tangent) {
    Tensor out(std::move(shape), std::move(values));
    Tape* tape = active_tape();
    if (tape != nullptr && any_requires_grad(inputs)) {
        out.impl()->requires_grad = true;
        tape->record(out, std::move(inputs), std::move(backward), std::move(tangent));
    }
    return out;
}

// Returns the gradient buffer of `t` if it participates in differentiation.
double* grad_of(TensorImpl* t) {
    if (!t->requires_grad) return nullptr;
    t->ensure_grad();
    return t->grad.data();
}

const double* tangent_of(const TensorImpl* t) { return t->tangent.empty() ? nullptr : t->tangent.data(); }

double* fresh_tangent(TensorImpl& out) {
    out.tangent.assign(out.size(), 0.0);
    return out.tangent.data();
}

bool is_scalar(const Tensor& t) { return t.rank() == 0; }

enum class Binary { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
    const bool a_scalar = is_scalar(a) && !is_scalar(b);
    const bool b_scalar = is_scalar(b) && !is_scalar(a);
    if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
        throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()) + " (only scalar broadcasting is supported)");
    }
    const Shape shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = shape_numel(shape);
    const std::size_t sa = a_scalar ? 0 : 1;
    const std::size_t sb = b_scalar ? 0 : 1;
    std::vector<double> v(n);
    const double* pa = a.data();
    const double* pb = b.data();
    switch (kind) {
    case Binary::add:
        for (std::size_t i = 0; i < n; ++i) v[i] = pa[i * sa] + pb[i * sb];
        break;
    case Binary::sub:
        for (std::size_t i = 0; i < n; ++i) v[i] = pa[i * sa] - pb[i * sb];
        break;
    case Binary::mul:
        for (std::size_t i = 0; i < n; ++i) v[i] = pa[i * sa] * pb[i * sb];
        break;
    }
    auto backward = [kind, n, sa, sb](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* g = out.grad.data();
        const double* xa = in[0]->data();
        const double* xb = in[1]->data();
        if (double* ga = grad_of(in[0])) {
            switch (kind) {
            case Binary::add:
            case Binary::sub:
                for (std::size_t i = 0; i < n; ++i) ga[i * sa] += g[i];
                break;
            case Binary::mul:
                for (std::size_t i = 0; i < n; ++i) ga[i * sa] += g[i] * xb[i * sb];
                break;
            }
        }
        if (double* gb = grad_of(in[1])) {
            switch (kind) {
            case Binary::add:
                for (std::size_t i = 0; i < n; ++i) gb[i * sb] += g[i];
                break;
            case Binary::sub:
                for (std::size_t i = 0; i < n; ++i) gb[i * sb] -= g[i];
                break;
            case Binary::mul:
                for (std::size_t i = 0; i < n; ++i) gb[i * sb] += g[i] * xa[i * sa];
                break;
            }
        }
    };
    auto tangent = [kind, n, sa, sb](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* ta = tangent_of(in[0]);
        const double* tb = tangent_of(in[1]);
        if (!ta && !tb) return;
        double* t = fresh_tangent(out);
        const double* xa = in[0]->data();
        const double* xb = in[1]->data();
        const double sign = kind == Binary::sub ? -1.0 : 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            double d = 0.0;
            if (kind == Binary::mul) {
                if (ta) d += ta[i * sa] * xb[i * sb];
                if (tb) d += xa[i * sa] * tb[i * sb];
            } else {
                if (ta) d += ta[i * sa];
                if (tb) d += sign * tb[i * sb];
            }
            t[i] = d;
        }
    };
    return finish(shape, std::move(v), {a, b}, backward, tangent);
}

// Elementwise unary op with derivative computed from (input, output).
template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D deriv) {
    const std::size_t n = a.numel();
    std::vector<double> v(n);
    const double* x = a.data();
    for (std::size_t i = 0; i < n; ++i) v[i] = f(x[i]);
    auto backward = [n, deriv](TensorImpl& out, std::span<TensorImpl* const> in) {
        if (double* ga = grad_of(in[0])) {
            const double* g = out.grad.data();
            const double* xi = in[0]->data();
            const double* y = out.data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * deriv(xi[i], y[i]);
        }
    };
    auto tangent = [n, deriv](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* ta = tangent_of(in[0]);
        if (!ta) return;
        double* t = fresh_tangent(out);
        const double* xi = in[0]->data();
        const double* y = out.data();
        for (std::size_t i = 0; i < n; ++i) t[i] = ta[i] * deriv(xi[i], y[i]);
    };
    return finish(a.shape(), std::move(v), {a}, backward, tangent);
}

// Ops that are linear in their single input: forward(x) and its transpose.
template <typename Fwd, typename Adj>
Tensor linear_unary(const Tensor& a, Shape out_shape, Fwd forward, Adj adjoint) {
    std::vector<double> v(shape_numel(out_shape), 0.0);
    forward(a.data(), v.data());
    auto backward = [adjoint](TensorImpl& out, std::span<TensorImpl* const> in) {
        if (double* ga = grad_of(in[0])) adjoint(out.grad.data(), ga);
    };
    auto tangent = [forward](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* ta = tangent_of(in[0]);
        if (!ta) return;
        forward(ta, fresh_tangent(out));
    };
    return finish(std::move(out_shape), std::move(v), {a}, backward, tangent);
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::mul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
    const std::size_t n = a.numel();
    auto fwd = [n, factor](const double* x, double* y) {
        for (std::size_t i = 0; i < n; ++i) y[i] += factor * x[i];
    };
    return linear_unary(a, a.shape(), fwd, fwd);
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("scale_by: factor must hold one element, got " + shape_str(s.shape()));
    const std::size_t n = a.numel();
    const double f = s[0];
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = f * a[i];
    auto backward = [n](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* g = out.grad.data();
        if (double* ga = grad_of(in[0])) {
            const double f = in[1]->data()[0];
            for (std::size_t i = 0; i < n; ++i) ga[i] += f * g[i];
        }
        if (double* gs = grad_of(in[1])) {
            const double* x = in[0]->data();
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) acc += g[i] * x[i];
            gs[0] += acc;
        }
    };
    auto tangent = [n](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* ta = tangent_of(in[0]);
        const double* ts = tangent_of(in[1]);
        if (!ta && !ts) return;
        double* t = fresh_tangent(out);
        const double f = in[1]->data()[0];
        const double* x = in[0]->data();
        for (std::size_t i = 0; i < n; ++i) t[i] = (ta ? f * ta[i] : 0.0) + (ts ? ts[0] * x[i] : 0.0);
    };
    return finish(a.shape(), std::move(v), {a, s}, backward, tangent);
}

Tensor relu(const Tensor& a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        a,
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor square(const Tensor& a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(a.shape()));
    }
    const auto& shape = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t len = shape[axis];
    std::vector<double> v(a.numel());
    const double* x = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = x[base];
            for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(x[base + j * inner] - mx);
                v[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < len; ++j) v[base + j * inner] /= z;
        }
    }
    // Both rules apply J = diag(s) - s s^T (symmetric) along the axis.
    auto apply_jacobian = [outer, inner, len](const double* s, const double* d, double* dst) {
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) dot += s[base + j * inner] * d[base + j * inner];
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t k = base + j * inner;
                    dst[k] += s[k] * (d[k] - dot);
                }
            }
        }
    };
    auto backward = [apply_jacobian](TensorImpl& out, std::span<TensorImpl* const> in) {
        if (double* ga = grad_of(in[0])) apply_jacobian(out.data(), out.grad.data(), ga);
    };
    auto tangent = [apply_jacobian](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* ta = tangent_of(in[0]);
        if (!ta) return;
        apply_jacobian(out.data(), ta, fresh_tangent(out));
    };
    return finish(shape, std::move(v), {a}, backward, tangent);
}

Tensor sum(const Tensor& a) {
    const std::size_t n = a.numel();
    return linear_unary(
        a, {},
        [n](const double* x, double* y) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += x[i];
            y[0] += s;
        },
        [n](const double* g, double* gx) {
            for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
        });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor squared_norm(const Tensor& a) {
    const std::size_t n = a.numel();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * a[i];
    auto backward = [n](TensorImpl& out, std::span<TensorImpl* const> in) {
        if (double* ga = grad_of(in[0])) {
            const double g = 2.0 * out.grad[0];
            const double* x = in[0]->data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g * x[i];
        }
    };
    auto tangent = [n](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* ta = tangent_of(in[0]);
        if (!ta) return;
        const double* x = in[0]->data();
        double d = 0.0;
        for (std::size_t i = 0; i < n; ++i) d += 2.0 * x[i] * ta[i];
        fresh_tangent(out)[0] = d;
    };
    return finish({}, {s}, {a}, backward, tangent);
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// c(m x n) += a(m x k) * b(k x n)
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    const auto mi = static_cast<Eigen::Index>(m), ki = static_cast<Eigen::Index>(k), ni = static_cast<Eigen::Index>(n);
    MutMap(c, mi, ni).noalias() += ConstMap(a, mi, ki) * ConstMap(b, ki, ni);
}

// c(m x k) += g(m x n) * b(k x n)^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* g, const double* b, double* c) {
    const auto mi = static_cast<Eigen::Index>(m), ki = static_cast<Eigen::Index>(k), ni = static_cast<Eigen::Index>(n);
    MutMap(c, mi, ki).noalias() += ConstMap(g, mi, ni) * ConstMap(b, ki, ni).transpose();
}

// c(k x n) += a(m x k)^T * g(m x n)
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* g, double* c) {
    const auto mi = static_cast<Eigen::Index>(m), ki = static_cast<Eigen::Index>(k), ni = static_cast<Eigen::Index>(n);
    MutMap(c, ki, ni).noalias() += ConstMap(a, mi, ki).transpose() * ConstMap(g, mi, ni);
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul needs 2-D operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimension mismatch, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    std::vector<double> v(m * n, 0.0);
    gemm_nn(m, k, n, a.data(), b.data(), v.data());
    auto backward = [m, k, n](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* g = out.grad.data();
        if (double* ga = grad_of(in[0])) gemm_nt(m, n, k, g, in[1]->data(), ga);
        if (double* gb = grad_of(in[1])) gemm_tn(m, k, n, in[0]->data(), g, gb);
    };
    auto tangent = [m, k, n](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* ta = tangent_of(in[0]);
        const double* tb = tangent_of(in[1]);
        if (!ta && !tb) return;
        double* t = fresh_tangent(out);
        if (ta) gemm_nn(m, k, n, ta, in[1]->data(), t);
        if (tb) gemm_nn(m, k, n, in[0]->data(), tb, t);
    };
    return finish({m, n}, std::move(v), {a, b}, backward, tangent);
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose needs a 2-D tensor, got " + shape_str(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    return linear_unary(
        a, {c, r},
        [r, c](const double* x, double* y) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) y[j * r + i] += x[i * c + j];
        },
        [r, c](const double* g, double* gx) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
        });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->storage = a.handle()->storage;
    Tensor out(std::move(impl));
    Tape* tape = active_tape();
    if (tape != nullptr && a.requires_grad()) {
        const std::size_t n = a.numel();
        out.impl()->requires_grad = true;
        tape->record(
            out, {a},
            [n](TensorImpl& o, std::span<TensorImpl* const> in) {
                if (double* ga = grad_of(in[0]))
                    for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[i];
            },
            [](TensorImpl& o, std::span<TensorImpl* const> in) {
                if (const double* ta = tangent_of(in[0])) o.tangent.assign(ta, ta + o.size());
            });
    }
    return out;
}

Tensor flatten(const Tensor& a) { return reshape(a, {a.numel()}); }

Tensor concat(std::initializer_list<Tensor> parts) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    Shape tail(parts[0].shape().begin() + (parts[0].rank() ? 1 : 0), parts[0].shape().end());
    if (parts[0].rank() == 0) throw ShapeError("concat needs tensors of rank >= 1");
    std::size_t lead = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
            throw ShapeError("concat: trailing dimensions differ, " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        offsets.push_back(lead * shape_numel(tail));
        lead += p.dim(0);
    }
    Shape shape{lead};
    shape.insert(shape.end(), tail.begin(), tail.end());
    std::vector<double> v;
    v.reserve(shape_numel(shape));
    for (const auto& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    auto backward = [offsets](TensorImpl& out, std::span<TensorImpl* const> in) {
        for (std::size_t i = 0; i < in.size(); ++i) {
            if (double* g = grad_of(in[i])) {
                const double* src = out.grad.data() + offsets[i];
                for (std::size_t j = 0; j < in[i]->size(); ++j) g[j] += src[j];
            }
        }
    };
    auto tangent = [offsets](TensorImpl& out, std::span<TensorImpl* const> in) {
        bool any = false;
        for (auto* t : in) any = any || !t->tangent.empty();
        if (!any) return;
        double* t = fresh_tangent(out);
        for (std::size_t i = 0; i < in.size(); ++i) {
            if (const double* ti = tangent_of(in[i])) std::copy(ti, ti + in[i]->size(), t + offsets[i]);
        }
    };
    return finish(std::move(shape), std::move(v), std::move(inputs), backward, tangent);
}

Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
    if (a.rank() == 0 || begin > end || end > a.dim(0)) {
        throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for shape " + shape_str(a.shape()));
    }
    Shape shape = a.shape();
    shape[0] = end - begin;
    const std::size_t row = a.numel() / a.dim(0);
    const std::size_t off = begin * row;
    const std::size_t n = (end - begin) * row;
    return linear_unary(
        a, std::move(shape),
        [off, n](const double* x, double* y) {
            for (std::size_t i = 0; i < n; ++i) y[i] += x[off + i];
        },
        [off, n](const double* g, double* gx) {
            for (std::size_t i = 0; i < n; ++i) gx[off + i] += g[i];
        });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
    std::size_t cin, h, w, cout, k, stride, pad, ho, wo;
};

// Range of output indices o with o*stride + offset inside [0, extent).
inline void valid_range(long extent, long offset, long stride, long count, long& lo, long& hi) {
    lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
    const long last = extent - 1 - offset;
    hi = last < 0 ? -1 : std::min(count - 1, last / stride);
}

// Unfolds the input into a (C_in k k) x (H_out W_out) matrix with zeros where
// the window leaves the image.
std::vector<double> im2col(const ConvGeom& g, const double* in) {
    const long s = static_cast<long>(g.stride);
    const std::size_t plane = g.ho * g.wo;
    std::vector<double> col(g.cin * g.k * g.k * plane, 0.0);
    for (std::size_t ic = 0; ic < g.cin; ++ic)
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            const long offy = static_cast<long>(ky) - static_cast<long>(g.pad);
            long ylo, yhi;
            valid_range(static_cast<long>(g.h), offy, s, static_cast<long>(g.ho), ylo, yhi);
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const long offx = static_cast<long>(kx) - static_cast<long>(g.pad);
                long xlo, xhi;
                valid_range(static_cast<long>(g.w), offx, s, static_cast<long>(g.wo), xlo, xhi);
                double* row = col.data() + ((ic * g.k + ky) * g.k + kx) * plane;
                for (long oy = ylo; oy <= yhi; ++oy) {
                    const double* src = in + (ic * g.h + static_cast<std::size_t>(oy * s + offy)) * g.w;
                    double* dst = row + static_cast<std::size_t>(oy) * g.wo;
                    for (long ox = xlo; ox <= xhi; ++ox) dst[ox] = src[ox * s + offx];
                }
            }
        }
    return col;
}

// Adjoint of im2col: scatters a column matrix back onto the input grid.
void col2im(const ConvGeom& g, const double* col, double* in) {
    const long s = static_cast<long>(g.stride);
    const std::size_t plane = g.ho * g.wo;
    for (std::size_t ic = 0; ic < g.cin; ++ic)
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            const long offy = static_cast<long>(ky) - static_cast<long>(g.pad);
            long ylo, yhi;
            valid_range(static_cast<long>(g.h), offy, s, static_cast<long>(g.ho), ylo, yhi);
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const long offx = static_cast<long>(kx) - static_cast<long>(g.pad);
                long xlo, xhi;
                valid_range(static_cast<long>(g.w), offx, s, static_cast<long>(g.wo), xlo, xhi);
                const double* row = col + ((ic * g.k + ky) * g.k + kx) * plane;
                for (long oy = ylo; oy <= yhi; ++oy) {
                    double* dst = in + (ic * g.h + static_cast<std::size_t>(oy * s + offy)) * g.w;
                    const double* src = row + static_cast<std::size_t>(oy) * g.wo;
                    for (long ox = xlo; ox <= xhi; ++ox) dst[ox * s + offx] += src[ox];
                }
            }
        }
}

// A 1x1 stride-1 unpadded convolution reads the input as its own column matrix.
bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

void conv_forward(const ConvGeom& g, const double* in, const double* ker, double* out) {
    const std::size_t depth = g.cin * g.k * g.k, plane = g.ho * g.wo;
    if (is_pointwise(g)) {
        gemm_nn(g.cout, depth, plane, ker, in, out);
        return;
    }
    const auto col = im2col(g, in);
    gemm_nn(g.cout, depth, plane, ker, col.data(), out);
}

void conv_backward(const ConvGeom& g, const double* gout, const double* in, const double* ker, double* gin,
                   double* gker) {
    const std::size_t depth = g.cin * g.k * g.k, plane = g.ho * g.wo;
    if (is_pointwise(g)) {
        if (gker) gemm_nt(g.cout, plane, depth, gout, in, gker);
        if (gin) gemm_tn(g.cout, depth, plane, ker, gout, gin);
        return;
    }
    if (gker) {
        const auto col = im2col(g, in);
        gemm_nt(g.cout, plane, depth, gout, col.data(), gker);
    }
    if (gin) {
        std::vector<double> gcol(depth * plane, 0.0);
        gemm_tn(g.cout, depth, plane, ker, gout, gcol.data());
        col2im(g, gcol.data(), gin);
    }
}

} // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
    if (input.rank() != 3) throw ShapeError("conv2d: input must be C x H x W, got " + shape_str(input.shape()));
    if (kernel.rank() != 4) {
        throw ShapeError("conv2d: kernel must be C_out x C_in x k x k, got " + shape_str(kernel.shape()));
    }
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t k = kernel.dim(2);
    if (kernel.dim(3) != k) throw ShapeError("conv2d: kernel width " + std::to_string(kernel.dim(3)) +
                                             " differs from kernel height " + std::to_string(k));
    if (k % 2 == 0) throw ShapeError("conv2d: kernel size " + std::to_string(k) + " is not odd");
    if (kernel.dim(1) != input.dim(0)) {
        throw ShapeError("conv2d: input channels " + std::to_string(input.dim(0)) +
                         " do not match kernel input channels " + std::to_string(kernel.dim(1)));
    }
    ConvGeom g{};
    g.cin = input.dim(0);
    g.h = input.dim(1);
    g.w = input.dim(2);
    g.cout = kernel.dim(0);
    g.k = k;
    g.stride = stride;
    g.pad = padding;
    if (g.h + 2 * padding < k) throw ShapeError("conv2d: output height would be < 1");
    if (g.w + 2 * padding < k) throw ShapeError("conv2d: output width would be < 1");
    g.ho = (g.h + 2 * padding - k) / stride + 1;
    g.wo = (g.w + 2 * padding - k) / stride + 1;

    std::vector<double> v(g.cout * g.ho * g.wo, 0.0);
    conv_forward(g, input.data(), kernel.data(), v.data());
    auto backward = [g](TensorImpl& out, std::span<TensorImpl* const> in) {
        conv_backward(g, out.grad.data(), in[0]->data(), in[1]->data(), grad_of(in[0]), grad_of(in[1]));
    };
    auto tangent = [g](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* ti = tangent_of(in[0]);
        const double* tk = tangent_of(in[1]);
        if (!ti && !tk) return;
        double* t = fresh_tangent(out);
        if (ti) conv_forward(g, ti, in[1]->data(), t);
        if (tk) conv_forward(g, in[0]->data(), tk, t);
    };
    return finish({g.cout, g.ho, g.wo}, std::move(v), {input, kernel}, backward, tangent);
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() < 1 || bias.rank() != 1 || bias.dim(0) != x.dim(0)) {
        throw ShapeError("add_channel_bias: bias " + shape_str(bias.shape()) + " does not match channels of " +
                         shape_str(x.shape()));
    }
    const std::size_t c = x.dim(0);
    const std::size_t plane = x.numel() / c;
    std::vector<double> v(x.values().begin(), x.values().end());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) v[ch * plane + i] += bias[ch];
    auto backward = [c, plane](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* g = out.grad.data();
        if (double* gx = grad_of(in[0]))
            for (std::size_t i = 0; i < c * plane; ++i) gx[i] += g[i];
        if (double* gb = grad_of(in[1])) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) s += g[ch * plane + i];
                gb[ch] += s;
            }
        }
    };
    auto tangent = [c, plane](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* tx = tangent_of(in[0]);
        const double* tb = tangent_of(in[1]);
        if (!tx && !tb) return;
        double* t = fresh_tangent(out);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < plane; ++i)
                t[ch * plane + i] = (tx ? tx[ch * plane + i] : 0.0) + (tb ? tb[ch] : 0.0);
    };
    return finish(x.shape(), std::move(v), {x, bias}, backward, tangent);
}

Tensor avg_pool2(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("avg_pool2: input must be C x H x W, got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % 2 || w % 2) throw ShapeError("avg_pool2: spatial size " + shape_str(x.shape()) + " is not even");
    const std::size_t ho = h / 2, wo = w / 2;
    return linear_unary(
        x, {c, ho, wo},
        [c, h, w, ho, wo](const double* in, double* out) {
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < ho; ++y) {
                    const double* r0 = in + (ch * h + 2 * y) * w;
                    const double* r1 = r0 + w;
                    double* o = out + (ch * ho + y) * wo;
                    for (std::size_t xx = 0; xx < wo; ++xx)
                        o[xx] += 0.25 * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
                }
        },
        [c, h, w, ho, wo](const double* g, double* gin) {
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < ho; ++y) {
                    double* r0 = gin + (ch * h + 2 * y) * w;
                    double* r1 = r0 + w;
                    const double* o = g + (ch * ho + y) * wo;
                    for (std::size_t xx = 0; xx < wo; ++xx) {
                        const double q = 0.25 * o[xx];
                        r0[2 * xx] += q;
                        r0[2 * xx + 1] += q;
                        r1[2 * xx] += q;
                        r1[2 * xx + 1] += q;
                    }
                }
        });
}

namespace {

struct Tap {
    std::size_t i0, i1;
    double w0, w1;
};

std::vector<Tap> upsample_taps(std::size_t n) {
    std::vector<Tap> taps(2 * n);
    for (std::size_t o = 0; o < 2 * n; ++o) {
        double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        if (src < 0.0) src = 0.0;
        const auto i0 = static_cast<std::size_t>(src);
        const std::size_t i1 = std::min(i0 + 1, n - 1);
        const double l1 = src - static_cast<double>(i0);
        taps[o] = {i0, i1, 1.0 - l1, l1};
    }
    return taps;
}

} // namespace

Tensor upsample2x(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("upsample2x: input must be C x H x W, got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto ty = upsample_taps(h);
    const auto tx = upsample_taps(w);
    const std::size_t ho = 2 * h, wo = 2 * w;
    return linear_unary(
        x, {c, ho, wo},
        [=](const double* in, double* out) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* p = in + ch * h * w;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const Tap& a = ty[oy];
                    const double* r0 = p + a.i0 * w;
                    const double* r1 = p + a.i1 * w;
                    double* o = out + (ch * ho + oy) * wo;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const Tap& b = tx[ox];
                        o[ox] += a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
                    }
                }
            }
        },
        [=](const double* g, double* gin) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                double* p = gin + ch * h * w;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const Tap& a = ty[oy];
                    double* r0 = p + a.i0 * w;
                    double* r1 = p + a.i1 * w;
                    const double* o = g + (ch * ho + oy) * wo;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const Tap& b = tx[ox];
                        const double v = o[ox];
                        r0[b.i0] += a.w0 * b.w0 * v;
                        r0[b.i1] += a.w0 * b.w1 * v;
                        r1[b.i0] += a.w1 * b.w0 * v;
                        r1[b.i1] += a.w1 * b.w1 * v;
                    }
                }
            }
        });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    if (logits.shape() != targets.shape()) {
        throw ShapeError("bce_with_logits: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape()));
    }
    const std::size_t n = logits.numel();
    if (n == 0) throw ShapeError("bce_with_logits on empty tensors");
    const double inv_n = 1.0 / static_cast<double>(n);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = logits[i];
        loss += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
    }
    loss *= inv_n;
    auto residual = [](double x, double y) {
        const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        return s - y;
    };
    auto backward = [n, inv_n, residual](TensorImpl& out, std::span<TensorImpl* const> in) {
        if (in[1]->requires_grad) throw std::logic_error("bce_with_logits: targets must be constant");
        if (double* gx = grad_of(in[0])) {
            const double g = out.grad[0] * inv_n;
            const double* x = in[0]->data();
            const double* y = in[1]->data();
            for (std::size_t i = 0; i < n; ++i) gx[i] += g * residual(x[i], y[i]);
        }
    };
    auto tangent = [n, inv_n, residual](TensorImpl& out, std::span<TensorImpl* const> in) {
        const double* tx = tangent_of(in[0]);
        if (!tx) return;
        const double* x = in[0]->data();
        const double* y = in[1]->data();
        double d = 0.0;
        for (std::size_t i = 0; i < n; ++i) d += residual(x[i], y[i]) * tx[i];
        fresh_tangent(out)[0] = d * inv_n;
    };
    return finish({}, {loss}, {logits, targets}, backward, tangent);
}

} // namespace flowvos
