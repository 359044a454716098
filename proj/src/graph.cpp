// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstring>

#include "recseq/recschema.hpp"
#include "recseq/tensor.hpp"

namespace recseq {

namespace {

constexpr double kProdClamp = 1.0 - 1e-12;
constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

Dtype promote(Dtype a, Dtype b) {
    return (a == Dtype::f64 || b == Dtype::f64) ? Dtype::f64 : Dtype::f32;
}

// Right-aligned broadcast plan: per output axis, element strides into each
// operand (0 where that operand has extent 1).
struct Bcast {
    Shape out;
    std::vector<int64_t> sa, sb;
};

Bcast make_bcast(const Shape& a, const Shape& b, const char* opname) {
    int ra = int(a.size()), rb = int(b.size());
    int r = std::max(ra, rb);
    Bcast plan;
    plan.out.resize(size_t(r));
    plan.sa.assign(size_t(r), 0);
    plan.sb.assign(size_t(r), 0);
    for (int ax = r - 1; ax >= 0; --ax) {
        int ia = ax - (r - ra), ib = ax - (r - rb);
        int64_t da = ia >= 0 ? a[size_t(ia)] : 1;
        int64_t db = ib >= 0 ? b[size_t(ib)] : 1;
        check(da == db || da == 1 || db == 1, Errc::shape,
              std::string(opname) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                  " are not broadcastable");
        plan.out[size_t(ax)] = std::max(da, db);
    }
    int64_t stride_a = 1, stride_b = 1;
    for (int ax = r - 1; ax >= 0; --ax) {
        int ia = ax - (r - ra), ib = ax - (r - rb);
        int64_t da = ia >= 0 ? a[size_t(ia)] : 1;
        int64_t db = ib >= 0 ? b[size_t(ib)] : 1;
        plan.sa[size_t(ax)] = (da == 1 && plan.out[size_t(ax)] != 1) ? 0 : (ia >= 0 ? stride_a : 0);
        plan.sb[size_t(ax)] = (db == 1 && plan.out[size_t(ax)] != 1) ? 0 : (ib >= 0 ? stride_b : 0);
        if (ia >= 0) stride_a *= da;
        if (ib >= 0) stride_b *= db;
    }
    return plan;
}

// Odometer walk over the broadcast output; f(out_index, offset_a, offset_b).
template <class F>
void bcast_for_each(const Bcast& plan, F&& f) {
    int r = int(plan.out.size());
    int64_t total = shape_numel(plan.out);
    if (total == 0) return;
    if (r == 0) {
        f(int64_t(0), int64_t(0), int64_t(0));
        return;
    }
    std::vector<int64_t> idx(size_t(r), 0);
    int64_t oa = 0, ob = 0;
    int64_t inner = plan.out[size_t(r - 1)];
    int64_t sal = plan.sa[size_t(r - 1)], sbl = plan.sb[size_t(r - 1)];
    int64_t o = 0;
    while (o < total) {
        for (int64_t t = 0; t < inner; ++t) f(o + t, oa + t * sal, ob + t * sbl);
        o += inner;
        int ax = r - 2;
        while (ax >= 0) {
            oa += plan.sa[size_t(ax)];
            ob += plan.sb[size_t(ax)];
            if (++idx[size_t(ax)] < plan.out[size_t(ax)]) break;
            oa -= plan.sa[size_t(ax)] * plan.out[size_t(ax)];
            ob -= plan.sb[size_t(ax)] * plan.out[size_t(ax)];
            idx[size_t(ax)] = 0;
            --ax;
        }
        if (ax < 0) break;
    }
}

double fwd_add(double a, double b) { return a + b; }
double fwd_sub(double a, double b) { return a - b; }
double fwd_mul(double a, double b) { return a * b; }
void bwd_add(double, double, double g, double& ga, double& gb) { ga += g; gb += g; }
void bwd_sub(double, double, double g, double& ga, double& gb) { ga += g; gb -= g; }
void bwd_mul(double a, double b, double g, double& ga, double& gb) { ga += g * b; gb += g * a; }

double fwd_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double dx_sigmoid(double, double y) { return y * (1.0 - y); }
double fwd_tanh(double x) { return std::tanh(x); }
double dx_tanh(double, double y) { return 1.0 - y * y; }
double fwd_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double dx_gelu(double x, double) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}
double fwd_exp(double x) { return std::exp(x); }
double dx_exp(double, double y) { return y; }
double fwd_log1p(double x) { return std::log1p(x); }
double dx_log1p(double x, double) { return 1.0 / (1.0 + x); }
double fwd_neg(double x) { return -x; }
double dx_neg(double, double) { return -1.0; }

}  // namespace

Graph::Node& Graph::node(Var v) {
    check(v.defined() && v.id < int(nodes_.size()), Errc::internal, "dangling graph var");
    return nodes_[size_t(v.id)];
}

const Graph::Node& Graph::node(Var v) const {
    check(v.defined() && v.id < int(nodes_.size()), Errc::internal, "dangling graph var");
    return nodes_[size_t(v.id)];
}

const Tensor& Graph::val(Var v) const {
    const Node& n = node(v);
    check(n.value.defined(), Errc::invalid_arg, "value was released by compact()");
    return n.value;
}

const Tensor& Graph::grad(Var v) const {
    const Node& n = node(v);
    check(n.grad.defined(), Errc::invalid_arg, "gradient not computed for this var");
    return n.grad;
}

Graph::Var Graph::leaf(Tensor value, bool requires_grad) {
    check(value.defined(), Errc::invalid_arg, "leaf from undefined tensor");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && record_grad_;
    n.is_leaf = true;
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
}

void Graph::compact(std::initializer_list<Var> keep) {
    check(!record_grad_, Errc::invalid_arg, "compact is only valid on a no-grad graph");
    for (size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.is_leaf || !n.value.defined()) continue;
        bool kept = false;
        for (Var v : keep) kept = kept || v.id == int(i);
        if (!kept) n.value = Tensor{};
    }
}

Graph::Var Graph::param(const Tensor& value, const std::string& name) {
    check(!name.empty(), Errc::invalid_arg, "parameter leaf needs a name");
    for (const Node& n : nodes_)
        check(n.param_name != name, Errc::invalid_arg,
              "parameter '" + name + "' registered twice in one graph");
    Var v = leaf(value, true);
    nodes_.back().param_name = name;
    return v;
}

Graph::Var Graph::push(Tensor value, std::vector<int> inputs,
                       std::function<void(Graph&, int)> backprop) {
    Node n;
    n.value = std::move(value);
    if (record_grad_) {
        n.inputs = std::move(inputs);
        n.backprop = std::move(backprop);
        for (int in : n.inputs)
            if (nodes_[size_t(in)].requires_grad) n.requires_grad = true;
    }
    n.value.quantize_to_dtype();
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
}

void Graph::ensure_grad(int id) {
    Node& n = nodes_[size_t(id)];
    if (!n.grad.defined()) n.grad = Tensor::zeros(n.value.shape(), Dtype::f64);
}

Graph::Var Graph::binary_op(Var a, Var b, const char* name, double (*fwd)(double, double),
                            void (*bwd)(double, double, double, double&, double&)) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    Bcast plan = make_bcast(ta.shape(), tb.shape(), name);
    Tensor out(plan.out, promote(ta.dtype(), tb.dtype()));
    const double* pa = ta.data();
    const double* pb = tb.data();
    double* po = out.data();
    bcast_for_each(plan, [&](int64_t o, int64_t oa, int64_t ob) { po[o] = fwd(pa[oa], pb[ob]); });
    return push(std::move(out), {a.id, b.id}, [plan, bwd](Graph& g, int self) {
        Node& n = g.nodes_[size_t(self)];
        int ia = n.inputs[0], ib = n.inputs[1];
        bool need_a = g.nodes_[size_t(ia)].requires_grad;
        bool need_b = g.nodes_[size_t(ib)].requires_grad;
        if (need_a) g.ensure_grad(ia);
        if (need_b) g.ensure_grad(ib);
        const double* pa = g.nodes_[size_t(ia)].value.data();
        const double* pb = g.nodes_[size_t(ib)].value.data();
        const double* pg = n.grad.data();
        double* ga = need_a ? g.nodes_[size_t(ia)].grad.data() : nullptr;
        double* gb = need_b ? g.nodes_[size_t(ib)].grad.data() : nullptr;
        double sink = 0.0;
        bcast_for_each(plan, [&](int64_t o, int64_t oa, int64_t ob) {
            bwd(pa[oa], pb[ob], pg[o], need_a ? ga[oa] : sink, need_b ? gb[ob] : sink);
        });
    });
}

Graph::Var Graph::unary_op(Var a, const char*, double (*fwd)(double),
                           double (*dfdx)(double, double)) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape(), ta.dtype());
    const double* pa = ta.data();
    double* po = out.data();
    int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
    return push(std::move(out), {a.id}, [dfdx](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ia = nd.inputs[0];
        if (!g.nodes_[size_t(ia)].requires_grad) return;
        g.ensure_grad(ia);
        const double* px = g.nodes_[size_t(ia)].value.data();
        const double* py = nd.value.data();
        const double* pg = nd.grad.data();
        double* ga = g.nodes_[size_t(ia)].grad.data();
        int64_t n = nd.value.numel();
        for (int64_t i = 0; i < n; ++i) ga[i] += pg[i] * dfdx(px[i], py[i]);
    });
}

Graph::Var Graph::add(Var a, Var b) { return binary_op(a, b, "add", fwd_add, bwd_add); }
Graph::Var Graph::sub(Var a, Var b) { return binary_op(a, b, "sub", fwd_sub, bwd_sub); }
Graph::Var Graph::mul(Var a, Var b) { return binary_op(a, b, "mul", fwd_mul, bwd_mul); }
Graph::Var Graph::neg(Var a) { return unary_op(a, "neg", fwd_neg, dx_neg); }
Graph::Var Graph::sigmoid(Var a) { return unary_op(a, "sigmoid", fwd_sigmoid, dx_sigmoid); }
Graph::Var Graph::tanh_(Var a) { return unary_op(a, "tanh", fwd_tanh, dx_tanh); }
Graph::Var Graph::gelu(Var a) { return unary_op(a, "gelu", fwd_gelu, dx_gelu); }
Graph::Var Graph::exp_(Var a) { return unary_op(a, "exp", fwd_exp, dx_exp); }
Graph::Var Graph::log1p_(Var a) { return unary_op(a, "log1p", fwd_log1p, dx_log1p); }

Graph::Var Graph::add_scalar(Var a, double c) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape(), ta.dtype());
    const double* pa = ta.data();
    double* po = out.data();
    for (int64_t i = 0; i < ta.numel(); ++i) po[i] = pa[i] + c;
    return push(std::move(out), {a.id}, [](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ia = nd.inputs[0];
        if (!g.nodes_[size_t(ia)].requires_grad) return;
        g.ensure_grad(ia);
        const double* pg = nd.grad.data();
        double* ga = g.nodes_[size_t(ia)].grad.data();
        for (int64_t i = 0; i < nd.value.numel(); ++i) ga[i] += pg[i];
    });
}

Graph::Var Graph::mul_scalar(Var a, double c) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape(), ta.dtype());
    const double* pa = ta.data();
    double* po = out.data();
    for (int64_t i = 0; i < ta.numel(); ++i) po[i] = pa[i] * c;
    return push(std::move(out), {a.id}, [c](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ia = nd.inputs[0];
        if (!g.nodes_[size_t(ia)].requires_grad) return;
        g.ensure_grad(ia);
        const double* pg = nd.grad.data();
        double* ga = g.nodes_[size_t(ia)].grad.data();
        for (int64_t i = 0; i < nd.value.numel(); ++i) ga[i] += pg[i] * c;
    });
}

// kind: 0 sum, 1 mean, 2 max
Graph::Var Graph::reduce_op(Var a, int axis, bool keepdims, int kind) {
    const Tensor& ta = val(a);
    int r = ta.rank();
    if (axis < 0) axis += r;
    check(axis >= 0 && axis < r, Errc::shape,
          "reduce: axis out of range for " + shape_str(ta.shape()));
    int64_t extent = ta.shape()[size_t(axis)];
    check(extent > 0, Errc::shape, "reduce: empty axis extent in " + shape_str(ta.shape()));

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= ta.shape()[size_t(i)];
    for (int i = axis + 1; i < r; ++i) inner *= ta.shape()[size_t(i)];

    Shape out_shape;
    for (int i = 0; i < r; ++i) {
        if (i == axis) {
            if (keepdims) out_shape.push_back(1);
        } else {
            out_shape.push_back(ta.shape()[size_t(i)]);
        }
    }

    Tensor out(out_shape, ta.dtype());
    const double* pa = ta.data();
    double* po = out.data();
    auto argmax = std::make_shared<std::vector<int64_t>>();
    if (kind == 2) argmax->assign(size_t(outer * inner), 0);

    for (int64_t u = 0; u < outer; ++u) {
        for (int64_t v = 0; v < inner; ++v) {
            const double* base = pa + u * extent * inner + v;
            if (kind == 2) {
                double best = base[0];
                int64_t besti = 0;
                for (int64_t e = 1; e < extent; ++e) {
                    double x = base[e * inner];
                    if (x > best) {  // strict: ties keep the lowest index
                        best = x;
                        besti = e;
                    }
                }
                po[u * inner + v] = best;
                (*argmax)[size_t(u * inner + v)] = besti;
            } else {
                double acc = 0.0;
                for (int64_t e = 0; e < extent; ++e) acc += base[e * inner];
                po[u * inner + v] = kind == 1 ? acc / double(extent) : acc;
            }
        }
    }

    return push(std::move(out), {a.id},
                [outer, inner, extent, kind, argmax](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ia = nd.inputs[0];
        if (!g.nodes_[size_t(ia)].requires_grad) return;
        g.ensure_grad(ia);
        const double* pg = nd.grad.data();
        double* ga = g.nodes_[size_t(ia)].grad.data();
        for (int64_t u = 0; u < outer; ++u) {
            for (int64_t v = 0; v < inner; ++v) {
                double gv = pg[u * inner + v];
                double* base = ga + u * extent * inner + v;
                if (kind == 2) {
                    base[(*argmax)[size_t(u * inner + v)] * inner] += gv;
                } else {
                    double gshare = kind == 1 ? gv / double(extent) : gv;
                    for (int64_t e = 0; e < extent; ++e) base[e * inner] += gshare;
                }
            }
        }
    });
}

Graph::Var Graph::sum(Var a, int axis, bool keepdims) { return reduce_op(a, axis, keepdims, 0); }
Graph::Var Graph::mean(Var a, int axis, bool keepdims) { return reduce_op(a, axis, keepdims, 1); }
Graph::Var Graph::max(Var a, int axis, bool keepdims) { return reduce_op(a, axis, keepdims, 2); }

Graph::Var Graph::sum_all(Var a) {
    const Tensor& ta = val(a);
    double acc = 0.0;
    const double* pa = ta.data();
    for (int64_t i = 0; i < ta.numel(); ++i) acc += pa[i];
    Tensor out = Tensor::from({}, {acc}, ta.dtype());
    return push(std::move(out), {a.id}, [](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ia = nd.inputs[0];
        if (!g.nodes_[size_t(ia)].requires_grad) return;
        g.ensure_grad(ia);
        double gv = nd.grad.data()[0];
        double* ga = g.nodes_[size_t(ia)].grad.data();
        int64_t n = g.nodes_[size_t(ia)].value.numel();
        for (int64_t i = 0; i < n; ++i) ga[i] += gv;
    });
}

Graph::Var Graph::reshape(Var a, Shape shape) {
    const Tensor& ta = val(a);
    check(shape_numel(shape) == ta.numel(), Errc::shape,
          "reshape: " + shape_str(ta.shape()) + " to " + shape_str(shape) +
              " changes element count");
    Tensor out;
    out.shape_ = std::move(shape);
    out.dtype_ = ta.dtype();
    out.data_ = ta.data_;  // values are immutable once recorded
    return push(std::move(out), {a.id}, [](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ia = nd.inputs[0];
        if (!g.nodes_[size_t(ia)].requires_grad) return;
        g.ensure_grad(ia);
        const double* pg = nd.grad.data();
        double* ga = g.nodes_[size_t(ia)].grad.data();
        for (int64_t i = 0; i < nd.value.numel(); ++i) ga[i] += pg[i];
    });
}

Graph::Var Graph::transpose_last2(Var a) {
    const Tensor& ta = val(a);
    check(ta.rank() >= 2, Errc::shape, "transpose needs rank >= 2, got " + shape_str(ta.shape()));
    Shape out_shape = ta.shape();
    int r = ta.rank();
    std::swap(out_shape[size_t(r - 2)], out_shape[size_t(r - 1)]);
    int64_t m = ta.shape()[size_t(r - 2)], n = ta.shape()[size_t(r - 1)];
    int64_t batches = ta.numel() / (m * n);
    Tensor out(out_shape, ta.dtype());
    const double* pa = ta.data();
    double* po = out.data();
    for (int64_t b = 0; b < batches; ++b) {
        const double* src = pa + b * m * n;
        double* dst = po + b * m * n;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    return push(std::move(out), {a.id}, [m, n, batches](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ia = nd.inputs[0];
        if (!g.nodes_[size_t(ia)].requires_grad) return;
        g.ensure_grad(ia);
        const double* pg = nd.grad.data();
        double* ga = g.nodes_[size_t(ia)].grad.data();
        for (int64_t b = 0; b < batches; ++b) {
            const double* src = pg + b * m * n;  // grad in [n,m] layout
            double* dst = ga + b * m * n;
            for (int64_t j = 0; j < n; ++j)
                for (int64_t i = 0; i < m; ++i) dst[i * n + j] += src[j * m + i];
        }
    });
}

Graph::Var Graph::concat_last(const std::vector<Var>& parts) {
    check(!parts.empty(), Errc::invalid_arg, "concat of zero tensors");
    const Tensor& t0 = val(parts[0]);
    int r = t0.rank();
    check(r >= 1, Errc::shape, "concat needs rank >= 1");
    Shape out_shape = t0.shape();
    int64_t last = 0;
    Dtype dt = t0.dtype();
    std::vector<int64_t> widths;
    for (Var p : parts) {
        const Tensor& tp = val(p);
        check(tp.rank() == r, Errc::shape, "concat: rank mismatch");
        for (int i = 0; i < r - 1; ++i)
            check(tp.shape()[size_t(i)] == t0.shape()[size_t(i)], Errc::shape,
                  "concat: shape mismatch " + shape_str(tp.shape()) + " vs " +
                      shape_str(t0.shape()));
        widths.push_back(tp.shape()[size_t(r - 1)]);
        last += widths.back();
        dt = promote(dt, tp.dtype());
    }
    out_shape[size_t(r - 1)] = last;
    int64_t rows = shape_numel(out_shape) / last;
    Tensor out(out_shape, dt);
    double* po = out.data();
    std::vector<int> input_ids;
    int64_t off = 0;
    for (size_t p = 0; p < parts.size(); ++p) {
        const Tensor& tp = val(parts[p]);
        const double* src = tp.data();
        int64_t w = widths[p];
        for (int64_t row = 0; row < rows; ++row)
            std::memcpy(po + row * last + off, src + row * w, size_t(w) * sizeof(double));
        off += w;
        input_ids.push_back(parts[p].id);
    }
    return push(std::move(out), input_ids, [widths, rows, last](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        const double* pg = nd.grad.data();
        int64_t off = 0;
        for (size_t p = 0; p < nd.inputs.size(); ++p) {
            int ia = nd.inputs[p];
            int64_t w = widths[p];
            if (g.nodes_[size_t(ia)].requires_grad) {
                g.ensure_grad(ia);
                double* ga = g.nodes_[size_t(ia)].grad.data();
                for (int64_t row = 0; row < rows; ++row)
                    for (int64_t j = 0; j < w; ++j) ga[row * w + j] += pg[row * last + off + j];
            }
            off += w;
        }
    });
}

Graph::Var Graph::matmul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    int ra = ta.rank(), rb = tb.rank();
    check((ra == 2 || ra == 3) && (rb == 2 || rb == 3), Errc::shape,
          "matmul: unsupported ranks " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
    check(!(ra == 2 && rb == 3), Errc::shape,
          "matmul: cannot broadcast lhs " + shape_str(ta.shape()) + " over batched rhs " +
              shape_str(tb.shape()));
    int64_t batches = ra == 3 ? ta.shape()[0] : 1;
    int64_t m = ta.shape()[size_t(ra - 2)], k = ta.shape()[size_t(ra - 1)];
    int64_t kb = tb.shape()[size_t(rb - 2)], n = tb.shape()[size_t(rb - 1)];
    check(k == kb, Errc::shape,
          "matmul: inner extents differ, " + shape_str(ta.shape()) + " x " +
              shape_str(tb.shape()));
    if (rb == 3)
        check(tb.shape()[0] == batches, Errc::shape,
              "matmul: batch extents differ, " + shape_str(ta.shape()) + " x " +
                  shape_str(tb.shape()));

    Shape out_shape = ra == 3 ? Shape{batches, m, n} : Shape{m, n};
    Tensor out(out_shape, promote(ta.dtype(), tb.dtype()));
    const double* pa = ta.data();
    const double* pb = tb.data();
    double* po = out.data();
    bool batched_b = rb == 3;
    if (batched_b) {
        for (int64_t bb = 0; bb < batches; ++bb)
            gemm_nn(pa + bb * m * k, pb + bb * k * n, po + bb * m * n, m, k, n);
    } else {
        // [B,m,k] x [k,n] is one flat [B*m,k] product in row-major layout
        gemm_nn(pa, pb, po, batches * m, k, n);
    }

    return push(std::move(out), {a.id, b.id},
                [batches, m, k, n, batched_b](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ia = nd.inputs[0], ib = nd.inputs[1];
        const double* pa = g.nodes_[size_t(ia)].value.data();
        const double* pb = g.nodes_[size_t(ib)].value.data();
        const double* pg = nd.grad.data();
        if (g.nodes_[size_t(ia)].requires_grad) {
            g.ensure_grad(ia);
            double* ga = g.nodes_[size_t(ia)].grad.data();
            if (batched_b) {
                for (int64_t bb = 0; bb < batches; ++bb)
                    gemm_nt(pg + bb * m * n, pb + bb * k * n, ga + bb * m * k, m, n, k);
            } else {
                gemm_nt(pg, pb, ga, batches * m, n, k);
            }
        }
        if (g.nodes_[size_t(ib)].requires_grad) {
            g.ensure_grad(ib);
            double* gb = g.nodes_[size_t(ib)].grad.data();
            if (batched_b) {
                for (int64_t bb = 0; bb < batches; ++bb)
                    gemm_tn(pa + bb * m * k, pg + bb * m * n, gb + bb * k * n, k, m, n);
            } else {
                gemm_tn(pa, pg, gb, k, batches * m, n);
            }
        }
    });
}

Graph::Var Graph::layer_norm(Var x, Var gain, Var bias, double eps) {
    const Tensor& tx = val(x);
    const Tensor& tg = val(gain);
    const Tensor& tb = val(bias);
    check(eps > 0.0, Errc::invalid_arg, "layer_norm: eps must be positive");
    check(tx.rank() >= 1, Errc::shape, "layer_norm: rank >= 1 required");
    int64_t d = tx.shape()[size_t(tx.rank() - 1)];
    check(tg.numel() == d && tb.numel() == d, Errc::shape,
          "layer_norm: gain/bias extent must match last axis " + std::to_string(d));
    int64_t rows = tx.numel() / d;

    Tensor out(tx.shape(), tx.dtype());
    auto mu = std::make_shared<std::vector<double>>(size_t(rows));
    auto istd = std::make_shared<std::vector<double>>(size_t(rows));
    const double* px = tx.data();
    const double* pgn = tg.data();
    const double* pbs = tb.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * d;
        double m = 0.0;
        for (int64_t j = 0; j < d; ++j) m += xr[j];
        m /= double(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double c = xr[j] - m;
            var += c * c;
        }
        var /= double(d);
        double is = 1.0 / std::sqrt(var + eps);
        (*mu)[size_t(r)] = m;
        (*istd)[size_t(r)] = is;
        double* orow = po + r * d;
        for (int64_t j = 0; j < d; ++j) orow[j] = (xr[j] - m) * is * pgn[j] + pbs[j];
    }

    return push(std::move(out), {x.id, gain.id, bias.id},
                [rows, d, mu, istd](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ix = nd.inputs[0], ig = nd.inputs[1], ib = nd.inputs[2];
        const double* px = g.nodes_[size_t(ix)].value.data();
        const double* pgn = g.nodes_[size_t(ig)].value.data();
        const double* pg = nd.grad.data();
        bool need_x = g.nodes_[size_t(ix)].requires_grad;
        bool need_g = g.nodes_[size_t(ig)].requires_grad;
        bool need_b = g.nodes_[size_t(ib)].requires_grad;
        if (need_x) g.ensure_grad(ix);
        if (need_g) g.ensure_grad(ig);
        if (need_b) g.ensure_grad(ib);
        double* gx = need_x ? g.nodes_[size_t(ix)].grad.data() : nullptr;
        double* gg = need_g ? g.nodes_[size_t(ig)].grad.data() : nullptr;
        double* gb = need_b ? g.nodes_[size_t(ib)].grad.data() : nullptr;
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = px + r * d;
            const double* gr = pg + r * d;
            double m = (*mu)[size_t(r)];
            double is = (*istd)[size_t(r)];
            if (need_g || need_b) {
                for (int64_t j = 0; j < d; ++j) {
                    if (need_g) gg[j] += gr[j] * (xr[j] - m) * is;
                    if (need_b) gb[j] += gr[j];
                }
            }
            if (need_x) {
                double sum_dxh = 0.0, sum_dxh_xc = 0.0, sum_xc = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    double dxh = gr[j] * pgn[j];
                    double xc = xr[j] - m;
                    sum_dxh += dxh;
                    sum_dxh_xc += dxh * xc;
                    sum_xc += xc;
                }
                double dvar = -0.5 * is * is * is * sum_dxh_xc;
                double dmu = -is * sum_dxh - 2.0 * dvar * sum_xc / double(d);
                double* gxr = gx + r * d;
                for (int64_t j = 0; j < d; ++j) {
                    double xc = xr[j] - m;
                    gxr[j] += gr[j] * pgn[j] * is + dvar * 2.0 * xc / double(d) + dmu / double(d);
                }
            }
        }
    });
}

Graph::Var Graph::softmax(Var x, Var mask) {
    const Tensor& tx = val(x);
    int64_t d = tx.shape()[size_t(tx.rank() - 1)];
    check(d > 0, Errc::shape, "softmax: empty last axis");
    int64_t rows = tx.numel() / d;

    // resolve mask offsets through broadcasting (mask entries: 1 = excluded)
    std::shared_ptr<std::vector<double>> mask_flags;
    if (mask.defined()) {
        const Tensor& tm = val(mask);
        Bcast plan = make_bcast(tx.shape(), tm.shape(), "softmax");
        check(plan.out == tx.shape(), Errc::shape,
              "softmax: mask " + shape_str(tm.shape()) + " does not broadcast onto " +
                  shape_str(tx.shape()));
        mask_flags = std::make_shared<std::vector<double>>(size_t(tx.numel()));
        const double* pm = tm.data();
        bcast_for_each(plan, [&](int64_t o, int64_t, int64_t ob) {
            (*mask_flags)[size_t(o)] = pm[ob];
        });
    }

    Tensor out(tx.shape(), tx.dtype());
    const double* px = tx.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * d;
        const double* mr = mask_flags ? mask_flags->data() + r * d : nullptr;
        double mx = -1e300;
        int64_t live = 0;
        for (int64_t j = 0; j < d; ++j) {
            if (mr && mr[j] != 0.0) continue;
            mx = std::max(mx, xr[j]);
            ++live;
        }
        check(live > 0, Errc::numeric, "softmax: row " + std::to_string(r) + " has every entry masked");
        double z = 0.0;
        double* orow = po + r * d;
        for (int64_t j = 0; j < d; ++j) {
            if (mr && mr[j] != 0.0) {
                orow[j] = 0.0;
            } else {
                orow[j] = std::exp(xr[j] - mx);
                z += orow[j];
            }
        }
        for (int64_t j = 0; j < d; ++j) orow[j] /= z;
    }

    // mask is data, not a differentiable input
    return push(std::move(out), {x.id}, [rows, d](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ix = nd.inputs[0];
        if (!g.nodes_[size_t(ix)].requires_grad) return;
        g.ensure_grad(ix);
        const double* py = nd.value.data();
        const double* pg = nd.grad.data();
        double* gx = g.nodes_[size_t(ix)].grad.data();
        for (int64_t r = 0; r < rows; ++r) {
            const double* yr = py + r * d;
            const double* gr = pg + r * d;
            double dot = 0.0;
            for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
            double* gxr = gx + r * d;
            for (int64_t j = 0; j < d; ++j) gxr[j] += yr[j] * (gr[j] - dot);
        }
    });
}

Graph::Var Graph::embed(Var table, const std::vector<int>& ids, int64_t batch, int64_t seq) {
    const Tensor& tt = val(table);
    check(tt.rank() == 2, Errc::shape, "embed: table must be [vocab,d]");
    check(int64_t(ids.size()) == batch * seq, Errc::shape, "embed: id count mismatch");
    int64_t vocab = tt.shape()[0], d = tt.shape()[1];
    for (int id : ids)
        check(id >= 0 && int64_t(id) < vocab, Errc::data,
              "embed: token id " + std::to_string(id) + " outside vocab " + std::to_string(vocab));
    Tensor out({batch, seq, d}, tt.dtype());
    const double* pt = tt.data();
    double* po = out.data();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    for (int64_t t = 0; t < batch * seq; ++t)
        std::memcpy(po + t * d, pt + int64_t(ids[size_t(t)]) * d, size_t(d) * sizeof(double));
    return push(std::move(out), {table.id}, [ids_copy, d](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int it = nd.inputs[0];
        if (!g.nodes_[size_t(it)].requires_grad) return;
        g.ensure_grad(it);
        const double* pg = nd.grad.data();
        double* gt = g.nodes_[size_t(it)].grad.data();
        for (size_t t = 0; t < ids_copy->size(); ++t) {
            double* row = gt + int64_t((*ids_copy)[t]) * d;
            const double* src = pg + int64_t(t) * d;
            for (int64_t j = 0; j < d; ++j) row[j] += src[j];
        }
    });
}

Graph::Var Graph::take_position(Var x, const std::vector<int64_t>& idx) {
    const Tensor& tx = val(x);
    check(tx.rank() == 3, Errc::shape, "take_position: input must be [B,s,d]");
    int64_t batch = tx.shape()[0], s = tx.shape()[1], d = tx.shape()[2];
    check(int64_t(idx.size()) == batch, Errc::shape, "take_position: one index per batch row");
    for (int64_t i : idx)
        check(i >= 0 && i < s, Errc::shape, "take_position: index out of range");
    Tensor out({batch, d}, tx.dtype());
    const double* px = tx.data();
    double* po = out.data();
    auto idx_copy = std::make_shared<std::vector<int64_t>>(idx);
    for (int64_t b = 0; b < batch; ++b)
        std::memcpy(po + b * d, px + (b * s + idx[size_t(b)]) * d, size_t(d) * sizeof(double));
    return push(std::move(out), {x.id}, [idx_copy, s, d](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ix = nd.inputs[0];
        if (!g.nodes_[size_t(ix)].requires_grad) return;
        g.ensure_grad(ix);
        const double* pg = nd.grad.data();
        double* gx = g.nodes_[size_t(ix)].grad.data();
        for (size_t b = 0; b < idx_copy->size(); ++b) {
            double* row = gx + (int64_t(b) * s + (*idx_copy)[b]) * d;
            const double* src = pg + int64_t(b) * d;
            for (int64_t j = 0; j < d; ++j) row[j] += src[j];
        }
    });
}

namespace {

void check_match_scores(const Tensor& c, int64_t s) {
    check(c.rank() == 2 || c.rank() == 3, Errc::shape,
          "geometric attention: scores must be [s,s] or [B,s,s], got " + shape_str(c.shape()));
    int r = c.rank();
    check(c.shape()[size_t(r - 2)] == s && c.shape()[size_t(r - 1)] == s, Errc::shape,
          "geometric attention: scores " + shape_str(c.shape()) + " do not match order size " +
              std::to_string(s));
    const double* pc = c.data();
    for (int64_t i = 0; i < c.numel(); ++i)
        check(pc[i] >= -1e-6 && pc[i] <= 1.0 + 1e-6, Errc::numeric,
              "geometric attention: score " + std::to_string(pc[i]) + " outside [0,1]");
}

}  // namespace

Graph::Var Graph::geometric_prefix_attention(Var c, const NeighborhoodOrder& order) {
    const Tensor& tc = val(c);
    int64_t s = order.size();
    check_match_scores(tc, s);
    int64_t batches = tc.numel() / (s * s);

    Tensor out(tc.shape(), tc.dtype());
    const double* pc = tc.data();
    double* po = out.data();
    for (int64_t b = 0; b < batches; ++b) {
        for (int64_t i = 0; i < s; ++i) {
            const double* crow = pc + (b * s + i) * s;
            double* arow = po + (b * s + i) * s;
            double logp = 0.0;
            for (int64_t j : order.at(i)) {
                double cv = crow[j];
                arow[j] = cv * std::exp(logp);
                logp += std::log1p(-std::min(std::max(cv, 0.0), kProdClamp));
            }
        }
    }

    auto ord = std::make_shared<NeighborhoodOrder>(order);
    return push(std::move(out), {c.id}, [ord, s, batches](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ic = nd.inputs[0];
        if (!g.nodes_[size_t(ic)].requires_grad) return;
        g.ensure_grad(ic);
        const double* pc = g.nodes_[size_t(ic)].value.data();
        const double* pg = nd.grad.data();
        double* gc = g.nodes_[size_t(ic)].grad.data();
        std::vector<double> prefix;
        for (int64_t b = 0; b < batches; ++b) {
            for (int64_t i = 0; i < s; ++i) {
                const auto& row_order = ord->at(i);
                int64_t m = int64_t(row_order.size());
                if (m == 0) continue;
                const double* crow = pc + (b * s + i) * s;
                const double* grow = pg + (b * s + i) * s;
                double* gcrow = gc + (b * s + i) * s;
                prefix.assign(size_t(m), 1.0);
                double logp = 0.0;
                for (int64_t q = 0; q < m; ++q) {
                    prefix[size_t(q)] = std::exp(logp);
                    logp += std::log1p(
                        -std::min(std::max(crow[row_order[size_t(q)]], 0.0), kProdClamp));
                }
                // suffix recurrence; D_q = sum_{r>q} gA_r C_r prod_{q<p<r}(1-C_p)
                double dsuffix = 0.0;
                for (int64_t q = m - 1; q >= 0; --q) {
                    int64_t j = row_order[size_t(q)];
                    double cv = crow[j];
                    bool clamped = cv > kProdClamp || cv < 0.0;
                    gcrow[j] += prefix[size_t(q)] * (grow[j] - (clamped ? 0.0 : dsuffix));
                    dsuffix = (1.0 - std::min(std::max(cv, 0.0), kProdClamp)) * dsuffix +
                              grow[j] * cv;
                }
            }
        }
    });
}

Graph::Var Graph::geometric_residual(Var c, const NeighborhoodOrder& order) {
    const Tensor& tc = val(c);
    int64_t s = order.size();
    check_match_scores(tc, s);
    int64_t batches = tc.numel() / (s * s);

    Shape out_shape = tc.shape();
    out_shape[size_t(tc.rank() - 1)] = 1;
    Tensor out(out_shape, tc.dtype());
    const double* pc = tc.data();
    double* po = out.data();
    for (int64_t b = 0; b < batches; ++b) {
        for (int64_t i = 0; i < s; ++i) {
            const double* crow = pc + (b * s + i) * s;
            double logp = 0.0;
            for (int64_t j : order.at(i))
                logp += std::log1p(-std::min(std::max(crow[j], 0.0), kProdClamp));
            po[b * s + i] = std::exp(logp);
        }
    }

    auto ord = std::make_shared<NeighborhoodOrder>(order);
    return push(std::move(out), {c.id}, [ord, s, batches](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ic = nd.inputs[0];
        if (!g.nodes_[size_t(ic)].requires_grad) return;
        g.ensure_grad(ic);
        const double* pc = g.nodes_[size_t(ic)].value.data();
        const double* pg = nd.grad.data();
        double* gc = g.nodes_[size_t(ic)].grad.data();
        std::vector<double> prefix;
        for (int64_t b = 0; b < batches; ++b) {
            for (int64_t i = 0; i < s; ++i) {
                const auto& row_order = ord->at(i);
                int64_t m = int64_t(row_order.size());
                if (m == 0) continue;
                const double* crow = pc + (b * s + i) * s;
                double* gcrow = gc + (b * s + i) * s;
                double gres = pg[b * s + i];
                prefix.assign(size_t(m), 1.0);
                double logp = 0.0;
                for (int64_t q = 0; q < m; ++q) {
                    prefix[size_t(q)] = std::exp(logp);
                    logp += std::log1p(
                        -std::min(std::max(crow[row_order[size_t(q)]], 0.0), kProdClamp));
                }
                double dsuffix = gres;
                for (int64_t q = m - 1; q >= 0; --q) {
                    int64_t j = row_order[size_t(q)];
                    double cv = crow[j];
                    bool clamped = cv > kProdClamp || cv < 0.0;
                    if (!clamped) gcrow[j] -= prefix[size_t(q)] * dsuffix;
                    dsuffix *= 1.0 - std::min(std::max(cv, 0.0), kProdClamp);
                }
            }
        }
    });
}

Graph::Var Graph::survivor_weights(Var e) {
    const Tensor& te = val(e);
    check(te.rank() >= 2 && te.shape()[size_t(te.rank() - 1)] == 1, Errc::shape,
          "survivor_weights: expected [..,s,1], got " + shape_str(te.shape()));
    int64_t s = te.shape()[size_t(te.rank() - 2)];
    int64_t batches = te.numel() / s;

    Tensor out(te.shape(), te.dtype());
    const double* pe = te.data();
    double* po = out.data();
    for (int64_t b = 0; b < batches; ++b) {
        const double* erow = pe + b * s;
        double* orow = po + b * s;
        double logp = 0.0;
        for (int64_t i = s - 1; i >= 0; --i) {
            orow[i] = erow[i] * std::exp(logp);
            logp += std::log1p(-std::min(std::max(erow[i], 0.0), kProdClamp));
        }
    }

    return push(std::move(out), {e.id}, [s, batches](Graph& g, int self) {
        Node& nd = g.nodes_[size_t(self)];
        int ie = nd.inputs[0];
        if (!g.nodes_[size_t(ie)].requires_grad) return;
        g.ensure_grad(ie);
        const double* pe = g.nodes_[size_t(ie)].value.data();
        const double* pg = nd.grad.data();
        double* ge = g.nodes_[size_t(ie)].grad.data();
        std::vector<double> suffix;
        suffix.resize(size_t(s));
        for (int64_t b = 0; b < batches; ++b) {
            const double* erow = pe + b * s;
            const double* grow = pg + b * s;
            double* gerow = ge + b * s;
            double logp = 0.0;
            for (int64_t i = s - 1; i >= 0; --i) {
                suffix[size_t(i)] = std::exp(logp);
                logp += std::log1p(-std::min(std::max(erow[i], 0.0), kProdClamp));
            }
            // forward recurrence; T_q = sum_{i<q} gW_i E_i prod_{i<k<q}(1-E_k)
            double tprefix = 0.0;
            for (int64_t q = 0; q < s; ++q) {
                double ev = erow[q];
                bool clamped = ev > kProdClamp || ev < 0.0;
                gerow[q] += suffix[size_t(q)] * (grow[q] - (clamped ? 0.0 : tprefix));
                tprefix = (1.0 - std::min(std::max(ev, 0.0), kProdClamp)) * tprefix +
                          grow[q] * ev;
            }
        }
    });
}

std::map<std::string, Tensor> Graph::backward(Var loss) {
    check(record_grad_, Errc::invalid_arg, "backward on a no-grad graph");
    const Node& ln = node(loss);
    check(ln.value.numel() == 1, Errc::invalid_arg,
          "backward: loss must be scalar, got " + shape_str(ln.value.shape()));
    for (Node& n : nodes_)
        if (n.grad.defined()) std::fill(n.grad.data(), n.grad.data() + n.grad.numel(), 0.0);
    ensure_grad(loss.id);
    nodes_[size_t(loss.id)].grad.data()[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[size_t(i)];
        if (!n.backprop || !n.grad.defined() || !n.requires_grad) continue;
        n.backprop(*this, i);
    }
    std::map<std::string, Tensor> grads;
    for (Node& n : nodes_) {
        if (n.param_name.empty()) continue;
        if (!n.grad.defined()) n.grad = Tensor::zeros(n.value.shape(), Dtype::f64);
        grads[n.param_name] = n.grad;
    }
    return grads;
}

double grad_check(const std::function<Graph::Var(Graph&, Graph::Var)>& f, const Tensor& x) {
    check(x.dtype() == Dtype::f64, Errc::invalid_arg, "grad_check runs at float64");
    Tensor analytic;
    {
        Graph g;
        Graph::Var vx = g.leaf(x.clone(), true);
        Graph::Var loss = f(g, vx);
        check(g.val(loss).numel() == 1, Errc::invalid_arg, "grad_check: f must return a scalar");
        g.backward(loss);
        analytic = g.grad(vx).clone();
    }
    const double h = 1e-6;
    double worst = 0.0;
    Tensor probe = x.clone();
    for (int64_t i = 0; i < x.numel(); ++i) {
        double orig = probe.data()[i];
        auto eval = [&](double v) {
            probe.data()[i] = v;
            Graph g;
            Graph::Var vx = g.leaf(probe.clone(), false);
            Graph::Var loss = f(g, vx);
            return g.val(loss).data()[0];
        };
        double xp = orig + h, xm = orig - h;
        double lp = eval(xp);
        double lm = eval(xm);
        probe.data()[i] = orig;
        double numeric = (lp - lm) / (xp - xm);  // actually-represented step
        double a = analytic.data()[i];
        double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
    return worst;
}

}  // namespace recseq
