// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "recseq/common.hpp"

namespace recseq {

enum class Dtype { f32, f64 };

const char* dtype_name(Dtype d);
Dtype dtype_from_name(const std::string& s);

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

// Dense row-major tensor. Values are held as doubles regardless of dtype;
// f32 tensors keep every value rounded to the nearest float so results and
// checkpoints match single-precision storage bit for bit.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, Dtype dtype = Dtype::f64);

    static Tensor zeros(Shape shape, Dtype dtype = Dtype::f64);
    static Tensor full(Shape shape, double value, Dtype dtype = Dtype::f64);
    static Tensor from(Shape shape, std::vector<double> values, Dtype dtype = Dtype::f64);
    static Tensor scalar(double value, Dtype dtype = Dtype::f64);

    const Shape& shape() const { return shape_; }
    int64_t dim(int axis) const;
    int rank() const { return int(shape_.size()); }
    Dtype dtype() const { return dtype_; }
    int64_t numel() const { return data_ ? int64_t(data_->size()) : 0; }
    bool defined() const { return data_ != nullptr; }

    const double* data() const { return data_->data(); }
    double* data() { return data_->data(); }
    double at(std::initializer_list<int64_t> idx) const;

    // rounds every value to float when dtype is f32
    void quantize_to_dtype();

    bool all_finite() const;
    Tensor clone() const;
    Tensor astype(Dtype d) const;

private:
    Shape shape_;
    Dtype dtype_ = Dtype::f64;
    std::shared_ptr<std::vector<double>> data_;

    friend class Graph;
};

// raw kernels (accumulating: out += ...)
void gemm_nn(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n);
void gemm_nt(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n);
void gemm_tn(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n);

struct NeighborhoodOrder;  // recschema.hpp

// Reverse-mode tape. Operations evaluate eagerly and append a node whose
// backward closure accumulates into the gradients of its inputs. Tape order
// is a topological order by construction, so backward() is a single reverse
// sweep with a fixed, deterministic accumulation order.
class Graph {
public:
    struct Var {
        int id = -1;
        bool defined() const { return id >= 0; }
    };

    // record_grad=false keeps only forward values; backward is unavailable
    // but compact() can release intermediate storage mid-run.
    explicit Graph(bool record_grad = true) : record_grad_(record_grad) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return record_grad_; }

    // releases the values of non-leaf nodes other than `keep` (no-grad only)
    void compact(std::initializer_list<Var> keep);

    Var leaf(Tensor value, bool requires_grad = false);
    Var param(const Tensor& value, const std::string& name);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    const Tensor& val(Var v) const;
    const Tensor& grad(Var v) const;
    int size() const { return int(nodes_.size()); }

    // elementwise; binary ops broadcast along size-1 axes (right-aligned)
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var neg(Var a);
    Var sigmoid(Var a);
    Var tanh_(Var a);
    Var gelu(Var a);
    Var exp_(Var a);
    Var log1p_(Var a);
    Var add_scalar(Var a, double c);
    Var mul_scalar(Var a, double c);

    // reductions (single axis; keepdims keeps a size-1 extent)
    Var sum(Var a, int axis, bool keepdims = false);
    Var mean(Var a, int axis, bool keepdims = false);
    Var max(Var a, int axis, bool keepdims = false);
    Var sum_all(Var a);

    // shape ops
    Var reshape(Var a, Shape shape);
    Var transpose_last2(Var a);
    Var concat_last(const std::vector<Var>& parts);

    // matmul: [m,k]x[k,n], [B,m,k]x[k,n], [B,m,k]x[B,k,n]
    Var matmul(Var a, Var b);

    Var layer_norm(Var x, Var gain, Var bias, double eps);

    // softmax over the last axis; mask entries equal to 1 are excluded.
    // Rejects rows where every entry is masked.
    Var softmax(Var x, Var mask);
    Var softmax(Var x) { return softmax(x, Var{}); }

    // rows of `table` selected by token id; gradient scatter-adds
    Var embed(Var table, const std::vector<int>& ids, int64_t batch, int64_t seq);

    // x: [B,s,d], idx: one position per batch row -> [B,d]
    Var take_position(Var x, const std::vector<int64_t>& idx);

    // A_ij = C_ij * prod over positions preceding j in order(i) of (1 - C_ik);
    // zero where j is absent from order(i). Log-space prefix scan.
    Var geometric_prefix_attention(Var c, const NeighborhoodOrder& order);
    // residual_i = prod over all k in order(i) of (1 - C_ik), shape [..,s,1]
    Var geometric_residual(Var c, const NeighborhoodOrder& order);

    // w_i = E_i * prod_{k>i} (1 - E_k), suffix scan over positions, [B,s,1]
    Var survivor_weights(Var e);

    // seeds d(loss)/d(loss)=1 and sweeps the tape once; loss must be scalar.
    // Returns gradients for every named parameter leaf.
    std::map<std::string, Tensor> backward(Var loss);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<int> inputs;
        std::function<void(Graph&, int)> backprop;  // accumulate into inputs
        std::string param_name;
        bool requires_grad = false;
        bool is_leaf = false;
    };
    std::deque<Node> nodes_;  // stable references across push_back
    bool record_grad_ = true;

    Node& node(Var v);
    const Node& node(Var v) const;
    Var push(Tensor value, std::vector<int> inputs, std::function<void(Graph&, int)> backprop);
    void ensure_grad(int id);
    Var binary_op(Var a, Var b, const char* name, double (*fwd)(double, double),
                  void (*bwd)(double, double, double, double&, double&));
    Var unary_op(Var a, const char* name, double (*fwd)(double),
                 double (*dfdx)(double, double));
    Var reduce_op(Var a, int axis, bool keepdims, int kind);
};

// Central finite differences (h=1e-6) of a scalar-valued function against the
// tape gradient at x. Returns the max relative error with denominator
// max(|analytic|, |numeric|, 1e-8). Evaluations run at float64.
double grad_check(const std::function<Graph::Var(Graph&, Graph::Var)>& f, const Tensor& x);

}  // namespace recseq
