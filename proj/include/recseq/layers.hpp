// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "recseq/tensor.hpp"

namespace recseq {

using ParamRefs = std::vector<std::pair<std::string, Tensor*>>;

Tensor xavier_uniform(Rng& rng, int64_t fan_in, int64_t fan_out, Dtype dtype);
Tensor uniform_init(Rng& rng, Shape shape, double limit, Dtype dtype);

// two-layer position-wise feedforward with a GeLU hidden activation
struct Ffn {
    Tensor w1, b1, w2, b2;

    static Ffn init(Rng& rng, int64_t d_in, int64_t hidden, int64_t d_out, Dtype dtype);
    void collect(const std::string& prefix, ParamRefs& out);
};

struct FfnVars {
    Graph::Var w1, b1, w2, b2;
};

FfnVars bind_ffn(Graph& g, const Ffn& f, const std::string& prefix);
Graph::Var apply_ffn(Graph& g, const FfnVars& f, Graph::Var x);

struct LayerNormParams {
    Tensor gain, bias;

    static LayerNormParams init(int64_t d, Dtype dtype);
    void collect(const std::string& prefix, ParamRefs& out);
};

struct LayerNormVars {
    Graph::Var gain, bias;
};

LayerNormVars bind_ln(Graph& g, const LayerNormParams& p, const std::string& prefix);
Graph::Var apply_ln(Graph& g, const LayerNormVars& ln, Graph::Var x, double eps = 1e-5);

// 1 - x for gate complements
inline Graph::Var one_minus(Graph& g, Graph::Var x) { return g.add_scalar(g.neg(x), 1.0); }

}  // namespace recseq
