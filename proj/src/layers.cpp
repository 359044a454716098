// SPDX-License-Identifier: Apache-2.0
#include "recseq/layers.hpp"

#include <cmath>

namespace recseq {

Tensor xavier_uniform(Rng& rng, int64_t fan_in, int64_t fan_out, Dtype dtype) {
    double limit = std::sqrt(6.0 / double(fan_in + fan_out));
    return uniform_init(rng, {fan_in, fan_out}, limit, dtype);
}

Tensor uniform_init(Rng& rng, Shape shape, double limit, Dtype dtype) {
    Tensor t(std::move(shape), Dtype::f64);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-limit, limit);
    return dtype == Dtype::f64 ? t : t.astype(dtype);
}

Ffn Ffn::init(Rng& rng, int64_t d_in, int64_t hidden, int64_t d_out, Dtype dtype) {
    Ffn f;
    f.w1 = xavier_uniform(rng, d_in, hidden, dtype);
    f.b1 = Tensor::zeros({hidden}, dtype);
    f.w2 = xavier_uniform(rng, hidden, d_out, dtype);
    f.b2 = Tensor::zeros({d_out}, dtype);
    return f;
}

void Ffn::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".w1", &w1);
    out.emplace_back(prefix + ".b1", &b1);
    out.emplace_back(prefix + ".w2", &w2);
    out.emplace_back(prefix + ".b2", &b2);
}

FfnVars bind_ffn(Graph& g, const Ffn& f, const std::string& prefix) {
    return {g.param(f.w1, prefix + ".w1"), g.param(f.b1, prefix + ".b1"),
            g.param(f.w2, prefix + ".w2"), g.param(f.b2, prefix + ".b2")};
}

Graph::Var apply_ffn(Graph& g, const FfnVars& f, Graph::Var x) {
    Graph::Var hidden = g.gelu(g.add(g.matmul(x, f.w1), f.b1));
    return g.add(g.matmul(hidden, f.w2), f.b2);
}

LayerNormParams LayerNormParams::init(int64_t d, Dtype dtype) {
    return {Tensor::full({d}, 1.0, dtype), Tensor::zeros({d}, dtype)};
}

void LayerNormParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".gain", &gain);
    out.emplace_back(prefix + ".bias", &bias);
}

LayerNormVars bind_ln(Graph& g, const LayerNormParams& p, const std::string& prefix) {
    return {g.param(p.gain, prefix + ".gain"), g.param(p.bias, prefix + ".bias")};
}

Graph::Var apply_ln(Graph& g, const LayerNormVars& ln, Graph::Var x, double eps) {
    return g.layer_norm(x, ln.gain, ln.bias, eps);
}

}  // namespace recseq
