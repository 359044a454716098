// SPDX-License-Identifier: Apache-2.0
#include "recseq/ndr.hpp"

#include <cmath>

namespace recseq {

void NdrConfig::validate() const {
    check(d >= 1 && n_heads >= 1, Errc::config, "ndr: d and n_heads must be positive");
    check(d % n_heads == 0, Errc::config,
          "ndr: d=" + std::to_string(d) + " not divisible by n_heads=" + std::to_string(n_heads));
    check(n_layers >= 1, Errc::config, "ndr: n_layers must be >= 1");
}

NdrParams NdrParams::init(const NdrConfig& cfg, Rng& rng, Dtype dtype) {
    cfg.validate();
    NdrParams p;
    p.cfg = cfg;
    int64_t dh = cfg.head_dim();
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
        Head head;
        head.wq = xavier_uniform(rng, cfg.d, dh, dtype);
        head.wk = xavier_uniform(rng, cfg.d, dh, dtype);
        head.wv = xavier_uniform(rng, cfg.d, dh, dtype);
        p.heads.push_back(std::move(head));
    }
    p.wo = xavier_uniform(rng, cfg.n_heads * dh, cfg.d, dtype);
    p.ln1 = LayerNormParams::init(cfg.d, dtype);
    p.ln2 = LayerNormParams::init(cfg.d, dtype);
    p.gate = Ffn::init(rng, cfg.d, cfg.ffn_width(), cfg.d, dtype);
    for (int64_t i = 0; i < p.gate.b2.numel(); ++i) p.gate.b2.data()[i] = -1.0;
    p.gate.b2.quantize_to_dtype();
    p.data = Ffn::init(rng, cfg.d, cfg.ffn_width(), cfg.d, dtype);
    return p;
}

void NdrParams::collect(const std::string& prefix, ParamRefs& out) {
    for (size_t h = 0; h < heads.size(); ++h) {
        std::string hp = prefix + ".h" + std::to_string(h);
        out.emplace_back(hp + ".wq", &heads[h].wq);
        out.emplace_back(hp + ".wk", &heads[h].wk);
        out.emplace_back(hp + ".wv", &heads[h].wv);
    }
    out.emplace_back(prefix + ".wo", &wo);
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
    gate.collect(prefix + ".gate", out);
    data.collect(prefix + ".data", out);
}

NdrModel::NdrModel(Graph& g, const NdrParams& params, const std::string& prefix) : p_(&params) {
    p_->cfg.validate();
    for (size_t h = 0; h < params.heads.size(); ++h) {
        std::string hp = prefix + ".h" + std::to_string(h);
        heads_.push_back({g.param(params.heads[h].wq, hp + ".wq"),
                          g.param(params.heads[h].wk, hp + ".wk"),
                          g.param(params.heads[h].wv, hp + ".wv")});
    }
    wo_ = g.param(params.wo, prefix + ".wo");
    ln1_ = bind_ln(g, params.ln1, prefix + ".ln1");
    ln2_ = bind_ln(g, params.ln2, prefix + ".ln2");
    gate_ = bind_ffn(g, params.gate, prefix + ".gate");
    data_ = bind_ffn(g, params.data, prefix + ".data");
}

Graph::Var NdrModel::match_scores(Graph& g, Graph::Var h, Graph::Var e, int head) const {
    const HeadVars& hv = heads_[size_t(head)];
    Graph::Var q = g.matmul(h, hv.wq);
    Graph::Var k = g.matmul(h, hv.wk);
    double scale = 1.0 / std::sqrt(double(p_->cfg.head_dim()));
    Graph::Var logits = g.mul_scalar(g.matmul(q, g.transpose_last2(k)), scale);
    const Tensor& te = g.val(e);
    int64_t batch = te.shape()[0], s = te.shape()[1];
    Graph::Var e_keys = g.reshape(e, {batch, 1, s});  // mask multiplies the key axis
    return g.mul(g.sigmoid(logits), e_keys);
}

Graph::Var NdrModel::retrieve(Graph& g, const SeqState& state, StepTrace* trace) const {
    int64_t s = state.seq_len(g);
    NeighborhoodOrder order = build_order(OrderKind::ndr, s);
    std::vector<Graph::Var> zs;
    for (int head = 0; head < int(heads_.size()); ++head) {
        Graph::Var c = match_scores(g, state.h, state.e, head);
        Graph::Var a = g.geometric_prefix_attention(c, order);
        if (trace) trace->attention.push_back(g.val(a).clone());
        Graph::Var v = g.matmul(state.h, heads_[size_t(head)].wv);
        zs.push_back(g.matmul(a, v));
    }
    Graph::Var z = zs.size() == 1 ? zs[0] : g.concat_last(zs);
    Graph::Var y = g.matmul(z, wo_);
    return apply_ln(g, ln1_, g.add(y, state.h));
}

SeqState NdrModel::compose(Graph& g, Graph::Var x, const SeqState& state,
                           StepTrace* trace) const {
    Graph::Var gates = g.sigmoid(apply_ffn(g, gate_, x));
    Graph::Var candidate = apply_ln(g, ln2_, apply_ffn(g, data_, x));
    Graph::Var h_next =
        g.add(g.mul(gates, candidate), g.mul(one_minus(g, gates), state.h));

    SeqState next = state;
    next.h = h_next;
    next.e = state.e;  // same var: E is untouched by an NDR step
    if (trace) {
        trace->g = g.val(g.mean(gates, 2, true)).clone();
        trace->l = Tensor::zeros(g.val(state.e).shape());
    }
    return next;
}

}  // namespace recseq
