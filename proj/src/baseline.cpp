// SPDX-License-Identifier: Apache-2.0
#include "recseq/baseline.hpp"

#include <cmath>

namespace recseq {

void BaselineConfig::validate() const {
    check(d >= 1 && n_heads >= 1, Errc::config, "baseline: d and n_heads must be positive");
    check(d % n_heads == 0, Errc::config,
          "baseline: d=" + std::to_string(d) + " not divisible by n_heads=" +
              std::to_string(n_heads));
    check(n_layers >= 1, Errc::config, "baseline: n_layers must be >= 1");
}

BaselineBlockParams BaselineBlockParams::init(const BaselineConfig& cfg, Rng& rng, Dtype dtype) {
    BaselineBlockParams p;
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
    p.ffn = Ffn::init(rng, cfg.d, cfg.ffn_width(), cfg.d, dtype);
    return p;
}

void BaselineBlockParams::collect(const std::string& prefix, ParamRefs& out) {
    for (size_t h = 0; h < heads.size(); ++h) {
        std::string hp = prefix + ".h" + std::to_string(h);
        out.emplace_back(hp + ".wq", &heads[h].wq);
        out.emplace_back(hp + ".wk", &heads[h].wk);
        out.emplace_back(hp + ".wv", &heads[h].wv);
    }
    out.emplace_back(prefix + ".wo", &wo);
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
    ffn.collect(prefix + ".ffn", out);
}

BaselineParams BaselineParams::init(const BaselineConfig& cfg, Rng& rng, Dtype dtype) {
    cfg.validate();
    BaselineParams p;
    p.cfg = cfg;
    int blocks = cfg.share_layers ? 1 : cfg.n_layers;
    for (int i = 0; i < blocks; ++i) p.blocks.push_back(BaselineBlockParams::init(cfg, rng, dtype));
    return p;
}

void BaselineParams::collect(const std::string& prefix, ParamRefs& out) {
    for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i].collect(prefix + ".l" + std::to_string(i), out);
}

BaselineModel::BaselineModel(Graph& g, const BaselineBlockParams& params,
                             const BaselineConfig& cfg, const std::string& prefix)
    : cfg_(&cfg) {
    for (size_t h = 0; h < params.heads.size(); ++h) {
        std::string hp = prefix + ".h" + std::to_string(h);
        heads_.push_back({g.param(params.heads[h].wq, hp + ".wq"),
                          g.param(params.heads[h].wk, hp + ".wk"),
                          g.param(params.heads[h].wv, hp + ".wv")});
    }
    wo_ = g.param(params.wo, prefix + ".wo");
    ln1_ = bind_ln(g, params.ln1, prefix + ".ln1");
    ln2_ = bind_ln(g, params.ln2, prefix + ".ln2");
    ffn_ = bind_ffn(g, params.ffn, prefix + ".ffn");
}

Graph::Var BaselineModel::retrieve(Graph& g, const SeqState& state, StepTrace* trace) const {
    const Tensor& te = g.val(state.e);
    int64_t batch = te.shape()[0], s = te.shape()[1];
    // key mask: 1 = excluded = pad position
    Tensor key_mask = Tensor::zeros({batch, 1, s});
    bool any_key = false;
    for (int64_t b = 0; b < batch; ++b) {
        bool row_live = false;
        for (int64_t i = 0; i < s; ++i) {
            bool pad = te.data()[b * s + i] < 0.5;
            key_mask.data()[b * s + i] = pad ? 1.0 : 0.0;
            row_live = row_live || !pad;
        }
        any_key = b == 0 ? row_live : (any_key && row_live);
        check(row_live, Errc::data, "attention block: batch row " + std::to_string(b) +
                                        " is entirely padding");
    }
    Graph::Var mask = g.constant(std::move(key_mask));

    double scale = 1.0 / std::sqrt(double(cfg_->head_dim()));
    std::vector<Graph::Var> zs;
    for (const HeadVars& hv : heads_) {
        Graph::Var q = g.matmul(state.h, hv.wq);
        Graph::Var k = g.matmul(state.h, hv.wk);
        Graph::Var v = g.matmul(state.h, hv.wv);
        Graph::Var logits = g.mul_scalar(g.matmul(q, g.transpose_last2(k)), scale);
        Graph::Var attn = g.softmax(logits, mask);
        if (trace) trace->attention.push_back(g.val(attn).clone());
        zs.push_back(g.matmul(attn, v));
    }
    Graph::Var z = zs.size() == 1 ? zs[0] : g.concat_last(zs);
    Graph::Var y = g.matmul(z, wo_);
    return apply_ln(g, ln1_, g.add(y, state.h));
}

SeqState BaselineModel::compose(Graph& g, Graph::Var x, const SeqState& state,
                                StepTrace* trace) const {
    Graph::Var f = apply_ffn(g, ffn_, x);
    SeqState next = state;
    next.h = apply_ln(g, ln2_, g.add(f, x));
    next.e = state.e;
    if (trace) {
        trace->g = Tensor::zeros(g.val(state.e).shape());
        trace->l = Tensor::zeros(g.val(state.e).shape());
    }
    return next;
}

Tensor sinusoidal_positions(int64_t s, int64_t d, Dtype dtype) {
    Tensor pe({s, d}, Dtype::f64);
    for (int64_t pos = 0; pos < s; ++pos) {
        for (int64_t i = 0; i < d; i += 2) {
            double freq = std::pow(10000.0, -double(i) / double(d));
            pe.data()[pos * d + i] = std::sin(double(pos) * freq);
            if (i + 1 < d) pe.data()[pos * d + i + 1] = std::cos(double(pos) * freq);
        }
    }
    return dtype == Dtype::f64 ? pe : pe.astype(dtype);
}

SeqState transformer_encode(Graph& g, const BaselineParams& params, Graph::Var embed_table,
                            const std::vector<int>& tokens, const std::vector<double>& pad_mask,
                            int64_t batch, int64_t s, int layer_override,
                            const std::string& prefix, std::vector<StepTrace>* trace) {
    params.cfg.validate();
    check(s >= 1, Errc::data, "transformer_encode: empty sequence");
    check(int64_t(tokens.size()) == batch * s && int64_t(pad_mask.size()) == batch * s,
          Errc::shape, "transformer_encode: token/mask extents do not match batch layout");
    int n_layers = params.cfg.n_layers;
    if (layer_override > 0) {
        check(params.cfg.share_layers, Errc::unsupported,
              "layer override requires shared parameters; the unshared baseline is fixed-depth");
        n_layers = layer_override;
    }

    Graph::Var h = g.embed(embed_table, tokens, batch, s);
    int64_t d = g.val(embed_table).shape()[1];
    Tensor pos = sinusoidal_positions(s, d, g.val(h).dtype());
    h = g.add(h, g.reshape(g.constant(std::move(pos)), {1, s, d}));

    Tensor e0({batch, s, 1}, Dtype::f64);
    for (int64_t i = 0; i < batch * s; ++i) e0.data()[i] = pad_mask[size_t(i)];
    SeqState state = make_state(g, h, g.constant(std::move(e0)));

    // bind every block once; the shared mode reuses a single bound block
    std::vector<BaselineModel> models;
    for (size_t i = 0; i < params.blocks.size(); ++i)
        models.emplace_back(g, params.blocks[i], params.cfg,
                            prefix + ".l" + std::to_string(i));
    for (int layer = 0; layer < n_layers; ++layer) {
        const BaselineModel& model =
            params.cfg.share_layers ? models[0] : models[size_t(layer)];
        StepTrace step_trace;
        StepTrace* tp = trace ? &step_trace : nullptr;
        if (tp) tp->step = layer + 1;
        Graph::Var x = model.retrieve(g, state, tp);
        state = model.compose(g, x, state, tp);
        state.step = layer + 1;
        if (tp) {
            tp->e = g.val(state.e).clone();
            trace->push_back(std::move(step_trace));
        }
        if (!g.recording()) g.compact({state.h, state.e});
    }
    return state;
}

}  // namespace recseq
