// SPDX-License-Identifier: Apache-2.0
#include "recseq/crvnn.hpp"

namespace recseq {

CellKind cell_kind_from_name(const std::string& s) {
    if (s == "grc") return CellKind::grc;
    if (s == "lstm") return CellKind::lstm;
    fail(Errc::config, "unknown cell kind '" + s + "' (expected grc or lstm)");
}

const char* cell_kind_name(CellKind k) { return k == CellKind::grc ? "grc" : "lstm"; }

void CrvnnConfig::validate() const {
    check(d >= 1, Errc::config, "crvnn: d must be positive");
}

namespace {

const char* kGrcHeads[] = {"gl", "gr", "gc", "cand"};
const char* kLstmHeads[] = {"in", "fl", "fr", "out", "cand"};

size_t head_count(CellKind k) { return k == CellKind::grc ? 4 : 5; }

const char* head_name(CellKind k, size_t i) {
    return k == CellKind::grc ? kGrcHeads[i] : kLstmHeads[i];
}

}  // namespace

CrvnnParams CrvnnParams::init(const CrvnnConfig& cfg, Rng& rng, Dtype dtype) {
    cfg.validate();
    CrvnnParams p;
    p.cfg = cfg;
    p.df = Ffn::init(rng, 3 * cfg.d, cfg.df_width(), 1, dtype);
    // composition starts rare so early rollouts keep most positions alive
    for (int64_t i = 0; i < p.df.b2.numel(); ++i) p.df.b2.data()[i] = -3.0;
    p.df.b2.quantize_to_dtype();
    p.cell_w1 = xavier_uniform(rng, 2 * cfg.d, cfg.cell_width(), dtype);
    p.cell_b1 = Tensor::zeros({cfg.cell_width()}, dtype);
    for (size_t i = 0; i < head_count(cfg.cell); ++i) {
        p.cell_head_w.push_back(xavier_uniform(rng, cfg.cell_width(), cfg.d, dtype));
        p.cell_head_b.push_back(Tensor::zeros({cfg.d}, dtype));
    }
    p.cell_ln = LayerNormParams::init(cfg.d, dtype);
    return p;
}

void CrvnnParams::collect(const std::string& prefix, ParamRefs& out) {
    df.collect(prefix + ".df", out);
    out.emplace_back(prefix + ".cell.w1", &cell_w1);
    out.emplace_back(prefix + ".cell.b1", &cell_b1);
    for (size_t i = 0; i < cell_head_w.size(); ++i) {
        std::string hp = prefix + ".cell." + head_name(cfg.cell, i);
        out.emplace_back(hp + ".w", &cell_head_w[i]);
        out.emplace_back(hp + ".b", &cell_head_b[i]);
    }
    if (cfg.cell == CellKind::grc) cell_ln.collect(prefix + ".cell.ln", out);
}

Graph::Var neighbor_attention(Graph& g, Graph::Var e, Direction dir) {
    const Tensor& te = g.val(e);
    check(te.rank() == 3 && te.shape()[2] == 1, Errc::shape,
          "neighbor_attention: E must be [B,s,1], got " + shape_str(te.shape()));
    int64_t batch = te.shape()[0], s = te.shape()[1];
    // C_ij = E_j, identical for every query row
    Graph::Var scores =
        g.add(g.reshape(e, {batch, 1, s}), g.constant(Tensor::zeros({batch, s, s}, te.dtype())));
    OrderKind kind = dir == Direction::left ? OrderKind::crvnn_left : OrderKind::crvnn_right;
    return g.geometric_prefix_attention(scores, build_order(kind, s));
}

CrvnnModel::CrvnnModel(Graph& g, const CrvnnParams& params, const std::string& prefix)
    : p_(&params) {
    p_->cfg.validate();
    df_ = bind_ffn(g, params.df, prefix + ".df");
    cell_w1_ = g.param(params.cell_w1, prefix + ".cell.w1");
    cell_b1_ = g.param(params.cell_b1, prefix + ".cell.b1");
    for (size_t i = 0; i < params.cell_head_w.size(); ++i) {
        std::string hp = prefix + ".cell." + head_name(params.cfg.cell, i);
        cell_head_w_.push_back(g.param(params.cell_head_w[i], hp + ".w"));
        cell_head_b_.push_back(g.param(params.cell_head_b[i], hp + ".b"));
    }
    if (params.cfg.cell == CellKind::grc) cell_ln_ = bind_ln(g, params.cell_ln, prefix + ".cell.ln");
}

Graph::Var CrvnnModel::retrieve(Graph& g, const SeqState& state, StepTrace* trace) const {
    Graph::Var a = neighbor_attention(g, state.e, Direction::left);
    if (trace) trace->attention.push_back(g.val(a).clone());
    return g.matmul(a, state.h);
}

Graph::Var CrvnnModel::decision_gates(Graph& g, const SeqState& state,
                                      Graph::Var left_retrieval) const {
    Graph::Var right = g.matmul(neighbor_attention(g, state.e, Direction::right), state.h);
    Graph::Var u = g.concat_last({left_retrieval, state.h, right});
    Graph::Var raw = g.sigmoid(apply_ffn(g, df_, u));  // [B,s,1]

    // deleted positions cannot act; the rightmost non-pad never fires
    const Tensor& te = g.val(state.e);
    int64_t batch = te.shape()[0], s = te.shape()[1];
    check(state.e0.defined(), Errc::invalid_arg, "decision_gates: state lacks the initial mask");
    Tensor mask = Tensor::zeros({batch, s, 1}, Dtype::f64);
    for (int64_t b = 0; b < batch; ++b) {
        int64_t last = -1;
        for (int64_t i = 0; i < s; ++i)
            if (state.e0.data()[b * s + i] >= 0.5) last = i;
        for (int64_t i = 0; i < s; ++i)
            mask.data()[b * s + i] = (state.e0.data()[b * s + i] >= 0.5 && i != last) ? 1.0 : 0.0;
    }
    return g.mul(g.mul(state.e, raw), g.constant(std::move(mask)));
}

Graph::Var CrvnnModel::decision_gates(Graph& g, const SeqState& state) const {
    return decision_gates(g, state, retrieve(g, state, nullptr));
}

Graph::Var CrvnnModel::cell(Graph& g, Graph::Var x, Graph::Var h) const {
    Graph::Var u = g.concat_last({x, h});
    Graph::Var hidden = g.gelu(g.add(g.matmul(u, cell_w1_), cell_b1_));
    auto head = [&](size_t i) {
        return g.add(g.matmul(hidden, cell_head_w_[i]), cell_head_b_[i]);
    };
    if (p_->cfg.cell == CellKind::grc) {
        Graph::Var mix = g.add(
            g.add(g.mul(g.sigmoid(head(0)), x), g.mul(g.sigmoid(head(1)), h)),
            g.mul(g.sigmoid(head(2)), g.tanh_(head(3))));
        return apply_ln(g, cell_ln_, mix);
    }
    Graph::Var c = g.add(
        g.add(g.mul(g.sigmoid(head(1)), x), g.mul(g.sigmoid(head(2)), h)),
        g.mul(g.sigmoid(head(0)), g.tanh_(head(4))));
    return g.mul(g.sigmoid(head(3)), g.tanh_(c));
}

SeqState CrvnnModel::compose_with_gates(Graph& g, Graph::Var x, const SeqState& state,
                                        Graph::Var gates, StepTrace* trace) const {
    Graph::Var a = neighbor_attention(g, state.e, Direction::left);
    Graph::Var pull = g.matmul(a, gates);  // L = A G, [B,s,1]
    Graph::Var merged = cell(g, x, state.h);
    Graph::Var h_next = g.add(g.mul(pull, merged), g.mul(one_minus(g, pull), state.h));
    Graph::Var e_next = g.mul(state.e, one_minus(g, gates));

    SeqState next = state;
    next.h = h_next;
    next.e = e_next;
    if (trace) {
        trace->g = g.val(gates).clone();
        trace->l = g.val(pull).clone();
    }
    return next;
}

SeqState CrvnnModel::compose(Graph& g, Graph::Var x, const SeqState& state,
                             StepTrace* trace) const {
    return compose_with_gates(g, x, state, decision_gates(g, state, x), trace);
}

}  // namespace recseq
