// SPDX-License-Identifier: Apache-2.0
#include "recseq/recschema.hpp"

#include <algorithm>
#include <cmath>

namespace recseq {

NeighborhoodOrder build_order(OrderKind kind, int64_t s) {
    check(s >= 1, Errc::invalid_arg, "build_order: s must be >= 1");
    NeighborhoodOrder order;
    order.rows.resize(size_t(s));
    for (int64_t i = 0; i < s; ++i) {
        auto& row = order.rows[size_t(i)];
        switch (kind) {
            case OrderKind::ndr:
                // ascending distance; the right position outranks the left one
                // at equal distance, which realizes the asymmetric </<= rule
                for (int64_t dist = 1; dist < s; ++dist) {
                    if (i + dist < s) row.push_back(i + dist);
                    if (i - dist >= 0) row.push_back(i - dist);
                }
                break;
            case OrderKind::crvnn_left:
                for (int64_t j = i - 1; j >= 0; --j) row.push_back(j);
                break;
            case OrderKind::crvnn_right:
                for (int64_t j = i + 1; j < s; ++j) row.push_back(j);
                break;
        }
    }
    return order;
}

SeqState make_state(Graph& g, Graph::Var h, Graph::Var e) {
    const Tensor& th = g.val(h);
    const Tensor& te = g.val(e);
    check(th.rank() == 3, Errc::shape, "SeqState: H must be [B,s,d], got " + shape_str(th.shape()));
    check(te.rank() == 3 && te.shape()[2] == 1 && te.shape()[0] == th.shape()[0] &&
              te.shape()[1] == th.shape()[1],
          Errc::shape, "SeqState: E must be [B,s,1] matching H, got " + shape_str(te.shape()));
    const double* pe = te.data();
    for (int64_t i = 0; i < te.numel(); ++i)
        check(pe[i] >= -1e-9 && pe[i] <= 1.0 + 1e-9, Errc::numeric,
              "SeqState: E entry " + std::to_string(pe[i]) + " outside [0,1]");
    SeqState st;
    st.h = h;
    st.e = e;
    st.step = 0;
    st.e0 = te.clone();
    return st;
}

HaltPolicy HaltPolicy::existential(double tau) {
    check(tau > 0.0 && tau < 1.0, Errc::invalid_arg, "halt policy: tau must lie in (0,1)");
    return {HaltKind::existential, tau};
}

AttnResult geometric_prefix_attention(Graph& g, Graph::Var c, const NeighborhoodOrder& order) {
    return {g.geometric_prefix_attention(c, order), g.geometric_residual(c, order)};
}

bool halt_check_row(const Tensor& e, int64_t row, const HaltPolicy& policy) {
    check(policy.kind == HaltKind::existential, Errc::invalid_arg,
          "halt_check requires an existential policy");
    int64_t s = e.shape()[size_t(e.rank() - 2)];
    const double* pe = e.data() + row * s;
    int64_t alive = 0;
    for (int64_t i = 0; i < s; ++i)
        if (pe[i] >= policy.tau) ++alive;
    return alive <= 1;
}

bool halt_check(const Tensor& e, const HaltPolicy& policy) {
    int64_t s = e.shape()[size_t(e.rank() - 2)];
    int64_t rows = e.numel() / s;
    for (int64_t r = 0; r < rows; ++r)
        if (!halt_check_row(e, r, policy)) return false;
    return true;
}

RunResult run_recursion(Graph& g, const RecModel& model, SeqState init, const RunConfig& cfg) {
    check(cfg.t_max >= 1, Errc::invalid_arg,
          "run_recursion: T_max must be >= 1, got " + std::to_string(cfg.t_max));
    int64_t batch = init.batch(g);

    RunResult result;
    result.halt_step.assign(size_t(batch), -1);
    SeqState state = init;

    for (int t = 1; t <= cfg.t_max; ++t) {
        StepTrace trace;
        StepTrace* tp = cfg.trace ? &trace : nullptr;
        if (tp) tp->step = t;

        Graph::Var x = model.retrieve(g, state, cfg.trace_attention ? tp : nullptr);
        state = model.compose(g, x, state, tp);
        state.step = t;

        const Tensor& th = g.val(state.h);
        const Tensor& te = g.val(state.e);
        check(th.all_finite() && te.all_finite(), Errc::numeric,
              "run_recursion: non-finite state at step " + std::to_string(t));

        if (tp) {
            tp->e = te.clone();
            result.trace.push_back(std::move(trace));
        }
        result.steps_run = t;

        bool done = false;
        if (cfg.halt.kind == HaltKind::existential) {
            bool all_halted = true;
            for (int64_t b = 0; b < batch; ++b) {
                if (result.halt_step[size_t(b)] >= 0) continue;
                if (halt_check_row(te, b, cfg.halt))
                    result.halt_step[size_t(b)] = t;
                else
                    all_halted = false;
            }
            done = all_halted;
        }
        if (!g.recording()) g.compact({state.h, state.e});
        if (done) break;
    }

    result.final_state = state;
    return result;
}

Graph::Var readout(Graph& g, const SeqState& state, ReadoutPolicy policy) {
    const Tensor& th = g.val(state.h);
    int64_t batch = th.shape()[0], s = th.shape()[1];
    switch (policy) {
        case ReadoutPolicy::first:
            return g.take_position(state.h, std::vector<int64_t>(size_t(batch), 0));
        case ReadoutPolicy::last_nonpad: {
            check(state.e0.defined(), Errc::invalid_arg, "readout: state lacks the initial mask");
            std::vector<int64_t> idx(size_t(batch), 0);
            for (int64_t b = 0; b < batch; ++b) {
                int64_t last = 0;
                for (int64_t i = 0; i < s; ++i)
                    if (state.e0.data()[b * s + i] >= 0.5) last = i;
                idx[size_t(b)] = last;
            }
            return g.take_position(state.h, idx);
        }
        case ReadoutPolicy::last_existing_weighted: {
            Graph::Var w = g.survivor_weights(state.e);       // [B,s,1]
            Graph::Var weighted = g.mul(w, state.h);          // broadcast over d
            return g.sum(weighted, 1, false);                 // [B,d]
        }
    }
    fail(Errc::internal, "readout: unknown policy");
}

}  // namespace recseq
