// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "recseq/tensor.hpp"

namespace recseq {

// Per-query preference order over context positions. order(i) lists the
// positions j != i from most to least preferred; the prefix of j induces the
// suppression set used by the geometric product.
struct NeighborhoodOrder {
    std::vector<std::vector<int64_t>> rows;

    int64_t size() const { return int64_t(rows.size()); }
    const std::vector<int64_t>& at(int64_t i) const { return rows[size_t(i)]; }
};

enum class OrderKind {
    ndr,          // all j != i by distance, right before left at equal distance
    crvnn_left,   // i-1, i-2, ..., 0
    crvnn_right,  // i+1, ..., s-1
};

NeighborhoodOrder build_order(OrderKind kind, int64_t s);

// The (H, E) pair threaded through recursion steps. e0 keeps the initial
// mask (pads stay 0 forever; readout policies need it).
struct SeqState {
    Graph::Var h;  // [B,s,d]
    Graph::Var e;  // [B,s,1]
    int step = 0;
    Tensor e0;

    int64_t batch(const Graph& g) const { return g.val(h).shape()[0]; }
    int64_t seq_len(const Graph& g) const { return g.val(h).shape()[1]; }
};

SeqState make_state(Graph& g, Graph::Var h, Graph::Var e);

enum class HaltKind { none, existential };

struct HaltPolicy {
    HaltKind kind = HaltKind::none;
    double tau = 0.5;

    static HaltPolicy none() { return {HaltKind::none, 0.5}; }
    static HaltPolicy existential(double tau);
};

enum class ReadoutPolicy { first, last_nonpad, last_existing_weighted };

struct RunConfig {
    int t_max = 1;
    HaltPolicy halt = HaltPolicy::none();
    bool trace = false;
    bool trace_attention = false;
};

struct StepTrace {
    int step = 0;
    Tensor e;                       // [B,s,1] after the step
    Tensor g;                       // per-position gate summary [B,s,1]
    Tensor l;                       // pull gate [B,s,1]; zeros when the model has none
    std::vector<Tensor> attention;  // per head [B,s,s], only when requested
};

// One recursion step is compose(retrieve(state), state).
class RecModel {
public:
    virtual ~RecModel() = default;
    virtual Graph::Var retrieve(Graph& g, const SeqState& state, StepTrace* trace) const = 0;
    virtual SeqState compose(Graph& g, Graph::Var x, const SeqState& state,
                             StepTrace* trace) const = 0;
};

struct AttnResult {
    Graph::Var a;         // [..,s,s]
    Graph::Var residual;  // [..,s,1]
};

// A_ij = C_ij * prod_{k before j in order(i)} (1 - C_ik), zero off-order;
// residual_i = prod over the whole row order of (1 - C_ik).
AttnResult geometric_prefix_attention(Graph& g, Graph::Var c, const NeighborhoodOrder& order);

struct RunResult {
    SeqState final_state;
    std::vector<StepTrace> trace;
    std::vector<int> halt_step;  // per batch row; -1 when the policy never fired
    int steps_run = 0;
};

RunResult run_recursion(Graph& g, const RecModel& model, SeqState init, const RunConfig& cfg);

// True when at most one position per row still has E >= tau. Pads stay below
// any tau in (0,1), so no explicit pad set is needed.
bool halt_check(const Tensor& e, const HaltPolicy& policy);
bool halt_check_row(const Tensor& e, int64_t row, const HaltPolicy& policy);

Graph::Var readout(Graph& g, const SeqState& state, ReadoutPolicy policy);

}  // namespace recseq
