// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "recseq/layers.hpp"
#include "recseq/recschema.hpp"

namespace recseq {

enum class CellKind { grc, lstm };

CellKind cell_kind_from_name(const std::string& s);
const char* cell_kind_name(CellKind k);

struct CrvnnConfig {
    int64_t d = 64;
    int64_t df_hidden = 0;    // 0 -> d
    int64_t cell_hidden = 0;  // 0 -> 2*d
    CellKind cell = CellKind::grc;

    int64_t df_width() const { return df_hidden > 0 ? df_hidden : d; }
    int64_t cell_width() const { return cell_hidden > 0 ? cell_hidden : 2 * d; }
    void validate() const;
};

// Decision function over [left-retrieval ; self ; right-retrieval] plus a
// gated recursive cell. No positional encodings anywhere.
struct CrvnnParams {
    CrvnnConfig cfg;
    Ffn df;  // [3d -> df_hidden -> 1]
    // cell trunk [2d -> cell_hidden], then one d-wide head per gate/candidate
    Tensor cell_w1, cell_b1;
    std::vector<Tensor> cell_head_w;  // grc: gl,gr,gc,cand   lstm: in,fl,fr,out,cand
    std::vector<Tensor> cell_head_b;
    LayerNormParams cell_ln;  // grc only

    static CrvnnParams init(const CrvnnConfig& cfg, Rng& rng, Dtype dtype);
    void collect(const std::string& prefix, ParamRefs& out);
};

enum class Direction { left, right };

// A_ij = E_j * prod_{k between j and i on that side} (1 - E_k); the soft
// "first still-existing neighbor" distribution.
Graph::Var neighbor_attention(Graph& g, Graph::Var e, Direction dir);

class CrvnnModel : public RecModel {
public:
    CrvnnModel(Graph& g, const CrvnnParams& params, const std::string& prefix = "crvnn");

    // X = A H with left neighbor attention; X_0 = 0
    Graph::Var retrieve(Graph& g, const SeqState& state, StepTrace* trace) const override;

    // G_i = E_i * sigmoid(DF([X;H;R]))_i, forced to zero at pads and at the
    // last non-pad position (the rightmost survivor has no absorber).
    Graph::Var decision_gates(Graph& g, const SeqState& state, Graph::Var left_retrieval) const;
    Graph::Var decision_gates(Graph& g, const SeqState& state) const;

    Graph::Var cell(Graph& g, Graph::Var x, Graph::Var h) const;

    // L = A G; H' = L * Cell(X,H) + (1-L) * H; E' = E * (1-G)
    SeqState compose_with_gates(Graph& g, Graph::Var x, const SeqState& state, Graph::Var gates,
                                StepTrace* trace) const;
    SeqState compose(Graph& g, Graph::Var x, const SeqState& state,
                     StepTrace* trace) const override;

private:
    const CrvnnParams* p_;
    FfnVars df_;
    Graph::Var cell_w1_, cell_b1_;
    std::vector<Graph::Var> cell_head_w_, cell_head_b_;
    LayerNormVars cell_ln_;
};

}  // namespace recseq
