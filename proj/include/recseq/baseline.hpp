// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "recseq/layers.hpp"
#include "recseq/recschema.hpp"

namespace recseq {

struct BaselineConfig {
    int64_t d = 64;
    int64_t n_heads = 2;
    int64_t ffn_hidden = 0;  // 0 -> 4*d
    int n_layers = 1;
    bool share_layers = false;

    int64_t head_dim() const { return d / n_heads; }
    int64_t ffn_width() const { return ffn_hidden > 0 ? ffn_hidden : 4 * d; }
    void validate() const;
};

// post-norm encoder block: masked softmax attention + FFN, residuals + LN
struct BaselineBlockParams {
    struct Head {
        Tensor wq, wk, wv;
    };
    std::vector<Head> heads;
    Tensor wo;
    LayerNormParams ln1, ln2;
    Ffn ffn;

    static BaselineBlockParams init(const BaselineConfig& cfg, Rng& rng, Dtype dtype);
    void collect(const std::string& prefix, ParamRefs& out);
};

struct BaselineParams {
    BaselineConfig cfg;
    std::vector<BaselineBlockParams> blocks;  // one entry when share_layers

    static BaselineParams init(const BaselineConfig& cfg, Rng& rng, Dtype dtype);
    void collect(const std::string& prefix, ParamRefs& out);
};

// the shared-layer recursion view over a single block
class BaselineModel : public RecModel {
public:
    BaselineModel(Graph& g, const BaselineBlockParams& params, const BaselineConfig& cfg,
                  const std::string& prefix);

    Graph::Var retrieve(Graph& g, const SeqState& state, StepTrace* trace) const override;
    SeqState compose(Graph& g, Graph::Var x, const SeqState& state,
                     StepTrace* trace) const override;

private:
    const BaselineConfig* cfg_;
    struct HeadVars {
        Graph::Var wq, wk, wv;
    };
    std::vector<HeadVars> heads_;
    Graph::Var wo_;
    LayerNormVars ln1_, ln2_;
    FfnVars ffn_;
};

// PE[pos,2i]=sin(pos/10000^{2i/d}), PE[pos,2i+1]=cos(...)
Tensor sinusoidal_positions(int64_t s, int64_t d, Dtype dtype);

// embed + positions, then n_layers blocks (the same block when shared);
// layer_override > 0 replaces the configured depth (shared mode only).
// trace, when given, receives one StepTrace per layer.
SeqState transformer_encode(Graph& g, const BaselineParams& params, Graph::Var embed_table,
                            const std::vector<int>& tokens, const std::vector<double>& pad_mask,
                            int64_t batch, int64_t s, int layer_override = 0,
                            const std::string& prefix = "baseline",
                            std::vector<StepTrace>* trace = nullptr);

}  // namespace recseq
