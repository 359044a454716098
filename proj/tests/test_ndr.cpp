// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "recseq/harness.hpp"
#include "recseq/ndr.hpp"

using namespace recseq;

namespace {

NdrConfig small_cfg(int64_t d = 8, int64_t heads = 2) {
    NdrConfig cfg;
    cfg.d = d;
    cfg.n_heads = heads;
    cfg.ffn_hidden = 16;
    cfg.n_layers = 3;
    return cfg;
}

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape), Dtype::f64);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

void zero_params(NdrParams& p) {
    ParamRefs refs;
    p.collect("ndr", refs);
    for (auto& [name, t] : refs)
        std::fill(t->data(), t->data() + t->numel(), 0.0);
}

SeqState rand_state(Graph& g, Rng& rng, int64_t b, int64_t s, int64_t d,
                    const std::vector<double>& e_vals = {}) {
    Tensor h = random_tensor(rng, {b, s, d});
    Tensor e({b, s, 1}, Dtype::f64);
    for (int64_t i = 0; i < b * s; ++i)
        e.data()[i] = e_vals.empty() ? 1.0 : e_vals[size_t(i)];
    return make_state(g, g.constant(std::move(h)), g.constant(std::move(e)));
}

}  // namespace

TEST_CASE("match_scores with zero weights gives 0.5 * E_j") {
    Rng rng(3);
    NdrParams params = NdrParams::init(small_cfg(), rng, Dtype::f64);
    zero_params(params);
    Graph g;
    NdrModel model(g, params);
    std::vector<double> e_vals = {1.0, 1.0, 0.0};  // position 2 is padding
    SeqState st = rand_state(g, rng, 1, 3, 8, e_vals);
    Graph::Var c = model.match_scores(g, st.h, st.e, 0);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j)
            CHECK(g.val(c).at({0, i, j}) == doctest::Approx(0.5 * e_vals[size_t(j)]));
}

TEST_CASE("match_scores gradcheck through C") {
    Rng rng(5);
    NdrParams params = NdrParams::init(small_cfg(), rng, Dtype::f64);
    Tensor h0 = random_tensor(rng, {1, 3, 8});
    Tensor w = random_tensor(rng, {1, 3, 3});
    double err = grad_check(
        [&](Graph& g, Graph::Var v) {
            NdrModel model(g, params);
            Tensor e = Tensor::full({1, 3, 1}, 1.0);
            Graph::Var c = model.match_scores(g, v, g.constant(std::move(e)), 1);
            return g.sum_all(g.mul(c, g.constant(w.clone())));
        },
        h0);
    CHECK(err < 1e-5);
}

TEST_CASE("retrieve with s=1 reduces to LN of H") {
    Rng rng(7);
    NdrParams params = NdrParams::init(small_cfg(), rng, Dtype::f64);
    Graph g;
    NdrModel model(g, params);
    SeqState st = rand_state(g, rng, 1, 1, 8);
    Graph::Var x = model.retrieve(g, st, nullptr);
    Graph::Var direct = g.layer_norm(st.h, g.constant(params.ln1.gain.clone()),
                                     g.constant(params.ln1.bias.clone()), 1e-5);
    for (int64_t j = 0; j < 8; ++j)
        CHECK(g.val(x).at({0, 0, j}) == doctest::Approx(g.val(direct).at({0, 0, j})));
}

TEST_CASE("attended values follow the geometric weights") {
    // C row from the kernel example: order(1)=[2,0], C_12=0.8, C_10=0.5
    Graph g;
    Tensor c = Tensor::zeros({1, 3, 3});
    c.data()[1 * 3 + 0] = 0.5;
    c.data()[1 * 3 + 2] = 0.8;
    Rng rng(11);
    Tensor values = random_tensor(rng, {1, 3, 4});
    auto a = g.geometric_prefix_attention(g.constant(c), build_order(OrderKind::ndr, 3));
    auto z = g.matmul(a, g.constant(values.clone()));
    for (int64_t j = 0; j < 4; ++j) {
        double expected = 0.8 * values.at({0, 2, j}) + 0.5 * 0.2 * values.at({0, 0, j});
        CHECK(g.val(z).at({0, 1, j}) == doctest::Approx(expected).epsilon(1e-9));
    }
}

TEST_CASE("per-head attention rows telescope to one") {
    Rng rng(13);
    NdrParams params = NdrParams::init(small_cfg(), rng, Dtype::f64);
    Graph g;
    NdrModel model(g, params);
    SeqState st = rand_state(g, rng, 2, 5, 8);
    for (int head = 0; head < 2; ++head) {
        Graph::Var c = model.match_scores(g, st.h, st.e, head);
        auto order = build_order(OrderKind::ndr, 5);
        Graph::Var a = g.geometric_prefix_attention(c, order);
        Graph::Var r = g.geometric_residual(c, order);
        for (int64_t b = 0; b < 2; ++b)
            for (int64_t i = 0; i < 5; ++i) {
                double total = g.val(r).at({b, i, 0});
                for (int64_t j = 0; j < 5; ++j) total += g.val(a).at({b, i, j});
                CHECK(std::fabs(total - 1.0) < 1e-6);
            }
    }
}

TEST_CASE("pad invariance of the full retrieve") {
    Rng rng(17);
    NdrParams params = NdrParams::init(small_cfg(), rng, Dtype::f64);
    Tensor h = random_tensor(rng, {1, 3, 8});
    Tensor h_padded = Tensor::zeros({1, 5, 8});
    for (int64_t i = 0; i < 3 * 8; ++i) h_padded.data()[i] = h.data()[i];
    for (int64_t i = 3 * 8; i < 5 * 8; ++i) h_padded.data()[i] = rng.uniform(-1, 1);

    Graph g1;
    NdrModel m1(g1, params);
    SeqState st1 = make_state(g1, g1.constant(h.clone()),
                              g1.constant(Tensor::from({1, 3, 1}, {1, 1, 1})));
    Graph::Var x1 = m1.retrieve(g1, st1, nullptr);

    Graph g2;
    NdrModel m2(g2, params);
    SeqState st2 = make_state(g2, g2.constant(h_padded),
                              g2.constant(Tensor::from({1, 5, 1}, {1, 1, 1, 0, 0})));
    Graph::Var x2 = m2.retrieve(g2, st2, nullptr);

    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 8; ++j)
            CHECK(std::fabs(g1.val(x1).at({0, i, j}) - g2.val(x2).at({0, i, j})) < 1e-9);
}

TEST_CASE("compose: zero-init gate mixes half and half") {
    Rng rng(19);
    NdrParams params = NdrParams::init(small_cfg(), rng, Dtype::f64);
    zero_params(params);
    for (int64_t i = 0; i < 8; ++i) params.ln2.gain.data()[i] = 1.0;  // keep LN2 meaningful
    Graph g;
    NdrModel model(g, params);
    SeqState st = rand_state(g, rng, 1, 3, 8);
    Graph::Var x = g.constant(random_tensor(rng, {1, 3, 8}));
    SeqState next = model.compose(g, x, st, nullptr);
    // gate = sigmoid(0) = 0.5; data branch = LN2(0) = 0
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 8; ++j)
            CHECK(g.val(next.h).at({0, i, j}) ==
                  doctest::Approx(0.5 * g.val(st.h).at({0, i, j})).epsilon(1e-9));
}

TEST_CASE("compose: closed-gate limit leaves H untouched") {
    Rng rng(23);
    NdrParams params = NdrParams::init(small_cfg(), rng, Dtype::f64);
    for (int64_t i = 0; i < params.gate.b2.numel(); ++i) params.gate.b2.data()[i] = -20.0;
    std::fill(params.gate.w1.data(), params.gate.w1.data() + params.gate.w1.numel(), 0.0);
    std::fill(params.gate.w2.data(), params.gate.w2.data() + params.gate.w2.numel(), 0.0);
    Graph g;
    NdrModel model(g, params);
    SeqState st = rand_state(g, rng, 1, 4, 8);
    Graph::Var x = model.retrieve(g, st, nullptr);
    SeqState next = model.compose(g, x, st, nullptr);
    double worst = 0.0;
    for (int64_t i = 0; i < 4 * 8; ++i)
        worst = std::max(worst,
                         std::fabs(g.val(next.h).data()[i] - g.val(st.h).data()[i]));
    CHECK(worst < 1e-6);
}

TEST_CASE("E is bit-identical through NDR steps") {
    Rng rng(29);
    NdrParams params = NdrParams::init(small_cfg(), rng, Dtype::f64);
    Graph g;
    NdrModel model(g, params);
    std::vector<double> e_vals = {1, 1, 1, 0.5, 0};
    SeqState st = rand_state(g, rng, 1, 5, 8, e_vals);
    RunConfig rc;
    rc.t_max = 4;
    auto result = run_recursion(g, model, st, rc);
    CHECK(result.steps_run == 4);  // no halt policy for NDR
    const Tensor& e0 = g.val(st.e);
    const Tensor& e1 = g.val(result.final_state.e);
    for (int64_t i = 0; i < e0.numel(); ++i) CHECK(e0.data()[i] == e1.data()[i]);
}

TEST_CASE("full NDR step gradcheck at s=4 d=8") {
    CHECK(model_step_gradcheck("ndr") < 1e-4);
}
