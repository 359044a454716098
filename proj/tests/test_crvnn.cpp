// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <deque>

#include "recseq/crvnn.hpp"
#include "recseq/harness.hpp"

using namespace recseq;

namespace {

CrvnnConfig small_cfg(int64_t d = 8) {
    CrvnnConfig cfg;
    cfg.d = d;
    cfg.df_hidden = 8;
    cfg.cell_hidden = 16;
    return cfg;
}

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape), Dtype::f64);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

SeqState state_with(Graph& g, Rng& rng, int64_t s, const std::vector<double>& e_vals,
                    int64_t d = 8) {
    Tensor h = random_tensor(rng, {1, s, d});
    Tensor e({1, s, 1}, Dtype::f64);
    for (int64_t i = 0; i < s; ++i) e.data()[i] = e_vals[size_t(i)];
    return make_state(g, g.constant(std::move(h)), g.constant(std::move(e)));
}

void zero_df(CrvnnParams& p) {
    for (Tensor* t : {&p.df.w1, &p.df.b1, &p.df.w2, &p.df.b2})
        std::fill(t->data(), t->data() + t->numel(), 0.0);
}

// scripted gates for driving the recursion with known binary decisions
struct ScriptedGates : RecModel {
    const CrvnnModel* inner;
    mutable std::deque<Tensor> schedule;

    Graph::Var retrieve(Graph& g, const SeqState& st, StepTrace* tr) const override {
        return inner->retrieve(g, st, tr);
    }
    SeqState compose(Graph& g, Graph::Var x, const SeqState& st, StepTrace* tr) const override {
        REQUIRE(!schedule.empty());
        Tensor gates = schedule.front().clone();
        schedule.pop_front();
        return inner->compose_with_gates(g, x, st, g.constant(std::move(gates)), tr);
    }
};

}  // namespace

TEST_CASE("neighbor attention examples") {
    Graph g;
    {
        auto a = neighbor_attention(g, g.constant(Tensor::from({1, 3, 1}, {1, 1, 1})),
                                    Direction::left);
        double expect[3][3] = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < 3; ++j)
                CHECK(g.val(a).at({0, i, j}) == doctest::Approx(expect[i][j]));
    }
    {
        auto a = neighbor_attention(g, g.constant(Tensor::from({1, 3, 1}, {1, 0.5, 1})),
                                    Direction::left);
        CHECK(g.val(a).at({0, 2, 0}) == doctest::Approx(0.5));
        CHECK(g.val(a).at({0, 2, 1}) == doctest::Approx(0.5));
        CHECK(g.val(a).at({0, 2, 2}) == 0.0);
    }
    {
        auto a = neighbor_attention(g, g.constant(Tensor::from({1, 3, 1}, {1, 0, 1})),
                                    Direction::left);
        CHECK(g.val(a).at({0, 2, 0}) == doctest::Approx(1.0));
        CHECK(g.val(a).at({0, 2, 1}) == 0.0);
    }
}

TEST_CASE("left retrieval picks the first existing neighbor") {
    Rng rng(3);
    CrvnnParams params = CrvnnParams::init(small_cfg(), rng, Dtype::f64);
    Graph g;
    CrvnnModel model(g, params);

    SeqState full = state_with(g, rng, 3, {1, 1, 1});
    Graph::Var x = model.retrieve(g, full, nullptr);
    for (int64_t j = 0; j < 8; ++j) {
        CHECK(g.val(x).at({0, 0, j}) == 0.0);
        CHECK(g.val(x).at({0, 1, j}) == doctest::Approx(g.val(full.h).at({0, 0, j})));
        CHECK(g.val(x).at({0, 2, j}) == doctest::Approx(g.val(full.h).at({0, 1, j})));
    }

    SeqState holed = state_with(g, rng, 3, {1, 0, 1});
    Graph::Var x2 = model.retrieve(g, holed, nullptr);
    for (int64_t j = 0; j < 8; ++j)
        CHECK(g.val(x2).at({0, 2, j}) == doctest::Approx(g.val(holed.h).at({0, 0, j})));

    SeqState soft = state_with(g, rng, 3, {1, 0.5, 1});
    Graph::Var x3 = model.retrieve(g, soft, nullptr);
    for (int64_t j = 0; j < 8; ++j) {
        double expected =
            0.5 * g.val(soft.h).at({0, 0, j}) + 0.5 * g.val(soft.h).at({0, 1, j});
        CHECK(g.val(x3).at({0, 2, j}) == doctest::Approx(expected));
    }
}

TEST_CASE("decision gates: zero DF gives 0.5 with the last position masked") {
    Rng rng(5);
    CrvnnParams params = CrvnnParams::init(small_cfg(), rng, Dtype::f64);
    zero_df(params);
    Graph g;
    CrvnnModel model(g, params);
    SeqState st = state_with(g, rng, 3, {1, 1, 1});
    Graph::Var gates = model.decision_gates(g, st);
    CHECK(g.val(gates).at({0, 0, 0}) == doctest::Approx(0.5));
    CHECK(g.val(gates).at({0, 1, 0}) == doctest::Approx(0.5));
    CHECK(g.val(gates).at({0, 2, 0}) == 0.0);
}

TEST_CASE("decision gates vanish on deleted and pad positions") {
    Rng rng(7);
    CrvnnParams params = CrvnnParams::init(small_cfg(), rng, Dtype::f64);
    Graph g;
    CrvnnModel model(g, params);
    SeqState st = state_with(g, rng, 4, {1, 0, 1, 0});  // position 3 is a pad at t=0
    Graph::Var gates = model.decision_gates(g, st);
    CHECK(g.val(gates).at({0, 1, 0}) == 0.0);
    CHECK(g.val(gates).at({0, 3, 0}) == 0.0);
}

TEST_CASE("decision gates stay within [0,1] on random states") {
    Rng rng(11);
    CrvnnParams params = CrvnnParams::init(small_cfg(), rng, Dtype::f64);
    for (int rep = 0; rep < 100; ++rep) {
        int64_t s = rng.uniform_int(2, 7);
        std::vector<double> e_vals;
        for (int64_t i = 0; i < s; ++i) e_vals.push_back(rng.uniform());
        Graph g;
        CrvnnModel model(g, params);
        SeqState st = state_with(g, rng, s, e_vals);
        Graph::Var gates = model.decision_gates(g, st);
        for (int64_t i = 0; i < s; ++i) {
            double v = g.val(gates).at({0, i, 0});
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("grc cell shape and zero-init closed form") {
    Rng rng(13);
    CrvnnConfig cfg = small_cfg(16);
    CrvnnParams params = CrvnnParams::init(cfg, rng, Dtype::f64);
    {
        Graph g;
        CrvnnModel model(g, params);
        Graph::Var x = g.constant(random_tensor(rng, {1, 5, 16}));
        Graph::Var h = g.constant(random_tensor(rng, {1, 5, 16}));
        Graph::Var out = model.cell(g, x, h);
        CHECK(g.val(out).shape() == Shape{1, 5, 16});
    }
    {
        CrvnnParams zeroed = CrvnnParams::init(cfg, rng, Dtype::f64);
        ParamRefs refs;
        zeroed.collect("crvnn", refs);
        for (auto& [name, t] : refs)
            if (name.find("cell.ln.gain") == std::string::npos)
                std::fill(t->data(), t->data() + t->numel(), 0.0);
        Graph g;
        CrvnnModel model(g, zeroed);
        Tensor xt = random_tensor(rng, {1, 4, 16});
        Tensor ht = random_tensor(rng, {1, 4, 16});
        Graph::Var out = model.cell(g, g.constant(xt.clone()), g.constant(ht.clone()));
        // all gates sigmoid(0)=0.5, candidate tanh(0)=0: LN(0.5(X+H))
        Graph::Var mixed = g.mul_scalar(g.add(g.constant(xt.clone()), g.constant(ht.clone())), 0.5);
        Graph::Var expect = g.layer_norm(mixed, g.constant(Tensor::full({16}, 1.0)),
                                         g.constant(Tensor::zeros({16})), 1e-5);
        for (int64_t i = 0; i < 4 * 16; ++i)
            CHECK(g.val(out).data()[i] == doctest::Approx(g.val(expect).data()[i]));
    }
}

TEST_CASE("cell gradcheck") {
    Rng rng(17);
    CrvnnParams params = CrvnnParams::init(small_cfg(), rng, Dtype::f64);
    Tensor h = random_tensor(rng, {1, 3, 8});
    Tensor w = random_tensor(rng, {1, 3, 8});
    double err = grad_check(
        [&](Graph& g, Graph::Var v) {
            CrvnnModel model(g, params);
            return g.sum_all(g.mul(model.cell(g, v, g.constant(h.clone())),
                                   g.constant(w.clone())));
        },
        random_tensor(rng, {1, 3, 8}));
    CHECK(err < 1e-5);
}

TEST_CASE("lstm-style cell is available behind the same interface") {
    Rng rng(19);
    CrvnnConfig cfg = small_cfg();
    cfg.cell = CellKind::lstm;
    CrvnnParams params = CrvnnParams::init(cfg, rng, Dtype::f64);
    Graph g;
    CrvnnModel model(g, params);
    Graph::Var out = model.cell(g, g.constant(random_tensor(rng, {1, 3, 8})),
                                g.constant(random_tensor(rng, {1, 3, 8})));
    CHECK(g.val(out).shape() == Shape{1, 3, 8});
    CHECK(g.val(out).all_finite());
}

TEST_CASE("compose: G=[0,1,0] merges position 1 into 2") {
    Rng rng(23);
    CrvnnParams params = CrvnnParams::init(small_cfg(), rng, Dtype::f64);
    Graph g;
    CrvnnModel model(g, params);
    SeqState st = state_with(g, rng, 3, {1, 1, 1});
    Graph::Var x = model.retrieve(g, st, nullptr);
    Graph::Var gates = g.constant(Tensor::from({1, 3, 1}, {0, 1, 0}));
    SeqState next = model.compose_with_gates(g, x, st, gates, nullptr);

    CHECK(g.val(next.e).at({0, 0, 0}) == 1.0);
    CHECK(g.val(next.e).at({0, 1, 0}) == 0.0);
    CHECK(g.val(next.e).at({0, 2, 0}) == 1.0);

    Graph::Var cell_out = model.cell(g, x, st.h);
    for (int64_t j = 0; j < 8; ++j) {
        CHECK(g.val(next.h).at({0, 0, j}) == g.val(st.h).at({0, 0, j}));
        CHECK(g.val(next.h).at({0, 1, j}) == g.val(st.h).at({0, 1, j}));
        // position 2 takes Cell(H_1, H_2): X_2 = H_1 under full existence
        CHECK(g.val(next.h).at({0, 2, j}) == doctest::Approx(g.val(cell_out).at({0, 2, j})));
    }

    // second step: G=[1,0,0] folds position 0 into the survivor at 2
    Graph::Var x2 = model.retrieve(g, next, nullptr);
    SeqState after = model.compose_with_gates(
        g, x2, next, g.constant(Tensor::from({1, 3, 1}, {1, 0, 0})), nullptr);
    CHECK(g.val(after.e).at({0, 0, 0}) == 0.0);
    CHECK(g.val(after.e).at({0, 1, 0}) == 0.0);
    CHECK(g.val(after.e).at({0, 2, 0}) == 1.0);
    Graph::Var cell2 = model.cell(g, x2, next.h);
    for (int64_t j = 0; j < 8; ++j)
        CHECK(g.val(after.h).at({0, 2, j}) == doctest::Approx(g.val(cell2).at({0, 2, j})));
    CHECK(halt_check(g.val(after.e), HaltPolicy::existential(0.5)));
}

TEST_CASE("compose: zero gates change nothing") {
    Rng rng(29);
    CrvnnParams params = CrvnnParams::init(small_cfg(), rng, Dtype::f64);
    Graph g;
    CrvnnModel model(g, params);
    SeqState st = state_with(g, rng, 4, {1, 0.7, 1, 0.3});
    Graph::Var x = model.retrieve(g, st, nullptr);
    SeqState next =
        model.compose_with_gates(g, x, st, g.constant(Tensor::zeros({1, 4, 1})), nullptr);
    for (int64_t i = 0; i < 4 * 8; ++i)
        CHECK(g.val(next.h).data()[i] == g.val(st.h).data()[i]);
    for (int64_t i = 0; i < 4; ++i)
        CHECK(g.val(next.e).data()[i] == g.val(st.e).data()[i]);
}

TEST_CASE("scripted full reduction halts after two steps") {
    Rng rng(31);
    CrvnnParams params = CrvnnParams::init(small_cfg(), rng, Dtype::f64);
    Graph g;
    CrvnnModel model(g, params);
    ScriptedGates scripted;
    scripted.inner = &model;
    scripted.schedule.push_back(Tensor::from({1, 3, 1}, {0, 1, 0}));
    scripted.schedule.push_back(Tensor::from({1, 3, 1}, {1, 0, 0}));
    scripted.schedule.push_back(Tensor::zeros({1, 3, 1}));

    SeqState st = state_with(g, rng, 3, {1, 1, 1});
    RunConfig rc;
    rc.t_max = 5;
    rc.halt = HaltPolicy::existential(0.5);
    auto result = run_recursion(g, scripted, st, rc);
    CHECK(result.steps_run == 2);
    CHECK(result.halt_step[0] == 2);
}

TEST_CASE("monotone deletion and pad persistence over rollouts") {
    Rng rng(37);
    CrvnnParams params = CrvnnParams::init(small_cfg(), rng, Dtype::f64);
    for (int rep = 0; rep < 20; ++rep) {
        int64_t s = rng.uniform_int(3, 8);
        std::vector<double> e_vals;
        int64_t n_pad = rng.uniform_int(0, 2);
        for (int64_t i = 0; i < s; ++i) e_vals.push_back(i >= s - n_pad ? 0.0 : 1.0);
        Graph g;
        CrvnnModel model(g, params);
        SeqState st = state_with(g, rng, s, e_vals);
        SeqState cur = st;
        Tensor prev_e = g.val(cur.e).clone();
        for (int t = 0; t < 10; ++t) {
            Graph::Var x = model.retrieve(g, cur, nullptr);
            cur = model.compose(g, x, cur, nullptr);
            const Tensor& e = g.val(cur.e);
            for (int64_t i = 0; i < s; ++i) {
                CHECK(e.data()[i] <= prev_e.data()[i] + 1e-9);
                if (e_vals[size_t(i)] == 0.0) CHECK(e.data()[i] == 0.0);
            }
            prev_e = e.clone();
        }
    }
}

TEST_CASE("left-attention row identity with residual") {
    Rng rng(41);
    for (int rep = 0; rep < 20; ++rep) {
        int64_t s = rng.uniform_int(2, 9);
        Tensor e({1, s, 1}, Dtype::f64);
        for (int64_t i = 0; i < s; ++i) e.data()[i] = rng.uniform();
        Graph g;
        Graph::Var ev = g.constant(e.clone());
        Graph::Var a = neighbor_attention(g, ev, Direction::left);
        for (int64_t i = 1; i < s; ++i) {
            double total = 1.0;
            for (int64_t k = 0; k < i; ++k) total *= 1.0 - e.data()[k];
            for (int64_t j = 0; j < s; ++j) total += g.val(a).at({0, i, j});
            CHECK(std::fabs(total - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("neighbor attention equals the generic kernel bit for bit") {
    Rng rng(43);
    for (int rep = 0; rep < 50; ++rep) {
        int64_t s = rng.uniform_int(1, 12);
        Tensor e({1, s, 1}, Dtype::f64);
        for (int64_t i = 0; i < s; ++i) e.data()[i] = rng.uniform();
        Graph g;
        Graph::Var a1 = neighbor_attention(g, g.constant(e.clone()), Direction::left);
        // generic route: scores C_ij = E_j materialized by hand
        Tensor c({1, s, s}, Dtype::f64);
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = 0; j < s; ++j) c.data()[i * s + j] = e.data()[j];
        Graph::Var a2 =
            g.geometric_prefix_attention(g.constant(std::move(c)), build_order(OrderKind::crvnn_left, s));
        for (int64_t i = 0; i < s * s; ++i)
            CHECK(g.val(a1).data()[i] == g.val(a2).data()[i]);
    }
}

TEST_CASE("discrete shift-reduce oracle agreement") {
    Rng rng(47);
    CrvnnParams params = CrvnnParams::init(small_cfg(), rng, Dtype::f64);
    for (int rep = 0; rep < 200; ++rep) {
        int64_t s = rng.uniform_int(2, 10);
        size_t su = size_t(s);
        std::vector<double> e_vals(su, 0.0);
        std::vector<double> g_vals(su, 0.0);
        for (int64_t i = 0; i < s; ++i) e_vals[size_t(i)] = double(rng.uniform_int(0, 1));
        int64_t last_exist = -1;
        for (int64_t i = 0; i < s; ++i)
            if (e_vals[size_t(i)] == 1.0) last_exist = i;
        for (int64_t i = 0; i < s; ++i)
            if (e_vals[size_t(i)] == 1.0 && i != last_exist)
                g_vals[size_t(i)] = double(rng.uniform_int(0, 1));

        Graph g;
        CrvnnModel model(g, params);
        SeqState st = state_with(g, rng, s, e_vals);
        Graph::Var x = model.retrieve(g, st, nullptr);
        Tensor gates({1, s, 1}, Dtype::f64);
        for (int64_t i = 0; i < s; ++i) gates.data()[i] = g_vals[size_t(i)];
        SeqState next = model.compose_with_gates(g, x, st, g.constant(gates.clone()), nullptr);

        // oracle: explicit list manipulation + the same cell as a black box
        Tensor x_oracle = Tensor::zeros({1, s, 8});
        std::vector<int64_t> jstar(size_t(s), -1);
        for (int64_t i = 0; i < s; ++i) {
            for (int64_t j = i - 1; j >= 0; --j)
                if (e_vals[size_t(j)] == 1.0) {
                    jstar[size_t(i)] = j;
                    break;
                }
            if (jstar[size_t(i)] >= 0)
                for (int64_t k = 0; k < 8; ++k)
                    x_oracle.data()[(i * 8) + k] = g.val(st.h).at({0, jstar[size_t(i)], k});
        }
        Graph::Var cell_out = model.cell(g, g.constant(x_oracle.clone()), st.h);
        for (int64_t i = 0; i < s; ++i) {
            bool fires = jstar[size_t(i)] >= 0 && g_vals[size_t(jstar[size_t(i)])] == 1.0;
            for (int64_t k = 0; k < 8; ++k) {
                double expect = fires ? g.val(cell_out).at({0, i, k}) : g.val(st.h).at({0, i, k});
                CHECK(std::fabs(g.val(next.h).at({0, i, k}) - expect) < 1e-6);
            }
            double e_expect = e_vals[size_t(i)] * (1.0 - g_vals[size_t(i)]);
            CHECK(std::fabs(g.val(next.e).at({0, i, 0}) - e_expect) < 1e-6);
        }
    }
}

TEST_CASE("pad invariance of a full CRvNN step") {
    Rng rng(53);
    CrvnnParams params = CrvnnParams::init(small_cfg(), rng, Dtype::f64);

    Tensor h = random_tensor(rng, {1, 4, 8});
    Tensor h_padded = Tensor::zeros({1, 6, 8});
    for (int64_t i = 0; i < 4 * 8; ++i) h_padded.data()[i] = h.data()[i];
    for (int64_t i = 4 * 8; i < 6 * 8; ++i) h_padded.data()[i] = rng.uniform(-1, 1);

    Graph g1;
    CrvnnModel m1(g1, params);
    SeqState st1 = make_state(g1, g1.constant(h.clone()),
                              g1.constant(Tensor::from({1, 4, 1}, {1, 0.6, 1, 1})));
    Graph::Var x1 = m1.retrieve(g1, st1, nullptr);
    SeqState n1 = m1.compose(g1, x1, st1, nullptr);

    Graph g2;
    CrvnnModel m2(g2, params);
    SeqState st2 = make_state(g2, g2.constant(h_padded),
                              g2.constant(Tensor::from({1, 6, 1}, {1, 0.6, 1, 1, 0, 0})));
    Graph::Var x2 = m2.retrieve(g2, st2, nullptr);
    SeqState n2 = m2.compose(g2, x2, st2, nullptr);

    for (int64_t i = 0; i < 4; ++i) {
        CHECK(std::fabs(g1.val(n1.e).at({0, i, 0}) - g2.val(n2.e).at({0, i, 0})) < 1e-9);
        for (int64_t j = 0; j < 8; ++j)
            CHECK(std::fabs(g1.val(n1.h).at({0, i, j}) - g2.val(n2.h).at({0, i, j})) < 1e-9);
    }
    for (int64_t i = 4; i < 6; ++i)
        CHECK(g2.val(n2.e).at({0, i, 0}) == 0.0);
}

TEST_CASE("full CRvNN step gradcheck at s=4 d=8") {
    CHECK(model_step_gradcheck("crvnn") < 1e-4);
}
