// SPDX-License-Identifier: Apache-2.0
#include "recseq/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

namespace recseq {

using nlohmann::json;

void adam_step(const ParamRefs& params, const std::map<std::string, Tensor>& grads,
               AdamState& state, const AdamConfig& hyper) {
    state.t += 1;
    double lr = hyper.lr;
    if (hyper.warmup_steps > 0)
        lr *= std::min(1.0, double(state.t) / double(hyper.warmup_steps));
    if (hyper.lr_decay_steps > 0) {
        int64_t past = std::max<int64_t>(0, state.t - hyper.warmup_steps);
        double frac = std::min(1.0, double(past) / double(hyper.lr_decay_steps));
        double floor = std::min(hyper.lr_min, hyper.lr);
        lr = floor + (lr - floor) * 0.5 * (1.0 + std::cos(3.141592653589793 * frac));
    }
    double bc1 = 1.0 - std::pow(hyper.beta1, double(state.t));
    double bc2 = 1.0 - std::pow(hyper.beta2, double(state.t));

    double scale = 1.0;
    if (hyper.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& [name, tensor] : params) {
            auto it = grads.find(name);
            check(it != grads.end(), Errc::internal,
                  "adam: missing gradient for '" + name + "'");
            const double* pg = it->second.data();
            for (int64_t i = 0; i < it->second.numel(); ++i) sq += pg[i] * pg[i];
        }
        double norm = std::sqrt(sq);
        if (norm > hyper.clip_norm) scale = hyper.clip_norm / norm;
    }

    for (const auto& [name, tensor] : params) {
        auto it = grads.find(name);
        check(it != grads.end(), Errc::internal, "adam: missing gradient for '" + name + "'");
        const Tensor& g = it->second;
        check(g.numel() == tensor->numel(), Errc::shape,
              "adam: gradient shape mismatch for '" + name + "'");
        const double* pg = g.data();
        for (int64_t i = 0; i < g.numel(); ++i)
            check(std::isfinite(pg[i]), Errc::numeric,
                  "adam: non-finite gradient in parameter '" + name + "'");

        Tensor& m = state.m.try_emplace(name, Tensor::zeros(tensor->shape())).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor::zeros(tensor->shape())).first->second;
        double* pm = m.data();
        double* pv = v.data();
        double* pp = tensor->data();
        for (int64_t i = 0; i < g.numel(); ++i) {
            double gv = pg[i] * scale;
            pm[i] = hyper.beta1 * pm[i] + (1.0 - hyper.beta1) * gv;
            pv[i] = hyper.beta2 * pv[i] + (1.0 - hyper.beta2) * gv * gv;
            double mhat = pm[i] / bc1;
            double vhat = pv[i] / bc2;
            pp[i] -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
        }
        tensor->quantize_to_dtype();
    }
}

// ---------------------------------------------------------------------------
// config

void ExperimentConfig::validate() const {
    check(model == "crvnn" || model == "ndr" || model == "baseline", Errc::config,
          "model must be crvnn, ndr or baseline, got '" + model + "'");
    check(d >= 1, Errc::config, "d must be positive");
    check(batch_size >= 1, Errc::config, "batch_size must be positive");
    check(max_steps >= 0, Errc::config, "max_steps cannot be negative");
    check(eval_interval >= 1, Errc::config, "eval_interval must be positive");
    check(tau > 0.0 && tau < 1.0, Errc::config, "tau must lie in (0,1)");
    check(readout == "auto" || readout == "first" || readout == "last_nonpad" ||
              readout == "last_existing_weighted",
          Errc::config, "unknown readout policy '" + readout + "'");
    dtype_from_name(dtype);
    cell_kind_from_name(cell);
    check(n_layers >= 1, Errc::config, "n_layers must be >= 1");
}

std::string ExperimentConfig::to_text() const {
    std::ostringstream os;
    os << "model = " << model << "\n";
    os << "d = " << d << "\n";
    os << "n_heads = " << n_heads << "\n";
    os << "ffn_hidden = " << ffn_hidden << "\n";
    os << "df_hidden = " << df_hidden << "\n";
    os << "cell_hidden = " << cell_hidden << "\n";
    os << "cell = " << cell << "\n";
    os << "n_layers = " << n_layers << "\n";
    os << "share_layers = " << (share_layers ? "true" : "false") << "\n";
    os << "t_max = " << t_max << "\n";
    os << "tau = " << tau << "\n";
    os << "readout = " << readout << "\n";
    os << "lr = " << adam.lr << "\n";
    os << "beta1 = " << adam.beta1 << "\n";
    os << "beta2 = " << adam.beta2 << "\n";
    os << "adam_eps = " << adam.eps << "\n";
    os << "warmup_steps = " << adam.warmup_steps << "\n";
    os << "clip_norm = " << adam.clip_norm << "\n";
    os << "lr_min = " << adam.lr_min << "\n";
    os << "lr_decay_steps = " << adam.lr_decay_steps << "\n";
    os << "batch_size = " << batch_size << "\n";
    os << "max_steps = " << max_steps << "\n";
    os << "eval_interval = " << eval_interval << "\n";
    os << "early_stop_acc = " << early_stop_acc << "\n";
    os << "seed = " << seed << "\n";
    os << "dtype = " << dtype << "\n";
    os << "out_dir = " << out_dir << "\n";
    os << "wall_clock = " << (wall_clock ? "real" : "none") << "\n";
    for (const auto& [name, path] : shards) os << "shard." << name << " = " << path << "\n";
    return os.str();
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail(Errc::config, "key '" + key + "': expected true/false, got '" + v + "'");
}

}  // namespace

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string stripped = trim(line.substr(0, line.find('#')));
        if (stripped.empty()) continue;
        size_t eq = stripped.find('=');
        check(eq != std::string::npos, Errc::config,
              "config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(stripped.substr(0, eq));
        std::string val = trim(stripped.substr(eq + 1));
        check(!key.empty() && !val.empty(), Errc::config,
              "config line " + std::to_string(lineno) + ": empty key or value");
        try {
            if (key == "model") cfg.model = val;
            else if (key == "d") cfg.d = std::stoll(val);
            else if (key == "n_heads") cfg.n_heads = std::stoll(val);
            else if (key == "ffn_hidden") cfg.ffn_hidden = std::stoll(val);
            else if (key == "df_hidden") cfg.df_hidden = std::stoll(val);
            else if (key == "cell_hidden") cfg.cell_hidden = std::stoll(val);
            else if (key == "cell") cfg.cell = val;
            else if (key == "n_layers") cfg.n_layers = std::stoi(val);
            else if (key == "share_layers") cfg.share_layers = parse_bool(val, key);
            else if (key == "t_max") cfg.t_max = std::stoi(val);
            else if (key == "tau") cfg.tau = std::stod(val);
            else if (key == "readout") cfg.readout = val;
            else if (key == "lr") cfg.adam.lr = std::stod(val);
            else if (key == "beta1") cfg.adam.beta1 = std::stod(val);
            else if (key == "beta2") cfg.adam.beta2 = std::stod(val);
            else if (key == "adam_eps") cfg.adam.eps = std::stod(val);
            else if (key == "warmup_steps") cfg.adam.warmup_steps = std::stoll(val);
            else if (key == "clip_norm") cfg.adam.clip_norm = std::stod(val);
            else if (key == "lr_min") cfg.adam.lr_min = std::stod(val);
            else if (key == "lr_decay_steps") cfg.adam.lr_decay_steps = std::stoll(val);
            else if (key == "batch_size") cfg.batch_size = std::stoll(val);
            else if (key == "max_steps") cfg.max_steps = std::stoll(val);
            else if (key == "eval_interval") cfg.eval_interval = std::stoll(val);
            else if (key == "early_stop_acc") cfg.early_stop_acc = std::stod(val);
            else if (key == "seed") cfg.seed = std::stoull(val);
            else if (key == "dtype") cfg.dtype = val;
            else if (key == "out_dir") cfg.out_dir = val;
            else if (key == "wall_clock") {
                check(val == "real" || val == "none", Errc::config,
                      "wall_clock must be real or none");
                cfg.wall_clock = val == "real";
            } else if (key.rfind("shard.", 0) == 0) {
                std::string name = key.substr(6);
                check(!name.empty(), Errc::config, "shard key needs a name");
                cfg.shards[name] = val;
            } else {
                fail(Errc::config, "unknown config key '" + key + "'");
            }
        } catch (const Error&) {
            throw;
        } catch (const std::exception&) {
            fail(Errc::config, "config line " + std::to_string(lineno) + ": bad value '" + val +
                                   "' for key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), Errc::io, "cannot open config '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_text(buf.str());
}

// ---------------------------------------------------------------------------
// bundle

ModelBundle ModelBundle::init(const ExperimentConfig& cfg) {
    cfg.validate();
    ModelBundle b;
    b.cfg = cfg;
    Dtype dt = cfg.dtype_enum();
    Rng root(cfg.seed);
    Rng embed_rng = root.fork(1);
    Rng model_rng = root.fork(2);
    Rng head_rng = root.fork(3);

    b.embed = uniform_init(embed_rng, {listops::vocab_size(), cfg.d},
                           1.0 / std::sqrt(double(cfg.d)), dt);
    if (cfg.model == "ndr") {
        NdrConfig mc;
        mc.d = cfg.d;
        mc.n_heads = cfg.n_heads;
        mc.ffn_hidden = cfg.ffn_hidden;
        mc.n_layers = cfg.n_layers;
        b.ndr = std::make_unique<NdrParams>(NdrParams::init(mc, model_rng, dt));
    } else if (cfg.model == "crvnn") {
        CrvnnConfig mc;
        mc.d = cfg.d;
        mc.df_hidden = cfg.df_hidden;
        mc.cell_hidden = cfg.cell_hidden;
        mc.cell = cell_kind_from_name(cfg.cell);
        b.crvnn = std::make_unique<CrvnnParams>(CrvnnParams::init(mc, model_rng, dt));
    } else {
        BaselineConfig mc;
        mc.d = cfg.d;
        mc.n_heads = cfg.n_heads;
        mc.ffn_hidden = cfg.ffn_hidden;
        mc.n_layers = cfg.n_layers;
        mc.share_layers = cfg.share_layers;
        b.baseline = std::make_unique<BaselineParams>(BaselineParams::init(mc, model_rng, dt));
    }
    // near-zero head: the initial loss sits at ln(10) and argmax stays unbiased
    b.head_w = uniform_init(head_rng, {cfg.d, 10}, 0.01, dt);
    b.head_b = Tensor::zeros({10}, dt);
    return b;
}

ParamRefs ModelBundle::param_refs() {
    ParamRefs refs;
    refs.emplace_back("embed", &embed);
    if (ndr) ndr->collect("ndr", refs);
    if (crvnn) crvnn->collect("crvnn", refs);
    if (baseline) baseline->collect("baseline", refs);
    refs.emplace_back("head.w", &head_w);
    refs.emplace_back("head.b", &head_b);
    return refs;
}

Checkpoint ModelBundle::to_checkpoint(const AdamState* opt) {
    Checkpoint ckpt;
    ckpt.config_text = cfg.to_text();
    for (const auto& [name, tensor] : param_refs()) ckpt.tensors.emplace_back(name, tensor->clone());
    if (opt) {
        ckpt.tensors.emplace_back("opt.step", Tensor::scalar(double(opt->t)));
        for (const auto& [name, tensor] : opt->m)
            ckpt.tensors.emplace_back("opt.m." + name, tensor.clone());
        for (const auto& [name, tensor] : opt->v)
            ckpt.tensors.emplace_back("opt.v." + name, tensor.clone());
    }
    return ckpt;
}

ModelBundle ModelBundle::from_checkpoint(const Checkpoint& ckpt) {
    ModelBundle b = init(ExperimentConfig::from_text(ckpt.config_text));
    for (auto& [name, tensor] : b.param_refs()) {
        const Tensor* stored = ckpt.find(name);
        check(stored != nullptr, Errc::data, "checkpoint lacks tensor '" + name + "'");
        check(stored->shape() == tensor->shape(), Errc::shape,
              "checkpoint tensor '" + name + "' has shape " + shape_str(stored->shape()) +
                  ", expected " + shape_str(tensor->shape()));
        *tensor = stored->clone();
    }
    return b;
}

ReadoutPolicy ModelBundle::readout_policy() const {
    if (cfg.readout == "first") return ReadoutPolicy::first;
    if (cfg.readout == "last_nonpad") return ReadoutPolicy::last_nonpad;
    if (cfg.readout == "last_existing_weighted") return ReadoutPolicy::last_existing_weighted;
    // auto: the CRvNN survivor drifts rightward, the others read position 0
    return cfg.model == "crvnn" ? ReadoutPolicy::last_existing_weighted : ReadoutPolicy::first;
}

bool ModelBundle::supports_layer_override() const {
    return cfg.model == "ndr" || (cfg.model == "baseline" && cfg.share_layers);
}

// ---------------------------------------------------------------------------
// forward

Batch make_batch(const std::vector<listops::Example>& shard, const std::vector<int64_t>& idx) {
    check(!idx.empty(), Errc::invalid_arg, "empty batch");
    Batch batch;
    batch.b = int64_t(idx.size());
    for (int64_t i : idx)
        batch.s = std::max(batch.s, int64_t(shard[size_t(i)].token_ids.size()));
    batch.tokens.assign(size_t(batch.b * batch.s), 0);
    batch.pad.assign(size_t(batch.b * batch.s), 0.0);
    for (int64_t r = 0; r < batch.b; ++r) {
        const listops::Example& ex = shard[size_t(idx[size_t(r)])];
        for (size_t t = 0; t < ex.token_ids.size(); ++t) {
            batch.tokens[size_t(r * batch.s) + t] = ex.token_ids[t];
            batch.pad[size_t(r * batch.s) + t] = 1.0;
        }
        batch.labels.push_back(ex.label);
    }
    return batch;
}

ForwardOut forward_model(Graph& g, ModelBundle& bundle, const Batch& batch,
                         const EvalOverrides& ov, bool want_trace, bool want_attention) {
    const ExperimentConfig& cfg = bundle.cfg;
    if (ov.eval_layers > 0)
        check(bundle.supports_layer_override(), Errc::unsupported,
              cfg.model == "baseline"
                  ? "layer override requires shared parameters; the unshared baseline is fixed-depth"
                  : "layer override does not apply to crvnn; use the t_max override");
    if (ov.t_max > 0 || ov.tau >= 0.0)
        check(cfg.model == "crvnn", Errc::unsupported,
              "t_max/tau overrides only apply to crvnn");

    Graph::Var embed_table = g.param(bundle.embed, "embed");
    ForwardOut out;

    if (cfg.model == "baseline") {
        int layers = ov.eval_layers > 0 ? ov.eval_layers : 0;
        out.state = transformer_encode(g, *bundle.baseline, embed_table, batch.tokens, batch.pad,
                                       batch.b, batch.s, layers, "baseline",
                                       want_trace ? &out.run.trace : nullptr);
        out.run.steps_run = out.state.step;
        out.run.halt_step.assign(size_t(batch.b), -1);
    } else {
        Graph::Var h0 = g.embed(embed_table, batch.tokens, batch.b, batch.s);
        Tensor e0({batch.b, batch.s, 1}, Dtype::f64);
        for (int64_t i = 0; i < batch.b * batch.s; ++i) e0.data()[i] = batch.pad[size_t(i)];
        SeqState init = make_state(g, h0, g.constant(std::move(e0)));

        RunConfig rc;
        rc.trace = want_trace;
        rc.trace_attention = want_attention;
        if (cfg.model == "ndr") {
            NdrModel model(g, *bundle.ndr);
            rc.t_max = ov.eval_layers > 0 ? ov.eval_layers : cfg.n_layers;
            rc.halt = HaltPolicy::none();
            out.run = run_recursion(g, model, init, rc);
        } else {
            CrvnnModel model(g, *bundle.crvnn);
            rc.t_max = ov.t_max > 0 ? ov.t_max : (cfg.t_max > 0 ? cfg.t_max : int(batch.s));
            rc.halt = HaltPolicy::existential(ov.tau >= 0.0 ? ov.tau : cfg.tau);
            out.run = run_recursion(g, model, init, rc);
        }
        out.state = out.run.final_state;
    }

    Graph::Var head_w = g.param(bundle.head_w, "head.w");
    Graph::Var head_b = g.param(bundle.head_b, "head.b");
    Graph::Var pooled = readout(g, out.state, bundle.readout_policy());
    out.logits = g.add(g.matmul(pooled, head_w), head_b);
    return out;
}

Graph::Var cross_entropy(Graph& g, Graph::Var logits, const std::vector<int64_t>& labels) {
    const Tensor& tl = g.val(logits);
    check(tl.rank() == 2, Errc::shape, "cross_entropy expects [B,classes]");
    int64_t batch = tl.shape()[0], classes = tl.shape()[1];
    check(int64_t(labels.size()) == batch, Errc::shape, "one label per batch row required");
    for (int64_t l : labels)
        check(l >= 0 && l < classes, Errc::data, "label out of range");

    Graph::Var mx = g.max(logits, 1, true);                       // [B,1]
    Graph::Var z = g.sub(logits, mx);                             // [B,classes]
    Graph::Var sumexp = g.sum(g.exp_(z), 1, true);                // [B,1], >= 1
    Graph::Var lse = g.add(mx, g.log1p_(g.add_scalar(sumexp, -1.0)));
    Graph::Var picked = g.take_position(g.reshape(logits, {batch, classes, 1}), labels);
    Graph::Var diff = g.sub(lse, g.reshape(picked, {batch, 1}));
    return g.mul_scalar(g.sum_all(diff), 1.0 / double(batch));
}

int64_t argmax_row(const Tensor& logits, int64_t row) {
    int64_t classes = logits.shape()[1];
    const double* p = logits.data() + row * classes;
    int64_t best = 0;
    for (int64_t j = 1; j < classes; ++j)
        if (p[j] > p[best]) best = j;
    return best;
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

void accumulate_eval(ModelBundle& bundle, const std::vector<listops::Example>& shard,
                     const EvalOverrides& ov, EvalReport& report) {
    int64_t n = int64_t(shard.size());
    int64_t correct = 0;
    double loss_sum = 0.0;
    std::vector<double> halts;
    for (int64_t start = 0; start < n; start += bundle.cfg.batch_size) {
        std::vector<int64_t> idx;
        for (int64_t i = start; i < std::min(n, start + bundle.cfg.batch_size); ++i)
            idx.push_back(i);
        Batch batch = make_batch(shard, idx);
        Graph g(false);
        ForwardOut fwd = forward_model(g, bundle, batch, ov, false, false);
        Graph::Var loss = cross_entropy(g, fwd.logits, batch.labels);
        loss_sum += g.val(loss).data()[0] * double(batch.b);
        const Tensor& logits = g.val(fwd.logits);
        for (int64_t r = 0; r < batch.b; ++r) {
            if (argmax_row(logits, r) == batch.labels[size_t(r)]) ++correct;
            if (bundle.cfg.model == "crvnn") {
                int h = fwd.run.halt_step[size_t(r)];
                halts.push_back(h >= 0 ? double(h) : double(fwd.run.steps_run));
            }
        }
    }
    report.count = n;
    report.accuracy = double(correct) / double(n);
    report.mean_loss = loss_sum / double(n);
    if (!halts.empty()) {
        report.median_halt = median(halts);
        for (double h : halts) ++report.halt_hist[int(h)];
    }
}

}  // namespace

EvalReport evaluate_bundle(ModelBundle& bundle, const std::vector<listops::Example>& shard,
                           const EvalOverrides& ov) {
    check(!shard.empty(), Errc::data, "cannot evaluate an empty shard");
    EvalReport report;
    accumulate_eval(bundle, shard, ov, report);
    return report;
}

EvalReport evaluate_checkpoint(const std::string& ckpt_path, const std::string& shard_path,
                               const EvalOverrides& ov) {
    ModelBundle bundle = ModelBundle::from_checkpoint(load_checkpoint(ckpt_path));
    return evaluate_bundle(bundle, listops::load_shard(shard_path), ov);
}

MultiEvalReport evaluate_checkpoints(const std::vector<std::string>& ckpt_paths,
                                     const std::string& shard_path, const EvalOverrides& ov) {
    check(!ckpt_paths.empty(), Errc::invalid_arg, "no checkpoints given");
    MultiEvalReport multi;
    std::vector<double> accs;
    for (const std::string& path : ckpt_paths) {
        multi.runs.push_back(evaluate_checkpoint(path, shard_path, ov));
        accs.push_back(multi.runs.back().accuracy);
    }
    multi.median_accuracy = median(accs);
    return multi;
}

double median(std::vector<double> xs) {
    check(!xs.empty(), Errc::invalid_arg, "median of nothing");
    std::sort(xs.begin(), xs.end());
    size_t n = xs.size();
    return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// ---------------------------------------------------------------------------
// training

namespace {

struct Batcher {
    const std::vector<listops::Example>* shard;
    int64_t batch_size;
    uint64_t seed;
    int64_t epoch = -1;
    size_t cursor = 0;
    std::vector<std::vector<int64_t>> batches;

    void next_epoch() {
        ++epoch;
        std::vector<int64_t> order(shard->size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = int64_t(i);
        Rng rng = Rng(seed).fork(uint64_t(100 + epoch));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(rng.uniform_int(0, int64_t(i) - 1))]);
        // sort within shuffled windows so batches stay short where possible
        int64_t window = batch_size * 16;
        for (size_t start = 0; start < order.size(); start += size_t(window)) {
            size_t end = std::min(order.size(), start + size_t(window));
            std::stable_sort(order.begin() + int64_t(start), order.begin() + int64_t(end),
                             [&](int64_t a, int64_t b) {
                                 return (*shard)[size_t(a)].length < (*shard)[size_t(b)].length;
                             });
        }
        batches.clear();
        for (size_t start = 0; start < order.size(); start += size_t(batch_size)) {
            size_t end = std::min(order.size(), start + size_t(batch_size));
            batches.emplace_back(order.begin() + int64_t(start), order.begin() + int64_t(end));
        }
        cursor = 0;
    }

    const std::vector<int64_t>& next() {
        if (epoch < 0 || cursor >= batches.size()) next_epoch();
        return batches[cursor++];
    }
};

std::string format_metric(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

}  // namespace

TrainResult train(const ExperimentConfig& cfg) {
    cfg.validate();
    check(cfg.shards.count("train") == 1, Errc::config, "config lacks shard.train");
    std::filesystem::create_directories(cfg.out_dir);

    std::map<std::string, std::vector<listops::Example>> shards;
    for (const auto& [name, path] : cfg.shards) shards[name] = listops::load_shard(path);
    const std::vector<listops::Example>& train_shard = shards.at("train");

    std::string val_name;
    if (shards.count("val")) {
        val_name = "val";
    } else {
        for (const auto& [name, _] : shards)
            if (name != "train" && val_name.empty()) val_name = name;
    }

    ModelBundle bundle = ModelBundle::init(cfg);
    ParamRefs refs = bundle.param_refs();
    AdamState opt;

    std::string metrics_path = cfg.out_dir + "/metrics.csv";
    std::ofstream metrics(metrics_path, std::ios::binary);
    check(metrics.good(), Errc::io, "cannot write '" + metrics_path + "'");
    metrics << "step,split,loss,accuracy,median_halt,wall_s\n";

    auto start_time = std::chrono::steady_clock::now();
    auto wall_seconds = [&]() {
        if (!cfg.wall_clock) return 0.0;
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time)
            .count();
    };

    TrainResult result;
    result.best_val_accuracy = -1.0;
    std::string best_path = cfg.out_dir + "/best.ckpt";
    std::string final_path = cfg.out_dir + "/final.ckpt";

    bool stop = false;
    auto run_eval = [&](int64_t step) {
        for (auto& [name, shard] : shards) {
            if (name == "train") continue;
            EvalReport rep = evaluate_bundle(bundle, shard, EvalOverrides{});
            metrics << step << "," << name << "," << format_metric(rep.mean_loss, 6) << ","
                    << format_metric(rep.accuracy, 6) << ","
                    << format_metric(rep.median_halt < 0 ? 0.0 : rep.median_halt, 1) << ","
                    << format_metric(wall_seconds(), 3) << "\n";
            metrics.flush();
            if (name == val_name) {
                if (rep.accuracy > result.best_val_accuracy) {
                    result.best_val_accuracy = rep.accuracy;
                    save_checkpoint(best_path, bundle.to_checkpoint(&opt));
                }
                if (cfg.early_stop_acc > 0.0 && rep.accuracy >= cfg.early_stop_acc) stop = true;
            }
        }
    };

    Batcher batcher{&train_shard, cfg.batch_size, cfg.seed};
    run_eval(0);
    for (int64_t step = 1; step <= cfg.max_steps && !stop; ++step) {
        Batch batch = make_batch(train_shard, batcher.next());
        Graph g;
        ForwardOut fwd = forward_model(g, bundle, batch, EvalOverrides{}, false, false);
        Graph::Var loss = cross_entropy(g, fwd.logits, batch.labels);
        check(std::isfinite(g.val(loss).data()[0]), Errc::numeric,
              "training loss became non-finite at step " + std::to_string(step));
        auto grads = g.backward(loss);
        adam_step(refs, grads, opt, cfg.adam);
        result.steps = step;
        if (step % cfg.eval_interval == 0 || step == cfg.max_steps) run_eval(step);
    }

    save_checkpoint(final_path, bundle.to_checkpoint(&opt));
    if (result.best_val_accuracy < 0.0) {
        // no eval shard: the final state doubles as best
        save_checkpoint(best_path, bundle.to_checkpoint(&opt));
        result.best_val_accuracy = 0.0;
    }
    result.final_checkpoint = final_path;
    result.best_checkpoint = best_path;
    result.metrics_csv = metrics_path;
    return result;
}

// ---------------------------------------------------------------------------
// tracing

TraceResult trace_example(const std::string& ckpt_path, const std::string& example_json,
                          const std::string& out_prefix) {
    ModelBundle bundle = ModelBundle::from_checkpoint(load_checkpoint(ckpt_path));

    std::string text = example_json;
    if (!example_json.empty() && example_json[0] != '{' && example_json[0] != '[') {
        std::ifstream in(example_json);
        check(in.good(), Errc::io, "cannot open example '" + example_json + "'");
        std::ostringstream buf;
        buf << in.rdbuf();
        text = buf.str();
    }
    json doc;
    try {
        doc = json::parse(text);
    } catch (const std::exception& e) {
        fail(Errc::parse, std::string("example JSON: ") + e.what());
    }

    listops::Example ex;
    try {
        for (const json& t : doc.at("tokens"))
            ex.token_ids.push_back(listops::token_id(t.get<std::string>()));
        ex.label = doc.value("label", -1);
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        fail(Errc::data, std::string("example JSON: ") + e.what());
    }
    check(!ex.token_ids.empty(), Errc::data, "example has no tokens");

    std::vector<listops::Example> shard = {ex};
    Batch batch = make_batch(shard, {0});
    Graph g;
    ForwardOut fwd = forward_model(g, bundle, batch, EvalOverrides{}, true, true);

    TraceResult out;
    out.steps = fwd.run.steps_run;
    out.halt_step = fwd.run.halt_step.empty() ? -1 : fwd.run.halt_step[0];
    out.predicted = int(argmax_row(g.val(fwd.logits), 0));

    int64_t s = batch.s;
    out.csv_path = out_prefix + ".trace.csv";
    {
        std::ofstream csv(out.csv_path, std::ios::binary);
        check(csv.good(), Errc::io, "cannot write '" + out.csv_path + "'");
        csv << "step,position,E,G,L\n";
        for (const StepTrace& st : fwd.run.trace) {
            for (int64_t i = 0; i < s; ++i) {
                char row[160];
                std::snprintf(row, sizeof(row), "%d,%lld,%.9g,%.9g,%.9g\n", st.step,
                              (long long)i, st.e.data()[i],
                              st.g.defined() ? st.g.data()[i] : 0.0,
                              st.l.defined() ? st.l.data()[i] : 0.0);
                csv << row;
            }
        }
    }

    out.attn_json_path = out_prefix + ".attn.json";
    {
        json dump = json::array();
        for (const StepTrace& st : fwd.run.trace) {
            json entry;
            entry["step"] = st.step;
            entry["heads"] = json::array();
            for (const Tensor& a : st.attention) {
                json mat = json::array();
                for (int64_t i = 0; i < s; ++i) {
                    json row = json::array();
                    for (int64_t j = 0; j < s; ++j) row.push_back(a.data()[i * s + j]);
                    mat.push_back(row);
                }
                entry["heads"].push_back(mat);
            }
            dump.push_back(entry);
        }
        std::ofstream jf(out.attn_json_path, std::ios::binary);
        check(jf.good(), Errc::io, "cannot write '" + out.attn_json_path + "'");
        jf << dump.dump(1) << "\n";
    }

    if (bundle.cfg.model == "crvnn") {
        out.mask_csv_path = out_prefix + ".mask.csv";
        std::ofstream csv(out.mask_csv_path, std::ios::binary);
        check(csv.good(), Errc::io, "cannot write '" + out.mask_csv_path + "'");
        csv << "step,position,E_bin\n";
        for (const StepTrace& st : fwd.run.trace)
            for (int64_t i = 0; i < s; ++i)
                csv << st.step << "," << i << ","
                    << (st.e.data()[i] >= bundle.cfg.tau ? 1 : 0) << "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// gradcheck suite

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi) {
    Tensor t(std::move(shape), Dtype::f64);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

GradcheckItem check_primitive(const std::string& name, Shape shape, double lo, double hi,
                              const std::function<Graph::Var(Graph&, Graph::Var)>& f,
                              uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;
    for (int inst = 0; inst < 20; ++inst)
        worst = std::max(worst, grad_check(f, random_tensor(rng, shape, lo, hi)));
    return {name, worst};
}

ExperimentConfig tiny_config(const std::string& kind) {
    ExperimentConfig cfg;
    cfg.model = kind;
    cfg.d = 8;
    cfg.n_heads = 2;
    cfg.ffn_hidden = 16;
    cfg.df_hidden = 8;
    cfg.cell_hidden = 16;
    cfg.n_layers = 1;
    cfg.t_max = 1;
    cfg.batch_size = 2;
    cfg.seed = 99;
    return cfg;
}

}  // namespace

double model_step_gradcheck(const std::string& model_kind) {
    ModelBundle bundle = ModelBundle::init(tiny_config(model_kind));
    // a unit-scale head and neutral gate biases keep every parameter's
    // gradient well above the finite-difference noise floor
    Rng head_rng(123);
    bundle.head_w = uniform_init(head_rng, {bundle.cfg.d, 10}, 0.6, Dtype::f64);
    bundle.head_b = uniform_init(head_rng, {10}, 0.1, Dtype::f64);
    if (bundle.crvnn)
        std::fill(bundle.crvnn->df.b2.data(),
                  bundle.crvnn->df.b2.data() + bundle.crvnn->df.b2.numel(), 0.0);
    if (bundle.ndr)
        std::fill(bundle.ndr->gate.b2.data(),
                  bundle.ndr->gate.b2.data() + bundle.ndr->gate.b2.numel(), 0.0);

    std::vector<listops::Example> shard;
    for (const char* txt : {"[SM 4 5 ]", "[MAX 2 7 ]"}) {
        std::vector<std::string> toks;
        std::istringstream is(txt);
        std::string t;
        while (is >> t) toks.push_back(t);
        shard.push_back(listops::to_example(listops::parse(toks)));
    }
    Batch batch = make_batch(shard, {0, 1});

    auto eval_loss = [&]() {
        Graph g;
        ForwardOut fwd = forward_model(g, bundle, batch, EvalOverrides{}, false, false);
        return g.val(cross_entropy(g, fwd.logits, batch.labels)).data()[0];
    };

    std::map<std::string, Tensor> analytic;
    {
        Graph g;
        ForwardOut fwd = forward_model(g, bundle, batch, EvalOverrides{}, false, false);
        analytic = g.backward(cross_entropy(g, fwd.logits, batch.labels));
    }

    // h ~ cbrt(eps)*scale balances rounding against truncation for a
    // unit-scale loss; 1e-6 would leave low-sensitivity entries noise-bound
    const double h = 1e-5;
    double worst = 0.0;
    for (auto& [name, tensor] : bundle.param_refs()) {
        const Tensor& ga = analytic.at(name);
        for (int64_t i = 0; i < tensor->numel(); ++i) {
            double orig = tensor->data()[i];
            double xp = orig + h, xm = orig - h;
            tensor->data()[i] = xp;
            double lp = eval_loss();
            tensor->data()[i] = xm;
            double lm = eval_loss();
            tensor->data()[i] = orig;
            double numeric = (lp - lm) / (xp - xm);
            double a = ga.data()[i];
            double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
    }
    return worst;
}

GradcheckReport run_gradcheck_suite() {
    GradcheckReport report;
    auto weigh = [](Graph& g, Graph::Var v, uint64_t salt) {
        Rng r(salt);
        Tensor w(g.val(v).shape(), Dtype::f64);
        for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = r.uniform(-1, 1);
        return g.sum_all(g.mul(v, g.constant(std::move(w))));
    };

    std::vector<GradcheckItem> items;
    items.push_back(check_primitive("add", {3, 4}, -2, 2,
        [&](Graph& g, Graph::Var v) {
            return weigh(g, g.add(v, g.constant(Tensor::full({3, 4}, 0.7))), 1);
        }, 2001));
    items.push_back(check_primitive("sub", {3, 4}, -2, 2,
        [&](Graph& g, Graph::Var v) {
            return weigh(g, g.sub(g.constant(Tensor::full({3, 4}, 0.7)), v), 2);
        }, 2002));
    items.push_back(check_primitive("mul", {3, 1}, -2, 2,
        [&](Graph& g, Graph::Var v) {
            Rng r(40);
            return weigh(g, g.mul(v, g.constant(random_tensor(r, {3, 4}, -1, 1))), 3);
        }, 2003));
    items.push_back(check_primitive("neg", {6}, -2, 2,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.neg(v), 4); }, 2004));
    items.push_back(check_primitive("sigmoid", {6}, -3, 3,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.sigmoid(v), 5); }, 2005));
    items.push_back(check_primitive("tanh", {6}, -3, 3,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.tanh_(v), 6); }, 2006));
    items.push_back(check_primitive("gelu", {6}, -3, 3,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.gelu(v), 7); }, 2007));
    items.push_back(check_primitive("exp", {6}, -2, 2,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.exp_(v), 8); }, 2008));
    items.push_back(check_primitive("log1p", {6}, -0.8, 3,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.log1p_(v), 9); }, 2009));
    items.push_back(check_primitive("matmul", {3, 4}, -2, 2,
        [&](Graph& g, Graph::Var v) {
            Rng r(41);
            return weigh(g, g.matmul(v, g.constant(random_tensor(r, {4, 2}, -1, 1))), 10);
        }, 2010));
    items.push_back(check_primitive("batched_matmul", {2, 3, 4}, -2, 2,
        [&](Graph& g, Graph::Var v) {
            Rng r(42);
            return weigh(g, g.matmul(v, g.constant(random_tensor(r, {2, 4, 3}, -1, 1))), 11);
        }, 2011));
    items.push_back(check_primitive("transpose", {2, 3, 4}, -2, 2,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.transpose_last2(v), 12); }, 2012));
    items.push_back(check_primitive("reshape", {2, 6}, -2, 2,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.reshape(v, {3, 4}), 13); }, 2013));
    items.push_back(check_primitive("concat", {2, 3}, -2, 2,
        [&](Graph& g, Graph::Var v) {
            return weigh(g, g.concat_last({v, g.constant(Tensor::full({2, 2}, 0.5)), v}), 14);
        }, 2014));
    items.push_back(check_primitive("sum", {3, 4}, -2, 2,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.sum(v, 1, false), 15); }, 2015));
    items.push_back(check_primitive("mean", {3, 4}, -2, 2,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.mean(v, 0, true), 16); }, 2016));
    items.push_back(check_primitive("max", {3, 4}, -2, 2,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.max(v, 1, false), 17); }, 2017));
    items.push_back(check_primitive("layer_norm", {3, 4}, -2, 2,
        [&](Graph& g, Graph::Var v) {
            return weigh(g, g.layer_norm(v, g.constant(Tensor::full({4}, 1.1)),
                                         g.constant(Tensor::full({4}, 0.1)), 1e-5), 18);
        }, 2018));
    items.push_back(check_primitive("softmax", {3, 4}, -2, 2,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.softmax(v), 19); }, 2019));
    items.push_back(check_primitive("take_position", {2, 3, 4}, -2, 2,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.take_position(v, {2, 0}), 20); }, 2020));
    items.push_back(check_primitive("geometric_prefix_attention", {4, 4}, 0.02, 0.98,
        [&](Graph& g, Graph::Var v) {
            return weigh(g, g.geometric_prefix_attention(v, build_order(OrderKind::ndr, 4)), 21);
        }, 2021));
    items.push_back(check_primitive("geometric_residual", {4, 4}, 0.02, 0.98,
        [&](Graph& g, Graph::Var v) {
            return weigh(g, g.geometric_residual(v, build_order(OrderKind::crvnn_left, 4)), 22);
        }, 2022));
    items.push_back(check_primitive("survivor_weights", {2, 4, 1}, 0.02, 0.98,
        [&](Graph& g, Graph::Var v) { return weigh(g, g.survivor_weights(v), 23); }, 2023));

    for (const char* kind : {"crvnn", "ndr", "baseline"})
        items.push_back({std::string(kind) + "_full_step", model_step_gradcheck(kind)});

    report.items = std::move(items);
    for (const GradcheckItem& item : report.items)
        report.worst = std::max(report.worst, item.max_rel_err);
    return report;
}

}  // namespace recseq
