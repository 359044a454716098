// SPDX-License-Identifier: Apache-2.0
#include "recseq/listops.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

namespace recseq::listops {

using nlohmann::json;

namespace {

constexpr int kRetryCap = 500;

const std::array<std::string, 16> kVocab = {"<pad>", "[MAX", "[MIN", "[MED", "[SM", "]",
                                            "0",     "1",    "2",    "3",    "4",   "5",
                                            "6",     "7",    "8",    "9"};

}  // namespace

const char* op_token(Op op) {
    switch (op) {
        case Op::max: return "[MAX";
        case Op::min: return "[MIN";
        case Op::med: return "[MED";
        case Op::sm: return "[SM";
    }
    fail(Errc::internal, "bad operator");
}

OpTree OpTree::leaf(int digit) {
    check(digit >= 0 && digit <= 9, Errc::invalid_arg, "leaf digit out of range");
    OpTree t;
    t.is_leaf = true;
    t.digit = digit;
    return t;
}

OpTree OpTree::node(Op op, std::vector<OpTree> children) {
    check(children.size() >= 2, Errc::invalid_arg, "operator nodes need at least 2 children");
    OpTree t;
    t.is_leaf = false;
    t.op = op;
    t.children = std::move(children);
    return t;
}

int OpTree::depth() const {
    if (is_leaf) return 0;
    int best = 0;
    for (const OpTree& c : children) best = std::max(best, c.depth());
    return 1 + best;
}

int64_t OpTree::token_length() const {
    if (is_leaf) return 1;
    int64_t total = 2;  // opening operator + closing bracket
    for (const OpTree& c : children) total += c.token_length();
    return total;
}

int64_t OpTree::max_args() const {
    if (is_leaf) return 0;
    int64_t best = int64_t(children.size());
    for (const OpTree& c : children) best = std::max(best, c.max_args());
    return best;
}

bool OpTree::operator==(const OpTree& other) const {
    if (is_leaf != other.is_leaf) return false;
    if (is_leaf) return digit == other.digit;
    return op == other.op && children == other.children;
}

int evaluate(const OpTree& tree) {
    if (tree.is_leaf) return tree.digit;
    std::vector<int> vals;
    vals.reserve(tree.children.size());
    for (const OpTree& c : tree.children) vals.push_back(evaluate(c));
    switch (tree.op) {
        case Op::max: return *std::max_element(vals.begin(), vals.end());
        case Op::min: return *std::min_element(vals.begin(), vals.end());
        case Op::med: {
            std::sort(vals.begin(), vals.end());
            return vals[(vals.size() - 1) / 2];  // lower median on even arity
        }
        case Op::sm: {
            int total = 0;
            for (int v : vals) total += v;
            return total % 10;
        }
    }
    fail(Errc::internal, "bad operator");
}

std::vector<std::string> tokenize(const OpTree& tree) {
    std::vector<std::string> out;
    auto walk = [&](auto&& self, const OpTree& t) -> void {
        if (t.is_leaf) {
            out.push_back(std::to_string(t.digit));
            return;
        }
        out.push_back(op_token(t.op));
        for (const OpTree& c : t.children) self(self, c);
        out.push_back("]");
    };
    walk(walk, tree);
    return out;
}

namespace {

OpTree parse_at(const std::vector<std::string>& tokens, size_t& pos) {
    check(pos < tokens.size(), Errc::parse,
          "parse error at token " + std::to_string(pos) + ": unexpected end of stream");
    const std::string& tok = tokens[pos];
    if (tok.size() == 1 && tok[0] >= '0' && tok[0] <= '9') {
        ++pos;
        return OpTree::leaf(tok[0] - '0');
    }
    Op op;
    if (tok == "[MAX") op = Op::max;
    else if (tok == "[MIN") op = Op::min;
    else if (tok == "[MED") op = Op::med;
    else if (tok == "[SM") op = Op::sm;
    else if (tok == "]")
        fail(Errc::parse, "parse error at token " + std::to_string(pos) + ": unmatched ']'");
    else
        fail(Errc::parse, "parse error at token " + std::to_string(pos) + ": unknown token '" +
                              tok + "'");
    size_t open = pos++;
    std::vector<OpTree> children;
    while (true) {
        check(pos < tokens.size(), Errc::parse,
              "parse error at token " + std::to_string(pos) + ": '" + tokens[open] +
                  "' opened at " + std::to_string(open) + " is never closed");
        if (tokens[pos] == "]") {
            check(children.size() >= 2, Errc::parse,
                  "parse error at token " + std::to_string(pos) + ": operator at " +
                      std::to_string(open) + " has fewer than 2 arguments");
            ++pos;
            return OpTree::node(op, std::move(children));
        }
        children.push_back(parse_at(tokens, pos));
    }
}

}  // namespace

OpTree parse(const std::vector<std::string>& tokens) {
    size_t pos = 0;
    OpTree t = parse_at(tokens, pos);
    check(pos == tokens.size(), Errc::parse,
          "parse error at token " + std::to_string(pos) + ": trailing input");
    return t;
}

int64_t vocab_size() { return int64_t(kVocab.size()); }

int token_id(const std::string& token) {
    for (size_t i = 0; i < kVocab.size(); ++i)
        if (kVocab[i] == token) return int(i);
    fail(Errc::data, "unknown token '" + token + "'");
}

const std::string& token_name(int id) {
    check(id >= 0 && id < int(kVocab.size()), Errc::data, "token id out of range");
    return kVocab[size_t(id)];
}

void SplitSpec::validate() const {
    check(!name.empty(), Errc::config, "split needs a name");
    check(n_samples >= 1, Errc::config, "split '" + name + "': n_samples must be >= 1");
    check(depth_min >= 1 && depth_min <= depth_max, Errc::config,
          "split '" + name + "': depth range [" + std::to_string(depth_min) + "," +
              std::to_string(depth_max) + "] is empty or starts below 1");
    check(len_min >= 1 && len_min <= len_max, Errc::config,
          "split '" + name + "': length range is empty");
    check(max_args >= 2, Errc::config, "split '" + name + "': max_args must be >= 2");
    check(min_tokens_for_depth(depth_min) <= len_max, Errc::config,
          "split '" + name + "': a depth-" + std::to_string(depth_min) + " tree needs at least " +
              std::to_string(min_tokens_for_depth(depth_min)) + " tokens but len_max is " +
              std::to_string(len_max));
    // widest possible tree at depth_max must reach len_min
    double cap = 1;
    for (int i = 0; i < depth_max; ++i) cap = 2 + double(max_args) * cap;
    check(double(len_min) <= cap, Errc::config,
          "split '" + name + "': len_min " + std::to_string(len_min) +
              " exceeds the largest possible depth-" + std::to_string(depth_max) + " tree");
}

int64_t min_tokens_for_depth(int depth) { return 3 * int64_t(depth) + 1; }

namespace {

// Arena-backed sketch of a tree under construction. A depth-D spine is laid
// down first, then digit-append and leaf-split moves grow it to a target
// token count. Index-based so growth never invalidates references.
struct Sketch {
    struct Node {
        bool is_op = false;
        bool dead = false;  // leaf displaced by a spine operator
        int level = 0;      // number of operator ancestors
        std::vector<int> children;
    };
    std::vector<Node> nodes;
    std::vector<int> appendable;   // op nodes below max arity
    std::vector<int> splittable;   // digit leaves whose split stays within depth_max
    int64_t tokens = 0;

    int add_leaf(int level, int depth_max) {
        nodes.push_back({false, false, level, {}});
        tokens += 1;
        int id = int(nodes.size()) - 1;
        if (level + 1 <= depth_max) splittable.push_back(id);
        return id;
    }

    int add_op(int level) {
        nodes.push_back({true, false, level, {}});
        tokens += 2;
        return int(nodes.size()) - 1;
    }
};

int pick_and_remove(Rng& rng, std::vector<int>& pool) {
    size_t at = size_t(rng.uniform_int(0, int64_t(pool.size()) - 1));
    int id = pool[at];
    pool[at] = pool.back();
    pool.pop_back();
    return id;
}

OpTree to_tree(const Sketch& sk, int id, Rng& rng) {
    const Sketch::Node& n = sk.nodes[size_t(id)];
    if (!n.is_op) return OpTree::leaf(int(rng.uniform_int(0, 9)));
    std::vector<OpTree> children;
    for (int c : n.children) children.push_back(to_tree(sk, c, rng));
    return OpTree::node(Op(rng.uniform_int(0, 3)), std::move(children));
}

}  // namespace

OpTree generate_tree(Rng& rng, const SplitSpec& spec) {
    spec.validate();
    int depth_cap = spec.depth_max;
    while (min_tokens_for_depth(depth_cap) > spec.len_max) --depth_cap;

    for (int attempt = 0; attempt < kRetryCap; ++attempt) {
        int depth = int(rng.uniform_int(spec.depth_min, depth_cap));
        Sketch sk;

        // spine guaranteeing the target depth; the deep child sits at a
        // random position within each operator. Growth (below) also caps at
        // the sampled target, so realized depth == target and the per-split
        // depth mix stays near uniform.
        int prev = -1;
        for (int level = 0; level < depth; ++level) {
            int op = sk.add_op(level);
            if (prev >= 0) {
                auto& slots = sk.nodes[size_t(prev)].children;
                int& slot = slots[size_t(rng.uniform_int(0, int64_t(slots.size()) - 1))];
                sk.nodes[size_t(slot)].dead = true;
                slot = op;
                --sk.tokens;  // the op replaces a placeholder digit
            }
            int a = sk.add_leaf(level + 1, depth);
            int b = sk.add_leaf(level + 1, depth);
            sk.nodes[size_t(op)].children = {a, b};
            if (spec.max_args > 2) sk.appendable.push_back(op);
            prev = op;
        }
        int64_t lo = std::max(spec.len_min, sk.tokens);
        int64_t target = rng.uniform_int(lo, spec.len_max);

        auto leaf_is_live = [&](int id) { return !sk.nodes[size_t(id)].dead; };

        while (sk.tokens < target) {
            int64_t n_append = int64_t(sk.appendable.size());
            int64_t n_split = sk.tokens + 3 <= target ? int64_t(sk.splittable.size()) : 0;
            if (n_append + n_split == 0) break;
            bool do_split = rng.uniform_int(1, n_append + n_split) > n_append;
            if (do_split) {
                int id = pick_and_remove(rng, sk.splittable);
                if (!leaf_is_live(id)) continue;
                Sketch::Node& leaf = sk.nodes[size_t(id)];
                int level = leaf.level;
                leaf.is_op = true;
                sk.tokens += 1;  // digit -> op open + close
                int a = sk.add_leaf(level + 1, depth);
                int b = sk.add_leaf(level + 1, depth);
                sk.nodes[size_t(id)].children = {a, b};
                if (spec.max_args > 2) sk.appendable.push_back(id);
            } else {
                size_t at = size_t(rng.uniform_int(0, n_append - 1));
                int id = sk.appendable[size_t(at)];
                int leaf = sk.add_leaf(sk.nodes[size_t(id)].level + 1, depth);
                sk.nodes[size_t(id)].children.push_back(leaf);
                if (int64_t(sk.nodes[size_t(id)].children.size()) >= spec.max_args) {
                    sk.appendable[at] = sk.appendable.back();
                    sk.appendable.pop_back();
                }
            }
        }

        OpTree t = to_tree(sk, 0, rng);
        int64_t len = t.token_length();
        if (len >= spec.len_min && len <= spec.len_max && t.depth() >= spec.depth_min &&
            t.depth() <= spec.depth_max && t.max_args() <= spec.max_args)
            return t;
    }
    fail(Errc::data, "split '" + spec.name + "': gave up after " + std::to_string(kRetryCap) +
                         " attempts; constraints depth [" + std::to_string(spec.depth_min) + "," +
                         std::to_string(spec.depth_max) + "], length [" +
                         std::to_string(spec.len_min) + "," + std::to_string(spec.len_max) +
                         "], max_args " + std::to_string(spec.max_args));
}

Example to_example(const OpTree& tree) {
    Example ex;
    for (const std::string& tok : tokenize(tree)) ex.token_ids.push_back(token_id(tok));
    ex.label = evaluate(tree);
    ex.depth = tree.depth();
    ex.length = tree.token_length();
    ex.max_args = tree.max_args();
    return ex;
}

std::vector<SplitSpec> load_split_specs(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), Errc::io, "cannot open split spec file '" + path + "'");
    json doc;
    try {
        in >> doc;
    } catch (const std::exception& e) {
        fail(Errc::parse, "split spec '" + path + "': " + e.what());
    }
    check(doc.is_array() && !doc.empty(), Errc::config,
          "split spec '" + path + "' must be a non-empty JSON array");
    std::vector<SplitSpec> specs;
    for (const json& entry : doc) {
        SplitSpec s;
        try {
            s.name = entry.at("name").get<std::string>();
            s.n_samples = entry.at("n_samples").get<int64_t>();
            s.len_min = entry.at("length").at(0).get<int64_t>();
            s.len_max = entry.at("length").at(1).get<int64_t>();
            s.depth_min = entry.at("depth").at(0).get<int>();
            s.depth_max = entry.at("depth").at(1).get<int>();
            s.max_args = entry.at("max_args").get<int64_t>();
        } catch (const std::exception& e) {
            fail(Errc::config, "split spec '" + path + "': " + e.what());
        }
        s.validate();
        specs.push_back(std::move(s));
    }
    return specs;
}

namespace {

uint64_t name_tag(const std::string& name) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (char c : name) {
        h ^= uint64_t(uint8_t(c));
        h *= 1099511628211ull;
    }
    return h;
}

json hist_to_json(const std::map<int64_t, int64_t>& hist) {
    json out = json::object();
    for (const auto& [k, v] : hist) out[std::to_string(k)] = v;
    return out;
}

}  // namespace

BuildReport build_splits(const std::vector<SplitSpec>& specs, uint64_t seed,
                         const std::string& out_dir) {
    check(!specs.empty(), Errc::config, "no splits to build");
    for (size_t i = 0; i < specs.size(); ++i)
        for (size_t j = i + 1; j < specs.size(); ++j)
            check(specs[i].name != specs[j].name, Errc::config,
                  "duplicate split name '" + specs[i].name + "'");

    std::filesystem::create_directories(out_dir);
    json manifest;
    manifest["seed"] = seed;
    manifest["splits"] = json::array();
    BuildReport report;

    for (const SplitSpec& spec : specs) {
        spec.validate();
        Rng rng = Rng(seed).fork(name_tag(spec.name));
        std::string path = out_dir + "/" + spec.name + ".jsonl";
        std::ofstream out(path, std::ios::binary);
        check(out.good(), Errc::io, "cannot write shard '" + path + "'");

        std::vector<int64_t> label_hist(10, 0);
        std::map<int64_t, int64_t> depth_hist, length_hist, args_hist;
        for (int64_t i = 0; i < spec.n_samples; ++i) {
            OpTree tree = generate_tree(rng, spec);
            std::vector<std::string> tokens = tokenize(tree);
            int label = evaluate(tree);

            // independent re-verification of the emitted record
            OpTree reparsed = parse(tokens);
            check(evaluate(reparsed) == label, Errc::internal,
                  "label mismatch while emitting '" + spec.name + "' sample " +
                      std::to_string(i));
            int depth = tree.depth();
            int64_t length = tree.token_length();
            int64_t args = tree.max_args();
            check(depth >= spec.depth_min && depth <= spec.depth_max && length >= spec.len_min &&
                      length <= spec.len_max && args <= spec.max_args,
                  Errc::internal, "constraint violation while emitting '" + spec.name + "'");

            json line;
            line["tokens"] = tokens;
            line["label"] = label;
            line["depth"] = depth;
            line["length"] = length;
            line["max_args"] = args;
            out << line.dump() << "\n";

            ++label_hist[size_t(label)];
            ++depth_hist[depth];
            ++length_hist[length];
            ++args_hist[args];
        }
        out.flush();
        check(out.good(), Errc::io, "write failure on shard '" + path + "'");

        json entry;
        entry["name"] = spec.name;
        entry["path"] = path;
        entry["n_samples"] = spec.n_samples;
        entry["spec"] = {{"length", {spec.len_min, spec.len_max}},
                         {"depth", {spec.depth_min, spec.depth_max}},
                         {"max_args", spec.max_args}};
        entry["label_hist"] = label_hist;
        entry["depth_hist"] = hist_to_json(depth_hist);
        entry["length_hist"] = hist_to_json(length_hist);
        entry["max_args_hist"] = hist_to_json(args_hist);
        manifest["splits"].push_back(entry);
        report.shard_paths.push_back(path);
    }

    report.manifest_path = out_dir + "/manifest.json";
    std::ofstream mout(report.manifest_path, std::ios::binary);
    check(mout.good(), Errc::io, "cannot write manifest '" + report.manifest_path + "'");
    mout << manifest.dump(2) << "\n";
    mout.flush();
    check(mout.good(), Errc::io, "write failure on manifest");
    return report;
}

std::vector<Example> load_shard(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), Errc::io, "cannot open shard '" + path + "'");
    std::vector<Example> out;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json doc;
        try {
            doc = json::parse(line);
        } catch (const std::exception& e) {
            fail(Errc::parse, "shard '" + path + "' line " + std::to_string(lineno) + ": " +
                                  e.what());
        }
        Example ex;
        try {
            for (const json& t : doc.at("tokens"))
                ex.token_ids.push_back(token_id(t.get<std::string>()));
            ex.label = doc.at("label").get<int>();
            ex.depth = doc.value("depth", 0);
            ex.length = doc.value("length", int64_t(ex.token_ids.size()));
            ex.max_args = doc.value("max_args", int64_t(0));
        } catch (const Error&) {
            throw;
        } catch (const std::exception& e) {
            fail(Errc::data, "shard '" + path + "' line " + std::to_string(lineno) + ": " +
                                 e.what());
        }
        check(ex.label >= 0 && ex.label <= 9, Errc::data,
              "shard '" + path + "' line " + std::to_string(lineno) + ": label out of range");
        check(!ex.token_ids.empty(), Errc::data,
              "shard '" + path + "' line " + std::to_string(lineno) + ": empty token list");
        out.push_back(std::move(ex));
    }
    check(!out.empty(), Errc::data, "shard '" + path + "' holds no examples");
    return out;
}

}  // namespace recseq::listops
