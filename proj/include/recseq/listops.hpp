// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "recseq/common.hpp"

namespace recseq::listops {

enum class Op { max, min, med, sm };

const char* op_token(Op op);  // "[MAX" etc.

// nested operator tree; leaves are single digits 0-9
struct OpTree {
    bool is_leaf = true;
    int digit = 0;
    Op op = Op::max;
    std::vector<OpTree> children;

    static OpTree leaf(int digit);
    static OpTree node(Op op, std::vector<OpTree> children);

    int depth() const;         // max number of nested operators
    int64_t token_length() const;
    int64_t max_args() const;  // widest operator arity in the tree
    bool operator==(const OpTree& other) const;
};

// MAX/MIN, lower-median MED, and SM = sum mod 10
int evaluate(const OpTree& tree);

std::vector<std::string> tokenize(const OpTree& tree);
// rejects malformed streams with the index of the first offending token
OpTree parse(const std::vector<std::string>& tokens);

// token vocabulary: id 0 is the pad symbol
int64_t vocab_size();
int token_id(const std::string& token);
const std::string& token_name(int id);

struct SplitSpec {
    std::string name;
    int64_t n_samples = 0;
    int64_t len_min = 1, len_max = 0;
    int depth_min = 1, depth_max = 0;
    int64_t max_args = 2;

    void validate() const;  // documented feasibility check
};

// smallest serialization of a depth-D tree: [OP [OP ... d d] d] = 3D+1 tokens
int64_t min_tokens_for_depth(int depth);

// A depth target is drawn uniformly from the feasible range and laid down as
// a spine; uniform digit-append / leaf-split moves then grow the tree to a
// length target drawn uniformly from the length range. Operators and digits
// are uniform. A retry cap guards the residual rejection step.
OpTree generate_tree(Rng& rng, const SplitSpec& spec);

struct Example {
    std::vector<int> token_ids;
    int label = 0;
    int depth = 0;
    int64_t length = 0;
    int64_t max_args = 0;
};

Example to_example(const OpTree& tree);

std::vector<SplitSpec> load_split_specs(const std::string& path);

struct BuildReport {
    std::string manifest_path;
    std::vector<std::string> shard_paths;
};

// one JSONL shard per spec plus a manifest with seed, counts and histograms;
// every emitted label is re-verified by an independent parse+evaluate pass
BuildReport build_splits(const std::vector<SplitSpec>& specs, uint64_t seed,
                         const std::string& out_dir);

std::vector<Example> load_shard(const std::string& path);

}  // namespace recseq::listops
