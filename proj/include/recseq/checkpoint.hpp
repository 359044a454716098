// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "recseq/tensor.hpp"

namespace recseq {

// Single-file checkpoint: a config snapshot, then a text header with one
// `name shape dtype` line per tensor, then the raw little-endian values in
// header order. Round-trips bit-exactly.
struct Checkpoint {
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace recseq
