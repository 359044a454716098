// SPDX-License-Identifier: Apache-2.0
#include "recseq/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace recseq {

namespace {

constexpr const char* kMagic = "recseq-checkpoint v1";

std::string shape_token(const Shape& s) {
    if (s.empty()) return "-";
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out;
}

Shape parse_shape_token(const std::string& tok) {
    if (tok == "-") return {};
    Shape s;
    size_t start = 0;
    while (start <= tok.size()) {
        size_t end = tok.find('x', start);
        if (end == std::string::npos) end = tok.size();
        check(end > start, Errc::parse, "checkpoint: bad shape token '" + tok + "'");
        s.push_back(std::stoll(tok.substr(start, end - start)));
        start = end + 1;
        if (end == tok.size()) break;
    }
    return s;
}

template <class T>
void write_values(std::ofstream& out, const Tensor& t) {
    std::vector<T> buf(size_t(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) buf[size_t(i)] = T(t.data()[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * sizeof(T)));
}

template <class T>
void read_values(std::ifstream& in, Tensor& t) {
    std::vector<T> buf(size_t(t.numel()));
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(T)));
    check(in.good() || in.eof(), Errc::io, "checkpoint: truncated tensor payload");
    check(in.gcount() == std::streamsize(buf.size() * sizeof(T)), Errc::parse,
          "checkpoint: truncated tensor payload");
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = double(buf[size_t(i)]);
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), Errc::io, "cannot write checkpoint '" + path + "'");
    out << kMagic << "\n";
    out << "config " << ckpt.config_text.size() << "\n";
    out.write(ckpt.config_text.data(), std::streamsize(ckpt.config_text.size()));
    out << "\ntensors " << ckpt.tensors.size() << "\n";
    for (const auto& [name, t] : ckpt.tensors) {
        check(name.find(' ') == std::string::npos && name.find('\n') == std::string::npos,
              Errc::invalid_arg, "tensor name '" + name + "' cannot hold whitespace");
        out << name << " " << shape_token(t.shape()) << " " << dtype_name(t.dtype()) << "\n";
    }
    for (const auto& [name, t] : ckpt.tensors) {
        (void)name;
        if (t.dtype() == Dtype::f32)
            write_values<float>(out, t);
        else
            write_values<double>(out, t);
    }
    out.flush();
    check(out.good(), Errc::io, "write failure on checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), Errc::io, "cannot open checkpoint '" + path + "'");
    std::string line;
    std::getline(in, line);
    check(line == kMagic, Errc::parse, "'" + path + "' is not a checkpoint file");

    Checkpoint ckpt;
    std::getline(in, line);
    std::istringstream cfg_hdr(line);
    std::string word;
    size_t cfg_len = 0;
    cfg_hdr >> word >> cfg_len;
    check(word == "config", Errc::parse, "checkpoint: expected config section");
    ckpt.config_text.resize(cfg_len);
    in.read(ckpt.config_text.data(), std::streamsize(cfg_len));
    check(in.gcount() == std::streamsize(cfg_len), Errc::parse, "checkpoint: truncated config");
    std::getline(in, line);  // trailing newline after the config block

    std::getline(in, line);
    std::istringstream tens_hdr(line);
    size_t count = 0;
    tens_hdr >> word >> count;
    check(word == "tensors", Errc::parse, "checkpoint: expected tensor section");

    std::vector<std::pair<std::string, std::pair<Shape, Dtype>>> headers;
    for (size_t i = 0; i < count; ++i) {
        std::getline(in, line);
        std::istringstream hdr(line);
        std::string name, shape_tok, dtype_tok;
        hdr >> name >> shape_tok >> dtype_tok;
        check(!name.empty() && !dtype_tok.empty(), Errc::parse,
              "checkpoint: malformed tensor header '" + line + "'");
        headers.emplace_back(name,
                             std::make_pair(parse_shape_token(shape_tok),
                                            dtype_from_name(dtype_tok)));
    }
    for (auto& [name, meta] : headers) {
        Tensor t(meta.first, meta.second);
        if (meta.second == Dtype::f32)
            read_values<float>(in, t);
        else
            read_values<double>(in, t);
        ckpt.tensors.emplace_back(name, std::move(t));
    }
    return ckpt;
}

}  // namespace recseq
