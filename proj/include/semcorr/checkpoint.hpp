#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "semcorr/binio.hpp"
#include "semcorr/errors.hpp"
#include "semcorr/feature.hpp"
#include "semcorr/losses.hpp"
#include "semcorr/tensor.hpp"

namespace semcorr {

// CKPT v1: magic, version, record count, then named tensor records
// (u32 name length, name bytes, embedded tensor). Holds both encoder branches
// plus the negative queue so training state survives a restart.

struct Checkpoint {
    EncoderParams params;
    NegativeQueue queue{1, 1};
};

inline void save_checkpoint(const std::filesystem::path& path, EncoderParams& params,
                            const NegativeQueue& queue) {
    std::vector<std::pair<std::string, Tensor>> records;
    for (auto& [name, tensor] : params.named_tensors()) records.emplace_back(name, *tensor);
    Tensor meta({1, 2});
    meta.at(0, 0) = float(queue.capacity());
    meta.at(0, 1) = float(queue.dim());
    records.emplace_back("queue_meta", std::move(meta));
    if (queue.size() > 0) records.emplace_back("queue_entries", queue.as_matrix());

    atomic_write_file(path, [&](std::ostream& out) {
        binary_writer w(out);
        w.bytes("CKPT", 4);
        w.u32(1);
        w.u32(std::uint32_t(records.size()));
        for (const auto& [name, tensor] : records) {
            w.u32(std::uint32_t(name.size()));
            w.bytes(name.data(), name.size());
            write_fmap(w, tensor);
        }
    });
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open checkpoint " + path.string());
    binary_reader r(in, path.string());
    r.expect_magic("CKPT");
    if (std::uint32_t v = r.u32("version"); v != 1)
        throw parse_error(r.offset(), "unsupported checkpoint version " + std::to_string(v));
    std::uint32_t n = r.u32("record count");

    std::map<std::string, Tensor> records;
    for (std::uint32_t i = 0; i < n; ++i) {
        std::uint32_t len = r.u32("name length");
        if (len == 0 || len > 4096)
            throw parse_error(r.offset(), "implausible record name length");
        std::string name(len, '\0');
        r.bytes(name.data(), len, "record name");
        records.emplace(std::move(name), read_fmap(r));
    }

    Checkpoint ck;
    for (auto& [name, tensor] : ck.params.named_tensors()) {
        auto it = records.find(name);
        if (it == records.end())
            throw parse_error(0, "checkpoint " + path.string() + " lacks tensor '" + name + "'");
        *tensor = it->second;
    }
    auto meta = records.find("queue_meta");
    if (meta == records.end() || meta->second.rows() != 1 || meta->second.cols() != 2)
        throw parse_error(0, "checkpoint " + path.string() + " lacks a valid queue_meta");
    std::size_t capacity = std::size_t(meta->second.at(0, 0));
    std::size_t dim = std::size_t(meta->second.at(0, 1));
    ck.queue = NegativeQueue(capacity, dim);
    if (auto entries = records.find("queue_entries"); entries != records.end())
        ck.queue = NegativeQueue::from_matrix(capacity, entries->second);
    return ck;
}

}  // namespace semcorr
