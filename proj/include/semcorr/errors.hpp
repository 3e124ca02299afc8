#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace semcorr {

// Bad arguments, violated preconditions, malformed config. CLI maps these to exit 1.
struct validation_error : std::invalid_argument {
    explicit validation_error(const std::string& msg) : std::invalid_argument(msg) {}
};

// Filesystem trouble: missing files, failed writes. CLI maps these to exit 2.
struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed binary container. Carries the byte offset where parsing stopped.
struct parse_error : std::runtime_error {
    std::size_t offset;
    parse_error(std::size_t byte_offset, const std::string& msg)
        : std::runtime_error("at byte " + std::to_string(byte_offset) + ": " + msg),
          offset(byte_offset) {}
};

// Graph construction or evaluation failure; names the offending node.
struct graph_error : std::runtime_error {
    explicit graph_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace semcorr
