#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "semcorr/errors.hpp"

namespace semcorr {

inline std::uint32_t byteswap32(std::uint32_t v) {
    return ((v & 0xff000000u) >> 24) | ((v & 0x00ff0000u) >> 8) |
           ((v & 0x0000ff00u) << 8) | ((v & 0x000000ffu) << 24);
}

inline std::uint32_t to_le32(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) return byteswap32(v);
    return v;
}

inline std::uint32_t from_le32(std::uint32_t v) { return to_le32(v); }

// Tracks the read offset so parse errors can report where the file went bad.
class binary_reader {
  public:
    binary_reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

    std::size_t offset() const { return offset_; }

    std::uint32_t u32(const char* what) {
        std::uint32_t raw = 0;
        read(&raw, sizeof raw, what);
        return from_le32(raw);
    }

    float f32(const char* what) {
        std::uint32_t raw = 0;
        read(&raw, sizeof raw, what);
        raw = from_le32(raw);
        return std::bit_cast<float>(raw);
    }

    void bytes(void* dst, std::size_t n, const char* what) { read(dst, n, what); }

    void f32_array(float* dst, std::size_t count, const char* what) {
        read(dst, count * sizeof(float), what);
        if constexpr (std::endian::native == std::endian::big) {
            for (std::size_t i = 0; i < count; ++i) {
                std::uint32_t raw;
                std::memcpy(&raw, dst + i, 4);
                raw = byteswap32(raw);
                std::memcpy(dst + i, &raw, 4);
            }
        }
    }

    void expect_magic(const char magic[4]) {
        char got[4] = {0, 0, 0, 0};
        std::size_t at = offset_;
        read(got, 4, "magic bytes");
        if (std::memcmp(got, magic, 4) != 0) {
            throw parse_error(at, std::string("bad magic, expected \"") +
                                      std::string(magic, 4) + "\" got \"" +
                                      std::string(got, 4) + "\" in " + source_);
        }
    }

  private:
    void read(void* dst, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw parse_error(offset_, std::string("truncated while reading ") + what +
                                           " (expected " + std::to_string(n) + " bytes, got " +
                                           std::to_string(in_.gcount()) + ") in " + source_);
        }
        offset_ += n;
    }

    std::istream& in_;
    std::string source_;
    std::size_t offset_ = 0;
};

class binary_writer {
  public:
    explicit binary_writer(std::ostream& out) : out_(out) {}

    void u32(std::uint32_t v) {
        std::uint32_t raw = to_le32(v);
        out_.write(reinterpret_cast<const char*>(&raw), sizeof raw);
    }

    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

    void bytes(const void* src, std::size_t n) {
        out_.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
    }

    void f32_array(const float* src, std::size_t count) {
        if constexpr (std::endian::native == std::endian::little) {
            bytes(src, count * sizeof(float));
        } else {
            for (std::size_t i = 0; i < count; ++i) f32(src[i]);
        }
    }

  private:
    std::ostream& out_;
};

// All artifact writes go through here: write to a sibling temp file, then rename.
// A killed run never leaves a partial file at the destination path.
inline void atomic_write_file(const std::filesystem::path& dest,
                              const std::function<void(std::ostream&)>& emit) {
    namespace fs = std::filesystem;
    fs::path dir = dest.parent_path();
    if (!dir.empty()) {
        std::error_code ec;
        fs::create_directories(dir, ec);
    }
    fs::path tmp = dest;
    tmp += ".tmp";
    try {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot open " + tmp.string() + " for writing");
        emit(out);
        out.flush();
        if (!out) throw io_error("write failed for " + tmp.string());
    } catch (...) {
        std::error_code ec;
        fs::remove(tmp, ec);
        throw;
    }
    std::error_code ec;
    fs::rename(tmp, dest, ec);
    if (ec) {
        fs::remove(tmp);
        throw io_error("rename " + tmp.string() + " -> " + dest.string() + ": " + ec.message());
    }
}

}  // namespace semcorr
