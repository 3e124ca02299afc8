#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "semcorr/binio.hpp"
#include "semcorr/errors.hpp"

namespace semcorr {

// Dense row-major f32 tensor. Serialized form is the FMAP record:
//   magic "FMAP", u32 version=1, u32 ndim, ndim x u32 dims, f32 LE payload.
struct Tensor {
    std::vector<std::size_t> dims;
    std::vector<float> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> d, float fill = 0.0f) : dims(std::move(d)) {
        data.assign(numel_of(dims), fill);
    }

    Tensor(std::vector<std::size_t> d, std::vector<float> values)
        : dims(std::move(d)), data(std::move(values)) {
        if (data.size() != numel_of(dims))
            throw validation_error("tensor data length " + std::to_string(data.size()) +
                                   " does not match dims (numel " +
                                   std::to_string(numel_of(dims)) + ")");
    }

    static std::size_t numel_of(const std::vector<std::size_t>& d) {
        if (d.empty()) return 0;
        std::size_t n = 1;
        for (std::size_t e : d) {
            if (e == 0) throw validation_error("tensor extent must be positive");
            n *= e;
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }

    // 2-D accessors; most of the pipeline works on matrices.
    std::size_t rows() const { return dims.empty() ? 0 : dims[0]; }
    std::size_t cols() const { return dims.size() < 2 ? 1 : dims[1]; }

    float& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    float at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
        os << "]";
        return os.str();
    }
};

inline Tensor matrix(std::size_t r, std::size_t c, std::initializer_list<float> v) {
    return Tensor({r, c}, std::vector<float>(v));
}

inline Tensor identity_matrix(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
    return t;
}

inline void write_fmap(binary_writer& w, const Tensor& t) {
    w.bytes("FMAP", 4);
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(t.dims.size()));
    for (std::size_t d : t.dims) w.u32(static_cast<std::uint32_t>(d));
    w.f32_array(t.data.data(), t.data.size());
}

inline Tensor read_fmap(binary_reader& r) {
    r.expect_magic("FMAP");
    std::size_t at = r.offset();
    std::uint32_t version = r.u32("version");
    if (version != 1)
        throw parse_error(at, "unsupported FMAP version " + std::to_string(version));
    at = r.offset();
    std::uint32_t ndim = r.u32("ndim");
    if (ndim == 0 || ndim > 8) throw parse_error(at, "ndim out of range: " + std::to_string(ndim));
    std::vector<std::size_t> dims(ndim);
    for (auto& d : dims) {
        at = r.offset();
        d = r.u32("dim extent");
        if (d == 0) throw parse_error(at, "zero dim extent");
    }
    Tensor t(dims);
    r.f32_array(t.data.data(), t.data.size(), "f32 payload");
    return t;
}

inline void save_fmap(const std::filesystem::path& path, const Tensor& t) {
    atomic_write_file(path, [&](std::ostream& out) {
        binary_writer w(out);
        write_fmap(w, t);
    });
}

inline Tensor load_fmap(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    binary_reader r(in, path.string());
    return read_fmap(r);
}

}  // namespace semcorr
