#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "semcorr/binio.hpp"
#include "semcorr/errors.hpp"
#include "semcorr/feature.hpp"

namespace semcorr {

// Binary PGM (P5), one byte per pixel, row-major from the top-left.
inline void write_pgm(const std::filesystem::path& path, std::size_t width,
                      std::size_t height, const std::vector<std::uint8_t>& gray) {
    if (width == 0 || height == 0) throw validation_error("image needs positive extents");
    if (gray.size() != width * height)
        throw validation_error("pgm buffer holds " + std::to_string(gray.size()) +
                               " bytes, expected " + std::to_string(width * height));
    atomic_write_file(path, [&](std::ostream& out) {
        out << "P5\n" << width << " " << height << "\n255\n";
        out.write(reinterpret_cast<const char*>(gray.data()),
                  std::streamsize(gray.size()));
    });
}

// Binary PPM (P6), three bytes per pixel.
inline void write_ppm(const std::filesystem::path& path, std::size_t width,
                      std::size_t height, const std::vector<std::uint8_t>& rgb) {
    if (width == 0 || height == 0) throw validation_error("image needs positive extents");
    if (rgb.size() != width * height * 3)
        throw validation_error("ppm buffer holds " + std::to_string(rgb.size()) +
                               " bytes, expected " + std::to_string(width * height * 3));
    atomic_write_file(path, [&](std::ostream& out) {
        out << "P6\n" << width << " " << height << "\n255\n";
        out.write(reinterpret_cast<const char*>(rgb.data()), std::streamsize(rgb.size()));
    });
}

inline std::uint8_t to_byte(double v) {
    return std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void write_attention_pgm(const std::filesystem::path& path, const AttentionMap& att) {
    std::vector<std::uint8_t> gray(att.rescaled.size());
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = to_byte(att.rescaled[i]);
    write_pgm(path, att.width, att.height, gray);
}

namespace detail {

// Grayscale canvas of a stack's attention, scaled up to image pixels.
inline void blit_attention(std::vector<std::uint8_t>& rgb, std::size_t canvas_w,
                           std::size_t x_off, const FeatureStack& s) {
    AttentionMap att = attention_map(s);
    for (std::size_t y = 0; y < s.img_h; ++y)
        for (std::size_t x = 0; x < s.img_w; ++x) {
            std::size_t cy = std::min(y * att.height / s.img_h, att.height - 1);
            std::size_t cx = std::min(x * att.width / s.img_w, att.width - 1);
            std::uint8_t v = to_byte(att.rescaled[cy * att.width + cx]);
            std::size_t o = (y * canvas_w + x_off + x) * 3;
            rgb[o] = rgb[o + 1] = rgb[o + 2] = v;
        }
}

inline void stamp(std::vector<std::uint8_t>& rgb, std::size_t canvas_w, std::size_t canvas_h,
                  double px, double py, std::size_t x_off,
                  const std::array<std::uint8_t, 3>& color) {
    long cx = std::lround(px) + long(x_off), cy = std::lround(py);
    for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
            long x = cx + dx, y = cy + dy;
            if (x < 0 || y < 0 || std::size_t(x) >= canvas_w || std::size_t(y) >= canvas_h)
                continue;
            std::size_t o = (std::size_t(y) * canvas_w + std::size_t(x)) * 3;
            rgb[o] = color[0];
            rgb[o + 1] = color[1];
            rgb[o + 2] = color[2];
        }
}

}  // namespace detail

// Side-by-side attention canvases: source keypoints in red on the left,
// predictions in green on the right, ground truth (when given) in blue.
inline void write_match_overlay(const std::filesystem::path& path, const FeatureStack& src,
                                const FeatureStack& trg,
                                const std::vector<std::array<double, 2>>& src_kps,
                                const std::vector<std::array<double, 2>>& pred_kps,
                                const std::vector<std::array<double, 2>>* gt_kps = nullptr) {
    std::size_t w = src.img_w + trg.img_w, h = std::max(src.img_h, trg.img_h);
    std::vector<std::uint8_t> rgb(w * h * 3, 0);
    detail::blit_attention(rgb, w, 0, src);
    detail::blit_attention(rgb, w, src.img_w, trg);
    for (const auto& kp : src_kps) detail::stamp(rgb, w, h, kp[0], kp[1], 0, {230, 40, 40});
    for (const auto& kp : pred_kps)
        detail::stamp(rgb, w, h, kp[0], kp[1], src.img_w, {40, 230, 40});
    if (gt_kps)
        for (const auto& kp : *gt_kps)
            detail::stamp(rgb, w, h, kp[0], kp[1], src.img_w, {60, 60, 230});
    write_ppm(path, w, h, rgb);
}

}  // namespace semcorr
