#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "semcorr/errors.hpp"
#include "semcorr/tensor.hpp"

namespace semcorr {

// One layer's dense feature grid: C channels over an H x W spatial grid,
// stored channel-major ([c][y][x]) to match the FMAP record layout {C,H,W}.
struct FeatureMap {
    std::size_t channels = 0, height = 0, width = 0;
    std::vector<float> data;

    FeatureMap() = default;
    FeatureMap(std::size_t c, std::size_t h, std::size_t w)
        : channels(c), height(h), width(w), data(c * h * w, 0.0f) {}

    float& at(std::size_t c, std::size_t y, std::size_t x) {
        return data[(c * height + y) * width + x];
    }
    float at(std::size_t c, std::size_t y, std::size_t x) const {
        return data[(c * height + y) * width + x];
    }

    std::size_t cells() const { return height * width; }

    // (HW x C) matrix, rows enumerate the grid row-major.
    Tensor position_matrix() const {
        Tensor m({cells(), channels});
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x)
                for (std::size_t c = 0; c < channels; ++c)
                    m.at(y * width + x, c) = at(c, y, x);
        return m;
    }

    static FeatureMap from_position_matrix(const Tensor& m, std::size_t h, std::size_t w) {
        if (m.rows() != h * w)
            throw validation_error("position matrix rows " + std::to_string(m.rows()) +
                                   " do not cover a " + std::to_string(h) + "x" +
                                   std::to_string(w) + " grid");
        FeatureMap f(m.cols(), h, w);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t c = 0; c < m.cols(); ++c)
                    f.at(c, y, x) = m.at(y * w + x, c);
        return f;
    }

    Tensor to_tensor() const { return Tensor({channels, height, width}, data); }

    static FeatureMap from_tensor(const Tensor& t) {
        if (t.dims.size() != 3)
            throw validation_error("feature map tensor must be CxHxW, got " + t.shape_str());
        FeatureMap f(t.dims[0], t.dims[1], t.dims[2]);
        f.data = t.data;
        return f;
    }
};

struct FeatureStack {
    std::vector<FeatureMap> layers;  // index 0 is shallowest
    std::size_t img_w = 0, img_h = 0;
    std::string source_id;
};

// FSTK container: magic "FSTK", u32 version=1, u32 layer_count, u32 img_w,
// u32 img_h, then layer_count embedded FMAP records.
inline void save_feature_stack(const std::filesystem::path& path, const FeatureStack& s) {
    if (s.layers.empty()) throw validation_error("feature stack needs at least one layer");
    atomic_write_file(path, [&](std::ostream& out) {
        binary_writer w(out);
        w.bytes("FSTK", 4);
        w.u32(1);
        w.u32(static_cast<std::uint32_t>(s.layers.size()));
        w.u32(static_cast<std::uint32_t>(s.img_w));
        w.u32(static_cast<std::uint32_t>(s.img_h));
        for (const auto& layer : s.layers) write_fmap(w, layer.to_tensor());
    });
}

inline FeatureStack load_feature_stack(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    binary_reader r(in, path.string());
    r.expect_magic("FSTK");
    std::size_t at = r.offset();
    std::uint32_t version = r.u32("version");
    if (version != 1) throw parse_error(at, "unsupported FSTK version " + std::to_string(version));
    at = r.offset();
    std::uint32_t layer_count = r.u32("layer count");
    if (layer_count == 0) throw parse_error(at, "stack has zero layers");
    FeatureStack s;
    s.img_w = r.u32("image width");
    s.img_h = r.u32("image height");
    s.source_id = path.stem().string();
    for (std::uint32_t i = 0; i < layer_count; ++i)
        s.layers.push_back(FeatureMap::from_tensor(read_fmap(r)));
    return s;
}

// Bilinear resize, align-corners convention: dst cell d maps to source
// coordinate d*(S-1)/(D-1). Exact for affine ramps, which the tests exploit.
inline FeatureMap bilinear_resize(const FeatureMap& f, std::size_t out_h, std::size_t out_w) {
    FeatureMap out(f.channels, out_h, out_w);
    auto src_coord = [](std::size_t d, std::size_t dst_sz, std::size_t src_sz) {
        if (dst_sz <= 1 || src_sz <= 1) return 0.0;
        return double(d) * double(src_sz - 1) / double(dst_sz - 1);
    };
    for (std::size_t y = 0; y < out_h; ++y) {
        double sy = src_coord(y, out_h, f.height);
        std::size_t y0 = std::min(std::size_t(sy), f.height - 1);
        std::size_t y1 = std::min(y0 + 1, f.height - 1);
        double fy = sy - double(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            double sx = src_coord(x, out_w, f.width);
            std::size_t x0 = std::min(std::size_t(sx), f.width - 1);
            std::size_t x1 = std::min(x0 + 1, f.width - 1);
            double fx = sx - double(x0);
            for (std::size_t c = 0; c < f.channels; ++c) {
                double top = (1.0 - fx) * f.at(c, y0, x0) + fx * f.at(c, y0, x1);
                double bot = (1.0 - fx) * f.at(c, y1, x0) + fx * f.at(c, y1, x1);
                out.at(c, y, x) = static_cast<float>((1.0 - fy) * top + fy * bot);
            }
        }
    }
    return out;
}

inline void l2_normalize_positions(FeatureMap& f) {
    for (std::size_t y = 0; y < f.height; ++y)
        for (std::size_t x = 0; x < f.width; ++x) {
            double s = 0.0;
            for (std::size_t c = 0; c < f.channels; ++c) {
                double v = f.at(c, y, x);
                s += v * v;
            }
            double nrm = std::sqrt(s);
            if (nrm == 0.0) continue;  // all-zero positions stay zero
            for (std::size_t c = 0; c < f.channels; ++c)
                f.at(c, y, x) = static_cast<float>(f.at(c, y, x) / nrm);
        }
}

// Resize every selected layer to the target grid, concatenate channels, then
// L2-normalize each spatial position so correlation becomes cosine similarity.
inline FeatureMap construct_hyperpixel(const FeatureStack& stack,
                                       const std::vector<std::size_t>& layer_ids,
                                       std::size_t target_h, std::size_t target_w) {
    if (layer_ids.empty()) throw validation_error("hyperpixel needs a nonempty layer set");
    std::size_t total_c = 0;
    for (std::size_t id : layer_ids) {
        if (id >= stack.layers.size())
            throw validation_error("layer index " + std::to_string(id) + " out of range " +
                                   std::to_string(stack.layers.size()));
        total_c += stack.layers[id].channels;
    }
    FeatureMap out(total_c, target_h, target_w);
    std::size_t c_off = 0;
    for (std::size_t id : layer_ids) {
        FeatureMap r = bilinear_resize(stack.layers[id], target_h, target_w);
        for (std::size_t c = 0; c < r.channels; ++c)
            for (std::size_t y = 0; y < target_h; ++y)
                for (std::size_t x = 0; x < target_w; ++x)
                    out.at(c_off + c, y, x) = r.at(c, y, x);
        c_off += r.channels;
    }
    l2_normalize_positions(out);
    return out;
}

// Reference size defaults to the shallowest (lowest-index) selected layer.
inline FeatureMap construct_hyperpixel(const FeatureStack& stack,
                                       const std::vector<std::size_t>& layer_ids) {
    if (layer_ids.empty()) throw validation_error("hyperpixel needs a nonempty layer set");
    std::size_t ref = *std::min_element(layer_ids.begin(), layer_ids.end());
    if (ref >= stack.layers.size())
        throw validation_error("layer index " + std::to_string(ref) + " out of range");
    return construct_hyperpixel(stack, layer_ids, stack.layers[ref].height,
                                stack.layers[ref].width);
}

// ---------------------------------------------------------------------------
// Encoder heads: per-pixel projection plus pooled image projection, each a
// bias-free linear -> max(0,.) -> linear. Query and key copies share shapes.

struct HeadWeights {
    Tensor w1;  // (in x hid)
    Tensor w2;  // (hid x out)
};

struct EncoderBranch {
    HeadWeights pixel;
    HeadWeights image;
};

enum class Branch { query, key };

struct EncoderParams {
    EncoderBranch query;
    EncoderBranch key;

    const EncoderBranch& branch(Branch b) const { return b == Branch::query ? query : key; }
    EncoderBranch& branch(Branch b) { return b == Branch::query ? query : key; }

    // Iteration order is fixed; the optimizer and momentum update rely on it.
    std::vector<std::pair<std::string, Tensor*>> named_tensors() {
        return {{"pixel_w1", &query.pixel.w1}, {"pixel_w2", &query.pixel.w2},
                {"image_w1", &query.image.w1}, {"image_w2", &query.image.w2},
                {"key_pixel_w1", &key.pixel.w1}, {"key_pixel_w2", &key.pixel.w2},
                {"key_image_w1", &key.image.w1}, {"key_image_w2", &key.image.w2}};
    }
};

inline Tensor glorot_tensor(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(rows + cols)));
    Tensor t({rows, cols});
    for (auto& v : t.data) v = static_cast<float>(dist(rng));
    return t;
}

inline EncoderParams make_encoder_params(std::size_t c_in, std::size_t c_hid, std::size_t c_out,
                                         std::size_t img_hid, std::size_t img_dim,
                                         std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    EncoderParams p;
    p.query.pixel.w1 = glorot_tensor(rng, c_in, c_hid);
    p.query.pixel.w2 = glorot_tensor(rng, c_hid, c_out);
    p.query.image.w1 = glorot_tensor(rng, c_in, img_hid);
    p.query.image.w2 = glorot_tensor(rng, img_hid, img_dim);
    p.key = p.query;  // key branch starts as an exact copy
    return p;
}

namespace detail {
// x (1 x in) -> relu(x w1) w2, double accumulation
inline std::vector<double> head_forward(const std::vector<double>& x, const HeadWeights& h) {
    const std::size_t in = h.w1.rows(), hid = h.w1.cols(), out = h.w2.cols();
    if (x.size() != in)
        throw validation_error("head expects " + std::to_string(in) + " channels, got " +
                               std::to_string(x.size()));
    std::vector<double> a(hid, 0.0);
    for (std::size_t k = 0; k < in; ++k) {
        double xv = x[k];
        if (xv == 0.0) continue;
        for (std::size_t j = 0; j < hid; ++j) a[j] += xv * h.w1.at(k, j);
    }
    for (auto& v : a) v = v > 0.0 ? v : 0.0;
    std::vector<double> y(out, 0.0);
    for (std::size_t k = 0; k < hid; ++k) {
        double av = a[k];
        if (av == 0.0) continue;
        for (std::size_t j = 0; j < out; ++j) y[j] += av * h.w2.at(k, j);
    }
    return y;
}
}  // namespace detail

// Per-position projection through the pixel head of the chosen branch.
inline FeatureMap encode(const FeatureMap& f, const EncoderParams& params, Branch which) {
    const HeadWeights& h = params.branch(which).pixel;
    if (f.channels != h.w1.rows())
        throw validation_error("encode: feature channels " + std::to_string(f.channels) +
                               " do not match head input " + std::to_string(h.w1.rows()));
    FeatureMap out(h.w2.cols(), f.height, f.width);
    std::vector<double> x(f.channels);
    for (std::size_t y = 0; y < f.height; ++y)
        for (std::size_t xx = 0; xx < f.width; ++xx) {
            for (std::size_t c = 0; c < f.channels; ++c) x[c] = f.at(c, y, xx);
            auto v = detail::head_forward(x, h);
            for (std::size_t c = 0; c < v.size(); ++c)
                out.at(c, y, xx) = static_cast<float>(v[c]);
        }
    return out;
}

inline std::vector<double> global_mean_pool(const FeatureMap& f) {
    std::vector<double> m(f.channels, 0.0);
    for (std::size_t c = 0; c < f.channels; ++c) {
        double acc = 0.0;
        for (std::size_t y = 0; y < f.height; ++y)
            for (std::size_t x = 0; x < f.width; ++x) acc += f.at(c, y, x);
        m[c] = acc / double(f.cells());
    }
    return m;
}

// Pooled image descriptor: global mean then the image head. Not normalized here.
inline std::vector<double> encode_image(const FeatureMap& final_layer,
                                        const EncoderParams& params, Branch which) {
    return detail::head_forward(global_mean_pool(final_layer), params.branch(which).image);
}

// ---------------------------------------------------------------------------
// Self-attention: cosine similarity between the pooled descriptor f0 and every
// spatial vector of the final layer, plus a min-max rescaled copy in [0,1].

struct AttentionMap {
    std::size_t height = 0, width = 0;
    std::vector<float> cosine;    // [-1, 1]
    std::vector<float> rescaled;  // [0, 1]; constant maps rescale to all ones

    float mean_rescaled(std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) const {
        double s = 0.0;
        for (std::size_t y = y0; y < y0 + h; ++y)
            for (std::size_t x = x0; x < x0 + w; ++x) s += rescaled[y * width + x];
        return static_cast<float>(s / double(w * h));
    }
};

// params == nullptr uses the raw global mean for f0; otherwise f0 goes through
// the query image head first.
inline AttentionMap attention_map(const FeatureStack& stack,
                                  const EncoderParams* params = nullptr) {
    if (stack.layers.empty()) throw validation_error("attention needs at least one layer");
    const FeatureMap& last = stack.layers.back();

    std::vector<double> f0;
    if (params) {
        f0 = encode_image(last, *params, Branch::query);
    } else {
        f0 = global_mean_pool(last);
    }
    double n0 = 0.0;
    for (double v : f0) n0 += v * v;
    n0 = std::sqrt(n0);
    if (n0 == 0.0) throw validation_error("degenerate pooled feature: f0 is the zero vector");
    for (auto& v : f0) v /= n0;

    // with a projection head, score the projected per-position vectors
    FeatureMap key = params ? encode(last, *params, Branch::query) : last;
    if (key.channels != f0.size())
        throw validation_error("attention: pooled dim does not match key channels");

    AttentionMap att;
    att.height = key.height;
    att.width = key.width;
    att.cosine.resize(key.cells(), 0.0f);
    for (std::size_t y = 0; y < key.height; ++y)
        for (std::size_t x = 0; x < key.width; ++x) {
            double dot = 0.0, nk = 0.0;
            for (std::size_t c = 0; c < key.channels; ++c) {
                double v = key.at(c, y, x);
                dot += v * f0[c];
                nk += v * v;
            }
            nk = std::sqrt(nk);
            att.cosine[y * key.width + x] = nk == 0.0 ? 0.0f : static_cast<float>(dot / nk);
        }

    float lo = *std::min_element(att.cosine.begin(), att.cosine.end());
    float hi = *std::max_element(att.cosine.begin(), att.cosine.end());
    att.rescaled.resize(att.cosine.size());
    if (hi - lo < 1e-12f) {
        std::fill(att.rescaled.begin(), att.rescaled.end(), 1.0f);
    } else {
        for (std::size_t i = 0; i < att.cosine.size(); ++i)
            att.rescaled[i] = (att.cosine[i] - lo) / (hi - lo);
    }
    return att;
}

// ---------------------------------------------------------------------------
// Attention-guided augmentation: crop -> horizontal flip -> rotate, tracked as
// one exact affine from augmented grid cells back to source grid cells.

struct Affine23 {
    // x' = a*x + b*y + c ; y' = d*x + e*y + f
    double a = 1, b = 0, c = 0, d = 0, e = 1, f = 0;

    std::pair<double, double> apply(double x, double y) const {
        return {a * x + b * y + c, d * x + e * y + f};
    }

    Affine23 inverse() const {
        double det = a * e - b * d;
        if (std::abs(det) < 1e-12) throw validation_error("affine is not invertible");
        Affine23 r;
        r.a = e / det;
        r.b = -b / det;
        r.d = -d / det;
        r.e = a / det;
        r.c = -(r.a * c + r.b * f);
        r.f = -(r.d * c + r.e * f);
        return r;
    }

    // this(other(p))
    Affine23 compose(const Affine23& o) const {
        Affine23 r;
        r.a = a * o.a + b * o.d;
        r.b = a * o.b + b * o.e;
        r.c = a * o.c + b * o.f + c;
        r.d = d * o.a + e * o.d;
        r.e = d * o.b + e * o.e;
        r.f = d * o.c + e * o.f + f;
        return r;
    }
};

struct AugmentationRecord {
    double crop_x = 0, crop_y = 0;
    std::size_t crop_w = 0, crop_h = 0;
    bool hflip = false;
    double rotation_deg = 0;
    Affine23 affine_inverse;               // augmented cell coords -> source cell coords
    std::vector<std::uint8_t> valid_mask;  // crop_h x crop_w, row-major

    Affine23 forward() const { return affine_inverse.inverse(); }

    std::size_t valid_count() const {
        std::size_t n = 0;
        for (auto v : valid_mask) n += v ? 1 : 0;
        return n;
    }
};

struct CropConfig {
    double area_lo = 0.3, area_hi = 0.8;
    double aspect_lo = 0.75, aspect_hi = 4.0 / 3.0;
    double rotation_deg = 15.0;
    double flip_prob = 0.5;
    double min_attention = 0.5;
    int max_tries = 50;
};

inline CropConfig identity_crop_config() {
    CropConfig c;
    c.area_lo = c.area_hi = 1.0;
    c.aspect_lo = c.aspect_hi = 1.0;
    c.rotation_deg = 0.0;
    c.flip_prob = 0.0;
    c.min_attention = 0.0;
    return c;
}

// Builds the augmented->source affine for given crop/flip/rotation choices.
inline Affine23 make_inverse_affine(double crop_x, double crop_y, std::size_t crop_w,
                                    std::size_t crop_h, bool hflip, double rotation_deg) {
    double theta = rotation_deg * M_PI / 180.0;
    double cx = (double(crop_w) - 1.0) / 2.0;
    double cy = (double(crop_h) - 1.0) / 2.0;
    // output cell p samples patch content at R(-theta)(p - c) + c
    Affine23 rot;
    rot.a = std::cos(theta);
    rot.b = std::sin(theta);
    rot.d = -std::sin(theta);
    rot.e = std::cos(theta);
    rot.c = cx - rot.a * cx - rot.b * cy;
    rot.f = cy - rot.d * cx - rot.e * cy;

    Affine23 flip;
    if (hflip) {
        flip.a = -1;
        flip.c = double(crop_w) - 1.0;
    }

    Affine23 shift;
    shift.c = crop_x;
    shift.f = crop_y;

    return shift.compose(flip.compose(rot));
}

// Augments every layer of a uniform-resolution stack with a single exact
// correspondence record. Mixed-resolution stacks are rejected.
inline std::pair<FeatureStack, AugmentationRecord> attention_guided_crop(
    const FeatureStack& stack, const AttentionMap& attention, std::uint64_t rng_seed,
    const CropConfig& cfg) {
    if (stack.layers.empty()) throw validation_error("cannot augment an empty stack");
    const std::size_t H = stack.layers[0].height, W = stack.layers[0].width;
    for (const auto& l : stack.layers)
        if (l.height != H || l.width != W)
            throw validation_error("augmentation requires uniform layer resolution");
    if (attention.height != H || attention.width != W)
        throw validation_error("attention map dims do not match the stack grid");

    std::mt19937_64 rng(rng_seed);
    std::uniform_real_distribution<double> area(cfg.area_lo, cfg.area_hi);
    std::uniform_real_distribution<double> aspect(cfg.aspect_lo, cfg.aspect_hi);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::size_t cw = 0, ch = 0, cx = 0, cy = 0;
    bool found = false;
    for (int attempt = 0; attempt < cfg.max_tries; ++attempt) {
        double a = area(rng);
        double r = aspect(rng);
        double wf = std::sqrt(a * double(W) * double(H) * r);
        double hf = std::sqrt(a * double(W) * double(H) / r);
        cw = std::clamp<std::size_t>(std::size_t(std::lround(wf)), 1, W);
        ch = std::clamp<std::size_t>(std::size_t(std::lround(hf)), 1, H);
        cx = std::size_t(unit(rng) * double(W - cw + 1));
        cy = std::size_t(unit(rng) * double(H - ch + 1));
        cx = std::min(cx, W - cw);
        cy = std::min(cy, H - ch);
        if (attention.mean_rescaled(cx, cy, cw, ch) >= cfg.min_attention) {
            found = true;
            break;
        }
    }
    if (!found)
        throw validation_error("no crop rectangle reached mean attention " +
                               std::to_string(cfg.min_attention) + " after " +
                               std::to_string(cfg.max_tries) +
                               " tries; lower min_attention or the crop area range");

    bool flip = unit(rng) < cfg.flip_prob;
    double rot = cfg.rotation_deg > 0.0
                     ? std::uniform_real_distribution<double>(-cfg.rotation_deg,
                                                              cfg.rotation_deg)(rng)
                     : 0.0;

    AugmentationRecord rec;
    rec.crop_x = double(cx);
    rec.crop_y = double(cy);
    rec.crop_w = cw;
    rec.crop_h = ch;
    rec.hflip = flip;
    rec.rotation_deg = rot;
    rec.affine_inverse = make_inverse_affine(double(cx), double(cy), cw, ch, flip, rot);
    rec.valid_mask.assign(cw * ch, 0);

    FeatureStack aug;
    aug.img_w = stack.img_w;
    aug.img_h = stack.img_h;
    aug.source_id = stack.source_id + "+aug";
    for (const auto& layer : stack.layers) aug.layers.emplace_back(layer.channels, ch, cw);

    // nearest-neighbor resampling on feature grids: never blend feature vectors
    for (std::size_t y = 0; y < ch; ++y)
        for (std::size_t x = 0; x < cw; ++x) {
            auto [sx, sy] = rec.affine_inverse.apply(double(x), double(y));
            long rx = std::lround(sx), ry = std::lround(sy);
            bool ok = rx >= 0 && ry >= 0 && rx < long(W) && ry < long(H);
            rec.valid_mask[y * cw + x] = ok ? 1 : 0;
            if (!ok) continue;
            for (std::size_t li = 0; li < stack.layers.size(); ++li)
                for (std::size_t c = 0; c < stack.layers[li].channels; ++c)
                    aug.layers[li].at(c, y, x) =
                        stack.layers[li].at(c, std::size_t(ry), std::size_t(rx));
        }
    return {std::move(aug), std::move(rec)};
}

}  // namespace semcorr
