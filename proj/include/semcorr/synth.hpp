#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "semcorr/errors.hpp"
#include "semcorr/feature.hpp"

namespace semcorr {

struct PairAnnotation {
    std::string src_id, trg_id, category;
    std::vector<std::array<double, 2>> src_kps, trg_kps;
    std::array<double, 4> src_bbox{}, trg_bbox{};  // x, y, w, h in pixels

    void validate() const {
        if (src_kps.empty()) throw validation_error("annotation needs at least one keypoint");
        if (src_kps.size() != trg_kps.size())
            throw validation_error("keypoint lists differ: " + std::to_string(src_kps.size()) +
                                   " vs " + std::to_string(trg_kps.size()));
    }
};

// Per-layer signal/noise scaling lets stacks carry layers of varying quality,
// which is what layer selection has to discriminate.
struct LayerProfile {
    double signal = 1.0;
    double noise = 1.0;
};

struct SynthConfig {
    std::size_t categories = 10;
    std::size_t pairs_per_category = 20;
    std::size_t grid = 8;      // square feature grid
    std::size_t channels = 6;  // channels per layer
    std::size_t parts = 4;     // keypoint-bearing prototypes per category
    double jitter = 1.0;       // max per-part offset in cells (integer-rounded)
    double flip_prob = 0.0;    // whole-instance horizontal flip
    double noise_sigma = 0.5;  // feature noise scale; 0 gives noiseless copies
    std::size_t cell_pixels = 8;
    std::vector<LayerProfile> layer_profiles{{1.0, 1.0}};
    long global_shift = 0;           // max rigid offset of the second instance, in cells
    bool wrap_shift = false;         // shift wraps around the grid; parts may fill every cell
    std::size_t signature_pool = 0;  // 0: all parts distinct; k: parts reuse k base signatures
    double pool_spread = 0.0;        // per-part perturbation around its pooled base signature
    double smooth = 0.0;             // 4-neighbor blend weight; correlates nearby cells

    std::size_t img_px() const { return grid * cell_pixels; }
};

struct SyntheticDataset {
    std::vector<PairAnnotation> pairs;
    std::map<std::string, FeatureStack> stacks;
};

namespace detail {

struct PartPlacement {
    std::vector<std::array<long, 2>> cells;  // per part, (x, y)
    bool flipped = false;
};

// Parts land on a coarse lattice spaced so the worst-case jitter of two
// neighbors can never collide; keypoint identity stays exact by construction.
// A rigid pair shift only widens the margin, never the pitch.
inline std::vector<std::array<long, 2>> base_part_cells(const SynthConfig& cfg,
                                                        std::mt19937_64& rng) {
    const long j = std::lround(cfg.jitter);
    const long margin = j + (cfg.wrap_shift ? 0 : cfg.global_shift);
    const long lo = margin, hi = long(cfg.grid) - 1 - margin;
    const long pitch = 2 * j + 1;
    const std::string shift_suffix =
        cfg.global_shift > 0 ? " and shift " + std::to_string(cfg.global_shift) : "";
    if (hi < lo)
        throw validation_error("grid " + std::to_string(cfg.grid) +
                               " too small for jitter " + std::to_string(cfg.jitter) +
                               shift_suffix);
    std::vector<std::array<long, 2>> lattice;
    for (long y = lo; y <= hi; y += pitch)
        for (long x = lo; x <= hi; x += pitch) lattice.push_back({x, y});
    if (lattice.size() < cfg.parts)
        throw validation_error("grid " + std::to_string(cfg.grid) + " fits only " +
                               std::to_string(lattice.size()) + " parts at jitter " +
                               std::to_string(cfg.jitter) + shift_suffix + ", need " +
                               std::to_string(cfg.parts));
    std::shuffle(lattice.begin(), lattice.end(), rng);
    lattice.resize(cfg.parts);
    return lattice;
}

}  // namespace detail

// Seeded category prototypes -> per-instance jittered placements over noise.
// Identical seeds regenerate the dataset bit for bit.
inline SyntheticDataset generate_synthetic_pairs(std::uint64_t seed, const SynthConfig& cfg) {
    if (cfg.categories == 0 || cfg.pairs_per_category == 0)
        throw validation_error("need at least one category and one pair");
    if (cfg.parts == 0) throw validation_error("need at least one part per category");
    if (cfg.channels == 0 || cfg.grid == 0) throw validation_error("grid and channels must be positive");
    if (cfg.noise_sigma < 0) throw validation_error("noise sigma must be nonnegative");
    if (cfg.layer_profiles.empty()) throw validation_error("need at least one layer profile");
    if (cfg.global_shift < 0) throw validation_error("global shift must be nonnegative");
    if (cfg.signature_pool > cfg.parts)
        throw validation_error("signature pool " + std::to_string(cfg.signature_pool) +
                               " exceeds part count " + std::to_string(cfg.parts));
    if (cfg.pool_spread < 0) throw validation_error("pool spread must be nonnegative");
    if (cfg.pool_spread > 0 && cfg.signature_pool == 0)
        throw validation_error("pool spread needs a signature pool");
    if (cfg.smooth < 0) throw validation_error("smooth weight must be nonnegative");
    if (cfg.wrap_shift && std::lround(cfg.jitter) != 0)
        throw validation_error("wrapped shift supports zero jitter only");

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    SyntheticDataset out;
    const long j = std::lround(cfg.jitter);
    const double px = double(cfg.cell_pixels);

    auto make_instance = [&](const std::vector<std::vector<float>>& prototypes,
                             const std::vector<std::array<long, 2>>& base,
                             const std::string& id, std::array<long, 2> shift) {
        detail::PartPlacement place;
        place.flipped = unit(rng) < cfg.flip_prob;
        const long g = long(cfg.grid);
        for (const auto& cell : base) {
            long dx = j > 0 ? std::uniform_int_distribution<long>(-j, j)(rng) : 0;
            long dy = j > 0 ? std::uniform_int_distribution<long>(-j, j)(rng) : 0;
            long x = cell[0] + dx + shift[0], y = cell[1] + dy + shift[1];
            if (cfg.wrap_shift) {
                x = ((x % g) + g) % g;
                y = ((y % g) + g) % g;
            }
            if (place.flipped) x = g - 1 - x;
            place.cells.push_back({x, y});
        }

        FeatureStack s;
        s.source_id = id;
        s.img_w = s.img_h = cfg.img_px();
        for (const LayerProfile& prof : cfg.layer_profiles) {
            FeatureMap layer(cfg.channels, cfg.grid, cfg.grid);
            for (auto& v : layer.data)
                v = static_cast<float>(cfg.noise_sigma * prof.noise * gauss(rng));
            for (std::size_t p = 0; p < cfg.parts; ++p) {
                auto [x, y] = place.cells[p];
                for (std::size_t c = 0; c < cfg.channels; ++c)
                    layer.at(c, std::size_t(y), std::size_t(x)) +=
                        static_cast<float>(prof.signal * prototypes[p][c]);
            }
            if (cfg.smooth > 0) {
                FeatureMap blended(cfg.channels, cfg.grid, cfg.grid);
                const long g = long(cfg.grid);
                for (std::size_t c = 0; c < cfg.channels; ++c)
                    for (long y = 0; y < g; ++y)
                        for (long x = 0; x < g; ++x) {
                            double acc = layer.at(c, std::size_t(y), std::size_t(x));
                            double w = 1.0;
                            const std::array<std::array<long, 2>, 4> offs{
                                {{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
                            for (const auto& o : offs) {
                                long nx = x + o[0], ny = y + o[1];
                                if (nx < 0 || ny < 0 || nx >= g || ny >= g) continue;
                                acc += cfg.smooth * layer.at(c, std::size_t(ny), std::size_t(nx));
                                w += cfg.smooth;
                            }
                            blended.at(c, std::size_t(y), std::size_t(x)) =
                                static_cast<float>(acc / w);
                        }
                layer = std::move(blended);
            }
            s.layers.push_back(std::move(layer));
        }
        out.stacks.emplace(id, std::move(s));
        return place;
    };

    auto keypoints_of = [&](const detail::PartPlacement& place) {
        std::vector<std::array<double, 2>> kps;
        for (const auto& cell : place.cells)
            kps.push_back({(double(cell[0]) + 0.5) * px, (double(cell[1]) + 0.5) * px});
        return kps;
    };

    auto bbox_of = [&](const detail::PartPlacement& place) {
        long x0 = long(cfg.grid), y0 = long(cfg.grid), x1 = -1, y1 = -1;
        for (const auto& cell : place.cells) {
            x0 = std::min(x0, cell[0]);
            y0 = std::min(y0, cell[1]);
            x1 = std::max(x1, cell[0]);
            y1 = std::max(y1, cell[1]);
        }
        return std::array<double, 4>{double(x0) * px, double(y0) * px,
                                     double(x1 - x0 + 1) * px, double(y1 - y0 + 1) * px};
    };

    for (std::size_t cat = 0; cat < cfg.categories; ++cat) {
        std::vector<std::vector<float>> prototypes(cfg.parts,
                                                   std::vector<float>(cfg.channels));
        if (cfg.signature_pool > 0) {
            std::vector<std::vector<float>> bases(cfg.signature_pool,
                                                  std::vector<float>(cfg.channels));
            for (auto& b : bases)
                for (auto& v : b) v = static_cast<float>(3.0 * gauss(rng));
            for (std::size_t p = 0; p < cfg.parts; ++p)
                for (std::size_t c = 0; c < cfg.channels; ++c)
                    prototypes[p][c] = bases[p % cfg.signature_pool][c] +
                                       static_cast<float>(cfg.pool_spread * gauss(rng));
        } else {
            for (auto& proto : prototypes)
                for (auto& v : proto) v = static_cast<float>(3.0 * gauss(rng));
        }
        std::vector<std::array<long, 2>> base = detail::base_part_cells(cfg, rng);

        std::string cat_name = "cat" + std::to_string(cat);
        for (std::size_t pair = 0; pair < cfg.pairs_per_category; ++pair) {
            std::string src_id = cat_name + "_p" + std::to_string(pair) + "a";
            std::string trg_id = cat_name + "_p" + std::to_string(pair) + "b";
            std::array<long, 2> shift{0, 0};
            if (cfg.global_shift > 0) {
                std::uniform_int_distribution<long> sdist(-cfg.global_shift, cfg.global_shift);
                shift[0] = sdist(rng);
                shift[1] = sdist(rng);
            }
            detail::PartPlacement src = make_instance(prototypes, base, src_id, {0, 0});
            detail::PartPlacement trg = make_instance(prototypes, base, trg_id, shift);

            PairAnnotation ann;
            ann.src_id = src_id;
            ann.trg_id = trg_id;
            ann.category = cat_name;
            ann.src_kps = keypoints_of(src);
            ann.trg_kps = keypoints_of(trg);
            ann.src_bbox = bbox_of(src);
            ann.trg_bbox = bbox_of(trg);
            ann.validate();
            out.pairs.push_back(std::move(ann));
        }
    }
    return out;
}

}  // namespace semcorr
