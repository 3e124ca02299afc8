#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "semcorr/synth.hpp"

using namespace semcorr;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

SynthConfig small_config() {
    SynthConfig cfg;
    cfg.categories = 2;
    cfg.pairs_per_category = 3;
    cfg.grid = 8;
    cfg.channels = 4;
    cfg.parts = 3;
    return cfg;
}

}  // namespace

TEST_CASE("generated datasets have the advertised shape") {
    SynthConfig cfg = small_config();
    cfg.layer_profiles = {{1.0, 1.0}, {0.5, 2.0}};
    SyntheticDataset ds = generate_synthetic_pairs(11, cfg);

    REQUIRE(ds.pairs.size() == cfg.categories * cfg.pairs_per_category);
    REQUIRE(ds.stacks.size() == 2 * ds.pairs.size());

    std::set<std::string> ids;
    for (const PairAnnotation& ann : ds.pairs) {
        REQUIRE(ids.insert(ann.src_id).second);
        REQUIRE(ids.insert(ann.trg_id).second);
        REQUIRE(ann.src_kps.size() == cfg.parts);
        REQUIRE(ann.trg_kps.size() == cfg.parts);
        for (const std::string& id : {ann.src_id, ann.trg_id}) {
            const FeatureStack& s = ds.stacks.at(id);
            REQUIRE(s.layers.size() == cfg.layer_profiles.size());
            REQUIRE(s.img_w == cfg.img_px());
            REQUIRE(s.img_h == cfg.img_px());
            for (const FeatureMap& l : s.layers) {
                REQUIRE(l.channels == cfg.channels);
                REQUIRE(l.height == cfg.grid);
                REQUIRE(l.width == cfg.grid);
            }
        }
    }
}

TEST_CASE("keypoints sit on cell centers inside the bounding box") {
    SyntheticDataset ds = generate_synthetic_pairs(3, small_config());
    const double px = 8.0;
    for (const PairAnnotation& ann : ds.pairs) {
        for (const auto& [kps, bbox] :
             {std::pair{ann.src_kps, ann.src_bbox}, std::pair{ann.trg_kps, ann.trg_bbox}}) {
            for (const auto& kp : kps) {
                // cell-center pixel coordinates: (cell + 0.5) * cell_pixels
                double cx = kp[0] / px - 0.5, cy = kp[1] / px - 0.5;
                REQUIRE(cx == std::floor(cx));
                REQUIRE(cy == std::floor(cy));
                REQUIRE(kp[0] >= bbox[0]);
                REQUIRE(kp[0] <= bbox[0] + bbox[2]);
                REQUIRE(kp[1] >= bbox[1]);
                REQUIRE(kp[1] <= bbox[1] + bbox[3]);
            }
        }
    }
}

TEST_CASE("zero noise and zero jitter give bit-identical paired instances") {
    SynthConfig cfg = small_config();
    cfg.noise_sigma = 0.0;
    cfg.jitter = 0.0;
    SyntheticDataset ds = generate_synthetic_pairs(5, cfg);
    for (const PairAnnotation& ann : ds.pairs) {
        REQUIRE(ann.src_kps == ann.trg_kps);
        REQUIRE(ann.src_bbox == ann.trg_bbox);
        const FeatureStack& a = ds.stacks.at(ann.src_id);
        const FeatureStack& b = ds.stacks.at(ann.trg_id);
        for (std::size_t l = 0; l < a.layers.size(); ++l)
            REQUIRE(a.layers[l].data == b.layers[l].data);
    }
}

TEST_CASE("jittered keypoints move by whole cells within the jitter budget") {
    SynthConfig cfg = small_config();
    cfg.noise_sigma = 0.0;
    cfg.jitter = 1.0;
    const double px = double(cfg.cell_pixels);
    SyntheticDataset ds = generate_synthetic_pairs(21, cfg);
    bool any_moved = false;
    for (const PairAnnotation& ann : ds.pairs)
        for (std::size_t k = 0; k < ann.src_kps.size(); ++k)
            for (std::size_t d = 0; d < 2; ++d) {
                double delta = (ann.trg_kps[k][d] - ann.src_kps[k][d]) / px;
                REQUIRE(delta == std::floor(delta));
                // independent +-1 cell jitter on both sides spans +-2 cells
                REQUIRE(std::abs(delta) <= 2.0);
                if (delta != 0.0) any_moved = true;
            }
    REQUIRE(any_moved);
}

TEST_CASE("horizontal flip mirrors keypoints about the image center") {
    SynthConfig base = small_config();
    base.noise_sigma = 0.0;
    base.jitter = 0.0;
    SynthConfig flipped = base;
    flipped.flip_prob = 1.0;

    SyntheticDataset a = generate_synthetic_pairs(9, base);
    SyntheticDataset b = generate_synthetic_pairs(9, flipped);
    const double w = double(base.img_px());
    for (std::size_t p = 0; p < a.pairs.size(); ++p)
        for (std::size_t k = 0; k < a.pairs[p].src_kps.size(); ++k) {
            REQUIRE(b.pairs[p].src_kps[k][0] == w - a.pairs[p].src_kps[k][0]);
            REQUIRE(b.pairs[p].src_kps[k][1] == a.pairs[p].src_kps[k][1]);
        }
}

TEST_CASE("layer signal scale multiplies noiseless features exactly") {
    SynthConfig cfg = small_config();
    cfg.noise_sigma = 0.0;
    cfg.layer_profiles = {{1.0, 1.0}, {2.0, 1.0}};
    SyntheticDataset ds = generate_synthetic_pairs(4, cfg);
    const FeatureStack& s = ds.stacks.begin()->second;
    for (std::size_t i = 0; i < s.layers[0].data.size(); ++i)
        REQUIRE(s.layers[1].data[i] == Catch::Approx(2.0 * s.layers[0].data[i]).margin(1e-6));
}

TEST_CASE("the same seed regenerates the dataset bit for bit") {
    SynthConfig cfg = small_config();
    SyntheticDataset a = generate_synthetic_pairs(42, cfg);
    SyntheticDataset b = generate_synthetic_pairs(42, cfg);
    REQUIRE(a.pairs.size() == b.pairs.size());
    for (std::size_t p = 0; p < a.pairs.size(); ++p) {
        REQUIRE(a.pairs[p].src_id == b.pairs[p].src_id);
        REQUIRE(a.pairs[p].src_kps == b.pairs[p].src_kps);
        REQUIRE(a.pairs[p].trg_kps == b.pairs[p].trg_kps);
    }
    for (const auto& [id, stack] : a.stacks)
        for (std::size_t l = 0; l < stack.layers.size(); ++l)
            REQUIRE(stack.layers[l].data == b.stacks.at(id).layers[l].data);

    SyntheticDataset c = generate_synthetic_pairs(43, cfg);
    REQUIRE(a.stacks.begin()->second.layers[0].data !=
            c.stacks.begin()->second.layers[0].data);
}

TEST_CASE("impossible placement requests are rejected") {
    SECTION("grid too small for the jitter margin") {
        SynthConfig cfg = small_config();
        cfg.grid = 2;
        cfg.jitter = 2.0;
        REQUIRE_THROWS_MATCHES(generate_synthetic_pairs(1, cfg), validation_error,
                               MessageMatches(ContainsSubstring("too small for jitter")));
    }
    SECTION("more parts than collision-free sites") {
        SynthConfig cfg = small_config();
        cfg.grid = 3;
        cfg.jitter = 1.0;
        cfg.parts = 4;
        REQUIRE_THROWS_MATCHES(generate_synthetic_pairs(1, cfg), validation_error,
                               MessageMatches(ContainsSubstring("fits only 1")));
    }
    SECTION("degenerate configuration fields") {
        SynthConfig cfg = small_config();
        cfg.categories = 0;
        REQUIRE_THROWS_AS(generate_synthetic_pairs(1, cfg), validation_error);
        cfg = small_config();
        cfg.noise_sigma = -0.1;
        REQUIRE_THROWS_AS(generate_synthetic_pairs(1, cfg), validation_error);
        cfg = small_config();
        cfg.layer_profiles.clear();
        REQUIRE_THROWS_AS(generate_synthetic_pairs(1, cfg), validation_error);
    }
}

TEST_CASE("a wrapped shift translates the whole instance on the torus") {
    SynthConfig cfg;
    cfg.categories = 2;
    cfg.pairs_per_category = 4;
    cfg.grid = 6;
    cfg.channels = 3;
    cfg.parts = 36;  // every cell carries a part
    cfg.jitter = 0.0;
    cfg.noise_sigma = 0.0;
    cfg.flip_prob = 0.0;
    cfg.global_shift = 1;
    cfg.wrap_shift = true;
    const long g = long(cfg.grid);
    const double px = double(cfg.cell_pixels);
    SyntheticDataset ds = generate_synthetic_pairs(17, cfg);

    bool any_shifted = false;
    for (const PairAnnotation& ann : ds.pairs) {
        // every part shares one wrapped delta of at most one cell per axis
        std::array<long, 2> delta{};
        for (std::size_t d = 0; d < 2; ++d) {
            long raw = std::lround((ann.trg_kps[0][d] - ann.src_kps[0][d]) / px);
            delta[d] = ((raw % g) + g) % g;
            REQUIRE((delta[d] == 0 || delta[d] == 1 || delta[d] == g - 1));
        }
        if (delta[0] != 0 || delta[1] != 0) any_shifted = true;
        for (std::size_t k = 0; k < ann.src_kps.size(); ++k)
            for (std::size_t d = 0; d < 2; ++d) {
                long raw = std::lround((ann.trg_kps[k][d] - ann.src_kps[k][d]) / px);
                REQUIRE(((raw % g) + g) % g == delta[d]);
            }

        // the target map is the source map translated cell for cell
        const FeatureMap& a = ds.stacks.at(ann.src_id).layers[0];
        const FeatureMap& b = ds.stacks.at(ann.trg_id).layers[0];
        for (std::size_t c = 0; c < cfg.channels; ++c)
            for (long y = 0; y < g; ++y)
                for (long x = 0; x < g; ++x)
                    REQUIRE(a.at(c, std::size_t(y), std::size_t(x)) ==
                            b.at(c, std::size_t((y + delta[1]) % g),
                                 std::size_t((x + delta[0]) % g)));
    }
    REQUIRE(any_shifted);
}

TEST_CASE("a clipped shift moves all parts rigidly and stays in bounds") {
    SynthConfig cfg;
    cfg.categories = 2;
    cfg.pairs_per_category = 5;
    cfg.grid = 8;
    cfg.channels = 3;
    cfg.parts = 4;
    cfg.jitter = 0.0;
    cfg.noise_sigma = 0.0;
    cfg.global_shift = 2;
    const double px = double(cfg.cell_pixels);
    SyntheticDataset ds = generate_synthetic_pairs(23, cfg);

    bool any_shifted = false;
    for (const PairAnnotation& ann : ds.pairs) {
        double dx = ann.trg_kps[0][0] - ann.src_kps[0][0];
        double dy = ann.trg_kps[0][1] - ann.src_kps[0][1];
        REQUIRE(std::abs(dx) <= 2.0 * px);
        REQUIRE(std::abs(dy) <= 2.0 * px);
        if (dx != 0.0 || dy != 0.0) any_shifted = true;
        for (std::size_t k = 0; k < ann.src_kps.size(); ++k) {
            REQUIRE(ann.trg_kps[k][0] - ann.src_kps[k][0] == dx);
            REQUIRE(ann.trg_kps[k][1] - ann.src_kps[k][1] == dy);
            for (std::size_t d = 0; d < 2; ++d) {
                REQUIRE(ann.trg_kps[k][d] >= 0.0);
                REQUIRE(ann.trg_kps[k][d] <= double(cfg.img_px()));
            }
        }
    }
    REQUIRE(any_shifted);
}

TEST_CASE("a signature pool makes parts share feature vectors exactly") {
    SynthConfig cfg = small_config();
    cfg.parts = 4;
    cfg.signature_pool = 2;
    cfg.jitter = 0.0;
    cfg.noise_sigma = 0.0;
    SyntheticDataset ds = generate_synthetic_pairs(31, cfg);
    const double px = double(cfg.cell_pixels);

    auto cell_vector = [&](const FeatureMap& m, const std::array<double, 2>& kp) {
        auto x = std::size_t(kp[0] / px - 0.5), y = std::size_t(kp[1] / px - 0.5);
        std::vector<float> v;
        for (std::size_t c = 0; c < m.channels; ++c) v.push_back(m.at(c, y, x));
        return v;
    };

    for (const PairAnnotation& ann : ds.pairs) {
        const FeatureMap& m = ds.stacks.at(ann.src_id).layers[0];
        // parts reuse pooled signatures round-robin: 0 and 2 alias, 1 and 3 alias
        REQUIRE(cell_vector(m, ann.src_kps[0]) == cell_vector(m, ann.src_kps[2]));
        REQUIRE(cell_vector(m, ann.src_kps[1]) == cell_vector(m, ann.src_kps[3]));
        REQUIRE(cell_vector(m, ann.src_kps[0]) != cell_vector(m, ann.src_kps[1]));
    }

    SECTION("spread separates the pooled copies") {
        cfg.pool_spread = 0.5;
        SyntheticDataset spread = generate_synthetic_pairs(31, cfg);
        const PairAnnotation& ann = spread.pairs.front();
        const FeatureMap& m = spread.stacks.at(ann.src_id).layers[0];
        REQUIRE(cell_vector(m, ann.src_kps[0]) != cell_vector(m, ann.src_kps[2]));
    }
}

TEST_CASE("neighbor smoothing matches a hand-rolled blend of the raw map") {
    SynthConfig cfg = small_config();
    cfg.grid = 4;
    cfg.parts = 2;
    cfg.jitter = 0.0;
    cfg.noise_sigma = 0.5;
    SynthConfig smoothed = cfg;
    smoothed.smooth = 0.7;

    SyntheticDataset raw = generate_synthetic_pairs(13, cfg);
    SyntheticDataset blurred = generate_synthetic_pairs(13, smoothed);
    const long g = long(cfg.grid);
    for (const auto& [id, stack] : raw.stacks) {
        const FeatureMap& a = stack.layers[0];
        const FeatureMap& b = blurred.stacks.at(id).layers[0];
        for (std::size_t c = 0; c < cfg.channels; ++c)
            for (long y = 0; y < g; ++y)
                for (long x = 0; x < g; ++x) {
                    double acc = a.at(c, std::size_t(y), std::size_t(x));
                    double w = 1.0;
                    for (const auto& o : {std::array<long, 2>{-1, 0},
                                          std::array<long, 2>{1, 0},
                                          std::array<long, 2>{0, -1},
                                          std::array<long, 2>{0, 1}}) {
                        long nx = x + o[0], ny = y + o[1];
                        if (nx < 0 || ny < 0 || nx >= g || ny >= g) continue;
                        acc += 0.7 * a.at(c, std::size_t(ny), std::size_t(nx));
                        w += 0.7;
                    }
                    REQUIRE(b.at(c, std::size_t(y), std::size_t(x)) ==
                            Catch::Approx(acc / w).margin(1e-6));
                }
    }
}

TEST_CASE("placement extension knobs reject inconsistent settings") {
    SECTION("wrapped shift with jitter") {
        SynthConfig cfg = small_config();
        cfg.global_shift = 1;
        cfg.wrap_shift = true;
        cfg.jitter = 1.0;
        REQUIRE_THROWS_MATCHES(generate_synthetic_pairs(1, cfg), validation_error,
                               MessageMatches(ContainsSubstring("zero jitter")));
    }
    SECTION("pool larger than the part count") {
        SynthConfig cfg = small_config();
        cfg.signature_pool = cfg.parts + 1;
        REQUIRE_THROWS_MATCHES(generate_synthetic_pairs(1, cfg), validation_error,
                               MessageMatches(ContainsSubstring("exceeds part count")));
    }
    SECTION("spread without a pool") {
        SynthConfig cfg = small_config();
        cfg.pool_spread = 0.5;
        REQUIRE_THROWS_MATCHES(generate_synthetic_pairs(1, cfg), validation_error,
                               MessageMatches(ContainsSubstring("needs a signature pool")));
    }
    SECTION("negative shift and smooth") {
        SynthConfig cfg = small_config();
        cfg.global_shift = -1;
        REQUIRE_THROWS_AS(generate_synthetic_pairs(1, cfg), validation_error);
        cfg = small_config();
        cfg.smooth = -0.1;
        REQUIRE_THROWS_AS(generate_synthetic_pairs(1, cfg), validation_error);
    }
    SECTION("shift margin exhausts the grid") {
        SynthConfig cfg = small_config();
        cfg.grid = 4;
        cfg.jitter = 1.0;
        cfg.global_shift = 1;
        cfg.parts = 2;
        REQUIRE_THROWS_MATCHES(generate_synthetic_pairs(1, cfg), validation_error,
                               MessageMatches(ContainsSubstring("shift")));
    }
}
