#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "semcorr/losses.hpp"

using namespace semcorr;
using Catch::Matchers::ContainsSubstring;

namespace {

Tensor unit_row(std::vector<float> v) {
    double n = 0.0;
    for (float x : v) n += double(x) * x;
    n = std::sqrt(n);
    Tensor t({std::size_t(1), v.size()});
    for (std::size_t i = 0; i < v.size(); ++i) t.data[i] = float(double(v[i]) / n);
    return t;
}

Tensor random_unit_row(std::mt19937_64& rng, std::size_t d) {
    std::normal_distribution<float> g(0.f, 1.f);
    std::vector<float> v(d);
    for (auto& x : v) x = g(rng);
    return unit_row(std::move(v));
}

FeatureMap random_distinct_map(std::mt19937_64& rng, std::size_t c, std::size_t h,
                               std::size_t w) {
    std::normal_distribution<float> g(0.f, 1.f);
    FeatureMap f(c, h, w);
    for (auto& v : f.data) v = g(rng);
    return f;
}

}  // namespace

TEST_CASE("negative queue is a fixed-capacity FIFO of unit keys") {
    SECTION("pushing capacity+1 singletons evicts exactly the first") {
        NegativeQueue q(4, 2);
        for (int i = 0; i < 5; ++i) {
            Tensor key({1, 2});
            key.at(0, 0) = float(std::cos(0.3 * i));
            key.at(0, 1) = float(std::sin(0.3 * i));
            q.push(key);
        }
        REQUIRE(q.size() == 4);
        Tensor m = q.as_matrix();
        for (int i = 0; i < 4; ++i) {
            REQUIRE(m.at(std::size_t(i), 0) == Catch::Approx(std::cos(0.3 * (i + 1))));
            REQUIRE(m.at(std::size_t(i), 1) == Catch::Approx(std::sin(0.3 * (i + 1))));
        }
    }

    SECTION("a full batch fills the queue in row order") {
        NegativeQueue q(3, 2);
        Tensor batch({3, 2});
        for (std::size_t i = 0; i < 3; ++i) {
            batch.at(i, 0) = float(std::cos(0.5 * double(i)));
            batch.at(i, 1) = float(std::sin(0.5 * double(i)));
        }
        q.push(batch);
        REQUIRE(q.size() == 3);
        Tensor m = q.as_matrix();  // stored renormalized, so compare within 1e-6
        for (std::size_t i = 0; i < m.data.size(); ++i)
            REQUIRE(m.data[i] == Catch::Approx(batch.data[i]).margin(1e-6));
    }

    SECTION("pushing an empty batch changes nothing") {
        NegativeQueue q(3, 2);
        q.push(unit_row({1.f, 0.f}));
        Tensor empty{};
        q.push(empty);
        REQUIRE(q.size() == 1);
    }

    SECTION("bad keys are rejected") {
        NegativeQueue q(3, 2);
        REQUIRE_THROWS_AS(q.push(unit_row({1.f, 0.f, 0.f})), validation_error);
        Tensor long_key({1, 2});
        long_key.at(0, 0) = 2.0f;
        REQUIRE_THROWS_AS(q.push(long_key), validation_error);
        REQUIRE_THROWS_AS(NegativeQueue(0, 2), validation_error);
    }
}

TEST_CASE("info_nce equals (K'+1)-way cross-entropy") {
    SECTION("one negative scoring level with the positive costs ln 2") {
        NegativeQueue q(8, 2);
        q.push(unit_row({0.f, 1.f}));
        // f_q = x axis, f_k = x axis, negative = y axis rotated to equal score
        Tensor f_q = unit_row({1.f, 1.f});  // 45 degrees: same dot with both axes
        double loss = info_nce(f_q, unit_row({1.f, 0.f}), q, 0.07);
        REQUIRE(loss == Catch::Approx(std::log(2.0)).margin(1e-6));
    }

    SECTION("K' negatives all scoring level costs ln(K'+1)") {
        const std::size_t kn = 7;
        NegativeQueue q(16, 3);
        for (std::size_t i = 0; i < kn; ++i) q.push(unit_row({0.f, 1.f, 0.f}));
        Tensor f_q = unit_row({1.f, 0.f, 0.f});
        Tensor f_k = unit_row({0.f, 1.f, 0.f});  // positive matches every negative
        REQUIRE(info_nce(f_q, f_k, q, 0.07) ==
                Catch::Approx(std::log(double(kn + 1))).margin(1e-6));
    }

    SECTION("frozen scalar case: aligned positive, orthogonal negative, tau 1") {
        NegativeQueue q(4, 2);
        q.push(unit_row({0.f, 1.f}));
        Tensor axis = unit_row({1.f, 0.f});
        double loss = info_nce(axis, axis, q, 1.0);
        REQUIRE(loss == Catch::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)))
                            .margin(1e-6));
        REQUIRE(loss == Catch::Approx(0.3132617).margin(1e-6));
    }

    SECTION("matches an independent softmax cross-entropy oracle") {
        std::mt19937_64 rng(17);
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t d = 6, kn = 5;
            NegativeQueue q(8, d);
            for (std::size_t i = 0; i < kn; ++i) q.push(random_unit_row(rng, d));
            Tensor f_q = random_unit_row(rng, d), f_k = random_unit_row(rng, d);
            double tau = 0.07;

            Tensor negs = q.as_matrix();
            std::vector<double> logits{0.0};
            for (std::size_t c = 0; c < d; ++c)
                logits[0] += double(f_q.data[c]) * double(f_k.data[c]);
            for (std::size_t i = 0; i < kn; ++i) {
                double s = 0.0;
                for (std::size_t c = 0; c < d; ++c)
                    s += double(f_q.data[c]) * double(negs.at(i, c));
                logits.push_back(s);
            }
            double mx = *std::max_element(logits.begin(), logits.end()) / tau;
            double denom = 0.0;
            for (double l : logits) denom += std::exp(l / tau - mx);
            double oracle = -(logits[0] / tau - mx - std::log(denom));

            double got = info_nce(f_q, f_k, q, tau);
            REQUIRE(got == Catch::Approx(oracle).margin(1e-6));
            REQUIRE(got >= 0.0);
        }
    }

    SECTION("non-normalized features are rejected") {
        NegativeQueue q(4, 2);
        q.push(unit_row({0.f, 1.f}));
        Tensor bad({1, 2});
        bad.at(0, 0) = 1.5f;
        REQUIRE_THROWS_MATCHES(
            info_nce(bad, unit_row({1.f, 0.f}), q, 0.07), validation_error,
            Catch::Matchers::MessageMatches(ContainsSubstring("unit-norm")));
    }
}

TEST_CASE("momentum update is a contraction toward the query") {
    Tensor k = matrix(2, 2, {1.f, 2.f, 3.f, 4.f});
    Tensor q = matrix(2, 2, {5.f, 6.f, 7.f, 8.f});

    SECTION("m = 0 copies the query") { REQUIRE(momentum_update(k, q, 0.0).data == q.data); }

    SECTION("equal parameters are a fixed point") {
        REQUIRE(momentum_update(q, q, 0.999).data == q.data);
    }

    SECTION("scalar case 0.999 * 1 + 0.001 * 0") {
        Tensor one = matrix(1, 1, {1.f});
        Tensor zero = matrix(1, 1, {0.f});
        REQUIRE(momentum_update(one, zero, 0.999).at(0, 0) ==
                Catch::Approx(0.999).margin(1e-7));
    }

    SECTION("distance to the query shrinks by exactly m") {
        std::mt19937_64 rng(23);
        std::normal_distribution<float> g(0.f, 1.f);
        Tensor a({4, 5}), c({4, 5});
        for (auto& v : a.data) v = g(rng);
        for (auto& v : c.data) v = g(rng);
        double before = 0.0, after = 0.0;
        Tensor upd = momentum_update(a, c, 0.9);
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            before += std::pow(double(a.data[i]) - c.data[i], 2);
            after += std::pow(double(upd.data[i]) - c.data[i], 2);
        }
        REQUIRE(std::sqrt(after) == Catch::Approx(0.9 * std::sqrt(before)).epsilon(1e-6));
    }

    SECTION("shape mismatch and bad momentum are rejected") {
        REQUIRE_THROWS_AS(momentum_update(k, matrix(1, 2, {1.f, 2.f}), 0.9), validation_error);
        REQUIRE_THROWS_AS(momentum_update(k, q, 1.0), validation_error);
        REQUIRE_THROWS_AS(momentum_update(k, q, -0.1), validation_error);
    }

    SECTION("encoder-level update moves every key tensor") {
        EncoderParams p = make_encoder_params(3, 4, 2, 3, 2, 7);
        for (auto& v : p.key.pixel.w1.data) v += 1.0f;
        for (auto& v : p.key.image.w2.data) v += 1.0f;
        momentum_update(p, 0.0);
        REQUIRE(p.key.pixel.w1.data == p.query.pixel.w1.data);
        REQUIRE(p.key.pixel.w2.data == p.query.pixel.w2.data);
        REQUIRE(p.key.image.w1.data == p.query.image.w1.data);
        REQUIRE(p.key.image.w2.data == p.query.image.w2.data);
    }
}

TEST_CASE("ground-truth positions ride the inverse affine") {
    SECTION("identity record reproduces the augmented grid") {
        AugmentationRecord rec;
        rec.crop_w = rec.crop_h = 4;
        rec.valid_mask.assign(16, 1);
        auto [p_hat, mask] = ground_truth_positions(rec, {4, 4});
        REQUIRE(p_hat.values.data == make_position_grid({4, 4}).values.data);
        REQUIRE(mask == rec.valid_mask);
    }

    SECTION("pure translation shifts every position by a constant") {
        AugmentationRecord rec;
        rec.crop_w = rec.crop_h = 2;
        rec.valid_mask.assign(4, 1);
        rec.affine_inverse = make_inverse_affine(3, 1, 2, 2, false, 0.0);
        auto [p_hat, mask] = ground_truth_positions(rec, {8, 8});
        PositionGrid aug = make_position_grid({2, 2});
        for (std::size_t i = 0; i < 4; ++i) {
            // augmented cell (x,y) maps to source (x+3, y+1) on the 8x8 grid
            double ax = (double(i % 2) + 3 + 0.5) / 8.0;
            double ay = (double(i / 2) + 1 + 0.5) / 8.0;
            REQUIRE(p_hat.values.at(i, 0) == Catch::Approx(ax).margin(1e-7));
            REQUIRE(p_hat.values.at(i, 1) == Catch::Approx(ay).margin(1e-7));
        }
        (void)aug;
        REQUIRE(mask.size() == 4);
    }

    SECTION("hflip mirrors the normalized x coordinate") {
        AugmentationRecord rec;
        rec.crop_w = 4;
        rec.crop_h = 1;
        rec.hflip = true;
        rec.valid_mask.assign(4, 1);
        rec.affine_inverse = make_inverse_affine(0, 0, 4, 1, true, 0.0);
        auto [p_hat, mask] = ground_truth_positions(rec, {1, 4});
        PositionGrid grid = make_position_grid({1, 4});
        for (std::size_t x = 0; x < 4; ++x)
            REQUIRE(p_hat.values.at(x, 0) ==
                    Catch::Approx(1.0 - grid.values.at(x, 0)).margin(1e-7));
    }
}

TEST_CASE("pixel cycle loss is the masked distance between position maps") {
    PositionGrid g = make_position_grid({2, 2});

    SECTION("coinciding maps cost zero") {
        std::vector<std::uint8_t> mask(4, 1);
        REQUIRE(pixel_cycle_loss(g, g, mask) == 0.0);
    }

    SECTION("a single 3-4-5 offset costs exactly one half") {
        PositionGrid p = g;
        p.values.at(2, 0) += 0.3f;
        p.values.at(2, 1) += 0.4f;
        std::vector<std::uint8_t> mask(4, 0);
        mask[2] = 1;
        REQUIRE(pixel_cycle_loss(p, g, mask) == Catch::Approx(0.5).margin(1e-6));
        // unmasked cells do not contribute
        p.values.at(0, 0) += 9.0f;
        REQUIRE(pixel_cycle_loss(p, g, mask) == Catch::Approx(0.5).margin(1e-6));
    }

    SECTION("mean variant divides the squared sum by the cell count") {
        PositionGrid p = g;
        for (std::size_t i = 0; i < 4; ++i) p.values.at(i, 0) += 0.1f;
        std::vector<std::uint8_t> mask(4, 1);
        REQUIRE(pixel_cycle_loss(p, g, mask, true) == Catch::Approx(0.1).margin(1e-6));
        REQUIRE(pixel_cycle_loss(p, g, mask, false) == Catch::Approx(0.2).margin(1e-6));
    }

    SECTION("empty mask is an error") {
        std::vector<std::uint8_t> mask(4, 0);
        REQUIRE_THROWS_MATCHES(
            pixel_cycle_loss(g, g, mask), validation_error,
            Catch::Matchers::MessageMatches(ContainsSubstring("no valid cells")));
    }

    SECTION("reflection applied to both maps cancels") {
        std::mt19937_64 rng(29);
        std::uniform_real_distribution<float> u(0.f, 1.f);
        PositionGrid p = g, q = g;
        for (auto& v : p.values.data) v = u(rng);
        for (auto& v : q.values.data) v = u(rng);
        std::vector<std::uint8_t> mask{1, 0, 1, 1};
        double plain = pixel_cycle_loss(p, q, mask);
        PositionGrid pf = p, qf = q;
        for (std::size_t i = 0; i < 4; ++i) {
            pf.values.at(i, 0) = 1.0f - p.values.at(i, 0);
            qf.values.at(i, 0) = 1.0f - q.values.at(i, 0);
        }
        REQUIRE(pixel_cycle_loss(pf, qf, mask) == Catch::Approx(plain).margin(1e-6));
    }

    SECTION("graph node agrees with the standalone evaluation") {
        std::mt19937_64 rng(31);
        std::uniform_real_distribution<float> u(0.f, 1.f);
        Tensor p({6, 2}), p_hat({6, 2});
        for (auto& v : p.data) v = u(rng);
        for (auto& v : p_hat.data) v = u(rng);
        std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 1};

        GraphBuilder b;
        NodeRef pn = b.input("p", 6, 2);
        Graph g2 = b.build(pixel_cycle_node(b, pn, p_hat, mask));
        double got = evaluate(g2, {{"p", p}}).data[0];

        PositionGrid pg{p, {1, 6}}, hg{p_hat, {1, 6}};
        REQUIRE(got == Catch::Approx(pixel_cycle_loss(pg, hg, mask)).margin(1e-5));
    }

    SECTION("identical pair with identity augmentation cycles below 1e-3") {
        std::mt19937_64 rng(37);
        FeatureMap f = random_distinct_map(rng, 8, 4, 4);
        FeatureStack s;
        s.layers.push_back(f);
        FeatureMap h = construct_hyperpixel(s, {0});
        CorrelationMatrix r = correlation(h, h);
        AffinityMatrix a01 = affinity(r, 0.0007);
        AffinityMatrix a10 = affinity(r, 0.0007);
        PositionGrid grid = make_position_grid({4, 4});
        PositionGrid p = transfer_positions(cycle_affinity(a01, a10), grid);
        std::vector<std::uint8_t> mask(16, 1);
        REQUIRE(pixel_cycle_loss(p, grid, mask) < 1e-3);
    }
}

TEST_CASE("correlation entropy measures row peakiness") {
    auto corr_of = [](Tensor t, GridDims s, GridDims g) {
        return CorrelationMatrix{std::move(t), s, g};
    };

    SECTION("a dominant single entry per row is near zero entropy") {
        Tensor t({2, 3});
        t.at(0, 1) = 1.0f;
        t.at(1, 2) = 1.0f;  // other entries zero -> floored to 1e-12
        REQUIRE(correlation_entropy(corr_of(t, {1, 2}, {1, 3})) ==
                Catch::Approx(0.0).margin(1e-9));
    }

    SECTION("uniform rows reach the ln N maximum") {
        Tensor t({3, 5}, std::vector<float>(15, 0.4f));
        REQUIRE(correlation_entropy(corr_of(t, {1, 3}, {1, 5})) ==
                Catch::Approx(std::log(5.0)).margin(1e-9));
    }

    SECTION("frozen row (2,1,1) scores 1.0397") {
        Tensor t = matrix(1, 3, {2.f, 1.f, 1.f});
        REQUIRE(correlation_entropy(corr_of(t, {1, 1}, {1, 3})) ==
                Catch::Approx(1.0397).margin(5e-4));
    }

    SECTION("an all-nonpositive row counts as uniform") {
        Tensor t = matrix(1, 4, {-1.f, -2.f, 0.f, -0.5f});
        REQUIRE(correlation_entropy(corr_of(t, {1, 1}, {1, 4})) ==
                Catch::Approx(std::log(4.0)).margin(1e-6));
    }

    SECTION("entropy stays within [0, ln N] on random input") {
        std::mt19937_64 rng(41);
        std::normal_distribution<float> g(0.f, 1.f);
        for (int trial = 0; trial < 30; ++trial) {
            Tensor t({4, 6});
            for (auto& v : t.data) v = g(rng);
            double h = correlation_entropy(corr_of(t, {2, 2}, {2, 3}));
            REQUIRE(h >= 0.0);
            REQUIRE(h <= std::log(6.0) + 1e-9);
        }
    }

    SECTION("graph node agrees with the standalone evaluation") {
        std::mt19937_64 rng(43);
        std::normal_distribution<float> g(0.f, 1.f);
        Tensor t({5, 4});
        for (auto& v : t.data) v = g(rng);

        GraphBuilder b;
        NodeRef r = b.input("r", 5, 4);
        Graph g2 = b.build(correlation_entropy_node(b, r));
        double got = evaluate(g2, {{"r", t}}).data[0];
        REQUIRE(got ==
                Catch::Approx(correlation_entropy(corr_of(t, {1, 5}, {2, 2}))).margin(1e-6));
    }

    SECTION("pair loss sums both directions") {
        Tensor a({2, 2}, std::vector<float>(4, 1.0f));
        Tensor bsym({2, 2}, std::vector<float>(4, 2.0f));
        CorrelationMatrix r01 = corr_of(a, {1, 2}, {1, 2});
        CorrelationMatrix r10 = corr_of(bsym, {1, 2}, {1, 2});
        REQUIRE(entropy_loss(r01, r10) == Catch::Approx(2.0 * std::log(2.0)).margin(1e-9));
        REQUIRE(entropy_loss(r01, r01) ==
                Catch::Approx(2.0 * correlation_entropy(r01)).margin(1e-12));
    }
}

TEST_CASE("total loss applies the configured weights") {
    LossWeights w;

    SECTION("zero components cost zero") { REQUIRE(total_loss(0, 0, 0, w) == 0.0); }

    SECTION("unit components with default weights") {
        REQUIRE(total_loss(1, 1, 1, w) == Catch::Approx(1.0015).margin(1e-12));
    }

    SECTION("dropping the entropy weight removes that term") {
        LossWeights no_r = w;
        no_r.lambda_r = 0.0;
        REQUIRE(total_loss(0.5, 2.0, 123.0, no_r) ==
                Catch::Approx(0.0005 * 0.5 + 2.0).margin(1e-12));
    }

    SECTION("NaN components name the offending term") {
        double nan = std::nan("");
        REQUIRE_THROWS_MATCHES(total_loss(nan, 0, 0, w), validation_error,
                               Catch::Matchers::MessageMatches(ContainsSubstring("pixel")));
        REQUIRE_THROWS_MATCHES(total_loss(0, nan, 0, w), validation_error,
                               Catch::Matchers::MessageMatches(ContainsSubstring("image")));
        REQUIRE_THROWS_MATCHES(total_loss(0, 0, nan, w), validation_error,
                               Catch::Matchers::MessageMatches(ContainsSubstring("entropy")));
    }

    SECTION("invalid weights are rejected") {
        LossWeights bad = w;
        bad.lambda_p = -1.0;
        REQUIRE_THROWS_AS(total_loss(0, 0, 0, bad), validation_error);
        bad = w;
        bad.m = 1.0;
        REQUIRE_THROWS_AS(total_loss(0, 0, 0, bad), validation_error);
    }
}

TEST_CASE("loss builders stay finite-difference clean through an encoder") {
    std::mt19937_64 rng(47);
    std::normal_distribution<float> g(0.f, 0.5f);

    // feat (6 cells x 3 ch) -> w1 -> relu -> w2 -> l2 rows -> self correlation
    Tensor feat({6, 3});
    for (auto& v : feat.data) v = g(rng) + ((&v - feat.data.data()) % 4) * 0.25f;
    Tensor w1({3, 4}), w2({4, 3});
    for (auto& v : w1.data) v = g(rng) + 0.3f;
    for (auto& v : w2.data) v = g(rng) + 0.3f;

    GraphBuilder b;
    NodeRef w1n = b.input("w1", 3, 4);
    NodeRef w2n = b.input("w2", 4, 3);
    NodeRef enc = b.row_l2_norm(b.matmul(b.relu(b.matmul(b.constant(feat, "feat"), w1n)), w2n));
    NodeRef r = b.matmul(enc, b.transpose(enc));
    NodeRef aff = b.row_softmax(r, 0.05);
    PositionGrid grid = make_position_grid({2, 3});
    NodeRef p = b.matmul(b.matmul(aff, aff), b.constant(grid.values, "grid"));
    Tensor p_hat = grid.values;
    std::vector<std::uint8_t> mask(6, 1);
    mask[1] = 0;
    NodeRef l_p = pixel_cycle_node(b, p, p_hat, mask);
    NodeRef l_r = correlation_entropy_node(b, r);
    NodeRef total = b.add(b.scalar_mul(l_p, 0.7), b.scalar_mul(l_r, 0.3));

    double dev = finite_diff_check(b.build(total), {{"w1", w1}, {"w2", w2}}, {"w1", "w2"}, 1e-4);
    REQUIRE(dev < 1e-4);
}
