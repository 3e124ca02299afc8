#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "semcorr/errors.hpp"
#include "semcorr/feature.hpp"
#include "semcorr/tensor.hpp"

namespace semcorr {

struct GridDims {
    std::size_t h = 0, w = 0;
    std::size_t cells() const { return h * w; }
    bool operator==(const GridDims&) const = default;
};

// Pairwise similarity between every cell of two grids.
struct CorrelationMatrix {
    Tensor values;  // (H0*W0) x (H1*W1)
    GridDims src, trg;
};

// Row-stochastic transition matrix between two grids.
struct AffinityMatrix {
    Tensor values;
    GridDims src, trg;
    double temperature = 1.0;
};

// Normalized (x, y) cell centers, rows enumerate the grid row-major.
struct PositionGrid {
    Tensor values;  // (H*W) x 2
    GridDims grid;
};

struct TransportMatrix {
    Tensor values;  // (H0*W0) x (H1*W1), nonnegative, total mass 1
    GridDims src, trg;
    std::vector<double> row_marginal, col_marginal;
    int iterations = 0;
    double marginal_violation = 0.0;
};

struct HoughConfig {
    std::size_t bins_x = 16, bins_y = 16;
    double score_floor = 1e-4;
};

struct SinkhornConfig {
    double eps = 0.05;
    int max_iters = 100;
    double tol = 1e-6;
};

inline PositionGrid make_position_grid(GridDims g) {
    if (g.cells() == 0) throw validation_error("position grid needs positive extents");
    PositionGrid p{Tensor({g.cells(), 2}), g};
    for (std::size_t y = 0; y < g.h; ++y)
        for (std::size_t x = 0; x < g.w; ++x) {
            p.values.at(y * g.w + x, 0) = static_cast<float>((double(x) + 0.5) / double(g.w));
            p.values.at(y * g.w + x, 1) = static_cast<float>((double(y) + 0.5) / double(g.h));
        }
    return p;
}

inline CorrelationMatrix correlation(const FeatureMap& f0, const FeatureMap& f1) {
    if (f0.channels != f1.channels)
        throw validation_error("correlation: channel counts differ (" +
                               std::to_string(f0.channels) + " vs " +
                               std::to_string(f1.channels) + ")");
    CorrelationMatrix r;
    r.src = {f0.height, f0.width};
    r.trg = {f1.height, f1.width};
    r.values = Tensor({f0.cells(), f1.cells()});
    Tensor m0 = f0.position_matrix(), m1 = f1.position_matrix();
    for (std::size_t i = 0; i < m0.rows(); ++i)
        for (std::size_t j = 0; j < m1.rows(); ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < m0.cols(); ++c)
                acc += double(m0.at(i, c)) * double(m1.at(j, c));
            r.values.at(i, j) = static_cast<float>(acc);
        }
    return r;
}

namespace detail {
// Row-wise softmax of values/t with max subtraction; shift-invariant by
// construction, exactly so on inputs where x - max(x) is representable.
inline Tensor row_softmax_scaled(const Tensor& values, double t) {
    Tensor out(values.dims);
    for (std::size_t i = 0; i < values.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < values.cols(); ++j)
            mx = std::max(mx, double(values.at(i, j)));
        double denom = 0.0;
        std::vector<double> e(values.cols());
        for (std::size_t j = 0; j < values.cols(); ++j) {
            e[j] = std::exp((double(values.at(i, j)) - mx) / t);
            denom += e[j];
        }
        for (std::size_t j = 0; j < values.cols(); ++j)
            out.at(i, j) = static_cast<float>(e[j] / denom);
    }
    return out;
}
}  // namespace detail

inline AffinityMatrix affinity(const CorrelationMatrix& r, double t) {
    if (!(t > 0.0)) throw validation_error("affinity temperature must be > 0");
    return {detail::row_softmax_scaled(r.values, t), r.src, r.trg, t};
}

inline PositionGrid transfer_positions(const AffinityMatrix& a, const PositionGrid& g) {
    if (a.values.cols() != g.values.rows())
        throw validation_error("transfer: affinity cols " + std::to_string(a.values.cols()) +
                               " vs position rows " + std::to_string(g.values.rows()));
    PositionGrid p{Tensor({a.values.rows(), std::size_t(2)}), a.src};
    for (std::size_t i = 0; i < a.values.rows(); ++i)
        for (std::size_t c = 0; c < 2; ++c) {
            double acc = 0.0;
            for (std::size_t j = 0; j < a.values.cols(); ++j)
                acc += double(a.values.at(i, j)) * double(g.values.at(j, c));
            p.values.at(i, c) = static_cast<float>(acc);
        }
    return p;
}

inline AffinityMatrix cycle_affinity(const AffinityMatrix& ab, const AffinityMatrix& bc) {
    if (ab.values.cols() != bc.values.rows())
        throw validation_error("cycle: inner dims " + std::to_string(ab.values.cols()) +
                               " vs " + std::to_string(bc.values.rows()));
    AffinityMatrix out;
    out.src = ab.src;
    out.trg = bc.trg;
    out.temperature = ab.temperature;
    out.values = Tensor({ab.values.rows(), bc.values.cols()});
    for (std::size_t i = 0; i < ab.values.rows(); ++i)
        for (std::size_t j = 0; j < bc.values.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < ab.values.cols(); ++k)
                acc += double(ab.values.at(i, k)) * double(bc.values.at(k, j));
            out.values.at(i, j) = static_cast<float>(acc);
        }
    return out;
}

inline std::vector<double> uniform_marginals(std::size_t n) {
    if (n == 0) throw validation_error("marginals need at least one entry");
    return std::vector<double>(n, 1.0 / double(n));
}

// Attention-weighted marginals: rescaled attention renormalized to sum 1.
inline std::vector<double> attention_marginals(const AttentionMap& att) {
    double total = 0.0;
    for (float v : att.rescaled) total += v;
    if (total <= 0.0) return uniform_marginals(att.rescaled.size());
    std::vector<double> m(att.rescaled.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = double(att.rescaled[i]) / total;
    return m;
}

// Entropic OT maximizing total similarity. Cost = 1 - minmax(similarity);
// an all-equal similarity degenerates to the zero cost matrix, whose optimal
// plan is the independent coupling mu nu^T. Runs in the log domain so small
// eps stays finite.
inline TransportMatrix sinkhorn_ot(const CorrelationMatrix& similarity,
                                   const std::vector<double>& mu, const std::vector<double>& nu,
                                   const SinkhornConfig& cfg = {}) {
    const std::size_t n = similarity.values.rows(), m = similarity.values.cols();
    if (mu.size() != n || nu.size() != m)
        throw validation_error("marginal sizes do not match the similarity matrix");
    if (!(cfg.eps > 0.0)) throw validation_error("sinkhorn eps must be > 0");
    auto check_marginal = [](const std::vector<double>& v, const char* name) {
        double s = 0.0;
        for (double x : v) {
            if (x < 0.0) throw validation_error(std::string(name) + " marginal has a negative entry");
            s += x;
        }
        if (std::abs(s - 1.0) > 1e-6)
            throw validation_error(std::string(name) + " marginal sums to " + std::to_string(s) +
                                   ", expected 1");
    };
    check_marginal(mu, "row");
    check_marginal(nu, "col");

    float lo = *std::min_element(similarity.values.data.begin(), similarity.values.data.end());
    float hi = *std::max_element(similarity.values.data.begin(), similarity.values.data.end());
    std::vector<double> cost(n * m, 0.0);
    if (hi - lo > 1e-12f)
        for (std::size_t i = 0; i < n * m; ++i)
            cost[i] = 1.0 - (double(similarity.values.data[i]) - lo) / (double(hi) - double(lo));

    const double NEG_INF = -std::numeric_limits<double>::infinity();
    std::vector<double> f(n, 0.0), g(m, 0.0);
    std::vector<double> log_mu(n), log_nu(m);
    for (std::size_t i = 0; i < n; ++i) log_mu[i] = mu[i] > 0.0 ? std::log(mu[i]) : NEG_INF;
    for (std::size_t j = 0; j < m; ++j) log_nu[j] = nu[j] > 0.0 ? std::log(nu[j]) : NEG_INF;

    auto lse = [](const std::vector<double>& terms) {
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : terms) mx = std::max(mx, v);
        if (mx == -std::numeric_limits<double>::infinity()) return mx;
        double s = 0.0;
        for (double v : terms) s += std::exp(v - mx);
        return mx + std::log(s);
    };

    TransportMatrix out;
    out.src = similarity.src;
    out.trg = similarity.trg;
    out.row_marginal = mu;
    out.col_marginal = nu;
    out.values = Tensor({n, m});

    std::vector<double> terms;
    auto plan_entry = [&](std::size_t i, std::size_t j) {
        if (mu[i] == 0.0 || nu[j] == 0.0) return 0.0;
        return std::exp((f[i] + g[j] - cost[i * m + j]) / cfg.eps);
    };

    int iter = 0;
    double violation = std::numeric_limits<double>::infinity();
    for (iter = 1; iter <= cfg.max_iters; ++iter) {
        for (std::size_t i = 0; i < n; ++i) {
            if (mu[i] == 0.0) { f[i] = NEG_INF; continue; }
            terms.assign(m, NEG_INF);
            for (std::size_t j = 0; j < m; ++j)
                if (nu[j] > 0.0) terms[j] = (g[j] - cost[i * m + j]) / cfg.eps;
            f[i] = cfg.eps * (log_mu[i] - lse(terms));
        }
        for (std::size_t j = 0; j < m; ++j) {
            if (nu[j] == 0.0) { g[j] = NEG_INF; continue; }
            terms.assign(n, NEG_INF);
            for (std::size_t i = 0; i < n; ++i)
                if (mu[i] > 0.0) terms[i] = (f[i] - cost[i * m + j]) / cfg.eps;
            g[j] = cfg.eps * (log_nu[j] - lse(terms));
        }
        violation = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double rs = 0.0;
            for (std::size_t j = 0; j < m; ++j) rs += plan_entry(i, j);
            violation = std::max(violation, std::abs(rs - mu[i]));
        }
        for (std::size_t j = 0; j < m; ++j) {
            double cs = 0.0;
            for (std::size_t i = 0; i < n; ++i) cs += plan_entry(i, j);
            violation = std::max(violation, std::abs(cs - nu[j]));
        }
        if (violation < cfg.tol) break;
    }
    out.iterations = std::min(iter, cfg.max_iters);
    out.marginal_violation = violation;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            out.values.at(i, j) = static_cast<float>(plan_entry(i, j));
    return out;
}

inline TransportMatrix sinkhorn_ot(const CorrelationMatrix& similarity,
                                   const SinkhornConfig& cfg = {}) {
    return sinkhorn_ot(similarity, uniform_marginals(similarity.values.rows()),
                       uniform_marginals(similarity.values.cols()), cfg);
}

// Translation-offset Hough reweighting: each candidate match votes its score
// into the bin of its normalized offset; every score is then multiplied by
// (its bin's vote total + score_floor).
inline Tensor rhm(const Tensor& scores, const PositionGrid& src, const PositionGrid& trg,
                  const HoughConfig& cfg = {}) {
    if (cfg.bins_x < 1 || cfg.bins_y < 1) throw validation_error("hough bins must be >= 1");
    if (scores.rows() != src.values.rows() || scores.cols() != trg.values.rows())
        throw validation_error("rhm: score dims " + scores.shape_str() +
                               " do not match the grids");
    if (cfg.score_floor < 0.0) throw validation_error("score_floor must be >= 0");
    for (float v : scores.data)
        if (v < 0.0f) throw validation_error("rhm requires nonnegative scores");

    auto bin_of = [](double d, std::size_t bins) {
        double u = (d + 1.0) / 2.0;  // offsets live in [-1, 1]
        long b = long(u * double(bins));
        return std::size_t(std::clamp(b, 0L, long(bins) - 1));
    };

    std::vector<double> votes(cfg.bins_x * cfg.bins_y, 0.0);
    std::vector<std::uint32_t> bin_idx(scores.rows() * scores.cols());
    for (std::size_t i = 0; i < scores.rows(); ++i)
        for (std::size_t j = 0; j < scores.cols(); ++j) {
            double dx = double(trg.values.at(j, 0)) - double(src.values.at(i, 0));
            double dy = double(trg.values.at(j, 1)) - double(src.values.at(i, 1));
            std::size_t b = bin_of(dy, cfg.bins_y) * cfg.bins_x + bin_of(dx, cfg.bins_x);
            bin_idx[i * scores.cols() + j] = static_cast<std::uint32_t>(b);
            votes[b] += double(scores.at(i, j));
        }

    Tensor out(scores.dims);
    for (std::size_t k = 0; k < out.data.size(); ++k)
        out.data[k] =
            static_cast<float>(double(scores.data[k]) * (votes[bin_idx[k]] + cfg.score_floor));
    return out;
}

// Soft-argmax keypoint readout. Keypoints are continuous pixel coordinates in
// [0, img_w) x [0, img_h); cell c spans [c*img/grid, (c+1)*img/grid) and the
// normalized position u maps back to pixel u*img. Negative scores clamp to
// zero for the weighting; an all-zero row falls back to the grid centroid.
inline std::vector<std::array<double, 2>> match_keypoints(
    const Tensor& final_scores, const std::vector<std::array<double, 2>>& src_kps,
    GridDims src_grid, GridDims trg_grid, double src_img_w, double src_img_h,
    double trg_img_w, double trg_img_h) {
    if (final_scores.rows() != src_grid.cells() || final_scores.cols() != trg_grid.cells())
        throw validation_error("match: score dims " + final_scores.shape_str() +
                               " do not match the grids");
    PositionGrid gt = make_position_grid(trg_grid);
    std::vector<std::array<double, 2>> out;
    out.reserve(src_kps.size());
    for (std::size_t k = 0; k < src_kps.size(); ++k) {
        double kx = src_kps[k][0], ky = src_kps[k][1];
        if (!(kx >= 0.0 && kx < src_img_w && ky >= 0.0 && ky < src_img_h))
            throw validation_error("keypoint " + std::to_string(k) + " at (" +
                                   std::to_string(kx) + ", " + std::to_string(ky) +
                                   ") lies outside the " + std::to_string(src_img_w) + "x" +
                                   std::to_string(src_img_h) + " image");
        std::size_t cx = std::min(std::size_t(kx / src_img_w * double(src_grid.w)),
                                  src_grid.w - 1);
        std::size_t cy = std::min(std::size_t(ky / src_img_h * double(src_grid.h)),
                                  src_grid.h - 1);
        std::size_t row = cy * src_grid.w + cx;

        double wsum = 0.0, px = 0.0, py = 0.0;
        for (std::size_t j = 0; j < final_scores.cols(); ++j) {
            double w = std::max(0.0, double(final_scores.at(row, j)));
            wsum += w;
            px += w * double(gt.values.at(j, 0));
            py += w * double(gt.values.at(j, 1));
        }
        if (wsum == 0.0) {
            for (std::size_t j = 0; j < final_scores.cols(); ++j) {
                px += double(gt.values.at(j, 0));
                py += double(gt.values.at(j, 1));
            }
            wsum = double(final_scores.cols());
        }
        out.push_back({px / wsum * trg_img_w, py / wsum * trg_img_h});
    }
    return out;
}

}  // namespace semcorr
