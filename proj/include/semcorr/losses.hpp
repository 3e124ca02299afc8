#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "semcorr/errors.hpp"
#include "semcorr/feature.hpp"
#include "semcorr/graph.hpp"
#include "semcorr/matching.hpp"
#include "semcorr/tensor.hpp"

namespace semcorr {

// FIFO ring buffer of L2-normalized key vectors serving as negatives.
class NegativeQueue {
  public:
    NegativeQueue(std::size_t capacity, std::size_t dim)
        : capacity_(capacity), dim_(dim), slots_(capacity) {
        if (capacity == 0) throw validation_error("queue capacity must be positive");
        if (dim == 0) throw validation_error("queue key dimension must be positive");
    }

    std::size_t capacity() const { return capacity_; }
    std::size_t dim() const { return dim_; }
    std::size_t size() const { return count_; }

    // Appends each row of keys (B x D); evicts oldest entries past capacity.
    // Rows must be unit-norm within 1e-3; they are stored exactly normalized.
    void push(const Tensor& keys) {
        if (keys.data.empty()) return;
        if (keys.cols() != dim_)
            throw validation_error("queue expects " + std::to_string(dim_) +
                                   "-dim keys, got " + std::to_string(keys.cols()));
        for (std::size_t r = 0; r < keys.rows(); ++r) {
            double nrm = 0.0;
            for (std::size_t c = 0; c < dim_; ++c)
                nrm += double(keys.at(r, c)) * double(keys.at(r, c));
            nrm = std::sqrt(nrm);
            if (std::abs(nrm - 1.0) > 1e-3)
                throw validation_error("queue key " + std::to_string(r) + " has norm " +
                                       std::to_string(nrm) + ", expected 1");
            std::vector<float>& slot = slots_[head_];
            slot.resize(dim_);
            for (std::size_t c = 0; c < dim_; ++c)
                slot[c] = static_cast<float>(double(keys.at(r, c)) / nrm);
            head_ = (head_ + 1) % capacity_;
            if (count_ < capacity_) ++count_;
        }
    }

    // Entries oldest-first as a (size x D) matrix.
    Tensor as_matrix() const {
        if (count_ == 0) throw validation_error("queue is empty");
        Tensor t({count_, dim_});
        for (std::size_t i = 0; i < count_; ++i) {
            const auto& slot = slots_[(head_ + capacity_ - count_ + i) % capacity_];
            for (std::size_t c = 0; c < dim_; ++c) t.at(i, c) = slot[c];
        }
        return t;
    }

    static NegativeQueue from_matrix(std::size_t capacity, const Tensor& entries) {
        NegativeQueue q(capacity, entries.cols());
        q.push(entries);
        return q;
    }

  private:
    std::size_t capacity_, dim_;
    std::vector<std::vector<float>> slots_;
    std::size_t head_ = 0;   // next write position
    std::size_t count_ = 0;  // valid entries
};

struct LossWeights {
    double lambda_p = 0.0005;  // pixel cycle term
    double lambda_q = 1.0;     // image InfoNCE term
    double lambda_r = 0.001;   // entropy term
    double tau = 0.07;         // InfoNCE temperature
    double t = 0.0007;         // affinity temperature
    double m = 0.999;          // key-encoder momentum

    void validate() const {
        if (lambda_p < 0 || lambda_q < 0 || lambda_r < 0)
            throw validation_error("loss weights must be nonnegative");
        if (!(tau > 0)) throw validation_error("tau must be > 0");
        if (!(t > 0)) throw validation_error("affinity temperature must be > 0");
        if (!(m >= 0 && m < 1)) throw validation_error("momentum m must lie in [0, 1)");
    }
};

namespace detail {
inline double row_norm_dev(const Tensor& v, std::size_t row) {
    double n = 0.0;
    for (std::size_t c = 0; c < v.cols(); ++c) n += double(v.at(row, c)) * double(v.at(row, c));
    return std::abs(std::sqrt(n) - 1.0);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable loss nodes. Each builder appends to an existing graph so the
// training step can compose one scalar objective over shared encoder inputs.

// (K'+1)-way softmax cross-entropy with the positive in slot 0. The key vector
// and all queue entries enter as constants, which is the stop-gradient the
// momentum branch requires. f_q is a (1 x D) node, assumed unit-norm upstream.
inline NodeRef info_nce_node(GraphBuilder& b, NodeRef f_q, const Tensor& f_k,
                             const NegativeQueue& queue, double tau) {
    if (!(tau > 0)) throw validation_error("tau must be > 0");
    const std::size_t d = b.node(f_q).cols;
    if (f_k.cols() != d || f_k.rows() != 1)
        throw validation_error("info_nce: f_k must be 1x" + std::to_string(d));
    const std::size_t kn = queue.size();
    Tensor ref({kn + 1, d});
    for (std::size_t c = 0; c < d; ++c) ref.at(0, c) = f_k.at(0, c);
    if (kn > 0) {
        Tensor negs = queue.as_matrix();
        for (std::size_t i = 0; i < kn; ++i)
            for (std::size_t c = 0; c < d; ++c) ref.at(i + 1, c) = negs.at(i, c);
    }
    NodeRef logits = b.matmul(f_q, b.transpose(b.constant(ref, "nce_refs")));
    NodeRef probs = b.row_softmax(logits, tau);
    Tensor pick({kn + 1, std::size_t(1)});
    pick.at(0, 0) = 1.0f;
    NodeRef pos = b.matmul(probs, b.constant(pick, "nce_pick"));
    return b.scalar_mul(b.log(pos), -1.0);
}

// sqrt(x) composed from the primitive set; the 1e-12 floor keeps log finite,
// so the result bottoms out at 1e-6 instead of 0.
inline NodeRef sqrt_node(GraphBuilder& b, NodeRef x) {
    NodeRef floored = b.add(x, b.scalar_constant(1e-12, "sqrt_floor"));
    return b.exp(b.scalar_mul(b.log(floored), 0.5));
}

// L2 norm of P - P_hat over the masked rows. mean_variant divides the squared
// sum by the masked count first (an RMS readout for scale-stable training).
inline NodeRef pixel_cycle_node(GraphBuilder& b, NodeRef p, const Tensor& p_hat,
                                const std::vector<std::uint8_t>& mask,
                                bool mean_variant = false) {
    const std::size_t n = b.node(p).rows;
    if (b.node(p).cols != 2) throw validation_error("positions must be Nx2");
    if (p_hat.rows() != n || p_hat.cols() != 2)
        throw validation_error("ground-truth positions must be " + std::to_string(n) + "x2");
    if (mask.size() != n) throw validation_error("mask length does not match positions");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
        if (mask[i]) idx.push_back(i);
    if (idx.empty()) throw validation_error("no valid cells under the augmentation mask");

    Tensor sel({idx.size(), std::size_t(2)});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        sel.at(i, 0) = p_hat.at(idx[i], 0);
        sel.at(i, 1) = p_hat.at(idx[i], 1);
    }
    NodeRef sq = b.sq_dist(b.gather_rows(p, idx), b.constant(sel, "p_hat"));
    if (mean_variant) sq = b.scalar_mul(sq, 1.0 / double(idx.size()));
    return sqrt_node(b, sq);
}

// Mean row entropy of phi(R), phi = row L1 normalization of max(R,0) + 1e-12.
// A row with no positive entries becomes uniform under phi by construction.
inline NodeRef correlation_entropy_node(GraphBuilder& b, NodeRef r) {
    const std::size_t n = b.node(r).rows, m = b.node(r).cols;
    Tensor eps({n, m});
    for (auto& v : eps.data) v = 1e-12f;
    NodeRef phi = b.row_l1_norm(b.add(b.relu(r), b.constant(eps, "entropy_floor")));
    NodeRef plogp = b.dot_sum(phi, b.log(phi));
    return b.scalar_mul(plogp, -1.0 / double(n));
}

// ---------------------------------------------------------------------------
// Standalone evaluations (no gradients).

inline double info_nce(const Tensor& f_q, const Tensor& f_k, const NegativeQueue& queue,
                       double tau) {
    if (f_q.rows() != 1 || f_k.rows() != 1)
        throw validation_error("info_nce expects 1xD feature rows");
    if (detail::row_norm_dev(f_q, 0) > 1e-3 || detail::row_norm_dev(f_k, 0) > 1e-3)
        throw validation_error("info_nce features must be unit-norm (dev > 1e-3)");
    GraphBuilder b;
    NodeRef q = b.input("f_q", 1, f_q.cols());
    Graph g = b.build(info_nce_node(b, q, f_k, queue, tau));
    Tensor out = evaluate(g, {{"f_q", f_q}});
    return out.data[0];
}

// theta_k' = theta_q + m (theta_k - theta_q); contraction toward theta_q.
inline Tensor momentum_update(const Tensor& theta_k, const Tensor& theta_q, double m) {
    if (!(m >= 0 && m < 1)) throw validation_error("momentum m must lie in [0, 1)");
    if (!theta_k.same_shape(theta_q))
        throw validation_error("momentum update: shapes " + theta_k.shape_str() + " vs " +
                               theta_q.shape_str());
    Tensor out(theta_k.dims);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(double(theta_q.data[i]) +
                                         m * (double(theta_k.data[i]) - double(theta_q.data[i])));
    return out;
}

inline void momentum_update(EncoderParams& params, double m) {
    params.key.pixel.w1 = momentum_update(params.key.pixel.w1, params.query.pixel.w1, m);
    params.key.pixel.w2 = momentum_update(params.key.pixel.w2, params.query.pixel.w2, m);
    params.key.image.w1 = momentum_update(params.key.image.w1, params.query.image.w1, m);
    params.key.image.w2 = momentum_update(params.key.image.w2, params.query.image.w2, m);
}

// P_hat row i = affine_inverse(augmented cell i) in normalized source coords.
inline std::pair<PositionGrid, std::vector<std::uint8_t>> ground_truth_positions(
    const AugmentationRecord& rec, GridDims src_dims) {
    if (rec.crop_w == 0 || rec.crop_h == 0)
        throw validation_error("augmentation record has an empty crop");
    if (rec.valid_mask.size() != rec.crop_w * rec.crop_h)
        throw validation_error("augmentation record mask does not match its crop");
    if (src_dims.cells() == 0) throw validation_error("source grid needs positive extents");
    PositionGrid p{Tensor({rec.crop_w * rec.crop_h, std::size_t(2)}),
                   GridDims{rec.crop_h, rec.crop_w}};
    for (std::size_t y = 0; y < rec.crop_h; ++y)
        for (std::size_t x = 0; x < rec.crop_w; ++x) {
            auto [sx, sy] = rec.affine_inverse.apply(double(x), double(y));
            p.values.at(y * rec.crop_w + x, 0) =
                static_cast<float>((sx + 0.5) / double(src_dims.w));
            p.values.at(y * rec.crop_w + x, 1) =
                static_cast<float>((sy + 0.5) / double(src_dims.h));
        }
    return {std::move(p), rec.valid_mask};
}

inline double pixel_cycle_loss(const PositionGrid& p, const PositionGrid& p_hat,
                               const std::vector<std::uint8_t>& mask,
                               bool mean_variant = false) {
    if (!p.values.same_shape(p_hat.values))
        throw validation_error("position grids differ: " + p.values.shape_str() + " vs " +
                               p_hat.values.shape_str());
    if (mask.size() != p.values.rows())
        throw validation_error("mask length does not match positions");
    double sq = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < p.values.rows(); ++i) {
        if (!mask[i]) continue;
        ++count;
        for (std::size_t c = 0; c < 2; ++c) {
            double d = double(p.values.at(i, c)) - double(p_hat.values.at(i, c));
            sq += d * d;
        }
    }
    if (count == 0) throw validation_error("no valid cells under the augmentation mask");
    if (mean_variant) sq /= double(count);
    return std::sqrt(sq);
}

inline double correlation_entropy(const CorrelationMatrix& r) {
    const std::size_t n = r.values.rows(), m = r.values.cols();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < m; ++j)
            sum += std::max(0.0, double(r.values.at(i, j))) + 1e-12;
        for (std::size_t j = 0; j < m; ++j) {
            double phi = (std::max(0.0, double(r.values.at(i, j))) + 1e-12) / sum;
            total -= phi * std::log(phi);
        }
    }
    return total / double(n);
}

inline double entropy_loss(const CorrelationMatrix& r01, const CorrelationMatrix& r10) {
    return correlation_entropy(r01) + correlation_entropy(r10);
}

inline double total_loss(double l_p, double l_q, double l_r, const LossWeights& w) {
    w.validate();
    if (std::isnan(l_p)) throw validation_error("pixel loss is NaN");
    if (std::isnan(l_q)) throw validation_error("image loss is NaN");
    if (std::isnan(l_r)) throw validation_error("entropy loss is NaN");
    return w.lambda_p * l_p + w.lambda_q * l_q + w.lambda_r * l_r;
}

}  // namespace semcorr
