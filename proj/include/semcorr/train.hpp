#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "semcorr/feature.hpp"
#include "semcorr/graph.hpp"
#include "semcorr/losses.hpp"
#include "semcorr/matching.hpp"

namespace semcorr {

struct OptimConfig {
    double base_lr = 0.03;
    double momentum = 0.9;
    int total_steps = 200;  // cosine decay horizon
};

struct OptimState {
    OptimConfig cfg;
    int step = 0;  // completed steps
    std::map<std::string, Tensor> velocity;

    double current_lr() const {
        if (cfg.total_steps <= 0) return cfg.base_lr;
        double frac = std::min(double(step) / double(cfg.total_steps), 1.0);
        return cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * frac));
    }
};

struct TrainConfig {
    LossWeights weights;
    CropConfig crop;
    std::vector<std::size_t> layer_ids{0};  // hyperpixel layers for the pixel branch
    bool mean_pixel_loss = false;
    bool target_with_key = false;  // encode the partner image with the frozen key head
};

struct LossBreakdown {
    double total = 0, image = 0, pixel = 0, entropy = 0;
    double lr = 0;
    std::size_t queue_size = 0;
};

namespace detail {

inline NodeRef pixel_encoder_node(GraphBuilder& b, const Tensor& positions, NodeRef w1,
                                  NodeRef w2, const std::string& label) {
    NodeRef x = b.constant(positions, label);
    return b.row_l2_norm(b.matmul(b.relu(b.matmul(x, w1)), w2));
}

// Unit-normalized key vector with a uniform fallback when the head goes dead.
inline Tensor normalized_key_vector(const std::vector<double>& v) {
    Tensor t({std::size_t(1), v.size()});
    double nrm = 0.0;
    for (double x : v) nrm += x * x;
    nrm = std::sqrt(nrm);
    if (nrm < 1e-8) {
        float u = static_cast<float>(1.0 / std::sqrt(double(v.size())));
        for (auto& e : t.data) e = u;
        return t;
    }
    for (std::size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i] / nrm);
    return t;
}

}  // namespace detail

// One descent step on the weighted objective: two attention-guided crops of s0
// form the image-level positive pair; the first crop also drives the pixel
// cycle s0' -> s1 -> s0 against the augmentation record's exact ground truth.
// Entropy regularizes both correlation directions. Key branch and queue stay
// out of the gradient; afterwards the key tracks the query by momentum and the
// key vector joins the queue. Deterministic for a fixed seed.
inline LossBreakdown train_step(const FeatureStack& s0, const FeatureStack& s1,
                                EncoderParams& params, NegativeQueue& queue, OptimState& opt,
                                const TrainConfig& cfg, std::uint64_t seed) {
    cfg.weights.validate();

    AttentionMap att = attention_map(s0);
    auto [crop_a, rec_a] = attention_guided_crop(s0, att, seed, cfg.crop);
    auto [crop_b, rec_b] = attention_guided_crop(s0, att, seed ^ 0x9E3779B97F4A7C15ull, cfg.crop);
    (void)rec_b;  // the second view only feeds the image-level branch

    FeatureMap h0p = construct_hyperpixel(crop_a, cfg.layer_ids);
    FeatureMap h0 = construct_hyperpixel(s0, cfg.layer_ids);
    FeatureMap h1 = construct_hyperpixel(s1, cfg.layer_ids);
    GridDims src_dims{h0.height, h0.width};

    GraphBuilder b;
    NodeRef pw1 = b.input("pixel_w1", params.query.pixel.w1.rows(), params.query.pixel.w1.cols());
    NodeRef pw2 = b.input("pixel_w2", params.query.pixel.w2.rows(), params.query.pixel.w2.cols());
    NodeRef iw1 = b.input("image_w1", params.query.image.w1.rows(), params.query.image.w1.cols());
    NodeRef iw2 = b.input("image_w2", params.query.image.w2.rows(), params.query.image.w2.cols());

    // image branch: query view through the graph, key view as a constant
    std::vector<double> pooled_a = global_mean_pool(crop_a.layers.back());
    Tensor pooled_row({std::size_t(1), pooled_a.size()});
    for (std::size_t i = 0; i < pooled_a.size(); ++i)
        pooled_row.data[i] = static_cast<float>(pooled_a[i]);
    NodeRef f_q =
        b.row_l2_norm(b.matmul(b.relu(b.matmul(b.constant(pooled_row, "pooled_q"), iw1)), iw2));
    Tensor f_k =
        detail::normalized_key_vector(encode_image(crop_b.layers.back(), params, Branch::key));
    NodeRef l_q = info_nce_node(b, f_q, f_k, queue, cfg.weights.tau);

    // pixel branch: all three images through the query pixel head by default
    NodeRef e0p = detail::pixel_encoder_node(b, h0p.position_matrix(), pw1, pw2, "feat_0aug");
    NodeRef e0 = detail::pixel_encoder_node(b, h0.position_matrix(), pw1, pw2, "feat_0");
    NodeRef e1 = [&] {
        if (!cfg.target_with_key)
            return detail::pixel_encoder_node(b, h1.position_matrix(), pw1, pw2, "feat_1");
        FeatureMap enc = encode(h1, params, Branch::key);
        l2_normalize_positions(enc);
        return b.constant(enc.position_matrix(), "feat_1_key");
    }();

    NodeRef r_0p1 = b.matmul(e0p, b.transpose(e1));
    NodeRef r_10 = b.matmul(e1, b.transpose(e0));
    NodeRef a_0p1 = b.row_softmax(r_0p1, cfg.weights.t);
    NodeRef a_10 = b.row_softmax(r_10, cfg.weights.t);
    NodeRef cyc = b.matmul(a_0p1, a_10);
    NodeRef p = b.matmul(cyc, b.constant(make_position_grid(src_dims).values, "grid_0"));

    auto [p_hat, mask] = ground_truth_positions(rec_a, src_dims);
    NodeRef l_p = pixel_cycle_node(b, p, p_hat.values, mask, cfg.mean_pixel_loss);
    NodeRef l_r = b.add(correlation_entropy_node(b, r_0p1), correlation_entropy_node(b, r_10));

    NodeRef total = b.add(b.add(b.scalar_mul(l_p, cfg.weights.lambda_p),
                                b.scalar_mul(l_q, cfg.weights.lambda_q)),
                          b.scalar_mul(l_r, cfg.weights.lambda_r));

    std::map<std::string, Tensor> inputs{{"pixel_w1", params.query.pixel.w1},
                                         {"pixel_w2", params.query.pixel.w2},
                                         {"image_w1", params.query.image.w1},
                                         {"image_w2", params.query.image.w2}};
    GradResult res = value_and_grad(b.build(total), inputs,
                                    {"pixel_w1", "pixel_w2", "image_w1", "image_w2"});

    LossBreakdown out;
    out.total = res.value;
    out.pixel = evaluate(b.build(l_p), inputs).data[0];
    out.image = evaluate(b.build(l_q), inputs).data[0];
    out.entropy = evaluate(b.build(l_r), inputs).data[0];
    out.lr = opt.current_lr();

    for (auto& [name, tensor] : params.named_tensors()) {
        auto g = res.grads.find(name);
        if (g == res.grads.end()) continue;  // key tensors carry no gradient
        Tensor& vel = opt.velocity.try_emplace(name, Tensor(tensor->dims)).first->second;
        for (std::size_t i = 0; i < tensor->data.size(); ++i) {
            double v = opt.cfg.momentum * double(vel.data[i]) + double(g->second.data[i]);
            vel.data[i] = static_cast<float>(v);
            tensor->data[i] = static_cast<float>(double(tensor->data[i]) - out.lr * v);
        }
    }
    opt.step += 1;

    momentum_update(params, cfg.weights.m);
    queue.push(f_k);
    out.queue_size = queue.size();
    return out;
}

}  // namespace semcorr
