#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "semcorr/checkpoint.hpp"
#include "semcorr/config.hpp"
#include "semcorr/errors.hpp"
#include "semcorr/eval.hpp"
#include "semcorr/image_io.hpp"
#include "semcorr/synth.hpp"
#include "semcorr/train.hpp"

namespace semcorr {

namespace detail {

// Shared knobs registered on every subcommand. Precedence is resolved after
// parsing: struct defaults, then --config file entries, then explicit flags.
struct RunFlags {
    std::string config_path;
    std::string layers_csv;
    RunConfig staged;
    bool no_ot = false, no_rhm = false, no_entropy = false, attention = false,
         ot_affinity = false;
    CLI::Option *o_layers = nullptr, *o_t = nullptr, *o_tau = nullptr, *o_eps = nullptr,
                *o_lp = nullptr, *o_lq = nullptr, *o_lr = nullptr, *o_m = nullptr,
                *o_seed = nullptr, *o_threads = nullptr;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "flat key=value settings file");
        o_layers = cmd->add_option("--layers", layers_csv, "comma-separated layer indices");
        o_t = cmd->add_option("--t", staged.t, "affinity temperature");
        o_tau = cmd->add_option("--tau", staged.tau, "InfoNCE temperature");
        o_eps = cmd->add_option("--eps", staged.eps, "entropic transport regularizer");
        o_lp = cmd->add_option("--lambda-p", staged.lambda_p, "pixel cycle loss weight");
        o_lq = cmd->add_option("--lambda-q", staged.lambda_q, "image InfoNCE loss weight");
        o_lr = cmd->add_option("--lambda-r", staged.lambda_r, "entropy loss weight");
        o_m = cmd->add_option("--m", staged.m, "key-encoder momentum");
        o_seed = cmd->add_option("--seed", staged.seed, "deterministic run seed");
        o_threads = cmd->add_option("--threads", staged.threads,
                                    "worker cap, 0 means all cores (THREADS env also caps)");
        cmd->add_flag("--no-ot", no_ot, "skip the optimal-transport stage");
        cmd->add_flag("--no-rhm", no_rhm, "skip the geometric consensus rescoring");
        cmd->add_flag("--no-entropy", no_entropy, "drop the entropy objective");
        cmd->add_flag("--attention", attention, "attention-weighted transport marginals");
        cmd->add_flag("--ot-affinity", ot_affinity,
                      "run transport on affinity rows instead of raw correlation");
    }

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config_path.empty()) apply_config_file(cfg, config_path);
        if (o_layers->count()) cfg.layers = parse_layer_list(layers_csv);
        if (o_t->count()) cfg.t = staged.t;
        if (o_tau->count()) cfg.tau = staged.tau;
        if (o_eps->count()) cfg.eps = staged.eps;
        if (o_lp->count()) cfg.lambda_p = staged.lambda_p;
        if (o_lq->count()) cfg.lambda_q = staged.lambda_q;
        if (o_lr->count()) cfg.lambda_r = staged.lambda_r;
        if (o_m->count()) cfg.m = staged.m;
        if (o_seed->count()) cfg.seed = staged.seed;
        if (o_threads->count()) cfg.threads = staged.threads;
        if (no_ot) cfg.ot = false;
        if (no_rhm) cfg.rhm = false;
        if (no_entropy) cfg.entropy = false;
        if (attention) cfg.attention = true;
        if (ot_affinity) cfg.ot_affinity = true;
        cfg.validate();
        return cfg;
    }
};

struct SynthFlags {
    SynthConfig staged;
    std::string profiles_csv;
    CLI::Option* o_profiles = nullptr;

    void attach(CLI::App* cmd) {
        cmd->add_option("--categories", staged.categories, "synthetic categories");
        cmd->add_option("--pairs-per-category", staged.pairs_per_category, "pairs per category");
        cmd->add_option("--grid", staged.grid, "square feature grid side");
        cmd->add_option("--channels", staged.channels, "channels per layer");
        cmd->add_option("--parts", staged.parts, "keypoint-bearing parts per category");
        cmd->add_option("--jitter", staged.jitter, "max per-part offset in cells");
        cmd->add_option("--flip-prob", staged.flip_prob, "whole-instance horizontal flip");
        cmd->add_option("--noise-sigma", staged.noise_sigma, "feature noise scale");
        cmd->add_option("--cell-pixels", staged.cell_pixels, "image pixels per grid cell");
        cmd->add_option("--global-shift", staged.global_shift,
                        "max rigid offset of the second instance, in cells");
        cmd->add_flag("--wrap-shift", staged.wrap_shift,
                      "wrap the rigid shift around the grid edges");
        cmd->add_option("--signature-pool", staged.signature_pool,
                        "base signatures parts reuse; 0 keeps all parts distinct");
        cmd->add_option("--pool-spread", staged.pool_spread,
                        "per-part perturbation around its pooled base signature");
        cmd->add_option("--smooth", staged.smooth,
                        "4-neighbor blend weight correlating nearby cells");
        o_profiles = cmd->add_option("--layer-profiles", profiles_csv,
                                     "per-layer signal:noise list, e.g. 1:1,0.5:2");
    }

    SynthConfig resolve() const {
        SynthConfig cfg = staged;
        if (o_profiles->count()) {
            cfg.layer_profiles.clear();
            std::size_t pos = 0;
            while (pos <= profiles_csv.size()) {
                std::size_t comma = profiles_csv.find(',', pos);
                std::string item = profiles_csv.substr(
                    pos, comma == std::string::npos ? std::string::npos : comma - pos);
                std::size_t colon = item.find(':');
                if (colon == std::string::npos)
                    throw validation_error("layer profile '" + item +
                                           "' is not signal:noise");
                LayerProfile p;
                p.signal = parse_double("layer-profiles", trim(item.substr(0, colon)));
                p.noise = parse_double("layer-profiles", trim(item.substr(colon + 1)));
                cfg.layer_profiles.push_back(p);
                if (comma == std::string::npos) break;
                pos = comma + 1;
            }
            if (cfg.layer_profiles.empty())
                throw validation_error("layer profile list cannot be empty");
        }
        return cfg;
    }
};

inline MatchConfig to_match_config(const RunConfig& cfg, int sinkhorn_iters,
                                   const EncoderParams* enc) {
    MatchConfig mc;
    mc.layers = cfg.layers;
    mc.t = cfg.t;
    mc.use_ot = cfg.ot;
    mc.use_rhm = cfg.rhm;
    mc.use_attention_marginals = cfg.attention;
    mc.ot_on_affinity = cfg.ot_affinity;
    mc.sinkhorn.eps = cfg.eps;
    mc.sinkhorn.max_iters = sinkhorn_iters;
    mc.encoder = enc;
    return mc;
}

inline std::map<std::string, FeatureStack> load_stack_dir(
    const std::filesystem::path& dir, const std::vector<PairAnnotation>& pairs) {
    std::map<std::string, FeatureStack> stacks;
    for (const PairAnnotation& ann : pairs)
        for (const std::string& id : {ann.src_id, ann.trg_id})
            if (!stacks.count(id)) {
                std::filesystem::path p = dir / (id + ".fstk");
                if (!std::filesystem::exists(p))
                    throw io_error("missing feature stack " + p.string() + " for pair " +
                                   ann.src_id + " -> " + ann.trg_id);
                stacks.emplace(id, load_feature_stack(p));
            }
    return stacks;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    atomic_write_file(path, [&](std::ostream& out) { out << j.dump(2) << '\n'; });
}

inline std::uint64_t step_seed(std::uint64_t base, std::size_t step) {
    return base + std::uint64_t(step) * 0x9E3779B97F4A7C15ull;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommand bodies. Each throws on failure; run_command maps exceptions to
// exit codes (validation 1, I/O 2).

struct GenSynthArgs {
    RunConfig run;
    SynthConfig synth;
    std::filesystem::path out_dir;
};

inline int run_gen_synth(const GenSynthArgs& a) {
    SyntheticDataset ds = generate_synthetic_pairs(a.run.seed, a.synth);
    std::filesystem::create_directories(a.out_dir);
    for (const auto& [id, stack] : ds.stacks)
        save_feature_stack(a.out_dir / (id + ".fstk"), stack);
    save_annotations(a.out_dir / "pairs.jsonl", ds.pairs);
    std::cout << "wrote " << ds.pairs.size() << " pairs and " << ds.stacks.size()
              << " feature stacks to " << a.out_dir.string() << "\n";
    return 0;
}

struct MatchArgs {
    RunConfig run;
    std::filesystem::path src, trg;
    std::filesystem::path pairs;      // optional keypoint annotations
    std::filesystem::path out;        // matches JSON
    std::filesystem::path overlay;    // optional PPM
    std::filesystem::path checkpoint; // optional trained head
    std::vector<double> alphas{0.05, 0.10};
    int sinkhorn_iters = 1000;
};

inline int run_match(const MatchArgs& a) {
    FeatureStack src = load_feature_stack(a.src);
    FeatureStack trg = load_feature_stack(a.trg);

    Checkpoint ck;
    const EncoderParams* enc = nullptr;
    if (!a.checkpoint.empty()) {
        ck = load_checkpoint(a.checkpoint);
        enc = &ck.params;
    }
    MatchConfig mc = detail::to_match_config(a.run, a.sinkhorn_iters, enc);

    std::vector<std::array<double, 2>> src_kps;
    const std::vector<std::array<double, 2>>* gt = nullptr;
    std::vector<PairAnnotation> anns;
    if (!a.pairs.empty()) {
        anns = load_annotations(a.pairs);
        auto it = std::find_if(anns.begin(), anns.end(), [&](const PairAnnotation& p) {
            return p.src_id == src.source_id && p.trg_id == trg.source_id;
        });
        if (it == anns.end())
            throw validation_error("no annotation for pair " + src.source_id + " -> " +
                                   trg.source_id + " in " + a.pairs.string());
        src_kps = it->src_kps;
        gt = &it->trg_kps;
    } else {
        // no keypoints given: match every source cell center
        FeatureMap h = construct_hyperpixel(src, mc.layers);
        for (std::size_t y = 0; y < h.height; ++y)
            for (std::size_t x = 0; x < h.width; ++x)
                src_kps.push_back({(double(x) + 0.5) * double(src.img_w) / double(h.width),
                                   (double(y) + 0.5) * double(src.img_h) / double(h.height)});
    }

    MatchResult res = match_pair(src, trg, src_kps, mc);

    nlohmann::json j;
    j["src_id"] = src.source_id;
    j["trg_id"] = trg.source_id;
    j["src_kps"] = src_kps;
    j["pred_kps"] = res.pred_kps;
    j["sinkhorn_iters"] = res.sinkhorn_iters;
    j["marginal_violation"] = res.marginal_violation;
    if (gt) {
        j["alphas"] = a.alphas;
        std::vector<double> scores;
        for (double alpha : a.alphas)
            scores.push_back(
                pck(res.pred_kps, *gt, alpha, double(trg.img_w), double(trg.img_h)));
        j["pck"] = scores;
        for (std::size_t i = 0; i < a.alphas.size(); ++i)
            std::cout << "PCK@" << std::fixed << std::setprecision(2) << a.alphas[i] << " = "
                      << std::setprecision(4) << scores[i] << "\n";
    } else {
        std::cout << "matched " << src_kps.size() << " cell centers\n";
    }
    if (!a.out.empty()) detail::write_json_file(a.out, j);
    if (!a.overlay.empty()) write_match_overlay(a.overlay, src, trg, src_kps, res.pred_kps, gt);
    return 0;
}

struct EvaluateArgs {
    RunConfig run;
    std::filesystem::path pairs, stacks_dir;
    std::filesystem::path out;        // report JSON
    std::filesystem::path checkpoint; // optional trained head
    std::vector<double> alphas{0.05, 0.10, 0.15};
    std::string basis = "bbox";
    int sinkhorn_iters = 1000;
};

inline int run_evaluate(const EvaluateArgs& a) {
    std::vector<PairAnnotation> anns = load_annotations(a.pairs);
    std::map<std::string, FeatureStack> stacks = detail::load_stack_dir(a.stacks_dir, anns);

    Checkpoint ck;
    const EncoderParams* enc = nullptr;
    if (!a.checkpoint.empty()) {
        ck = load_checkpoint(a.checkpoint);
        enc = &ck.params;
    }
    MatchConfig mc = detail::to_match_config(a.run, a.sinkhorn_iters, enc);
    PckBasis basis = a.basis == "image" ? PckBasis::image : PckBasis::bbox;

    EvalReport report = evaluate_dataset(anns, map_lookup(stacks), mc, a.alphas, basis,
                                         resolve_threads(a.run.threads));

    std::cout << "pairs: " << report.pairs.size() << "  basis: " << a.basis << "\n";
    std::cout << "alpha   mean_pck\n";
    for (std::size_t i = 0; i < report.alphas.size(); ++i)
        std::cout << std::fixed << std::setprecision(3) << report.alphas[i] << "   "
                  << std::setprecision(6) << report.mean_pck[i] << "\n";

    if (!a.out.empty()) {
        nlohmann::json j;
        j["basis"] = a.basis;
        j["alphas"] = report.alphas;
        j["mean_pck"] = report.mean_pck;
        nlohmann::json rows = nlohmann::json::array();
        for (const PairRecord& rec : report.pairs) {
            nlohmann::json row;
            row["src_id"] = rec.src_id;
            row["trg_id"] = rec.trg_id;
            row["category"] = rec.category;
            row["pck"] = rec.pck_at;
            row["sinkhorn_iters"] = rec.sinkhorn_iters;
            row["marginal_violation"] = rec.marginal_violation;
            rows.push_back(std::move(row));
        }
        j["pairs"] = std::move(rows);
        detail::write_json_file(a.out, j);
    }
    return 0;
}

struct BeamSearchArgs {
    RunConfig run;
    std::filesystem::path pairs, stacks_dir;
    std::filesystem::path out;        // chosen layers JSON
    std::filesystem::path checkpoint; // optional trained head
    std::size_t beam_width = 4;
    std::size_t max_layers = 2;
    std::size_t pair_cap = 50;
    double min_attention = 0.0;
};

inline int run_beamsearch(const BeamSearchArgs& a) {
    std::vector<PairAnnotation> anns = load_annotations(a.pairs);
    std::map<std::string, FeatureStack> stacks = detail::load_stack_dir(a.stacks_dir, anns);
    if (anns.empty()) throw validation_error("beam search needs at least one pair");
    std::size_t n_layers = stacks.at(anns.front().src_id).layers.size();

    Checkpoint ck;
    const EncoderParams* enc = nullptr;
    if (!a.checkpoint.empty()) {
        ck = load_checkpoint(a.checkpoint);
        enc = &ck.params;
    }
    CropConfig crop;
    crop.min_attention = a.min_attention;
    auto indicator = make_subset_indicator(anns, map_lookup(stacks), a.run.t, enc, crop,
                                           a.run.seed, a.pair_cap);
    std::vector<std::size_t> best = beam_search(n_layers, indicator, a.beam_width, a.max_layers);
    double score = indicator(best);

    std::string csv;
    for (std::size_t i = 0; i < best.size(); ++i)
        csv += (i ? "," : "") + std::to_string(best[i]);
    std::cout << "selected layers: " << csv << "  (cycle loss " << std::setprecision(6)
              << score << ")\n";
    if (!a.out.empty()) {
        nlohmann::json j;
        j["layers"] = best;
        j["cycle_loss"] = score;
        j["n_layers"] = n_layers;
        detail::write_json_file(a.out, j);
    }
    return 0;
}

struct TrainToyArgs {
    RunConfig run;
    SynthConfig synth;                // used when no dataset is supplied
    std::filesystem::path pairs, stacks_dir;  // optional provided dataset
    std::filesystem::path out_checkpoint = "checkpoint.ckpt";
    std::filesystem::path out_losses = "losses.csv";
    int steps = 200;
    double lr = 0.03;
    std::size_t hidden = 16, embed = 8;
    std::size_t img_hidden = 16, img_dim = 8;
    std::size_t queue_capacity = 1024;
    bool pixel_loss_off = false;
    bool mean_pixel_loss = false;
    double min_attention = 0.2;
    double crop_rotation = 15.0;
    double crop_flip = 0.5;
    double crop_area_lo = 0.3, crop_area_hi = 0.8;
};

inline int run_train_toy(const TrainToyArgs& a) {
    if (a.steps <= 0) throw validation_error("steps must be positive");
    std::vector<PairAnnotation> anns;
    std::map<std::string, FeatureStack> stacks;
    if (!a.pairs.empty()) {
        if (a.stacks_dir.empty())
            throw validation_error("--pairs needs --stacks with the feature stacks");
        anns = load_annotations(a.pairs);
        stacks = detail::load_stack_dir(a.stacks_dir, anns);
    } else {
        SyntheticDataset ds = generate_synthetic_pairs(a.run.seed, a.synth);
        anns = std::move(ds.pairs);
        stacks = std::move(ds.stacks);
    }
    if (anns.empty()) throw validation_error("training needs at least one pair");

    const FeatureStack& first = stacks.at(anns.front().src_id);
    for (std::size_t l : a.run.layers)
        if (l >= first.layers.size())
            throw validation_error("layer " + std::to_string(l) + " out of range, stack has " +
                                   std::to_string(first.layers.size()));
    std::size_t hyper_c = 0;
    for (std::size_t l : a.run.layers) hyper_c += first.layers[l].channels;
    std::size_t image_c = first.layers.back().channels;

    std::mt19937_64 rng(a.run.seed);
    EncoderParams params;
    params.query.pixel.w1 = glorot_tensor(rng, hyper_c, a.hidden);
    params.query.pixel.w2 = glorot_tensor(rng, a.hidden, a.embed);
    params.query.image.w1 = glorot_tensor(rng, image_c, a.img_hidden);
    params.query.image.w2 = glorot_tensor(rng, a.img_hidden, a.img_dim);
    params.key = params.query;

    NegativeQueue queue(a.queue_capacity, a.img_dim);
    OptimState opt;
    opt.cfg.base_lr = a.lr;
    opt.cfg.total_steps = a.steps;

    TrainConfig tc;
    tc.weights = a.run.loss_weights();
    if (a.pixel_loss_off) tc.weights.lambda_p = 0.0;
    tc.crop.min_attention = a.min_attention;
    tc.crop.rotation_deg = a.crop_rotation;
    tc.crop.flip_prob = a.crop_flip;
    tc.crop.area_lo = a.crop_area_lo;
    tc.crop.area_hi = a.crop_area_hi;
    tc.layer_ids = a.run.layers;
    tc.mean_pixel_loss = a.mean_pixel_loss;

    std::ostringstream csv;
    csv << "step,total,image,pixel,entropy,lr,queue\n";
    int report_every = std::max(1, a.steps / 10);
    for (int step = 0; step < a.steps; ++step) {
        const PairAnnotation& ann = anns[std::size_t(step) % anns.size()];
        LossBreakdown lb =
            train_step(stacks.at(ann.src_id), stacks.at(ann.trg_id), params, queue, opt, tc,
                       detail::step_seed(a.run.seed, std::size_t(step)));
        csv << step + 1 << ',' << std::setprecision(10) << lb.total + 0.0 << ','
            << lb.image + 0.0 << ',' << lb.pixel << ',' << lb.entropy << ',' << lb.lr << ','
            << lb.queue_size << '\n';
        if ((step + 1) % report_every == 0 || step + 1 == a.steps)
            std::cout << "step " << step + 1 << "/" << a.steps << "  total "
                      << std::setprecision(6) << lb.total + 0.0 << "  pixel " << lb.pixel
                      << "  image " << lb.image + 0.0 << "\n";
    }

    atomic_write_file(a.out_losses, [&](std::ostream& out) { out << csv.str(); });
    save_checkpoint(a.out_checkpoint, params, queue);
    std::cout << "wrote " << a.out_checkpoint.string() << " and " << a.out_losses.string()
              << "\n";
    return 0;
}

struct AttentionArgs {
    std::filesystem::path stack, out;
    std::filesystem::path checkpoint;  // optional trained head
};

inline int run_attention(const AttentionArgs& a) {
    FeatureStack s = load_feature_stack(a.stack);
    Checkpoint ck;
    const EncoderParams* enc = nullptr;
    if (!a.checkpoint.empty()) {
        ck = load_checkpoint(a.checkpoint);
        enc = &ck.params;
    }
    AttentionMap att = attention_map(s, enc);
    write_attention_pgm(a.out, att);
    std::cout << "wrote " << att.width << "x" << att.height << " attention map to "
              << a.out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// selftest: compact invariant suite, one pass/fail line per check.

inline int run_selftest() {
    struct Case {
        std::string name;
        std::function<void()> fn;  // throws with a reason on failure
    };
    auto expect = [](bool ok, const std::string& why) {
        if (!ok) throw std::runtime_error(why);
    };

    std::vector<Case> cases;

    cases.push_back({"gradient fidelity (cycle + entropy composite)", [&] {
        std::mt19937_64 rng(404);
        GraphBuilder b;
        NodeRef w = b.input("w", 3, 3);
        Tensor pos({4, 3});
        std::normal_distribution<double> g(0.0, 1.0);
        for (auto& v : pos.data) v = float(g(rng));
        NodeRef e = b.row_l2_norm(b.relu(b.matmul(b.constant(pos, "pos"), w)));
        NodeRef r = b.matmul(e, b.transpose(e));
        NodeRef a = b.row_softmax(r, 0.05);
        PositionGrid grid = make_position_grid({2, 2});
        NodeRef p = b.matmul(a, b.constant(grid.values, "grid"));
        NodeRef loss = b.add(pixel_cycle_node(b, p, grid.values, {1, 1, 1, 1}, false),
                             b.scalar_mul(correlation_entropy_node(b, r), 0.3));
        Tensor wv({3, 3});
        for (auto& v : wv.data) v = float(g(rng));
        double err = finite_diff_check(b.build(loss), {{"w", wv}}, {"w"}, 1e-5);
        expect(err < 1e-4, "rel error " + std::to_string(err));
    }});

    cases.push_back({"affinity rows sum to one (incl. products)", [&] {
        std::mt19937_64 rng(405);
        std::uniform_real_distribution<float> d(-2.f, 2.f);
        for (int trial = 0; trial < 50; ++trial) {
            CorrelationMatrix r{Tensor({5, 7}), {1, 5}, {1, 7}};
            for (auto& v : r.values.data) v = d(rng);
            AffinityMatrix a01 = affinity(r, 0.0007);
            CorrelationMatrix rt{Tensor({7, 5}), {1, 7}, {1, 5}};
            for (auto& v : rt.values.data) v = d(rng);
            AffinityMatrix a10 = affinity(rt, 0.0007);
            AffinityMatrix chained = cycle_affinity(a01, a10);
            for (const AffinityMatrix* m : {&a01, &a10, &chained})
                for (std::size_t i = 0; i < m->values.rows(); ++i) {
                    double s = 0.0;
                    for (std::size_t jj = 0; jj < m->values.cols(); ++jj)
                        s += m->values.at(i, jj);
                    expect(std::abs(s - 1.0) <= 1e-5,
                           "row sum " + std::to_string(s));
                }
        }
    }});

    cases.push_back({"transport marginals converge", [&] {
        std::mt19937_64 rng(406);
        std::uniform_real_distribution<float> d(-1.f, 1.f);
        CorrelationMatrix r{Tensor({4, 4}), {2, 2}, {2, 2}};
        for (auto& v : r.values.data) v = d(rng);
        SinkhornConfig sc;
        sc.max_iters = 5000;
        TransportMatrix plan = sinkhorn_ot(r, sc);
        expect(plan.marginal_violation < 1e-6,
               "violation " + std::to_string(plan.marginal_violation));
    }});

    cases.push_back({"negative queue evicts oldest first", [&] {
        NegativeQueue q(3, 2);
        for (int i = 0; i < 4; ++i) {
            Tensor k({1, 2});
            double ang = 0.5 * i;
            k.at(0, 0) = float(std::cos(ang));
            k.at(0, 1) = float(std::sin(ang));
            q.push(k);
        }
        Tensor m = q.as_matrix();
        expect(m.rows() == 3, "size " + std::to_string(m.rows()));
        expect(std::abs(double(m.at(0, 0)) - std::cos(0.5)) < 1e-6,
               "oldest surviving entry is wrong");
    }});

    cases.push_back({"InfoNCE equals softmax cross-entropy", [&] {
        std::mt19937_64 rng(407);
        std::normal_distribution<double> g(0.0, 1.0);
        auto unit_row = [&](std::size_t dim) {
            Tensor t({1, dim});
            double n = 0.0;
            std::vector<double> v(dim);
            for (auto& x : v) { x = g(rng); n += x * x; }
            n = std::sqrt(n);
            for (std::size_t i = 0; i < dim; ++i) t.at(0, i) = float(v[i] / n);
            return t;
        };
        for (int trial = 0; trial < 10; ++trial) {
            Tensor fq = unit_row(6), fk = unit_row(6);
            NegativeQueue queue(8, 6);
            for (int i = 0; i < 8; ++i) queue.push(unit_row(6));
            double tau = 0.07;
            double got = info_nce(fq, fk, queue, tau);
            auto dot = [&](const Tensor& a2, const Tensor& b2) {
                double s = 0.0;
                for (std::size_t i = 0; i < a2.cols(); ++i)
                    s += double(a2.at(0, i)) * double(b2.at(0, i));
                return s;
            };
            Tensor negs = queue.as_matrix();
            double mx = dot(fq, fk) / tau;
            std::vector<double> logits{dot(fq, fk) / tau};
            for (std::size_t r = 0; r < negs.rows(); ++r) {
                Tensor row({1, negs.cols()});
                for (std::size_t c = 0; c < negs.cols(); ++c) row.at(0, c) = negs.at(r, c);
                logits.push_back(dot(fq, row) / tau);
                mx = std::max(mx, logits.back());
            }
            double z = 0.0;
            for (double l : logits) z += std::exp(l - mx);
            double want = -(logits[0] - mx - std::log(z));
            expect(std::abs(got - want) < 1e-6,
                   "loss " + std::to_string(got) + " vs " + std::to_string(want));
        }
    }});

    cases.push_back({"pck matches a brute-force recount", [&] {
        std::mt19937_64 rng(408);
        std::uniform_real_distribution<double> coord(0.0, 64.0), a(0.02, 0.5);
        for (int trial = 0; trial < 100; ++trial) {
            std::size_t n = 1 + rng() % 20;
            std::vector<std::array<double, 2>> gt(n), pred(n);
            for (std::size_t i = 0; i < n; ++i) {
                gt[i] = {coord(rng), coord(rng)};
                pred[i] = {coord(rng), coord(rng)};
            }
            double alpha = a(rng);
            std::size_t hits = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (std::hypot(pred[i][0] - gt[i][0], pred[i][1] - gt[i][1]) <= alpha * 64.0)
                    ++hits;
            double want = double(hits) / double(n);
            expect(pck(pred, gt, alpha, 64.0, 64.0) == want, "count mismatch");
        }
    }});

    bool all_ok = true;
    for (const Case& c : cases) {
        try {
            c.fn();
            std::cout << "pass  " << c.name << "\n";
        } catch (const std::exception& e) {
            all_ok = false;
            std::cout << "FAIL  " << c.name << ": " << e.what() << "\n";
        }
    }
    std::cout << (all_ok ? "selftest passed\n" : "selftest FAILED\n");
    return all_ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// Entry point. Returns 0 on success, 1 on validation errors, 2 on I/O errors.

inline int run_command(int argc, const char* const* argv) {
    try {
        CLI::App app{"semantic correspondence matching toolkit"};
        app.require_subcommand(1);
        int rc = 0;

        // gen-synth
        auto* c_gen = app.add_subcommand("gen-synth", "generate a synthetic keypoint dataset");
        detail::RunFlags gen_run;
        detail::SynthFlags gen_synth;
        std::string gen_out;
        gen_run.attach(c_gen);
        gen_synth.attach(c_gen);
        c_gen->add_option("--out-dir", gen_out, "output directory")->required();
        c_gen->callback([&] {
            GenSynthArgs a{gen_run.resolve(), gen_synth.resolve(), gen_out};
            rc = run_gen_synth(a);
        });

        // match
        auto* c_match = app.add_subcommand("match", "match one pair of feature stacks");
        detail::RunFlags match_run;
        MatchArgs match_args;
        std::string m_src, m_trg, m_pairs, m_out, m_overlay, m_ckpt, m_alphas;
        match_run.attach(c_match);
        c_match->add_option("--src", m_src, "source feature stack (.fstk)")->required();
        c_match->add_option("--trg", m_trg, "target feature stack (.fstk)")->required();
        c_match->add_option("--pairs", m_pairs, "keypoint annotations (.jsonl)");
        c_match->add_option("--out", m_out, "matches JSON path");
        c_match->add_option("--overlay", m_overlay, "side-by-side overlay PPM path");
        c_match->add_option("--checkpoint", m_ckpt, "trained head checkpoint");
        auto* m_alpha_opt = c_match->add_option("--alpha", m_alphas, "comma-separated alphas");
        c_match->add_option("--sinkhorn-iters", match_args.sinkhorn_iters,
                            "transport iteration cap");
        c_match->callback([&] {
            match_args.run = match_run.resolve();
            match_args.src = m_src;
            match_args.trg = m_trg;
            match_args.pairs = m_pairs;
            match_args.out = m_out;
            match_args.overlay = m_overlay;
            match_args.checkpoint = m_ckpt;
            if (m_alpha_opt->count()) match_args.alphas = parse_alpha_list(m_alphas);
            rc = run_match(match_args);
        });

        // evaluate
        auto* c_eval = app.add_subcommand("evaluate", "score a dataset with PCK");
        detail::RunFlags eval_run;
        EvaluateArgs eval_args;
        std::string e_pairs, e_stacks, e_out, e_ckpt, e_alphas;
        eval_run.attach(c_eval);
        c_eval->add_option("--pairs", e_pairs, "keypoint annotations (.jsonl)")->required();
        c_eval->add_option("--stacks", e_stacks, "directory of <id>.fstk files")->required();
        c_eval->add_option("--out", e_out, "report JSON path");
        c_eval->add_option("--checkpoint", e_ckpt, "trained head checkpoint");
        auto* e_alpha_opt = c_eval->add_option("--alpha", e_alphas, "comma-separated alphas");
        c_eval->add_option("--basis", eval_args.basis, "pck threshold basis")
            ->check(CLI::IsMember({"image", "bbox"}));
        c_eval->add_option("--sinkhorn-iters", eval_args.sinkhorn_iters,
                           "transport iteration cap");
        c_eval->callback([&] {
            eval_args.run = eval_run.resolve();
            eval_args.pairs = e_pairs;
            eval_args.stacks_dir = e_stacks;
            eval_args.out = e_out;
            eval_args.checkpoint = e_ckpt;
            if (e_alpha_opt->count()) eval_args.alphas = parse_alpha_list(e_alphas);
            rc = run_evaluate(eval_args);
        });

        // beamsearch
        auto* c_beam = app.add_subcommand("beamsearch", "pick layers by cycle loss");
        detail::RunFlags beam_run;
        BeamSearchArgs beam_args;
        std::string b_pairs, b_stacks, b_out, b_ckpt;
        beam_run.attach(c_beam);
        c_beam->add_option("--pairs", b_pairs, "keypoint annotations (.jsonl)")->required();
        c_beam->add_option("--stacks", b_stacks, "directory of <id>.fstk files")->required();
        c_beam->add_option("--out", b_out, "chosen layers JSON path");
        c_beam->add_option("--checkpoint", b_ckpt, "trained head checkpoint");
        c_beam->add_option("--beam-width", beam_args.beam_width, "beam width");
        c_beam->add_option("--max-layers", beam_args.max_layers, "largest subset considered");
        c_beam->add_option("--pair-cap", beam_args.pair_cap, "pairs sampled per subset");
        c_beam->add_option("--min-attention", beam_args.min_attention,
                           "crop attention threshold");
        c_beam->callback([&] {
            beam_args.run = beam_run.resolve();
            beam_args.pairs = b_pairs;
            beam_args.stacks_dir = b_stacks;
            beam_args.out = b_out;
            beam_args.checkpoint = b_ckpt;
            rc = run_beamsearch(beam_args);
        });

        // train-toy
        auto* c_train = app.add_subcommand("train-toy", "train the heads on a toy dataset");
        detail::RunFlags train_run;
        detail::SynthFlags train_synth;
        TrainToyArgs train_args;
        std::string t_pairs, t_stacks, t_ckpt_out, t_losses_out, t_pixel_loss = "on";
        train_run.attach(c_train);
        train_synth.attach(c_train);
        c_train->add_option("--pairs", t_pairs, "training annotations (.jsonl)");
        c_train->add_option("--stacks", t_stacks, "directory of <id>.fstk files");
        c_train->add_option("--out-checkpoint", t_ckpt_out, "checkpoint output path");
        c_train->add_option("--out-losses", t_losses_out, "loss curve CSV path");
        c_train->add_option("--steps", train_args.steps, "training steps");
        c_train->add_option("--lr", train_args.lr, "base learning rate");
        c_train->add_option("--hidden", train_args.hidden, "pixel head hidden width");
        c_train->add_option("--embed", train_args.embed, "pixel embedding dim");
        c_train->add_option("--img-hidden", train_args.img_hidden, "image head hidden width");
        c_train->add_option("--img-dim", train_args.img_dim, "image descriptor dim");
        c_train->add_option("--queue", train_args.queue_capacity, "negative queue capacity");
        c_train->add_option("--pixel-loss", t_pixel_loss, "pixel cycle objective on/off")
            ->check(CLI::IsMember({"on", "off"}));
        c_train->add_flag("--mean-pixel-loss", train_args.mean_pixel_loss,
                          "average the cycle loss over valid cells");
        c_train->add_option("--min-attention", train_args.min_attention,
                            "crop attention threshold");
        c_train->add_option("--crop-rotation", train_args.crop_rotation,
                            "max crop rotation in degrees");
        c_train->add_option("--crop-flip", train_args.crop_flip, "crop horizontal flip probability");
        c_train->add_option("--crop-area-lo", train_args.crop_area_lo, "min crop area fraction");
        c_train->add_option("--crop-area-hi", train_args.crop_area_hi, "max crop area fraction");
        c_train->callback([&] {
            train_args.run = train_run.resolve();
            train_args.synth = train_synth.resolve();
            train_args.pairs = t_pairs;
            train_args.stacks_dir = t_stacks;
            if (!t_ckpt_out.empty()) train_args.out_checkpoint = t_ckpt_out;
            if (!t_losses_out.empty()) train_args.out_losses = t_losses_out;
            train_args.pixel_loss_off = t_pixel_loss == "off";
            rc = run_train_toy(train_args);
        });

        // attention
        auto* c_att = app.add_subcommand("attention", "export a stack's attention map");
        AttentionArgs att_args;
        std::string a_stack, a_out, a_ckpt;
        c_att->add_option("--stack", a_stack, "feature stack (.fstk)")->required();
        c_att->add_option("--out", a_out, "PGM output path")->required();
        c_att->add_option("--checkpoint", a_ckpt, "trained head checkpoint");
        c_att->callback([&] {
            att_args.stack = a_stack;
            att_args.out = a_out;
            att_args.checkpoint = a_ckpt;
            rc = run_attention(att_args);
        });

        // selftest
        auto* c_self = app.add_subcommand("selftest", "run the built-in invariant suite");
        c_self->callback([&] { rc = run_selftest(); });

        try {
            app.parse(argc, argv);
        } catch (const CLI::CallForHelp& e) {
            return app.exit(e);
        } catch (const CLI::ParseError& e) {
            app.exit(e);
            return 1;
        }
        return rc;
    } catch (const validation_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const graph_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const parse_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const io_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

inline int run_command(const std::vector<std::string>& args) {
    std::vector<std::string> full;
    full.reserve(args.size() + 1);
    full.push_back("semcorr");
    full.insert(full.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    argv.reserve(full.size());
    for (const std::string& s : full) argv.push_back(s.c_str());
    return run_command(int(argv.size()), argv.data());
}

}  // namespace semcorr
