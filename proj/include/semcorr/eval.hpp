#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "semcorr/errors.hpp"
#include "semcorr/feature.hpp"
#include "semcorr/losses.hpp"
#include "semcorr/matching.hpp"
#include "semcorr/synth.hpp"

namespace semcorr {

// ---------------------------------------------------------------------------
// Annotation serialization: JSON lines, one pair per line.

inline nlohmann::json annotation_to_json(const PairAnnotation& a) {
    nlohmann::json j;
    j["src_id"] = a.src_id;
    j["trg_id"] = a.trg_id;
    j["category"] = a.category;
    j["src_kps"] = a.src_kps;
    j["trg_kps"] = a.trg_kps;
    j["src_bbox"] = a.src_bbox;
    j["trg_bbox"] = a.trg_bbox;
    return j;
}

inline PairAnnotation annotation_from_json(const nlohmann::json& j) {
    PairAnnotation a;
    a.src_id = j.at("src_id").get<std::string>();
    a.trg_id = j.at("trg_id").get<std::string>();
    a.category = j.value("category", std::string{});
    a.src_kps = j.at("src_kps").get<std::vector<std::array<double, 2>>>();
    a.trg_kps = j.at("trg_kps").get<std::vector<std::array<double, 2>>>();
    a.src_bbox = j.value("src_bbox", std::array<double, 4>{});
    a.trg_bbox = j.value("trg_bbox", std::array<double, 4>{});
    a.validate();
    return a;
}

inline void save_annotations(const std::filesystem::path& path,
                             const std::vector<PairAnnotation>& pairs) {
    atomic_write_file(path, [&](std::ostream& out) {
        for (const auto& p : pairs) out << annotation_to_json(p).dump() << '\n';
    });
}

inline std::vector<PairAnnotation> load_annotations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path.string());
    std::vector<PairAnnotation> pairs;
    std::string line;
    std::size_t offset = 0, line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            offset += line.size() + 1;
            continue;
        }
        try {
            pairs.push_back(annotation_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(offset, "pairs line " + std::to_string(line_no) + ": " + e.what());
        } catch (const validation_error& e) {
            throw parse_error(offset, "pairs line " + std::to_string(line_no) + ": " + e.what());
        }
        offset += line.size() + 1;
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// PCK: fraction of predictions within alpha * max(basis_w, basis_h).

enum class PckBasis { image, bbox };

inline double pck(const std::vector<std::array<double, 2>>& pred,
                  const std::vector<std::array<double, 2>>& gt, double alpha, double basis_w,
                  double basis_h) {
    if (pred.size() != gt.size())
        throw validation_error("pck: " + std::to_string(pred.size()) + " predictions vs " +
                               std::to_string(gt.size()) + " ground-truth points");
    if (pred.empty()) throw validation_error("pck needs at least one keypoint");
    if (!(alpha > 0)) throw validation_error("pck alpha must be > 0");
    if (!(basis_w > 0) || !(basis_h > 0))
        throw validation_error("pck basis dims must be positive");
    const double thresh = alpha * std::max(basis_w, basis_h);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double dx = pred[i][0] - gt[i][0], dy = pred[i][1] - gt[i][1];
        if (std::sqrt(dx * dx + dy * dy) <= thresh) ++ok;
    }
    return double(ok) / double(pred.size());
}

// ---------------------------------------------------------------------------
// Matching pipeline: hyperpixel -> (optional head) -> correlation ->
// raw affinity | OT [| RHM] -> soft-argmax keypoint readout.

struct MatchConfig {
    std::vector<std::size_t> layers{0};
    double t = 0.0007;  // affinity temperature for the raw path
    bool use_ot = true;
    bool use_rhm = true;
    bool ot_on_affinity = false;  // feed exponentiated similarity to OT instead of raw scores
    bool use_attention_marginals = false;
    SinkhornConfig sinkhorn;
    HoughConfig hough;
    const EncoderParams* encoder = nullptr;  // optional trained pixel head
};

struct MatchResult {
    std::vector<std::array<double, 2>> pred_kps;
    GridDims src_grid, trg_grid;
    int sinkhorn_iters = 0;
    double marginal_violation = 0.0;
};

namespace detail {
inline FeatureMap matching_features(const FeatureStack& s, const MatchConfig& cfg) {
    FeatureMap h = construct_hyperpixel(s, cfg.layers);
    if (cfg.encoder) {
        h = encode(h, *cfg.encoder, Branch::query);
        l2_normalize_positions(h);
    }
    return h;
}
}  // namespace detail

// Final score matrix between two stacks under the configured pipeline.
inline Tensor match_scores(const FeatureStack& src, const FeatureStack& trg,
                           const MatchConfig& cfg, MatchResult* diag = nullptr) {
    FeatureMap hs = detail::matching_features(src, cfg);
    FeatureMap ht = detail::matching_features(trg, cfg);
    CorrelationMatrix r = correlation(hs, ht);
    if (diag) {
        diag->src_grid = r.src;
        diag->trg_grid = r.trg;
    }

    Tensor scores;
    if (cfg.use_ot) {
        CorrelationMatrix basis = r;
        if (cfg.ot_on_affinity) basis.values = affinity(r, cfg.t).values;
        std::vector<double> mu = cfg.use_attention_marginals
                                     ? attention_marginals(attention_map(src))
                                     : uniform_marginals(r.values.rows());
        std::vector<double> nu = cfg.use_attention_marginals
                                     ? attention_marginals(attention_map(trg))
                                     : uniform_marginals(r.values.cols());
        TransportMatrix plan = sinkhorn_ot(basis, mu, nu, cfg.sinkhorn);
        if (diag) {
            diag->sinkhorn_iters = plan.iterations;
            diag->marginal_violation = plan.marginal_violation;
        }
        // The plan replaces correlation as the similarity; the same
        // temperature sharpening then feeds the readout on every path.
        // A plan row carries mass 1/rows, so the temperature shrinks by
        // the row count to keep the sharpening comparable.
        CorrelationMatrix plan_sim{std::move(plan.values), r.src, r.trg};
        scores = affinity(plan_sim, cfg.t / double(plan_sim.values.rows())).values;
    } else {
        scores = affinity(r, cfg.t).values;
    }
    if (cfg.use_rhm)
        scores = rhm(scores, make_position_grid(r.src), make_position_grid(r.trg), cfg.hough);
    return scores;
}

inline MatchResult match_pair(const FeatureStack& src, const FeatureStack& trg,
                              const std::vector<std::array<double, 2>>& src_kps,
                              const MatchConfig& cfg) {
    MatchResult res;
    Tensor scores = match_scores(src, trg, cfg, &res);
    res.pred_kps = match_keypoints(scores, src_kps, res.src_grid, res.trg_grid,
                                   double(src.img_w), double(src.img_h), double(trg.img_w),
                                   double(trg.img_h));
    return res;
}

// ---------------------------------------------------------------------------
// Dataset evaluation.

struct PairRecord {
    std::string src_id, trg_id, category;
    std::vector<double> pck_at;  // aligned with EvalReport::alphas
    std::vector<std::array<double, 2>> pred_kps;
    int sinkhorn_iters = 0;
    double marginal_violation = 0.0;
};

struct EvalReport {
    std::vector<double> alphas;
    PckBasis basis = PckBasis::bbox;
    std::vector<double> mean_pck;    // per alpha, averaged over pairs
    std::vector<PairRecord> pairs;   // sorted by (src_id, trg_id)
};

using StackLookup = std::function<const FeatureStack&(const std::string&)>;

inline StackLookup map_lookup(const std::map<std::string, FeatureStack>& stacks) {
    return [&stacks](const std::string& id) -> const FeatureStack& {
        auto it = stacks.find(id);
        if (it == stacks.end()) throw io_error("no feature stack for '" + id + "'");
        return it->second;
    };
}

// Pairs are scored independently (optionally across threads) and aggregated
// in (src_id, trg_id) order, so the report never depends on input order.
inline EvalReport evaluate_dataset(const std::vector<PairAnnotation>& annotations,
                                   const StackLookup& stacks, const MatchConfig& cfg,
                                   std::vector<double> alphas, PckBasis basis,
                                   std::size_t threads = 1) {
    if (annotations.empty()) throw validation_error("evaluation needs at least one pair");
    if (alphas.empty()) throw validation_error("evaluation needs at least one alpha");
    for (double a : alphas)
        if (!(a > 0)) throw validation_error("pck alpha must be > 0");

    EvalReport report;
    report.alphas = alphas;
    report.basis = basis;
    report.pairs.resize(annotations.size());

    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(annotations.size());
    auto worker = [&] {
        for (std::size_t i = next.fetch_add(1); i < annotations.size();
             i = next.fetch_add(1)) {
            const PairAnnotation& ann = annotations[i];
            try {
                const FeatureStack* src;
                const FeatureStack* trg;
                try {
                    src = &stacks(ann.src_id);
                    trg = &stacks(ann.trg_id);
                } catch (const io_error& e) {
                    throw io_error("pair " + ann.src_id + " -> " + ann.trg_id + ": " +
                                   e.what());
                }
                ann.validate();
                MatchResult m = match_pair(*src, *trg, ann.src_kps, cfg);

                PairRecord rec;
                rec.src_id = ann.src_id;
                rec.trg_id = ann.trg_id;
                rec.category = ann.category;
                rec.pred_kps = m.pred_kps;
                rec.sinkhorn_iters = m.sinkhorn_iters;
                rec.marginal_violation = m.marginal_violation;
                for (double a : alphas) {
                    double bw = basis == PckBasis::bbox ? ann.trg_bbox[2] : double(trg->img_w);
                    double bh = basis == PckBasis::bbox ? ann.trg_bbox[3] : double(trg->img_h);
                    rec.pck_at.push_back(pck(m.pred_kps, ann.trg_kps, a, bw, bh));
                }
                report.pairs[i] = std::move(rec);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };

    std::size_t n_workers = std::max<std::size_t>(1, std::min(threads, annotations.size()));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::sort(report.pairs.begin(), report.pairs.end(),
              [](const PairRecord& a, const PairRecord& b) {
                  return std::tie(a.src_id, a.trg_id) < std::tie(b.src_id, b.trg_id);
              });
    report.mean_pck.assign(alphas.size(), 0.0);
    for (const PairRecord& rec : report.pairs)
        for (std::size_t k = 0; k < alphas.size(); ++k) report.mean_pck[k] += rec.pck_at[k];
    for (double& v : report.mean_pck) v /= double(report.pairs.size());
    return report;
}

// ---------------------------------------------------------------------------
// Ground-truth-free layer selection: beam search on the cycle indicator.

struct BeamState {
    std::vector<std::size_t> layers;  // ascending
    double score = 0.0;
};

// Mean masked cycle distance (RMS variant for cross-pair comparability) of an
// augmented view of s0 carried through s1 and back; no keypoints involved.
inline double pair_cycle_indicator(const FeatureStack& s0, const FeatureStack& s1,
                                   const std::vector<std::size_t>& layers, double t,
                                   const EncoderParams* enc, const CropConfig& crop,
                                   std::uint64_t seed) {
    AttentionMap att = attention_map(s0);
    auto [crop0, rec] = attention_guided_crop(s0, att, seed, crop);

    auto feats = [&](const FeatureStack& s) {
        FeatureMap h = construct_hyperpixel(s, layers);
        if (enc) {
            h = encode(h, *enc, Branch::query);
            l2_normalize_positions(h);
        }
        return h;
    };
    FeatureMap h0p = feats(crop0), h0 = feats(s0), h1 = feats(s1);
    GridDims src_dims{h0.height, h0.width};

    AffinityMatrix a_0p1 = affinity(correlation(h0p, h1), t);
    AffinityMatrix a_10 = affinity(correlation(h1, h0), t);
    PositionGrid p = transfer_positions(cycle_affinity(a_0p1, a_10),
                                        make_position_grid(src_dims));
    auto [p_hat, mask] = ground_truth_positions(rec, src_dims);
    return pixel_cycle_loss(p, p_hat, mask, /*mean_variant=*/true);
}

// Averages the indicator over at most `cap` pairs with per-pair fixed seeds,
// so every candidate subset sees the exact same augmentations.
inline std::function<double(const std::vector<std::size_t>&)> make_subset_indicator(
    const std::vector<PairAnnotation>& pairs, const StackLookup& stacks, double t,
    const EncoderParams* enc, const CropConfig& crop, std::uint64_t base_seed,
    std::size_t cap = 50) {
    if (pairs.empty()) throw validation_error("beam search needs at least one pair");
    std::size_t n = std::min(cap, pairs.size());
    return [=](const std::vector<std::size_t>& layers) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            total += pair_cycle_indicator(stacks(pairs[i].src_id), stacks(pairs[i].trg_id),
                                          layers, t, enc, crop, base_seed + i);
        return total / double(n);
    };
}

// Grows ascending layer subsets breadth-first, keeping the beam_width best
// states per depth; returns the lowest-scoring subset seen anywhere, ties
// broken lexicographically. Ascending growth visits each subset exactly once.
inline std::vector<std::size_t> beam_search(
    std::size_t n_layers, const std::function<double(const std::vector<std::size_t>&)>& loss,
    std::size_t beam_width, std::size_t max_layers) {
    if (n_layers == 0) throw validation_error("beam search needs at least one layer");
    if (beam_width < 1) throw validation_error("beam width must be >= 1");
    if (max_layers < 1) throw validation_error("max layers must be >= 1");

    auto better = [](const BeamState& a, const BeamState& b) {
        if (a.score != b.score) return a.score < b.score;
        return a.layers < b.layers;
    };

    std::vector<BeamState> beam;
    BeamState best;
    bool have_best = false;
    for (std::size_t depth = 0; depth < std::min(max_layers, n_layers); ++depth) {
        std::vector<BeamState> candidates;
        if (depth == 0) {
            for (std::size_t l = 0; l < n_layers; ++l) {
                BeamState s{{l}, 0.0};
                s.score = loss(s.layers);
                if (!std::isfinite(s.score))
                    throw validation_error("subset loss is not finite for a candidate");
                candidates.push_back(std::move(s));
            }
        } else {
            for (const BeamState& state : beam)
                for (std::size_t l = state.layers.back() + 1; l < n_layers; ++l) {
                    BeamState s{state.layers, 0.0};
                    s.layers.push_back(l);
                    s.score = loss(s.layers);
                    if (!std::isfinite(s.score))
                        throw validation_error("subset loss is not finite for a candidate");
                    candidates.push_back(std::move(s));
                }
        }
        if (candidates.empty()) break;
        std::sort(candidates.begin(), candidates.end(), better);
        if (candidates.size() > beam_width) candidates.resize(beam_width);
        if (!have_best || better(candidates.front(), best)) {
            best = candidates.front();
            have_best = true;
        }
        beam = std::move(candidates);
    }
    return best.layers;
}

}  // namespace semcorr
