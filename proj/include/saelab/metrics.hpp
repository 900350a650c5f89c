// Copyright (c) 2026, the saelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics over the aligned visual tokens: per-layer SAE
// reconstruction error and feature sparsity (visual vs text rows), top-k
// matching rate against ground-truth concept sets, spatial localization
// accuracy against ground-truth boxes, active-token counts, clustering by
// top latent, and QA task accuracy. All ties break toward the lowest index.
#pragma once

#include <map>
#include <optional>
#include <set>
#include <vector>

#include "saelab/projector.hpp"

namespace saelab {

struct LayerMetrics {
    int layer = 0;
    double err_visual = 0.0;
    double err_text = 0.0;
    double sparsity_visual = 0.0;
    double sparsity_text = 0.0;
    double match_rate = 0.0;
};

struct SlaReport {
    size_t n_candidates = 0;  // top-k latents examined
    size_t n_filtered = 0;    // kept: localizable label naming a present concept
    size_t n_hits = 0;        // argmax token inside the concept's box
    std::optional<double> sla;
};

/// Residual taps of one scene's captioning sequence, split into visual and
/// text rows, indexed by layer.
struct SceneTaps {
    std::vector<Tensor> visual;  // [N x d_llm] per layer
    std::vector<Tensor> text;    // [T x d_llm] per layer
};

inline SceneTaps collect_scene_taps(const Projector& proj, const ToyLm& lm, const SceneExample& ex) {
    size_t n_vis = ex.visual.shape()[0];
    std::vector<int> text_ids = ex.prompt;
    text_ids.insert(text_ids.end(), ex.target.begin(), ex.target.end() - 1);
    Tensor embeds = concat_rows({proj.project(ex.visual), lm.embed_tokens(text_ids)});
    std::set<int> all_layers;
    for (int l = 0; l < lm.config().n_layers; ++l) all_layers.insert(l);
    LmForwardResult fwd = lm.forward(embeds, all_layers);
    SceneTaps taps;
    taps.visual.resize(static_cast<size_t>(lm.config().n_layers));
    taps.text.resize(static_cast<size_t>(lm.config().n_layers));
    for (const ResidualTap& t : fwd.taps) {
        taps.visual[static_cast<size_t>(t.layer)] = slice_rows(t.activations, 0, n_vis);
        taps.text[static_cast<size_t>(t.layer)] =
            slice_rows(t.activations, n_vis, embeds.shape()[0] - n_vis);
    }
    return taps;
}

/// Err_l = mean over rows of ||x - SAE_l(x)||^2, separately for visual and
/// text rows.
inline std::pair<double, double> recon_error(const SaeModel& sae, const Tensor& visual_taps,
                                             const Tensor& text_taps) {
    auto err = [&sae](const Tensor& x) {
        if (x.shape()[0] == 0) return 0.0;
        Tensor rec = sae.reconstruct(x);
        double total = 0.0;
        for (size_t i = 0; i < x.numel(); ++i) {
            double d = rec.at(i) - x.at(i);
            total += d * d;
        }
        return total / static_cast<double>(x.shape()[0]);
    };
    return {err(visual_taps), err(text_taps)};
}

/// S_l = mean fraction of strictly-positive code entries per row.
inline double sparsity(const SaeModel& sae, const Tensor& taps) {
    if (taps.shape()[0] == 0) return 0.0;
    Tensor codes = sae.encode(taps);
    size_t active = 0;
    for (size_t i = 0; i < codes.numel(); ++i)
        if (codes.at(i) > 0.0) ++active;
    return static_cast<double>(active) /
           (static_cast<double>(codes.shape()[0]) * static_cast<double>(sae.d_sae()));
}

/// Latent indices ranked by max activation over visual tokens, ties toward
/// the lower latent id. Returns the top k along with each latent's argmax
/// token position (ties toward the lower position).
struct RankedLatent {
    int latent = 0;
    double activation = 0.0;
    int argmax_token = 0;
};

inline std::vector<RankedLatent> top_latents(const SaeModel& sae, const Tensor& visual_tap, int k) {
    Tensor codes = sae.encode(visual_tap);
    size_t n = codes.shape()[0];
    int d_sae = sae.d_sae();
    std::vector<RankedLatent> all(static_cast<size_t>(d_sae));
    for (int j = 0; j < d_sae; ++j) {
        double best = codes.at(static_cast<size_t>(j));
        int best_pos = 0;
        for (size_t i = 1; i < n; ++i) {
            double v = codes.at(i * static_cast<size_t>(d_sae) + static_cast<size_t>(j));
            if (v > best) {
                best = v;
                best_pos = static_cast<int>(i);
            }
        }
        all[static_cast<size_t>(j)] = {j, best, best_pos};
    }
    std::stable_sort(all.begin(), all.end(), [](const RankedLatent& a, const RankedLatent& b) {
        return a.activation > b.activation;
    });
    if (static_cast<size_t>(k) < all.size()) all.resize(static_cast<size_t>(k));
    return all;
}

/// A scene matches at a layer when any of the top-k latents carries a label
/// whose concept is present in the scene (exact ground-truth membership in
/// place of an external judge).
inline bool scene_matches(const SaeModel& sae, const LatentLabelTable& table,
                          const Tensor& visual_tap, const Scene& scene, int k) {
    for (const RankedLatent& rl : top_latents(sae, visual_tap, k))
        if (scene.concept_set.count(table.at(rl.latent).concept_id)) return true;
    return false;
}

/// Per-layer matching rate over scenes; layer order follows `saes`.
inline std::map<int, double> matching_rate(const SaeSet& saes,
                                           const std::map<int, LatentLabelTable>& tables,
                                           const std::vector<SceneTaps>& taps,
                                           const std::vector<const Scene*>& scenes, int k = 3) {
    if (k < 1) throw ConfigError("matching_rate: k must be >= 1");
    std::map<int, double> rates;
    for (const auto& [layer, sae] : saes) {
        size_t matched = 0;
        for (size_t s = 0; s < scenes.size(); ++s)
            if (scene_matches(sae, tables.at(layer), taps[s].visual[static_cast<size_t>(layer)],
                              *scenes[s], k))
                ++matched;
        rates[layer] = scenes.empty() ? 0.0 : static_cast<double>(matched) /
                                                  static_cast<double>(scenes.size());
    }
    return rates;
}

inline double mean_of(const std::map<int, double>& per_layer) {
    if (per_layer.empty()) return 0.0;
    double total = 0.0;
    for (const auto& [l, v] : per_layer) total += v;
    return total / static_cast<double>(per_layer.size());
}

/// Spatial localization accuracy: of the top-k latents per scene/layer, keep
/// those whose label is localizable and names a present concept, then count
/// a hit when the latent's maximally-activating visual token lies inside the
/// concept's ground-truth patch set. Aggregated over scenes and layers.
inline SlaReport sla(const SaeSet& saes, const std::map<int, LatentLabelTable>& tables,
                     const std::vector<SceneTaps>& taps, const std::vector<const Scene*>& scenes,
                     int k = 3) {
    if (k < 1) throw ConfigError("sla: k must be >= 1");
    SlaReport report;
    for (const auto& [layer, sae] : saes) {
        const LatentLabelTable& table = tables.at(layer);
        for (size_t s = 0; s < scenes.size(); ++s) {
            const Scene& scene = *scenes[s];
            for (const RankedLatent& rl :
                 top_latents(sae, taps[s].visual[static_cast<size_t>(layer)], k)) {
                ++report.n_candidates;
                const LatentLabel& lab = table.at(rl.latent);
                if (!lab.localizable || !scene.concept_set.count(lab.concept_id)) continue;
                ++report.n_filtered;
                const std::vector<int>& box = scene.boxes.at(lab.concept_id);
                if (std::find(box.begin(), box.end(), rl.argmax_token) != box.end()) ++report.n_hits;
            }
        }
    }
    if (report.n_filtered > 0)
        report.sla = static_cast<double>(report.n_hits) / static_cast<double>(report.n_filtered);
    return report;
}

/// Number of distinct argmax token positions across layers, taking each
/// layer's single top latent.
inline int active_token_count(const SaeSet& saes, const SceneTaps& taps) {
    std::set<int> positions;
    for (const auto& [layer, sae] : saes) {
        auto top = top_latents(sae, taps.visual[static_cast<size_t>(layer)], 1);
        if (!top.empty()) positions.insert(top.front().argmax_token);
    }
    return static_cast<int>(positions.size());
}

/// Clusters scenes by their top-1 latent at one layer. Purity of a cluster is
/// the fraction of member scenes actually containing the latent's concept.
struct ClusterReport {
    std::map<int, std::vector<size_t>> members;  // latent -> scene indices
    std::map<int, double> purity;                // latent -> purity
    double scene_weighted_purity = 0.0;
};

inline ClusterReport cluster_by_latent(const SaeModel& sae, const LatentLabelTable& table,
                                       const std::vector<SceneTaps>& taps,
                                       const std::vector<const Scene*>& scenes, int layer) {
    ClusterReport report;
    size_t correct = 0;
    for (size_t s = 0; s < scenes.size(); ++s) {
        auto top = top_latents(sae, taps[s].visual[static_cast<size_t>(layer)], 1);
        if (top.empty()) continue;
        report.members[top.front().latent].push_back(s);
    }
    for (const auto& [latent, members] : report.members) {
        size_t good = 0;
        for (size_t s : members)
            if (scenes[s]->concept_set.count(table.at(latent).concept_id)) ++good;
        report.purity[latent] = static_cast<double>(good) / static_cast<double>(members.size());
        correct += good;
    }
    report.scene_weighted_purity =
        scenes.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(scenes.size());
    return report;
}

}  // namespace saelab
