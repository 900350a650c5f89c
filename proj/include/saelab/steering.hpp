// Copyright (c) 2026, the saelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Localized concept interventions on visual-token hidden states:
//   h <- h - beta * v_remove      (removal)
//   h <- h + alpha * v_add        (replacement; combined when both set)
// applied post-block at each configured layer, at selected token positions,
// re-applied at every decoding step. Judging is an exact rule-based
// implementation over grammar-parsed captions against ground truth.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "saelab/metrics.hpp"
#include "saelab/projector.hpp"

namespace saelab {

enum class SteeringKind { remove, replace, attribute };
enum class SteeringScope { visual, text };

inline const char* steering_kind_name(SteeringKind k) {
    switch (k) {
        case SteeringKind::remove: return "remove";
        case SteeringKind::replace: return "replace";
        case SteeringKind::attribute: return "attribute";
    }
    return "?";
}

struct SteeringSpec {
    SteeringKind kind = SteeringKind::remove;
    std::optional<int> remove_concept;  // source concept (required for remove)
    std::optional<int> add_concept;     // target concept (required for replace)
    std::vector<int> target_positions;  // visual-token indices
    std::vector<int> layer_set = {0, 1, 2};
    double beta = 10.0;
    double alpha = 10.0;
    SteeringScope scope = SteeringScope::visual;
    double selectivity_floor = 0.3;

    void validate(int n_visual) const {
        if (alpha < 0.0 || beta < 0.0) throw ConfigError("steering: alpha and beta must be >= 0");
        if (kind == SteeringKind::remove && !remove_concept)
            throw ConfigError("steering: remove requires remove_concept");
        if (kind == SteeringKind::replace && !add_concept)
            throw ConfigError("steering: replace requires add_concept");
        for (int p : target_positions)
            if (p < 0 || p >= n_visual)
                throw ConfigError("steering: target position " + std::to_string(p) +
                                  " outside [0, " + std::to_string(n_visual) + ")");
    }
};

/// Per-layer residual edits realizing the spec. Text scope applies the edit
/// to every prompt-text position instead of the visual targets.
inline std::vector<ResidualEdit> build_steering_edits(const SaeSet& saes,
                                                      const std::map<int, LatentLabelTable>& tables,
                                                      const SteeringSpec& spec, int n_visual,
                                                      int prompt_rows) {
    std::vector<int> positions;
    if (spec.scope == SteeringScope::visual) {
        positions = spec.target_positions;
    } else {
        for (int p = n_visual; p < prompt_rows; ++p) positions.push_back(p);
    }
    std::vector<ResidualEdit> edits;
    for (int layer : spec.layer_set) {
        if (!saes.count(layer))
            throw ConfigError("steering: no SAE at layer " + std::to_string(layer));
        const SaeModel& sae = saes.at(layer);
        std::vector<double> delta(static_cast<size_t>(sae.d_llm()), 0.0);
        if (spec.remove_concept && (spec.kind == SteeringKind::remove ||
                                    (spec.kind == SteeringKind::replace && spec.add_concept))) {
            std::vector<double> dir =
                concept_direction(sae, *spec.remove_concept, tables.at(layer), spec.selectivity_floor);
            for (size_t j = 0; j < delta.size(); ++j) delta[j] -= spec.beta * dir[j];
        }
        if (spec.add_concept &&
            (spec.kind == SteeringKind::replace || spec.kind == SteeringKind::attribute)) {
            std::vector<double> dir =
                concept_direction(sae, *spec.add_concept, tables.at(layer), spec.selectivity_floor);
            for (size_t j = 0; j < delta.size(); ++j) delta[j] += spec.alpha * dir[j];
        }
        edits.push_back({layer, positions, std::move(delta)});
    }
    return edits;
}

/// Steered greedy generation from [projected visual || prompt].
inline std::vector<int> apply_steering(const ToyLm& lm, const SaeSet& saes,
                                       const std::map<int, LatentLabelTable>& tables,
                                       const Tensor& prefix_embeddings, int n_visual,
                                       const SteeringSpec& spec, int max_new) {
    spec.validate(n_visual);
    std::vector<ResidualEdit> edits = build_steering_edits(
        saes, tables, spec, n_visual, static_cast<int>(prefix_embeddings.shape()[0]));
    return lm.generate(prefix_embeddings, max_new, &edits);
}

// ---------------------------------------------------------------------------
// Judging
// ---------------------------------------------------------------------------

struct JudgeOutcome {
    int score = 0;  // in {0, 1, 2}
    bool steered_out_of_grammar = false;
};

/// Rule-based scoring of a steered caption against the baseline caption and
/// scene ground truth. A caption containing out-of-grammar tokens is treated
/// as containing no concepts and flagged.
inline JudgeOutcome judge(const World& world, const Scene& scene,
                          const std::vector<int>& baseline_caption,
                          const std::vector<int>& steered_caption, const SteeringSpec& spec) {
    World::ParsedCaption base = world.parse_caption(baseline_caption);
    World::ParsedCaption steer = world.parse_caption(steered_caption);
    JudgeOutcome out;
    out.steered_out_of_grammar = steer.out_of_grammar;
    std::set<int> base_set = base.all();
    std::set<int> steer_set = steer.out_of_grammar ? std::set<int>{} : steer.all();

    // (a) steering success check
    if (spec.kind == SteeringKind::remove) {
        if (spec.remove_concept && steer_set.count(*spec.remove_concept)) return out;  // score 0
    } else {
        if (spec.add_concept && !steer_set.count(*spec.add_concept)) return out;
        if (spec.remove_concept && steer_set.count(*spec.remove_concept)) return out;
    }

    // (b) baseline comparison: no additions beyond the target
    std::set<int> allowed = base_set;
    if (spec.add_concept) allowed.insert(*spec.add_concept);
    std::vector<int> fresh;
    for (int c : steer_set)
        if (!allowed.count(c)) fresh.push_back(c);
    if (fresh.empty()) {
        out.score = 2;
        return out;
    }

    // (c) image grounding of newly introduced concepts
    for (int c : fresh) {
        if (!scene.concept_set.count(c)) {
            out.score = 1;
            return out;
        }
    }
    out.score = 2;
    return out;
}

/// Eq.-style weighted mean: (2*N_S2 + N_S1) / N_total, bounded [0, 2].
inline double mean_score(size_t n_s2, size_t n_s1, size_t n_total) {
    if (n_total == 0) throw ContractError("mean_score: empty sample");
    return (2.0 * static_cast<double>(n_s2) + static_cast<double>(n_s1)) /
           static_cast<double>(n_total);
}

struct SteeringReport {
    size_t n_s2 = 0;
    size_t n_s1 = 0;
    size_t n_s0 = 0;
    size_t n_total = 0;
    double mean = 0.0;
};

struct SteeringRecord {
    uint64_t scene_seed = 0;
    SteeringKind kind = SteeringKind::remove;
    int source_concept = -1;
    int target_concept = -1;  // replace target; -1 for remove
    std::vector<int> baseline;
    std::vector<int> steered;
    int score = 0;
    bool out_of_grammar = false;
};

struct SteeringEvalConfig {
    int n_scenes = 100;
    int max_new = 14;
    int min_box_patches = 1;  // desk analog of the paper's area filter
    int max_box_patches = 5;
    std::vector<int> layer_set = {0, 1, 2};
    double alpha = 10.0;
    double beta = 10.0;
    double selectivity_floor = 0.3;
    uint64_t seed = 1;
};

struct SteeringEvalResult {
    SteeringReport report;
    std::vector<SteeringRecord> records;
    size_t n_skipped_no_direction = 0;
    size_t n_skipped_filter = 0;
};

/// Quantitative steering evaluation over a scene pool. Scenes pass a
/// box-coverage filter; the steered object is drawn per scene from a seeded
/// stream, replace targets uniformly from absent object concepts.
inline SteeringEvalResult run_steering_eval(const Projector& proj, const ToyLm& lm,
                                            const SaeSet& saes,
                                            const std::map<int, LatentLabelTable>& tables,
                                            const World& world,
                                            const std::vector<SceneExample>& pool,
                                            SteeringKind kind, const SteeringEvalConfig& cfg) {
    if (kind == SteeringKind::attribute)
        throw ConfigError("run_steering_eval: use attribute_steer for attribute interventions");
    SteeringEvalResult result;
    Rng rng(mix_seed(cfg.seed, 0x73746565ULL /*"stee"*/));

    for (const SceneExample& ex : pool) {
        if (result.report.n_total >= static_cast<size_t>(cfg.n_scenes)) break;
        const Scene& scene = ex.scene;

        std::vector<int> objects;
        for (int c : scene.concept_set)
            if (world.concept_by_id(c).kind == ConceptKind::object) objects.push_back(c);
        if (objects.empty()) continue;
        int source = objects[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(objects.size()) - 1))];

        const std::vector<int>& box = scene.boxes.at(source);
        if (static_cast<int>(box.size()) < cfg.min_box_patches ||
            static_cast<int>(box.size()) > cfg.max_box_patches) {
            ++result.n_skipped_filter;
            continue;
        }

        SteeringSpec spec;
        spec.kind = kind;
        spec.remove_concept = source;
        spec.layer_set = cfg.layer_set;
        spec.alpha = cfg.alpha;
        spec.beta = cfg.beta;
        spec.selectivity_floor = cfg.selectivity_floor;
        spec.target_positions = box;
        if (kind == SteeringKind::replace) {
            std::vector<int> absent;
            for (int c = 0; c < world.num_objects(); ++c)
                if (!scene.concept_set.count(c)) absent.push_back(c);
            if (absent.empty()) continue;
            spec.add_concept =
                absent[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(absent.size()) - 1))];
        }

        Tensor prefix = concat_rows({proj.project(ex.visual), lm.embed_tokens({TokenVocab::kBos})});
        std::vector<int> baseline = lm.generate(prefix, cfg.max_new);
        std::vector<int> steered;
        try {
            steered = apply_steering(lm, saes, tables, prefix, scene.num_patches(), spec, cfg.max_new);
        } catch (const NoDirectionError&) {
            ++result.n_skipped_no_direction;
            continue;
        }

        JudgeOutcome outcome = judge(world, scene, baseline, steered, spec);
        SteeringRecord rec;
        rec.scene_seed = scene.scene_seed;
        rec.kind = kind;
        rec.source_concept = source;
        rec.target_concept = spec.add_concept.value_or(-1);
        rec.baseline = baseline;
        rec.steered = steered;
        rec.score = outcome.score;
        rec.out_of_grammar = outcome.steered_out_of_grammar;
        result.records.push_back(std::move(rec));

        ++result.report.n_total;
        if (outcome.score == 2)
            ++result.report.n_s2;
        else if (outcome.score == 1)
            ++result.report.n_s1;
        else
            ++result.report.n_s0;
    }
    if (result.report.n_total)
        result.report.mean =
            mean_score(result.report.n_s2, result.report.n_s1, result.report.n_total);
    return result;
}

// ---------------------------------------------------------------------------
// High-level concept (attribute) steering
// ---------------------------------------------------------------------------

struct AttributeSteerResult {
    std::vector<int> before_answer;
    std::vector<int> after_answer;
};

/// Adds an attribute direction over the subject's patches and probes a yes/no
/// question before and after.
inline AttributeSteerResult attribute_steer(const Projector& proj, const ToyLm& lm,
                                            const SaeSet& saes,
                                            const std::map<int, LatentLabelTable>& tables,
                                            const World& world, const SceneExample& ex,
                                            int subject_object, int attribute_concept,
                                            const SteeringEvalConfig& cfg) {
    const Scene& scene = ex.scene;
    std::vector<int> question = world.attribute_question(subject_object, attribute_concept);
    Tensor prefix = concat_rows({proj.project(ex.visual), lm.embed_tokens(question)});

    AttributeSteerResult out;
    out.before_answer = lm.generate(prefix, 3);

    SteeringSpec spec;
    spec.kind = SteeringKind::attribute;
    spec.add_concept = attribute_concept;
    spec.target_positions = scene.boxes.at(subject_object);
    spec.layer_set = cfg.layer_set;
    spec.alpha = cfg.alpha;
    spec.beta = cfg.beta;
    spec.selectivity_floor = cfg.selectivity_floor;
    out.after_answer = apply_steering(lm, saes, tables, prefix, scene.num_patches(), spec, 3);
    return out;
}

// ---------------------------------------------------------------------------
// Visual vs text-token steering comparison
// ---------------------------------------------------------------------------

struct ThreeWayComparison {
    std::vector<int> baseline;
    std::vector<int> visual_steered;
    std::vector<int> text_steered_with_image;
    std::vector<int> text_steered_no_image;
    int score_visual = 0;
    int score_text_with_image = 0;
    int score_text_no_image = 0;
};

/// Applies the same remove+add direction under three regimes: visual-token
/// steering, prompt-text steering with the image present, and prompt-text
/// steering without any image.
inline ThreeWayComparison text_vs_visual_comparison(const Projector& proj, const ToyLm& lm,
                                                    const SaeSet& saes,
                                                    const std::map<int, LatentLabelTable>& tables,
                                                    const World& world, const SceneExample& ex,
                                                    int source_concept, int target_concept,
                                                    const SteeringEvalConfig& cfg) {
    const Scene& scene = ex.scene;
    ThreeWayComparison out;

    SteeringSpec spec;
    spec.kind = SteeringKind::replace;
    spec.remove_concept = source_concept;
    spec.add_concept = target_concept;
    spec.layer_set = cfg.layer_set;
    spec.alpha = cfg.alpha;
    spec.beta = cfg.beta;
    spec.selectivity_floor = cfg.selectivity_floor;

    Tensor prefix = concat_rows({proj.project(ex.visual), lm.embed_tokens({TokenVocab::kBos})});
    out.baseline = lm.generate(prefix, cfg.max_new);

    spec.scope = SteeringScope::visual;
    spec.target_positions = scene.boxes.at(source_concept);
    out.visual_steered = apply_steering(lm, saes, tables, prefix, scene.num_patches(), spec, cfg.max_new);
    out.score_visual = judge(world, scene, out.baseline, out.visual_steered, spec).score;

    spec.scope = SteeringScope::text;
    spec.target_positions.clear();
    out.text_steered_with_image =
        apply_steering(lm, saes, tables, prefix, scene.num_patches(), spec, cfg.max_new);
    out.score_text_with_image =
        judge(world, scene, out.baseline, out.text_steered_with_image, spec).score;

    Tensor bos_only = lm.embed_tokens({TokenVocab::kBos});
    out.text_steered_no_image = apply_steering(lm, saes, tables, bos_only, 0, spec, cfg.max_new);
    out.score_text_no_image =
        judge(world, scene, out.baseline, out.text_steered_no_image, spec).score;
    return out;
}

}  // namespace saelab
