// Copyright (c) 2026, the saelab authors
// SPDX-License-Identifier: Apache-2.0
//
// The trainable linear projector from vision-encoder space into the LM
// embedding space, and its joint training objective:
//   L_total = L_CE + weight * L_SAE
//   L_SAE   = (1/|M|) sum_{l in M} mean_i || SAE_l(e_v^l,i) - e_v^l,i ||^2
// over the visual-token rows of the residual stream at the constrained
// layers M. The LM and SAEs stay frozen (no updates), but gradients flow
// through them into the projector parameters.
#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "saelab/checkpoint.hpp"
#include "saelab/lm.hpp"
#include "saelab/sae.hpp"

namespace saelab {

struct Projector {
    Tensor w_p;  // [d_llm x d_v]
    Tensor b_p;  // [d_llm]

    static Projector init(int d_llm, int d_v, uint64_t seed, double init_std = 0.08) {
        Rng rng(mix_seed(seed, 0x70726f6aULL /*"proj"*/));
        Projector p;
        p.w_p = Tensor::randn({static_cast<size_t>(d_llm), static_cast<size_t>(d_v)}, rng, init_std, true);
        p.b_p = Tensor::zeros({static_cast<size_t>(d_llm)}, true);
        return p;
    }

    int d_llm() const { return static_cast<int>(w_p.shape()[0]); }
    int d_v() const { return static_cast<int>(w_p.shape()[1]); }

    /// v: [N x d_v] -> [N x d_llm], rows mapped affinely.
    Tensor project(const Tensor& v) const {
        if (v.ndim() != 2 || v.shape()[1] != w_p.shape()[1])
            throw DimensionError("projector: input " + shape_str(v.shape()) + " vs weight " +
                                 shape_str(w_p.shape()));
        return add_rowvec(matmul(v, transpose(w_p)), b_p);
    }

    std::vector<Tensor> params() { return {w_p, b_p}; }
    std::vector<Tensor> params() const { return {w_p, b_p}; }
    uint64_t checksum() const { return params_checksum(params()); }

    void save(const std::filesystem::path& path) const {
        save_container(path, {{"projector.w_p", w_p}, {"projector.b_p", b_p}});
    }

    static Projector load(const std::filesystem::path& path) {
        NamedTensorList entries = load_container(path);
        Projector p;
        p.w_p = container_get(entries, "projector.w_p");
        p.b_p = container_get(entries, "projector.b_p");
        p.w_p.set_requires_grad(true);
        p.b_p.set_requires_grad(true);
        return p;
    }
};

/// One multimodal training/eval example: encoded visual tokens plus a text
/// prompt and the target continuation.
struct SceneExample {
    Scene scene;
    Tensor visual;            // [N x d_v], encoder output, fixed at dataset build
    std::vector<int> prompt;  // BOS ... (captioning: just BOS; QA: the question)
    std::vector<int> target;  // continuation to score, ends with EOS
};

struct ProjectorTrainConfig {
    std::vector<int> sae_layers;  // M; constrained layers, must carry trained SAEs
    double sae_weight = 1.0;
    bool stage_captions = true;
    bool stage_qa = true;
    bool sae_loss_in_qa_stage = true;
    // The fine-tuning stage trains on answers and image descriptions; QA-only
    // fine-tuning forgets captioning outright at this scale.
    bool captions_in_qa_stage = true;
    // First epochs of the caption stage run CE-only; the reconstruction term
    // otherwise swamps the task gradient before the projector finds any
    // scene-discriminative mapping.
    int ce_warmup_epochs = 3;
    int epochs_captions = 12;
    int epochs_qa = 8;
    double lr = 3e-3;
    int batch_size = 8;
    uint64_t seed = 1;
};

struct LossBreakdown {
    double l_ce = 0.0;
    double l_sae = 0.0;
    double l_total = 0.0;
    std::vector<std::pair<int, double>> per_layer;  // (layer, sae term)
};

struct JointLossResult {
    Tensor total;  // differentiable scalar
    LossBreakdown breakdown;
};

using SaeSet = std::map<int, SaeModel>;  // layer -> model

/// Builds [projected visual || prompt || target] and evaluates the joint
/// objective. Gradients reach only the projector parameters when the LM and
/// SAEs are frozen, flowing through both.
inline JointLossResult joint_loss(const Projector& proj, const ToyLm& lm, const SaeSet& saes,
                                  const SceneExample& ex, const std::vector<int>& sae_layers,
                                  double sae_weight) {
    for (int l : sae_layers)
        if (!saes.count(l))
            throw ConfigError("joint_loss: constrained layer " + std::to_string(l) +
                              " has no trained SAE");

    size_t n_vis = ex.visual.shape()[0];
    std::vector<int> text_ids = ex.prompt;
    text_ids.insert(text_ids.end(), ex.target.begin(), ex.target.end() - 1);
    Tensor embeds = concat_rows({proj.project(ex.visual), lm.embed_tokens(text_ids)});

    std::set<int> tap_set(sae_layers.begin(), sae_layers.end());
    LmForwardResult fwd = lm.forward(embeds, tap_set);

    size_t seq = embeds.shape()[0];
    std::vector<int> targets(seq, 0);
    std::vector<bool> mask(seq, false);
    size_t first = n_vis + ex.prompt.size() - 1;
    for (size_t j = 0; j < ex.target.size(); ++j) {
        targets[first + j] = ex.target[j];
        mask[first + j] = true;
    }
    Tensor ce = softmax_cross_entropy(fwd.logits, targets, mask);

    JointLossResult out;
    out.breakdown.l_ce = ce.value();

    Tensor sae_term;
    if (!sae_layers.empty()) {
        for (const ResidualTap& tap : fwd.taps) {
            Tensor vis = slice_rows(tap.activations, 0, n_vis);
            Tensor diff = sub(saes.at(tap.layer).reconstruct(vis), vis);
            Tensor layer_term = mul_scalar(sum(square(diff)), 1.0 / static_cast<double>(n_vis));
            out.breakdown.per_layer.push_back({tap.layer, layer_term.value()});
            sae_term = sae_term.defined() ? add(sae_term, layer_term) : layer_term;
        }
        sae_term = mul_scalar(sae_term, 1.0 / static_cast<double>(sae_layers.size()));
    } else {
        sae_term = Tensor::scalar(0.0);  // empty-set convention
    }
    out.breakdown.l_sae = sae_term.value();
    out.total = add(ce, mul_scalar(sae_term, sae_weight));
    out.breakdown.l_total = out.total.value();
    return out;
}

struct TrainEpochRecord {
    std::string stage;
    int epoch = 0;
    double l_ce = 0.0;
    double l_sae = 0.0;
    double l_total = 0.0;
    std::map<int, double> per_layer;
    double holdout_ce = 0.0;
    double holdout_accuracy = 0.0;
};

struct ProjectorTrainResult {
    Projector projector;
    std::vector<TrainEpochRecord> log;
};

/// Greedy exact-match accuracy over QA examples.
inline double qa_accuracy(const Projector& proj, const ToyLm& lm,
                          const std::vector<SceneExample>& qa) {
    if (qa.empty()) return 0.0;
    size_t hits = 0;
    for (const SceneExample& ex : qa) {
        Tensor prefix = concat_rows({proj.project(ex.visual), lm.embed_tokens(ex.prompt)});
        std::vector<int> gen = lm.generate(prefix, static_cast<int>(ex.target.size()) + 2);
        std::vector<int> want(ex.target.begin(), ex.target.end());
        if (gen == want) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(qa.size());
}

inline double mean_holdout_ce(const Projector& proj, const ToyLm& lm, const SaeSet& saes,
                              const std::vector<SceneExample>& items) {
    if (items.empty()) return 0.0;
    double total = 0.0;
    for (const SceneExample& ex : items) total += joint_loss(proj, lm, saes, ex, {}, 0.0).breakdown.l_ce;
    return total / static_cast<double>(items.size());
}

/// Two-stage projector training (captions, then QA); the only trainable
/// parameters are the projector's. Throws TrainingError on divergence.
inline ProjectorTrainResult train_projector(const ToyLm& lm, const SaeSet& saes,
                                            const std::vector<SceneExample>& captions,
                                            const std::vector<SceneExample>& qa,
                                            const std::vector<SceneExample>& holdout_qa,
                                            const ProjectorTrainConfig& cfg, int d_v) {
    for (int l : cfg.sae_layers) {
        if (l < 0 || l >= lm.config().n_layers)
            throw ConfigError("train_projector: constrained layer " + std::to_string(l) +
                              " outside [0, " + std::to_string(lm.config().n_layers) + ")");
        if (!saes.count(l))
            throw ConfigError("train_projector: no trained SAE for constrained layer " +
                              std::to_string(l));
    }

    ProjectorTrainResult result;
    result.projector = Projector::init(lm.config().d_model, d_v, cfg.seed);
    Projector& proj = result.projector;
    Optimizer opt({OptimizerKind::adam, cfg.lr});
    std::vector<Tensor> params = proj.params();
    Rng order_rng(mix_seed(cfg.seed, 0x706f7264ULL /*"pord"*/));

    auto run_stage = [&](const char* stage, const std::vector<SceneExample>& items, int epochs,
                         bool with_sae, int warmup) {
        for (int epoch = 0; epoch < epochs; ++epoch) {
            std::vector<int> layers =
                (with_sae && epoch >= warmup) ? cfg.sae_layers : std::vector<int>{};
            std::vector<size_t> order(items.size());
            for (size_t i = 0; i < order.size(); ++i) order[i] = i;
            order_rng.shuffle(order);

            TrainEpochRecord rec;
            rec.stage = stage;
            rec.epoch = epoch;
            size_t count = 0;
            for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
                size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
                opt.zero_grad(params);
                for (size_t i = start; i < end; ++i) {
                    JointLossResult jl =
                        joint_loss(proj, lm, saes, items[order[i]], layers, cfg.sae_weight);
                    if (!std::isfinite(jl.breakdown.l_total))
                        throw TrainingError(std::string("train_projector: loss diverged in stage ") +
                                            stage + " epoch " + std::to_string(epoch));
                    backward(mul_scalar(jl.total, 1.0 / static_cast<double>(end - start)));
                    rec.l_ce += jl.breakdown.l_ce;
                    rec.l_sae += jl.breakdown.l_sae;
                    rec.l_total += jl.breakdown.l_total;
                    for (const auto& [l, v] : jl.breakdown.per_layer) rec.per_layer[l] += v;
                    ++count;
                }
                opt.step(params);
            }
            if (count) {
                rec.l_ce /= static_cast<double>(count);
                rec.l_sae /= static_cast<double>(count);
                rec.l_total /= static_cast<double>(count);
                for (auto& [l, v] : rec.per_layer) v /= static_cast<double>(count);
            }
            rec.holdout_ce = mean_holdout_ce(proj, lm, saes, holdout_qa);
            rec.holdout_accuracy = qa_accuracy(proj, lm, holdout_qa);
            result.log.push_back(std::move(rec));
        }
    };

    if (cfg.stage_captions) run_stage("captions", captions, cfg.epochs_captions, true, cfg.ce_warmup_epochs);
    if (cfg.stage_qa) {
        std::vector<SceneExample> stage2 = qa;
        if (cfg.captions_in_qa_stage) stage2.insert(stage2.end(), captions.begin(), captions.end());
        run_stage("qa", stage2, cfg.epochs_qa, cfg.sae_loss_in_qa_stage, 0);
    }
    return result;
}

}  // namespace saelab
