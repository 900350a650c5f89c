// Copyright (c) 2026, the saelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Small frozen causal transformer with residual-stream taps at every layer.
// Pre-LayerNorm blocks; taps are taken after each block's residual addition.
#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "saelab/checkpoint.hpp"
#include "saelab/optim.hpp"
#include "saelab/tensor.hpp"
#include "saelab/vocab.hpp"

namespace saelab {

struct LmConfig {
    int vocab_size = 64;
    int d_model = 48;
    int n_layers = 4;
    int n_heads = 2;
    int max_seq = 64;
    double ln_eps = 1e-5;
    double init_std = 0.08;
};

/// Additive residual-stream edit applied after a block, at specific positions.
/// The same edit is re-applied on every forward pass, i.e. at every decoding
/// step during generation.
struct ResidualEdit {
    int layer = 0;
    std::vector<int> positions;
    std::vector<double> delta;  // length d_model
};

struct ResidualTap {
    int layer = -1;
    Tensor activations;  // [seq x d_model]
};

struct LmForwardResult {
    Tensor logits;  // [seq x vocab]
    std::vector<ResidualTap> taps;
};

class ToyLm {
public:
    static ToyLm init(const LmConfig& cfg, uint64_t seed) {
        if (cfg.d_model % cfg.n_heads != 0)
            throw ConfigError("lm: d_model " + std::to_string(cfg.d_model) + " not divisible by " +
                              std::to_string(cfg.n_heads) + " heads");
        ToyLm lm;
        lm.cfg_ = cfg;
        Rng rng(mix_seed(seed, 0x6c6d5f69ULL /*"lm_i"*/));
        size_t d = static_cast<size_t>(cfg.d_model);
        size_t v = static_cast<size_t>(cfg.vocab_size);
        size_t dh = d / static_cast<size_t>(cfg.n_heads);
        size_t hidden = 4 * d;
        auto w = [&](size_t r, size_t c) { return Tensor::randn({r, c}, rng, cfg.init_std, true); };

        lm.tok_embed_ = w(v, d);
        lm.pos_embed_ = w(static_cast<size_t>(cfg.max_seq), d);
        for (int l = 0; l < cfg.n_layers; ++l) {
            Block b;
            b.ln1_g = Tensor::full({d}, 1.0, true);
            b.ln1_b = Tensor::zeros({d}, true);
            for (int h = 0; h < cfg.n_heads; ++h) {
                b.wq.push_back(w(d, dh));
                b.wk.push_back(w(d, dh));
                b.wv.push_back(w(d, dh));
            }
            b.wo = w(d, d);
            b.ln2_g = Tensor::full({d}, 1.0, true);
            b.ln2_b = Tensor::zeros({d}, true);
            b.w1 = w(d, hidden);
            b.b1 = Tensor::zeros({hidden}, true);
            b.w2 = w(hidden, d);
            b.b2 = Tensor::zeros({d}, true);
            lm.blocks_.push_back(std::move(b));
        }
        lm.lnf_g = Tensor::full({d}, 1.0, true);
        lm.lnf_b = Tensor::zeros({d}, true);
        lm.unembed_ = w(d, v);
        return lm;
    }

    const LmConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }

    void freeze() {
        for (Tensor& p : params()) p.set_requires_grad(false);
        frozen_ = true;
    }

    std::vector<Tensor> params() {
        std::vector<Tensor> out = {tok_embed_, pos_embed_};
        for (Block& b : blocks_) {
            out.push_back(b.ln1_g);
            out.push_back(b.ln1_b);
            for (Tensor& t : b.wq) out.push_back(t);
            for (Tensor& t : b.wk) out.push_back(t);
            for (Tensor& t : b.wv) out.push_back(t);
            out.push_back(b.wo);
            out.push_back(b.ln2_g);
            out.push_back(b.ln2_b);
            out.push_back(b.w1);
            out.push_back(b.b1);
            out.push_back(b.w2);
            out.push_back(b.b2);
        }
        out.push_back(lnf_g);
        out.push_back(lnf_b);
        out.push_back(unembed_);
        return out;
    }

    std::vector<Tensor> params() const { return const_cast<ToyLm*>(this)->params(); }

    uint64_t checksum() const { return params_checksum(params()); }

    /// Token embeddings without positions; positions are added inside
    /// forward() so soft (visual) embeddings can be concatenated first.
    Tensor embed_tokens(const std::vector<int>& ids) const { return embed_rows(tok_embed_, ids); }

    /// Causal forward pass. Taps contain the post-block residual stream (after
    /// any residual edits) for the requested layers. Gradients flow into
    /// input_embeddings even when the model is frozen.
    LmForwardResult forward(const Tensor& input_embeddings, const std::set<int>& tap_layers = {},
                            const std::vector<ResidualEdit>* edits = nullptr) const {
        if (input_embeddings.ndim() != 2 ||
            input_embeddings.shape()[1] != static_cast<size_t>(cfg_.d_model))
            throw DimensionError("lm: input embeddings " + shape_str(input_embeddings.shape()) +
                                 " do not match width " + std::to_string(cfg_.d_model));
        size_t seq = input_embeddings.shape()[0];
        if (seq > static_cast<size_t>(cfg_.max_seq))
            throw ContractError("lm: sequence length " + std::to_string(seq) + " exceeds max " +
                                std::to_string(cfg_.max_seq));
        for (int l : tap_layers)
            if (l < 0 || l >= cfg_.n_layers)
                throw ContractError("lm: tap layer " + std::to_string(l) + " outside [0, " +
                                    std::to_string(cfg_.n_layers) + ")");

        size_t dh = static_cast<size_t>(cfg_.d_model) / static_cast<size_t>(cfg_.n_heads);
        double scale = 1.0 / std::sqrt(static_cast<double>(dh));

        Tensor x = add(input_embeddings, slice_rows(pos_embed_, 0, seq));
        LmForwardResult result;
        for (int l = 0; l < cfg_.n_layers; ++l) {
            const Block& b = blocks_[static_cast<size_t>(l)];
            Tensor xn = layer_norm(x, b.ln1_g, b.ln1_b, cfg_.ln_eps);
            std::vector<Tensor> heads;
            for (int h = 0; h < cfg_.n_heads; ++h) {
                Tensor q = matmul(xn, b.wq[static_cast<size_t>(h)]);
                Tensor k = matmul(xn, b.wk[static_cast<size_t>(h)]);
                Tensor v = matmul(xn, b.wv[static_cast<size_t>(h)]);
                Tensor scores = mul_scalar(matmul(q, transpose(k)), scale);
                Tensor probs = row_softmax(scores, /*causal=*/true);
                heads.push_back(matmul(probs, v));
            }
            Tensor attn = matmul(concat_cols(heads), b.wo);
            x = add(x, attn);
            Tensor xm = layer_norm(x, b.ln2_g, b.ln2_b, cfg_.ln_eps);
            Tensor mlp = add_rowvec(matmul(relu(add_rowvec(matmul(xm, b.w1), b.b1)), b.w2), b.b2);
            x = add(x, mlp);
            if (edits) x = apply_edits(x, *edits, l, seq);
            if (tap_layers.count(l)) result.taps.push_back({l, x});
        }
        Tensor xf = layer_norm(x, lnf_g, lnf_b, cfg_.ln_eps);
        result.logits = matmul(xf, unembed_);
        return result;
    }

    /// Greedy decoding from a soft-embedding prefix; ties broken by lowest
    /// token id; stops after emitting EOS or max_new tokens. Residual edits,
    /// when given, are re-applied at every decoding step.
    std::vector<int> generate(const Tensor& prefix_embeddings, int max_new,
                              const std::vector<ResidualEdit>* edits = nullptr) const {
        std::vector<int> out;
        Tensor embeds = prefix_embeddings;
        for (int step = 0; step < max_new; ++step) {
            Tensor logits = forward(embeds, {}, edits).logits;
            size_t seq = embeds.shape()[0];
            size_t v = static_cast<size_t>(cfg_.vocab_size);
            int best = 0;
            double best_val = logits.at((seq - 1) * v);
            for (size_t j = 1; j < v; ++j) {
                double val = logits.at((seq - 1) * v + j);
                if (val > best_val) {
                    best_val = val;
                    best = static_cast<int>(j);
                }
            }
            out.push_back(best);
            if (best == TokenVocab::kEos) break;
            if (seq + 1 > static_cast<size_t>(cfg_.max_seq)) break;
            embeds = concat_rows({embeds, embed_tokens({best})});
        }
        return out;
    }

    // -- persistence ---------------------------------------------------------

    NamedTensorList named_tensors() const {
        NamedTensorList out;
        out.emplace_back("lm.meta",
                         Tensor::from({5}, {static_cast<double>(cfg_.vocab_size),
                                            static_cast<double>(cfg_.d_model),
                                            static_cast<double>(cfg_.n_layers),
                                            static_cast<double>(cfg_.n_heads),
                                            static_cast<double>(cfg_.max_seq)}));
        out.emplace_back("lm.tok_embed", tok_embed_);
        out.emplace_back("lm.pos_embed", pos_embed_);
        for (size_t l = 0; l < blocks_.size(); ++l) {
            const Block& b = blocks_[l];
            std::string p = "lm.layer" + std::to_string(l) + ".";
            out.emplace_back(p + "ln1_g", b.ln1_g);
            out.emplace_back(p + "ln1_b", b.ln1_b);
            for (size_t h = 0; h < b.wq.size(); ++h) {
                out.emplace_back(p + "wq" + std::to_string(h), b.wq[h]);
                out.emplace_back(p + "wk" + std::to_string(h), b.wk[h]);
                out.emplace_back(p + "wv" + std::to_string(h), b.wv[h]);
            }
            out.emplace_back(p + "wo", b.wo);
            out.emplace_back(p + "ln2_g", b.ln2_g);
            out.emplace_back(p + "ln2_b", b.ln2_b);
            out.emplace_back(p + "w1", b.w1);
            out.emplace_back(p + "b1", b.b1);
            out.emplace_back(p + "w2", b.w2);
            out.emplace_back(p + "b2", b.b2);
        }
        out.emplace_back("lm.lnf_g", lnf_g);
        out.emplace_back("lm.lnf_b", lnf_b);
        out.emplace_back("lm.unembed", unembed_);
        return out;
    }

    void save(const std::filesystem::path& path) const { save_container(path, named_tensors()); }

    static ToyLm load(const std::filesystem::path& path) {
        NamedTensorList entries = load_container(path);
        Tensor meta = container_get(entries, "lm.meta");
        LmConfig cfg;
        cfg.vocab_size = static_cast<int>(meta.at(0));
        cfg.d_model = static_cast<int>(meta.at(1));
        cfg.n_layers = static_cast<int>(meta.at(2));
        cfg.n_heads = static_cast<int>(meta.at(3));
        cfg.max_seq = static_cast<int>(meta.at(4));
        ToyLm lm = init(cfg, 0);
        auto assign = [&entries](Tensor& dst, const std::string& name) {
            Tensor src = container_get(entries, name);
            if (src.shape() != dst.shape())
                throw IoError("lm checkpoint: entry '" + name + "' has shape " + shape_str(src.shape()) +
                              ", expected " + shape_str(dst.shape()));
            dst.vec() = src.vec();
        };
        assign(lm.tok_embed_, "lm.tok_embed");
        assign(lm.pos_embed_, "lm.pos_embed");
        for (size_t l = 0; l < lm.blocks_.size(); ++l) {
            Block& b = lm.blocks_[l];
            std::string p = "lm.layer" + std::to_string(l) + ".";
            assign(b.ln1_g, p + "ln1_g");
            assign(b.ln1_b, p + "ln1_b");
            for (size_t h = 0; h < b.wq.size(); ++h) {
                assign(b.wq[h], p + "wq" + std::to_string(h));
                assign(b.wk[h], p + "wk" + std::to_string(h));
                assign(b.wv[h], p + "wv" + std::to_string(h));
            }
            assign(b.wo, p + "wo");
            assign(b.ln2_g, p + "ln2_g");
            assign(b.ln2_b, p + "ln2_b");
            assign(b.w1, p + "w1");
            assign(b.b1, p + "b1");
            assign(b.w2, p + "w2");
            assign(b.b2, p + "b2");
        }
        assign(lm.lnf_g, "lm.lnf_g");
        assign(lm.lnf_b, "lm.lnf_b");
        assign(lm.unembed_, "lm.unembed");
        lm.freeze();
        return lm;
    }

private:
    struct Block {
        Tensor ln1_g, ln1_b;
        std::vector<Tensor> wq, wk, wv;  // per head, [d_model x d_head]
        Tensor wo;
        Tensor ln2_g, ln2_b;
        Tensor w1, b1, w2, b2;
    };

    static Tensor apply_edits(const Tensor& x, const std::vector<ResidualEdit>& edits, int layer,
                              size_t seq) {
        size_t d = x.shape()[1];
        bool any = false;
        for (const ResidualEdit& e : edits)
            if (e.layer == layer && !e.positions.empty()) any = true;
        if (!any) return x;
        Tensor delta = Tensor::zeros({seq, d});
        for (const ResidualEdit& e : edits) {
            if (e.layer != layer) continue;
            if (e.delta.size() != d)
                throw DimensionError("residual edit: delta width " + std::to_string(e.delta.size()) +
                                     " vs model width " + std::to_string(d));
            for (int pos : e.positions) {
                if (pos < 0 || static_cast<size_t>(pos) >= seq)
                    throw ContractError("residual edit: position " + std::to_string(pos) +
                                        " outside sequence of length " + std::to_string(seq));
                for (size_t j = 0; j < d; ++j) delta.mut(static_cast<size_t>(pos) * d + j) += e.delta[j];
            }
        }
        return add(x, delta);
    }

    LmConfig cfg_;
    Tensor tok_embed_, pos_embed_;
    std::vector<Block> blocks_;
    Tensor lnf_g, lnf_b, unembed_;
    bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct LmTrainConfig {
    int epochs = 10;
    int batch_size = 16;
    double lr = 1e-3;
    double lr_final_fraction = 0.2;  // linear decay across epochs
    double holdout_fraction = 0.1;
    double target_loss_ratio = 0.6;  // required held-out loss vs untrained loss
    uint64_t seed = 1;
};

struct LmTrainReport {
    std::vector<double> train_loss;    // per epoch
    std::vector<double> holdout_loss;  // per epoch, index 0 = untrained
    double untrained_loss = 0.0;
    double final_loss = 0.0;
};

inline double lm_holdout_loss(const ToyLm& lm, const std::vector<std::vector<int>>& seqs) {
    double total = 0.0;
    size_t count = 0;
    for (const auto& s : seqs) {
        if (s.size() < 2) continue;
        std::vector<int> input(s.begin(), s.end() - 1);
        std::vector<int> targets(s.begin() + 1, s.end());
        Tensor logits = lm.forward(lm.embed_tokens(input)).logits;
        Tensor loss = softmax_cross_entropy(logits, targets, std::vector<bool>(targets.size(), true));
        total += loss.value() * static_cast<double>(targets.size());
        count += targets.size();
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

/// Next-token training on grammar text; the model is frozen on success.
/// Throws TrainingError with the loss curve if the held-out loss never drops
/// below target_loss_ratio * untrained loss.
inline LmTrainReport pretrain_lm(ToyLm& lm, const std::vector<std::vector<int>>& corpus,
                                 const LmTrainConfig& cfg) {
    if (lm.frozen()) throw ContractError("pretrain_lm: model is frozen");
    if (corpus.empty()) throw ContractError("pretrain_lm: empty corpus");

    size_t holdout_n = std::max<size_t>(1, static_cast<size_t>(static_cast<double>(corpus.size()) *
                                                               cfg.holdout_fraction));
    std::vector<std::vector<int>> train(corpus.begin(), corpus.end() - static_cast<long>(holdout_n));
    std::vector<std::vector<int>> holdout(corpus.end() - static_cast<long>(holdout_n), corpus.end());

    LmTrainReport report;
    report.untrained_loss = lm_holdout_loss(lm, holdout);
    report.holdout_loss.push_back(report.untrained_loss);
    double target = cfg.target_loss_ratio * report.untrained_loss;

    Optimizer opt({OptimizerKind::adam, cfg.lr});
    std::vector<Tensor> params = lm.params();
    Rng order_rng(mix_seed(cfg.seed, 0x6f726472ULL /*"ordr"*/));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double frac = cfg.epochs > 1 ? static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1)
                                     : 0.0;
        opt.set_lr(cfg.lr * (1.0 - (1.0 - cfg.lr_final_fraction) * frac));
        std::vector<size_t> order(train.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(order);

        double epoch_loss = 0.0;
        size_t batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            opt.zero_grad(params);
            double batch_loss = 0.0;
            int used = 0;
            for (size_t i = start; i < end; ++i) {
                const auto& s = train[order[i]];
                if (s.size() < 2) continue;
                std::vector<int> input(s.begin(), s.end() - 1);
                std::vector<int> targets(s.begin() + 1, s.end());
                Tensor logits = lm.forward(lm.embed_tokens(input)).logits;
                Tensor loss = softmax_cross_entropy(logits, targets,
                                                    std::vector<bool>(targets.size(), true));
                backward(mul_scalar(loss, 1.0 / static_cast<double>(end - start)));
                batch_loss += loss.value();
                ++used;
            }
            if (!used) continue;
            opt.step(params);
            epoch_loss += batch_loss / static_cast<double>(used);
            ++batches;
        }
        report.train_loss.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
        report.holdout_loss.push_back(lm_holdout_loss(lm, holdout));
    }

    report.final_loss = report.holdout_loss.back();
    if (report.final_loss > target)
        throw TrainingError("pretrain_lm: held-out loss " + std::to_string(report.final_loss) +
                                " did not reach target " + std::to_string(target) + " after " +
                                std::to_string(cfg.epochs) + " epochs",
                            report.holdout_loss);
    lm.freeze();
    return report;
}

}  // namespace saelab
