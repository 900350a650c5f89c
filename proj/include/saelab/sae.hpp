// Copyright (c) 2026, the saelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-layer sparse autoencoders on the LM residual stream:
//   E(x)  = act(W_enc (x - b_dec) + b_enc)      act in {ReLU, JumpReLU}
//   D(c)  = W_dec c + b_dec
//   loss  = ||x - D(E(x))||^2 + lambda ||E(x)||_1
// Decoder columns are renormalized to unit norm after every step; latents
// that never fire over an epoch are resampled toward the worst-reconstructed
// inputs. Latent labeling against a tagged token corpus stands in for an
// external description database.
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "saelab/checkpoint.hpp"
#include "saelab/optim.hpp"
#include "saelab/tensor.hpp"
#include "saelab/world.hpp"

namespace saelab {

enum class SaeActivation { relu, jumprelu };

struct SaeConfig {
    int d_sae = 0;  // 0 -> expansion_factor * d_llm
    int expansion_factor = 8;
    double l1_coeff = 0.04;
    double lr = 1e-3;
    int epochs = 12;
    int batch_size = 64;
    SaeActivation activation = SaeActivation::relu;
    double jump_theta = 0.0;
    bool resample_dead = true;
    double selectivity_floor = 0.3;
    uint64_t seed = 1;
};

class SaeModel {
public:
    static SaeModel init(int layer, int d_llm, int d_sae, const SaeConfig& cfg, Rng& rng) {
        if (d_sae <= d_llm)
            throw ConfigError("sae: d_sae " + std::to_string(d_sae) + " must exceed d_llm " +
                              std::to_string(d_llm) + " (overcomplete dictionary)");
        SaeModel m;
        m.layer_ = layer;
        m.d_llm_ = d_llm;
        m.d_sae_ = d_sae;
        m.activation_ = cfg.activation;
        m.jump_theta_ = cfg.jump_theta;
        m.l1_coeff_ = cfg.l1_coeff;
        m.w_enc_ = Tensor::randn({static_cast<size_t>(d_sae), static_cast<size_t>(d_llm)}, rng, 0.1, true);
        m.b_enc_ = Tensor::zeros({static_cast<size_t>(d_sae)}, true);
        m.w_dec_ = Tensor::zeros({static_cast<size_t>(d_llm), static_cast<size_t>(d_sae)}, true);
        // decoder starts as the transposed encoder, columns normalized
        for (int i = 0; i < d_sae; ++i)
            for (int j = 0; j < d_llm; ++j)
                m.w_dec_.mut(static_cast<size_t>(j * d_sae + i)) =
                    m.w_enc_.at(static_cast<size_t>(i * d_llm + j));
        m.b_dec_ = Tensor::zeros({static_cast<size_t>(d_llm)}, true);
        m.normalize_decoder();
        return m;
    }

    int layer() const { return layer_; }
    int d_llm() const { return d_llm_; }
    int d_sae() const { return d_sae_; }
    SaeActivation activation() const { return activation_; }
    void set_activation(SaeActivation a, double theta = 0.0) {
        activation_ = a;
        jump_theta_ = theta;
    }
    double l1_coeff() const { return l1_coeff_; }

    Tensor& w_enc() { return w_enc_; }
    Tensor& b_enc() { return b_enc_; }
    Tensor& w_dec() { return w_dec_; }
    Tensor& b_dec() { return b_dec_; }
    const Tensor& w_dec() const { return w_dec_; }

    std::vector<Tensor> params() { return {w_enc_, b_enc_, w_dec_, b_dec_}; }
    std::vector<Tensor> params() const { return {w_enc_, b_enc_, w_dec_, b_dec_}; }
    uint64_t checksum() const { return params_checksum(params()); }

    void freeze() {
        for (Tensor p : params()) p.set_requires_grad(false);
    }

    /// Codes are elementwise >= 0 by construction.
    Tensor encode(const Tensor& x) const {
        if (x.ndim() != 2 || x.shape()[1] != static_cast<size_t>(d_llm_))
            throw DimensionError("sae encode: input " + shape_str(x.shape()) + " vs width " +
                                 std::to_string(d_llm_));
        Tensor pre = add_rowvec(matmul(sub_rowvec(x, b_dec_), transpose(w_enc_)), b_enc_);
        if (activation_ == SaeActivation::jumprelu) return jump_relu(pre, jump_theta_);
        return relu(pre);
    }

    Tensor decode(const Tensor& codes) const {
        if (codes.ndim() != 2 || codes.shape()[1] != static_cast<size_t>(d_sae_))
            throw DimensionError("sae decode: codes " + shape_str(codes.shape()) + " vs dictionary " +
                                 std::to_string(d_sae_));
        return add_rowvec(matmul(codes, transpose(w_dec_)), b_dec_);
    }

    Tensor reconstruct(const Tensor& x) const { return decode(encode(x)); }

    /// Unit decoder column for a latent.
    std::vector<double> decoder_column(int latent) const {
        std::vector<double> col(static_cast<size_t>(d_llm_));
        for (int j = 0; j < d_llm_; ++j)
            col[static_cast<size_t>(j)] = w_dec_.at(static_cast<size_t>(j * d_sae_ + latent));
        return col;
    }

    void normalize_decoder() {
        for (int i = 0; i < d_sae_; ++i) {
            double norm = 0.0;
            for (int j = 0; j < d_llm_; ++j) {
                double v = w_dec_.at(static_cast<size_t>(j * d_sae_ + i));
                norm += v * v;
            }
            norm = std::sqrt(norm);
            if (norm == 0.0) continue;
            for (int j = 0; j < d_llm_; ++j) w_dec_.mut(static_cast<size_t>(j * d_sae_ + i)) /= norm;
        }
    }

    // -- persistence ---------------------------------------------------------

    NamedTensorList named_tensors() const {
        NamedTensorList out;
        out.emplace_back("sae.meta",
                         Tensor::from({5}, {static_cast<double>(layer_), static_cast<double>(d_llm_),
                                            static_cast<double>(d_sae_),
                                            activation_ == SaeActivation::jumprelu ? 1.0 : 0.0,
                                            jump_theta_}));
        out.emplace_back("sae.w_enc", w_enc_);
        out.emplace_back("sae.b_enc", b_enc_);
        out.emplace_back("sae.w_dec", w_dec_);
        out.emplace_back("sae.b_dec", b_dec_);
        return out;
    }

    void save(const std::filesystem::path& path) const { save_container(path, named_tensors()); }

    static SaeModel load(const std::filesystem::path& path) {
        NamedTensorList entries = load_container(path);
        Tensor meta = container_get(entries, "sae.meta");
        SaeModel m;
        m.layer_ = static_cast<int>(meta.at(0));
        m.d_llm_ = static_cast<int>(meta.at(1));
        m.d_sae_ = static_cast<int>(meta.at(2));
        m.activation_ = meta.at(3) != 0.0 ? SaeActivation::jumprelu : SaeActivation::relu;
        m.jump_theta_ = meta.at(4);
        m.w_enc_ = container_get(entries, "sae.w_enc");
        m.b_enc_ = container_get(entries, "sae.b_enc");
        m.w_dec_ = container_get(entries, "sae.w_dec");
        m.b_dec_ = container_get(entries, "sae.b_dec");
        return m;
    }

private:
    int layer_ = 0;
    int d_llm_ = 0;
    int d_sae_ = 0;
    SaeActivation activation_ = SaeActivation::relu;
    double jump_theta_ = 0.0;
    double l1_coeff_ = 0.0;
    Tensor w_enc_, b_enc_, w_dec_, b_dec_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct SaeTrainReport {
    std::vector<double> loss;  // per epoch (recon + l1)
    std::vector<double> mse;   // per epoch, mean ||x - xhat||^2 per row
    std::vector<double> l0;    // per epoch, mean strictly-positive codes per row
    int resampled_total = 0;
};

/// Trains an SAE on an activation dataset (rows are residual-stream vectors).
inline SaeModel train_sae(const Tensor& data, int layer, const SaeConfig& cfg,
                          SaeTrainReport* report_out = nullptr) {
    if (cfg.l1_coeff < 0.0) throw ConfigError("sae: l1 coefficient must be >= 0");
    if (data.ndim() != 2 || data.shape()[0] == 0)
        throw ContractError("sae: dataset must be a nonempty [n x d_llm] matrix");
    int d_llm = static_cast<int>(data.shape()[1]);
    int d_sae = cfg.d_sae > 0 ? cfg.d_sae : cfg.expansion_factor * d_llm;
    size_t n = data.shape()[0];

    Rng rng(mix_seed(cfg.seed, 0x7361655fULL /*"sae_"*/));
    SaeModel m = SaeModel::init(layer, d_llm, d_sae, cfg, rng);

    // center the dictionary on the data
    for (int j = 0; j < d_llm; ++j) {
        double mean = 0.0;
        for (size_t i = 0; i < n; ++i) mean += data.at(i * static_cast<size_t>(d_llm) + static_cast<size_t>(j));
        m.b_dec().mut(static_cast<size_t>(j)) = mean / static_cast<double>(n);
    }

    Optimizer opt({OptimizerKind::adam, cfg.lr});
    std::vector<Tensor> params = m.params();
    SaeTrainReport report;

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        std::vector<char> fired(static_cast<size_t>(d_sae), 0);
        double epoch_loss = 0.0, epoch_mse = 0.0, epoch_l0 = 0.0;
        size_t batches = 0, rows_seen = 0;

        for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch_size)) {
            size_t end = std::min(n, start + static_cast<size_t>(cfg.batch_size));
            size_t bs = end - start;
            Tensor x = Tensor::zeros({bs, static_cast<size_t>(d_llm)});
            for (size_t i = 0; i < bs; ++i)
                for (int j = 0; j < d_llm; ++j)
                    x.mut(i * static_cast<size_t>(d_llm) + static_cast<size_t>(j)) =
                        data.at(order[start + i] * static_cast<size_t>(d_llm) + static_cast<size_t>(j));

            Tensor codes = m.encode(x);
            Tensor xhat = m.decode(codes);
            Tensor recon = sum(square(sub(xhat, x)));
            Tensor loss = mul_scalar(add(recon, mul_scalar(sum(codes), cfg.l1_coeff)),
                                     1.0 / static_cast<double>(bs));
            opt.zero_grad(params);
            backward(loss);
            opt.step(params);
            m.normalize_decoder();

            for (size_t i = 0; i < bs; ++i) {
                int l0 = 0;
                for (int k = 0; k < d_sae; ++k) {
                    double c = codes.at(i * static_cast<size_t>(d_sae) + static_cast<size_t>(k));
                    if (c > 0.0) {
                        fired[static_cast<size_t>(k)] = 1;
                        ++l0;
                    }
                }
                epoch_l0 += l0;
            }
            epoch_loss += loss.value();
            epoch_mse += recon.value() / static_cast<double>(bs);
            ++batches;
            rows_seen += bs;
        }

        report.loss.push_back(epoch_loss / static_cast<double>(batches));
        report.mse.push_back(epoch_mse / static_cast<double>(batches));
        report.l0.push_back(epoch_l0 / static_cast<double>(rows_seen));
        if (!std::isfinite(report.loss.back()))
            throw TrainingError("sae: loss diverged at epoch " + std::to_string(epoch), report.loss);

        // Dead-latent resampling: point unused dictionary entries at the
        // worst-reconstructed inputs. Skipped after the final epoch so the
        // returned model reflects trained weights only.
        if (cfg.resample_dead && epoch + 1 < cfg.epochs) {
            std::vector<int> dead;
            for (int k = 0; k < d_sae; ++k)
                if (!fired[static_cast<size_t>(k)]) dead.push_back(k);
            if (!dead.empty()) {
                size_t probe_n = std::min<size_t>(n, 2048);
                std::vector<std::pair<double, size_t>> errs(probe_n);
                for (size_t i = 0; i < probe_n; ++i) {
                    Tensor row = slice_rows(data, i, 1);
                    Tensor rec = m.reconstruct(row);
                    double e = 0.0;
                    for (int j = 0; j < d_llm; ++j) {
                        double diff = rec.at(static_cast<size_t>(j)) - row.at(static_cast<size_t>(j));
                        e += diff * diff;
                    }
                    errs[i] = {e, i};
                }
                std::sort(errs.begin(), errs.end(),
                          [](const auto& a, const auto& b) { return a.first > b.first; });
                for (size_t di = 0; di < dead.size(); ++di) {
                    int k = dead[di];
                    size_t src = errs[di % errs.size()].second;
                    std::vector<double> dir(static_cast<size_t>(d_llm));
                    double norm = 0.0;
                    for (int j = 0; j < d_llm; ++j) {
                        dir[static_cast<size_t>(j)] =
                            data.at(src * static_cast<size_t>(d_llm) + static_cast<size_t>(j)) -
                            m.b_dec().at(static_cast<size_t>(j));
                        norm += dir[static_cast<size_t>(j)] * dir[static_cast<size_t>(j)];
                    }
                    norm = std::sqrt(norm);
                    if (norm == 0.0) continue;
                    std::vector<size_t> enc_idx, dec_idx;
                    for (int j = 0; j < d_llm; ++j) {
                        double u = dir[static_cast<size_t>(j)] / norm;
                        m.w_dec().mut(static_cast<size_t>(j * d_sae + k)) = u;
                        m.w_enc().mut(static_cast<size_t>(k * d_llm + j)) = 0.2 * u;
                        dec_idx.push_back(static_cast<size_t>(j * d_sae + k));
                        enc_idx.push_back(static_cast<size_t>(k * d_llm + j));
                    }
                    m.b_enc().mut(static_cast<size_t>(k)) = 0.0;
                    opt.reset_moments_at(m.w_dec(), dec_idx);
                    opt.reset_moments_at(m.w_enc(), enc_idx);
                    opt.reset_moments_at(m.b_enc(), {static_cast<size_t>(k)});
                    ++report.resampled_total;
                }
            }
        }
    }

    if (report_out) *report_out = report;
    return m;
}

// ---------------------------------------------------------------------------
// Latent labeling (the local stand-in for an external latent-description DB)
// ---------------------------------------------------------------------------

struct LatentLabel {
    int concept_id = 0;
    double selectivity = 0.0;  // in [0,1]; 0 for latents that never activate
    bool localizable = false;
};

struct LatentLabelTable {
    std::vector<LatentLabel> labels;  // one entry per latent

    const LatentLabel& at(int latent) const { return labels.at(static_cast<size_t>(latent)); }

    void save(const std::filesystem::path& path, const std::vector<Concept>& concepts) const {
        std::filesystem::path tmp = path;
        tmp += ".tmp";
        {
            std::ofstream os(tmp);
            if (!os) throw IoError("labels: cannot open " + tmp.string());
            os << "latent\tconcept\tselectivity\n";
            char buf[64];
            for (size_t i = 0; i < labels.size(); ++i) {
                std::snprintf(buf, sizeof(buf), "%.17g", labels[i].selectivity);
                os << i << '\t' << concepts.at(static_cast<size_t>(labels[i].concept_id)).name << '\t'
                   << buf << '\n';
            }
        }
        std::filesystem::rename(tmp, path);
    }

    static LatentLabelTable load(const std::filesystem::path& path,
                                 const std::vector<Concept>& concepts) {
        std::ifstream is(path);
        if (!is) throw IoError("labels: cannot open " + path.string());
        std::string line;
        std::getline(is, line);  // header
        LatentLabelTable table;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            size_t t1 = line.find('\t');
            size_t t2 = line.find('\t', t1 + 1);
            if (t1 == std::string::npos || t2 == std::string::npos)
                throw IoError("labels: malformed line '" + line + "'");
            std::string name = line.substr(t1 + 1, t2 - t1 - 1);
            double sel = std::stod(line.substr(t2 + 1));
            int cid = -1;
            for (const Concept& c : concepts)
                if (c.name == name) cid = c.id;
            if (cid < 0) throw IoError("labels: unknown concept '" + name + "'");
            table.labels.push_back(
                {cid, sel, concepts.at(static_cast<size_t>(cid)).localizable});
        }
        return table;
    }
};

/// Labels every latent with the concept whose tagged tokens drive it hardest
/// (mean activation over occurrences; ties and dead latents fall to the
/// lowest concept id). selectivity = top mean / sum of all concept means.
inline LatentLabelTable label_latents(const SaeModel& m, const Tensor& tagged_acts,
                                      const std::vector<int>& tags,
                                      const std::vector<Concept>& concepts) {
    if (tagged_acts.shape()[0] == 0) throw ContractError("label_latents: empty tagged corpus");
    if (tagged_acts.shape()[0] != tags.size())
        throw DimensionError("label_latents: " + std::to_string(tagged_acts.shape()[0]) +
                             " rows vs " + std::to_string(tags.size()) + " tags");
    size_t n = tags.size();
    size_t num_concepts = concepts.size();
    int d_sae = m.d_sae();

    std::vector<double> sums(static_cast<size_t>(d_sae) * num_concepts, 0.0);
    std::vector<size_t> counts(num_concepts, 0);
    for (size_t i = 0; i < n; ++i) counts[static_cast<size_t>(tags[i])]++;

    // batch the encodes to bound graph size
    const size_t chunk = 256;
    for (size_t start = 0; start < n; start += chunk) {
        size_t end = std::min(n, start + chunk);
        Tensor codes = m.encode(slice_rows(tagged_acts, start, end - start));
        for (size_t i = start; i < end; ++i) {
            size_t c = static_cast<size_t>(tags[i]);
            for (int k = 0; k < d_sae; ++k)
                sums[static_cast<size_t>(k) * num_concepts + c] +=
                    codes.at((i - start) * static_cast<size_t>(d_sae) + static_cast<size_t>(k));
        }
    }

    LatentLabelTable table;
    table.labels.resize(static_cast<size_t>(d_sae));
    for (int k = 0; k < d_sae; ++k) {
        double total = 0.0, best = 0.0;
        int best_c = 0;
        for (size_t c = 0; c < num_concepts; ++c) {
            double mean = counts[c] ? sums[static_cast<size_t>(k) * num_concepts + c] /
                                          static_cast<double>(counts[c])
                                    : 0.0;
            total += mean;
            if (mean > best) {
                best = mean;
                best_c = static_cast<int>(c);
            }
        }
        LatentLabel& lab = table.labels[static_cast<size_t>(k)];
        lab.concept_id = best_c;
        lab.selectivity = total > 0.0 ? best / total : 0.0;
        lab.localizable = concepts[static_cast<size_t>(best_c)].localizable;
    }
    return table;
}

/// Decoder column of the most selective latent labeled with the concept.
/// Errors when no latent clears the selectivity floor.
inline std::vector<double> concept_direction(const SaeModel& m, int concept_id,
                                             const LatentLabelTable& table,
                                             double selectivity_floor = 0.3) {
    int best = -1;
    double best_sel = selectivity_floor;
    for (size_t k = 0; k < table.labels.size(); ++k) {
        const LatentLabel& lab = table.labels[k];
        if (lab.concept_id == concept_id && lab.selectivity > best_sel) {
            best_sel = lab.selectivity;
            best = static_cast<int>(k);
        }
    }
    if (best < 0)
        throw NoDirectionError("concept_direction: no latent labeled with concept " +
                               std::to_string(concept_id) + " has selectivity above " +
                               std::to_string(selectivity_floor) + " at layer " +
                               std::to_string(m.layer()));
    return m.decoder_column(best);
}

}  // namespace saelab
