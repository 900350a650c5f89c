// Copyright (c) 2026, the saelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic multimodal world: scenes on a PxP patch grid,
// captions and QA from a fixed grammar, and simulated vision encoders with
// controllable spatial fidelity. Everything is a pure function of
// (seed, config).
#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "saelab/tensor.hpp"
#include "saelab/vocab.hpp"

namespace saelab {

enum class ConceptKind { object, attribute };

struct Concept {
    int id = -1;
    std::string name;
    ConceptKind kind = ConceptKind::object;
    bool localizable = true;
};

enum class SceneStyle { base, shifted };

inline const char* style_name(SceneStyle s) { return s == SceneStyle::base ? "base" : "shifted"; }

struct Scene {
    int grid = 4;  // P; the scene has P*P patches
    struct Patch {
        int object = -1;  // concept id, -1 when empty
        std::vector<int> attributes;
    };
    std::vector<Patch> patches;
    std::set<int> concept_set;               // every concept present (objects and attributes)
    std::map<int, std::vector<int>> boxes;   // concept id -> occupied patch indices
    std::vector<int> caption;                // BOS ... EOS token ids
    SceneStyle style = SceneStyle::base;
    uint64_t scene_seed = 0;

    int num_patches() const { return grid * grid; }
};

enum class EncoderFidelity { local, smoothed, global };

inline const char* fidelity_name(EncoderFidelity f) {
    switch (f) {
        case EncoderFidelity::local: return "local";
        case EncoderFidelity::smoothed: return "smoothed";
        case EncoderFidelity::global: return "global";
    }
    return "?";
}

inline EncoderFidelity fidelity_from_name(const std::string& s) {
    if (s == "local") return EncoderFidelity::local;
    if (s == "smoothed") return EncoderFidelity::smoothed;
    if (s == "global") return EncoderFidelity::global;
    throw ConfigError("encoder: unknown fidelity '" + s + "' (expected local|smoothed|global)");
}

struct WorldConfig {
    uint64_t seed = 1;
    int grid = 4;
    std::vector<std::string> object_names = {"cat",  "dog",   "bird", "fish", "tree",
                                             "car",  "house", "ball", "cup",  "book"};
    std::vector<std::string> attribute_names = {"red", "blue", "big", "small"};
    int d_v = 32;
    double noise_sigma = 0.05;
    double smoothed_own_weight = 0.6;
    double global_own_weight = 0.25;
    double attribute_scale = 0.75;  // additive modulation of patch directions
    int min_objects = 1, max_objects = 4;
    int min_patches = 1, max_patches = 4;
    double attribute_prob = 0.5;
    int vocab_size = 64;
    int max_seq = 64;
    double shift_rotation = 0.3;    // radians per Givens pair for the style shift
    double shift_noise_mult = 2.0;
};

struct QaPair {
    std::vector<int> question;  // BOS ... ?
    std::vector<int> answer;    // answer tokens ... EOS
};

class World {
public:
    static World make(const WorldConfig& cfg) {
        if (cfg.object_names.size() < 8 || cfg.attribute_names.size() < 4)
            throw ConfigError("world: needs >= 8 object concepts and >= 4 attributes, got " +
                              std::to_string(cfg.object_names.size()) + " and " +
                              std::to_string(cfg.attribute_names.size()));
        if (cfg.grid < 2) throw ConfigError("world: grid must be >= 2");
        if (cfg.max_objects * cfg.max_patches > cfg.grid * cfg.grid)
            throw ConfigError("world: max_objects*max_patches exceeds patch count");

        World w;
        w.cfg_ = cfg;
        for (const std::string& n : cfg.object_names)
            w.concepts_.push_back({static_cast<int>(w.concepts_.size()), n, ConceptKind::object, true});
        for (const std::string& n : cfg.attribute_names)
            w.concepts_.push_back({static_cast<int>(w.concepts_.size()), n, ConceptKind::attribute, false});

        std::vector<std::string> words;
        for (const Concept& c : w.concepts_) words.push_back(c.name);
        for (const std::string& g : {"and", ".", "what", "is", "at", "present", "?", "yes", "no", "nothing"})
            words.push_back(g);
        for (int r = 0; r < cfg.grid; ++r) words.push_back("r" + std::to_string(r));
        for (int c = 0; c < cfg.grid; ++c) words.push_back("c" + std::to_string(c));
        w.vocab_ = TokenVocab::build(words, cfg.vocab_size);

        // Concept directions are fixed per world seed: unit Gaussian vectors.
        Rng dir_rng = Rng(cfg.seed).fork(0x6469725fULL /*"dir_"*/);
        auto unit_gaussian = [&dir_rng, &cfg]() {
            std::vector<double> v(static_cast<size_t>(cfg.d_v));
            double norm = 0.0;
            for (double& x : v) {
                x = dir_rng.normal();
                norm += x * x;
            }
            norm = std::sqrt(norm);
            for (double& x : v) x /= norm;
            return v;
        };
        for (size_t i = 0; i < w.concepts_.size(); ++i) w.directions_.push_back(unit_gaussian());
        w.background_ = unit_gaussian();

        // Style-shift rotation: Givens rotations on adjacent coordinate pairs
        // with per-pair angles near shift_rotation. Exactly orthogonal.
        Rng rot_rng = Rng(cfg.seed).fork(0x726f745fULL /*"rot_"*/);
        for (int k = 0; k + 1 < cfg.d_v; k += 2)
            w.shift_angles_.push_back(cfg.shift_rotation * (0.5 + rot_rng.uniform()));
        for (const auto& d : w.directions_) w.shifted_directions_.push_back(w.rotate(d));
        w.shifted_background_ = w.rotate(w.background_);
        return w;
    }

    const WorldConfig& config() const { return cfg_; }
    const TokenVocab& vocab() const { return vocab_; }
    const std::vector<Concept>& concepts() const { return concepts_; }
    int num_concepts() const { return static_cast<int>(concepts_.size()); }
    int num_objects() const { return static_cast<int>(cfg_.object_names.size()); }

    const Concept& concept_by_id(int id) const {
        if (id < 0 || id >= num_concepts())
            throw ContractError("world: concept id " + std::to_string(id) + " out of range");
        return concepts_[static_cast<size_t>(id)];
    }

    std::optional<int> concept_by_token(int token_id) const {
        const std::string& t = vocab_.token(token_id);
        for (const Concept& c : concepts_)
            if (c.name == t) return c.id;
        return std::nullopt;
    }

    int token_of_concept(int concept_id) const { return vocab_.id(concept_by_id(concept_id).name); }

    // -- Scene generation --------------------------------------------------

    Scene gen_scene(uint64_t scene_seed, SceneStyle style = SceneStyle::base) const {
        Rng rng(mix_seed(cfg_.seed, mix_seed(0x7363656eULL /*"scen"*/, scene_seed)));
        Scene s;
        s.grid = cfg_.grid;
        s.scene_seed = scene_seed;
        s.style = style;
        s.patches.assign(static_cast<size_t>(s.num_patches()), {});

        int n_obj = rng.uniform_int(cfg_.min_objects, cfg_.max_objects);
        std::vector<int> object_pool(static_cast<size_t>(num_objects()));
        for (size_t i = 0; i < object_pool.size(); ++i) object_pool[i] = static_cast<int>(i);
        rng.shuffle(object_pool);
        object_pool.resize(static_cast<size_t>(n_obj));

        std::vector<int> free(static_cast<size_t>(s.num_patches()));
        for (size_t i = 0; i < free.size(); ++i) free[i] = static_cast<int>(i);
        rng.shuffle(free);

        size_t cursor = 0;
        for (int obj : object_pool) {
            int span = rng.uniform_int(cfg_.min_patches, cfg_.max_patches);
            std::vector<int> box(free.begin() + static_cast<long>(cursor),
                                 free.begin() + static_cast<long>(cursor + static_cast<size_t>(span)));
            cursor += static_cast<size_t>(span);
            std::sort(box.begin(), box.end());

            std::vector<int> attrs;
            if (rng.uniform() < cfg_.attribute_prob) {
                int a = num_objects() + rng.uniform_int(0, static_cast<int>(cfg_.attribute_names.size()) - 1);
                attrs.push_back(a);
            }
            for (int p : box) {
                s.patches[static_cast<size_t>(p)].object = obj;
                s.patches[static_cast<size_t>(p)].attributes = attrs;
            }
            s.boxes[obj] = box;
            s.concept_set.insert(obj);
            for (int a : attrs) {
                s.concept_set.insert(a);
                auto& ab = s.boxes[a];
                ab.insert(ab.end(), box.begin(), box.end());
            }
        }
        for (auto& [c, box] : s.boxes) std::sort(box.begin(), box.end());
        s.caption = render_caption(s);
        return s;
    }

    /// Caption grammar: BOS <obj> (and <obj>)* EOS, objects in canonical
    /// concept-id order. Captions name exactly the present object concepts;
    /// attributes are probed through QA instead.
    std::vector<int> render_caption(const Scene& s) const {
        std::vector<int> cap = {TokenVocab::kBos};
        bool first = true;
        for (const auto& [c, box] : s.boxes) {
            if (concept_by_id(c).kind != ConceptKind::object) continue;
            if (!first) cap.push_back(vocab_.id("and"));
            first = false;
            cap.push_back(token_of_concept(c));
        }
        cap.push_back(TokenVocab::kEos);
        return cap;
    }

    /// Lenient grammar parse: collects every concept word in the token list.
    /// Tokens outside the caption grammar contribute no concepts; the flag
    /// reports whether any appeared.
    struct ParsedCaption {
        std::set<int> objects;
        std::set<int> attributes;
        bool out_of_grammar = false;
        std::set<int> all() const {
            std::set<int> s = objects;
            s.insert(attributes.begin(), attributes.end());
            return s;
        }
    };

    ParsedCaption parse_caption(const std::vector<int>& tokens) const {
        ParsedCaption out;
        int and_id = vocab_.id("and");
        for (int t : tokens) {
            if (t == TokenVocab::kBos || t == TokenVocab::kEos || t == and_id) continue;
            auto c = concept_by_token(t);
            if (!c) {
                out.out_of_grammar = true;
                continue;
            }
            if (concept_by_id(*c).kind == ConceptKind::object)
                out.objects.insert(*c);
            else
                out.attributes.insert(*c);
        }
        return out;
    }

    // -- Style shift ---------------------------------------------------------

    /// Same semantics, perturbed encoder view: concept directions rotated by
    /// the fixed world rotation and noise doubled at encode time.
    Scene style_shift(const Scene& s) const {
        Scene out = s;
        out.style = SceneStyle::shifted;
        return out;
    }

    // -- Encoding ------------------------------------------------------------

    /// Produces N = P^2 visual tokens of width d_v.
    Tensor encode_scene(EncoderFidelity fidelity, const Scene& scene, Rng& rng) const {
        int n = scene.num_patches();
        int d = cfg_.d_v;
        bool shifted = scene.style == SceneStyle::shifted;
        double sigma = cfg_.noise_sigma * (shifted ? cfg_.shift_noise_mult : 1.0);

        std::vector<std::vector<double>> raw(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) raw[static_cast<size_t>(i)] = patch_direction(scene, i, shifted);

        Tensor out = Tensor::zeros({static_cast<size_t>(n), static_cast<size_t>(d)});
        std::vector<double> scene_mean(static_cast<size_t>(d), 0.0);
        if (fidelity == EncoderFidelity::global) {
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j)
                    scene_mean[static_cast<size_t>(j)] += raw[static_cast<size_t>(i)][static_cast<size_t>(j)];
            for (double& v : scene_mean) v /= static_cast<double>(n);
        }

        for (int i = 0; i < n; ++i) {
            std::vector<double> tok = raw[static_cast<size_t>(i)];
            if (fidelity == EncoderFidelity::smoothed) {
                std::vector<double> nb(static_cast<size_t>(d), 0.0);
                int count = 0;
                int r = i / cfg_.grid, c = i % cfg_.grid;
                const int dr[4] = {-1, 1, 0, 0};
                const int dc[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    int rr = r + dr[k], cc = c + dc[k];
                    if (rr < 0 || rr >= cfg_.grid || cc < 0 || cc >= cfg_.grid) continue;
                    const auto& v = raw[static_cast<size_t>(rr * cfg_.grid + cc)];
                    for (int j = 0; j < d; ++j) nb[static_cast<size_t>(j)] += v[static_cast<size_t>(j)];
                    ++count;
                }
                double w = cfg_.smoothed_own_weight;
                for (int j = 0; j < d; ++j)
                    tok[static_cast<size_t>(j)] =
                        w * tok[static_cast<size_t>(j)] +
                        (1.0 - w) * nb[static_cast<size_t>(j)] / static_cast<double>(std::max(count, 1));
            } else if (fidelity == EncoderFidelity::global) {
                double w = cfg_.global_own_weight;
                for (int j = 0; j < d; ++j)
                    tok[static_cast<size_t>(j)] =
                        w * tok[static_cast<size_t>(j)] + (1.0 - w) * scene_mean[static_cast<size_t>(j)];
            }
            for (int j = 0; j < d; ++j)
                out.mut(static_cast<size_t>(i * d + j)) = tok[static_cast<size_t>(j)] + sigma * rng.normal();
        }
        return out;
    }

    /// Canonical per-scene encoder stream. Depends only on (world seed, scene
    /// seed, fidelity) so paired runs and style-shifted copies draw the same
    /// noise.
    Rng encode_rng(const Scene& scene, EncoderFidelity fidelity) const {
        uint64_t tag = 0x656e635fULL /*"enc_"*/ + static_cast<uint64_t>(fidelity) * 131;
        return Rng(mix_seed(cfg_.seed, mix_seed(tag, scene.scene_seed)));
    }

    std::vector<double> patch_direction(const Scene& scene, int patch, bool shifted) const {
        const auto& dirs = shifted ? shifted_directions_ : directions_;
        const auto& bg = shifted ? shifted_background_ : background_;
        const Scene::Patch& p = scene.patches[static_cast<size_t>(patch)];
        if (p.object < 0) return bg;
        std::vector<double> v = dirs[static_cast<size_t>(p.object)];
        for (int a : p.attributes)
            for (int j = 0; j < cfg_.d_v; ++j)
                v[static_cast<size_t>(j)] +=
                    cfg_.attribute_scale * dirs[static_cast<size_t>(a)][static_cast<size_t>(j)];
        return v;
    }

    // -- Text corpus ---------------------------------------------------------

    /// Grammar sentences for LM pretraining and SAE training; deterministic in
    /// seed. Half the context blocks are grid renderings (one word per patch,
    /// "nothing" for empty) mirroring the layout the visual-token prefix will
    /// occupy, so the frozen LM learns to enumerate and answer from such a
    /// block.
    std::vector<std::vector<int>> gen_text_corpus(uint64_t seed, int count) const {
        Rng rng(mix_seed(cfg_.seed, mix_seed(0x74787463ULL /*"txtc"*/, seed)));
        std::vector<std::vector<int>> corpus;
        corpus.reserve(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) {
            double u = rng.uniform();
            if (u < 0.10)
                corpus.push_back(caption_sentence(rng));
            else if (u < 0.32)
                corpus.push_back(grid_recap_sentence(rng));
            else if (u < 0.47)
                corpus.push_back(recap_sentence(rng));
            else if (u < 0.65)
                corpus.push_back(grid_presence_sentence(rng));
            else if (u < 0.75)
                corpus.push_back(presence_qa_sentence(rng));
            else if (u < 0.90)
                corpus.push_back(grid_what_at_sentence(rng));
            else
                corpus.push_back(attribute_qa_sentence(rng));
        }
        return corpus;
    }

    // -- Multimodal QA -------------------------------------------------------

    /// Templated questions with ground-truth answers; pure function of the
    /// scene contents.
    std::vector<QaPair> gen_qa(const Scene& s) const {
        std::vector<QaPair> out;
        auto tok = [this](const std::string& w) { return vocab_.id(w); };

        std::vector<int> objects;
        for (int c : s.concept_set)
            if (concept_by_id(c).kind == ConceptKind::object) objects.push_back(c);

        // what-is-at for each object's first patch
        for (int obj : objects) {
            int p = s.boxes.at(obj).front();
            out.push_back({what_at_question(p), {token_of_concept(obj), TokenVocab::kEos}});
        }
        // first empty patch, when any
        for (int p = 0; p < s.num_patches(); ++p) {
            if (s.patches[static_cast<size_t>(p)].object < 0) {
                out.push_back({what_at_question(p), {tok("nothing"), TokenVocab::kEos}});
                break;
            }
        }
        // presence: every present object answers yes; lowest absent answers no
        for (int obj : objects)
            out.push_back({presence_question(obj), {tok("yes"), TokenVocab::kEos}});
        for (int c = 0; c < num_objects(); ++c) {
            if (!s.concept_set.count(c)) {
                out.push_back({presence_question(c), {tok("no"), TokenVocab::kEos}});
                break;
            }
        }
        // attribute probes for the first object: its true attribute (when any)
        // and the lowest attribute it lacks
        if (!objects.empty()) {
            int obj = objects.front();
            const auto& attrs = s.patches[static_cast<size_t>(s.boxes.at(obj).front())].attributes;
            if (!attrs.empty())
                out.push_back({attribute_question(obj, attrs.front()), {tok("yes"), TokenVocab::kEos}});
            for (int a = num_objects(); a < num_concepts(); ++a) {
                if (std::find(attrs.begin(), attrs.end(), a) == attrs.end()) {
                    out.push_back({attribute_question(obj, a), {tok("no"), TokenVocab::kEos}});
                    break;
                }
            }
        }
        return out;
    }

    // Questions open with the context separator "." so the multimodal prompt
    // [visual tokens || question] matches the text corpus layout
    // [description . question].
    std::vector<int> what_at_question(int patch) const {
        int r = patch / cfg_.grid, c = patch % cfg_.grid;
        return {vocab_.id("."),  vocab_.id("what"),
                vocab_.id("is"), vocab_.id("at"),
                vocab_.id("r" + std::to_string(r)), vocab_.id("c" + std::to_string(c)),
                vocab_.id("?")};
    }

    std::vector<int> presence_question(int concept_id) const {
        return {vocab_.id("."), vocab_.id("is"), token_of_concept(concept_id), vocab_.id("present"),
                vocab_.id("?")};
    }

    std::vector<int> attribute_question(int object_id, int attribute_id) const {
        return {vocab_.id("."), vocab_.id("is"), token_of_concept(object_id),
                token_of_concept(attribute_id), vocab_.id("?")};
    }

    /// Prompt that elicits a canonical caption of the preceding context; the
    /// caption is the answer to a fixed enumeration question.
    std::vector<int> caption_prompt() const {
        return {vocab_.id("."), vocab_.id("what"), vocab_.id("is"), vocab_.id("present"),
                vocab_.id("?")};
    }

private:
    std::vector<double> rotate(const std::vector<double>& v) const {
        std::vector<double> out = v;
        size_t pair = 0;
        for (int k = 0; k + 1 < cfg_.d_v; k += 2, ++pair) {
            double a = shift_angles_[pair];
            double x = out[static_cast<size_t>(k)], y = out[static_cast<size_t>(k + 1)];
            out[static_cast<size_t>(k)] = std::cos(a) * x - std::sin(a) * y;
            out[static_cast<size_t>(k + 1)] = std::sin(a) * x + std::cos(a) * y;
        }
        return out;
    }

    // sentence templates -----------------------------------------------------

    struct Mention {
        int object;
        int attribute;  // -1 when none
    };

    std::vector<Mention> sample_mentions(Rng& rng, int max_objects) const {
        int k = rng.uniform_int(1, max_objects);
        std::vector<int> pool(static_cast<size_t>(num_objects()));
        for (size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);
        rng.shuffle(pool);
        std::vector<Mention> out;
        for (int i = 0; i < k; ++i) {
            int attr = -1;
            if (rng.uniform() < cfg_.attribute_prob)
                attr = num_objects() + rng.uniform_int(0, static_cast<int>(cfg_.attribute_names.size()) - 1);
            out.push_back({pool[static_cast<size_t>(i)], attr});
        }
        return out;
    }

    void append_description(std::vector<int>& s, const std::vector<Mention>& ms) const {
        for (size_t i = 0; i < ms.size(); ++i) {
            if (i) s.push_back(vocab_.id("and"));
            s.push_back(token_of_concept(ms[i].object));
            if (ms[i].attribute >= 0) s.push_back(token_of_concept(ms[i].attribute));
        }
    }

    void append_objects(std::vector<int>& s, const std::vector<Mention>& ms) const {
        for (size_t i = 0; i < ms.size(); ++i) {
            if (i) s.push_back(vocab_.id("and"));
            s.push_back(token_of_concept(ms[i].object));
        }
    }

    std::vector<int> caption_sentence(Rng& rng) const {
        auto ms = sample_mentions(rng, 3);
        std::sort(ms.begin(), ms.end(),
                  [](const Mention& a, const Mention& b) { return a.object < b.object; });
        std::vector<int> s = {TokenVocab::kBos};
        append_objects(s, ms);
        s.push_back(TokenVocab::kEos);
        return s;
    }

    /// "BOS <mentions in random order> . what is present ? <objects in
    /// canonical order> EOS" -- the enumeration circuit that multimodal
    /// captioning reuses.
    std::vector<int> recap_sentence(Rng& rng) const {
        auto ms = sample_mentions(rng, 3);
        std::vector<int> s = {TokenVocab::kBos};
        append_description(s, ms);
        std::vector<int> prompt = caption_prompt();
        s.insert(s.end(), prompt.begin(), prompt.end());
        std::sort(ms.begin(), ms.end(),
                  [](const Mention& a, const Mention& b) { return a.object < b.object; });
        append_objects(s, ms);
        s.push_back(TokenVocab::kEos);
        return s;
    }

    // Patch-grid context block: one word per patch in patch order, "nothing"
    // for empty cells. The text twin of the visual-token prefix.
    struct GridContext {
        std::vector<int> cells;           // object id per patch, -1 empty
        std::vector<int> objects_sorted;  // distinct ids ascending
    };

    GridContext sample_grid(Rng& rng) const {
        GridContext g;
        int n = cfg_.grid * cfg_.grid;
        g.cells.assign(static_cast<size_t>(n), -1);
        int n_obj = rng.uniform_int(cfg_.min_objects, cfg_.max_objects);
        std::vector<int> pool(static_cast<size_t>(num_objects()));
        for (size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);
        rng.shuffle(pool);
        std::vector<int> free(static_cast<size_t>(n));
        for (size_t i = 0; i < free.size(); ++i) free[i] = static_cast<int>(i);
        rng.shuffle(free);
        size_t cursor = 0;
        for (int o = 0; o < n_obj; ++o) {
            int span = rng.uniform_int(cfg_.min_patches, cfg_.max_patches);
            for (int k = 0; k < span; ++k) g.cells[static_cast<size_t>(free[cursor++])] = pool[static_cast<size_t>(o)];
            g.objects_sorted.push_back(pool[static_cast<size_t>(o)]);
        }
        std::sort(g.objects_sorted.begin(), g.objects_sorted.end());
        return g;
    }

    void append_grid(std::vector<int>& s, const GridContext& g) const {
        int nothing = vocab_.id("nothing");
        for (int c : g.cells) s.push_back(c >= 0 ? token_of_concept(c) : nothing);
    }

    std::vector<int> grid_recap_sentence(Rng& rng) const {
        GridContext g = sample_grid(rng);
        std::vector<int> s = {TokenVocab::kBos};
        append_grid(s, g);
        std::vector<int> prompt = caption_prompt();
        s.insert(s.end(), prompt.begin(), prompt.end());
        for (size_t i = 0; i < g.objects_sorted.size(); ++i) {
            if (i) s.push_back(vocab_.id("and"));
            s.push_back(token_of_concept(g.objects_sorted[i]));
        }
        s.push_back(TokenVocab::kEos);
        return s;
    }

    std::vector<int> grid_presence_sentence(Rng& rng) const {
        GridContext g = sample_grid(rng);
        std::vector<int> s = {TokenVocab::kBos};
        append_grid(s, g);
        bool ask_present = rng.uniform() < 0.5;
        int subject;
        if (ask_present) {
            subject = g.objects_sorted[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int>(g.objects_sorted.size()) - 1))];
        } else {
            do {
                subject = rng.uniform_int(0, num_objects() - 1);
            } while (std::find(g.objects_sorted.begin(), g.objects_sorted.end(), subject) !=
                     g.objects_sorted.end());
        }
        std::vector<int> q = presence_question(subject);
        s.insert(s.end(), q.begin(), q.end());
        s.push_back(vocab_.id(ask_present ? "yes" : "no"));
        s.push_back(TokenVocab::kEos);
        return s;
    }

    std::vector<int> grid_what_at_sentence(Rng& rng) const {
        GridContext g = sample_grid(rng);
        std::vector<int> s = {TokenVocab::kBos};
        append_grid(s, g);
        int cell = rng.uniform_int(0, cfg_.grid * cfg_.grid - 1);
        std::vector<int> q = what_at_question(cell);
        s.insert(s.end(), q.begin(), q.end());
        int obj = g.cells[static_cast<size_t>(cell)];
        s.push_back(obj >= 0 ? token_of_concept(obj) : vocab_.id("nothing"));
        s.push_back(TokenVocab::kEos);
        return s;
    }

    std::vector<int> presence_qa_sentence(Rng& rng) const {
        auto ms = sample_mentions(rng, 3);
        std::vector<int> s = {TokenVocab::kBos};
        append_description(s, ms);
        bool ask_present = rng.uniform() < 0.5;
        int subject;
        if (ask_present) {
            subject = ms[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(ms.size()) - 1))].object;
        } else {
            do {
                subject = rng.uniform_int(0, num_objects() - 1);
            } while (std::any_of(ms.begin(), ms.end(), [&](const Mention& m) { return m.object == subject; }));
        }
        std::vector<int> q = presence_question(subject);
        s.insert(s.end(), q.begin(), q.end());
        s.push_back(vocab_.id(ask_present ? "yes" : "no"));
        s.push_back(TokenVocab::kEos);
        return s;
    }

    std::vector<int> attribute_qa_sentence(Rng& rng) const {
        auto ms = sample_mentions(rng, 2);
        std::vector<int> s = {TokenVocab::kBos};
        append_description(s, ms);
        const Mention& subject = ms[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(ms.size()) - 1))];
        int attr;
        bool truthy;
        if (subject.attribute >= 0 && rng.uniform() < 0.5) {
            attr = subject.attribute;
            truthy = true;
        } else {
            attr = num_objects() + rng.uniform_int(0, static_cast<int>(cfg_.attribute_names.size()) - 1);
            truthy = (attr == subject.attribute);
        }
        std::vector<int> q = attribute_question(subject.object, attr);
        s.insert(s.end(), q.begin(), q.end());
        s.push_back(vocab_.id(truthy ? "yes" : "no"));
        s.push_back(TokenVocab::kEos);
        return s;
    }

    WorldConfig cfg_;
    std::vector<Concept> concepts_;
    TokenVocab vocab_;
    std::vector<std::vector<double>> directions_;
    std::vector<double> background_;
    std::vector<std::vector<double>> shifted_directions_;
    std::vector<double> shifted_background_;
    std::vector<double> shift_angles_;
};

}  // namespace saelab
