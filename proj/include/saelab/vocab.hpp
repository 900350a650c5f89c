// Copyright (c) 2026, the saelab authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "saelab/common.hpp"

namespace saelab {

/// Bijective token <-> id mapping. Reserved ids occupy [0,4).
class TokenVocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kImg = 3;  // placeholder marking visual-token positions

    TokenVocab() = default;

    /// Builds a vocab of exactly `size` ids: reserved, then `words` in order,
    /// then filler tokens.
    static TokenVocab build(const std::vector<std::string>& words, int size) {
        TokenVocab v;
        v.add("<pad>");
        v.add("<bos>");
        v.add("<eos>");
        v.add("<img>");
        for (const std::string& w : words) v.add(w);
        if (static_cast<int>(v.tokens_.size()) > size)
            throw ConfigError("vocab: " + std::to_string(v.tokens_.size()) +
                              " tokens exceed configured size " + std::to_string(size));
        int filler = 0;
        while (static_cast<int>(v.tokens_.size()) < size) v.add("<unused" + std::to_string(filler++) + ">");
        return v;
    }

    int size() const { return static_cast<int>(tokens_.size()); }

    int id(const std::string& token) const {
        auto it = ids_.find(token);
        if (it == ids_.end()) throw ContractError("vocab: unknown token '" + token + "'");
        return it->second;
    }

    bool contains(const std::string& token) const { return ids_.count(token) != 0; }

    const std::string& token(int id) const {
        if (id < 0 || id >= size())
            throw ContractError("vocab: id " + std::to_string(id) + " outside [0, " +
                                std::to_string(size()) + ")");
        return tokens_[static_cast<size_t>(id)];
    }

    std::string render(const std::vector<int>& ids) const {
        std::string out;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += token(ids[i]);
        }
        return out;
    }

private:
    void add(const std::string& t) {
        if (ids_.count(t)) throw ConfigError("vocab: duplicate token '" + t + "'");
        ids_[t] = static_cast<int>(tokens_.size());
        tokens_.push_back(t);
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

}  // namespace saelab
