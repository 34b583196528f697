// SPDX-License-Identifier: Apache-2.0
//
// Byte Pair Encoding, one independent model per language. Follows the
// original merge-learning loop: count adjacent symbol pairs over the
// word-frequency table (overlapping count), merge the most frequent pair
// everywhere (left-to-right, non-overlapping), repeat. Ties break on the
// lexicographically smaller pair so learning is deterministic. Words carry
// the end-of-word marker "</w>" fused onto their final symbol.
//
// Characters are bytes: the synthetic corpora are ASCII and multi-byte
// input still round-trips as long as every byte was seen in training.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "modmt/common.hpp"

namespace modmt {

inline const std::string kEow = "</w>";
inline const std::string kUnkText = "⟨unk⟩";  // visible placeholder on decode

struct BpeModel {
    static constexpr std::int32_t pad_id = 0;
    static constexpr std::int32_t unk_id = 1;
    static constexpr std::int32_t bos_id = 2;
    static constexpr std::int32_t eos_id = 3;

    std::string language;
    std::vector<std::pair<std::string, std::string>> merges;
    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, std::int32_t> token_to_id;

    std::size_t vocab_size() const { return id_to_token.size(); }

    // Lookup that never invents ids: unknown tokens report unk.
    std::int32_t id_of(const std::string& token) const {
        auto it = token_to_id.find(token);
        return it == token_to_id.end() ? unk_id : it->second;
    }

    bool has_token(const std::string& token) const {
        return token_to_id.find(token) != token_to_id.end();
    }
};

namespace bpe_detail {

inline bool is_punct_byte(unsigned char c) {
    return std::ispunct(c) != 0;
}

// Whitespace split with leading/trailing punctuation detached as
// single-byte tokens. A minimal stand-in for heavier preprocessing.
inline std::vector<std::string> pretokenize(const std::string& text) {
    std::vector<std::string> words;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i >= n) break;
        std::size_t j = i;
        while (j < n && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        std::string word = text.substr(i, j - i);
        i = j;

        std::size_t lo = 0, hi = word.size();
        std::vector<std::string> tail;
        while (lo < hi && is_punct_byte(static_cast<unsigned char>(word[lo]))) {
            words.push_back(word.substr(lo, 1));
            ++lo;
        }
        while (hi > lo && is_punct_byte(static_cast<unsigned char>(word[hi - 1]))) {
            tail.push_back(word.substr(hi - 1, 1));
            --hi;
        }
        if (hi > lo) words.push_back(word.substr(lo, hi - lo));
        words.insert(words.end(), tail.rbegin(), tail.rend());
    }
    return words;
}

inline std::vector<std::string> word_symbols(const std::string& word) {
    std::vector<std::string> syms;
    syms.reserve(word.size());
    for (std::size_t i = 0; i < word.size(); ++i) syms.emplace_back(1, word[i]);
    if (!syms.empty()) syms.back() += kEow;
    return syms;
}

// Replace every adjacent (l, r) by their concatenation, scanning left to
// right without overlap. Learning and encoding share this exact routine so
// replaying the merge list reproduces learning-time segmentation.
inline void apply_merge(std::vector<std::string>& syms, const std::string& l,
                        const std::string& r) {
    std::size_t w = 0;
    for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == l && syms[i + 1] == r) {
            syms[w++] = l + r;
            i += 2;
        } else {
            if (w != i) syms[w] = std::move(syms[i]);
            ++w;
            ++i;
        }
    }
    syms.resize(w);
}

}  // namespace bpe_detail

// Applies the full merge list to one word. Exposed so tests can compare
// segmentations against an independent oracle.
inline std::vector<std::string> segment_word(const BpeModel& model, const std::string& word) {
    auto syms = bpe_detail::word_symbols(word);
    for (const auto& [l, r] : model.merges) {
        if (syms.size() < 2) break;
        bpe_detail::apply_merge(syms, l, r);
    }
    return syms;
}

// control_tokens get fixed ids 4.. ahead of learned entries; the trainer
// uses them as target-language tags in the shared-baseline mode.
inline BpeModel learn_bpe(const std::vector<std::string>& corpus, std::size_t target_vocab,
                          const std::string& language,
                          const std::vector<std::string>& control_tokens = {}) {
    if (corpus.empty()) throw ConfigError("learn_bpe: empty corpus");

    std::map<std::string, long> word_freq;
    for (const auto& line : corpus) {
        for (auto& w : bpe_detail::pretokenize(line)) ++word_freq[w];
    }
    if (word_freq.empty()) throw ConfigError("learn_bpe: corpus has no words");

    std::set<std::string> inventory;
    for (const auto& [word, freq] : word_freq) {
        for (char c : word) {
            inventory.emplace(1, c);
            inventory.emplace(std::string(1, c) + kEow);
        }
    }
    const std::size_t reserved = 4 + control_tokens.size() + inventory.size();
    if (target_vocab <= reserved) {
        throw ConfigError("learn_bpe: target_vocab " + std::to_string(target_vocab) +
                          " must exceed " + std::to_string(reserved) + " (4 specials + " +
                          std::to_string(control_tokens.size()) + " control tokens + " +
                          std::to_string(inventory.size()) + " characters)");
    }

    BpeModel model;
    model.language = language;
    auto add_token = [&model](const std::string& tok) {
        if (model.token_to_id.count(tok)) return;
        model.token_to_id[tok] = static_cast<std::int32_t>(model.id_to_token.size());
        model.id_to_token.push_back(tok);
    };
    add_token("<pad>");
    add_token("<unk>");
    add_token("<bos>");
    add_token("<eos>");
    for (const auto& t : control_tokens) add_token(t);
    for (const auto& s : inventory) add_token(s);

    std::vector<std::pair<std::vector<std::string>, long>> table;
    table.reserve(word_freq.size());
    for (const auto& [word, freq] : word_freq) {
        table.emplace_back(bpe_detail::word_symbols(word), freq);
    }

    while (model.vocab_size() < target_vocab) {
        std::map<std::pair<std::string, std::string>, long> pair_freq;
        for (const auto& [syms, freq] : table) {
            for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
                pair_freq[{syms[i], syms[i + 1]}] += freq;
            }
        }
        const std::pair<std::string, std::string>* best = nullptr;
        long best_freq = 0;
        for (const auto& [pair, freq] : pair_freq) {
            if (freq > best_freq) {  // map order makes the first max the smallest pair
                best = &pair;
                best_freq = freq;
            }
        }
        if (!best || best_freq < 2) break;

        model.merges.push_back(*best);
        for (auto& [syms, freq] : table) {
            if (syms.size() >= 2) bpe_detail::apply_merge(syms, best->first, best->second);
        }
        add_token(best->first + best->second);
    }
    return model;
}

inline std::vector<std::int32_t> encode(const BpeModel& model, const std::string& text) {
    std::vector<std::int32_t> ids;
    ids.push_back(BpeModel::bos_id);
    for (const auto& word : bpe_detail::pretokenize(text)) {
        for (const auto& sym : segment_word(model, word)) {
            ids.push_back(model.id_of(sym));
        }
    }
    ids.push_back(BpeModel::eos_id);
    return ids;
}

inline std::string decode(const BpeModel& model, const std::vector<std::int32_t>& ids) {
    std::string out;
    std::string word;
    auto flush = [&out, &word]() {
        if (word.empty()) return;
        if (!out.empty()) out += ' ';
        out += word;
        word.clear();
    };
    for (std::int32_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= model.vocab_size()) {
            throw ContractError("decode: id " + std::to_string(id) + " out of range [0, " +
                                std::to_string(model.vocab_size()) + ")");
        }
        if (id == BpeModel::pad_id || id == BpeModel::bos_id || id == BpeModel::eos_id) continue;
        if (id == BpeModel::unk_id) {
            word += kUnkText;
            continue;
        }
        const std::string& tok = model.id_to_token[static_cast<std::size_t>(id)];
        if (tok.size() >= kEow.size() &&
            tok.compare(tok.size() - kEow.size(), kEow.size(), kEow) == 0) {
            word += tok.substr(0, tok.size() - kEow.size());
            flush();
        } else {
            word += tok;
        }
    }
    flush();
    return out;
}

// ---------------------------------------------------------------------------
// Plain-text persistence. Merges: header "bpe-v1 <language> <vocab_size>"
// then one "left right" line per merge. Vocab: "token<TAB>id" lines.
// ---------------------------------------------------------------------------
inline std::string merges_text(const BpeModel& model) {
    std::ostringstream os;
    os << "bpe-v1 " << model.language << ' ' << model.vocab_size() << '\n';
    for (const auto& [l, r] : model.merges) os << l << ' ' << r << '\n';
    return os.str();
}

inline std::string vocab_text(const BpeModel& model) {
    std::ostringstream os;
    for (std::size_t id = 0; id < model.id_to_token.size(); ++id) {
        os << model.id_to_token[id] << '\t' << id << '\n';
    }
    return os.str();
}

inline BpeModel bpe_from_text(const std::string& merges_blob, const std::string& vocab_blob) {
    BpeModel model;
    std::istringstream ms(merges_blob);
    std::string header;
    if (!std::getline(ms, header)) throw DataError("bpe: empty merges data");
    std::size_t declared = 0;
    {
        std::istringstream hs(header);
        std::string magic;
        if (!(hs >> magic >> model.language >> declared) || magic != "bpe-v1") {
            throw DataError("bpe: bad header line \"" + header + "\", expected \"bpe-v1 <language> <vocab_size>\"");
        }
        model.id_to_token.reserve(declared);
    }
    std::string line;
    while (std::getline(ms, line)) {
        if (line.empty()) continue;
        const auto sp = line.find(' ');
        if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size()) {
            throw DataError("bpe: malformed merge line \"" + line + "\"");
        }
        model.merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }

    std::istringstream vs(vocab_blob);
    std::vector<std::pair<std::string, std::size_t>> entries;
    while (std::getline(vs, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw DataError("bpe: malformed vocab line \"" + line + "\"");
        std::size_t id = 0;
        try {
            id = static_cast<std::size_t>(std::stoull(line.substr(tab + 1)));
        } catch (const std::exception&) {
            throw DataError("bpe: malformed vocab id in \"" + line + "\"");
        }
        entries.emplace_back(line.substr(0, tab), id);
    }
    model.id_to_token.assign(entries.size(), std::string());
    for (auto& [tok, id] : entries) {
        if (id >= entries.size()) throw DataError("bpe: vocab id " + std::to_string(id) + " out of range");
        if (!model.id_to_token[id].empty()) throw DataError("bpe: duplicate vocab id " + std::to_string(id));
        if (model.token_to_id.count(tok)) throw DataError("bpe: duplicate vocab token \"" + tok + "\"");
        model.id_to_token[id] = tok;
        model.token_to_id[tok] = static_cast<std::int32_t>(id);
    }
    if (model.vocab_size() < 4 || model.id_to_token[0] != "<pad>" || model.id_to_token[1] != "<unk>" ||
        model.id_to_token[2] != "<bos>" || model.id_to_token[3] != "<eos>") {
        throw DataError("bpe: vocab is missing the reserved specials at ids 0-3");
    }
    if (model.vocab_size() != declared) {
        throw DataError("bpe: header declares " + std::to_string(declared) + " tokens, vocab has " +
                        std::to_string(model.vocab_size()));
    }
    return model;
}

inline void save_bpe(const BpeModel& model, const std::string& merges_path,
                     const std::string& vocab_path) {
    std::ofstream mf(merges_path, std::ios::binary);
    if (!mf) throw DataError("bpe: cannot write " + merges_path);
    mf << merges_text(model);
    std::ofstream vf(vocab_path, std::ios::binary);
    if (!vf) throw DataError("bpe: cannot write " + vocab_path);
    vf << vocab_text(model);
}

inline std::string read_file_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

inline BpeModel load_bpe(const std::string& merges_path, const std::string& vocab_path) {
    return bpe_from_text(read_file_text(merges_path), read_file_text(vocab_path));
}

}  // namespace modmt
