// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multilingual corpora, parallel file ingestion, and
// token-budgeted batching.
//
// Synthetic languages share one latent token stream; each language renders
// it through a bijective transform (identity, seeded substitution cipher,
// token reversal, or suffix marking). Bijectivity gives every language
// pair an exact reference translation: parse with the source transform,
// render with the target one. Latent tokens surface as fixed 4-character
// consonant-vowel words so BPE has subword structure to find.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "modmt/common.hpp"
#include "modmt/rng.hpp"

namespace modmt {

enum class TransformKind { identity, substitution_cipher, token_reversal, suffix_marking };

inline std::string transform_name(TransformKind k) {
    switch (k) {
        case TransformKind::identity: return "identity";
        case TransformKind::substitution_cipher: return "substitution-cipher";
        case TransformKind::token_reversal: return "token-reversal";
        case TransformKind::suffix_marking: return "suffix-marking";
    }
    throw ContractError("transform_name: bad enum value");
}

inline TransformKind transform_from_name(const std::string& name) {
    if (name == "identity") return TransformKind::identity;
    if (name == "substitution-cipher") return TransformKind::substitution_cipher;
    if (name == "token-reversal") return TransformKind::token_reversal;
    if (name == "suffix-marking") return TransformKind::suffix_marking;
    throw ConfigError("unknown transform \"" + name +
                      "\"; expected identity, substitution-cipher, token-reversal, or suffix-marking");
}

struct SyntheticLanguageSpec {
    std::string language;
    TransformKind kind = TransformKind::identity;
    std::uint64_t cipher_seed = 0;  // substitution-cipher only
    std::string marker = "ka";      // suffix-marking only
};

namespace corpus_detail {

inline const std::string kConsonants = "bcdfghjklmnpqrstvwz";  // 19
inline const std::string kVowels = "aeiou";                    // 5
inline constexpr std::size_t kSyllables = 95;                  // 19 * 5
inline constexpr std::size_t kMaxLatentVocab = kSyllables * kSyllables;

inline std::string syllable(std::size_t x) {
    std::string s;
    s += kConsonants[x / kVowels.size()];
    s += kVowels[x % kVowels.size()];
    return s;
}

inline std::size_t syllable_index(char c0, char c1) {
    const auto ci = kConsonants.find(c0);
    const auto vi = kVowels.find(c1);
    if (ci == std::string::npos || vi == std::string::npos) {
        throw DataError(std::string("not a latent syllable: \"") + c0 + c1 + "\"");
    }
    return ci * kVowels.size() + vi;
}

}  // namespace corpus_detail

// Two syllables encode one latent token; every surface word is 4 chars.
inline std::string latent_word(std::size_t token) {
    using namespace corpus_detail;
    if (token >= kMaxLatentVocab) {
        throw ContractError("latent token " + std::to_string(token) + " exceeds the " +
                            std::to_string(kMaxLatentVocab) + "-word lexicon");
    }
    return syllable(token % kSyllables) + syllable(token / kSyllables);
}

inline std::size_t latent_token(const std::string& word) {
    using namespace corpus_detail;
    if (word.size() != 4) throw DataError("not a latent word: \"" + word + "\"");
    return syllable_index(word[0], word[1]) + kSyllables * syllable_index(word[2], word[3]);
}

// Runtime form of a language spec: renders latent token sentences to text
// and parses them back. render and parse are exact inverses.
class LanguageTransform {
public:
    LanguageTransform() = default;

    LanguageTransform(SyntheticLanguageSpec spec, std::size_t latent_vocab)
        : spec_(std::move(spec)), latent_vocab_(latent_vocab) {
        if (spec_.kind == TransformKind::substitution_cipher) {
            perm_.resize(latent_vocab);
            std::iota(perm_.begin(), perm_.end(), std::size_t{0});
            Rng rng(spec_.cipher_seed);
            rng.shuffle(perm_);
            inv_perm_.resize(latent_vocab);
            for (std::size_t i = 0; i < latent_vocab; ++i) inv_perm_[perm_[i]] = i;
        }
        if (spec_.kind == TransformKind::suffix_marking && spec_.marker.empty()) {
            throw ConfigError("suffix-marking transform needs a non-empty marker");
        }
    }

    const SyntheticLanguageSpec& spec() const { return spec_; }
    const std::vector<std::size_t>& cipher() const { return perm_; }

    std::string render(const std::vector<std::size_t>& latent) const {
        std::string out;
        for (std::size_t i = 0; i < latent.size(); ++i) {
            const std::size_t k =
                spec_.kind == TransformKind::token_reversal ? latent.size() - 1 - i : i;
            std::size_t t = latent[k];
            check_token(t);
            if (spec_.kind == TransformKind::substitution_cipher) t = perm_[t];
            if (!out.empty()) out += ' ';
            out += latent_word(t);
            if (spec_.kind == TransformKind::suffix_marking) out += spec_.marker;
        }
        return out;
    }

    std::vector<std::size_t> parse(const std::string& sentence) const {
        std::vector<std::size_t> latent;
        std::istringstream is(sentence);
        std::string word;
        while (is >> word) {
            if (spec_.kind == TransformKind::suffix_marking) {
                const auto& m = spec_.marker;
                if (word.size() <= m.size() || word.compare(word.size() - m.size(), m.size(), m) != 0) {
                    throw DataError("word \"" + word + "\" lacks the marker \"" + m + "\"");
                }
                word.resize(word.size() - m.size());
            }
            std::size_t t = latent_token(word);
            if (spec_.kind == TransformKind::substitution_cipher) {
                if (t >= inv_perm_.size()) {
                    throw DataError("word \"" + word + "\" is outside the cipher lexicon");
                }
                t = inv_perm_[t];
            }
            check_token(t);
            latent.push_back(t);
        }
        if (spec_.kind == TransformKind::token_reversal) {
            std::reverse(latent.begin(), latent.end());
        }
        return latent;
    }

private:
    void check_token(std::size_t t) const {
        if (t >= latent_vocab_) {
            throw DataError("latent token " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(latent_vocab_));
        }
    }

    SyntheticLanguageSpec spec_;
    std::size_t latent_vocab_ = 0;
    std::vector<std::size_t> perm_, inv_perm_;
};

struct SyntheticCorpus {
    std::uint64_t seed = 0;
    std::size_t latent_vocab = 0;
    std::size_t len_lo = 0, len_hi = 0;
    std::vector<SyntheticLanguageSpec> specs;
    std::vector<std::vector<std::size_t>> latent;
    std::map<std::string, std::vector<std::string>> text;  // language -> sentences

    const std::vector<std::string>& sentences(const std::string& language) const {
        auto it = text.find(language);
        if (it == text.end()) throw ContractError("no corpus for language \"" + language + "\"");
        return it->second;
    }

    LanguageTransform transform(const std::string& language) const {
        for (const auto& s : specs) {
            if (s.language == language) return LanguageTransform(s, latent_vocab);
        }
        throw ContractError("no language spec for \"" + language + "\"");
    }
};

inline SyntheticCorpus generate_synthetic(const std::vector<SyntheticLanguageSpec>& specs,
                                          std::size_t n_sentences, std::size_t latent_vocab,
                                          std::size_t len_lo, std::size_t len_hi,
                                          std::uint64_t seed) {
    if (specs.empty()) throw ConfigError("generate_synthetic: no language specs");
    if (latent_vocab < 10) {
        throw ConfigError("generate_synthetic: latent_vocab must be at least 10, got " +
                          std::to_string(latent_vocab));
    }
    if (latent_vocab > corpus_detail::kMaxLatentVocab) {
        throw ConfigError("generate_synthetic: latent_vocab capped at " +
                          std::to_string(corpus_detail::kMaxLatentVocab));
    }
    if (len_lo < 1 || len_hi > 40 || len_lo > len_hi) {
        throw ConfigError("generate_synthetic: length range [" + std::to_string(len_lo) + ", " +
                          std::to_string(len_hi) + "] must sit within [1, 40]");
    }
    if (n_sentences == 0) throw ConfigError("generate_synthetic: n_sentences is zero");
    {
        std::set<std::string> names;
        for (const auto& s : specs) {
            if (!names.insert(s.language).second) {
                throw ConfigError("generate_synthetic: duplicate language \"" + s.language + "\"");
            }
        }
    }

    SyntheticCorpus corpus;
    corpus.seed = seed;
    corpus.latent_vocab = latent_vocab;
    corpus.len_lo = len_lo;
    corpus.len_hi = len_hi;
    corpus.specs = specs;

    Rng rng(seed);
    corpus.latent.reserve(n_sentences);
    for (std::size_t i = 0; i < n_sentences; ++i) {
        std::vector<std::size_t> sent(rng.range(len_lo, len_hi));
        for (auto& t : sent) t = rng.below(latent_vocab);
        corpus.latent.push_back(std::move(sent));
    }

    for (const auto& spec : specs) {
        LanguageTransform tf(spec, latent_vocab);
        auto& lines = corpus.text[spec.language];
        lines.reserve(n_sentences);
        for (const auto& sent : corpus.latent) lines.push_back(tf.render(sent));
    }
    return corpus;
}

// Train/test/validation boundaries: the last 5% of sentences are
// validation, the 5% before that test, the rest training.
struct SplitRanges {
    std::size_t train_end = 0;  // train = [0, train_end)
    std::size_t test_end = 0;   // test = [train_end, test_end), val = [test_end, n)
};

inline SplitRanges split_ranges(std::size_t n_sentences) {
    const std::size_t k = n_sentences / 20;
    if (k == 0) {
        throw DataError("corpus of " + std::to_string(n_sentences) +
                        " sentences is too small to split (need at least 20)");
    }
    return {n_sentences - 2 * k, n_sentences - k};
}

// ---------------------------------------------------------------------------
// Plain-text line IO. CRLF and LF inputs are equivalent.
// ---------------------------------------------------------------------------
inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    for (const auto& line : lines) f << line << '\n';
}

inline std::vector<std::pair<std::string, std::string>> load_parallel(const std::string& src_path,
                                                                      const std::string& tgt_path) {
    auto src = read_lines(src_path);
    auto tgt = read_lines(tgt_path);
    while (!src.empty() && src.back().empty()) src.pop_back();
    while (!tgt.empty() && tgt.back().empty()) tgt.pop_back();
    if (src.size() != tgt.size()) {
        throw DataError("parallel line counts differ: " + std::to_string(src.size()) + " in " +
                        src_path + " vs " + std::to_string(tgt.size()) + " in " + tgt_path);
    }
    std::vector<std::pair<std::string, std::string>> pairs;
    pairs.reserve(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
        pairs.emplace_back(std::move(src[i]), std::move(tgt[i]));
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Batching: encoded pairs packed under a source+target non-pad token
// budget, grouped by similar total length to limit padding waste.
// ---------------------------------------------------------------------------
struct EncodedPair {
    std::vector<std::int32_t> src;
    std::vector<std::int32_t> tgt;
};

struct ParallelBatch {
    std::string src_lang, tgt_lang;
    std::size_t rows = 0;
    std::size_t src_len = 0, tgt_len = 0;
    std::vector<std::int32_t> src_ids;    // rows x src_len, pad = 0
    std::vector<std::uint8_t> src_mask;   // 1 = real token
    std::vector<std::int32_t> tgt_ids;    // rows x tgt_len
    std::vector<std::uint8_t> tgt_mask;
    std::size_t live_tokens = 0;
};

inline std::vector<ParallelBatch> make_batches(const std::vector<EncodedPair>& pairs,
                                               std::size_t token_budget, std::uint64_t seed,
                                               const std::string& src_lang = "",
                                               const std::string& tgt_lang = "") {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const std::size_t total = pairs[i].src.size() + pairs[i].tgt.size();
        if (total > token_budget) {
            throw DataError("pair at line " + std::to_string(i) + " needs " + std::to_string(total) +
                            " tokens, over the budget of " + std::to_string(token_budget));
        }
    }

    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(), [&pairs](std::size_t a, std::size_t b) {
        return pairs[a].src.size() + pairs[a].tgt.size() <
               pairs[b].src.size() + pairs[b].tgt.size();
    });

    std::vector<std::vector<std::size_t>> groups;
    std::size_t used = 0;
    for (std::size_t idx : order) {
        const std::size_t need = pairs[idx].src.size() + pairs[idx].tgt.size();
        if (groups.empty() || used + need > token_budget) {
            groups.emplace_back();
            used = 0;
        }
        groups.back().push_back(idx);
        used += need;
    }
    rng.shuffle(groups);

    std::vector<ParallelBatch> batches;
    batches.reserve(groups.size());
    for (const auto& group : groups) {
        ParallelBatch b;
        b.src_lang = src_lang;
        b.tgt_lang = tgt_lang;
        b.rows = group.size();
        for (std::size_t idx : group) {
            b.src_len = std::max(b.src_len, pairs[idx].src.size());
            b.tgt_len = std::max(b.tgt_len, pairs[idx].tgt.size());
        }
        b.src_ids.assign(b.rows * b.src_len, 0);
        b.src_mask.assign(b.rows * b.src_len, 0);
        b.tgt_ids.assign(b.rows * b.tgt_len, 0);
        b.tgt_mask.assign(b.rows * b.tgt_len, 0);
        for (std::size_t r = 0; r < b.rows; ++r) {
            const auto& p = pairs[group[r]];
            for (std::size_t c = 0; c < p.src.size(); ++c) {
                b.src_ids[r * b.src_len + c] = p.src[c];
                b.src_mask[r * b.src_len + c] = 1;
            }
            for (std::size_t c = 0; c < p.tgt.size(); ++c) {
                b.tgt_ids[r * b.tgt_len + c] = p.tgt[c];
                b.tgt_mask[r * b.tgt_len + c] = 1;
            }
            b.live_tokens += p.src.size() + p.tgt.size();
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// Manifest: everything needed to regenerate a synthetic corpus bit-exactly.
// ---------------------------------------------------------------------------
inline std::string manifest_text(const SyntheticCorpus& corpus, std::size_t n_sentences) {
    nlohmann::json j;
    j["format"] = "modmt-corpus-v1";
    j["seed"] = corpus.seed;
    j["n_sentences"] = n_sentences;
    j["latent_vocab"] = corpus.latent_vocab;
    j["len_lo"] = corpus.len_lo;
    j["len_hi"] = corpus.len_hi;
    j["languages"] = nlohmann::json::array();
    for (const auto& s : corpus.specs) {
        nlohmann::json e;
        e["language"] = s.language;
        e["transform"] = transform_name(s.kind);
        if (s.kind == TransformKind::substitution_cipher) e["cipher_seed"] = s.cipher_seed;
        if (s.kind == TransformKind::suffix_marking) e["marker"] = s.marker;
        j["languages"].push_back(e);
    }
    return j.dump(2) + "\n";
}

inline SyntheticCorpus corpus_from_manifest(const std::string& manifest_blob) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(manifest_blob);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!j.contains("format") || j["format"] != "modmt-corpus-v1") {
        throw DataError("manifest missing format tag modmt-corpus-v1");
    }
    try {
        std::vector<SyntheticLanguageSpec> specs;
        for (const auto& e : j.at("languages")) {
            SyntheticLanguageSpec s;
            s.language = e.at("language").get<std::string>();
            s.kind = transform_from_name(e.at("transform").get<std::string>());
            if (s.kind == TransformKind::substitution_cipher) {
                s.cipher_seed = e.at("cipher_seed").get<std::uint64_t>();
            }
            if (s.kind == TransformKind::suffix_marking) {
                s.marker = e.at("marker").get<std::string>();
            }
            specs.push_back(std::move(s));
        }
        return generate_synthetic(specs, j.at("n_sentences").get<std::size_t>(),
                                  j.at("latent_vocab").get<std::size_t>(),
                                  j.at("len_lo").get<std::size_t>(),
                                  j.at("len_hi").get<std::size_t>(),
                                  j.at("seed").get<std::uint64_t>());
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest field error: ") + e.what());
    }
}

}  // namespace modmt
