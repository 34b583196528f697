// SPDX-License-Identifier: Apache-2.0
//
// Corpus BLEU-4 over whitespace tokens, positional token accuracy,
// translation through any encoder/decoder composition, and the full
// direction matrix. Zero-shot pairs run the exact same translate path;
// the flag comes from recorded training history and affects reporting
// only.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "modmt/registry.hpp"
#include "modmt/trainer.hpp"
#include "modmt/transformer.hpp"

namespace modmt {

namespace eval_detail {

inline std::vector<std::string> split_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

inline std::string join_ngram(const std::vector<std::string>& toks, std::size_t start,
                              std::size_t n) {
    std::string key = toks[start];
    for (std::size_t i = 1; i < n; ++i) {
        key += '\x1f';
        key += toks[start + i];
    }
    return key;
}

}  // namespace eval_detail

struct BleuBreakdown {
    double score = 0.0;                       // 0..100
    std::array<double, 4> precisions{};      // modified n-gram precisions
    double brevity_penalty = 1.0;
    std::size_t hyp_tokens = 0;
    std::size_t ref_tokens = 0;
};

inline BleuBreakdown bleu_breakdown(const std::vector<std::string>& hypotheses,
                                    const std::vector<std::string>& references,
                                    bool add_one_smoothing = false) {
    using namespace eval_detail;
    if (hypotheses.size() != references.size()) {
        throw ContractError("bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                            std::to_string(references.size()) + " references");
    }
    if (hypotheses.empty()) throw ContractError("bleu: need at least one sentence pair");

    std::array<std::size_t, 4> matched{};
    std::array<std::size_t, 4> total{};
    BleuBreakdown out;

    for (std::size_t s = 0; s < hypotheses.size(); ++s) {
        const auto hyp = split_tokens(hypotheses[s]);
        const auto ref = split_tokens(references[s]);
        out.hyp_tokens += hyp.size();
        out.ref_tokens += ref.size();
        for (std::size_t n = 1; n <= 4; ++n) {
            if (hyp.size() + 1 <= n) continue;
            std::map<std::string, std::size_t> ref_counts;
            if (ref.size() + 1 > n) {
                for (std::size_t i = 0; i + n <= ref.size(); ++i) {
                    ++ref_counts[join_ngram(ref, i, n)];
                }
            }
            std::map<std::string, std::size_t> hyp_counts;
            for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
                ++hyp_counts[join_ngram(hyp, i, n)];
            }
            for (const auto& [gram, count] : hyp_counts) {
                auto it = ref_counts.find(gram);
                if (it != ref_counts.end()) matched[n - 1] += std::min(count, it->second);
            }
            total[n - 1] += hyp.size() + 1 - n;
        }
    }

    double log_sum = 0.0;
    bool zero = false;
    for (std::size_t n = 0; n < 4; ++n) {
        double num = static_cast<double>(matched[n]);
        double den = static_cast<double>(total[n]);
        if (add_one_smoothing && n >= 1) {
            num += 1.0;
            den += 1.0;
        }
        const double p = den > 0.0 ? num / den : 0.0;
        out.precisions[n] = p;
        if (p <= 0.0) {
            zero = true;
        } else {
            log_sum += 0.25 * std::log(p);
        }
    }

    out.brevity_penalty = out.hyp_tokens == 0 || out.hyp_tokens >= out.ref_tokens
                              ? 1.0
                              : std::exp(1.0 - static_cast<double>(out.ref_tokens) /
                                                   static_cast<double>(out.hyp_tokens));
    out.score = zero ? 0.0 : 100.0 * out.brevity_penalty * std::exp(log_sum);
    return out;
}

inline double bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references, bool add_one_smoothing = false) {
    return bleu_breakdown(hypotheses, references, add_one_smoothing).score;
}

inline double token_accuracy(const std::vector<std::string>& hypotheses,
                             const std::vector<std::string>& references) {
    using namespace eval_detail;
    if (hypotheses.size() != references.size()) {
        throw ContractError("token_accuracy: " + std::to_string(hypotheses.size()) +
                            " hypotheses vs " + std::to_string(references.size()) +
                            " references");
    }
    if (hypotheses.empty()) throw ContractError("token_accuracy: need at least one pair");
    std::size_t matched = 0;
    std::size_t ref_total = 0;
    for (std::size_t s = 0; s < hypotheses.size(); ++s) {
        const auto hyp = split_tokens(hypotheses[s]);
        const auto ref = split_tokens(references[s]);
        ref_total += ref.size();
        const std::size_t upto = std::min(hyp.size(), ref.size());
        for (std::size_t i = 0; i < upto; ++i) {
            if (hyp[i] == ref[i]) ++matched;
        }
    }
    if (ref_total == 0) throw ContractError("token_accuracy: references hold no tokens");
    return static_cast<double>(matched) / static_cast<double>(ref_total);
}

// ---------------------------------------------------------------------------
// Translation through arbitrary module composition.
// ---------------------------------------------------------------------------
inline std::string translate(const Registry& r, const std::string& src, const std::string& tgt,
                             const std::string& text, std::size_t max_len = 48) {
    const auto& src_bpe = r.tokenizer(src);
    const auto& tgt_bpe = r.tokenizer(tgt);
    const auto ids = encode(src_bpe, text);
    const auto out = greedy_translate(r.encoder(src), r.decoder(tgt), ids, max_len);
    return decode(tgt_bpe, out.ids);
}

// Batch translation: lines grouped by similar encoded length so padding
// stays small. Outputs are independent of the grouping.
inline std::vector<std::string> translate_corpus(const Registry& r, const std::string& src,
                                                 const std::string& tgt,
                                                 const std::vector<std::string>& lines,
                                                 std::size_t max_len = 48,
                                                 std::size_t group_rows = 32) {
    if (group_rows == 0) throw ContractError("translate_corpus: group_rows must be positive");
    const auto& src_bpe = r.tokenizer(src);
    const auto& tgt_bpe = r.tokenizer(tgt);
    const auto& enc = r.encoder(src);
    const auto& dec = r.decoder(tgt);

    std::vector<std::vector<std::int32_t>> ids(lines.size());
    std::vector<std::size_t> order(lines.size());
    for (std::size_t i = 0; i < lines.size(); ++i) {
        ids[i] = encode(src_bpe, lines[i]);
        order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return ids[a].size() < ids[b].size(); });

    std::vector<std::string> out(lines.size());
    for (std::size_t at = 0; at < order.size(); at += group_rows) {
        const std::size_t n = std::min(group_rows, order.size() - at);
        std::vector<std::vector<std::int32_t>> rows(n);
        for (std::size_t k = 0; k < n; ++k) rows[k] = ids[order[at + k]];
        auto result = greedy_translate_batch(enc, dec, rows, max_len);
        for (std::size_t k = 0; k < n; ++k) {
            out[order[at + k]] = decode(tgt_bpe, result.rows[k]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Direction matrix
// ---------------------------------------------------------------------------
struct DirectionReport {
    std::string src;
    std::string tgt;
    double bleu = 0.0;
    double token_accuracy = 0.0;
    std::size_t sentences = 0;
    bool zero_shot = false;
    bool skipped = false;
};

inline std::vector<DirectionReport> evaluate_matrix(
    const Registry& r, const std::map<std::string, std::vector<std::string>>& test_corpora,
    std::size_t max_len = 48, bool add_one_smoothing = false) {
    std::vector<DirectionReport> out;
    for (const auto& src : r.languages()) {
        for (const auto& tgt : r.languages()) {
            if (src == tgt) continue;
            DirectionReport rep;
            rep.src = src;
            rep.tgt = tgt;
            rep.zero_shot = !r.direction_trained(src, tgt);
            auto si = test_corpora.find(src);
            auto ti = test_corpora.find(tgt);
            if (si == test_corpora.end() || ti == test_corpora.end() || si->second.empty() ||
                ti->second.empty() || si->second.size() != ti->second.size()) {
                rep.skipped = true;
                out.push_back(rep);
                continue;
            }
            const auto hyps = translate_corpus(r, src, tgt, si->second, max_len);
            rep.bleu = modmt::bleu(hyps, ti->second, add_one_smoothing);
            rep.token_accuracy = modmt::token_accuracy(hyps, ti->second);
            rep.sentences = hyps.size();
            out.push_back(rep);
        }
    }
    return out;
}

inline std::string matrix_jsonl(const std::vector<DirectionReport>& reports,
                                const std::string& tokenization = "whitespace") {
    std::string out;
    for (const auto& rep : reports) {
        nlohmann::json j{{"src", rep.src},
                         {"tgt", rep.tgt},
                         {"bleu", rep.bleu},
                         {"token_accuracy", rep.token_accuracy},
                         {"n_sentences", rep.sentences},
                         {"zero_shot", rep.zero_shot},
                         {"skipped", rep.skipped},
                         {"tokenization", tokenization}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

inline std::string matrix_table(const std::vector<DirectionReport>& reports) {
    std::ostringstream out;
    out << std::left << std::setw(14) << "direction" << std::right << std::setw(8) << "bleu"
        << std::setw(10) << "accuracy" << std::setw(7) << "sents" << "  flags\n";
    for (const auto& rep : reports) {
        out << std::left << std::setw(14) << (rep.src + "->" + rep.tgt);
        if (rep.skipped) {
            out << std::right << std::setw(8) << "-" << std::setw(10) << "-" << std::setw(7)
                << "-" << "  skipped\n";
            continue;
        }
        out << std::right << std::fixed << std::setprecision(2) << std::setw(8) << rep.bleu
            << std::setprecision(4) << std::setw(10) << rep.token_accuracy << std::setw(7)
            << rep.sentences << "  " << (rep.zero_shot ? "zero-shot" : "trained") << "\n";
    }
    return out.str();
}

}  // namespace modmt
