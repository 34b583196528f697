// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: flat-keyed INI text with [section] headers. Every key
// has a default; unknown sections or keys are rejected so typos cannot
// silently fall back to defaults. A run is reproducible from this file
// alone, all randomness flows from seed_init and seed_data.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "modmt/corpus.hpp"
#include "modmt/optimizer.hpp"
#include "modmt/trainer.hpp"
#include "modmt/transformer.hpp"

namespace modmt {

// One language, either generated from a synthetic spec or read from a
// text file (one sentence per line, whitespace-tokenized).
struct LanguageSource {
    SyntheticLanguageSpec spec;
    std::string corpus_path;
    bool synthetic() const { return corpus_path.empty(); }
};

struct RunConfig {
    // [run]
    std::string output_dir;
    std::uint64_t seed_init = 1;
    std::uint64_t seed_data = 2;

    // [model]
    TransformerConfig model;

    // [optimizer]
    AdamConfig optimizer;

    // [training]
    std::uint64_t max_steps = 10000;
    std::size_t token_budget = 1024;
    StopCriterion stop{};
    std::size_t bpe_vocab = 200;
    bool all_pairs = true;
    std::vector<Direction> schedule;  // used when all_pairs is false

    // [data] (synthetic generation)
    std::size_t sentences = 2000;
    std::size_t latent_vocab = 30;
    std::size_t min_len = 2;
    std::size_t max_len = 6;

    // [lang.<tag>] sections, in file order
    std::vector<LanguageSource> languages;

    bool has_language(const std::string& tag) const {
        for (const auto& l : languages) {
            if (l.spec.language == tag) return true;
        }
        return false;
    }

    const LanguageSource& language(const std::string& tag) const {
        for (const auto& l : languages) {
            if (l.spec.language == tag) return l;
        }
        throw ConfigError("language \"" + tag + "\" is not configured");
    }

    std::vector<SyntheticLanguageSpec> synthetic_specs() const {
        std::vector<SyntheticLanguageSpec> specs;
        for (const auto& l : languages) {
            if (l.synthetic()) specs.push_back(l.spec);
        }
        return specs;
    }

    std::vector<Direction> directions() const {
        if (!all_pairs) return schedule;
        std::vector<Direction> out;
        for (const auto& a : languages) {
            for (const auto& b : languages) {
                if (a.spec.language != b.spec.language) {
                    out.push_back({a.spec.language, b.spec.language});
                }
            }
        }
        return out;
    }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline std::string key_context(const std::string& key, std::size_t line_no) {
    return "\"" + key + "\" (line " + std::to_string(line_no) + ")";
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& value,
                               std::size_t line_no) {
    std::size_t used = 0;
    std::uint64_t out = 0;
    try {
        if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
        out = std::stoull(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != value.size() || value.empty()) {
        throw ConfigError("expected a non-negative integer for " + key_context(key, line_no) +
                          ", got \"" + value + "\"");
    }
    return out;
}

inline double parse_double(const std::string& key, const std::string& value,
                           std::size_t line_no) {
    std::size_t used = 0;
    double out = 0;
    try {
        out = std::stod(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != value.size() || value.empty()) {
        throw ConfigError("expected a number for " + key_context(key, line_no) + ", got \"" +
                          value + "\"");
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& value, std::size_t line_no) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw ConfigError("expected true or false for " + key_context(key, line_no) + ", got \"" +
                      value + "\"");
}

inline std::vector<Direction> parse_direction_list(const std::string& value,
                                                   std::size_t line_no) {
    std::vector<Direction> out;
    std::istringstream in(value);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        const auto arrow = item.find("->");
        if (arrow == std::string::npos) {
            throw ConfigError("schedule entry \"" + item + "\" (line " +
                              std::to_string(line_no) + ") is not of the form src->tgt");
        }
        Direction d{trim(item.substr(0, arrow)), trim(item.substr(arrow + 2))};
        if (d.first.empty() || d.second.empty()) {
            throw ConfigError("schedule entry \"" + item + "\" (line " +
                              std::to_string(line_no) + ") has an empty language tag");
        }
        out.push_back(std::move(d));
    }
    return out;
}

}  // namespace config_detail

inline RunConfig parse_run_config(const std::string& text) {
    using namespace config_detail;
    RunConfig c;
    static const std::set<std::string> plain_sections = {"run", "model", "optimizer", "training",
                                                         "data"};
    std::string section;
    std::string lang_tag;
    std::set<std::string> seen_langs;

    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;

        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError("unterminated section header at line " +
                                  std::to_string(line_no));
            }
            section = trim(line.substr(1, line.size() - 2));
            lang_tag.clear();
            if (section.rfind("lang.", 0) == 0) {
                lang_tag = section.substr(5);
                registry_detail::check_language_tag(lang_tag);
                if (!seen_langs.insert(lang_tag).second) {
                    throw ConfigError("duplicate section [lang." + lang_tag + "] at line " +
                                      std::to_string(line_no));
                }
                LanguageSource src;
                src.spec.language = lang_tag;
                c.languages.push_back(std::move(src));
            } else if (!plain_sections.count(section)) {
                throw ConfigError("unknown section [" + section + "] at line " +
                                  std::to_string(line_no));
            }
            continue;
        }

        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("expected key = value at line " + std::to_string(line_no));
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty()) {
            throw ConfigError("key \"" + key + "\" before any [section] at line " +
                              std::to_string(line_no));
        }

        if (section == "run") {
            if (key == "output_dir") {
                c.output_dir = value;
            } else if (key == "seed_init") {
                c.seed_init = parse_u64(key, value, line_no);
            } else if (key == "seed_data") {
                c.seed_data = parse_u64(key, value, line_no);
            } else {
                throw ConfigError("unknown key " + key_context(key, line_no) + " in [run]");
            }
        } else if (section == "model") {
            if (key == "layers") {
                c.model.layers = parse_u64(key, value, line_no);
            } else if (key == "heads") {
                c.model.heads = parse_u64(key, value, line_no);
            } else if (key == "model_dim") {
                c.model.model_dim = parse_u64(key, value, line_no);
            } else if (key == "ffn_dim") {
                c.model.ffn_dim = parse_u64(key, value, line_no);
            } else if (key == "dropout") {
                c.model.dropout = parse_double(key, value, line_no);
            } else if (key == "max_positions") {
                c.model.max_positions = parse_u64(key, value, line_no);
            } else if (key == "tied_embeddings") {
                c.model.tied_embeddings = parse_bool(key, value, line_no);
            } else if (key == "tied_output") {
                c.model.tied_output = parse_bool(key, value, line_no);
            } else {
                throw ConfigError("unknown key " + key_context(key, line_no) + " in [model]");
            }
        } else if (section == "optimizer") {
            if (key == "peak_lr") {
                c.optimizer.peak_lr = parse_double(key, value, line_no);
            } else if (key == "warmup") {
                c.optimizer.warmup = parse_u64(key, value, line_no);
            } else if (key == "beta1") {
                c.optimizer.beta1 = parse_double(key, value, line_no);
            } else if (key == "beta2") {
                c.optimizer.beta2 = parse_double(key, value, line_no);
            } else {
                throw ConfigError("unknown key " + key_context(key, line_no) +
                                  " in [optimizer]");
            }
        } else if (section == "training") {
            if (key == "max_steps") {
                c.max_steps = parse_u64(key, value, line_no);
            } else if (key == "token_budget") {
                c.token_budget = parse_u64(key, value, line_no);
            } else if (key == "eval_interval") {
                c.stop.interval = parse_u64(key, value, line_no);
            } else if (key == "patience") {
                c.stop.patience = parse_u64(key, value, line_no);
            } else if (key == "bpe_vocab") {
                c.bpe_vocab = parse_u64(key, value, line_no);
            } else if (key == "schedule") {
                if (value == "all-pairs") {
                    c.all_pairs = true;
                    c.schedule.clear();
                } else {
                    c.all_pairs = false;
                    c.schedule = parse_direction_list(value, line_no);
                }
            } else {
                throw ConfigError("unknown key " + key_context(key, line_no) + " in [training]");
            }
        } else if (section == "data") {
            if (key == "sentences") {
                c.sentences = parse_u64(key, value, line_no);
            } else if (key == "latent_vocab") {
                c.latent_vocab = parse_u64(key, value, line_no);
            } else if (key == "min_len") {
                c.min_len = parse_u64(key, value, line_no);
            } else if (key == "max_len") {
                c.max_len = parse_u64(key, value, line_no);
            } else {
                throw ConfigError("unknown key " + key_context(key, line_no) + " in [data]");
            }
        } else {
            LanguageSource& src = c.languages.back();
            if (key == "kind") {
                src.spec.kind = transform_from_name(value);
            } else if (key == "cipher_seed") {
                src.spec.cipher_seed = parse_u64(key, value, line_no);
            } else if (key == "marker") {
                src.spec.marker = value;
            } else if (key == "corpus") {
                src.corpus_path = value;
            } else {
                throw ConfigError("unknown key " + key_context(key, line_no) + " in [lang." +
                                  lang_tag + "]");
            }
        }
    }

    if (c.languages.empty()) {
        throw ConfigError("config defines no [lang.<tag>] sections");
    }
    if (!c.all_pairs) {
        if (c.schedule.empty()) {
            throw ConfigError("explicit schedule is empty");
        }
        std::set<Direction> seen;
        for (const auto& d : c.schedule) {
            for (const auto& tag : {d.first, d.second}) {
                if (!c.has_language(tag)) {
                    throw ConfigError("schedule references unconfigured language \"" + tag +
                                      "\"");
                }
            }
            if (!seen.insert(d).second) {
                throw ConfigError("schedule lists direction " + direction_name(d) + " twice");
            }
        }
    }
    if (c.min_len > c.max_len) {
        throw ConfigError("min_len " + std::to_string(c.min_len) + " exceeds max_len " +
                          std::to_string(c.max_len));
    }
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read config file " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_run_config(buf.str());
}

// Canonical text form: parse(format(c)) reproduces c exactly.
inline std::string format_run_config(const RunConfig& c) {
    std::ostringstream out;
    out.precision(17);
    out << "[run]\n";
    out << "output_dir = " << c.output_dir << "\n";
    out << "seed_init = " << c.seed_init << "\n";
    out << "seed_data = " << c.seed_data << "\n";
    out << "\n[model]\n";
    out << "layers = " << c.model.layers << "\n";
    out << "heads = " << c.model.heads << "\n";
    out << "model_dim = " << c.model.model_dim << "\n";
    out << "ffn_dim = " << c.model.ffn_dim << "\n";
    out << "dropout = " << c.model.dropout << "\n";
    out << "max_positions = " << c.model.max_positions << "\n";
    out << "tied_embeddings = " << (c.model.tied_embeddings ? "true" : "false") << "\n";
    out << "tied_output = " << (c.model.tied_output ? "true" : "false") << "\n";
    out << "\n[optimizer]\n";
    out << "peak_lr = " << c.optimizer.peak_lr << "\n";
    out << "warmup = " << c.optimizer.warmup << "\n";
    out << "beta1 = " << c.optimizer.beta1 << "\n";
    out << "beta2 = " << c.optimizer.beta2 << "\n";
    out << "\n[training]\n";
    out << "max_steps = " << c.max_steps << "\n";
    out << "token_budget = " << c.token_budget << "\n";
    out << "eval_interval = " << c.stop.interval << "\n";
    out << "patience = " << c.stop.patience << "\n";
    out << "bpe_vocab = " << c.bpe_vocab << "\n";
    if (c.all_pairs) {
        out << "schedule = all-pairs\n";
    } else {
        out << "schedule = ";
        for (std::size_t i = 0; i < c.schedule.size(); ++i) {
            if (i) out << ", ";
            out << direction_name(c.schedule[i]);
        }
        out << "\n";
    }
    out << "\n[data]\n";
    out << "sentences = " << c.sentences << "\n";
    out << "latent_vocab = " << c.latent_vocab << "\n";
    out << "min_len = " << c.min_len << "\n";
    out << "max_len = " << c.max_len << "\n";
    for (const auto& l : c.languages) {
        out << "\n[lang." << l.spec.language << "]\n";
        if (!l.synthetic()) {
            out << "corpus = " << l.corpus_path << "\n";
            continue;
        }
        out << "kind = " << transform_name(l.spec.kind) << "\n";
        if (l.spec.kind == TransformKind::substitution_cipher) {
            out << "cipher_seed = " << l.spec.cipher_seed << "\n";
        }
        if (l.spec.kind == TransformKind::suffix_marking) {
            out << "marker = " << l.spec.marker << "\n";
        }
    }
    return out.str();
}

}  // namespace modmt
