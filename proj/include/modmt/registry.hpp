// SPDX-License-Identifier: Apache-2.0
//
// Owns the per-language module sets: one encoder, one decoder, one
// tokenizer per registered language. Freeze control flips Parameter
// trainability (a tied table freezes when either side does), and
// SHA-256 fingerprints make freeze verification an exact byte-level
// check rather than a hope.
//
// Checkpoint container: magic "MNMT", u32 version, u32 kind, then a
// stream of named length-prefixed sections. Every parameter payload
// carries its own digest; loads verify before anything is returned.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "modmt/bpe.hpp"
#include "modmt/common.hpp"
#include "modmt/optimizer.hpp"
#include "modmt/serialize.hpp"
#include "modmt/sha256.hpp"
#include "modmt/transformer.hpp"

namespace modmt {

enum class ModuleRole { encoder, decoder };

inline const char* role_name(ModuleRole role) {
    return role == ModuleRole::encoder ? "encoder" : "decoder";
}

inline Digest256 param_digest(const Tensorf& t) {
    ByteWriter w;
    const float* p = t.data();
    for (std::size_t i = 0; i < t.numel(); ++i) w.f32(p[i]);
    return sha256(w.data().data(), w.size());
}

namespace registry_detail {

constexpr char kMagic[4] = {'M', 'N', 'M', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kKindRegistry = 1;
constexpr std::uint32_t kKindModule = 2;

inline void check_language_tag(const std::string& tag) {
    if (tag.empty() || tag.size() > 16) {
        throw ConfigError("language tag '" + tag + "' must be 1..16 characters");
    }
    for (char c : tag) {
        if (!((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'))) {
            throw ConfigError("language tag '" + tag +
                              "' may only contain lowercase letters and digits");
        }
    }
}

}  // namespace registry_detail

struct LanguageEntry {
    TransformerConfig config;
    LanguageModules modules;
    BpeModel bpe;
    bool frozen_enc = false;
    bool frozen_dec = false;
};

class Registry {
  public:
    explicit Registry(std::uint64_t seed) : seed_(seed) {}

    Registry(const Registry&) = delete;
    Registry& operator=(const Registry&) = delete;
    Registry(Registry&&) = default;
    Registry& operator=(Registry&&) = default;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t steps_done() const { return steps_done_; }
    void set_steps_done(std::uint64_t n) { steps_done_ = n; }

    const std::vector<std::string>& languages() const { return order_; }
    std::size_t size() const { return order_.size(); }
    bool has(const std::string& lang) const { return entries_.count(lang) != 0; }

    void register_language(const std::string& lang, TransformerConfig config, BpeModel bpe) {
        registry_detail::check_language_tag(lang);
        if (has(lang)) {
            throw ConfigError("language '" + lang + "' is already registered");
        }
        if (bpe.language != lang) {
            throw ConfigError("tokenizer for '" + bpe.language + "' cannot serve language '" +
                              lang + "'");
        }
        if (config.vocab_size == 0) {
            config.vocab_size = bpe.vocab_size();
        } else if (config.vocab_size != bpe.vocab_size()) {
            throw ConfigError("config vocab_size " + std::to_string(config.vocab_size) +
                              " does not match tokenizer vocab " +
                              std::to_string(bpe.vocab_size()) + " for '" + lang + "'");
        }
        config.validate();
        auto entry = std::make_unique<LanguageEntry>();
        entry->config = config;
        entry->modules = make_language_modules(config, lang, seed_);
        entry->bpe = std::move(bpe);
        entries_.emplace(lang, std::move(entry));
        order_.push_back(lang);
    }

    LanguageEntry& entry(const std::string& lang) {
        auto it = entries_.find(lang);
        if (it == entries_.end()) throw ConfigError("unknown language '" + lang + "'");
        return *it->second;
    }
    const LanguageEntry& entry(const std::string& lang) const {
        auto it = entries_.find(lang);
        if (it == entries_.end()) throw ConfigError("unknown language '" + lang + "'");
        return *it->second;
    }

    EncoderModule& encoder(const std::string& lang) { return entry(lang).modules.enc; }
    DecoderModule& decoder(const std::string& lang) { return entry(lang).modules.dec; }
    const EncoderModule& encoder(const std::string& lang) const { return entry(lang).modules.enc; }
    const DecoderModule& decoder(const std::string& lang) const { return entry(lang).modules.dec; }
    const BpeModel& tokenizer(const std::string& lang) const { return entry(lang).bpe; }

    void freeze(const std::string& lang, ModuleRole role) { set_frozen(lang, role, true); }
    void thaw(const std::string& lang, ModuleRole role) { set_frozen(lang, role, false); }

    bool is_frozen(const std::string& lang, ModuleRole role) const {
        const auto& e = entry(lang);
        return role == ModuleRole::encoder ? e.frozen_enc : e.frozen_dec;
    }

    // Parameters of one module, deduplicated in first-appearance order.
    std::vector<ParamPtr> module_parameters(const std::string& lang, ModuleRole role) const {
        const auto& e = entry(lang);
        return role == ModuleRole::encoder ? e.modules.enc.parameters()
                                           : e.modules.dec.parameters();
    }

    // Distinct parameters of one language (the tied table appears once).
    std::vector<ParamPtr> language_parameters(const std::string& lang) const {
        const auto& e = entry(lang);
        std::vector<ParamPtr> out;
        std::set<const Parameter<float>*> seen;
        for (const auto& list : {e.modules.enc.parameters(), e.modules.dec.parameters()}) {
            for (const auto& p : list) {
                if (seen.insert(p.get()).second) out.push_back(p);
            }
        }
        return out;
    }

    std::vector<ParamPtr> all_parameters() const {
        std::vector<ParamPtr> out;
        for (const auto& lang : order_) {
            for (auto& p : language_parameters(lang)) out.push_back(std::move(p));
        }
        return out;
    }

    std::map<std::string, std::string> fingerprint() const {
        std::map<std::string, std::string> out;
        for (const auto& lang : order_) {
            for (const auto& [name, hex] : fingerprint_of(lang)) out.emplace(name, hex);
        }
        return out;
    }

    std::map<std::string, std::string> fingerprint_of(const std::string& lang) const {
        std::map<std::string, std::string> out;
        for (const auto& p : language_parameters(lang)) {
            out.emplace(p->name, digest_hex(param_digest(p->tensor)));
        }
        return out;
    }

    void record_direction(const std::string& src, const std::string& tgt) {
        entry(src);
        entry(tgt);
        history_.insert({src, tgt});
    }

    bool direction_trained(const std::string& src, const std::string& tgt) const {
        return history_.count({src, tgt}) != 0;
    }

    const std::set<std::pair<std::string, std::string>>& history() const { return history_; }

  private:
    void set_frozen(const std::string& lang, ModuleRole role, bool frozen) {
        auto& e = entry(lang);
        (role == ModuleRole::encoder ? e.frozen_enc : e.frozen_dec) = frozen;
        for (const auto& p : e.modules.enc.parameters()) p->set_trainable(!e.frozen_enc);
        for (const auto& p : e.modules.dec.parameters()) p->set_trainable(!e.frozen_dec);
        if (e.config.tied_embeddings && (e.frozen_enc || e.frozen_dec)) {
            e.modules.enc.embedding()->set_trainable(false);
        }
    }

    std::uint64_t seed_;
    std::uint64_t steps_done_ = 0;
    std::vector<std::string> order_;
    std::map<std::string, std::unique_ptr<LanguageEntry>> entries_;
    std::set<std::pair<std::string, std::string>> history_;
};

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------
namespace registry_detail {

inline void write_section(ByteWriter& out, const std::string& name, const ByteWriter& payload) {
    out.str(name);
    out.u64(payload.size());
    out.bytes(payload.data().data(), payload.size());
}

inline void write_config(ByteWriter& w, const TransformerConfig& c) {
    w.u64(c.layers);
    w.u64(c.heads);
    w.u64(c.model_dim);
    w.u64(c.ffn_dim);
    w.f64(c.dropout);
    w.u64(c.max_positions);
    w.u64(c.vocab_size);
    w.u8(c.tied_embeddings ? 1 : 0);
    w.u8(c.tied_output ? 1 : 0);
}

inline TransformerConfig read_config(ByteReader& r) {
    TransformerConfig c;
    c.layers = r.u64();
    c.heads = r.u64();
    c.model_dim = r.u64();
    c.ffn_dim = r.u64();
    c.dropout = r.f64();
    c.max_positions = r.u64();
    c.vocab_size = r.u64();
    c.tied_embeddings = r.u8() != 0;
    c.tied_output = r.u8() != 0;
    return c;
}

inline void write_language(ByteWriter& w, const Registry& r, const std::string& lang) {
    const auto& e = r.entry(lang);
    write_config(w, e.config);
    w.u8(e.frozen_enc ? 1 : 0);
    w.u8(e.frozen_dec ? 1 : 0);
    w.str(merges_text(e.bpe));
    w.str(vocab_text(e.bpe));
    const auto params = r.language_parameters(lang);
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        w.str(p->name);
        const auto& shape = p->tensor.shape();
        w.u32(static_cast<std::uint32_t>(shape.size()));
        for (std::size_t d : shape) w.u64(d);
        const Digest256 digest = param_digest(p->tensor);
        w.bytes(digest.data(), digest.size());
        w.u64(p->tensor.numel());
        const float* data = p->tensor.data();
        for (std::size_t i = 0; i < p->tensor.numel(); ++i) w.f32(data[i]);
    }
}

inline void read_language_into(Registry& r, const std::string& lang, ByteReader& br) {
    const TransformerConfig config = read_config(br);
    const bool frozen_enc = br.u8() != 0;
    const bool frozen_dec = br.u8() != 0;
    const std::string merges = br.str();
    const std::string vocab = br.str();
    BpeModel bpe = bpe_from_text(merges, vocab);
    r.register_language(lang, config, std::move(bpe));

    std::map<std::string, ParamPtr> by_name;
    for (const auto& p : r.language_parameters(lang)) by_name.emplace(p->name, p);

    const std::uint32_t n_params = br.u32();
    if (n_params != by_name.size()) {
        throw IntegrityError("checkpoint lists " + std::to_string(n_params) +
                             " parameters for '" + lang + "', module has " +
                             std::to_string(by_name.size()));
    }
    for (std::uint32_t i = 0; i < n_params; ++i) {
        const std::string name = br.str();
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw IntegrityError("checkpoint parameter '" + name + "' has no slot in module '" +
                                 lang + "'");
        }
        Shape shape(br.u32());
        for (auto& d : shape) d = br.u64();
        Digest256 stored;
        br.raw(stored.data(), stored.size());
        const std::uint64_t numel = br.u64();
        Tensorf& t = it->second->tensor;
        if (shape != t.shape() || numel != t.numel()) {
            throw IntegrityError("checkpoint parameter '" + name + "' shape " + shape_str(shape) +
                                 " does not match module shape " + shape_str(t.shape()));
        }
        float* dst = t.data();
        for (std::uint64_t k = 0; k < numel; ++k) dst[k] = br.f32();
        if (param_digest(t) != stored) {
            throw IntegrityError("digest mismatch for parameter '" + name + "'");
        }
    }
    if (frozen_enc) r.freeze(lang, ModuleRole::encoder);
    if (frozen_dec) r.freeze(lang, ModuleRole::decoder);
}

inline void write_container(const std::string& path, std::uint32_t kind, const ByteWriter& body) {
    ByteWriter out;
    out.bytes(kMagic, 4);
    out.u32(kVersion);
    out.u32(kind);
    out.bytes(body.data().data(), body.size());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(out.data().data()),
            static_cast<std::streamsize>(out.size()));
    f.flush();
    if (!f.good()) throw DataError("failed writing checkpoint to '" + path + "'");
}

inline std::vector<std::uint8_t> read_container(const std::string& path, std::uint32_t want_kind) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw IntegrityError("'" + path + "' is not a checkpoint container");
    }
    ByteReader header(bytes.data() + 4, 8);
    const std::uint32_t version = header.u32();
    if (version != kVersion) {
        throw IntegrityError("checkpoint version " + std::to_string(version) +
                             " unsupported, this build reads version " +
                             std::to_string(kVersion));
    }
    const std::uint32_t kind = header.u32();
    if (kind != want_kind) {
        throw IntegrityError("container kind " + std::to_string(kind) + " where kind " +
                             std::to_string(want_kind) + " was expected");
    }
    bytes.erase(bytes.begin(), bytes.begin() + 12);
    return bytes;
}

inline void write_optimizer(ByteWriter& w, const OptimizerSnapshot& snap) {
    w.u64(snap.global_step);
    w.f64(snap.config.peak_lr);
    w.u64(snap.config.warmup);
    w.f64(snap.config.beta1);
    w.f64(snap.config.beta2);
    w.f64(snap.config.eps);
    w.u32(static_cast<std::uint32_t>(snap.params.size()));
    for (const auto& [name, st] : snap.params) {
        w.str(name);
        w.u64(st.t);
        w.f32_array(st.m.data(), st.m.size());
        w.f32_array(st.v.data(), st.v.size());
    }
}

inline OptimizerSnapshot read_optimizer(ByteReader& r) {
    OptimizerSnapshot snap;
    snap.global_step = r.u64();
    snap.config.peak_lr = r.f64();
    snap.config.warmup = r.u64();
    snap.config.beta1 = r.f64();
    snap.config.beta2 = r.f64();
    snap.config.eps = r.f64();
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::string name = r.str();
        AdamParamState st;
        st.t = r.u64();
        st.m = r.f32_array();
        st.v = r.f32_array();
        snap.params.emplace(name, std::move(st));
    }
    return snap;
}

}  // namespace registry_detail

struct Checkpoint {
    Registry registry;
    OptimizerSnapshot optimizer;
    bool has_optimizer = false;
    std::string schedule_desc;
};

inline void save_checkpoint(const Registry& r, const std::string& path,
                            const OptimizerSnapshot* optimizer = nullptr,
                            const std::string& schedule_desc = "") {
    using namespace registry_detail;
    ByteWriter body;

    ByteWriter meta;
    meta.u64(r.seed());
    meta.u64(r.steps_done());
    meta.str(schedule_desc);
    meta.u32(static_cast<std::uint32_t>(r.languages().size()));
    for (const auto& lang : r.languages()) meta.str(lang);
    write_section(body, "meta", meta);

    for (const auto& lang : r.languages()) {
        ByteWriter sect;
        write_language(sect, r, lang);
        write_section(body, "lang:" + lang, sect);
    }

    ByteWriter hist;
    hist.u32(static_cast<std::uint32_t>(r.history().size()));
    for (const auto& [src, tgt] : r.history()) {
        hist.str(src);
        hist.str(tgt);
    }
    write_section(body, "history", hist);

    if (optimizer != nullptr) {
        ByteWriter opt;
        write_optimizer(opt, *optimizer);
        write_section(body, "optimizer", opt);
    }

    write_container(path, kKindRegistry, body);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    using namespace registry_detail;
    const auto bytes = read_container(path, kKindRegistry);
    ByteReader br(bytes.data(), bytes.size());

    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> sections;
    while (br.remaining() > 0) {
        const std::string name = br.str();
        const std::uint64_t len = br.u64();
        if (len > br.remaining()) {
            throw IntegrityError("section '" + name + "' claims " + std::to_string(len) +
                                 " bytes, only " + std::to_string(br.remaining()) + " remain");
        }
        sections.push_back({name, {br.pos(), static_cast<std::size_t>(len)}});
        br.skip(len);
    }
    auto find_section = [&](const std::string& name) -> ByteReader {
        for (const auto& [n, span] : sections) {
            if (n == name) return ByteReader(bytes.data() + span.first, span.second);
        }
        throw IntegrityError("checkpoint is missing its '" + name + "' section");
    };

    ByteReader meta = find_section("meta");
    const std::uint64_t seed = meta.u64();
    const std::uint64_t steps = meta.u64();
    std::string schedule_desc = meta.str();
    const std::uint32_t n_langs = meta.u32();
    std::vector<std::string> langs(n_langs);
    for (auto& l : langs) l = meta.str();

    Checkpoint cp{Registry(seed), {}, false, std::move(schedule_desc)};
    cp.registry.set_steps_done(steps);
    for (const auto& lang : langs) {
        ByteReader sect = find_section("lang:" + lang);
        read_language_into(cp.registry, lang, sect);
    }

    ByteReader hist = find_section("history");
    const std::uint32_t n_hist = hist.u32();
    for (std::uint32_t i = 0; i < n_hist; ++i) {
        const std::string src = hist.str();
        const std::string tgt = hist.str();
        cp.registry.record_direction(src, tgt);
    }

    for (const auto& [name, span] : sections) {
        if (name == "optimizer") {
            ByteReader opt(bytes.data() + span.first, span.second);
            cp.optimizer = read_optimizer(opt);
            cp.has_optimizer = true;
        }
    }
    return cp;
}

// Single-module exchange files: one language, same section encoding.
inline void export_language(const Registry& r, const std::string& lang, const std::string& path) {
    using namespace registry_detail;
    r.entry(lang);
    ByteWriter body;
    ByteWriter meta;
    meta.str(lang);
    write_section(body, "meta", meta);
    ByteWriter sect;
    write_language(sect, r, lang);
    write_section(body, "lang:" + lang, sect);
    write_container(path, kKindModule, body);
}

inline std::string import_language(Registry& r, const std::string& path) {
    using namespace registry_detail;
    const auto bytes = read_container(path, kKindModule);
    ByteReader br(bytes.data(), bytes.size());
    std::string lang;
    while (br.remaining() > 0) {
        const std::string name = br.str();
        const std::uint64_t len = br.u64();
        if (len > br.remaining()) {
            throw IntegrityError("section '" + name + "' claims " + std::to_string(len) +
                                 " bytes, only " + std::to_string(br.remaining()) + " remain");
        }
        ByteReader sect(bytes.data() + br.pos(), len);
        br.skip(len);
        if (name == "meta") {
            lang = sect.str();
        } else if (name.rfind("lang:", 0) == 0) {
            if (lang.empty()) throw IntegrityError("module file has no meta section");
            read_language_into(r, lang, sect);
            return lang;
        }
    }
    throw IntegrityError("module file holds no language section");
}

}  // namespace modmt
