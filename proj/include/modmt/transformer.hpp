// SPDX-License-Identifier: Apache-2.0
//
// Per-language encoder and decoder stacks. Original-transformer layout:
// post-norm residual sublayers, fixed sinusoidal positions, ReLU
// feed-forward. Activations flow as rank-2 tensors [batch*seq x d].
//
// Tied mode shares one embedding Parameter between the encoder and the
// decoder of a language; with tied_output the decoder's output projection
// reads the same table through matmul_bt (a transpose view, no copy).
// Every language built at the same model_dim emits contexts of the same
// width, which is what lets any encoder feed any decoder.

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "modmt/bpe.hpp"
#include "modmt/common.hpp"
#include "modmt/corpus.hpp"
#include "modmt/ops.hpp"
#include "modmt/rng.hpp"
#include "modmt/tensor.hpp"

namespace modmt {

struct TransformerConfig {
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t model_dim = 64;
    std::size_t ffn_dim = 128;
    double dropout = 0.1;
    std::size_t max_positions = 64;
    std::size_t vocab_size = 0;
    bool tied_embeddings = true;
    bool tied_output = true;  // with tied_embeddings, also alias the output projection

    void validate() const {
        if (heads == 0 || model_dim % heads != 0) {
            throw ConfigError("model_dim " + std::to_string(model_dim) +
                              " must be divisible by heads " + std::to_string(heads));
        }
        if (layers == 0) throw ConfigError("layers must be positive");
        if (ffn_dim == 0) throw ConfigError("ffn_dim must be positive");
        if (vocab_size < 5) {
            throw ConfigError("vocab_size " + std::to_string(vocab_size) +
                              " leaves no room beyond the 4 specials");
        }
        if (max_positions < 2) throw ConfigError("max_positions must be at least 2");
        if (dropout < 0.0 || dropout >= 1.0) {
            throw ConfigError("dropout must be in [0, 1), got " + std::to_string(dropout));
        }
    }
};

inline Tensorf sinusoidal_table(std::size_t max_positions, std::size_t d) {
    Tensorf t = Tensorf::zeros({max_positions, d});
    for (std::size_t pos = 0; pos < max_positions; ++pos) {
        for (std::size_t i = 0; i < d; i += 2) {
            const double angle =
                static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
            t[pos * d + i] = static_cast<float>(std::sin(angle));
            if (i + 1 < d) t[pos * d + i + 1] = static_cast<float>(std::cos(angle));
        }
    }
    return t;
}

// Deterministic per-call-site dropout seeding within one forward pass.
struct DropoutStream {
    std::uint64_t seed = 0;
    bool training = false;
    std::uint64_t counter = 0;

    std::uint64_t next() { return mix_seed(seed, ++counter); }
};

namespace transformer_detail {

inline ParamPtr make_param(std::string name, Tensorf t) {
    return std::make_shared<Parameter<float>>(std::move(t), std::move(name));
}

inline Tensorf uniform_tensor(Rng& rng, Shape shape, double limit) {
    Tensorf t = Tensorf::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) {
        t[i] = static_cast<float>(rng.uniform(-limit, limit));
    }
    return t;
}

inline ParamPtr xavier(Rng& rng, const std::string& name, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return make_param(name, uniform_tensor(rng, {fan_in, fan_out}, limit));
}

inline ParamPtr embedding_table(Rng& rng, const std::string& name, std::size_t vocab,
                                std::size_t d) {
    const double limit = 1.0 / std::sqrt(static_cast<double>(d));
    return make_param(name, uniform_tensor(rng, {vocab, d}, limit));
}

struct AttentionBlock {
    ParamPtr wq, wk, wv, wo, bq, bk, bv, bo;

    static AttentionBlock make(Rng& rng, const std::string& prefix, std::size_t d) {
        AttentionBlock a;
        a.wq = xavier(rng, prefix + "_wq", d, d);
        a.wk = xavier(rng, prefix + "_wk", d, d);
        a.wv = xavier(rng, prefix + "_wv", d, d);
        a.wo = xavier(rng, prefix + "_wo", d, d);
        a.bq = make_param(prefix + "_bq", Tensorf::zeros({d}));
        a.bk = make_param(prefix + "_bk", Tensorf::zeros({d}));
        a.bv = make_param(prefix + "_bv", Tensorf::zeros({d}));
        a.bo = make_param(prefix + "_bo", Tensorf::zeros({d}));
        return a;
    }

    void collect(std::vector<ParamPtr>& out) const {
        for (const auto& p : {wq, wk, wv, wo, bq, bk, bv, bo}) out.push_back(p);
    }
};

struct NormBlock {
    ParamPtr gain, bias;

    static NormBlock make(const std::string& prefix, std::size_t d) {
        return {make_param(prefix + "_gain", Tensorf::filled({d}, 1.0f)),
                make_param(prefix + "_bias", Tensorf::zeros({d}))};
    }

    void collect(std::vector<ParamPtr>& out) const {
        out.push_back(gain);
        out.push_back(bias);
    }
};

struct FfnBlock {
    ParamPtr w1, b1, w2, b2;

    static FfnBlock make(Rng& rng, const std::string& prefix, std::size_t d, std::size_t ffn) {
        return {xavier(rng, prefix + "_w1", d, ffn),
                make_param(prefix + "_b1", Tensorf::zeros({ffn})),
                xavier(rng, prefix + "_w2", ffn, d),
                make_param(prefix + "_b2", Tensorf::zeros({d}))};
    }

    void collect(std::vector<ParamPtr>& out) const {
        for (const auto& p : {w1, b1, w2, b2}) out.push_back(p);
    }
};

// q from x, k/v from kv; one residual post-norm attention sublayer.
inline Tensorf attention_sublayer(Tapef& tape, const AttentionBlock& blk, const NormBlock& norm,
                                  const Tensorf& x, const Tensorf& kv, const AttentionSpec& spec,
                                  const std::vector<std::uint8_t>& kv_mask, double rate,
                                  DropoutStream& drops) {
    auto q = add_bias(tape, matmul(tape, x, blk.wq->tensor), blk.bq->tensor);
    auto k = add_bias(tape, matmul(tape, kv, blk.wk->tensor), blk.bk->tensor);
    auto v = add_bias(tape, matmul(tape, kv, blk.wv->tensor), blk.bv->tensor);
    auto mixed = attention(tape, q, k, v, spec, kv_mask);
    auto proj = add_bias(tape, matmul(tape, mixed, blk.wo->tensor), blk.bo->tensor);
    auto dropped = dropout(tape, proj, rate, drops.next(), drops.training);
    return layer_norm(tape, add(tape, x, dropped), norm.gain->tensor, norm.bias->tensor);
}

inline Tensorf ffn_sublayer(Tapef& tape, const FfnBlock& blk, const NormBlock& norm,
                            const Tensorf& x, double rate, DropoutStream& drops) {
    auto h = relu(tape, add_bias(tape, matmul(tape, x, blk.w1->tensor), blk.b1->tensor));
    auto out = add_bias(tape, matmul(tape, h, blk.w2->tensor), blk.b2->tensor);
    auto dropped = dropout(tape, out, rate, drops.next(), drops.training);
    return layer_norm(tape, add(tape, x, dropped), norm.gain->tensor, norm.bias->tensor);
}

inline void check_ids(const std::vector<std::int32_t>& ids, std::size_t vocab) {
    for (std::int32_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw ContractError("token id " + std::to_string(id) + " out of range [0, " +
                                std::to_string(vocab) + ")");
        }
    }
}

}  // namespace transformer_detail

struct EncodedContext {
    Tensorf h;  // [batch*seq x d]
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::uint8_t> mask;  // [batch*seq], 1 = real source token
};

class EncoderModule {
public:
    EncoderModule() = default;

    EncoderModule(TransformerConfig config, std::string language, Rng& rng,
                  ParamPtr shared_embedding = nullptr)
        : config_(config), language_(std::move(language)) {
        config_.validate();
        using namespace transformer_detail;
        const std::string base = language_ + "/enc";
        embedding_ = shared_embedding
                         ? std::move(shared_embedding)
                         : embedding_table(rng, base + "/embed", config_.vocab_size,
                                           config_.model_dim);
        positional_ = sinusoidal_table(config_.max_positions, config_.model_dim);
        for (std::size_t l = 0; l < config_.layers; ++l) {
            const std::string lp = base + "/l" + std::to_string(l);
            layers_.push_back({AttentionBlock::make(rng, lp + "/self", config_.model_dim),
                               NormBlock::make(lp + "/n1", config_.model_dim),
                               FfnBlock::make(rng, lp + "/ffn", config_.model_dim, config_.ffn_dim),
                               NormBlock::make(lp + "/n2", config_.model_dim)});
        }
    }

    const TransformerConfig& config() const { return config_; }
    const std::string& language() const { return language_; }
    const ParamPtr& embedding() const { return embedding_; }

    std::vector<ParamPtr> parameters() const {
        std::vector<ParamPtr> out{embedding_};
        for (const auto& l : layers_) {
            l.self.collect(out);
            l.n1.collect(out);
            l.ffn.collect(out);
            l.n2.collect(out);
        }
        return out;
    }

    EncodedContext forward(Tapef& tape, const std::vector<std::int32_t>& ids,
                           const std::vector<std::uint8_t>& mask, std::size_t batch,
                           std::size_t seq, DropoutStream& drops) const {
        using namespace transformer_detail;
        if (ids.size() != batch * seq || mask.size() != ids.size()) {
            throw ContractError("encoder input size does not match batch " + std::to_string(batch) +
                                " x seq " + std::to_string(seq));
        }
        if (seq > config_.max_positions) {
            throw ContractError("sequence length " + std::to_string(seq) +
                                " exceeds max_positions " + std::to_string(config_.max_positions));
        }
        check_ids(ids, config_.vocab_size);

        auto x = embed(tape, ids, seq, drops);
        AttentionSpec spec{batch, config_.heads, seq, seq, false};
        for (const auto& l : layers_) {
            x = attention_sublayer(tape, l.self, l.n1, x, x, spec, mask, config_.dropout, drops);
            x = ffn_sublayer(tape, l.ffn, l.n2, x, config_.dropout, drops);
        }
        return EncodedContext{x, batch, seq, mask};
    }

private:
    Tensorf embed(Tapef& tape, const std::vector<std::int32_t>& ids, std::size_t seq,
                  DropoutStream& drops) const {
        auto e = modmt::embedding(tape, embedding_->tensor, ids);
        auto scaled = scale(tape, e, static_cast<float>(std::sqrt(double(config_.model_dim))));
        auto pos = add_position(tape, scaled, positional_, seq);
        return dropout(tape, pos, config_.dropout, drops.next(), drops.training);
    }

    struct Layer {
        transformer_detail::AttentionBlock self;
        transformer_detail::NormBlock n1;
        transformer_detail::FfnBlock ffn;
        transformer_detail::NormBlock n2;
    };

    TransformerConfig config_;
    std::string language_;
    ParamPtr embedding_;
    Tensorf positional_;
    std::vector<Layer> layers_;
};

class DecoderModule {
public:
    DecoderModule() = default;

    DecoderModule(TransformerConfig config, std::string language, Rng& rng,
                  ParamPtr shared_embedding = nullptr)
        : config_(config), language_(std::move(language)) {
        config_.validate();
        using namespace transformer_detail;
        const std::string base = language_ + "/dec";
        if (config_.tied_embeddings && shared_embedding) {
            embedding_ = std::move(shared_embedding);
        } else {
            embedding_ =
                embedding_table(rng, base + "/embed", config_.vocab_size, config_.model_dim);
        }
        positional_ = sinusoidal_table(config_.max_positions, config_.model_dim);
        for (std::size_t l = 0; l < config_.layers; ++l) {
            const std::string lp = base + "/l" + std::to_string(l);
            layers_.push_back({AttentionBlock::make(rng, lp + "/self", config_.model_dim),
                               NormBlock::make(lp + "/n1", config_.model_dim),
                               AttentionBlock::make(rng, lp + "/cross", config_.model_dim),
                               NormBlock::make(lp + "/n2", config_.model_dim),
                               FfnBlock::make(rng, lp + "/ffn", config_.model_dim, config_.ffn_dim),
                               NormBlock::make(lp + "/n3", config_.model_dim)});
        }
        if (config_.tied_embeddings && config_.tied_output) {
            out_proj_ = embedding_;
        } else {
            out_proj_ = make_param(base + "/out_proj",
                                   uniform_tensor(rng, {config_.vocab_size, config_.model_dim},
                                                  std::sqrt(6.0 / double(config_.vocab_size +
                                                                         config_.model_dim))));
        }
    }

    const TransformerConfig& config() const { return config_; }
    const std::string& language() const { return language_; }
    const ParamPtr& embedding() const { return embedding_; }
    const ParamPtr& out_proj() const { return out_proj_; }

    std::vector<ParamPtr> parameters() const {
        std::vector<ParamPtr> out{embedding_};
        for (const auto& l : layers_) {
            l.self.collect(out);
            l.n1.collect(out);
            l.cross.collect(out);
            l.n2.collect(out);
            l.ffn.collect(out);
            l.n3.collect(out);
        }
        if (out_proj_ != embedding_) out.push_back(out_proj_);
        return out;
    }

    // Teacher-forced pass over the whole target prefix matrix
    // [batch x tgt_len]; returns logits [batch*tgt_len x V].
    Tensorf forward(Tapef& tape, const EncodedContext& ctx, const std::vector<std::int32_t>& ids,
                    const std::vector<std::uint8_t>& mask, std::size_t tgt_len,
                    DropoutStream& drops) const {
        using namespace transformer_detail;
        if (ids.size() != ctx.batch * tgt_len || mask.size() != ids.size()) {
            throw ContractError("decoder input size does not match batch " +
                                std::to_string(ctx.batch) + " x len " + std::to_string(tgt_len));
        }
        if (tgt_len > config_.max_positions) {
            throw ContractError("sequence length " + std::to_string(tgt_len) +
                                " exceeds max_positions " + std::to_string(config_.max_positions));
        }
        if (ctx.h.dim(1) != config_.model_dim) {
            throw ContractError("context width " + std::to_string(ctx.h.dim(1)) +
                                " does not match decoder model_dim " +
                                std::to_string(config_.model_dim));
        }
        check_ids(ids, config_.vocab_size);

        auto x = embed(tape, ids, tgt_len, drops);
        AttentionSpec self_spec{ctx.batch, config_.heads, tgt_len, tgt_len, true};
        AttentionSpec cross_spec{ctx.batch, config_.heads, tgt_len, ctx.seq, false};
        for (const auto& l : layers_) {
            x = attention_sublayer(tape, l.self, l.n1, x, x, self_spec, mask, config_.dropout,
                                   drops);
            x = attention_sublayer(tape, l.cross, l.n2, x, ctx.h, cross_spec, ctx.mask,
                                   config_.dropout, drops);
            x = ffn_sublayer(tape, l.ffn, l.n3, x, config_.dropout, drops);
        }
        return matmul_bt(tape, x, out_proj_->tensor);
    }

private:
    Tensorf embed(Tapef& tape, const std::vector<std::int32_t>& ids, std::size_t seq,
                  DropoutStream& drops) const {
        auto e = modmt::embedding(tape, embedding_->tensor, ids);
        auto scaled = scale(tape, e, static_cast<float>(std::sqrt(double(config_.model_dim))));
        auto pos = add_position(tape, scaled, positional_, seq);
        return dropout(tape, pos, config_.dropout, drops.next(), drops.training);
    }

    struct Layer {
        transformer_detail::AttentionBlock self;
        transformer_detail::NormBlock n1;
        transformer_detail::AttentionBlock cross;
        transformer_detail::NormBlock n2;
        transformer_detail::FfnBlock ffn;
        transformer_detail::NormBlock n3;
    };

    TransformerConfig config_;
    std::string language_;
    ParamPtr embedding_;
    ParamPtr out_proj_;
    Tensorf positional_;
    std::vector<Layer> layers_;
};

struct LanguageModules {
    EncoderModule enc;
    DecoderModule dec;
};

inline LanguageModules make_language_modules(const TransformerConfig& config,
                                             const std::string& language, std::uint64_t seed) {
    Rng enc_rng(mix_seed(seed, fnv1a(language), 1));
    Rng dec_rng(mix_seed(seed, fnv1a(language), 2));
    EncoderModule enc(config, language, enc_rng);
    ParamPtr shared = config.tied_embeddings ? enc.embedding() : nullptr;
    DecoderModule dec(config, language, dec_rng, shared);
    return {std::move(enc), std::move(dec)};
}

// ---------------------------------------------------------------------------
// Teacher forcing: decoder consumes target[:, :-1] and predicts
// target[:, 1:]; pads contribute nothing to the mean loss.
// ---------------------------------------------------------------------------
inline Tensorf forward_teacher_forced(Tapef& tape, const EncoderModule& enc,
                                      const DecoderModule& dec, const ParallelBatch& batch,
                                      bool training, std::uint64_t step_seed) {
    if (batch.rows == 0 || batch.tgt_len < 2) {
        throw ContractError("teacher forcing needs rows with at least bos + one token");
    }
    DropoutStream enc_drops{mix_seed(step_seed, 1), training};
    DropoutStream dec_drops{mix_seed(step_seed, 2), training};

    auto ctx = enc.forward(tape, batch.src_ids, batch.src_mask, batch.rows, batch.src_len,
                           enc_drops);

    const std::size_t in_len = batch.tgt_len - 1;
    std::vector<std::int32_t> dec_in(batch.rows * in_len);
    std::vector<std::uint8_t> dec_mask(batch.rows * in_len);
    std::vector<std::int32_t> labels(batch.rows * in_len);
    for (std::size_t r = 0; r < batch.rows; ++r) {
        for (std::size_t c = 0; c < in_len; ++c) {
            dec_in[r * in_len + c] = batch.tgt_ids[r * batch.tgt_len + c];
            dec_mask[r * in_len + c] = batch.tgt_mask[r * batch.tgt_len + c];
            labels[r * in_len + c] = batch.tgt_ids[r * batch.tgt_len + c + 1];
        }
    }
    auto logits = dec.forward(tape, ctx, dec_in, dec_mask, in_len, dec_drops);
    return cross_entropy(tape, logits, labels, BpeModel::pad_id);
}

// ---------------------------------------------------------------------------
// Greedy decoding. No cache: each step reruns the decoder on the whole
// prefix, which is cheap at desk scale and trivially correct.
// ---------------------------------------------------------------------------
struct GreedyResult {
    std::vector<std::vector<std::int32_t>> rows;  // content tokens, no bos/eos
    std::vector<bool> truncated;                  // true when max_len hit before eos
};

inline Tensorf decode_step(const DecoderModule& dec, const EncodedContext& ctx,
                           const std::vector<std::int32_t>& prefix) {
    if (prefix.empty() || prefix.front() != BpeModel::bos_id) {
        throw ContractError("decode_step: prefix must begin with bos");
    }
    if (ctx.batch != 1) throw ContractError("decode_step: context must hold one sentence");
    Tapef tape(Tapef::no_record);
    DropoutStream drops{0, false};
    std::vector<std::uint8_t> mask(prefix.size(), 1);
    auto logits = dec.forward(tape, ctx, prefix, mask, prefix.size(), drops);
    const std::size_t v = logits.dim(1);
    Tensorf last = Tensorf::zeros({1, v});
    const float* src = logits.data() + (prefix.size() - 1) * v;
    std::copy(src, src + v, last.data());
    return last;
}

inline GreedyResult greedy_translate_batch(const EncoderModule& enc, const DecoderModule& dec,
                                           const std::vector<std::vector<std::int32_t>>& src_rows,
                                           std::size_t max_len) {
    if (max_len == 0) throw ContractError("greedy_translate: max_len must be at least 1");
    const std::size_t rows = src_rows.size();
    GreedyResult result;
    result.rows.assign(rows, {});
    result.truncated.assign(rows, false);
    if (rows == 0) return result;

    std::size_t src_len = 0;
    for (const auto& r : src_rows) src_len = std::max(src_len, r.size());
    std::vector<std::int32_t> src_ids(rows * src_len, BpeModel::pad_id);
    std::vector<std::uint8_t> src_mask(rows * src_len, 0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < src_rows[r].size(); ++c) {
            src_ids[r * src_len + c] = src_rows[r][c];
            src_mask[r * src_len + c] = 1;
        }
    }

    Tapef tape(Tapef::no_record);
    DropoutStream drops{0, false};
    auto ctx = enc.forward(tape, src_ids, src_mask, rows, src_len, drops);

    std::vector<std::vector<std::int32_t>> prefixes(rows, {BpeModel::bos_id});
    std::vector<bool> done(rows, false);
    const std::size_t v = dec.config().vocab_size;
    // the prefix occupies one extra slot for bos; truncate rather than
    // overrun the positional table
    const std::size_t steps = std::min(max_len, dec.config().max_positions - 1);

    for (std::size_t step = 0; step < steps; ++step) {
        const std::size_t plen = step + 1;
        std::vector<std::int32_t> dec_in(rows * plen);
        std::vector<std::uint8_t> dec_mask(rows * plen, 1);
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy(prefixes[r].begin(), prefixes[r].end(), dec_in.begin() + r * plen);
        }
        auto logits = dec.forward(tape, ctx, dec_in, dec_mask, plen, drops);
        bool all_done = true;
        for (std::size_t r = 0; r < rows; ++r) {
            if (done[r]) {
                prefixes[r].push_back(BpeModel::eos_id);
                continue;
            }
            const float* row = logits.data() + (r * plen + plen - 1) * v;
            std::size_t best = 0;
            for (std::size_t j = 1; j < v; ++j) {
                if (row[j] > row[best]) best = j;
            }
            const auto tok = static_cast<std::int32_t>(best);
            prefixes[r].push_back(tok);
            if (tok == BpeModel::eos_id) {
                done[r] = true;
            } else {
                result.rows[r].push_back(tok);
                all_done = false;
            }
        }
        if (all_done) break;
    }
    for (std::size_t r = 0; r < rows; ++r) result.truncated[r] = !done[r];
    return result;
}

struct GreedyTranslation {
    std::vector<std::int32_t> ids;
    bool truncated = false;
};

inline GreedyTranslation greedy_translate(const EncoderModule& enc, const DecoderModule& dec,
                                          const std::vector<std::int32_t>& src_ids,
                                          std::size_t max_len) {
    auto batch = greedy_translate_batch(enc, dec, {src_ids}, max_len);
    return {batch.rows[0], batch.truncated[0]};
}

}  // namespace modmt
