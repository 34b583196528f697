// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "modmt/trainer.hpp"

using namespace modmt;

namespace {

TransformerConfig tiny_config() {
    TransformerConfig c;
    c.layers = 1;
    c.heads = 2;
    c.model_dim = 16;
    c.ffn_dim = 32;
    c.dropout = 0.0;
    c.max_positions = 32;
    c.vocab_size = 0;
    return c;
}

struct Setup {
    Registry r;
    DataPool pool;
};

// Identity-transform languages over a shared latent stream: every
// direction is a copy task in different spellings.
Setup make_setup(const std::vector<std::string>& langs, std::size_t n_sentences,
                 std::uint64_t seed, std::size_t budget = 128) {
    std::vector<SyntheticLanguageSpec> specs;
    for (std::size_t i = 0; i < langs.size(); ++i) {
        SyntheticLanguageSpec s;
        s.language = langs[i];
        s.kind = i == 0 ? TransformKind::identity : TransformKind::substitution_cipher;
        s.cipher_seed = 100 + i;
        specs.push_back(s);
    }
    auto corpus = generate_synthetic(specs, n_sentences, 20, 2, 4, seed);
    const auto split = split_ranges(n_sentences);

    Setup s{Registry(seed), {}};
    for (const auto& lang : langs) {
        s.r.register_language(lang, tiny_config(), learn_bpe(corpus.sentences(lang), 96, lang));
    }
    for (const auto& src : langs) {
        for (const auto& tgt : langs) {
            if (src == tgt) continue;
            const auto& st = corpus.sentences(src);
            const auto& tt = corpus.sentences(tgt);
            const auto& sb = s.r.tokenizer(src);
            const auto& tb = s.r.tokenizer(tgt);
            s.pool.add(src, tgt,
                       DirectionData(encode_pairs(sb, tb, st, tt, 0, split.train_end),
                                     encode_pairs(sb, tb, st, tt, split.test_end, n_sentences),
                                     budget, mix_seed(seed, fnv1a(src), fnv1a(tgt)), src, tgt));
        }
    }
    return s;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/modmt_trainer_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("lr schedule matches the closed form") {
    CHECK(lr_at(1, 0.001, 4000) == 0.001 * (1.0 / 4000.0));
    CHECK(lr_at(1, 0.001, 4000) == doctest::Approx(2.5e-7).epsilon(1e-12));
    CHECK(lr_at(2000, 0.001, 4000) == 0.001 * 0.5);
    CHECK(lr_at(2000, 0.001, 4000) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(lr_at(4000, 0.001, 4000) == 0.001);
    CHECK(lr_at(16000, 0.001, 4000) == 0.001 * 0.5);
    CHECK(lr_at(16000, 0.001, 4000) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK_THROWS_AS(lr_at(0, 0.001, 4000), ContractError);
    CHECK_THROWS_AS(lr_at(1, 0.001, 0), ConfigError);

    SUBCASE("warmup is linear, decay is inverse square root") {
        CHECK(lr_at(100, 0.001, 4000) == doctest::Approx(0.001 * 100.0 / 4000.0));
        CHECK(lr_at(36000, 0.001, 4000) == doctest::Approx(0.001 * std::sqrt(4000.0 / 36000.0)));
    }
}

TEST_CASE("adam first step follows the bias-corrected closed form") {
    auto p = std::make_shared<Parameter<float>>(Tensorf::filled({1}, 2.0f), "w");
    Adam opt({0.01, 1});
    std::vector<float> g{1.0f};
    p->tensor.accumulate_grad(g.data(), 1);
    opt.step({p});
    CHECK(p->tensor[0] == doctest::Approx(2.0 - 0.01).epsilon(1e-7));
    CHECK(opt.steps_taken() == 1);
    CHECK(opt.last_lr() == 0.01);

    SUBCASE("zero gradients leave the value untouched forever") {
        auto q = std::make_shared<Parameter<float>>(Tensorf::filled({3}, 1.5f), "q");
        Adam o2({0.5, 1});
        for (int i = 0; i < 5; ++i) {
            std::vector<float> zeros(3, 0.0f);
            q->tensor.accumulate_grad(zeros.data(), 3);
            o2.step({q});
        }
        for (std::size_t i = 0; i < 3; ++i) CHECK(q->tensor[i] == 1.5f);
    }
    SUBCASE("frozen parameters never get moments") {
        auto q = std::make_shared<Parameter<float>>(Tensorf::filled({2}, 1.0f), "f");
        q->set_trainable(false);
        Adam o3({0.1, 1});
        o3.step({q});
        CHECK_FALSE(o3.has_moments(q));
        CHECK(q->tensor[0] == 1.0f);
    }
    SUBCASE("config is validated") {
        CHECK_THROWS_AS(Adam({-0.1, 10}), ConfigError);
        CHECK_THROWS_AS(Adam({0.1, 0}), ConfigError);
        CHECK_THROWS_AS(Adam({0.1, 10, 1.0, 0.98}), ConfigError);
    }
}

TEST_CASE("schedules iterate in the nested source-major order") {
    auto s = make_setup({"xa", "xb", "xc", "xd"}, 40, 11);
    auto sched = TrainingSchedule::all_pairs(s.r);
    CHECK(sched.directions.size() == 12);

    // hand the directions over in scrambled order; visits must not care
    std::reverse(sched.directions.begin(), sched.directions.end());
    const std::vector<Direction> expect{
        {"xa", "xb"}, {"xa", "xc"}, {"xa", "xd"}, {"xb", "xa"}, {"xb", "xc"}, {"xb", "xd"},
        {"xc", "xa"}, {"xc", "xb"}, {"xc", "xd"}, {"xd", "xa"}, {"xd", "xb"}, {"xd", "xc"}};
    CHECK(sched.visit_order(s.r) == expect);

    SUBCASE("one training step visits each scheduled direction once") {
        Adam opt({1e-3, 100});
        auto visits = multilingual_training_step(s.r, sched, s.pool, opt, 1);
        REQUIRE(visits.size() == 12);
        for (std::size_t i = 0; i < 12; ++i) {
            CHECK(visits[i].src == expect[i].first);
            CHECK(visits[i].tgt == expect[i].second);
            CHECK(std::isfinite(visits[i].loss));
        }
        CHECK(opt.steps_taken() == 12);
    }
    SUBCASE("validation rejects duplicates, unknowns and empty schedules") {
        TrainingSchedule bad;
        CHECK_THROWS_AS(bad.validate(s.r), ConfigError);
        bad.directions = {{"xa", "xb"}, {"xa", "xb"}};
        CHECK_THROWS_AS(bad.validate(s.r), ConfigError);
        bad.directions = {{"xa", "zz"}};
        CHECK_THROWS_AS(bad.validate(s.r), ConfigError);
    }
}

TEST_CASE("updates touch exactly the scheduled modules") {
    auto s = make_setup({"xa", "xb", "xc"}, 40, 13);
    const auto before = s.r.fingerprint();

    TrainingSchedule sched;
    sched.directions.push_back({"xa", "xb"});
    Adam opt({1e-3, 100});
    multilingual_training_step(s.r, sched, s.pool, opt, 1);

    const auto after = s.r.fingerprint();
    std::vector<std::string> changed;
    for (const auto& [name, hex] : before) {
        if (after.at(name) != hex) changed.push_back(name);
    }
    // allowed: e_xa, d_xb, and d_xb's tied table (named under xb/enc)
    for (const auto& name : changed) {
        const bool ok = name.rfind("xa/enc/", 0) == 0 || name.rfind("xb/dec/", 0) == 0 ||
                        name == "xb/enc/embed";
        CHECK_MESSAGE(ok, "unexpected update to ", name);
    }
    auto moved = [&](const std::string& n) {
        return std::find(changed.begin(), changed.end(), n) != changed.end();
    };
    CHECK(moved("xa/enc/embed"));
    CHECK(moved("xa/enc/l0/ffn_w1"));
    CHECK(moved("xb/dec/l0/ffn_w1"));
    CHECK(moved("xb/enc/embed"));
    CHECK_FALSE(moved("xc/enc/embed"));
    CHECK_FALSE(moved("xb/enc/l0/ffn_w1"));
    CHECK(s.r.direction_trained("xa", "xb"));
    CHECK_FALSE(s.r.direction_trained("xb", "xa"));

    SUBCASE("a direction whose data is missing stops the step before any update") {
        TrainingSchedule wide;
        wide.directions = {{"xa", "xb"}, {"xa", "zz"}};
        CHECK_THROWS_AS(multilingual_training_step(s.r, wide, s.pool, opt, 2), ConfigError);
        DataPool empty;
        const auto snap = s.r.fingerprint();
        TrainingSchedule pair;
        pair.directions = {{"xa", "xb"}, {"xb", "xa"}};
        CHECK_THROWS_WITH_AS(multilingual_training_step(s.r, pair, empty, opt, 2),
                             "no data source for direction xa->xb", ConfigError);
        CHECK(s.r.fingerprint() == snap);
    }
}

TEST_CASE("explicit diagonal entries are admissible") {
    auto s = make_setup({"xa", "xb"}, 40, 17);
    const auto split = split_ranges(40);
    SyntheticLanguageSpec spec;
    spec.language = "xa";
    auto corpus = generate_synthetic({spec}, 40, 20, 2, 4, 17);
    const auto& texts = corpus.sentences("xa");
    const auto& bpe = s.r.tokenizer("xa");
    s.pool.add("xa", "xa",
               DirectionData(encode_pairs(bpe, bpe, texts, texts, 0, split.train_end),
                             encode_pairs(bpe, bpe, texts, texts, split.test_end, 40), 128, 3,
                             "xa", "xa"));

    TrainingSchedule sched;
    sched.directions.push_back({"xa", "xa"});
    Adam opt({1e-3, 100});
    auto visits = multilingual_training_step(s.r, sched, s.pool, opt, 1);
    REQUIRE(visits.size() == 1);
    CHECK(visits[0].src == "xa");
    CHECK(visits[0].tgt == "xa");
}

TEST_CASE("direction data cycles epochs with full coverage") {
    auto s = make_setup({"xa", "xb"}, 60, 19, 64);
    auto& data = s.pool.at({"xa", "xb"});
    const std::size_t n_train = data.train_pairs();

    auto drain_epoch = [&]() {
        std::multiset<std::size_t> sizes;
        std::size_t seen = 0;
        std::vector<std::size_t> batch_rows;
        while (seen < n_train) {
            const auto& b = data.next_train();
            seen += b.rows;
            batch_rows.push_back(b.rows);
        }
        CHECK(seen == n_train);
        return batch_rows;
    };
    auto e1 = drain_epoch();
    auto e2 = drain_epoch();
    CHECK(e1.size() >= 2);

    SUBCASE("constructors reject empty splits") {
        CHECK_THROWS_AS(DirectionData({}, {{{2, 3}, {2, 3}}}, 64, 1, "a", "b"), ConfigError);
        CHECK_THROWS_AS(DirectionData({{{2, 3}, {2, 3}}}, {}, 64, 1, "a", "b"), ConfigError);
    }
    SUBCASE("pool lookup failures name the direction") {
        CHECK_THROWS_WITH_AS(s.pool.at({"xb", "zz"}), "no data source for direction xb->zz",
                             ConfigError);
    }
}

TEST_CASE("train_joint runs, reports, checkpoints and stays deterministic") {
    TempFile ckpt("best.bin");

    auto run = [&](bool with_path) {
        auto s = make_setup({"xa", "xb"}, 100, 23);
        Adam opt({3e-3, 50});
        JointOptions opts;
        opts.max_steps = 30;
        opts.stop.interval = 10;
        opts.stop.patience = 5;
        if (with_path) opts.checkpoint_path = ckpt.path;
        auto report = train_joint(s.r, TrainingSchedule::all_pairs(s.r), s.pool, opt, opts);
        return std::make_pair(std::move(s), std::move(report));
    };

    auto [s1, r1] = run(true);
    CHECK(r1.steps == 30);
    CHECK(r1.loss_trace.size() == 30);
    CHECK(r1.stop_reason == "max_steps");
    CHECK(r1.evals.size() == 3);
    CHECK(r1.best_val < r1.evals.front().val_loss * 1.0001);
    CHECK(r1.evals.back().train_loss.count("xa->xb") == 1);
    CHECK(s1.r.steps_done() == r1.best_step);
    CHECK(s1.r.direction_trained("xa", "xb"));
    CHECK(s1.r.direction_trained("xb", "xa"));

    // the loss should clearly move on a copy task in 30 rounds
    CHECK(r1.loss_trace.back() < r1.loss_trace.front());
    CHECK(r1.to_text().find("stop_reason=max_steps") != std::string::npos);

    SUBCASE("saved checkpoint matches the restored best state") {
        auto loaded = load_checkpoint(ckpt.path);
        CHECK(loaded.registry.fingerprint() == s1.r.fingerprint());
        CHECK(loaded.registry.steps_done() == r1.best_step);
        CHECK(loaded.schedule_desc == "xa->xb, xb->xa");
        CHECK(loaded.has_optimizer);
    }
    SUBCASE("identical seeds give identical traces and digests") {
        auto [s2, r2] = run(false);
        REQUIRE(r2.loss_trace.size() == r1.loss_trace.size());
        for (std::size_t i = 0; i < r1.loss_trace.size(); ++i) {
            CHECK(r1.loss_trace[i] == r2.loss_trace[i]);
        }
        CHECK(s1.r.fingerprint() == s2.r.fingerprint());
    }
    SUBCASE("max_steps zero trains nothing") {
        auto s3 = make_setup({"xa", "xb"}, 100, 23);
        const auto before = s3.r.fingerprint();
        Adam opt({1e-3, 50});
        JointOptions opts;
        opts.max_steps = 0;
        auto report = train_joint(s3.r, TrainingSchedule::all_pairs(s3.r), s3.pool, opt, opts);
        CHECK(report.steps == 0);
        CHECK(report.loss_trace.empty());
        CHECK(report.evals.empty());
        CHECK(report.stop_reason == "max_steps");
        CHECK(s3.r.fingerprint() == before);
    }
}

TEST_CASE("early stopping fires after patience non-improving evals") {
    auto s = make_setup({"xa", "xb"}, 60, 29);
    // freeze everything: no update can happen, so validation never improves
    for (const auto& lang : s.r.languages()) {
        s.r.freeze(lang, ModuleRole::encoder);
        s.r.freeze(lang, ModuleRole::decoder);
    }
    Adam opt({1e-3, 10});
    JointOptions opts;
    opts.max_steps = 50;
    opts.stop.interval = 2;
    opts.stop.patience = 3;
    auto report = train_joint(s.r, TrainingSchedule::all_pairs(s.r), s.pool, opt, opts);
    CHECK(report.stop_reason == "early_stop");
    // eval 1 improves on infinity; evals 2..4 tie and exhaust patience
    CHECK(report.evals.size() == 4);
    CHECK(report.steps == 8);
}

TEST_CASE("stop probe ends training and keeps the current state") {
    auto s = make_setup({"xa", "xb"}, 60, 31);
    Adam opt({1e-3, 50});
    JointOptions opts;
    opts.max_steps = 100;
    opts.stop.interval = 5;
    std::uint64_t probed_at = 0;
    opts.stop_probe = [&](Registry&, std::uint64_t step) {
        probed_at = step;
        return true;
    };
    auto report = train_joint(s.r, TrainingSchedule::all_pairs(s.r), s.pool, opt, opts);
    CHECK(report.stop_reason == "target_metric");
    CHECK(report.steps == 5);
    CHECK(probed_at == 5);
    CHECK(s.r.steps_done() == 5);
}

TEST_CASE("add_language trains the new module against a frozen anchor") {
    auto s = make_setup({"xa", "xb", "xc"}, 80, 37);
    Adam opt({3e-3, 50});
    JointOptions opts;
    opts.max_steps = 5;
    opts.stop.interval = 5;
    train_joint(s.r, TrainingSchedule::all_pairs(s.r), s.pool, opt, opts);

    // bring in a fourth language parallel to the originals
    std::vector<SyntheticLanguageSpec> specs;
    for (const auto& lang : {"xa", "xb", "xc"}) {
        SyntheticLanguageSpec sp;
        sp.language = lang;
        specs.push_back(sp);
    }
    SyntheticLanguageSpec nd;
    nd.language = "xd";
    nd.kind = TransformKind::suffix_marking;
    nd.marker = "zo";
    specs.push_back(nd);
    auto corpus = generate_synthetic(specs, 60, 20, 2, 4, 41);
    const auto split = split_ranges(60);

    s.r.register_language("xd", tiny_config(), learn_bpe(corpus.sentences("xd"), 96, "xd"));
    const auto& db = s.r.tokenizer("xd");
    const auto& ab = s.r.tokenizer("xa");
    const auto& dt = corpus.sentences("xd");
    const auto& at = corpus.sentences("xa");
    s.pool.add("xd", "xa",
               DirectionData(encode_pairs(db, ab, dt, at, 0, split.train_end),
                             encode_pairs(db, ab, dt, at, split.test_end, 60), 128, 5, "xd",
                             "xa"));
    s.pool.add("xa", "xd",
               DirectionData(encode_pairs(ab, db, at, dt, 0, split.train_end),
                             encode_pairs(ab, db, at, dt, split.test_end, 60), 128, 6, "xa",
                             "xd"));

    std::map<std::string, std::map<std::string, std::string>> before;
    for (const auto& lang : {"xa", "xb", "xc"}) before[lang] = s.r.fingerprint_of(lang);
    const auto xd_before = s.r.fingerprint_of("xd");

    JointOptions add_opts;
    add_opts.max_steps = 4;
    add_opts.stop.interval = 4;
    Adam add_opt({3e-3, 20});
    auto report = add_language_encoder(s.r, "xd", "xa", s.pool, add_opt, add_opts);
    CHECK(report.steps == 4);
    CHECK(s.r.is_frozen("xa", ModuleRole::decoder));

    for (const auto& lang : {"xa", "xb", "xc"}) {
        CHECK(s.r.fingerprint_of(lang) == before[lang]);
    }
    CHECK(s.r.fingerprint_of("xd") != xd_before);
    CHECK(s.r.direction_trained("xd", "xa"));

    SUBCASE("decoder direction mirrors with the encoder frozen") {
        const auto xd_mid = s.r.fingerprint_of("xd");
        Adam dec_opt({3e-3, 20});
        add_language_decoder(s.r, "xd", "xa", s.pool, dec_opt, add_opts);
        CHECK(s.r.is_frozen("xa", ModuleRole::encoder));
        for (const auto& lang : {"xa", "xb", "xc"}) {
            CHECK(s.r.fingerprint_of(lang) == before[lang]);
        }
        CHECK(s.r.fingerprint_of("xd") != xd_mid);
        CHECK(s.r.direction_trained("xa", "xd"));
    }
    SUBCASE("bidirectional run trains both new modules against a fully frozen anchor") {
        const auto xd_mid = s.r.fingerprint_of("xd");
        Adam bi_opt({3e-3, 20});
        const auto bi = add_language_bidirectional(s.r, "xd", "xa", s.pool, bi_opt, add_opts);
        CHECK(bi.steps == 4);
        CHECK(s.r.is_frozen("xa", ModuleRole::encoder));
        CHECK(s.r.is_frozen("xa", ModuleRole::decoder));
        for (const auto& lang : {"xa", "xb", "xc"}) {
            CHECK(s.r.fingerprint_of(lang) == before[lang]);
        }
        CHECK(s.r.fingerprint_of("xd") != xd_mid);
        CHECK(s.r.direction_trained("xd", "xa"));
        CHECK(s.r.direction_trained("xa", "xd"));
    }
    SUBCASE("preconditions reject bad anchors") {
        CHECK_THROWS_AS(add_language_encoder(s.r, "xd", "xd", s.pool, add_opt, add_opts),
                        ConfigError);
        CHECK_THROWS_AS(add_language_encoder(s.r, "xd", "zz", s.pool, add_opt, add_opts),
                        ConfigError);
    }
    SUBCASE("outside interference is caught as drift") {
        JointOptions evil = add_opts;
        evil.stop_probe = [&](Registry& reg, std::uint64_t) {
            reg.encoder("xb").parameters()[2]->tensor.data()[0] += 1.0f;
            return true;
        };
        Adam evil_opt({3e-3, 20});
        CHECK_THROWS_AS(add_language_encoder(s.r, "xd", "xa", s.pool, evil_opt, evil),
                        IntegrityError);
    }
}

TEST_CASE("anchor without history is refused") {
    auto s = make_setup({"xa", "xb"}, 40, 43);
    Adam opt({1e-3, 10});
    JointOptions opts;
    opts.max_steps = 1;
    CHECK_THROWS_WITH_AS(add_language_encoder(s.r, "xb", "xa", s.pool, opt, opts),
                         "anchor 'xa' has no training history", ConfigError);
}

TEST_CASE("shared baseline trains one model over a tagged stream") {
    std::vector<SyntheticLanguageSpec> specs(2);
    specs[0].language = "xa";
    specs[1].language = "xb";
    specs[1].kind = TransformKind::substitution_cipher;
    specs[1].cipher_seed = 9;
    auto corpus = generate_synthetic(specs, 60, 20, 2, 4, 47);
    const auto split = split_ranges(60);

    // one joint vocabulary over both languages, with target tags
    std::vector<std::string> mixed = corpus.sentences("xa");
    for (const auto& t : corpus.sentences("xb")) mixed.push_back(t);
    auto bpe = learn_bpe(mixed, 160, "uni", {"<2xa>", "<2xb>"});
    CHECK(bpe.has_token("<2xa>"));
    CHECK(bpe.has_token("<2xb>"));

    Registry r(51);
    r.register_language("uni", tiny_config(), bpe);
    CHECK(r.size() == 1);

    const std::int32_t tag_xa = r.tokenizer("uni").id_of("<2xa>");
    const std::int32_t tag_xb = r.tokenizer("uni").id_of("<2xb>");
    CHECK(tag_xa >= 4);
    CHECK(tag_xb >= 4);

    auto tagged = [&](const std::vector<std::string>& src, const std::vector<std::string>& tgt,
                      std::int32_t tag_id, std::size_t lo, std::size_t hi) {
        auto pairs = encode_pairs(r.tokenizer("uni"), r.tokenizer("uni"), src, tgt, lo, hi);
        for (auto& p : pairs) p.src.insert(p.src.begin() + 1, tag_id);
        return pairs;
    };
    std::vector<EncodedPair> train = tagged(corpus.sentences("xa"), corpus.sentences("xb"),
                                            tag_xb, 0, split.train_end);
    for (auto& p :
         tagged(corpus.sentences("xb"), corpus.sentences("xa"), tag_xa, 0, split.train_end)) {
        train.push_back(std::move(p));
    }
    std::vector<EncodedPair> val = tagged(corpus.sentences("xa"), corpus.sentences("xb"), tag_xb,
                                          split.test_end, 60);

    DataPool pool;
    pool.add("uni", "uni", DirectionData(std::move(train), std::move(val), 128, 7, "uni", "uni"));

    Adam opt({3e-3, 50});
    JointOptions opts;
    opts.max_steps = 10;
    opts.stop.interval = 10;
    auto report = train_shared_baseline(r, "uni", pool, opt, opts);
    CHECK(report.steps == 10);
    CHECK(report.loss_trace.back() < report.loss_trace.front());
    CHECK(r.direction_trained("uni", "uni"));
}
