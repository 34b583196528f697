// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "modmt/registry.hpp"

using namespace modmt;

namespace {

BpeModel make_bpe(const std::string& lang) {
    std::vector<std::string> corpus{"abab baba abba", "aabb bbaa abab", "ba ab baba"};
    return learn_bpe(corpus, 24, lang);
}

TransformerConfig tiny_config(bool tied = true) {
    TransformerConfig c;
    c.layers = 1;
    c.heads = 2;
    c.model_dim = 16;
    c.ffn_dim = 32;
    c.dropout = 0.0;
    c.max_positions = 16;
    c.vocab_size = 0;  // take it from the tokenizer
    c.tied_embeddings = tied;
    c.tied_output = tied;
    return c;
}

Registry two_language_registry(std::uint64_t seed = 7) {
    Registry r(seed);
    r.register_language("xa", tiny_config(), make_bpe("xa"));
    r.register_language("xb", tiny_config(), make_bpe("xb"));
    return r;
}

std::vector<std::uint8_t> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/modmt_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("registration keeps one encoder and one decoder per language") {
    Registry r(7);
    for (const auto& lang : {"xa", "xb", "xc", "xd"}) {
        r.register_language(lang, tiny_config(), make_bpe(lang));
    }
    CHECK(r.size() == 4);
    CHECK(r.languages() == std::vector<std::string>{"xa", "xb", "xc", "xd"});
    CHECK(r.encoder("xc").language() == "xc");
    CHECK(r.decoder("xc").language() == "xc");
    CHECK(r.tokenizer("xc").language == "xc");

    CHECK_THROWS_AS(r.register_language("xa", tiny_config(), make_bpe("xa")), ConfigError);
    CHECK_THROWS_AS(r.register_language("XA", tiny_config(), make_bpe("XA")), ConfigError);
    CHECK_THROWS_AS(r.register_language("", tiny_config(), make_bpe("")), ConfigError);
    CHECK_THROWS_AS(r.register_language("xe", tiny_config(), make_bpe("other")), ConfigError);
    CHECK_THROWS_AS(r.encoder("zz"), ConfigError);

    SUBCASE("explicit vocab_size must match the tokenizer") {
        TransformerConfig c = tiny_config();
        c.vocab_size = 99;
        CHECK_THROWS_AS(r.register_language("xe", c, make_bpe("xe")), ConfigError);
        c.vocab_size = make_bpe("xe").vocab_size();
        CHECK_NOTHROW(r.register_language("xe", c, make_bpe("xe")));
    }
}

TEST_CASE("same seed and order rebuild identical initial digests") {
    auto a = two_language_registry(7);
    auto b = two_language_registry(7);
    auto c = two_language_registry(8);
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint() != c.fingerprint());
}

TEST_CASE("fingerprint covers every distinct parameter exactly once") {
    auto r = two_language_registry();
    // tied language: encoder 1+16 params, decoder shares the table and
    // skips the aliased projection, adding 26
    CHECK(r.language_parameters("xa").size() == 17 + 26);
    auto fp = r.fingerprint();
    CHECK(fp.size() == 2 * 43);
    CHECK(fp.count("xa/enc/embed") == 1);
    CHECK(fp.count("xb/enc/l0/self_wq") == 1);

    SUBCASE("one perturbed element changes exactly one digest") {
        r.encoder("xa").parameters()[3]->tensor.data()[0] += 1.0f;
        auto fp2 = r.fingerprint();
        std::size_t changed = 0;
        for (const auto& [name, hex] : fp) {
            if (fp2.at(name) != hex) ++changed;
        }
        CHECK(changed == 1);
    }
    SUBCASE("writes to one language never move another's digests") {
        auto before = r.fingerprint_of("xb");
        for (const auto& p : r.language_parameters("xa")) p->tensor.data()[0] += 0.25f;
        CHECK(r.fingerprint_of("xb") == before);
        CHECK(r.fingerprint_of("xa") != before);
    }
}

TEST_CASE("freeze flips trainability and survives optimizer traffic") {
    auto r = two_language_registry();
    r.freeze("xa", ModuleRole::encoder);
    CHECK(r.is_frozen("xa", ModuleRole::encoder));
    CHECK_FALSE(r.is_frozen("xa", ModuleRole::decoder));

    for (const auto& p : r.module_parameters("xa", ModuleRole::encoder)) {
        CHECK_FALSE(p->trainable);
    }
    // tied table freezes with the encoder; the decoder's own layers stay live
    const auto dec_params = r.module_parameters("xa", ModuleRole::decoder);
    CHECK_FALSE(dec_params[0]->trainable);
    for (std::size_t i = 1; i < dec_params.size(); ++i) CHECK(dec_params[i]->trainable);

    SUBCASE("freeze is idempotent, thaw restores") {
        CHECK_NOTHROW(r.freeze("xa", ModuleRole::encoder));
        r.thaw("xa", ModuleRole::encoder);
        for (const auto& p : r.module_parameters("xa", ModuleRole::encoder)) {
            CHECK(p->trainable);
        }
    }
    SUBCASE("thawing one role keeps a tied table frozen while the other is frozen") {
        r.freeze("xa", ModuleRole::decoder);
        r.thaw("xa", ModuleRole::encoder);
        CHECK_FALSE(r.encoder("xa").embedding()->trainable);
        CHECK(r.encoder("xa").parameters()[1]->trainable);
    }
    SUBCASE("optimizer steps cannot move frozen parameters") {
        auto before = r.fingerprint_of("xa");
        Adam opt({1e-2, 1});
        auto params = r.all_parameters();
        for (int step = 0; step < 3; ++step) {
            for (const auto& p : params) {
                std::vector<float> g(p->tensor.numel(), 0.5f);
                p->tensor.accumulate_grad(g.data(), g.size());
            }
            opt.step(params);
        }
        auto after = r.fingerprint_of("xa");
        for (const auto& p : r.module_parameters("xa", ModuleRole::encoder)) {
            CHECK(after.at(p->name) == before.at(p->name));
        }
        CHECK(after.at("xa/dec/l0/ffn_w1") != before.at("xa/dec/l0/ffn_w1"));
        CHECK_FALSE(opt.has_moments(r.encoder("xa").embedding()));
    }
    CHECK_THROWS_AS(r.freeze("zz", ModuleRole::encoder), ConfigError);
}

TEST_CASE("training history records directions over known languages") {
    auto r = two_language_registry();
    CHECK_FALSE(r.direction_trained("xa", "xb"));
    r.record_direction("xa", "xb");
    CHECK(r.direction_trained("xa", "xb"));
    CHECK_FALSE(r.direction_trained("xb", "xa"));
    CHECK_THROWS_AS(r.record_direction("xa", "zz"), ConfigError);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    TempFile file("ckpt.bin");
    TempFile file2("ckpt2.bin");

    auto r = two_language_registry(5);
    // make the state unmistakably non-initial
    r.encoder("xa").embedding()->tensor.data()[7] = 3.25f;
    r.decoder("xb").parameters()[5]->tensor.data()[2] = -1.5f;
    r.freeze("xb", ModuleRole::decoder);
    r.record_direction("xa", "xb");
    r.record_direction("xb", "xa");
    r.set_steps_done(123);

    Adam opt({1e-3, 10});
    auto params = r.all_parameters();
    for (int step = 0; step < 2; ++step) {
        for (const auto& p : params) {
            std::vector<float> g(p->tensor.numel(), 0.1f);
            p->tensor.accumulate_grad(g.data(), g.size());
        }
        opt.step(params);
    }
    const auto snap = opt.snapshot(params);
    CHECK(snap.global_step == 2);
    CHECK(snap.params.count("xa/enc/embed") == 1);
    CHECK(snap.params.count("xb/dec/l0/ffn_w1") == 0);  // frozen: moments dropped

    const auto fp = r.fingerprint();
    save_checkpoint(r, file.path, &snap, "all-pairs");

    auto loaded = load_checkpoint(file.path);
    CHECK(loaded.registry.fingerprint() == fp);
    CHECK(loaded.registry.languages() == r.languages());
    CHECK(loaded.registry.seed() == 5);
    CHECK(loaded.registry.steps_done() == 123);
    CHECK(loaded.schedule_desc == "all-pairs");
    CHECK(loaded.registry.is_frozen("xb", ModuleRole::decoder));
    CHECK_FALSE(loaded.registry.is_frozen("xb", ModuleRole::encoder));
    CHECK(loaded.registry.direction_trained("xa", "xb"));
    CHECK(loaded.registry.direction_trained("xb", "xa"));
    CHECK_FALSE(loaded.registry.direction_trained("xa", "xa"));
    REQUIRE(loaded.has_optimizer);
    CHECK(loaded.optimizer.global_step == 2);
    CHECK(loaded.optimizer.config.warmup == 10);
    REQUIRE(loaded.optimizer.params.count("xa/enc/embed") == 1);
    CHECK(loaded.optimizer.params.at("xa/enc/embed").m == snap.params.at("xa/enc/embed").m);
    CHECK(loaded.optimizer.params.at("xa/enc/embed").v == snap.params.at("xa/enc/embed").v);

    SUBCASE("tokenizers survive with identical behavior") {
        const auto& b1 = r.tokenizer("xa");
        const auto& b2 = loaded.registry.tokenizer("xa");
        CHECK(merges_text(b1) == merges_text(b2));
        CHECK(vocab_text(b1) == vocab_text(b2));
        CHECK(encode(b2, "abab ba") == encode(b1, "abab ba"));
    }
    SUBCASE("tied wiring is restored, not just values") {
        CHECK(loaded.registry.encoder("xa").embedding() ==
              loaded.registry.decoder("xa").embedding());
        CHECK(loaded.registry.decoder("xa").out_proj() ==
              loaded.registry.decoder("xa").embedding());
    }
    SUBCASE("saving the loaded registry reproduces the file byte for byte") {
        save_checkpoint(loaded.registry, file2.path, &loaded.optimizer, loaded.schedule_desc);
        CHECK(slurp(file.path) == slurp(file2.path));
    }
    SUBCASE("adding a language then saving leaves original digests unchanged") {
        loaded.registry.register_language("xc", tiny_config(), make_bpe("xc"));
        save_checkpoint(loaded.registry, file2.path);
        auto again = load_checkpoint(file2.path);
        CHECK(again.registry.size() == 3);
        for (const auto& [name, hex] : fp) {
            CHECK(again.registry.fingerprint().at(name) == hex);
        }
    }
}

TEST_CASE("corrupt containers are rejected whole") {
    TempFile file("bad.bin");
    auto r = two_language_registry(5);
    save_checkpoint(r, file.path);
    const auto original = slurp(file.path);

    SUBCASE("flipped payload byte names the damaged parameter") {
        auto bytes = original;
        const std::string needle = "xa/enc/embed";
        auto it = std::search(bytes.begin(), bytes.end(), needle.begin(), needle.end());
        REQUIRE(it != bytes.end());
        // 50 bytes past the name lands inside the stored digest
        *(it + needle.size() + 50) ^= 0xff;
        spit(file.path, bytes);
        CHECK_THROWS_WITH_AS(load_checkpoint(file.path),
                             "digest mismatch for parameter 'xa/enc/embed'", IntegrityError);
    }
    SUBCASE("truncation throws before any registry exists") {
        auto bytes = original;
        bytes.resize(bytes.size() / 2);
        spit(file.path, bytes);
        CHECK_THROWS_AS(load_checkpoint(file.path), IntegrityError);
    }
    SUBCASE("version bump is refused with both versions named") {
        auto bytes = original;
        bytes[4] = 9;
        spit(file.path, bytes);
        CHECK_THROWS_WITH_AS(load_checkpoint(file.path),
                             "checkpoint version 9 unsupported, this build reads version 1",
                             IntegrityError);
    }
    SUBCASE("alien magic is refused") {
        auto bytes = original;
        bytes[0] = 'X';
        spit(file.path, bytes);
        CHECK_THROWS_AS(load_checkpoint(file.path), IntegrityError);
    }
    SUBCASE("missing file is a data error") {
        CHECK_THROWS_AS(load_checkpoint("/tmp/modmt_no_such_file.bin"), DataError);
    }
}

TEST_CASE("language export round-trips into another registry") {
    TempFile file("module.bin");
    auto r = two_language_registry(5);
    r.encoder("xa").embedding()->tensor.data()[0] = 2.5f;
    export_language(r, "xa", file.path);

    Registry other(99);
    const std::string tag = import_language(other, file.path);
    CHECK(tag == "xa");
    CHECK(other.fingerprint_of("xa") == r.fingerprint_of("xa"));
    CHECK(encode(other.tokenizer("xa"), "ab") == encode(r.tokenizer("xa"), "ab"));

    CHECK_THROWS_AS(import_language(other, file.path), ConfigError);
    CHECK_THROWS_AS(load_checkpoint(file.path), IntegrityError);
    CHECK_THROWS_AS(export_language(r, "zz", file.path), ConfigError);
}

TEST_CASE("optimizer snapshots resume identically") {
    auto make_params = [] {
        std::vector<ParamPtr> out;
        Rng rng(3);
        for (int i = 0; i < 2; ++i) {
            Tensorf t = Tensorf::zeros({4});
            for (std::size_t j = 0; j < 4; ++j) {
                t[j] = static_cast<float>(rng.uniform(-1.0, 1.0));
            }
            out.push_back(std::make_shared<Parameter<float>>(t, "p" + std::to_string(i)));
        }
        return out;
    };
    auto grads = [](const std::vector<ParamPtr>& params, float v) {
        for (const auto& p : params) {
            std::vector<float> g(p->tensor.numel(), v);
            p->tensor.accumulate_grad(g.data(), g.size());
        }
    };

    auto pa = make_params();
    auto pb = make_params();
    Adam oa({1e-2, 5});
    Adam ob({1e-2, 5});
    for (int step = 0; step < 3; ++step) {
        grads(pa, 0.3f + step);
        oa.step(pa);
        grads(pb, 0.3f + step);
        ob.step(pb);
    }
    Adam resumed = Adam::from_snapshot(ob.snapshot(pb), pb);
    CHECK(resumed.steps_taken() == 3);
    for (int step = 3; step < 6; ++step) {
        grads(pa, 0.3f + step);
        oa.step(pa);
        grads(pb, 0.3f + step);
        resumed.step(pb);
    }
    for (std::size_t i = 0; i < pa.size(); ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(pa[i]->tensor[j] == pb[i]->tensor[j]);
        }
    }
}
