// SPDX-License-Identifier: Apache-2.0

// modmt: reproducible multilingual translation runs driven by a config
// file. One command per process; a lock file serializes writers sharing
// an output directory.

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "modmt/config.hpp"
#include "modmt/eval.hpp"

namespace fs = std::filesystem;
using namespace modmt;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    std::string checkpoint_path;
    std::optional<std::uint64_t> seed_init;
    std::optional<std::uint64_t> seed_data;
    std::optional<std::uint64_t> max_steps;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "run config file (INI)");
    cmd->add_option("--out", f.out_dir, "output directory (overrides [run] output_dir)");
    cmd->add_option("--checkpoint", f.checkpoint_path,
                    "checkpoint path (default <out>/checkpoint.mnmt)");
    cmd->add_option("--seed-init", f.seed_init, "override parameter-init seed");
    cmd->add_option("--seed-data", f.seed_data, "override data-order seed");
    cmd->add_option("--max-steps", f.max_steps, "override training step limit");
    cmd->add_flag("--force", f.force, "overwrite existing artifacts");
}

RunConfig load_config(const CommonFlags& f) {
    if (f.config_path.empty()) throw ConfigError("--config is required for this command");
    RunConfig c = load_run_config(f.config_path);
    if (!f.out_dir.empty()) c.output_dir = f.out_dir;
    if (f.seed_init) c.seed_init = *f.seed_init;
    if (f.seed_data) c.seed_data = *f.seed_data;
    if (f.max_steps) c.max_steps = *f.max_steps;
    if (c.output_dir.empty()) {
        throw ConfigError("no output directory: set output_dir under [run] or pass --out");
    }
    return c;
}

std::string resolve_out(const CommonFlags& f) {
    if (!f.out_dir.empty()) return f.out_dir;
    if (!f.config_path.empty()) {
        const std::string dir = load_run_config(f.config_path).output_dir;
        if (!dir.empty()) return dir;
    }
    throw ConfigError("no output directory: pass --out or a config with output_dir");
}

std::string resolve_checkpoint(const CommonFlags& f) {
    if (!f.checkpoint_path.empty()) return f.checkpoint_path;
    return resolve_out(f) + "/checkpoint.mnmt";
}

// Exclusive-create lock file, removed on scope exit.
class DirLock {
  public:
    explicit DirLock(const std::string& dir) : path_(dir + "/.lock") {
        fs::create_directories(dir);
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0) {
            throw DataError("output directory " + dir + " is locked (" + path_ +
                            " exists); remove it if no other command is running");
        }
        const std::string pid = std::to_string(::getpid()) + "\n";
        const ssize_t n = ::write(fd, pid.c_str(), pid.size());
        (void)n;
        ::close(fd);
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

  private:
    std::string path_;
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return buf.str();
}

void spit(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    f << text;
}

std::string corpus_dir(const RunConfig& c) { return c.output_dir + "/corpus"; }

std::string lang_file(const std::string& dir, const std::string& tag) {
    return dir + "/" + tag + ".txt";
}

std::vector<std::string> language_lines(const RunConfig& c, const LanguageSource& src) {
    const std::string path =
        src.synthetic() ? lang_file(corpus_dir(c), src.spec.language) : src.corpus_path;
    if (src.synthetic() && !fs::exists(path)) {
        throw DataError("no corpus file " + path + "; run gen-corpus first");
    }
    auto lines = read_lines(path);
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    if (lines.empty()) throw DataError("corpus file " + path + " is empty");
    return lines;
}

struct PreparedData {
    std::map<std::string, std::vector<std::string>> lines;
    SplitRanges split;
    std::size_t n = 0;
};

PreparedData prepare_lines(const RunConfig& c, const std::vector<std::string>& tags) {
    PreparedData out;
    for (const auto& tag : tags) {
        auto lines = language_lines(c, c.language(tag));
        if (out.n == 0) {
            out.n = lines.size();
        } else if (lines.size() != out.n) {
            throw DataError("corpus sizes differ: language \"" + tag + "\" has " +
                            std::to_string(lines.size()) + " sentences, expected " +
                            std::to_string(out.n));
        }
        out.lines[tag] = std::move(lines);
    }
    out.split = split_ranges(out.n);
    return out;
}

void register_from_lines(Registry& r, const RunConfig& c, const PreparedData& data,
                         const std::string& tag) {
    const auto& lines = data.lines.at(tag);
    std::vector<std::string> train(lines.begin(), lines.begin() + data.split.train_end);
    r.register_language(tag, c.model, learn_bpe(train, c.bpe_vocab, tag));
}

void pool_direction(DataPool& pool, Registry& r, const RunConfig& c, const PreparedData& data,
                    const Direction& d) {
    if (pool.has(d)) return;
    const auto& src = data.lines.at(d.first);
    const auto& tgt = data.lines.at(d.second);
    auto train = encode_pairs(r.tokenizer(d.first), r.tokenizer(d.second), src, tgt, 0,
                              data.split.train_end);
    auto val = encode_pairs(r.tokenizer(d.first), r.tokenizer(d.second), src, tgt,
                            data.split.test_end, data.n);
    pool.add(d.first, d.second,
             DirectionData(std::move(train), std::move(val), c.token_budget,
                           mix_seed(c.seed_data, fnv1a(d.first), fnv1a(d.second)), d.first,
                           d.second));
}

// -----------------------------------------------------------------------
// gen-corpus
// -----------------------------------------------------------------------
int cmd_gen_corpus(const CommonFlags& flags) {
    RunConfig c = load_config(flags);
    const auto specs = c.synthetic_specs();
    if (specs.empty()) {
        throw ConfigError("gen-corpus: config has no synthetic language specs");
    }
    DirLock lock(c.output_dir);
    const std::string dir = corpus_dir(c);
    if (fs::exists(dir) && !flags.force) {
        throw DataError("corpus directory " + dir + " already exists; pass --force to rewrite");
    }
    fs::create_directories(dir);
    auto corpus =
        generate_synthetic(specs, c.sentences, c.latent_vocab, c.min_len, c.max_len, c.seed_data);
    for (const auto& s : specs) {
        write_lines(lang_file(dir, s.language), corpus.sentences(s.language));
    }
    spit(dir + "/manifest.json", manifest_text(corpus, c.sentences));
    std::cout << "wrote " << specs.size() << " languages x " << c.sentences << " sentences to "
              << dir << "\n";
    return 0;
}

// -----------------------------------------------------------------------
// init-train
// -----------------------------------------------------------------------
int cmd_init_train(const CommonFlags& flags) {
    RunConfig c = load_config(flags);
    DirLock lock(c.output_dir);

    std::vector<std::string> tags;
    for (const auto& l : c.languages) tags.push_back(l.spec.language);
    const auto data = prepare_lines(c, tags);

    Registry r(c.seed_init);
    for (const auto& tag : tags) register_from_lines(r, c, data, tag);

    TrainingSchedule sched;
    sched.directions = c.directions();
    sched.validate(r);

    DataPool pool;
    for (const auto& d : sched.directions) pool_direction(pool, r, c, data, d);

    Adam opt(c.optimizer);
    JointOptions opts;
    opts.max_steps = c.max_steps;
    opts.stop = c.stop;
    opts.checkpoint_path = c.output_dir + "/checkpoint.mnmt";

    const auto report = train_joint(r, sched, pool, opt, opts);
    spit(c.output_dir + "/train_report.txt", report.to_text());
    spit(c.output_dir + "/run_config.ini", format_run_config(c));
    std::cout << report.to_text() << "checkpoint: " << opts.checkpoint_path << "\n";
    if (report.diverged) {
        std::cerr << "training diverged; checkpoint holds the best pre-divergence state\n";
        return 3;
    }
    return 0;
}

// -----------------------------------------------------------------------
// add-language
// -----------------------------------------------------------------------
void ensure_new_lang_corpus(const RunConfig& c, const std::string& tag) {
    const auto& src = c.language(tag);
    if (!src.synthetic()) return;
    const std::string dir = corpus_dir(c);
    const std::string path = lang_file(dir, tag);
    if (fs::exists(path)) return;
    const std::string manifest_path = dir + "/manifest.json";
    if (!fs::exists(manifest_path)) {
        throw DataError("no corpus manifest " + manifest_path + "; run gen-corpus first");
    }
    auto base = corpus_from_manifest(slurp(manifest_path));
    const std::size_t n = base.text.begin()->second.size();
    auto specs = base.specs;
    bool present = false;
    for (const auto& s : specs) present = present || s.language == tag;
    if (!present) specs.push_back(src.spec);
    auto extended =
        generate_synthetic(specs, n, base.latent_vocab, base.len_lo, base.len_hi, base.seed);
    write_lines(path, extended.sentences(tag));
    spit(manifest_path, manifest_text(extended, n));
}

int cmd_add_language(const CommonFlags& flags, const std::string& new_lang,
                     const std::string& anchor, const std::string& phase) {
    RunConfig c = load_config(flags);
    const std::string cp_path =
        flags.checkpoint_path.empty() ? c.output_dir + "/checkpoint.mnmt" : flags.checkpoint_path;
    if (!c.has_language(new_lang)) {
        throw ConfigError("config has no [lang." + new_lang + "] section");
    }
    DirLock lock(c.output_dir);

    Checkpoint cp = load_checkpoint(cp_path);
    Registry& r = cp.registry;
    if (!r.has(anchor)) throw ConfigError("anchor language \"" + anchor + "\" not in checkpoint");
    if (r.has(new_lang)) {
        throw ConfigError("language \"" + new_lang + "\" is already in the checkpoint");
    }

    ensure_new_lang_corpus(c, new_lang);
    const auto data = prepare_lines(c, {new_lang, anchor});
    register_from_lines(r, c, data, new_lang);

    std::map<std::string, std::map<std::string, std::string>> before;
    for (const auto& lang : r.languages()) {
        if (lang != new_lang) before[lang] = r.fingerprint_of(lang);
    }

    DataPool pool;
    if (phase != "dec") pool_direction(pool, r, c, data, {new_lang, anchor});
    if (phase != "enc") pool_direction(pool, r, c, data, {anchor, new_lang});

    JointOptions opts;
    opts.max_steps = c.max_steps;
    opts.stop = c.stop;

    std::ostringstream text;
    OptimizerSnapshot snap;
    Adam opt(c.optimizer);
    if (phase == "enc") {
        const auto rep = add_language_encoder(r, new_lang, anchor, pool, opt, opts);
        text << "phase encoder " << new_lang << "->" << anchor << "\n" << rep.to_text();
    } else if (phase == "dec") {
        const auto rep = add_language_decoder(r, new_lang, anchor, pool, opt, opts);
        text << "phase decoder " << anchor << "->" << new_lang << "\n" << rep.to_text();
    } else {
        const auto rep = add_language_bidirectional(r, new_lang, anchor, pool, opt, opts);
        text << "phase bidirectional " << new_lang << "<->" << anchor << "\n" << rep.to_text();
    }
    snap = opt.snapshot(r.all_parameters());

    text << "freeze verification\n";
    std::size_t changed_total = 0;
    for (const auto& [lang, fp] : before) {
        const auto after = r.fingerprint_of(lang);
        std::size_t changed = 0;
        for (const auto& [name, hex] : fp) {
            auto it = after.find(name);
            if (it == after.end() || it->second != hex) ++changed;
        }
        changed_total += changed;
        text << "  " << lang << ": " << fp.size() << " parameters, " << changed
             << " changed digests\n";
    }
    spit(c.output_dir + "/add_" + new_lang + "_report.txt", text.str());
    std::cout << text.str();
    if (changed_total != 0) {
        throw IntegrityError("frozen-module drift: " + std::to_string(changed_total) +
                             " pre-existing parameter digest(s) changed");
    }
    save_checkpoint(r, cp_path, &snap, cp.schedule_desc + " + add " + new_lang);
    std::cout << "checkpoint: " << cp_path << "\n";
    return 0;
}

// -----------------------------------------------------------------------
// translate
// -----------------------------------------------------------------------
int cmd_translate(const CommonFlags& flags, const std::string& src, const std::string& tgt,
                  const std::string& input, std::size_t max_len) {
    Checkpoint cp = load_checkpoint(resolve_checkpoint(flags));
    Registry& r = cp.registry;
    r.entry(src);
    r.entry(tgt);
    if (!r.direction_trained(src, tgt)) {
        std::cerr << "note: " << src << "->" << tgt
                  << " was never trained; zero-shot composition\n";
    }
    std::vector<std::string> lines;
    if (input.empty() || input == "-") {
        std::string line;
        while (std::getline(std::cin, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            lines.push_back(line);
        }
    } else {
        lines = read_lines(input);
    }
    for (const auto& out : translate_corpus(r, src, tgt, lines, max_len)) {
        std::cout << out << "\n";
    }
    return 0;
}

// -----------------------------------------------------------------------
// evaluate
// -----------------------------------------------------------------------
int cmd_evaluate(const CommonFlags& flags, std::size_t max_len) {
    const std::string out_dir = resolve_out(flags);
    Checkpoint cp = load_checkpoint(resolve_checkpoint(flags));
    Registry& r = cp.registry;

    std::optional<RunConfig> c;
    if (!flags.config_path.empty()) {
        c = load_run_config(flags.config_path);
        if (!flags.out_dir.empty()) c->output_dir = flags.out_dir;
    }

    std::map<std::string, std::vector<std::string>> tests;
    for (const auto& lang : r.languages()) {
        std::string path = out_dir + "/corpus/" + lang + ".txt";
        if (c && c->has_language(lang) && !c->language(lang).synthetic()) {
            path = c->language(lang).corpus_path;
        }
        if (!fs::exists(path)) continue;
        auto lines = read_lines(path);
        while (!lines.empty() && lines.back().empty()) lines.pop_back();
        if (lines.size() < 20) continue;
        const auto split = split_ranges(lines.size());
        tests[lang] = std::vector<std::string>(lines.begin() + split.train_end,
                                               lines.begin() + split.test_end);
    }

    const auto reports = evaluate_matrix(r, tests, max_len);
    const std::string table = matrix_table(reports);
    DirLock lock(out_dir);
    spit(out_dir + "/matrix.txt", table);
    spit(out_dir + "/matrix.jsonl", matrix_jsonl(reports));
    std::cout << table;
    return 0;
}

// -----------------------------------------------------------------------
// inspect-checkpoint
// -----------------------------------------------------------------------
int cmd_inspect(const CommonFlags& flags) {
    const std::string path = resolve_checkpoint(flags);
    Checkpoint cp = load_checkpoint(path);
    Registry& r = cp.registry;
    std::cout << "checkpoint: " << path << "\n";
    std::cout << "seed_init: " << r.seed() << "\n";
    std::cout << "steps_done: " << r.steps_done() << "\n";
    std::cout << "schedule: " << (cp.schedule_desc.empty() ? "(none)" : cp.schedule_desc) << "\n";
    std::cout << "optimizer: " << (cp.has_optimizer ? "present" : "absent") << "\n";
    std::cout << "languages: " << r.languages().size() << "\n";
    for (const auto& lang : r.languages()) {
        const auto& e = r.entry(lang);
        const auto params = r.language_parameters(lang);
        std::size_t scalars = 0;
        for (const auto& p : params) scalars += p->tensor.numel();
        Sha256 h;
        for (const auto& [name, hex] : r.fingerprint_of(lang)) {
            h.update(name.data(), name.size());
            h.update(hex.data(), hex.size());
        }
        std::cout << "  " << lang << ": layers=" << e.config.layers
                  << " model_dim=" << e.config.model_dim << " heads=" << e.config.heads
                  << " vocab=" << e.config.vocab_size
                  << " tied=" << (e.config.tied_embeddings ? "yes" : "no")
                  << " frozen_enc=" << (e.frozen_enc ? "yes" : "no")
                  << " frozen_dec=" << (e.frozen_dec ? "yes" : "no") << " params=" << params.size()
                  << " scalars=" << scalars << " digest=" << digest_hex(h.finish()).substr(0, 12)
                  << "\n";
    }
    std::cout << "history: " << r.history().size() << " directions\n";
    for (const auto& [src, tgt] : r.history()) std::cout << "  " << src << "->" << tgt << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"modular multilingual translation: per-language encoders and decoders"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::string new_lang, anchor, phase = "both";
    std::string src, tgt, input;
    std::size_t max_len = 48;

    auto* gen = app.add_subcommand("gen-corpus", "generate synthetic parallel corpora");
    add_common(gen, flags);

    auto* train = app.add_subcommand("init-train", "joint training over the schedule");
    add_common(train, flags);

    auto* add = app.add_subcommand("add-language", "train a new language against an anchor");
    add_common(add, flags);
    add->add_option("--new-lang", new_lang, "language tag to add")->required();
    add->add_option("--anchor", anchor, "existing language to pair with")->required();
    add->add_option("--direction", phase, "which new module to train")
        ->check(CLI::IsMember({"enc", "dec", "both"}));

    auto* tr = app.add_subcommand("translate", "translate lines from a file or stdin");
    add_common(tr, flags);
    tr->add_option("--src", src, "source language tag")->required();
    tr->add_option("--tgt", tgt, "target language tag")->required();
    tr->add_option("--input", input, "input file (default stdin)");
    tr->add_option("--max-len", max_len, "generation length cap");

    auto* ev = app.add_subcommand("evaluate", "score every direction on the test split");
    add_common(ev, flags);
    ev->add_option("--max-len", max_len, "generation length cap");

    auto* ins = app.add_subcommand("inspect-checkpoint", "print checkpoint contents");
    add_common(ins, flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_corpus(flags);
        if (train->parsed()) return cmd_init_train(flags);
        if (add->parsed()) return cmd_add_language(flags, new_lang, anchor, phase);
        if (tr->parsed()) return cmd_translate(flags, src, tgt, input, max_len);
        if (ev->parsed()) return cmd_evaluate(flags, max_len);
        if (ins->parsed()) return cmd_inspect(flags);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 3;
    } catch (const IntegrityError& e) {
        std::cerr << "integrity failure: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
