// SPDX-License-Identifier: Apache-2.0
//
// Joint multilingual training. One training step walks source index i
// and target index j in registration order, visits every scheduled
// direction (i,j), and applies one optimizer update per visit using
// only the parameters of e_i and d_j. Incremental language addition
// reuses the same loop with a one-direction schedule and the anchor
// module frozen; digests of every pre-existing parameter are verified
// before the call returns.

#pragma once

#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "modmt/corpus.hpp"
#include "modmt/optimizer.hpp"
#include "modmt/registry.hpp"
#include "modmt/transformer.hpp"

namespace modmt {

using Direction = std::pair<std::string, std::string>;

inline std::string direction_name(const Direction& d) { return d.first + "->" + d.second; }

struct TrainingSchedule {
    std::vector<Direction> directions;

    static TrainingSchedule all_pairs(const Registry& r) {
        TrainingSchedule s;
        for (const auto& src : r.languages()) {
            for (const auto& tgt : r.languages()) {
                if (src != tgt) s.directions.push_back({src, tgt});
            }
        }
        return s;
    }

    void validate(const Registry& r) const {
        if (directions.empty()) throw ConfigError("schedule has no directions");
        std::set<Direction> seen;
        for (const auto& d : directions) {
            if (!r.has(d.first) || !r.has(d.second)) {
                throw ConfigError("schedule direction " + direction_name(d) +
                                  " names an unregistered language");
            }
            if (!seen.insert(d).second) {
                throw ConfigError("schedule lists " + direction_name(d) + " twice");
            }
        }
    }

    // Membership-tested nested iteration: outer source, inner target,
    // both in registration order.
    std::vector<Direction> visit_order(const Registry& r) const {
        std::set<Direction> members(directions.begin(), directions.end());
        std::vector<Direction> out;
        for (const auto& src : r.languages()) {
            for (const auto& tgt : r.languages()) {
                if (members.count({src, tgt})) out.push_back({src, tgt});
            }
        }
        return out;
    }

    std::string describe() const {
        std::string out;
        for (const auto& d : directions) {
            if (!out.empty()) out += ", ";
            out += direction_name(d);
        }
        return out;
    }
};

// Per-direction data: training pairs cycled in epochs (re-batched with
// an epoch-indexed seed) plus a fixed validation batching.
class DirectionData {
  public:
    DirectionData() = default;

    DirectionData(std::vector<EncodedPair> train, std::vector<EncodedPair> val,
                  std::size_t token_budget, std::uint64_t seed, std::string src_lang = "",
                  std::string tgt_lang = "")
        : train_(std::move(train)),
          val_(std::move(val)),
          budget_(token_budget),
          seed_(seed),
          src_lang_(std::move(src_lang)),
          tgt_lang_(std::move(tgt_lang)) {
        if (train_.empty()) {
            throw ConfigError("direction " + src_lang_ + "->" + tgt_lang_ +
                              " has no training pairs");
        }
        if (val_.empty()) {
            throw ConfigError("direction " + src_lang_ + "->" + tgt_lang_ +
                              " has no validation pairs");
        }
    }

    const ParallelBatch& next_train() {
        if (cursor_ >= batches_.size()) {
            batches_ = make_batches(train_, budget_, mix_seed(seed_, epoch_), src_lang_,
                                    tgt_lang_);
            cursor_ = 0;
            ++epoch_;
        }
        return batches_[cursor_++];
    }

    const std::vector<ParallelBatch>& val_batches() const {
        if (val_batches_.empty()) {
            val_batches_ = make_batches(val_, budget_, mix_seed(seed_, 0x76616c), src_lang_,
                                        tgt_lang_);
        }
        return val_batches_;
    }

    std::size_t train_pairs() const { return train_.size(); }
    std::size_t val_pairs() const { return val_.size(); }

  private:
    std::vector<EncodedPair> train_;
    std::vector<EncodedPair> val_;
    std::size_t budget_ = 0;
    std::uint64_t seed_ = 0;
    std::string src_lang_, tgt_lang_;
    std::vector<ParallelBatch> batches_;
    std::size_t cursor_ = 0;
    std::uint64_t epoch_ = 0;
    mutable std::vector<ParallelBatch> val_batches_;
};

class DataPool {
  public:
    void add(const std::string& src, const std::string& tgt, DirectionData data) {
        pool_[{src, tgt}] = std::move(data);
    }

    bool has(const Direction& d) const { return pool_.count(d) != 0; }

    DirectionData& at(const Direction& d) {
        auto it = pool_.find(d);
        if (it == pool_.end()) {
            throw ConfigError("no data source for direction " + direction_name(d));
        }
        return it->second;
    }

  private:
    std::map<Direction, DirectionData> pool_;
};

inline std::vector<EncodedPair> encode_pairs(const BpeModel& src_bpe, const BpeModel& tgt_bpe,
                                             const std::vector<std::string>& src,
                                             const std::vector<std::string>& tgt,
                                             std::size_t begin, std::size_t end) {
    if (src.size() != tgt.size()) {
        throw ContractError("parallel lists differ: " + std::to_string(src.size()) + " vs " +
                            std::to_string(tgt.size()));
    }
    if (end > src.size() || begin > end) {
        throw ContractError("pair range [" + std::to_string(begin) + ", " + std::to_string(end) +
                            ") exceeds " + std::to_string(src.size()) + " sentences");
    }
    std::vector<EncodedPair> out;
    out.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
        out.push_back({encode(src_bpe, src[i]), encode(tgt_bpe, tgt[i])});
    }
    return out;
}

struct StopCriterion {
    std::size_t patience = 5;
    std::size_t interval = 200;
};

struct DirectionVisit {
    std::string src;
    std::string tgt;
    float loss = 0.0f;
};

struct EvalRecord {
    std::uint64_t step = 0;
    double val_loss = 0.0;
    double lr = 0.0;
    std::map<std::string, float> train_loss;
    bool improved = false;
};

struct TrainReport {
    std::vector<float> loss_trace;  // mean train loss per step
    std::vector<EvalRecord> evals;
    std::string stop_reason;
    std::uint64_t steps = 0;
    std::uint64_t best_step = 0;
    double best_val = std::numeric_limits<double>::infinity();
    bool diverged = false;

    std::string to_text() const {
        std::ostringstream out;
        for (const auto& e : evals) {
            out << "step=" << e.step << " lr=" << e.lr << " val=" << e.val_loss;
            for (const auto& [name, loss] : e.train_loss) out << " " << name << "=" << loss;
            if (e.improved) out << " *";
            out << "\n";
        }
        out << "stop_reason=" << stop_reason << " steps=" << steps << " best_step=" << best_step
            << " best_val=" << best_val << "\n";
        return out.str();
    }
};

namespace trainer_detail {

using ParamSnapshot = std::vector<std::pair<ParamPtr, std::vector<float>>>;

inline ParamSnapshot snapshot_params(const Registry& r) {
    ParamSnapshot snap;
    for (const auto& p : r.all_parameters()) {
        const float* d = p->tensor.data();
        snap.push_back({p, std::vector<float>(d, d + p->tensor.numel())});
    }
    return snap;
}

inline void restore_params(const ParamSnapshot& snap) {
    for (const auto& [p, values] : snap) {
        std::copy(values.begin(), values.end(), p->tensor.data());
    }
}

inline std::size_t count_labels(const ParallelBatch& batch) {
    std::size_t real = 0;
    for (auto m : batch.tgt_mask) real += m;
    return real - batch.rows;  // first target position is bos, never a label
}

inline std::vector<ParamPtr> direction_params(Registry& r, const Direction& d) {
    std::vector<ParamPtr> params = r.encoder(d.first).parameters();
    for (auto& p : r.decoder(d.second).parameters()) params.push_back(std::move(p));
    return params;
}

}  // namespace trainer_detail

// Validation loss for one direction: token-weighted mean over the whole
// validation set, dropout off.
inline double direction_val_loss(Registry& r, const Direction& d, DirectionData& data) {
    const auto& enc = r.encoder(d.first);
    const auto& dec = r.decoder(d.second);
    double sum = 0.0;
    std::size_t labels = 0;
    for (const auto& batch : data.val_batches()) {
        Tapef tape(Tapef::no_record);
        auto loss = forward_teacher_forced(tape, enc, dec, batch, false, 0);
        const std::size_t n = trainer_detail::count_labels(batch);
        sum += static_cast<double>(loss.value()) * static_cast<double>(n);
        labels += n;
    }
    if (labels == 0) throw ContractError("validation set for " + direction_name(d) + " is empty");
    return sum / static_cast<double>(labels);
}

// One Algorithm-1 step: per scheduled direction, one batch, one
// forward/backward, one optimizer update touching only e_src and d_tgt.
inline std::vector<DirectionVisit> multilingual_training_step(Registry& r,
                                                              const TrainingSchedule& sched,
                                                              DataPool& data, Adam& opt,
                                                              std::uint64_t step_seed) {
    sched.validate(r);
    const auto visits = sched.visit_order(r);
    for (const auto& d : visits) {
        if (!data.has(d)) {
            throw ConfigError("no data source for direction " + direction_name(d));
        }
    }

    std::vector<DirectionVisit> out;
    out.reserve(visits.size());
    std::uint64_t visit_index = 0;
    for (const auto& d : visits) {
        const auto& batch = data.at(d).next_train();
        Tapef tape;
        auto loss = forward_teacher_forced(tape, r.encoder(d.first), r.decoder(d.second), batch,
                                           true, mix_seed(step_seed, ++visit_index));
        // a fully frozen direction still reports its loss, but there is
        // no graph to walk and nothing to update
        if (loss.requires_grad()) {
            tape.backward(loss);
            opt.step(trainer_detail::direction_params(r, d));
        }
        r.record_direction(d.first, d.second);
        out.push_back({d.first, d.second, loss.value()});
    }
    return out;
}

struct JointOptions {
    std::uint64_t max_steps = 10000;
    StopCriterion stop{};
    std::string checkpoint_path;  // best state saved here when non-empty
    // called at every evaluation; returning true ends training with the
    // current (not best-val) parameters kept
    std::function<bool(Registry&, std::uint64_t)> stop_probe;
};

inline TrainReport train_joint(Registry& r, const TrainingSchedule& sched, DataPool& data,
                               Adam& opt, const JointOptions& opts) {
    using namespace trainer_detail;
    sched.validate(r);
    for (const auto& d : sched.visit_order(r)) {
        if (!data.has(d)) {
            throw ConfigError("no data source for direction " + direction_name(d));
        }
    }
    for (const auto& d : sched.directions) r.record_direction(d.first, d.second);

    TrainReport report;
    ParamSnapshot best = snapshot_params(r);
    std::uint64_t best_steps_done = r.steps_done();
    std::size_t bad_evals = 0;
    bool keep_current = false;

    auto save_best = [&]() {
        if (!opts.checkpoint_path.empty()) {
            const auto snap = opt.snapshot(r.all_parameters());
            save_checkpoint(r, opts.checkpoint_path, &snap, sched.describe());
        }
    };

    std::uint64_t step = 0;
    try {
        for (; step < opts.max_steps; ++step) {
            const std::uint64_t round = r.steps_done() + 1;
            const auto visits = multilingual_training_step(r, sched, data, opt,
                                                           mix_seed(r.seed(), 0x73746570, round));
            r.set_steps_done(round);
            float mean = 0.0f;
            for (const auto& v : visits) mean += v.loss;
            mean /= static_cast<float>(visits.size());
            report.loss_trace.push_back(mean);
            report.steps = step + 1;

            if ((step + 1) % opts.stop.interval != 0 && step + 1 != opts.max_steps) continue;

            EvalRecord ev;
            ev.step = round;
            ev.lr = opt.last_lr();
            for (const auto& v : visits) ev.train_loss[v.src + "->" + v.tgt] = v.loss;
            double val = 0.0;
            for (const auto& d : sched.visit_order(r)) {
                val += direction_val_loss(r, d, data.at(d));
            }
            val /= static_cast<double>(sched.directions.size());
            ev.val_loss = val;

            if (val < report.best_val) {
                report.best_val = val;
                report.best_step = round;
                best = snapshot_params(r);
                best_steps_done = round;
                ev.improved = true;
                bad_evals = 0;
            } else {
                ++bad_evals;
            }
            report.evals.push_back(ev);

            if (opts.stop_probe && opts.stop_probe(r, round)) {
                report.stop_reason = "target_metric";
                keep_current = true;
                break;
            }
            if (bad_evals >= opts.stop.patience) {
                report.stop_reason = "early_stop";
                break;
            }
        }
    } catch (const DivergenceError&) {
        report.diverged = true;
        report.stop_reason = "diverged";
        restore_params(best);
        r.set_steps_done(best_steps_done);
        save_best();
        return report;
    }

    if (report.stop_reason.empty()) report.stop_reason = "max_steps";
    if (!keep_current) {
        restore_params(best);
        r.set_steps_done(best_steps_done);
    }
    save_best();
    return report;
}

// ---------------------------------------------------------------------------
// Incremental language addition. The anchor side freezes, a schedule over
// the new-language direction(s) trains the new module(s), and every
// pre-existing parameter digest is verified unchanged before returning.
// ---------------------------------------------------------------------------
namespace trainer_detail {

inline void check_add_preconditions(Registry& r, const std::string& new_lang,
                                    const std::string& anchor) {
    if (new_lang == anchor) {
        throw ConfigError("new language and anchor are both '" + anchor + "'");
    }
    r.entry(new_lang);
    r.entry(anchor);
    bool anchor_trained = false;
    for (const auto& [src, tgt] : r.history()) {
        if (src == anchor || tgt == anchor) anchor_trained = true;
    }
    if (!anchor_trained) {
        throw ConfigError("anchor '" + anchor + "' has no training history");
    }
}

inline TrainReport add_language_run(Registry& r, const std::vector<Direction>& dirs,
                                    const std::string& new_lang, DataPool& data, Adam& opt,
                                    const JointOptions& opts) {
    std::map<std::string, std::map<std::string, std::string>> before;
    for (const auto& lang : r.languages()) {
        if (lang != new_lang) before[lang] = r.fingerprint_of(lang);
    }

    TrainingSchedule sched;
    sched.directions = dirs;
    TrainReport report = train_joint(r, sched, data, opt, opts);

    for (const auto& [lang, digests] : before) {
        const auto after = r.fingerprint_of(lang);
        for (const auto& [name, hex] : digests) {
            if (after.at(name) != hex) {
                throw IntegrityError("frozen-module drift: parameter '" + name +
                                     "' changed during add-language training");
            }
        }
    }
    return report;
}

}  // namespace trainer_detail

inline TrainReport add_language_encoder(Registry& r, const std::string& new_lang,
                                        const std::string& anchor, DataPool& data, Adam& opt,
                                        const JointOptions& opts) {
    trainer_detail::check_add_preconditions(r, new_lang, anchor);
    r.freeze(anchor, ModuleRole::decoder);
    return trainer_detail::add_language_run(r, {{new_lang, anchor}}, new_lang, data, opt, opts);
}

inline TrainReport add_language_decoder(Registry& r, const std::string& new_lang,
                                        const std::string& anchor, DataPool& data, Adam& opt,
                                        const JointOptions& opts) {
    trainer_detail::check_add_preconditions(r, new_lang, anchor);
    r.freeze(anchor, ModuleRole::encoder);
    return trainer_detail::add_language_run(r, {{anchor, new_lang}}, new_lang, data, opt, opts);
}

// Trains the new encoder and decoder together on both directions against a
// fully frozen anchor. With tied embeddings this is the only order-safe way
// to get both directions: training the two modules one after the other lets
// the second phase shift the shared table under the first.
inline TrainReport add_language_bidirectional(Registry& r, const std::string& new_lang,
                                              const std::string& anchor, DataPool& data,
                                              Adam& opt, const JointOptions& opts) {
    trainer_detail::check_add_preconditions(r, new_lang, anchor);
    r.freeze(anchor, ModuleRole::encoder);
    r.freeze(anchor, ModuleRole::decoder);
    return trainer_detail::add_language_run(r, {{new_lang, anchor}, {anchor, new_lang}}, new_lang,
                                            data, opt, opts);
}

// Shared-baseline comparison mode: one universal language whose source
// sentences carry target-language tag tokens; the diagonal direction is
// the entire schedule.
inline TrainReport train_shared_baseline(Registry& r, const std::string& uni_lang, DataPool& data,
                                         Adam& opt, const JointOptions& opts) {
    r.entry(uni_lang);
    TrainingSchedule sched;
    sched.directions.push_back({uni_lang, uni_lang});
    return train_joint(r, sched, data, opt, opts);
}

}  // namespace modmt
