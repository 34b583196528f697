#pragma once

// Adam with the inverse-square-root warmup schedule.  The learning rate
// follows a global step counter (one increment per apply()), while bias
// correction is tracked per parameter so that modules which join the
// schedule late, or are visited only in some directions, still see a
// correctly warmed moment estimate.

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "modmt/common.hpp"
#include "modmt/tensor.hpp"

namespace modmt {

inline double lr_at(std::size_t step, double peak, std::size_t warmup) {
    if (step == 0) {
        throw ContractError("lr_at: step must be >= 1");
    }
    if (warmup == 0) {
        throw ConfigError("lr_at: warmup must be >= 1");
    }
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup);
    return peak * std::min(s / w, std::sqrt(w / s));
}

struct AdamConfig {
    double peak_lr = 1e-3;
    std::size_t warmup = 4000;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
};

struct AdamParamState {
    std::vector<float> m;
    std::vector<float> v;
    std::uint64_t t = 0;
};

// Name-keyed optimizer state for persistence. Moments of frozen
// parameters are dropped at snapshot time: a frozen module receives no
// updates, and stale moments would poison a later thaw.
struct OptimizerSnapshot {
    std::uint64_t global_step = 0;
    AdamConfig config;
    std::map<std::string, AdamParamState> params;
};

class Adam {
  public:
    explicit Adam(AdamConfig config = {}) : config_(config) {
        if (config_.peak_lr <= 0.0) {
            throw ConfigError("adam: peak_lr must be positive");
        }
        if (config_.warmup == 0) {
            throw ConfigError("adam: warmup must be >= 1");
        }
        if (config_.beta1 < 0.0 || config_.beta1 >= 1.0 ||
            config_.beta2 < 0.0 || config_.beta2 >= 1.0) {
            throw ConfigError("adam: betas must lie in [0, 1)");
        }
    }

    const AdamConfig& config() const { return config_; }
    std::size_t steps_taken() const { return step_; }
    double last_lr() const { return last_lr_; }

    // Applies one update to every trainable parameter that carries a
    // gradient, then consumes those gradients.  Frozen parameters are
    // skipped outright and never get moment buffers.
    void step(const std::vector<ParamPtr>& params) {
        ++step_;
        last_lr_ = lr_at(step_, config_.peak_lr, config_.warmup);
        for (const auto& param : params) {
            if (!param || !param->trainable) {
                continue;
            }
            if (!param->tensor.has_grad()) {
                continue;
            }
            update_one(*param);
            param->tensor.drop_grad();
        }
    }

    bool has_moments(const ParamPtr& param) const {
        return state_.find(param.get()) != state_.end();
    }

    void drop_moments(const ParamPtr& param) { state_.erase(param.get()); }

    OptimizerSnapshot snapshot(const std::vector<ParamPtr>& params) const {
        OptimizerSnapshot snap;
        snap.global_step = step_;
        snap.config = config_;
        for (const auto& param : params) {
            if (!param || !param->trainable) continue;
            auto it = state_.find(param.get());
            if (it == state_.end()) continue;
            AdamParamState st;
            st.m = it->second.m;
            st.v = it->second.v;
            st.t = it->second.t;
            snap.params[param->name] = std::move(st);
        }
        return snap;
    }

    static Adam from_snapshot(const OptimizerSnapshot& snap,
                              const std::vector<ParamPtr>& params) {
        Adam opt(snap.config);
        opt.step_ = snap.global_step;
        for (const auto& param : params) {
            if (!param) continue;
            auto it = snap.params.find(param->name);
            if (it == snap.params.end()) continue;
            if (it->second.m.size() != param->tensor.numel()) {
                throw IntegrityError("optimizer state for '" + param->name +
                                     "' does not match the parameter shape");
            }
            Moments slot;
            slot.m = it->second.m;
            slot.v = it->second.v;
            slot.t = it->second.t;
            opt.state_[param.get()] = std::move(slot);
        }
        return opt;
    }

  private:
    struct Moments {
        std::vector<float> m;
        std::vector<float> v;
        std::size_t t = 0;
    };

    void update_one(Parameter<float>& param) {
        auto& tensor = param.tensor;
        const std::size_t n = tensor.numel();
        auto& slot = state_[&param];
        if (slot.t == 0) {
            slot.m.assign(n, 0.0f);
            slot.v.assign(n, 0.0f);
        } else if (slot.m.size() != n) {
            throw ContractError("adam: parameter '" + param.name +
                                "' changed size under the optimizer");
        }
        slot.t += 1;

        const double b1 = config_.beta1;
        const double b2 = config_.beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(slot.t));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(slot.t));
        const double lr = last_lr_;
        const double eps = config_.eps;

        float* p = tensor.data();
        const auto& g = tensor.grad();
        float* m = slot.m.data();
        float* v = slot.v.data();
        for (std::size_t i = 0; i < n; ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = b1 * m[i] + (1.0 - b1) * gi;
            const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p[i] = static_cast<float>(p[i] - lr * mhat / (std::sqrt(vhat) + eps));
        }
    }

    AdamConfig config_;
    std::size_t step_ = 0;
    double last_lr_ = 0.0;
    std::unordered_map<Parameter<float>*, Moments> state_;
};

}  // namespace modmt
