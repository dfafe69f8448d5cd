#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pnca/errors.hpp"
#include "pnca/tensor.hpp"

namespace pnca {

enum class ScheduleKind { exponential, step_drop, constant };

/// Learning-rate schedule. exponential: base * gamma^epoch (per-epoch decay);
/// step_drop: base up to drop_epoch-1, base/drop_factor from drop_epoch on.
struct Schedule {
    ScheduleKind kind = ScheduleKind::exponential;
    double base_lr = 1e-4;
    double gamma = 0.94;
    int drop_epoch = 5;
    double drop_factor = 10.0;
};

inline double lr_at(const Schedule& s, int epoch) {
    if (epoch < 0) throw ContractError("lr_at: epoch must be >= 0");
    switch (s.kind) {
        case ScheduleKind::exponential: return s.base_lr * std::pow(s.gamma, epoch);
        case ScheduleKind::step_drop:
            return epoch < s.drop_epoch ? s.base_lr : s.base_lr / s.drop_factor;
        case ScheduleKind::constant: return s.base_lr;
    }
    throw ContractError("lr_at: unknown schedule kind");
}

inline ScheduleKind parse_schedule_kind(const std::string& name) {
    if (name == "exponential") return ScheduleKind::exponential;
    if (name == "step_drop") return ScheduleKind::step_drop;
    if (name == "constant") return ScheduleKind::constant;
    throw ConfigError("unknown schedule kind '" + name + "'");
}

/// Adam with bias correction. One slot of first/second moments per parameter,
/// shapes fixed at construction. A parameter without a grad buffer is treated
/// as zero-gradient for that step; non-finite gradients abort the run.
template <typename S>
class Adam {
public:
    explicit Adam(std::vector<Tensor<S>> params, S beta1 = S(0.9), S beta2 = S(0.999),
                  S eps = S(1e-8))
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        slots_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            slots_[i].m.assign(params_[i].size(), S(0));
            slots_[i].v.assign(params_[i].size(), S(0));
        }
    }

    void step(S lr) {
        ++t_;
        const S bc1 = S(1) - std::pow(beta1_, static_cast<S>(t_));
        const S bc2 = S(1) - std::pow(beta2_, static_cast<S>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            auto& slot = slots_[i];
            if (p.size() != slot.m.size())
                throw OptimError("adam: parameter " + std::to_string(i) +
                                 " changed shape since construction");
            if (!p.has_grad()) continue;
            const auto& g = p.grad();
            auto& x = p.data_mut();
            for (std::size_t j = 0; j < g.size(); ++j) {
                if (!std::isfinite(g[j]))
                    throw OptimError("adam: non-finite gradient in parameter " +
                                     std::to_string(i));
                slot.m[j] = beta1_ * slot.m[j] + (S(1) - beta1_) * g[j];
                slot.v[j] = beta2_ * slot.v[j] + (S(1) - beta2_) * g[j] * g[j];
                const S mhat = slot.m[j] / bc1;
                const S vhat = slot.v[j] / bc2;
                x[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::uint64_t steps() const { return t_; }
    const std::vector<Tensor<S>>& params() const { return params_; }

private:
    struct Slot {
        std::vector<S> m, v;
    };
    std::vector<Tensor<S>> params_;
    std::vector<Slot> slots_;
    std::uint64_t t_ = 0;
    S beta1_, beta2_, eps_;
};

}  // namespace pnca
