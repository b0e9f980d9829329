#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vivid/common.hpp"
#include "vivid/tensor.hpp"

namespace vivid {

// Linear warmup from 0 to 1 over max(1, floor(warmup_frac * total)) steps,
// then cosine decay to ~0 at the final step. Returns the multiplier applied
// to a group's peak learning rate at step `step` (0-based) of `total`.
inline double schedule_factor(std::int64_t step, std::int64_t total, double warmup_frac) {
    if (total < 1) throw DomainError("schedule needs total >= 1");
    if (step < 0 || step >= total) throw DomainError("schedule step out of range");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0) {
        throw DomainError("warmup fraction must be in [0, 1)");
    }
    std::int64_t warm = static_cast<std::int64_t>(warmup_frac * static_cast<double>(total));
    if (warmup_frac > 0.0 && warm < 1) warm = 1;
    if (step < warm) return static_cast<double>(step) / static_cast<double>(warm);
    if (total == warm) return 1.0;
    const double progress =
        static_cast<double>(step - warm) / static_cast<double>(total - warm);
    return 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

// Decoupled weight decay Adam. Parameters are grouped so the vision encoder
// and the projector can run at different peak rates; moments live here, keyed
// by group/parameter order, and can be exported for checkpointing.
class AdamW {
public:
    struct Group {
        std::string name;
        std::vector<std::pair<std::string, TensorPtr>> params;
    };

    AdamW(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8, double weight_decay = 0.01)
        : groups_(std::move(groups)),
          beta1_(beta1),
          beta2_(beta2),
          eps_(eps),
          weight_decay_(weight_decay) {
        for (auto& g : groups_) {
            GroupState gs;
            for (auto& [name, t] : g.params) {
                gs.m.push_back(std::vector<double>(t->numel(), 0.0));
                gs.v.push_back(std::vector<double>(t->numel(), 0.0));
            }
            state_.push_back(std::move(gs));
        }
    }

    std::size_t num_groups() const { return groups_.size(); }
    const Group& group(std::size_t i) const { return groups_[i]; }
    std::int64_t step_count() const { return t_; }

    // Applies one update with per-group learning rates. If any gradient entry
    // is non-finite the step is rejected: no parameter or moment changes, the
    // step counter stays put, and the returned diagnostic names the tensor.
    struct StepResult {
        bool applied = false;
        std::string diagnostic;
    };

    StepResult step(const std::vector<double>& group_lrs) {
        if (group_lrs.size() != groups_.size()) {
            throw DomainError("expected " + std::to_string(groups_.size()) +
                              " learning rates, got " + std::to_string(group_lrs.size()));
        }
        for (const auto& g : groups_) {
            for (const auto& [name, t] : g.params) {
                for (double gv : t->grad) {
                    if (!std::isfinite(gv)) {
                        return {false, "non-finite gradient in " + name};
                    }
                }
            }
        }
        t_ += 1;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
            const double lr = group_lrs[gi];
            auto& gs = state_[gi];
            for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
                auto& t = groups_[gi].params[pi].second;
                auto& m = gs.m[pi];
                auto& v = gs.v[pi];
                for (std::size_t k = 0; k < t->numel(); ++k) {
                    const double g = t->grad[k];
                    m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
                    v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
                    const double mh = m[k] / bc1;
                    const double vh = v[k] / bc2;
                    t->values[k] -=
                        lr * (mh / (std::sqrt(vh) + eps_) + weight_decay_ * t->values[k]);
                }
            }
        }
        return {true, ""};
    }

    void zero_grad() {
        for (auto& g : groups_) {
            for (auto& [name, t] : g.params) t->zero_grad();
        }
    }

    // Moment tensors for checkpointing, named adam.m.<param> / adam.v.<param>.
    std::vector<std::pair<std::string, TensorPtr>> moment_tensors() const {
        std::vector<std::pair<std::string, TensorPtr>> out;
        for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
            for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
                const auto& [name, t] = groups_[gi].params[pi];
                auto m = make_tensor(t->shape, state_[gi].m[pi]);
                auto v = make_tensor(t->shape, state_[gi].v[pi]);
                out.emplace_back("adam.m." + name, m);
                out.emplace_back("adam.v." + name, v);
            }
        }
        return out;
    }

    // Restores moments and step counter from checkpointed tensors.
    void restore(std::int64_t step_count,
                 const std::vector<std::pair<std::string, TensorPtr>>& moments) {
        if (step_count < 0) throw DomainError("optimizer step count must be >= 0");
        t_ = step_count;
        for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
            for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
                const auto& [name, t] = groups_[gi].params[pi];
                bool found_m = false, found_v = false;
                for (const auto& [mn, mt] : moments) {
                    if (mn == "adam.m." + name) {
                        if (mt->numel() != t->numel()) {
                            throw ShapeError("moment size mismatch for " + name);
                        }
                        state_[gi].m[pi] = mt->values;
                        found_m = true;
                    } else if (mn == "adam.v." + name) {
                        if (mt->numel() != t->numel()) {
                            throw ShapeError("moment size mismatch for " + name);
                        }
                        state_[gi].v[pi] = mt->values;
                        found_v = true;
                    }
                }
                if (!found_m || !found_v) {
                    throw ValidationError("missing optimizer moments for " + name);
                }
            }
        }
    }

private:
    struct GroupState {
        std::vector<std::vector<double>> m, v;
    };

    std::vector<Group> groups_;
    std::vector<GroupState> state_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::int64_t t_ = 0;
};

}  // namespace vivid
