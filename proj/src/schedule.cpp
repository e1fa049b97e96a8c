#include "desklm/schedule.hpp"

#include <cmath>

#include "desklm/common.hpp"

namespace desklm::nn {

void validate(const TrainSchedule& s) {
    if (s.total_updates <= 0) {
        throw ConfigError("total_updates must be positive");
    }
    if (s.warmup_updates < 0 || s.warmup_updates >= s.total_updates) {
        throw ConfigError("warmup_updates must lie in [0, total_updates)");
    }
    if (!(s.peak_lr > s.end_lr) || s.end_lr < 0.0) {
        throw ConfigError("need peak_lr > end_lr >= 0");
    }
    if (s.power <= 0.0) {
        throw ConfigError("decay power must be positive");
    }
    if (s.tokens_per_update <= 0) {
        throw ConfigError("tokens_per_update must be positive");
    }
}

double lr_at(const TrainSchedule& s, int64_t step) {
    validate(s);
    if (step < 0 || step > s.total_updates) {
        throw ConfigError("schedule step " + std::to_string(step) + " outside [0, " +
                          std::to_string(s.total_updates) + "]");
    }
    if (step <= s.warmup_updates) {
        if (s.warmup_updates == 0) {
            return s.peak_lr;
        }
        return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_updates);
    }
    double remaining = static_cast<double>(s.total_updates - step) /
                       static_cast<double>(s.total_updates - s.warmup_updates);
    return s.end_lr + (s.peak_lr - s.end_lr) * std::pow(remaining, s.power);
}

nlohmann::json schedule_to_json(const TrainSchedule& s) {
    return nlohmann::json{{"total_updates", s.total_updates},
                          {"warmup_updates", s.warmup_updates},
                          {"peak_lr", s.peak_lr},
                          {"end_lr", s.end_lr},
                          {"power", s.power},
                          {"tokens_per_update", s.tokens_per_update},
                          {"seed", s.seed}};
}

TrainSchedule schedule_from_json(const nlohmann::json& j) {
    TrainSchedule s;
    s.total_updates = j.value("total_updates", s.total_updates);
    s.warmup_updates = j.value("warmup_updates", s.warmup_updates);
    s.peak_lr = j.value("peak_lr", s.peak_lr);
    s.end_lr = j.value("end_lr", s.end_lr);
    s.power = j.value("power", s.power);
    s.tokens_per_update = j.value("tokens_per_update", s.tokens_per_update);
    s.seed = j.value("seed", s.seed);
    validate(s);
    return s;
}

}  // namespace desklm::nn
