#pragma once

#include <json.hpp>

#include <cstdint>

namespace desklm::nn {

// Linear warmup to peak_lr over warmup_updates, then polynomial decay toward
// end_lr, reaching it exactly at total_updates.
struct TrainSchedule {
    int64_t total_updates = 100000;
    int64_t warmup_updates = 10000;
    double peak_lr = 0.0004;
    double end_lr = 0.0;
    double power = 1.0;
    int64_t tokens_per_update = 8192 * 512;  // global batch as sequences x length
    uint64_t seed = 1;
};

void validate(const TrainSchedule& s);

// Throws if step is outside [0, total_updates].
double lr_at(const TrainSchedule& s, int64_t step);

nlohmann::json schedule_to_json(const TrainSchedule& s);
TrainSchedule schedule_from_json(const nlohmann::json& j);

}  // namespace desklm::nn
