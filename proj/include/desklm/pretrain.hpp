#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "desklm/checkpoint.hpp"
#include "desklm/masking.hpp"
#include "desklm/schedule.hpp"

namespace desklm::nn {

struct PretrainConfig {
    ModelConfig model;
    TrainSchedule schedule;
    MaskingConfig masking;
    int seq_len = 128;
    int micro_batch_seqs = 16;
    std::string tokenizer_dir;
};

nlohmann::json pretrain_config_to_json(const PretrainConfig& cfg);
PretrainConfig pretrain_config_from_json(const nlohmann::json& j);

// Training perplexity per optimizer step plus validation perplexity per
// epoch (epoch 0 is the untrained model).
struct PerplexityLog {
    std::vector<std::pair<int64_t, double>> train_points;
    std::vector<std::pair<int64_t, double>> valid_points;
};

void write_perplexity_csvs(const PerplexityLog& log, const std::string& out_dir);
PerplexityLog read_perplexity_csvs(const std::string& dir);
std::string render_perplexity_svg(const PerplexityLog& log);

struct PretrainOptions {
    PretrainConfig config;
    std::string train_manifest;
    std::string valid_manifest;
    std::string out_dir;
    std::string resume_checkpoint;  // empty for a fresh run
    bool quiet = false;
    int64_t log_every = 50;
};

struct PretrainResult {
    std::string final_checkpoint_path;
    PerplexityLog log;
    int64_t steps_run = 0;
};

// Full masked-LM pretraining: packs the corpus, runs AdamW under the
// schedule, logs perplexity, validates and checkpoints at every epoch
// boundary, and supports bit-exact resumption.
PretrainResult run_pretrain(const PretrainOptions& opt);

}  // namespace desklm::nn
