#pragma once

#include <json.hpp>

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "desklm/checkpoint.hpp"
#include "desklm/datasets.hpp"

namespace desklm::ft {

struct GridSpec {
    std::vector<int> batch_sizes = {16, 32};
    std::vector<double> learning_rates = {5e-6, 7e-6, 1e-5, 2e-5, 5e-5};
    int max_epochs = 30;
    int patience = 3;
    double warmup_fraction = 0.10;
    uint64_t seed = 1;
};

nlohmann::json grid_to_json(const GridSpec& g);
GridSpec grid_from_json(const nlohmann::json& j);

// Tracks best dev score; stop after `patience` consecutive epochs without a
// strict improvement.
class EarlyStopper {
   public:
    explicit EarlyStopper(int patience) : patience_(patience) {
        if (patience < 1) {
            throw ConfigError("patience must be at least 1");
        }
    }

    // Feed the dev score of the epoch just finished; true means stop now.
    bool record(double score) {
        ++epoch_;
        if (score > best_) {
            best_ = score;
            best_epoch_ = epoch_;
            since_best_ = 0;
        } else {
            ++since_best_;
        }
        return since_best_ >= patience_;
    }

    double best() const { return best_; }
    int best_epoch() const { return best_epoch_; }

   private:
    int patience_;
    int epoch_ = 0;
    int best_epoch_ = 0;
    int since_best_ = 0;
    double best_ = -std::numeric_limits<double>::infinity();
};

struct TrialResult {
    int batch_size = 0;
    double learning_rate = 0.0;
    int epochs_run = 0;
    int best_epoch = 0;
    double best_dev_score = 0.0;
    double test_score = 0.0;
    double wall_clock_seconds = 0.0;
    std::vector<double> dev_curve;  // one score per epoch
    bool failed = false;
    std::string failure;
};

struct GridRunResult {
    std::vector<TrialResult> trials;
    size_t best_index = 0;
    double wall_clock_seconds = 0.0;
};

// One fine-tuning run: linear schedule with warmup over the planned step
// budget (fixed at max_epochs regardless of early stopping), dev evaluation
// after every epoch, best-epoch weights kept for the test score.
TrialResult train_one(const nn::Checkpoint& ckpt, const bpe::BpeVocab& vocab,
                      const TaskData& task, int batch_size, double learning_rate, int max_epochs,
                      int patience, double warmup_fraction, uint64_t seed, bool quiet = true);

// Highest dev score wins; ties prefer the lower learning rate, then the
// smaller batch. Failed trials never win. Throws when every trial failed.
size_t select_best_trial(const std::vector<TrialResult>& trials);

// Full grid; the best trial is chosen by select_best_trial.
GridRunResult run_grid(const nn::Checkpoint& ckpt, const bpe::BpeVocab& vocab,
                       const TaskData& task, const GridSpec& grid, bool quiet = true);

std::string trials_to_csv(const std::string& task_name, const std::vector<TrialResult>& trials);
std::string curves_to_csv(const std::vector<TrialResult>& trials);

struct FinetuneStageOptions {
    std::string task;  // pos | ner | offense
    std::string checkpoint_path;
    std::string data_dir;
    GridSpec grid;
    std::string out_dir;
    bool quiet = false;
};

struct FinetuneStageResult {
    GridRunResult grid;
    std::string task;
};

FinetuneStageResult run_finetune_stage(const FinetuneStageOptions& opt);

}  // namespace desklm::ft
