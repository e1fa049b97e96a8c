#pragma once

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "desklm/pll.hpp"

namespace desklm::report {

// One row of the per-task results table.
struct TaskScores {
    std::optional<double> pos;
    std::optional<double> ner;
    std::optional<double> offense;
    std::optional<double> turblimp_avg;
};

struct BestHyper {
    std::optional<std::pair<int, double>> pos;      // (batch, lr)
    std::optional<std::pair<int, double>> ner;
    std::optional<std::pair<int, double>> offense;
};

// model, pos, ner, offense, turblimp_avg — one row per model.
std::string tasks_csv(const std::vector<std::pair<std::string, TaskScores>>& rows);

// model, 16 phenomenon columns, avg.
std::string turblimp_csv(const std::string& model, const evalx::TurblimpReport& rep);

// model, <task>_batch/<task>_lr columns.
std::string hyperparams_csv(const std::vector<std::pair<std::string, BestHyper>>& rows);

// Written by every CLI stage next to its outputs; enough to re-run the stage.
void write_run_manifest(const std::string& out_dir, const std::string& stage,
                        const nlohmann::json& config, uint64_t seed,
                        double duration_seconds, const std::vector<std::string>& outputs);
nlohmann::json read_run_manifest(const std::string& dir);

struct ReportStageOptions {
    std::vector<std::string> run_dirs;
    std::string out_dir;
    std::string model_name = "model";
};

struct ReportStageResult {
    int warnings = 0;
    std::vector<std::string> outputs;
};

// Aggregates finetune/eval/pretrain run directories into the per-task CSV,
// the per-phenomenon CSV, the best-hyperparameter CSV and the two-panel
// perplexity SVG. Missing or corrupt manifests are listed and skipped.
ReportStageResult run_report_stage(const ReportStageOptions& opt);

}  // namespace desklm::report
