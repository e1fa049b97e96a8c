#include "desklm/report.hpp"

#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "desklm/common.hpp"
#include "desklm/io.hpp"
#include "desklm/pretrain.hpp"

namespace desklm::report {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cell(const std::optional<double>& v) {
    return v ? format_fixed(*v, 2) : "-";
}

}  // namespace

std::string tasks_csv(const std::vector<std::pair<std::string, TaskScores>>& rows) {
    std::ostringstream out;
    out << "model,pos,ner,offense,turblimp_avg\n";
    for (const auto& [model, s] : rows) {
        out << model << ',' << cell(s.pos) << ',' << cell(s.ner) << ',' << cell(s.offense) << ','
            << cell(s.turblimp_avg) << '\n';
    }
    return out.str();
}

std::string turblimp_csv(const std::string& model, const evalx::TurblimpReport& rep) {
    std::map<std::string, double> acc;
    for (const auto& p : rep.per_phenomenon) {
        acc[p.phenomenon] = p.accuracy;
    }
    std::ostringstream out;
    out << "model";
    for (const auto& name : evalx::kPhenomena) {
        out << ',' << name;
    }
    out << ",avg\n";
    out << model;
    for (const auto& name : evalx::kPhenomena) {
        auto it = acc.find(name);
        out << ',' << (it == acc.end() ? std::string("-") : format_fixed(it->second, 2));
    }
    out << ',' << format_fixed(rep.average, 2) << '\n';
    return out.str();
}

std::string hyperparams_csv(const std::vector<std::pair<std::string, BestHyper>>& rows) {
    std::ostringstream out;
    out << "model,pos_batch,pos_lr,ner_batch,ner_lr,offense_batch,offense_lr\n";
    auto emit = [&out](const std::optional<std::pair<int, double>>& v) {
        if (v) {
            out << ',' << v->first << ',' << format_double(v->second);
        } else {
            out << ",-,-";
        }
    };
    for (const auto& [model, h] : rows) {
        out << model;
        emit(h.pos);
        emit(h.ner);
        emit(h.offense);
        out << '\n';
    }
    return out.str();
}

void write_run_manifest(const std::string& out_dir, const std::string& stage,
                        const nlohmann::json& config, uint64_t seed,
                        double duration_seconds, const std::vector<std::string>& outputs) {
    json j;
    j["stage"] = stage;
    j["config"] = config;
    j["seed"] = seed;
    j["duration_seconds"] = duration_seconds;
    j["outputs"] = outputs;
    j["version"] = "0.1.0";
    write_text_file((fs::path(out_dir) / "run_manifest.json").string(), j.dump(2) + "\n");
}

nlohmann::json read_run_manifest(const std::string& dir) {
    fs::path p = fs::path(dir) / "run_manifest.json";
    return json::parse(read_text_file(p.string()));
}

ReportStageResult run_report_stage(const ReportStageOptions& opt) {
    ReportStageResult res;
    ensure_dir(opt.out_dir);
    TaskScores scores;
    BestHyper hypers;
    std::optional<evalx::TurblimpReport> turblimp;
    std::optional<nn::PerplexityLog> ppl;

    for (const auto& dir : opt.run_dirs) {
        json manifest;
        try {
            manifest = read_run_manifest(dir);
        } catch (const std::exception& e) {
            std::cerr << "warning: skipping " << dir << ": " << e.what() << "\n";
            ++res.warnings;
            continue;
        }
        std::string stage = manifest.value("stage", std::string());
        try {
            if (stage == "finetune") {
                json best = json::parse(read_text_file((fs::path(dir) / "best.json").string()));
                std::string task = best.value("task", std::string());
                double score = best.value("test_score", 0.0);
                auto bf_lr = std::make_pair(best.value("batch_size", 0),
                                            best.value("learning_rate", 0.0));
                if (task == "pos") {
                    scores.pos = score;
                    hypers.pos = bf_lr;
                } else if (task == "ner") {
                    scores.ner = score;
                    hypers.ner = bf_lr;
                } else if (task == "offense") {
                    scores.offense = score;
                    hypers.offense = bf_lr;
                } else {
                    throw DataError("unknown task '" + task + "' in " + dir);
                }
            } else if (stage == "eval") {
                json rep = json::parse(
                    read_text_file((fs::path(dir) / "turblimp.json").string()));
                evalx::TurblimpReport tb;
                tb.average = rep.value("average", 0.0);
                for (const auto& item : rep.value("per_phenomenon", json::array())) {
                    evalx::PhenomenonScore ps;
                    ps.phenomenon = item.value("phenomenon", std::string());
                    ps.accuracy = item.value("accuracy", 0.0);
                    ps.n_pairs = item.value("n_pairs", 0l);
                    ps.n_correct = item.value("n_correct", 0l);
                    tb.per_phenomenon.push_back(std::move(ps));
                }
                scores.turblimp_avg = tb.average;
                turblimp = std::move(tb);
            } else if (stage == "pretrain") {
                ppl = nn::read_perplexity_csvs(dir);
            } else {
                throw DataError("unknown stage '" + stage + "'");
            }
        } catch (const std::exception& e) {
            std::cerr << "warning: skipping " << dir << ": " << e.what() << "\n";
            ++res.warnings;
        }
    }

    std::string tasks_path = (fs::path(opt.out_dir) / "results_tasks.csv").string();
    write_text_file(tasks_path, tasks_csv({{opt.model_name, scores}}));
    res.outputs.push_back(tasks_path);

    if (turblimp) {
        std::string path = (fs::path(opt.out_dir) / "turblimp_phenomena.csv").string();
        write_text_file(path, turblimp_csv(opt.model_name, *turblimp));
        res.outputs.push_back(path);
    }
    std::string hyper_path = (fs::path(opt.out_dir) / "best_hyperparams.csv").string();
    write_text_file(hyper_path, hyperparams_csv({{opt.model_name, hypers}}));
    res.outputs.push_back(hyper_path);

    if (ppl) {
        std::string svg_path = (fs::path(opt.out_dir) / "perplexity.svg").string();
        write_text_file(svg_path, nn::render_perplexity_svg(*ppl));
        res.outputs.push_back(svg_path);
    }
    if (res.warnings > 0) {
        std::cerr << "report finished with " << res.warnings << " warning(s)\n";
    }
    return res;
}

}  // namespace desklm::report
