#include "desklm/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>

#include "desklm/bpe.hpp"
#include "desklm/common.hpp"
#include "desklm/corpus.hpp"
#include "desklm/finetune.hpp"
#include "desklm/io.hpp"
#include "desklm/metrics.hpp"
#include "desklm/pll.hpp"
#include "desklm/pretrain.hpp"
#include "desklm/report.hpp"

namespace desklm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json load_config_file(const std::string& path) {
    if (path.empty()) {
        return json::object();
    }
    try {
        return json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse config file " + path + ": " + e.what());
    }
}

struct StageTimer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double elapsed() const { return seconds_since(t0); }
};

// ---- corpus ---------------------------------------------------------------

int cmd_corpus(CLI::App& cmd, const std::vector<std::string>& inputs, const std::string& out,
               uint64_t seed, uint64_t shard_bytes, double valid_fraction,
               const std::string& config_path) {
    StageTimer timer;
    json file_cfg = load_config_file(config_path);
    corpus::CorpusStageOptions opt;
    opt.inputs = inputs;
    if (opt.inputs.empty() && file_cfg.contains("inputs")) {
        opt.inputs = file_cfg["inputs"].get<std::vector<std::string>>();
    }
    opt.out_dir = out;
    opt.seed = cmd.count("--seed") ? seed : file_cfg.value("seed", seed);
    opt.shard_bytes =
        cmd.count("--shard-bytes") ? shard_bytes : file_cfg.value("shard_bytes", shard_bytes);
    opt.valid_fraction = cmd.count("--valid-fraction")
                             ? valid_fraction
                             : file_cfg.value("valid_fraction", valid_fraction);

    auto res = corpus::run_corpus_stage(opt);
    std::cout << "kept " << res.full.filter_stats.kept << " documents, dropped "
              << res.full.filter_stats.dropped_invalid_encoding << " with invalid encodings, "
              << res.full.total_bytes << " bytes across " << res.full.shards.size()
              << " shards" << std::endl;
    report::write_run_manifest(
        opt.out_dir, "corpus",
        json{{"inputs", opt.inputs},
             {"seed", opt.seed},
             {"shard_bytes", opt.shard_bytes},
             {"valid_fraction", opt.valid_fraction}},
        opt.seed, timer.elapsed(),
        {res.full_manifest_path, res.train_manifest_path, res.valid_manifest_path});
    return kExitOk;
}

// ---- tokenizer ------------------------------------------------------------

int cmd_tokenizer_train(CLI::App& cmd, const std::string& input, int vocab_size,
                        uint64_t sample_bytes, uint64_t seed, const std::string& out,
                        const std::string& config_path) {
    StageTimer timer;
    json file_cfg = load_config_file(config_path);
    bpe::TokenizerStageOptions opt;
    opt.manifest_path = input;
    opt.vocab_size = cmd.count("--vocab-size") ? vocab_size : file_cfg.value("vocab_size", vocab_size);
    opt.sample_bytes =
        cmd.count("--sample-bytes") ? sample_bytes : file_cfg.value("sample_bytes", sample_bytes);
    opt.seed = cmd.count("--seed") ? seed : file_cfg.value("seed", seed);
    opt.out_dir = out;
    auto vocab = bpe::run_tokenizer_stage(opt);
    std::cout << "trained vocabulary of " << vocab.size() << " tokens ("
              << vocab.merges().size() << " merges)" << std::endl;
    report::write_run_manifest(out, "tokenizer",
                               json{{"input", input},
                                    {"vocab_size", opt.vocab_size},
                                    {"sample_bytes", opt.sample_bytes},
                                    {"seed", opt.seed}},
                               opt.seed, timer.elapsed(),
                               {(fs::path(out) / "vocab.json").string(),
                                (fs::path(out) / "merges.txt").string()});
    return kExitOk;
}

int cmd_tokenizer_encode(const std::string& tok_dir, const std::string& in_path,
                         const std::string& out_path, bool add_specials) {
    auto vocab = bpe::load_vocab(tok_dir);
    std::string text = read_text_file(in_path);
    auto enc = bpe::encode(vocab, text, add_specials);
    std::ostringstream out;
    for (size_t i = 0; i < enc.ids.size(); ++i) {
        if (i) {
            out << ' ';
        }
        out << enc.ids[i];
    }
    out << '\n';
    write_text_file(out_path, out.str());
    return kExitOk;
}

int cmd_tokenizer_decode(const std::string& tok_dir, const std::string& in_path,
                         const std::string& out_path) {
    auto vocab = bpe::load_vocab(tok_dir);
    std::istringstream in(read_text_file(in_path));
    std::vector<int> ids;
    long id;
    while (in >> id) {
        ids.push_back(static_cast<int>(id));
    }
    write_text_file(out_path, bpe::decode(vocab, ids));
    return kExitOk;
}

// ---- pretrain ---------------------------------------------------------------

int cmd_pretrain(const std::string& config_path, const std::string& data,
                 const std::string& valid, const std::string& out, const std::string& resume,
                 bool quiet) {
    StageTimer timer;
    json file_cfg = load_config_file(config_path);
    nn::PretrainOptions opt;
    opt.config = nn::pretrain_config_from_json(file_cfg);
    opt.train_manifest = data;
    opt.valid_manifest = valid;
    opt.out_dir = out;
    opt.resume_checkpoint = resume;
    opt.quiet = quiet;
    auto res = nn::run_pretrain(opt);
    std::cout << "pretraining finished after " << res.steps_run << " update(s); final checkpoint "
              << res.final_checkpoint_path << std::endl;
    report::write_run_manifest(out, "pretrain",
                               nn::pretrain_config_to_json(opt.config),
                               opt.config.schedule.seed, timer.elapsed(),
                               {res.final_checkpoint_path,
                                (fs::path(out) / "train_ppl.csv").string(),
                                (fs::path(out) / "valid_ppl.csv").string(),
                                (fs::path(out) / "perplexity.svg").string()});
    return kExitOk;
}

// ---- finetune ---------------------------------------------------------------

int cmd_finetune(CLI::App& cmd, const std::string& task, const std::string& ckpt,
                 const std::string& data, const std::string& grid_path, const std::string& out,
                 uint64_t seed, bool quiet) {
    StageTimer timer;
    ft::FinetuneStageOptions opt;
    opt.task = task;
    opt.checkpoint_path = ckpt;
    opt.data_dir = data;
    opt.out_dir = out;
    opt.grid = ft::grid_from_json(load_config_file(grid_path));
    if (cmd.count("--seed")) {
        opt.grid.seed = seed;
    }
    opt.quiet = quiet;
    auto res = ft::run_finetune_stage(opt);
    const auto& best = res.grid.trials[res.grid.best_index];
    std::cout << res.task << ": best batch=" << best.batch_size
              << " lr=" << format_double(best.learning_rate) << " dev="
              << format_fixed(best.best_dev_score, 2)
              << " test=" << format_fixed(best.test_score, 2) << " ("
              << res.grid.trials.size() << " trials)" << std::endl;
    report::write_run_manifest(out, "finetune",
                               json{{"task", opt.task},
                                    {"checkpoint", ckpt},
                                    {"data", data},
                                    {"grid", ft::grid_to_json(opt.grid)}},
                               opt.grid.seed, timer.elapsed(),
                               {(fs::path(out) / "trials.csv").string(),
                                (fs::path(out) / "best.json").string()});
    return kExitOk;
}

// ---- eval -------------------------------------------------------------------

int cmd_eval_turblimp(const std::string& ckpt_path, const std::string& pairs_path,
                      const std::string& out, const std::string& model_name) {
    StageTimer timer;
    nn::Checkpoint ckpt = nn::load_checkpoint(ckpt_path);
    auto vocab = nn::vocab_from_checkpoint(ckpt);
    nn::Model<float> model(ckpt.config, std::move(ckpt.params));
    auto pairs = evalx::load_minimal_pairs(pairs_path);
    auto rep = evalx::turblimp_eval(model, vocab, pairs);

    // --out may name the CSV itself or a directory to place it in
    fs::path out_dir(out);
    fs::path csv_path;
    if (out_dir.extension() == ".csv") {
        csv_path = out_dir;
        out_dir = out_dir.parent_path().empty() ? fs::path(".") : out_dir.parent_path();
    } else {
        csv_path = out_dir / "turblimp.csv";
    }
    ensure_dir(out_dir.string());
    write_text_file(csv_path.string(), report::turblimp_csv(model_name, rep));
    json jr;
    jr["average"] = rep.average;
    jr["total_skipped"] = rep.total_skipped;
    jr["per_phenomenon"] = json::array();
    for (const auto& p : rep.per_phenomenon) {
        jr["per_phenomenon"].push_back({{"phenomenon", p.phenomenon},
                                        {"accuracy", p.accuracy},
                                        {"n_pairs", p.n_pairs},
                                        {"n_correct", p.n_correct},
                                        {"n_skipped", p.n_skipped}});
    }
    write_text_file((out_dir / "turblimp.json").string(), jr.dump(2) + "\n");
    std::cout << "turblimp avg " << format_fixed(rep.average, 2) << " over "
              << rep.per_phenomenon.size() << " phenomena" << std::endl;
    report::write_run_manifest(out_dir.string(), "eval",
                               json{{"checkpoint", ckpt_path}, {"pairs", pairs_path}}, 0,
                               timer.elapsed(),
                               {csv_path.string(), (out_dir / "turblimp.json").string()});
    return kExitOk;
}

int cmd_eval_metrics(const std::string& task, const std::string& gold_path,
                     const std::string& pred_path) {
    ft::TaskKind kind = ft::task_kind_from_string(task);
    double score = 0.0;
    if (kind == ft::TaskKind::sequence_classification) {
        auto gold = ft::load_tsv_file(gold_path);
        auto pred = ft::load_tsv_file(pred_path);
        if (gold.size() != pred.size()) {
            throw DataError("gold and pred have different sizes");
        }
        std::vector<std::string> g, p;
        for (size_t i = 0; i < gold.size(); ++i) {
            g.push_back(gold[i].label);
            p.push_back(pred[i].label);
        }
        score = evalx::macro_f1(g, p, {"NOT", "OFF"});
    } else {
        auto gold = ft::load_conll_file(gold_path);
        auto pred = ft::load_conll_file(pred_path);
        std::vector<std::vector<std::string>> g, p;
        for (const auto& s : gold) {
            g.push_back(s.tags);
        }
        for (const auto& s : pred) {
            p.push_back(s.tags);
        }
        score = kind == ft::TaskKind::span_ner ? evalx::entity_f1(g, p) : evalx::micro_f1(g, p);
    }
    std::cout << task << " " << format_fixed(score, 2) << std::endl;
    return kExitOk;
}

// ---- report -------------------------------------------------------------------

int cmd_report(const std::vector<std::string>& runs, const std::string& out,
               const std::string& model_name) {
    StageTimer timer;
    report::ReportStageOptions opt;
    opt.run_dirs = runs;
    opt.out_dir = out;
    opt.model_name = model_name;
    auto res = report::run_report_stage(opt);
    std::cout << "report written to " << out << " (" << res.warnings << " warning(s))"
              << std::endl;
    report::write_run_manifest(out, "report", json{{"runs", runs}, {"model", model_name}}, 0,
                               timer.elapsed(), res.outputs);
    return kExitOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"desklm: byte-level BPE + masked-LM encoder pipeline"};
    app.require_subcommand(1);

    // corpus
    auto* corpus_cmd = app.add_subcommand("corpus", "filter, shuffle and shard raw text");
    std::vector<std::string> corpus_inputs;
    std::string corpus_out, corpus_config;
    uint64_t corpus_seed = 1, corpus_shard_bytes = 64ull << 20;
    double corpus_valid_fraction = 0.01;
    corpus_cmd->add_option("--input", corpus_inputs, "newline-delimited record files (.jsonl[.gz])");
    corpus_cmd->add_option("--out", corpus_out, "output directory")->required();
    corpus_cmd->add_option("--seed", corpus_seed, "shuffle seed");
    corpus_cmd->add_option("--shard-bytes", corpus_shard_bytes, "target shard size in bytes");
    corpus_cmd->add_option("--valid-fraction", corpus_valid_fraction,
                           "fraction of documents held out for validation");
    corpus_cmd->add_option("--config", corpus_config, "JSON config file (flags override)");

    // tokenizer
    auto* tok_cmd = app.add_subcommand("tokenizer", "byte-level BPE tools");
    tok_cmd->require_subcommand(1);
    auto* tok_train = tok_cmd->add_subcommand("train", "learn a vocabulary from a corpus sample");
    std::string tt_input, tt_out, tt_config;
    int tt_vocab_size = 4096;
    uint64_t tt_sample_bytes = 0, tt_seed = 1;
    tok_train->add_option("--input", tt_input, "corpus manifest")->required();
    tok_train->add_option("--vocab-size", tt_vocab_size, "target vocabulary size");
    tok_train->add_option("--sample-bytes", tt_sample_bytes,
                          "bytes of text to sample (0 = all)");
    tok_train->add_option("--seed", tt_seed, "sampling seed");
    tok_train->add_option("--out", tt_out, "output directory")->required();
    tok_train->add_option("--config", tt_config, "JSON config file (flags override)");

    auto* tok_encode = tok_cmd->add_subcommand("encode", "bytes -> token ids");
    std::string te_dir, te_in, te_out;
    bool te_specials = false;
    tok_encode->add_option("--tokenizer", te_dir, "tokenizer directory")->required();
    tok_encode->add_option("--in", te_in, "input file (raw bytes)")->required();
    tok_encode->add_option("--out", te_out, "output file (decimal ids)")->required();
    tok_encode->add_flag("--add-specials", te_specials, "wrap with bos/eos");

    auto* tok_decode = tok_cmd->add_subcommand("decode", "token ids -> bytes");
    std::string td_dir, td_in, td_out;
    tok_decode->add_option("--tokenizer", td_dir, "tokenizer directory")->required();
    tok_decode->add_option("--in", td_in, "input file (decimal ids)")->required();
    tok_decode->add_option("--out", td_out, "output file (raw bytes)")->required();

    // pretrain
    auto* pre_cmd = app.add_subcommand("pretrain", "masked-LM pretraining");
    std::string pre_config, pre_data, pre_valid, pre_out, pre_resume;
    bool pre_quiet = false;
    pre_cmd->add_option("--config", pre_config, "pretrain config JSON")->required();
    pre_cmd->add_option("--data", pre_data, "train corpus manifest")->required();
    pre_cmd->add_option("--valid", pre_valid, "validation corpus manifest")->required();
    pre_cmd->add_option("--out", pre_out, "output directory")->required();
    pre_cmd->add_option("--resume", pre_resume, "checkpoint to resume from");
    pre_cmd->add_flag("--quiet", pre_quiet, "suppress progress output");

    // finetune
    auto* ft_cmd = app.add_subcommand("finetune", "grid-searched task fine-tuning");
    std::string ft_task, ft_ckpt, ft_data, ft_grid, ft_out;
    uint64_t ft_seed = 1;
    bool ft_quiet = false;
    ft_cmd->add_option("--task", ft_task, "pos | ner | offense")->required();
    ft_cmd->add_option("--ckpt", ft_ckpt, "pretrained checkpoint")->required();
    ft_cmd->add_option("--data", ft_data, "dataset directory")->required();
    ft_cmd->add_option("--grid", ft_grid, "grid config JSON (defaults: {16,32} x {5e-6..5e-5})");
    ft_cmd->add_option("--seed", ft_seed, "fine-tuning seed (overrides grid config)");
    ft_cmd->add_option("--out", ft_out, "output directory")->required();
    ft_cmd->add_flag("--quiet", ft_quiet, "suppress progress output");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluation protocols");
    eval_cmd->require_subcommand(1);
    auto* eval_tb = eval_cmd->add_subcommand("turblimp", "minimal-pair acceptability scoring");
    std::string tb_ckpt, tb_pairs, tb_out, tb_model = "model";
    eval_tb->add_option("--ckpt", tb_ckpt, "checkpoint")->required();
    eval_tb->add_option("--pairs", tb_pairs, "minimal pairs JSONL")->required();
    eval_tb->add_option("--out", tb_out, "output directory")->required();
    eval_tb->add_option("--model-name", tb_model, "row label for the CSV");

    auto* eval_m = eval_cmd->add_subcommand("metrics", "score gold vs predicted files");
    std::string em_task, em_gold, em_pred;
    eval_m->add_option("--task", em_task, "pos | ner | offense")->required();
    eval_m->add_option("--gold", em_gold, "gold file")->required();
    eval_m->add_option("--pred", em_pred, "prediction file")->required();

    // report
    auto* rep_cmd = app.add_subcommand("report", "aggregate run directories into tables");
    std::vector<std::string> rep_runs;
    std::string rep_out, rep_model = "model";
    rep_cmd->add_option("--run", rep_runs, "run directory (repeatable)")->required();
    rep_cmd->add_option("--out", rep_out, "output directory")->required();
    rep_cmd->add_option("--model-name", rep_model, "row label for the CSVs");

    std::vector<std::string> argv_copy(args);
    try {
        std::vector<const char*> argv;
        argv.push_back("desklm");
        for (const auto& a : argv_copy) {
            argv.push_back(a.c_str());
        }
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (corpus_cmd->parsed()) {
            return cmd_corpus(*corpus_cmd, corpus_inputs, corpus_out, corpus_seed,
                              corpus_shard_bytes, corpus_valid_fraction, corpus_config);
        }
        if (tok_train->parsed()) {
            return cmd_tokenizer_train(*tok_train, tt_input, tt_vocab_size, tt_sample_bytes,
                                       tt_seed, tt_out, tt_config);
        }
        if (tok_encode->parsed()) {
            return cmd_tokenizer_encode(te_dir, te_in, te_out, te_specials);
        }
        if (tok_decode->parsed()) {
            return cmd_tokenizer_decode(td_dir, td_in, td_out);
        }
        if (pre_cmd->parsed()) {
            return cmd_pretrain(pre_config, pre_data, pre_valid, pre_out, pre_resume, pre_quiet);
        }
        if (ft_cmd->parsed()) {
            return cmd_finetune(*ft_cmd, ft_task, ft_ckpt, ft_data, ft_grid, ft_out, ft_seed,
                                ft_quiet);
        }
        if (eval_tb->parsed()) {
            return cmd_eval_turblimp(tb_ckpt, tb_pairs, tb_out, tb_model);
        }
        if (eval_m->parsed()) {
            return cmd_eval_metrics(em_task, em_gold, em_pred);
        }
        if (rep_cmd->parsed()) {
            return cmd_report(rep_runs, rep_out, rep_model);
        }
        std::cerr << "error: usage: no subcommand given\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: runtime: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace desklm::cli
