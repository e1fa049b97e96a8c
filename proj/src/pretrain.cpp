#include "desklm/pretrain.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "desklm/io.hpp"
#include "desklm/packing.hpp"
#include "desklm/svg.hpp"

namespace desklm::nn {

namespace fs = std::filesystem;
using nlohmann::json;

nlohmann::json pretrain_config_to_json(const PretrainConfig& cfg) {
    json j;
    j["model"] = config_to_json(cfg.model);
    j["schedule"] = schedule_to_json(cfg.schedule);
    j["masking"] = {{"mask_prob", cfg.masking.mask_prob},
                    {"mask_token_frac", cfg.masking.mask_token_frac},
                    {"random_frac", cfg.masking.random_frac}};
    j["seq_len"] = cfg.seq_len;
    j["micro_batch_seqs"] = cfg.micro_batch_seqs;
    j["tokenizer_dir"] = cfg.tokenizer_dir;
    return j;
}

PretrainConfig pretrain_config_from_json(const nlohmann::json& j) {
    PretrainConfig cfg;
    if (j.contains("model")) {
        cfg.model = config_from_json(j["model"]);
    }
    if (j.contains("schedule")) {
        cfg.schedule = schedule_from_json(j["schedule"]);
    }
    if (j.contains("masking")) {
        cfg.masking.mask_prob = j["masking"].value("mask_prob", cfg.masking.mask_prob);
        cfg.masking.mask_token_frac =
            j["masking"].value("mask_token_frac", cfg.masking.mask_token_frac);
        cfg.masking.random_frac = j["masking"].value("random_frac", cfg.masking.random_frac);
    }
    cfg.seq_len = j.value("seq_len", cfg.seq_len);
    cfg.micro_batch_seqs = j.value("micro_batch_seqs", cfg.micro_batch_seqs);
    cfg.tokenizer_dir = j.value("tokenizer_dir", cfg.tokenizer_dir);
    if (cfg.seq_len < 2 || cfg.seq_len > cfg.model.max_positions - 2) {
        throw ConfigError("seq_len must lie in [2, max_positions - 2]");
    }
    if (cfg.micro_batch_seqs <= 0) {
        throw ConfigError("micro_batch_seqs must be positive");
    }
    return cfg;
}

void write_perplexity_csvs(const PerplexityLog& log, const std::string& out_dir) {
    ensure_dir(out_dir);
    std::ostringstream train;
    train << "step,perplexity\n";
    for (const auto& [step, ppl] : log.train_points) {
        train << step << ',' << format_double(ppl) << '\n';
    }
    write_text_file((fs::path(out_dir) / "train_ppl.csv").string(), train.str());

    std::ostringstream valid;
    valid << "epoch,perplexity\n";
    for (const auto& [epoch, ppl] : log.valid_points) {
        valid << epoch << ',' << format_double(ppl) << '\n';
    }
    write_text_file((fs::path(out_dir) / "valid_ppl.csv").string(), valid.str());
}

namespace {

std::vector<std::pair<int64_t, double>> read_points_csv(const std::string& path) {
    std::vector<std::pair<int64_t, double>> points;
    std::istringstream in(read_text_file(path));
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) {
            continue;
        }
        size_t comma = line.find(',');
        if (comma == std::string::npos) {
            throw DataError("bad perplexity csv line: " + line);
        }
        points.emplace_back(std::stoll(line.substr(0, comma)),
                            std::stod(line.substr(comma + 1)));
    }
    return points;
}

}  // namespace

PerplexityLog read_perplexity_csvs(const std::string& dir) {
    PerplexityLog log;
    log.train_points = read_points_csv((fs::path(dir) / "train_ppl.csv").string());
    log.valid_points = read_points_csv((fs::path(dir) / "valid_ppl.csv").string());
    return log;
}

std::string render_perplexity_svg(const PerplexityLog& log) {
    ChartPanel top;
    top.title = "Validation perplexity (per epoch)";
    top.x_label = "epoch";
    top.y_label = "perplexity";
    top.log_y = true;
    ChartSeries vs;
    vs.label = "validation";
    vs.color = "#b2451f";
    for (const auto& [e, p] : log.valid_points) {
        vs.points.emplace_back(static_cast<double>(e), p);
    }
    top.series.push_back(std::move(vs));

    ChartPanel bottom;
    bottom.title = "Training perplexity (per step)";
    bottom.x_label = "step";
    bottom.y_label = "perplexity";
    bottom.log_y = true;
    ChartSeries ts;
    ts.label = "train";
    for (const auto& [s, p] : log.train_points) {
        ts.points.emplace_back(static_cast<double>(s), p);
    }
    bottom.series.push_back(std::move(ts));

    return render_chart({top, bottom});
}

namespace {

// Shared state for one pretraining run.
struct Trainer {
    const PretrainOptions& opt;
    const PretrainConfig& cfg;
    bpe::BpeVocab vocab;
    VocabInfo info;
    Model<float> model;
    EncoderParams<float> grads;
    AdamW<float> adam;
    PackedSequences train_data;
    PackedSequences valid_data;
    int64_t micro_per_update;
    int64_t seqs_per_update;

    // per-epoch permutation cache
    int64_t cached_epoch = -1;
    std::vector<long> epoch_perm;

    Trainer(const PretrainOptions& o, bpe::BpeVocab v, Model<float> m)
        : opt(o),
          cfg(o.config),
          vocab(std::move(v)),
          info(vocab_info(vocab)),
          model(std::move(m)),
          grads(allocate_params<float>(o.config.model)) {
        adam.add_model(model.params(), grads);
    }

    const std::vector<long>& perm_for_epoch(int64_t epoch) {
        if (cached_epoch != epoch) {
            epoch_perm.resize(static_cast<size_t>(train_data.n_seq));
            for (long i = 0; i < train_data.n_seq; ++i) {
                epoch_perm[static_cast<size_t>(i)] = i;
            }
            Rng rng(mix_seed({cfg.schedule.seed, static_cast<uint64_t>(epoch), 0xE90Cull}));
            rng.shuffle(epoch_perm);
            cached_epoch = epoch;
        }
        return epoch_perm;
    }

    Batch micro_batch(int64_t global_seq_pos, int n_seqs) {
        std::vector<long> rows;
        rows.reserve(static_cast<size_t>(n_seqs));
        for (int i = 0; i < n_seqs; ++i) {
            int64_t g = global_seq_pos + i;
            int64_t epoch = g / train_data.n_seq;
            int64_t within = g % train_data.n_seq;
            rows.push_back(perm_for_epoch(epoch)[static_cast<size_t>(within)]);
        }
        return gather_batch(train_data, rows);
    }

    // mean masked NLL over the whole validation set with fixed masks
    double validation_perplexity() {
        double nll_sum = 0.0;
        long count = 0;
        int64_t n_batches =
            (valid_data.n_seq + cfg.micro_batch_seqs - 1) / cfg.micro_batch_seqs;
        for (int64_t bi = 0; bi < n_batches; ++bi) {
            std::vector<long> rows;
            for (long s = bi * cfg.micro_batch_seqs;
                 s < std::min<int64_t>(valid_data.n_seq, (bi + 1) * cfg.micro_batch_seqs); ++s) {
                rows.push_back(s);
            }
            Batch clean = gather_batch(valid_data, rows);
            MaskedBatch masked = apply_dynamic_masking(
                clean, info, cfg.masking, mix_seed({cfg.schedule.seed, 0x7A11Dull}),
                static_cast<uint64_t>(bi));
            if (masked.n_selected == 0) {
                continue;
            }
            Mat<float> hidden = model.forward(masked.batch);
            auto [rows_sel, labels_sel] = selected_rows(masked);
            Mat<float> gathered(rows_sel.size(), cfg.model.hidden_size);
            for (size_t i = 0; i < rows_sel.size(); ++i) {
                gathered.row(static_cast<long>(i)) = hidden.row(rows_sel[i]);
            }
            Mat<float> logits = model.mlm_logits_rows(gathered);
            auto [sum, cnt] = softmax_nll_sum<float>(logits, labels_sel, nullptr);
            nll_sum += sum;
            count += cnt;
        }
        if (count == 0) {
            throw DataError("validation produced no masked positions");
        }
        return std::exp(nll_sum / static_cast<double>(count));
    }

    static std::pair<std::vector<long>, std::vector<int32_t>> selected_rows(
        const MaskedBatch& masked) {
        std::vector<long> rows;
        std::vector<int32_t> labels;
        rows.reserve(static_cast<size_t>(masked.n_selected));
        labels.reserve(static_cast<size_t>(masked.n_selected));
        for (size_t i = 0; i < masked.labels.size(); ++i) {
            if (masked.labels[i] != kIgnoreLabel) {
                rows.push_back(static_cast<long>(i));
                labels.push_back(masked.labels[i]);
            }
        }
        return {std::move(rows), std::move(labels)};
    }

    void save(const std::string& path, uint64_t step) {
        Checkpoint ckpt;
        ckpt.config = cfg.model;
        ckpt.params = model.params();
        ckpt.step = step;
        ckpt.rng_seed = cfg.schedule.seed;
        ckpt.optimizer = capture_optimizer(adam);
        ckpt.tokenizer_merges = bpe::merges_to_text(vocab);
        save_checkpoint(path, ckpt);
    }
};

}  // namespace

PretrainResult run_pretrain(const PretrainOptions& opt) {
    const PretrainConfig& cfg = opt.config;
    validate(cfg.model);
    validate(cfg.schedule);
    ensure_dir(opt.out_dir);

    // model + tokenizer, fresh or resumed
    int64_t start_step = 0;
    bpe::BpeVocab vocab;
    Model<float> model(cfg.model, EncoderParams<float>{});
    std::optional<OptimizerState> resumed_opt;
    if (!opt.resume_checkpoint.empty()) {
        Checkpoint ckpt = load_checkpoint(opt.resume_checkpoint);
        if (config_to_json(ckpt.config) != config_to_json(cfg.model)) {
            throw ConfigError("resume checkpoint config differs from the requested model config");
        }
        vocab = vocab_from_checkpoint(ckpt);
        model = Model<float>(ckpt.config, std::move(ckpt.params));
        start_step = static_cast<int64_t>(ckpt.step);
        resumed_opt = std::move(ckpt.optimizer);
    } else {
        if (cfg.tokenizer_dir.empty()) {
            throw ConfigError("pretrain config needs tokenizer_dir");
        }
        vocab = bpe::load_vocab(cfg.tokenizer_dir);
        model = Model<float>::random_init(cfg.model, cfg.schedule.seed);
    }
    if (vocab.size() > cfg.model.vocab_size) {
        throw ConfigError("tokenizer vocabulary (" + std::to_string(vocab.size()) +
                          ") exceeds model vocab_size (" + std::to_string(cfg.model.vocab_size) +
                          ")");
    }

    Trainer tr(opt, std::move(vocab), std::move(model));
    if (resumed_opt) {
        restore_optimizer(*resumed_opt, tr.adam);
    }

    // data
    {
        auto train_manifest = corpus::load_manifest(opt.train_manifest);
        auto train_docs = corpus::load_manifest_documents(train_manifest, opt.train_manifest);
        tr.train_data = pack_stream(tokenize_to_stream(tr.vocab, train_docs), cfg.seq_len,
                                    tr.vocab.bos_id(), tr.vocab.pad_id());
        auto valid_manifest = corpus::load_manifest(opt.valid_manifest);
        auto valid_docs = corpus::load_manifest_documents(valid_manifest, opt.valid_manifest);
        tr.valid_data = pack_stream(tokenize_to_stream(tr.vocab, valid_docs), cfg.seq_len,
                                    tr.vocab.bos_id(), tr.vocab.pad_id());
    }
    tr.micro_per_update =
        (cfg.schedule.tokens_per_update +
         static_cast<int64_t>(cfg.micro_batch_seqs) * cfg.seq_len - 1) /
        (static_cast<int64_t>(cfg.micro_batch_seqs) * cfg.seq_len);
    tr.seqs_per_update = tr.micro_per_update * cfg.micro_batch_seqs;

    PerplexityLog log;
    int64_t epoch_done = start_step * tr.seqs_per_update / tr.train_data.n_seq;
    if (start_step == 0) {
        log.valid_points.emplace_back(0, tr.validation_perplexity());
        if (!opt.quiet) {
            std::cout << "epoch 0 valid_ppl " << format_double(log.valid_points.back().second)
                      << std::endl;
        }
    }

    for (int64_t step = start_step + 1; step <= cfg.schedule.total_updates; ++step) {
        double lr = lr_at(cfg.schedule, step);
        zero_grads(tr.grads);
        double nll_sum = 0.0;
        long count = 0;
        for (int64_t m = 0; m < tr.micro_per_update; ++m) {
            int64_t seq_pos = (step - 1) * tr.seqs_per_update + m * cfg.micro_batch_seqs;
            Batch clean = tr.micro_batch(seq_pos, cfg.micro_batch_seqs);
            uint64_t counter = static_cast<uint64_t>((step - 1) * tr.micro_per_update + m);
            MaskedBatch masked =
                apply_dynamic_masking(clean, tr.info, cfg.masking, cfg.schedule.seed, counter);
            if (masked.n_selected == 0) {
                std::cerr << "warning: no masked positions in micro-batch at step " << step
                          << "; skipped\n";
                continue;
            }
            ForwardCache<float> cache;
            ForwardOptions fopt;
            fopt.train = true;
            fopt.dropout_seed = mix_seed({cfg.schedule.seed, counter, 0xD0ull});
            Mat<float> hidden = tr.model.forward(masked.batch, fopt, &cache);
            auto [rows_sel, labels_sel] = Trainer::selected_rows(masked);
            Mat<float> gathered(rows_sel.size(), cfg.model.hidden_size);
            for (size_t i = 0; i < rows_sel.size(); ++i) {
                gathered.row(static_cast<long>(i)) = hidden.row(rows_sel[i]);
            }
            Model<float>::MlmHeadCache head_cache;
            Mat<float> logits = tr.model.mlm_logits_rows(gathered, &head_cache);
            Mat<float> dlogits;
            auto [sum, cnt] = softmax_nll_sum(logits, labels_sel, &dlogits);
            tr.model.mlm_backward(masked.batch, cache, head_cache, dlogits, rows_sel, tr.grads);
            nll_sum += sum;
            count += cnt;
        }
        if (count == 0) {
            std::cerr << "warning: step " << step << " had no masked positions; update skipped\n";
            continue;
        }
        double mean_nll = nll_sum / static_cast<double>(count);
        if (!std::isfinite(mean_nll)) {
            throw DataError("non-finite loss at step " + std::to_string(step));
        }
        scale_grads(tr.grads, 1.0f / static_cast<float>(count));
        tr.adam.step(lr);
        log.train_points.emplace_back(step, std::exp(mean_nll));
        if (!opt.quiet && opt.log_every > 0 &&
            (step % opt.log_every == 0 || step == start_step + 1)) {
            std::cout << "step " << step << " lr " << format_double(lr) << " train_ppl "
                      << format_double(std::exp(mean_nll)) << std::endl;
        }

        int64_t epoch_now = step * tr.seqs_per_update / tr.train_data.n_seq;
        while (epoch_done < epoch_now) {
            ++epoch_done;
            double vppl = tr.validation_perplexity();
            log.valid_points.emplace_back(epoch_done, vppl);
            if (!opt.quiet) {
                std::cout << "epoch " << epoch_done << " valid_ppl " << format_double(vppl)
                          << std::endl;
            }
            char name[64];
            std::snprintf(name, sizeof(name), "ckpt_epoch_%04lld.bin",
                          static_cast<long long>(epoch_done));
            tr.save((fs::path(opt.out_dir) / name).string(), static_cast<uint64_t>(step));
            write_perplexity_csvs(log, opt.out_dir);
        }
    }

    // Training may end mid-epoch; record one final validation point so the
    // curve always covers the end of the run.
    if (cfg.schedule.total_updates * tr.seqs_per_update % tr.train_data.n_seq != 0) {
        double vppl = tr.validation_perplexity();
        log.valid_points.emplace_back(epoch_done + 1, vppl);
        if (!opt.quiet) {
            std::cout << "final valid_ppl " << format_double(vppl) << std::endl;
        }
    }

    PretrainResult res;
    res.steps_run = cfg.schedule.total_updates - start_step;
    res.final_checkpoint_path = (fs::path(opt.out_dir) / "ckpt_final.bin").string();
    tr.save(res.final_checkpoint_path, static_cast<uint64_t>(cfg.schedule.total_updates));
    write_perplexity_csvs(log, opt.out_dir);
    write_text_file((fs::path(opt.out_dir) / "perplexity.svg").string(),
                    render_perplexity_svg(log));
    res.log = std::move(log);
    return res;
}

}  // namespace desklm::nn
