#include "desklm/finetune.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "desklm/io.hpp"
#include "desklm/metrics.hpp"
#include "desklm/schedule.hpp"

namespace desklm::ft {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Batch;
using nn::Mat;

nlohmann::json grid_to_json(const GridSpec& g) {
    return json{{"batch_sizes", g.batch_sizes},
                {"learning_rates", g.learning_rates},
                {"max_epochs", g.max_epochs},
                {"patience", g.patience},
                {"warmup_fraction", g.warmup_fraction},
                {"seed", g.seed}};
}

GridSpec grid_from_json(const nlohmann::json& j) {
    GridSpec g;
    g.batch_sizes = j.value("batch_sizes", g.batch_sizes);
    g.learning_rates = j.value("learning_rates", g.learning_rates);
    g.max_epochs = j.value("max_epochs", g.max_epochs);
    g.patience = j.value("patience", g.patience);
    g.warmup_fraction = j.value("warmup_fraction", g.warmup_fraction);
    g.seed = j.value("seed", g.seed);
    if (g.batch_sizes.empty() || g.learning_rates.empty()) {
        throw ConfigError("grid needs at least one batch size and one learning rate");
    }
    if (g.max_epochs < 1) {
        throw ConfigError("max_epochs must be at least 1");
    }
    if (g.warmup_fraction < 0.0 || g.warmup_fraction >= 1.0) {
        throw ConfigError("warmup_fraction must lie in [0, 1)");
    }
    return g;
}

namespace {

// Everything one trial needs; the encoder weights start from the pretrained
// checkpoint, the head is fresh.
struct TrialModel {
    nn::Model<float> model;
    nn::EncoderParams<float> grads;
    nn::TokenHeadParams<float> token_head, token_head_grads;
    nn::SeqHeadParams<float> seq_head, seq_head_grads;
    bool is_classifier;

    TrialModel(const nn::Checkpoint& ckpt, const TaskData& task, uint64_t seed)
        : model(ckpt.config, ckpt.params),
          grads(nn::allocate_params<float>(ckpt.config)),
          is_classifier(task.kind == TaskKind::sequence_classification) {
        int n_labels = static_cast<int>(task.label_set.size());
        if (is_classifier) {
            seq_head = nn::init_seq_head<float>(ckpt.config.hidden_size, n_labels, seed);
            seq_head_grads.dense_w = Mat<float>::Zero(ckpt.config.hidden_size,
                                                      ckpt.config.hidden_size);
            seq_head_grads.dense_b = Mat<float>::Zero(1, ckpt.config.hidden_size);
            seq_head_grads.out_w = Mat<float>::Zero(ckpt.config.hidden_size, n_labels);
            seq_head_grads.out_b = Mat<float>::Zero(1, n_labels);
        } else {
            token_head = nn::init_token_head<float>(ckpt.config.hidden_size, n_labels, seed);
            token_head_grads.weight = Mat<float>::Zero(ckpt.config.hidden_size, n_labels);
            token_head_grads.bias = Mat<float>::Zero(1, n_labels);
        }
    }

    void zero_grads() {
        nn::zero_grads(grads);
        if (is_classifier) {
            seq_head_grads.dense_w.setZero();
            seq_head_grads.dense_b.setZero();
            seq_head_grads.out_w.setZero();
            seq_head_grads.out_b.setZero();
        } else {
            token_head_grads.weight.setZero();
            token_head_grads.bias.setZero();
        }
    }
};

struct Snapshot {
    nn::EncoderParams<float> params;
    nn::TokenHeadParams<float> token_head;
    nn::SeqHeadParams<float> seq_head;
};

// One optimizer step over a stacked batch; returns (summed loss, label count).
std::pair<double, long> train_batch(TrialModel& tm, const EncodedBatch& eb,
                                    uint64_t dropout_seed) {
    nn::ForwardCache<float> cache;
    nn::ForwardOptions fopt;
    fopt.train = true;
    fopt.dropout_seed = dropout_seed;
    Mat<float> hidden = tm.model.forward(eb.batch, fopt, &cache);

    if (tm.is_classifier) {
        const long B = eb.batch.n_seq;
        const long S = eb.batch.seq_len;
        Mat<float> bos(B, tm.model.config().hidden_size);
        std::vector<int32_t> targets(static_cast<size_t>(B));
        for (long b = 0; b < B; ++b) {
            bos.row(b) = hidden.row(b * S);
            targets[static_cast<size_t>(b)] = eb.labels[static_cast<size_t>(b * S)];
        }
        nn::SeqHeadCache<float> hc;
        Mat<float> logits = nn::seq_head_logits(tm.seq_head, bos, &hc);
        Mat<float> dlogits;
        auto [sum, count] = nn::softmax_nll_sum(logits, targets, &dlogits);
        if (count == 0) {
            return {0.0, 0};
        }
        dlogits *= 1.0f / static_cast<float>(count);
        Mat<float> dbos = nn::seq_head_backward(tm.seq_head, hc, dlogits, tm.seq_head_grads);
        Mat<float> dhidden = Mat<float>::Zero(hidden.rows(), hidden.cols());
        for (long b = 0; b < B; ++b) {
            dhidden.row(b * S) = dbos.row(b);
        }
        tm.model.backward(eb.batch, cache, std::move(dhidden), tm.grads);
        return {sum, count};
    }

    Mat<float> logits = nn::token_head_logits(tm.token_head, hidden);
    Mat<float> dlogits;
    auto [sum, count] = nn::softmax_nll_sum(logits, eb.labels, &dlogits);
    if (count == 0) {
        return {0.0, 0};
    }
    dlogits *= 1.0f / static_cast<float>(count);
    Mat<float> dhidden = nn::token_head_backward(tm.token_head, hidden, dlogits,
                                                 tm.token_head_grads);
    tm.model.backward(eb.batch, cache, std::move(dhidden), tm.grads);
    return {sum, count};
}

// Greedy per-position / per-sequence predictions on one split.
template <class Item>
std::vector<EncodedExample> encode_split(const bpe::BpeVocab& vocab, const TaskData& task,
                                         const std::vector<Item>& items, int max_len);

template <>
std::vector<EncodedExample> encode_split(const bpe::BpeVocab& vocab, const TaskData& task,
                                         const std::vector<LabeledSequence>& items, int max_len) {
    std::vector<EncodedExample> out;
    out.reserve(items.size());
    for (const auto& s : items) {
        out.push_back(encode_tagged(vocab, s, task.label_set, max_len));
    }
    return out;
}

template <>
std::vector<EncodedExample> encode_split(const bpe::BpeVocab& vocab, const TaskData& task,
                                         const std::vector<LabeledText>& items, int max_len) {
    std::vector<EncodedExample> out;
    out.reserve(items.size());
    for (const auto& s : items) {
        out.push_back(encode_classified(vocab, s, task.label_set, max_len));
    }
    return out;
}

// Predicted label strings for every labeled position of each example.
std::vector<std::vector<std::string>> predict_split(TrialModel& tm, const TaskData& task,
                                                    const std::vector<EncodedExample>& examples,
                                                    int batch_size, int pad_id) {
    std::vector<std::vector<std::string>> preds(examples.size());
    for (size_t base = 0; base < examples.size(); base += static_cast<size_t>(batch_size)) {
        size_t n = std::min<size_t>(batch_size, examples.size() - base);
        std::vector<EncodedExample> group(examples.begin() + static_cast<long>(base),
                                          examples.begin() + static_cast<long>(base + n));
        EncodedBatch eb = stack_examples(group, pad_id);
        Mat<float> hidden = tm.model.forward(eb.batch);
        if (tm.is_classifier) {
            const long S = eb.batch.seq_len;
            Mat<float> bos(static_cast<long>(n), tm.model.config().hidden_size);
            for (size_t b = 0; b < n; ++b) {
                bos.row(static_cast<long>(b)) = hidden.row(static_cast<long>(b) * S);
            }
            Mat<float> logits = nn::seq_head_logits(tm.seq_head, bos);
            for (size_t b = 0; b < n; ++b) {
                long arg = 0;
                logits.row(static_cast<long>(b)).maxCoeff(&arg);
                preds[base + b].push_back(task.label_set[static_cast<size_t>(arg)]);
            }
        } else {
            Mat<float> logits = nn::token_head_logits(tm.token_head, hidden);
            const long S = eb.batch.seq_len;
            for (size_t b = 0; b < n; ++b) {
                for (long pos : group[b].label_positions) {
                    long row = static_cast<long>(b) * S + pos;
                    long arg = 0;
                    logits.row(row).maxCoeff(&arg);
                    preds[base + b].push_back(task.label_set[static_cast<size_t>(arg)]);
                }
            }
        }
    }
    return preds;
}

// Gold label strings per example, truncated the same way the encoder was.
std::vector<std::vector<std::string>> gold_strings(const TaskData& task,
                                                   const std::vector<EncodedExample>& examples,
                                                   const std::vector<LabeledSequence>* seqs,
                                                   const std::vector<LabeledText>* txts) {
    std::vector<std::vector<std::string>> gold(examples.size());
    for (size_t i = 0; i < examples.size(); ++i) {
        if (txts) {
            gold[i].push_back((*txts)[i].label);
        } else {
            size_t n = examples[i].label_positions.size();
            for (size_t w = 0; w < n; ++w) {
                gold[i].push_back((*seqs)[i].tags[w]);
            }
        }
    }
    return gold;
}

double score_task(const TaskData& task, const std::vector<std::vector<std::string>>& gold,
                  const std::vector<std::vector<std::string>>& pred) {
    switch (task.metric) {
        case TaskMetric::micro_f1:
            return evalx::micro_f1(gold, pred);
        case TaskMetric::entity_f1:
            return evalx::entity_f1(gold, pred);
        default: {
            std::vector<std::string> g, p;
            for (size_t i = 0; i < gold.size(); ++i) {
                g.push_back(gold[i].at(0));
                p.push_back(pred[i].at(0));
            }
            return evalx::macro_f1(g, p, task.label_set);
        }
    }
}

}  // namespace

TrialResult train_one(const nn::Checkpoint& ckpt, const bpe::BpeVocab& vocab,
                      const TaskData& task, int batch_size, double learning_rate, int max_epochs,
                      int patience, double warmup_fraction, uint64_t seed, bool quiet) {
    auto t0 = std::chrono::steady_clock::now();
    TrialResult result;
    result.batch_size = batch_size;
    result.learning_rate = learning_rate;

    if (task.train_size() == 0) {
        throw DataError("empty train split");
    }
    const uint64_t trial_seed =
        mix_seed({seed, static_cast<uint64_t>(batch_size),
                  static_cast<uint64_t>(std::llround(learning_rate * 1e12))});

    try {
        TrialModel tm(ckpt, task, trial_seed);
        const int pad_id = vocab.pad_id();
        const int max_len = ckpt.config.max_positions - 2;

        std::vector<EncodedExample> train_ex, dev_ex, test_ex;
        const std::vector<LabeledSequence>* dev_seqs = nullptr;
        const std::vector<LabeledText>* dev_txts = nullptr;
        const std::vector<LabeledSequence>* test_seqs = nullptr;
        const std::vector<LabeledText>* test_txts = nullptr;
        if (task.kind == TaskKind::sequence_classification) {
            train_ex = encode_split(vocab, task, task.train_txt, max_len);
            dev_ex = encode_split(vocab, task, task.dev_txt, max_len);
            test_ex = encode_split(vocab, task, task.test_txt, max_len);
            dev_txts = &task.dev_txt;
            test_txts = &task.test_txt;
        } else {
            train_ex = encode_split(vocab, task, task.train_seq, max_len);
            dev_ex = encode_split(vocab, task, task.dev_seq, max_len);
            test_ex = encode_split(vocab, task, task.test_seq, max_len);
            dev_seqs = &task.dev_seq;
            test_seqs = &task.test_seq;
        }
        if (dev_ex.empty()) {
            throw ConfigError("empty dev set");
        }

        const int64_t steps_per_epoch =
            static_cast<int64_t>((train_ex.size() + batch_size - 1) / batch_size);
        nn::TrainSchedule sched;
        sched.total_updates = std::max<int64_t>(1, steps_per_epoch * max_epochs);
        sched.warmup_updates =
            std::min<int64_t>(sched.total_updates - 1,
                              std::max<int64_t>(warmup_fraction > 0.0 ? 1 : 0,
                                                std::llround(warmup_fraction *
                                                             static_cast<double>(
                                                                 sched.total_updates))));
        sched.peak_lr = learning_rate;
        sched.end_lr = 0.0;
        sched.power = 1.0;
        sched.tokens_per_update = 1;
        sched.seed = trial_seed;

        nn::AdamW<float> adam;
        adam.add_model(tm.model.params(), tm.grads);
        if (tm.is_classifier) {
            adam.add_slot(&tm.seq_head.dense_w, &tm.seq_head_grads.dense_w);
            adam.add_slot(&tm.seq_head.dense_b, &tm.seq_head_grads.dense_b);
            adam.add_slot(&tm.seq_head.out_w, &tm.seq_head_grads.out_w);
            adam.add_slot(&tm.seq_head.out_b, &tm.seq_head_grads.out_b);
        } else {
            adam.add_slot(&tm.token_head.weight, &tm.token_head_grads.weight);
            adam.add_slot(&tm.token_head.bias, &tm.token_head_grads.bias);
        }

        EarlyStopper stopper(patience);
        Snapshot best;
        int64_t step = 0;
        const auto dev_gold = gold_strings(task, dev_ex, dev_seqs, dev_txts);
        const auto test_gold = gold_strings(task, test_ex, test_seqs, test_txts);

        for (int epoch = 1; epoch <= max_epochs; ++epoch) {
            std::vector<size_t> order(train_ex.size());
            for (size_t i = 0; i < order.size(); ++i) {
                order[i] = i;
            }
            Rng shuffle_rng(mix_seed({trial_seed, static_cast<uint64_t>(epoch), 0x0EDull}));
            shuffle_rng.shuffle(order);

            for (size_t base = 0; base < order.size(); base += static_cast<size_t>(batch_size)) {
                size_t n = std::min<size_t>(batch_size, order.size() - base);
                std::vector<EncodedExample> group;
                group.reserve(n);
                for (size_t i = 0; i < n; ++i) {
                    group.push_back(train_ex[order[base + i]]);
                }
                EncodedBatch eb = stack_examples(group, pad_id);
                tm.zero_grads();
                ++step;
                auto [sum, count] =
                    train_batch(tm, eb, mix_seed({trial_seed, static_cast<uint64_t>(step)}));
                if (count == 0) {
                    continue;
                }
                if (!std::isfinite(sum)) {
                    throw DataError("non-finite loss at step " + std::to_string(step));
                }
                adam.step(nn::lr_at(sched, std::min(step, sched.total_updates)));
            }

            auto dev_pred = predict_split(tm, task, dev_ex, batch_size, pad_id);
            double dev_score = score_task(task, dev_gold, dev_pred);
            result.dev_curve.push_back(dev_score);
            result.epochs_run = epoch;
            bool improved = dev_score > stopper.best();
            bool stop = stopper.record(dev_score);
            if (improved) {
                best.params = tm.model.params();
                best.token_head = tm.token_head;
                best.seq_head = tm.seq_head;
            }
            if (!quiet) {
                std::cout << "  epoch " << epoch << " dev " << format_fixed(dev_score, 2)
                          << (improved ? " *" : "") << std::endl;
            }
            if (stop) {
                break;
            }
        }

        result.best_dev_score = stopper.best();
        result.best_epoch = stopper.best_epoch();
        // test with the best-dev-epoch weights
        tm.model.params() = std::move(best.params);
        tm.token_head = std::move(best.token_head);
        tm.seq_head = std::move(best.seq_head);
        auto test_pred = predict_split(tm, task, test_ex, batch_size, pad_id);
        result.test_score = score_task(task, test_gold, test_pred);
    } catch (const DataError& e) {
        result.failed = true;
        result.failure = e.what();
    }
    result.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

size_t select_best_trial(const std::vector<TrialResult>& trials) {
    bool any_ok = false;
    size_t best = 0;
    auto key = [](const TrialResult& r) {
        return std::make_tuple(-r.best_dev_score, r.learning_rate, r.batch_size);
    };
    for (size_t i = 0; i < trials.size(); ++i) {
        if (trials[i].failed) {
            continue;
        }
        if (!any_ok || key(trials[i]) < key(trials[best])) {
            best = i;
            any_ok = true;
        }
    }
    if (!any_ok) {
        throw DataError("grid failed: every trial aborted");
    }
    return best;
}

GridRunResult run_grid(const nn::Checkpoint& ckpt, const bpe::BpeVocab& vocab,
                       const TaskData& task, const GridSpec& grid, bool quiet) {
    auto t0 = std::chrono::steady_clock::now();
    if (grid.batch_sizes.empty() || grid.learning_rates.empty()) {
        throw ConfigError("empty grid");
    }
    GridRunResult out;
    for (int batch : grid.batch_sizes) {
        for (double lr : grid.learning_rates) {
            if (!quiet) {
                std::cout << "trial batch=" << batch << " lr=" << lr << std::endl;
            }
            out.trials.push_back(train_one(ckpt, vocab, task, batch, lr, grid.max_epochs,
                                           grid.patience, grid.warmup_fraction, grid.seed,
                                           quiet));
            if (!quiet && out.trials.back().failed) {
                std::cout << "  trial failed: " << out.trials.back().failure << std::endl;
            }
        }
    }
    out.best_index = select_best_trial(out.trials);
    out.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

std::string trials_to_csv(const std::string& task_name, const std::vector<TrialResult>& trials) {
    std::ostringstream out;
    out << "task,batch_size,learning_rate,epochs_run,best_epoch,best_dev_score,test_score,"
           "wall_clock_seconds,failed\n";
    for (const auto& t : trials) {
        out << task_name << ',' << t.batch_size << ',' << format_double(t.learning_rate) << ','
            << t.epochs_run << ',' << t.best_epoch << ',' << format_fixed(t.best_dev_score, 2)
            << ',' << format_fixed(t.test_score, 2) << ',' << format_double(t.wall_clock_seconds)
            << ',' << (t.failed ? 1 : 0) << '\n';
    }
    return out.str();
}

std::string curves_to_csv(const std::vector<TrialResult>& trials) {
    std::ostringstream out;
    out << "trial,batch_size,learning_rate,epoch,dev_score\n";
    for (size_t i = 0; i < trials.size(); ++i) {
        const auto& t = trials[i];
        for (size_t e = 0; e < t.dev_curve.size(); ++e) {
            out << i << ',' << t.batch_size << ',' << format_double(t.learning_rate) << ','
                << (e + 1) << ',' << format_fixed(t.dev_curve[e], 4) << '\n';
        }
    }
    return out.str();
}

FinetuneStageResult run_finetune_stage(const FinetuneStageOptions& opt) {
    TaskKind kind = task_kind_from_string(opt.task);
    nn::Checkpoint ckpt = nn::load_checkpoint(opt.checkpoint_path);
    bpe::BpeVocab vocab = nn::vocab_from_checkpoint(ckpt);
    TaskData task = load_task(kind, opt.data_dir, opt.grid.seed);
    GridRunResult grid = run_grid(ckpt, vocab, task, opt.grid, opt.quiet);

    ensure_dir(opt.out_dir);
    std::string task_name = task_kind_to_string(kind);
    write_text_file((fs::path(opt.out_dir) / "trials.csv").string(),
                    trials_to_csv(task_name, grid.trials));
    write_text_file((fs::path(opt.out_dir) / "curves.csv").string(),
                    curves_to_csv(grid.trials));
    const auto& best = grid.trials[grid.best_index];
    json bj{{"task", task_name},
            {"batch_size", best.batch_size},
            {"learning_rate", best.learning_rate},
            {"best_dev_score", best.best_dev_score},
            {"test_score", best.test_score},
            {"epochs_run", best.epochs_run},
            {"best_epoch", best.best_epoch},
            {"grid_wall_clock_seconds", grid.wall_clock_seconds}};
    write_text_file((fs::path(opt.out_dir) / "best.json").string(), bj.dump(2) + "\n");

    FinetuneStageResult res;
    res.grid = std::move(grid);
    res.task = task_name;
    return res;
}

}  // namespace desklm::ft
