#include "desklm/datasets.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "desklm/common.hpp"
#include "desklm/io.hpp"
#include "desklm/metrics.hpp"
#include "desklm/rng.hpp"

namespace desklm::ft {

namespace fs = std::filesystem;

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "pos" || s == "token_tagging") return TaskKind::token_tagging;
    if (s == "ner" || s == "span_ner") return TaskKind::span_ner;
    if (s == "offense" || s == "sequence_classification") {
        return TaskKind::sequence_classification;
    }
    throw ConfigError("unknown task '" + s + "' (expected pos|ner|offense)");
}

std::string task_kind_to_string(TaskKind k) {
    switch (k) {
        case TaskKind::token_tagging: return "pos";
        case TaskKind::span_ner: return "ner";
        default: return "offense";
    }
}

TaskMetric metric_for(TaskKind k) {
    switch (k) {
        case TaskKind::token_tagging: return TaskMetric::micro_f1;
        case TaskKind::span_ner: return TaskMetric::entity_f1;
        default: return TaskMetric::macro_f1;
    }
}

std::vector<LabeledSequence> load_conll_file(const std::string& path) {
    LineReader reader(path);
    std::vector<LabeledSequence> sentences;
    LabeledSequence current;
    std::string line;
    auto flush = [&] {
        if (!current.tokens.empty()) {
            sentences.push_back(std::move(current));
            current = LabeledSequence{};
        }
    };
    while (reader.next(line)) {
        if (line.empty()) {
            flush();
            continue;
        }
        size_t tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size()) {
            throw DataError("parse error at " + path + " line " +
                            std::to_string(reader.line_number()) +
                            ": expected 'token<TAB>tag'");
        }
        current.tokens.push_back(line.substr(0, tab));
        current.tags.push_back(line.substr(tab + 1));
    }
    flush();
    return sentences;
}

std::vector<LabeledText> load_tsv_file(const std::string& path) {
    LineReader reader(path);
    std::vector<LabeledText> items;
    std::string line;
    while (reader.next(line)) {
        if (line.empty()) {
            continue;
        }
        size_t t1 = line.find('\t');
        size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos) {
            throw DataError("parse error at " + path + " line " +
                            std::to_string(reader.line_number()) +
                            ": expected 'id<TAB>text<TAB>label'");
        }
        LabeledText item;
        item.id = line.substr(0, t1);
        item.text = line.substr(t1 + 1, t2 - t1 - 1);
        item.label = line.substr(t2 + 1);
        items.push_back(std::move(item));
    }
    return items;
}

namespace {

// All files named <split>*.ext in sorted order, so multi-source tasks can
// ship e.g. train_atis.conll, train_boun.conll and have them concatenated
// split-wise.
std::vector<std::string> find_split_files(const std::string& dir, const std::string& split,
                                          const char* ext) {
    std::vector<std::string> files;
    if (!fs::is_directory(dir)) {
        throw DataError("dataset directory not found: " + dir);
    }
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) {
            continue;
        }
        std::string name = entry.path().filename().string();
        if (name.rfind(split, 0) == 0 && entry.path().extension() == ext) {
            files.push_back(entry.path().string());
        }
    }
    std::sort(files.begin(), files.end());
    return files;
}

std::string find_split(const std::string& dir, const std::string& split, const char* ext,
                       bool required) {
    fs::path p = fs::path(dir) / (split + ext);
    if (fs::exists(p)) {
        return p.string();
    }
    if (required) {
        throw DataError("missing dataset file: " + p.string());
    }
    return {};
}

std::vector<LabeledSequence> load_conll_split(const std::string& dir, const std::string& split,
                                              bool required) {
    std::vector<LabeledSequence> out;
    for (const auto& path : find_split_files(dir, split, ".conll")) {
        auto part = load_conll_file(path);
        std::move(part.begin(), part.end(), std::back_inserter(out));
    }
    if (out.empty() && required) {
        throw DataError("missing dataset file: " + (fs::path(dir) / (split + ".conll")).string());
    }
    return out;
}

void validate_tags(const std::vector<LabeledSequence>& data, const std::set<std::string>& labels,
                   const std::string& what) {
    for (const auto& sent : data) {
        for (const auto& tag : sent.tags) {
            if (!labels.count(tag)) {
                throw DataError("unknown label '" + tag + "' in " + what + " split");
            }
        }
    }
}

void validate_labels(const std::vector<LabeledText>& data, const std::set<std::string>& labels,
                     const std::string& what) {
    for (const auto& item : data) {
        if (!labels.count(item.label)) {
            throw DataError("unknown label '" + item.label + "' in " + what + " split");
        }
    }
}

template <class Item>
void holdout_dev(std::vector<Item>& train, std::vector<Item>& dev, uint64_t seed) {
    // seeded 10% holdout when the task ships no dev split
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng rng(mix_seed({seed, 0xDE5ull}));
    rng.shuffle(order);
    size_t n_dev = std::max<size_t>(1, train.size() / 10);
    std::set<size_t> dev_idx(order.begin(), order.begin() + static_cast<long>(n_dev));
    std::vector<Item> new_train;
    for (size_t i = 0; i < train.size(); ++i) {
        (dev_idx.count(i) ? dev : new_train).push_back(std::move(train[i]));
    }
    train = std::move(new_train);
}

}  // namespace

TaskData load_task(TaskKind kind, const std::string& dir, uint64_t seed) {
    TaskData task;
    task.kind = kind;
    task.metric = metric_for(kind);

    if (kind == TaskKind::sequence_classification) {
        task.train_txt = load_tsv_file(find_split(dir, "train", ".tsv", true));
        std::string dev_path = find_split(dir, "dev", ".tsv", false);
        task.test_txt = load_tsv_file(find_split(dir, "test", ".tsv", true));
        if (!dev_path.empty()) {
            task.dev_txt = load_tsv_file(dev_path);
        } else {
            holdout_dev(task.train_txt, task.dev_txt, seed);
        }
        task.label_set = {"NOT", "OFF"};
        std::set<std::string> labels(task.label_set.begin(), task.label_set.end());
        validate_labels(task.train_txt, labels, "train");
        validate_labels(task.dev_txt, labels, "dev");
        validate_labels(task.test_txt, labels, "test");
        if (task.dev_txt.empty()) {
            throw ConfigError("empty dev set for classification task");
        }
        return task;
    }

    task.train_seq = load_conll_split(dir, "train", true);
    task.dev_seq = load_conll_split(dir, "dev", false);
    task.test_seq = load_conll_split(dir, "test", true);
    if (task.dev_seq.empty()) {
        holdout_dev(task.train_seq, task.dev_seq, seed);
    }
    if (task.train_seq.empty()) {
        throw DataError("empty train split in " + dir);
    }
    if (task.dev_seq.empty()) {
        throw ConfigError("empty dev set in " + dir);
    }

    std::set<std::string> labels;
    for (const auto& sent : task.train_seq) {
        for (const auto& tag : sent.tags) {
            labels.insert(tag);
        }
    }
    task.label_set.assign(labels.begin(), labels.end());
    validate_tags(task.dev_seq, labels, "dev");
    validate_tags(task.test_seq, labels, "test");

    if (kind == TaskKind::span_ner) {
        // structural check: every tag must decode as BIO
        for (const auto* split : {&task.train_seq, &task.dev_seq, &task.test_seq}) {
            for (const auto& sent : *split) {
                evalx::bio_spans(sent.tags);
            }
        }
    }
    return task;
}

namespace {

int32_t label_index(const std::vector<std::string>& label_set, const std::string& label) {
    auto it = std::find(label_set.begin(), label_set.end(), label);
    if (it == label_set.end()) {
        throw DataError("unknown label '" + label + "'");
    }
    return static_cast<int32_t>(it - label_set.begin());
}

}  // namespace

EncodedExample encode_tagged(const bpe::BpeVocab& vocab, const LabeledSequence& sent,
                             const std::vector<std::string>& label_set, int max_len) {
    if (sent.tokens.size() != sent.tags.size()) {
        throw DataError("tagged sentence with mismatched token/tag counts");
    }
    EncodedExample ex;
    ex.ids.push_back(vocab.bos_id());
    ex.labels.push_back(nn::kIgnoreLabel);
    for (size_t w = 0; w < sent.tokens.size(); ++w) {
        auto enc = bpe::encode(vocab, sent.tokens[w], /*add_specials=*/false);
        if (enc.ids.empty()) {
            throw DataError("word '" + sent.tokens[w] + "' tokenizes to nothing");
        }
        if (static_cast<int>(ex.ids.size() + enc.ids.size()) > max_len - 1) {
            break;  // truncate whole words that no longer fit
        }
        for (size_t k = 0; k < enc.ids.size(); ++k) {
            ex.ids.push_back(enc.ids[k]);
            if (k == 0) {
                ex.label_positions.push_back(static_cast<long>(ex.ids.size()) - 1);
                ex.labels.push_back(label_index(label_set, sent.tags[w]));
            } else {
                ex.labels.push_back(nn::kIgnoreLabel);
            }
        }
    }
    ex.ids.push_back(vocab.eos_id());
    ex.labels.push_back(nn::kIgnoreLabel);
    return ex;
}

EncodedExample encode_classified(const bpe::BpeVocab& vocab, const LabeledText& item,
                                 const std::vector<std::string>& label_set, int max_len) {
    EncodedExample ex;
    auto enc = bpe::encode(vocab, item.text, /*add_specials=*/false);
    ex.ids.push_back(vocab.bos_id());
    for (size_t k = 0; k < enc.ids.size() && static_cast<int>(ex.ids.size()) < max_len - 1; ++k) {
        ex.ids.push_back(enc.ids[k]);
    }
    ex.ids.push_back(vocab.eos_id());
    ex.labels.assign(ex.ids.size(), nn::kIgnoreLabel);
    ex.labels[0] = label_index(label_set, item.label);
    ex.label_positions.push_back(0);
    return ex;
}

EncodedBatch stack_examples(const std::vector<EncodedExample>& examples, int pad_id) {
    if (examples.empty()) {
        throw DataError("cannot stack an empty batch");
    }
    size_t max_len = 0;
    for (const auto& ex : examples) {
        max_len = std::max(max_len, ex.ids.size());
    }
    EncodedBatch out;
    out.batch.n_seq = static_cast<int>(examples.size());
    out.batch.seq_len = static_cast<int>(max_len);
    out.batch.ids.assign(examples.size() * max_len, pad_id);
    out.batch.mask.assign(examples.size() * max_len, 0);
    out.labels.assign(examples.size() * max_len, nn::kIgnoreLabel);
    for (size_t i = 0; i < examples.size(); ++i) {
        const auto& ex = examples[i];
        for (size_t t = 0; t < ex.ids.size(); ++t) {
            out.batch.ids[i * max_len + t] = ex.ids[t];
            out.batch.mask[i * max_len + t] = 1;
            out.labels[i * max_len + t] = ex.labels[t];
        }
    }
    return out;
}

}  // namespace desklm::ft
