#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "desklm/bpe.hpp"
#include "desklm/encoder.hpp"

namespace desklm::ft {

enum class TaskKind { token_tagging, span_ner, sequence_classification };
enum class TaskMetric { micro_f1, entity_f1, macro_f1 };

TaskKind task_kind_from_string(const std::string& s);
std::string task_kind_to_string(TaskKind k);
TaskMetric metric_for(TaskKind k);

struct LabeledSequence {
    std::vector<std::string> tokens;
    std::vector<std::string> tags;
};

struct LabeledText {
    std::string id;
    std::string text;
    std::string label;
};

// CoNLL-style columns: token <tab> tag, blank line between sentences.
std::vector<LabeledSequence> load_conll_file(const std::string& path);

// TSV: id <tab> text <tab> label.
std::vector<LabeledText> load_tsv_file(const std::string& path);

struct TaskData {
    TaskKind kind = TaskKind::token_tagging;
    TaskMetric metric = TaskMetric::micro_f1;
    std::vector<std::string> label_set;  // ordered, unique
    // token tasks
    std::vector<LabeledSequence> train_seq, dev_seq, test_seq;
    // classification
    std::vector<LabeledText> train_txt, dev_txt, test_txt;

    size_t train_size() const {
        return kind == TaskKind::sequence_classification ? train_txt.size() : train_seq.size();
    }
};

// Loads train/dev/test from dir (token tasks: *.conll, classification:
// *.tsv). A missing dev split becomes a seeded 10% holdout of train. The
// label set comes from the train split, except classification which is fixed
// to {NOT, OFF}; dev/test labels are validated against it.
TaskData load_task(TaskKind kind, const std::string& dir, uint64_t seed);

// A tokenized labeled set ready for batching. For token tasks every word
// contributes its first subword position; remaining subwords carry
// kIgnoreLabel. For classification the label sits at position 0 (bos).
struct EncodedExample {
    std::vector<int32_t> ids;
    std::vector<int32_t> labels;       // aligned to ids
    std::vector<long> label_positions; // positions with a real label
};

EncodedExample encode_tagged(const bpe::BpeVocab& vocab, const LabeledSequence& sent,
                             const std::vector<std::string>& label_set, int max_len);
EncodedExample encode_classified(const bpe::BpeVocab& vocab, const LabeledText& item,
                                 const std::vector<std::string>& label_set, int max_len);

// Pads examples to a common length and stacks them into a batch plus a label
// grid aligned with it.
struct EncodedBatch {
    nn::Batch batch;
    std::vector<int32_t> labels;
};

EncodedBatch stack_examples(const std::vector<EncodedExample>& examples, int pad_id);

}  // namespace desklm::ft
