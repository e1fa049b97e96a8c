#pragma once

#include <cstdint>
#include <vector>

#include "desklm/bpe.hpp"
#include "desklm/encoder.hpp"

namespace desklm::nn {

// The id facts masking needs; decoupled from BpeVocab so synthetic tests can
// fabricate one.
struct VocabInfo {
    int vocab_size = 0;
    int bos_id = 0;
    int pad_id = 1;
    int eos_id = 2;
    int unk_id = 3;
    int mask_id = 0;

    bool is_special(int id) const {
        return id == bos_id || id == pad_id || id == eos_id || id == unk_id || id == mask_id;
    }
    // ids eligible as random replacements: the byte/merge tokens
    int first_regular() const { return 4; }
    int regular_count() const { return mask_id - first_regular(); }
};

VocabInfo vocab_info(const bpe::BpeVocab& vocab);

struct MaskingConfig {
    double mask_prob = 0.15;
    double mask_token_frac = 0.8;  // replaced by <mask>
    double random_frac = 0.1;      // replaced by a random regular token
};

struct MaskedBatch {
    Batch batch;                  // ids after corruption
    std::vector<int32_t> labels;  // original id at selected positions, else kIgnoreLabel
    long n_selected = 0;
};

// Independently selects each maskable position (real, non-special) with
// probability mask_prob; of the selected, 80% become <mask>, 10% a random
// token, 10% stay. Deterministic given (seed, step), different across steps.
MaskedBatch apply_dynamic_masking(const Batch& clean, const VocabInfo& info,
                                  const MaskingConfig& cfg, uint64_t seed, uint64_t step);

// Mean masked-LM negative log likelihood over positions whose label is not
// kIgnoreLabel. count == 0 signals "skip this batch".
std::pair<double, long> mlm_loss(const Mat<float>& logits, const std::vector<int32_t>& labels);
std::pair<double, long> mlm_loss(const Mat<double>& logits, const std::vector<int32_t>& labels);

}  // namespace desklm::nn
