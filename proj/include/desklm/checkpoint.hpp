#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "desklm/bpe.hpp"
#include "desklm/encoder.hpp"
#include "desklm/optimizer.hpp"

namespace desklm::nn {

// Optimizer moments carried inside a checkpoint so training can resume
// bit-exactly.
struct OptimizerState {
    int64_t step = 0;
    std::vector<Mat<float>> m;  // manifest order
    std::vector<Mat<float>> v;
};

struct Checkpoint {
    ModelConfig config;
    EncoderParams<float> params;
    uint64_t step = 0;
    uint64_t rng_seed = 0;
    std::optional<OptimizerState> optimizer;
    // merges body of the tokenizer this model was trained with, so the
    // checkpoint is self-contained for fine-tuning and scoring
    std::optional<std::string> tokenizer_merges;
};

// Binary layout: magic + version + header length + JSON header (config, step,
// rng state, tensor directory with names/shapes/offsets) + raw little-endian
// f32 blobs. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

bpe::BpeVocab vocab_from_checkpoint(const Checkpoint& ckpt);

inline OptimizerState capture_optimizer(AdamW<float>& opt) {
    OptimizerState st;
    st.step = opt.step_count();
    for (size_t i = 0; i < opt.slot_count(); ++i) {
        st.m.push_back(opt.moment1(i));
        st.v.push_back(opt.moment2(i));
    }
    return st;
}

inline void restore_optimizer(const OptimizerState& st, AdamW<float>& opt) {
    if (st.m.size() != opt.slot_count() || st.v.size() != opt.slot_count()) {
        throw DataError("optimizer state slot count mismatch");
    }
    opt.set_step_count(st.step);
    for (size_t i = 0; i < opt.slot_count(); ++i) {
        opt.moment1(i) = st.m[i];
        opt.moment2(i) = st.v[i];
    }
}

}  // namespace desklm::nn
