#include "desklm/masking.hpp"

#include "desklm/rng.hpp"

namespace desklm::nn {

VocabInfo vocab_info(const bpe::BpeVocab& vocab) {
    VocabInfo info;
    info.vocab_size = vocab.size();
    info.bos_id = vocab.bos_id();
    info.pad_id = vocab.pad_id();
    info.eos_id = vocab.eos_id();
    info.unk_id = vocab.unk_id();
    info.mask_id = vocab.mask_id();
    return info;
}

MaskedBatch apply_dynamic_masking(const Batch& clean, const VocabInfo& info,
                                  const MaskingConfig& cfg, uint64_t seed, uint64_t step) {
    if (!(cfg.mask_prob > 0.0) || cfg.mask_prob >= 1.0) {
        throw ConfigError("mask_prob must lie in (0, 1)");
    }
    if (cfg.mask_token_frac < 0.0 || cfg.random_frac < 0.0 ||
        cfg.mask_token_frac + cfg.random_frac > 1.0) {
        throw ConfigError("corruption fractions must be nonnegative and sum to at most 1");
    }
    MaskedBatch out;
    out.batch = clean;
    out.labels.assign(clean.ids.size(), kIgnoreLabel);

    Rng rng(mix_seed({seed, step, 0x3A5Cull}));
    for (size_t i = 0; i < clean.ids.size(); ++i) {
        int32_t id = clean.ids[i];
        if (!clean.mask[i] || info.is_special(id)) {
            continue;
        }
        if (rng.next_double() >= cfg.mask_prob) {
            continue;
        }
        out.labels[i] = id;
        ++out.n_selected;
        double c = rng.next_double();
        if (c < cfg.mask_token_frac) {
            out.batch.ids[i] = info.mask_id;
        } else if (c < cfg.mask_token_frac + cfg.random_frac) {
            out.batch.ids[i] =
                info.first_regular() + static_cast<int32_t>(rng.bounded(
                                           static_cast<uint64_t>(info.regular_count())));
        }
        // else: keep the original token, label still set
    }
    return out;
}

namespace {

template <class T>
std::pair<double, long> mlm_loss_impl(const Mat<T>& logits, const std::vector<int32_t>& labels) {
    auto [sum, count] = softmax_nll_sum<T>(logits, labels, nullptr);
    if (count == 0) {
        return {0.0, 0};
    }
    return {sum / static_cast<double>(count), count};
}

}  // namespace

std::pair<double, long> mlm_loss(const Mat<float>& logits, const std::vector<int32_t>& labels) {
    return mlm_loss_impl(logits, labels);
}

std::pair<double, long> mlm_loss(const Mat<double>& logits, const std::vector<int32_t>& labels) {
    return mlm_loss_impl(logits, labels);
}

}  // namespace desklm::nn
