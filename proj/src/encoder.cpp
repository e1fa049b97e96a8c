#include "desklm/encoder.hpp"

namespace desklm::nn {

void validate_batch(const ModelConfig& cfg, const Batch& batch, int pad_id) {
    if (batch.n_seq <= 0 || batch.seq_len <= 0) {
        throw DataError("batch: empty shape");
    }
    if (batch.seq_len > cfg.max_positions - 2) {
        throw DataError("batch: seq_len " + std::to_string(batch.seq_len) +
                        " exceeds max_positions - 2 = " + std::to_string(cfg.max_positions - 2));
    }
    size_t need = static_cast<size_t>(batch.n_seq) * batch.seq_len;
    if (batch.ids.size() != need || batch.mask.size() != need) {
        throw DataError("batch: ids/mask size does not match n_seq*seq_len");
    }
    for (size_t i = 0; i < need; ++i) {
        if (batch.ids[i] < 0 || batch.ids[i] >= cfg.vocab_size) {
            throw DataError("batch: token id " + std::to_string(batch.ids[i]) +
                            " outside vocab of size " + std::to_string(cfg.vocab_size));
        }
        if (!batch.mask[i] && batch.ids[i] != pad_id) {
            throw DataError("batch: masked-out position must carry the pad id");
        }
    }
}

ThreadPool& pool_instance() {
    static ThreadPool pool;
    return pool;
}

}  // namespace desklm::nn

namespace desklm {

ThreadPool& global_pool() { return nn::pool_instance(); }

}  // namespace desklm
