#pragma once

#include <cstdint>
#include <vector>

#include "desklm/bpe.hpp"
#include "desklm/corpus.hpp"
#include "desklm/encoder.hpp"

namespace desklm::nn {

// Tokenized corpus as one contiguous stream: document tokens followed by an
// eos separator, document boundaries otherwise ignored.
std::vector<int32_t> tokenize_to_stream(const bpe::BpeVocab& vocab,
                                        const std::vector<corpus::Document>& docs);

// The stream chopped into fixed-length rows: [bos] + (seq_len - 1) stream
// tokens; the final partial row is padded. Every stream token lands in
// exactly one row.
struct PackedSequences {
    int seq_len = 0;
    long n_seq = 0;
    std::vector<int32_t> ids;   // n_seq * seq_len
    std::vector<uint8_t> mask;  // 1=real
};

PackedSequences pack_stream(const std::vector<int32_t>& stream, int seq_len, int bos_id,
                            int pad_id);

// Copies the selected rows into a batch.
Batch gather_batch(const PackedSequences& packed, const std::vector<long>& rows);

}  // namespace desklm::nn
