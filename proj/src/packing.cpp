#include "desklm/packing.hpp"

#include "desklm/common.hpp"
#include "desklm/threadpool.hpp"

namespace desklm::nn {

std::vector<int32_t> tokenize_to_stream(const bpe::BpeVocab& vocab,
                                        const std::vector<corpus::Document>& docs) {
    std::vector<std::vector<int32_t>> parts(docs.size());
    global_pool().parallel_for(0, docs.size(), [&](size_t i) {
        auto enc = bpe::encode(vocab, docs[i].text, /*add_specials=*/false);
        parts[i] = std::move(enc.ids);
        parts[i].push_back(vocab.eos_id());
    });
    std::vector<int32_t> stream;
    for (auto& part : parts) {
        stream.insert(stream.end(), part.begin(), part.end());
    }
    return stream;
}

PackedSequences pack_stream(const std::vector<int32_t>& stream, int seq_len, int bos_id,
                            int pad_id) {
    if (seq_len < 2) {
        throw ConfigError("seq_len must be at least 2");
    }
    if (stream.empty()) {
        throw DataError("empty token stream: nothing to pack");
    }
    const long block = seq_len - 1;
    PackedSequences out;
    out.seq_len = seq_len;
    out.n_seq = static_cast<long>((stream.size() + block - 1) / block);
    out.ids.assign(static_cast<size_t>(out.n_seq) * seq_len, pad_id);
    out.mask.assign(static_cast<size_t>(out.n_seq) * seq_len, 0);
    for (long s = 0; s < out.n_seq; ++s) {
        size_t base = static_cast<size_t>(s) * seq_len;
        out.ids[base] = bos_id;
        out.mask[base] = 1;
        size_t start = static_cast<size_t>(s) * block;
        size_t take = std::min<size_t>(block, stream.size() - start);
        for (size_t k = 0; k < take; ++k) {
            out.ids[base + 1 + k] = stream[start + k];
            out.mask[base + 1 + k] = 1;
        }
    }
    return out;
}

Batch gather_batch(const PackedSequences& packed, const std::vector<long>& rows) {
    Batch b;
    b.n_seq = static_cast<int>(rows.size());
    b.seq_len = packed.seq_len;
    b.ids.resize(rows.size() * static_cast<size_t>(packed.seq_len));
    b.mask.resize(rows.size() * static_cast<size_t>(packed.seq_len));
    for (size_t i = 0; i < rows.size(); ++i) {
        size_t src = static_cast<size_t>(rows[i]) * packed.seq_len;
        size_t dst = i * static_cast<size_t>(packed.seq_len);
        std::copy_n(packed.ids.begin() + static_cast<long>(src), packed.seq_len,
                    b.ids.begin() + static_cast<long>(dst));
        std::copy_n(packed.mask.begin() + static_cast<long>(src), packed.seq_len,
                    b.mask.begin() + static_cast<long>(dst));
    }
    return b;
}

}  // namespace desklm::nn
