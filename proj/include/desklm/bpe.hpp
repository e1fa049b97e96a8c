#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "desklm/corpus.hpp"

namespace desklm::bpe {

// Reversible byte <-> printable-codepoint table used by byte-level BPE.
// Printable bytes map to themselves, the rest to codepoints from 256 up,
// assigned in byte order. Token strings are UTF-8 over these codepoints.
const std::array<std::string, 256>& byte_to_printable();
// Inverse lookup; input is one codepoint.
const std::unordered_map<uint32_t, uint8_t>& printable_to_byte();

std::string map_bytes_to_printable(const std::string& bytes);
std::string unmap_printable_to_bytes(const std::string& printable);

struct SpecialTokens {
    std::string bos = "<s>";
    std::string pad = "<pad>";
    std::string eos = "</s>";
    std::string unk = "<unk>";
    std::string mask = "<mask>";

    std::vector<std::string> leading() const { return {bos, pad, eos, unk}; }
    static constexpr int count() { return 5; }
};

// Number of ids that are not learned merges: 4 leading specials + 256 byte
// tokens + trailing <mask>.
constexpr int kLeadingSpecials = 4;
constexpr int kByteTokens = 256;
constexpr int kReservedTokens = kLeadingSpecials + kByteTokens + 1;

// Trained byte-level BPE vocabulary. Id layout: bos=0, pad=1, eos=2, unk=3,
// byte tokens 4..259 (by byte value), merge results 260.., mask = last id.
class BpeVocab {
   public:
    BpeVocab() = default;

    static BpeVocab build(std::vector<std::pair<std::string, std::string>> merges,
                          SpecialTokens specials = {});

    int size() const { return static_cast<int>(id_to_token_.size()); }
    int bos_id() const { return 0; }
    int pad_id() const { return 1; }
    int eos_id() const { return 2; }
    int unk_id() const { return 3; }
    int mask_id() const { return size() - 1; }
    bool is_special(int id) const { return id < kLeadingSpecials || id == mask_id(); }

    const SpecialTokens& specials() const { return specials_; }
    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
    const std::vector<std::string>& id_to_token() const { return id_to_token_; }
    const std::string& token(int id) const { return id_to_token_.at(static_cast<size_t>(id)); }
    int token_id(const std::string& tok) const;

    // rank of merge producing (left, right), or -1
    int merge_rank(int left_id, int right_id) const;
    // id of the token produced by merge `rank`
    int merge_result(int rank) const { return kLeadingSpecials + kByteTokens + rank; }

   private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::pair<std::string, std::string>> merges_;
    std::unordered_map<uint64_t, int> rank_by_pair_;  // (left_id<<32)|right_id -> rank
    SpecialTokens specials_;
};

struct Encoding {
    std::vector<int> ids;
    // per-token byte range into the source text; specials get empty ranges
    std::vector<std::pair<size_t, size_t>> offsets;
};

// Split into alternating runs of whitespace and non-whitespace bytes; merges
// never cross a run boundary.
std::vector<std::pair<size_t, size_t>> split_chunks(const std::string& text);

// Total over arbitrary bytes; every input byte is covered by exactly one
// token.
Encoding encode(const BpeVocab& vocab, const std::string& text, bool add_specials);

// Drops special tokens, concatenates subwords and maps back to raw bytes.
// Throws DataError for an id outside the vocabulary.
std::string decode(const BpeVocab& vocab, const std::vector<int>& ids);

// Learns merges greedily by highest pair frequency over whitespace-delimited
// chunks, ties broken by lexicographically smallest (left, right). Stops
// early when no pair occurs twice; *exhausted reports that.
BpeVocab train_vocab(const std::vector<corpus::Document>& sample, int target_size,
                     const SpecialTokens& specials = {}, bool* exhausted = nullptr);

void save_vocab(const BpeVocab& vocab, const std::string& dir);
BpeVocab load_vocab(const std::string& dir);

// Parses the merges file body (optionally starting with a "#version" line).
std::vector<std::pair<std::string, std::string>> parse_merges_text(const std::string& text);
std::string merges_to_text(const BpeVocab& vocab);

struct TokenizerStageOptions {
    std::string manifest_path;
    int vocab_size = 4096;
    uint64_t sample_bytes = 0;  // 0 = whole corpus
    uint64_t seed = 1;
    std::string out_dir;
};

BpeVocab run_tokenizer_stage(const TokenizerStageOptions& opt);

}  // namespace desklm::bpe
