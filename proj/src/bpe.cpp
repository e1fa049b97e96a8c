#include "desklm/bpe.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <queue>
#include <sstream>
#include <unordered_set>

#include "desklm/common.hpp"
#include "desklm/io.hpp"
#include "desklm/threadpool.hpp"

namespace desklm::bpe {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string codepoint_to_utf8(uint32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return out;
}

uint32_t utf8_next(const std::string& s, size_t& i) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) {
        i += 1;
        return c;
    }
    if ((c & 0xE0) == 0xC0) {
        uint32_t cp = (c & 0x1Fu) << 6 | (static_cast<unsigned char>(s[i + 1]) & 0x3Fu);
        i += 2;
        return cp;
    }
    uint32_t cp = (c & 0x0Fu) << 12 | (static_cast<unsigned char>(s[i + 1]) & 0x3Fu) << 6 |
                  (static_cast<unsigned char>(s[i + 2]) & 0x3Fu);
    i += 3;
    return cp;
}

bool is_printable_byte(int b) {
    return (b >= 33 && b <= 126) || (b >= 161 && b <= 172) || (b >= 174 && b <= 255);
}

bool is_space_byte(unsigned char b) {
    return b == ' ' || b == '\t' || b == '\n' || b == '\r' || b == '\f' || b == '\v';
}

uint64_t pack_pair(int left, int right) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(left)) << 32) |
           static_cast<uint32_t>(right);
}

}  // namespace

const std::array<std::string, 256>& byte_to_printable() {
    static const std::array<std::string, 256> table = [] {
        std::array<std::string, 256> t;
        uint32_t extra = 256;
        for (int b = 0; b < 256; ++b) {
            if (is_printable_byte(b)) {
                t[static_cast<size_t>(b)] = codepoint_to_utf8(static_cast<uint32_t>(b));
            } else {
                t[static_cast<size_t>(b)] = codepoint_to_utf8(extra++);
            }
        }
        return t;
    }();
    return table;
}

const std::unordered_map<uint32_t, uint8_t>& printable_to_byte() {
    static const std::unordered_map<uint32_t, uint8_t> inverse = [] {
        std::unordered_map<uint32_t, uint8_t> m;
        const auto& fwd = byte_to_printable();
        for (int b = 0; b < 256; ++b) {
            size_t i = 0;
            uint32_t cp = utf8_next(fwd[static_cast<size_t>(b)], i);
            m.emplace(cp, static_cast<uint8_t>(b));
        }
        return m;
    }();
    return inverse;
}

std::string map_bytes_to_printable(const std::string& bytes) {
    const auto& table = byte_to_printable();
    std::string out;
    out.reserve(bytes.size());
    for (unsigned char c : bytes) {
        out += table[c];
    }
    return out;
}

std::string unmap_printable_to_bytes(const std::string& printable) {
    const auto& inv = printable_to_byte();
    std::string out;
    out.reserve(printable.size());
    size_t i = 0;
    while (i < printable.size()) {
        uint32_t cp = utf8_next(printable, i);
        auto it = inv.find(cp);
        if (it == inv.end()) {
            throw DataError("token contains codepoint outside the byte alphabet");
        }
        out.push_back(static_cast<char>(it->second));
    }
    return out;
}

BpeVocab BpeVocab::build(std::vector<std::pair<std::string, std::string>> merges,
                         SpecialTokens specials) {
    BpeVocab v;
    v.specials_ = specials;
    v.merges_ = std::move(merges);
    v.id_to_token_.reserve(static_cast<size_t>(kReservedTokens) + v.merges_.size());
    for (const auto& s : specials.leading()) {
        v.id_to_token_.push_back(s);
    }
    const auto& table = byte_to_printable();
    for (int b = 0; b < 256; ++b) {
        v.id_to_token_.push_back(table[static_cast<size_t>(b)]);
    }
    for (const auto& [l, r] : v.merges_) {
        v.id_to_token_.push_back(l + r);
    }
    v.id_to_token_.push_back(specials.mask);
    for (size_t i = 0; i < v.id_to_token_.size(); ++i) {
        auto [it, fresh] = v.token_to_id_.emplace(v.id_to_token_[i], static_cast<int>(i));
        if (!fresh) {
            throw DataError("duplicate token in vocabulary: " + v.id_to_token_[i]);
        }
    }
    for (size_t rank = 0; rank < v.merges_.size(); ++rank) {
        const auto& [l, r] = v.merges_[rank];
        auto li = v.token_to_id_.find(l);
        auto ri = v.token_to_id_.find(r);
        if (li == v.token_to_id_.end() || ri == v.token_to_id_.end() ||
            li->second >= v.merge_result(static_cast<int>(rank)) ||
            ri->second >= v.merge_result(static_cast<int>(rank))) {
            throw DataError("merge " + std::to_string(rank) + " references a token not formed earlier");
        }
        v.rank_by_pair_.emplace(pack_pair(li->second, ri->second), static_cast<int>(rank));
    }
    return v;
}

int BpeVocab::token_id(const std::string& tok) const {
    auto it = token_to_id_.find(tok);
    return it == token_to_id_.end() ? -1 : it->second;
}

int BpeVocab::merge_rank(int left_id, int right_id) const {
    auto it = rank_by_pair_.find(pack_pair(left_id, right_id));
    return it == rank_by_pair_.end() ? -1 : it->second;
}

std::vector<std::pair<size_t, size_t>> split_chunks(const std::string& text) {
    std::vector<std::pair<size_t, size_t>> chunks;
    size_t i = 0;
    while (i < text.size()) {
        bool ws = is_space_byte(static_cast<unsigned char>(text[i]));
        size_t j = i + 1;
        while (j < text.size() && is_space_byte(static_cast<unsigned char>(text[j])) == ws) {
            ++j;
        }
        chunks.emplace_back(i, j - i);
        i = j;
    }
    return chunks;
}

namespace {

// One chunk during encoding: doubly linked token list plus a (rank, position)
// min-heap. Equal-rank candidates merge left to right, which reproduces the
// batch "apply best merge everywhere, repeat" order.
struct EncodeNode {
    int tok;
    int prev;
    int next;
    size_t start;
    size_t end;
    bool alive;
};

void encode_chunk(const BpeVocab& vocab, const std::string& text, size_t chunk_start,
                  size_t chunk_len, Encoding& out) {
    std::vector<EncodeNode> nodes;
    nodes.reserve(chunk_len);
    for (size_t k = 0; k < chunk_len; ++k) {
        unsigned char b = static_cast<unsigned char>(text[chunk_start + k]);
        EncodeNode n;
        n.tok = kLeadingSpecials + b;
        n.prev = static_cast<int>(k) - 1;
        n.next = k + 1 < chunk_len ? static_cast<int>(k) + 1 : -1;
        n.start = chunk_start + k;
        n.end = chunk_start + k + 1;
        n.alive = true;
        nodes.push_back(n);
    }

    using HeapItem = std::pair<int, int>;  // (rank, left node index)
    std::priority_queue<HeapItem, std::vector<HeapItem>, std::greater<>> heap;
    auto push_pair = [&](int i) {
        if (i < 0) {
            return;
        }
        int j = nodes[static_cast<size_t>(i)].next;
        if (j < 0) {
            return;
        }
        int rank = vocab.merge_rank(nodes[static_cast<size_t>(i)].tok,
                                    nodes[static_cast<size_t>(j)].tok);
        if (rank >= 0) {
            heap.emplace(rank, i);
        }
    };
    for (size_t k = 0; k + 1 < nodes.size(); ++k) {
        push_pair(static_cast<int>(k));
    }

    while (!heap.empty()) {
        auto [rank, i] = heap.top();
        heap.pop();
        auto& left = nodes[static_cast<size_t>(i)];
        if (!left.alive) {
            continue;
        }
        int j = left.next;
        if (j < 0) {
            continue;
        }
        auto& right = nodes[static_cast<size_t>(j)];
        if (vocab.merge_rank(left.tok, right.tok) != rank) {
            continue;  // stale entry
        }
        left.tok = vocab.merge_result(rank);
        left.end = right.end;
        right.alive = false;
        left.next = right.next;
        if (right.next >= 0) {
            nodes[static_cast<size_t>(right.next)].prev = i;
        }
        push_pair(left.prev);
        push_pair(i);
    }

    for (const auto& n : nodes) {
        if (n.alive) {
            out.ids.push_back(n.tok);
            out.offsets.emplace_back(n.start, n.end);
        }
    }
}

}  // namespace

Encoding encode(const BpeVocab& vocab, const std::string& text, bool add_specials) {
    Encoding out;
    if (add_specials) {
        out.ids.push_back(vocab.bos_id());
        out.offsets.emplace_back(0, 0);
    }
    for (const auto& [start, len] : split_chunks(text)) {
        encode_chunk(vocab, text, start, len, out);
    }
    if (add_specials) {
        out.ids.push_back(vocab.eos_id());
        out.offsets.emplace_back(text.size(), text.size());
    }
    return out;
}

std::string decode(const BpeVocab& vocab, const std::vector<int>& ids) {
    std::string printable;
    for (int id : ids) {
        if (id < 0 || id >= vocab.size()) {
            throw DataError("decode: unknown token id " + std::to_string(id));
        }
        if (vocab.is_special(id)) {
            continue;
        }
        printable += vocab.token(id);
    }
    return unmap_printable_to_bytes(printable);
}

namespace {

// Trainer state over the distinct-chunk table.
struct TrainerChunk {
    std::vector<int> syms;  // symbol ids: 0..255 bytes, then merge results
    uint64_t count = 0;
};

struct PairEntry {
    uint64_t count;
    int left;
    int right;
};

}  // namespace

BpeVocab train_vocab(const std::vector<corpus::Document>& sample, int target_size,
                     const SpecialTokens& specials, bool* exhausted) {
    if (exhausted) {
        *exhausted = false;
    }
    if (target_size < kReservedTokens) {
        throw ConfigError("vocab size " + std::to_string(target_size) + " is below the minimum " +
                          std::to_string(kReservedTokens) +
                          " (256 byte tokens + " + std::to_string(SpecialTokens::count()) +
                          " specials)");
    }
    if (sample.empty()) {
        throw DataError("insufficient data: empty vocabulary sample");
    }
    const int n_merges = target_size - kReservedTokens;

    // Distinct chunks with frequencies; counting runs in parallel over
    // documents, merged deterministically (counts are order independent).
    std::unordered_map<std::string, uint64_t> chunk_counts;
    {
        size_t n_threads = std::max<size_t>(1, global_pool().size());
        size_t block = (sample.size() + n_threads - 1) / n_threads;
        std::vector<std::unordered_map<std::string, uint64_t>> partial(n_threads);
        global_pool().parallel_for(0, n_threads, [&](size_t w) {
            size_t lo = w * block;
            size_t hi = std::min(sample.size(), lo + block);
            auto& local = partial[w];
            for (size_t d = lo; d < hi; ++d) {
                const std::string& text = sample[d].text;
                for (const auto& [start, len] : split_chunks(text)) {
                    local[text.substr(start, len)] += 1;
                }
            }
        });
        for (auto& local : partial) {
            for (auto& [chunk, c] : local) {
                chunk_counts[chunk] += c;
            }
        }
    }

    // Symbol table: ids 0..255 are bytes (as printable strings), merge
    // results get fresh ids.
    std::vector<std::string> sym_text;
    sym_text.reserve(256 + static_cast<size_t>(n_merges));
    const auto& byte_table = byte_to_printable();
    for (int b = 0; b < 256; ++b) {
        sym_text.push_back(byte_table[static_cast<size_t>(b)]);
    }

    std::vector<TrainerChunk> chunks;
    chunks.reserve(chunk_counts.size());
    for (auto& [text, c] : chunk_counts) {
        TrainerChunk tc;
        tc.count = c;
        tc.syms.reserve(text.size());
        for (unsigned char b : text) {
            tc.syms.push_back(b);
        }
        chunks.push_back(std::move(tc));
    }
    // Chunk order must not depend on hash-map iteration order.
    std::sort(chunks.begin(), chunks.end(), [&](const TrainerChunk& a, const TrainerChunk& b) {
        return a.syms < b.syms;
    });

    std::unordered_map<uint64_t, uint64_t> pair_counts;
    std::unordered_map<uint64_t, std::unordered_set<uint32_t>> pair_chunks;
    for (uint32_t ci = 0; ci < chunks.size(); ++ci) {
        const auto& tc = chunks[ci];
        for (size_t k = 0; k + 1 < tc.syms.size(); ++k) {
            uint64_t key = pack_pair(tc.syms[k], tc.syms[k + 1]);
            pair_counts[key] += tc.count;
            pair_chunks[key].insert(ci);
        }
    }

    // Max-heap on (count, lexicographically smallest pair); entries go stale
    // when counts change and are re-pushed with the current count on pop.
    auto heap_less = [&](const PairEntry& a, const PairEntry& b) {
        if (a.count != b.count) {
            return a.count < b.count;
        }
        if (sym_text[static_cast<size_t>(a.left)] != sym_text[static_cast<size_t>(b.left)]) {
            return sym_text[static_cast<size_t>(a.left)] > sym_text[static_cast<size_t>(b.left)];
        }
        return sym_text[static_cast<size_t>(a.right)] > sym_text[static_cast<size_t>(b.right)];
    };
    std::priority_queue<PairEntry, std::vector<PairEntry>, decltype(heap_less)> heap(heap_less);
    for (const auto& [key, c] : pair_counts) {
        heap.push(PairEntry{c, static_cast<int>(key >> 32), static_cast<int>(key & 0xFFFFFFFFu)});
    }

    std::unordered_set<std::string> special_strings;
    for (const auto& s : specials.leading()) {
        special_strings.insert(s);
    }
    special_strings.insert(specials.mask);

    std::vector<std::pair<std::string, std::string>> merges;
    merges.reserve(static_cast<size_t>(n_merges));

    while (static_cast<int>(merges.size()) < n_merges && !heap.empty()) {
        PairEntry top = heap.top();
        heap.pop();
        uint64_t key = pack_pair(top.left, top.right);
        auto it = pair_counts.find(key);
        uint64_t current = it == pair_counts.end() ? 0 : it->second;
        if (current < 2) {
            continue;  // a pair occurring once compresses nothing
        }
        if (top.count != current) {
            top.count = current;
            heap.push(top);
            continue;
        }

        const std::string merged_text =
            sym_text[static_cast<size_t>(top.left)] + sym_text[static_cast<size_t>(top.right)];
        if (special_strings.count(merged_text)) {
            pair_counts.erase(key);  // never let a merge shadow a special token
            continue;
        }

        int new_sym = static_cast<int>(sym_text.size());
        sym_text.push_back(merged_text);
        merges.emplace_back(sym_text[static_cast<size_t>(top.left)],
                            sym_text[static_cast<size_t>(top.right)]);

        auto affected_it = pair_chunks.find(key);
        std::vector<uint32_t> affected(affected_it->second.begin(), affected_it->second.end());
        std::sort(affected.begin(), affected.end());

        for (uint32_t ci : affected) {
            TrainerChunk& tc = chunks[ci];
            // Pair multiset before and after the splice; the diff drives the
            // incremental count update.
            std::unordered_map<uint64_t, int64_t> delta;
            for (size_t k = 0; k + 1 < tc.syms.size(); ++k) {
                delta[pack_pair(tc.syms[k], tc.syms[k + 1])] -= 1;
            }
            std::vector<int> next;
            next.reserve(tc.syms.size());
            for (size_t k = 0; k < tc.syms.size();) {
                if (k + 1 < tc.syms.size() && tc.syms[k] == top.left &&
                    tc.syms[k + 1] == top.right) {
                    next.push_back(new_sym);
                    k += 2;
                } else {
                    next.push_back(tc.syms[k]);
                    k += 1;
                }
            }
            tc.syms = std::move(next);
            std::unordered_set<uint64_t> present;
            for (size_t k = 0; k + 1 < tc.syms.size(); ++k) {
                uint64_t pk = pack_pair(tc.syms[k], tc.syms[k + 1]);
                delta[pk] += 1;
                present.insert(pk);
            }
            for (const auto& [pk, d] : delta) {
                if (d == 0 && present.count(pk)) {
                    continue;
                }
                if (d != 0) {
                    uint64_t& c = pair_counts[pk];
                    int64_t updated = static_cast<int64_t>(c) + d * static_cast<int64_t>(tc.count);
                    c = updated > 0 ? static_cast<uint64_t>(updated) : 0;
                    if (d > 0) {
                        pair_chunks[pk].insert(ci);
                        heap.push(PairEntry{c, static_cast<int>(pk >> 32),
                                            static_cast<int>(pk & 0xFFFFFFFFu)});
                    }
                }
                if (!present.count(pk)) {
                    auto pcit = pair_chunks.find(pk);
                    if (pcit != pair_chunks.end()) {
                        pcit->second.erase(ci);
                    }
                }
            }
        }
        pair_counts.erase(key);
        pair_chunks.erase(key);
    }

    if (static_cast<int>(merges.size()) < n_merges) {
        if (exhausted) {
            *exhausted = true;
        }
    }
    return BpeVocab::build(std::move(merges), specials);
}

std::string merges_to_text(const BpeVocab& vocab) {
    std::ostringstream merges;
    merges << "#version: 0.2\n";
    for (const auto& [l, r] : vocab.merges()) {
        merges << l << ' ' << r << '\n';
    }
    return merges.str();
}

std::vector<std::pair<std::string, std::string>> parse_merges_text(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> merges;
    std::istringstream in(text);
    std::string line;
    bool first = true;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (first) {
            first = false;
            if (line.rfind("#version:", 0) == 0) {
                continue;
            }
        }
        if (line.empty()) {
            continue;
        }
        size_t sp = line.find(' ');
        if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size()) {
            throw DataError("merges line " + std::to_string(line_no) + " is not 'left right'");
        }
        merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return merges;
}

void save_vocab(const BpeVocab& vocab, const std::string& dir) {
    ensure_dir(dir);
    ordered_json vj;
    for (int id = 0; id < vocab.size(); ++id) {
        vj[vocab.token(id)] = id;
    }
    write_text_file((fs::path(dir) / "vocab.json").string(), vj.dump(1) + "\n");
    write_text_file((fs::path(dir) / "merges.txt").string(), merges_to_text(vocab));
}

BpeVocab load_vocab(const std::string& dir) {
    std::string merges_text = read_text_file((fs::path(dir) / "merges.txt").string());
    BpeVocab vocab = BpeVocab::build(parse_merges_text(merges_text));

    // vocab.json is redundant with merges but must agree when present.
    fs::path vocab_path = fs::path(dir) / "vocab.json";
    if (fs::exists(vocab_path)) {
        json vj = json::parse(read_text_file(vocab_path.string()));
        if (static_cast<int>(vj.size()) != vocab.size()) {
            throw DataError("vocab.json size disagrees with merges.txt in " + dir);
        }
        for (auto it = vj.begin(); it != vj.end(); ++it) {
            int id = it.value().get<int>();
            if (id < 0 || id >= vocab.size() || vocab.token(id) != it.key()) {
                throw DataError("vocab.json entry '" + it.key() + "' disagrees with merges.txt");
            }
        }
    }
    return vocab;
}

BpeVocab run_tokenizer_stage(const TokenizerStageOptions& opt) {
    auto manifest = corpus::load_manifest(opt.manifest_path);
    std::vector<corpus::Document> sample;
    if (opt.sample_bytes == 0) {
        sample = corpus::load_manifest_documents(manifest, opt.manifest_path);
    } else {
        sample = corpus::sample_for_vocab(manifest, opt.manifest_path, opt.sample_bytes, opt.seed);
    }
    bool exhausted = false;
    BpeVocab vocab = train_vocab(sample, opt.vocab_size, SpecialTokens{}, &exhausted);
    if (exhausted) {
        std::cerr << "warning: corpus exhausted mergeable pairs at " << vocab.size()
                  << " tokens (requested " << opt.vocab_size << ")\n";
    }
    save_vocab(vocab, opt.out_dir);
    return vocab;
}

}  // namespace desklm::bpe
