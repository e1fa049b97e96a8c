#pragma once

// Shared fixtures and independent oracles for the test suites. Oracles here
// are deliberately naive re-implementations: they recount everything from
// scratch and never share logic with the library code they check.

#include <unistd.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "desklm/bpe.hpp"
#include "desklm/corpus.hpp"
#include "desklm/datasets.hpp"
#include "desklm/io.hpp"
#include "desklm/rng.hpp"

namespace testutil {

inline std::string fresh_dir(const std::string& tag) {
    static std::atomic<uint64_t> counter{0};
    auto path = std::filesystem::temp_directory_path() /
                ("desklm_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter++));
    std::filesystem::create_directories(path);
    return path.string();
}

inline std::string random_bytes(desklm::Rng& rng, size_t len) {
    std::string s(len, '\0');
    for (size_t i = 0; i < len; ++i) {
        s[i] = static_cast<char>(rng.bounded(256));
    }
    return s;
}

// Random printable-ish text with spaces, for BPE training fixtures.
inline std::string random_text(desklm::Rng& rng, size_t len, int alphabet = 6) {
    std::string s;
    s.reserve(len);
    for (size_t i = 0; i < len; ++i) {
        if (rng.next_double() < 0.18) {
            s.push_back(' ');
        } else {
            s.push_back(static_cast<char>('a' + rng.bounded(static_cast<uint64_t>(alphabet))));
        }
    }
    return s;
}

// ---- BPE oracle -------------------------------------------------------------

namespace bpe_oracle {

inline bool oracle_space(unsigned char b) {
    return b == ' ' || b == '\t' || b == '\n' || b == '\r' || b == '\f' || b == '\v';
}

// From-scratch trainer: recounts every adjacent pair after each merge, picks
// the most frequent pair (lexicographically smallest on ties), applies it
// left-to-right, and stops when no pair occurs twice.
inline std::vector<std::pair<std::string, std::string>> train_merges(
    const std::vector<std::string>& texts, int n_merges) {
    using desklm::bpe::byte_to_printable;
    std::vector<std::vector<std::string>> chunks;
    for (const auto& text : texts) {
        size_t i = 0;
        while (i < text.size()) {
            bool ws = oracle_space(static_cast<unsigned char>(text[i]));
            size_t j = i + 1;
            while (j < text.size() && oracle_space(static_cast<unsigned char>(text[j])) == ws) {
                ++j;
            }
            std::vector<std::string> syms;
            for (size_t k = i; k < j; ++k) {
                syms.push_back(byte_to_printable()[static_cast<unsigned char>(text[k])]);
            }
            chunks.push_back(std::move(syms));
            i = j;
        }
    }
    const std::set<std::string> specials = {"<s>", "<pad>", "</s>", "<unk>", "<mask>"};
    std::vector<std::pair<std::string, std::string>> merges;
    while (static_cast<int>(merges.size()) < n_merges) {
        std::map<std::pair<std::string, std::string>, uint64_t> counts;
        for (const auto& c : chunks) {
            for (size_t k = 0; k + 1 < c.size(); ++k) {
                counts[{c[k], c[k + 1]}] += 1;
            }
        }
        std::pair<std::string, std::string> best;
        uint64_t best_count = 0;
        for (const auto& [pair, count] : counts) {
            if (count < 2 || specials.count(pair.first + pair.second)) {
                continue;
            }
            if (count > best_count || (count == best_count && pair < best)) {
                best = pair;
                best_count = count;
            }
        }
        if (best_count < 2) {
            break;
        }
        merges.push_back(best);
        std::string merged = best.first + best.second;
        for (auto& c : chunks) {
            std::vector<std::string> next;
            for (size_t k = 0; k < c.size();) {
                if (k + 1 < c.size() && c[k] == best.first && c[k + 1] == best.second) {
                    next.push_back(merged);
                    k += 2;
                } else {
                    next.push_back(c[k]);
                    k += 1;
                }
            }
            c = std::move(next);
        }
    }
    return merges;
}

}  // namespace bpe_oracle

// ---- metric oracles ---------------------------------------------------------

namespace metric_oracle {

inline double micro_f1(const std::vector<std::vector<std::string>>& gold,
                       const std::vector<std::vector<std::string>>& pred,
                       const std::string* ignore = nullptr) {
    double tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < gold.size(); ++i) {
        for (size_t t = 0; t < gold[i].size(); ++t) {
            const auto& g = gold[i][t];
            const auto& p = pred[i][t];
            if (g == p) {
                if (!ignore || g != *ignore) {
                    tp += 1;
                }
            } else {
                if (!ignore || p != *ignore) {
                    fp += 1;
                }
                if (!ignore || g != *ignore) {
                    fn += 1;
                }
            }
        }
    }
    double denom = 2 * tp + fp + fn;
    return denom == 0 ? 100.0 : 200.0 * tp / denom;
}

// span extraction written as an explicit state walk, separate from the
// library's implementation
inline std::set<std::tuple<size_t, std::string, size_t, size_t>> spans_of(
    const std::vector<std::vector<std::string>>& tagged) {
    std::set<std::tuple<size_t, std::string, size_t, size_t>> spans;
    for (size_t i = 0; i < tagged.size(); ++i) {
        const auto& tags = tagged[i];
        size_t t = 0;
        while (t < tags.size()) {
            if (tags[t] == "O") {
                ++t;
                continue;
            }
            std::string type = tags[t].substr(2);
            size_t start = t;
            ++t;
            while (t < tags.size() && tags[t] == "I-" + type) {
                ++t;
            }
            spans.insert({i, type, start, t});
        }
    }
    return spans;
}

inline double entity_f1(const std::vector<std::vector<std::string>>& gold,
                        const std::vector<std::vector<std::string>>& pred) {
    auto gs = spans_of(gold);
    auto ps = spans_of(pred);
    double tp = 0;
    for (const auto& s : ps) {
        if (gs.count(s)) {
            tp += 1;
        }
    }
    double fp = static_cast<double>(ps.size()) - tp;
    double fn = static_cast<double>(gs.size()) - tp;
    double denom = 2 * tp + fp + fn;
    return denom == 0 ? 100.0 : 200.0 * tp / denom;
}

inline double macro_f1(const std::vector<std::string>& gold, const std::vector<std::string>& pred,
                       const std::vector<std::string>& labels) {
    double sum = 0;
    for (const auto& cls : labels) {
        double tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < gold.size(); ++i) {
            if (gold[i] == cls && pred[i] == cls) {
                tp += 1;
            } else if (gold[i] != cls && pred[i] == cls) {
                fp += 1;
            } else if (gold[i] == cls && pred[i] != cls) {
                fn += 1;
            }
        }
        double denom = 2 * tp + fp + fn;
        sum += denom == 0 ? 0.0 : 200.0 * tp / denom;
    }
    return sum / static_cast<double>(labels.size());
}

}  // namespace metric_oracle

// ---- synthetic corpora --------------------------------------------------------

// Low-entropy word chain: every word has exactly two admissible successors,
// so a trained MLM can push perplexity far below the vocabulary size.
inline std::vector<std::string> grammar_lexicon() {
    std::vector<std::string> words;
    const std::vector<std::string> roots = {"ev",  "kitap", "okul", "deniz", "kapi",
                                            "yol", "goz",   "dag",  "su",    "gece"};
    const std::vector<std::string> suffixes = {"", "de", "den", "ler", "li"};
    for (const auto& r : roots) {
        for (const auto& s : suffixes) {
            words.push_back(r + s);
        }
    }
    return words;
}

inline std::string gen_grammar_text(uint64_t seed, size_t approx_bytes) {
    auto words = grammar_lexicon();
    const size_t n = words.size();
    // fixed successor table: two choices per word
    std::vector<std::array<size_t, 2>> next(n);
    desklm::Rng table_rng(desklm::mix_seed({0xBEEFull}));
    for (size_t i = 0; i < n; ++i) {
        next[i] = {table_rng.bounded(n), table_rng.bounded(n)};
    }
    desklm::Rng rng(desklm::mix_seed({seed, 0x6Eull}));
    std::string text;
    text.reserve(approx_bytes + 64);
    size_t w = rng.bounded(n);
    while (text.size() < approx_bytes) {
        size_t len = 6 + rng.bounded(7);
        for (size_t k = 0; k < len; ++k) {
            text += words[w];
            text += ' ';
            // mostly deterministic successor keeps the corpus low-entropy
            w = next[w][rng.next_double() < 0.85 ? 0 : 1];
        }
        text += "son.\n";
    }
    return text;
}

inline std::vector<desklm::corpus::Document> gen_grammar_documents(uint64_t seed,
                                                                   size_t approx_bytes,
                                                                   size_t doc_bytes = 2048) {
    std::string text = gen_grammar_text(seed, approx_bytes);
    std::vector<desklm::corpus::Document> docs;
    size_t i = 0, id = 0;
    while (i < text.size()) {
        size_t len = std::min(doc_bytes, text.size() - i);
        docs.push_back(desklm::corpus::make_document("g" + std::to_string(id++),
                                                     text.substr(i, len),
                                                     desklm::corpus::Source::other));
        i += len;
    }
    return docs;
}

// Tagging task where the tag is a pure function of the word: learnable from
// token identity alone.
struct TaggingFixture {
    std::vector<desklm::ft::LabeledSequence> sentences;
    std::vector<std::string> tags;
};

inline TaggingFixture gen_tagging_dataset(uint64_t seed, size_t n_sentences) {
    const std::vector<std::string> tags = {"NOUN", "VERB", "ADJ", "ADV", "PRON"};
    auto words = grammar_lexicon();
    TaggingFixture fx;
    fx.tags = tags;
    desklm::Rng rng(desklm::mix_seed({seed, 0x7A6ull}));
    for (size_t s = 0; s < n_sentences; ++s) {
        desklm::ft::LabeledSequence sent;
        size_t len = 4 + rng.bounded(6);
        for (size_t k = 0; k < len; ++k) {
            size_t w = rng.bounded(words.size());
            sent.tokens.push_back(words[w]);
            sent.tags.push_back(tags[w % tags.size()]);
        }
        fx.sentences.push_back(std::move(sent));
    }
    return fx;
}

inline void write_conll(const std::vector<desklm::ft::LabeledSequence>& sents,
                        const std::string& path) {
    std::string out;
    for (const auto& s : sents) {
        for (size_t i = 0; i < s.tokens.size(); ++i) {
            out += s.tokens[i] + "\t" + s.tags[i] + "\n";
        }
        out += "\n";
    }
    desklm::write_text_file(path, out);
}

inline void write_jsonl_corpus(const std::vector<desklm::corpus::Document>& docs,
                               const std::string& path) {
    std::string out;
    for (const auto& d : docs) {
        out += desklm::corpus::document_to_json_line(d) + "\n";
    }
    desklm::write_text_file(path, out);
}


// ---- gradient checking --------------------------------------------------------

namespace gradcheck {

// Conditioned random fill so every LayerNorm sees unit-scale inputs; tiny
// init scales push finite-difference truncation error above the tolerance.
inline void condition_params(desklm::nn::EncoderParams<double>& p, uint64_t seed) {
    desklm::Rng rng(desklm::mix_seed({seed, 0x6CADull}));
    desklm::nn::for_each_tensor(p, [&](const std::string& name,
                                       desklm::nn::Mat<double>& m) {
        bool norm_w = name.find("norm.weight") != std::string::npos;
        for (long r = 0; r < m.rows(); ++r) {
            for (long c = 0; c < m.cols(); ++c) {
                m(r, c) = norm_w ? 1.0 + 0.3 * rng.gaussian() : 0.4 * rng.gaussian();
            }
        }
    });
}

struct Result {
    // max over elements with magnitude above the guard of |a-n|/max(|a|,|n|)
    double max_relative = 0.0;
    // worst guarded deviation |a-n| - (atol + rtol*max(|a|,|n|)); <= 0 passes
    double worst_guarded = -1.0;
    std::string where;
    long elements = 0;
};

// Central differences with the given step over one tensor.
inline void check_tensor(const std::string& name, desklm::nn::Mat<double>& param,
                         const desklm::nn::Mat<double>& analytic,
                         const std::function<double()>& loss, double step, Result& res,
                         double rtol = 1e-4, double atol = 1e-5, double guard = 1e-2) {
    for (long r = 0; r < param.rows(); ++r) {
        for (long c = 0; c < param.cols(); ++c) {
            double keep = param(r, c);
            param(r, c) = keep + step;
            double up = loss();
            param(r, c) = keep - step;
            double down = loss();
            param(r, c) = keep;
            double numeric = (up - down) / (2.0 * step);
            double a = analytic(r, c);
            double mag = std::max(std::abs(a), std::abs(numeric));
            double diff = std::abs(a - numeric);
            ++res.elements;
            if (mag > guard) {
                double rel = diff / mag;
                if (rel > res.max_relative) {
                    res.max_relative = rel;
                    res.where = name + "(" + std::to_string(r) + "," + std::to_string(c) + ")";
                }
            }
            double guarded = diff - (atol + rtol * mag);
            if (guarded > res.worst_guarded) {
                res.worst_guarded = guarded;
                if (guarded > 0.0) {
                    res.where = name + "(" + std::to_string(r) + "," + std::to_string(c) + ")";
                }
            }
        }
    }
}

}  // namespace gradcheck

}  // namespace testutil
