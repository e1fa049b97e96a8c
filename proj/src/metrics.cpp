#include "desklm/metrics.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "desklm/common.hpp"

namespace desklm::evalx {

namespace {

void check_same_shape(const std::vector<TagSeq>& gold, const std::vector<TagSeq>& pred) {
    if (gold.size() != pred.size()) {
        throw DataError("metric: gold has " + std::to_string(gold.size()) + " sequences, pred " +
                        std::to_string(pred.size()));
    }
    for (size_t i = 0; i < gold.size(); ++i) {
        if (gold[i].size() != pred[i].size()) {
            throw DataError("metric: sequence " + std::to_string(i) + " length mismatch (" +
                            std::to_string(gold[i].size()) + " vs " +
                            std::to_string(pred[i].size()) + ")");
        }
    }
}

double f1_from_counts(long tp, long fp, long fn) {
    long denom = 2 * tp + fp + fn;
    if (denom == 0) {
        return 100.0;  // nothing to find, nothing predicted
    }
    return 200.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

}  // namespace

double micro_f1(const std::vector<TagSeq>& gold, const std::vector<TagSeq>& pred,
                const std::optional<std::string>& ignore_tag) {
    check_same_shape(gold, pred);
    long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < gold.size(); ++i) {
        for (size_t t = 0; t < gold[i].size(); ++t) {
            const std::string& g = gold[i][t];
            const std::string& p = pred[i][t];
            bool g_counts = !ignore_tag || g != *ignore_tag;
            bool p_counts = !ignore_tag || p != *ignore_tag;
            if (g == p) {
                if (g_counts) {
                    ++tp;
                }
            } else {
                if (p_counts) {
                    ++fp;
                }
                if (g_counts) {
                    ++fn;
                }
            }
        }
    }
    return f1_from_counts(tp, fp, fn);
}

std::vector<Span> bio_spans(const TagSeq& tags, long* repairs) {
    std::vector<Span> spans;
    std::optional<Span> open;
    auto close = [&] {
        if (open) {
            spans.push_back(*open);
            open.reset();
        }
    };
    for (size_t t = 0; t < tags.size(); ++t) {
        const std::string& tag = tags[t];
        if (tag == "O") {
            close();
            continue;
        }
        if (tag.size() < 3 || (tag[0] != 'B' && tag[0] != 'I') || tag[1] != '-') {
            throw DataError("invalid BIO tag '" + tag + "' at position " + std::to_string(t));
        }
        std::string type = tag.substr(2);
        if (tag[0] == 'B') {
            close();
            open = Span{type, t, t + 1};
        } else {  // I-
            if (open && open->type == type) {
                open->end = t + 1;
            } else {
                // lenient: treat a dangling I- as a span start
                if (repairs) {
                    ++*repairs;
                }
                close();
                open = Span{type, t, t + 1};
            }
        }
    }
    close();
    return spans;
}

double entity_f1(const std::vector<TagSeq>& gold, const std::vector<TagSeq>& pred) {
    check_same_shape(gold, pred);
    long tp = 0, n_gold = 0, n_pred = 0;
    for (size_t i = 0; i < gold.size(); ++i) {
        auto gs = bio_spans(gold[i]);
        auto ps = bio_spans(pred[i]);
        n_gold += static_cast<long>(gs.size());
        n_pred += static_cast<long>(ps.size());
        std::set<Span> gset(gs.begin(), gs.end());
        for (const auto& s : ps) {
            if (gset.count(s)) {
                ++tp;
            }
        }
    }
    // micro span F1: fp = pred misses, fn = gold misses
    return f1_from_counts(tp, n_pred - tp, n_gold - tp);
}

double macro_f1(const std::vector<std::string>& gold, const std::vector<std::string>& pred,
                const std::vector<std::string>& label_set) {
    if (gold.size() != pred.size()) {
        throw DataError("metric: gold/pred length mismatch");
    }
    if (label_set.empty()) {
        throw DataError("metric: empty label set");
    }
    std::set<std::string> declared(label_set.begin(), label_set.end());
    for (size_t i = 0; i < gold.size(); ++i) {
        if (!declared.count(gold[i])) {
            throw DataError("unknown gold label '" + gold[i] + "'");
        }
        if (!declared.count(pred[i])) {
            throw DataError("unknown predicted label '" + pred[i] + "'");
        }
    }
    double sum = 0.0;
    for (const auto& cls : label_set) {
        long tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < gold.size(); ++i) {
            bool g = gold[i] == cls;
            bool p = pred[i] == cls;
            if (g && p) {
                ++tp;
            } else if (!g && p) {
                ++fp;
            } else if (g && !p) {
                ++fn;
            }
        }
        long denom = 2 * tp + fp + fn;
        // a declared class absent from gold and pred contributes zero
        sum += denom == 0 ? 0.0 : 200.0 * static_cast<double>(tp) / static_cast<double>(denom);
    }
    return sum / static_cast<double>(label_set.size());
}

}  // namespace desklm::evalx
