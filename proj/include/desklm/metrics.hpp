#pragma once

#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace desklm::evalx {

using TagSeq = std::vector<std::string>;

// Token-level micro-averaged F1 pooled over tags, scaled to [0, 100]. When
// ignore_tag is set, that tag is excluded from the pooled counts (both as
// prediction and as gold), the usual background-tag convention. Without one,
// every position carries exactly one gold and one predicted tag, so the score
// equals accuracy.
double micro_f1(const std::vector<TagSeq>& gold, const std::vector<TagSeq>& pred,
                const std::optional<std::string>& ignore_tag = std::nullopt);

struct Span {
    std::string type;
    size_t start = 0;
    size_t end = 0;  // exclusive

    bool operator==(const Span&) const = default;
    bool operator<(const Span& o) const {
        return std::tie(start, end, type) < std::tie(o.start, o.end, o.type);
    }
};

// Lenient BIO decoding: an I-X after O or after a different type opens a new
// span (counted in *repairs when given). Tags must be O / B-x / I-x.
std::vector<Span> bio_spans(const TagSeq& tags, long* repairs = nullptr);

// Exact-match span F1 micro-averaged over all entity types, in [0, 100]. A
// predicted span counts only when type and boundaries all match gold.
double entity_f1(const std::vector<TagSeq>& gold, const std::vector<TagSeq>& pred);

// Unweighted mean of per-class F1 over the declared label set, in [0, 100].
// A declared class absent from both gold and pred contributes 0.
double macro_f1(const std::vector<std::string>& gold, const std::vector<std::string>& pred,
                const std::vector<std::string>& label_set);

}  // namespace desklm::evalx
