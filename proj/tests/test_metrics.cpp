#include <doctest.h>

#include "desklm/common.hpp"
#include "desklm/metrics.hpp"
#include "helpers.hpp"

using namespace desklm;
using namespace desklm::evalx;

namespace {

std::vector<std::string> random_tags(Rng& rng, size_t len, const std::vector<std::string>& set) {
    std::vector<std::string> tags;
    for (size_t i = 0; i < len; ++i) {
        tags.push_back(set[rng.bounded(set.size())]);
    }
    return tags;
}

// random but structurally valid BIO
std::vector<std::string> random_bio(Rng& rng, size_t len,
                                    const std::vector<std::string>& types) {
    std::vector<std::string> tags;
    while (tags.size() < len) {
        if (rng.next_double() < 0.55) {
            tags.push_back("O");
            continue;
        }
        const std::string& type = types[rng.bounded(types.size())];
        size_t span = 1 + rng.bounded(3);
        tags.push_back("B-" + type);
        for (size_t k = 1; k < span && tags.size() < len; ++k) {
            tags.push_back("I-" + type);
        }
    }
    tags.resize(len);
    return tags;
}

}  // namespace

TEST_CASE("micro f1 fixtures") {
    SUBCASE("perfect prediction scores 100") {
        std::vector<TagSeq> gold = {{"A", "B", "A"}};
        CHECK(micro_f1(gold, gold) == 100.0);
    }
    SUBCASE("hand-computed binary fixture with a background tag") {
        // four tokens; pooling excludes the background tag O:
        // TP=2, FP=1, FN=1 -> F1 = 2*2/(2*2+1+1) = 66.67
        std::vector<TagSeq> gold = {{"X", "X", "O", "X"}};
        std::vector<TagSeq> pred = {{"X", "X", "X", "O"}};
        double score = micro_f1(gold, pred, std::string("O"));
        CHECK(format_fixed(score, 2) == "66.67");
    }
    SUBCASE("all predictions a tag absent from gold") {
        std::vector<TagSeq> gold = {{"A", "A"}};
        std::vector<TagSeq> pred = {{"Z", "Z"}};
        CHECK(micro_f1(gold, pred) == 0.0);
    }
    SUBCASE("shape mismatch") {
        std::vector<TagSeq> gold = {{"A"}};
        std::vector<TagSeq> pred = {{"A", "B"}};
        CHECK_THROWS_AS(micro_f1(gold, pred), DataError);
        CHECK_THROWS_AS(micro_f1(gold, {}), DataError);
    }
}

TEST_CASE("micro f1 equals the brute-force oracle on random instances") {
    Rng rng(808);
    const std::vector<std::string> tag_set = {"A", "B", "C", "D"};
    for (int trial = 0; trial < 1000; ++trial) {
        size_t n_seq = 1 + rng.bounded(3);
        std::vector<TagSeq> gold, pred;
        for (size_t s = 0; s < n_seq; ++s) {
            size_t len = 1 + rng.bounded(10);
            gold.push_back(random_tags(rng, len, tag_set));
            pred.push_back(random_tags(rng, len, tag_set));
        }
        double lib = micro_f1(gold, pred);
        double oracle = testutil::metric_oracle::micro_f1(gold, pred);
        CHECK(lib == oracle);
        std::string bg = "A";
        double lib_bg = micro_f1(gold, pred, bg);
        double oracle_bg = testutil::metric_oracle::micro_f1(gold, pred, &bg);
        CHECK(lib_bg == oracle_bg);
    }
}

TEST_CASE("bio span extraction is lenient about dangling I- tags") {
    long repairs = 0;
    auto spans = bio_spans({"O", "I-PER", "I-PER", "O", "B-LOC"}, &repairs);
    REQUIRE(spans.size() == 2);
    CHECK(spans[0].type == "PER");
    CHECK(spans[0].start == 1);
    CHECK(spans[0].end == 3);
    CHECK(spans[1].type == "LOC");
    CHECK(repairs == 1);

    // type switch inside a span opens a new one
    repairs = 0;
    auto spans2 = bio_spans({"B-PER", "I-LOC"}, &repairs);
    REQUIRE(spans2.size() == 2);
    CHECK(repairs == 1);

    CHECK_THROWS_AS(bio_spans({"B"}), DataError);
    CHECK_THROWS_AS(bio_spans({"X-PER"}), DataError);
}

TEST_CASE("entity f1 fixtures") {
    SUBCASE("exact spans score 100") {
        std::vector<TagSeq> gold = {{"B-PER", "I-PER", "O", "B-LOC"}};
        CHECK(entity_f1(gold, gold) == 100.0);
    }
    SUBCASE("boundary-exact matching: a shortened span counts as a miss") {
        // gold one PER span over tokens 1-2; pred covers token 1 only
        std::vector<TagSeq> gold = {{"O", "B-PER", "I-PER"}};
        std::vector<TagSeq> pred = {{"O", "B-PER", "O"}};
        CHECK(entity_f1(gold, pred) == 0.0);
    }
    SUBCASE("one extra predicted span beside a found one") {
        // gold 1 span, pred 2 spans incl. the correct one: P=0.5 R=1 -> 66.67
        std::vector<TagSeq> gold = {{"B-PER", "O", "O"}};
        std::vector<TagSeq> pred = {{"B-PER", "O", "B-LOC"}};
        CHECK(format_fixed(entity_f1(gold, pred), 2) == "66.67");
    }
    SUBCASE("span identity ignores which tag strings encoded it") {
        // B-X I-X and B-X B-X encode different spans; but an I- opener after O
        // encodes the same span as a B- opener
        std::vector<TagSeq> gold = {{"O", "B-PER", "I-PER"}};
        std::vector<TagSeq> pred = {{"O", "I-PER", "I-PER"}};
        CHECK(entity_f1(gold, pred) == 100.0);
    }
}

TEST_CASE("entity f1 equals the span oracle on random instances") {
    Rng rng(909);
    const std::vector<std::string> types = {"PER", "LOC", "ORG"};
    for (int trial = 0; trial < 1000; ++trial) {
        size_t n_seq = 1 + rng.bounded(3);
        std::vector<TagSeq> gold, pred;
        for (size_t s = 0; s < n_seq; ++s) {
            size_t len = 1 + rng.bounded(10);
            gold.push_back(random_bio(rng, len, types));
            pred.push_back(random_bio(rng, len, types));
        }
        CHECK(entity_f1(gold, pred) == testutil::metric_oracle::entity_f1(gold, pred));
    }
}

TEST_CASE("macro f1 fixtures") {
    SUBCASE("perfect binary classification") {
        std::vector<std::string> gold = {"NOT", "OFF", "NOT"};
        CHECK(macro_f1(gold, gold, {"NOT", "OFF"}) == 100.0);
    }
    SUBCASE("hand-computed two-class fixture") {
        // F1(NOT) = 2/3, F1(OFF) = 0.8 -> macro = 73.33
        std::vector<std::string> gold = {"NOT", "NOT", "OFF", "OFF"};
        std::vector<std::string> pred = {"NOT", "OFF", "OFF", "OFF"};
        CHECK(format_fixed(macro_f1(gold, pred, {"NOT", "OFF"}), 2) == "73.33");
    }
    SUBCASE("a declared class absent everywhere contributes zero") {
        std::vector<std::string> gold = {"NOT", "NOT"};
        CHECK(macro_f1(gold, gold, {"NOT", "OFF"}) == 50.0);
    }
    SUBCASE("unknown labels are rejected") {
        CHECK_THROWS_AS(macro_f1({"NOT"}, {"MAYBE"}, {"NOT", "OFF"}), DataError);
        CHECK_THROWS_AS(macro_f1({"MAYBE"}, {"NOT"}, {"NOT", "OFF"}), DataError);
    }
}

TEST_CASE("macro f1 equals the per-class oracle on random instances") {
    Rng rng(1010);
    const std::vector<std::string> labels = {"P", "Q", "R", "S"};
    for (int trial = 0; trial < 1000; ++trial) {
        size_t n = 1 + rng.bounded(10);
        std::vector<std::string> gold, pred;
        for (size_t i = 0; i < n; ++i) {
            gold.push_back(labels[rng.bounded(labels.size())]);
            pred.push_back(labels[rng.bounded(labels.size())]);
        }
        CHECK(macro_f1(gold, pred, labels) ==
              testutil::metric_oracle::macro_f1(gold, pred, labels));
    }
}

TEST_CASE("scores stay within [0, 100] and means are exact") {
    Rng rng(33);
    const std::vector<std::string> labels = {"P", "Q", "R"};
    for (int trial = 0; trial < 200; ++trial) {
        size_t n = 1 + rng.bounded(8);
        std::vector<std::string> gold, pred;
        for (size_t i = 0; i < n; ++i) {
            gold.push_back(labels[rng.bounded(labels.size())]);
            pred.push_back(labels[rng.bounded(labels.size())]);
        }
        double m = macro_f1(gold, pred, labels);
        CHECK(m >= 0.0);
        CHECK(m <= 100.0);
        // macro equals the unweighted mean of single-class restrictions
        double sum = 0.0;
        for (const auto& cls : labels) {
            sum += testutil::metric_oracle::macro_f1(gold, pred, {cls});
        }
        CHECK(std::abs(m - sum / 3.0) < 1e-9);
    }
}
