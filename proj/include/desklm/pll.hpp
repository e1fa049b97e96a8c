#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "desklm/bpe.hpp"
#include "desklm/common.hpp"
#include "desklm/encoder.hpp"

namespace desklm::evalx {

// The 16 acceptability phenomena, in table column order.
inline const std::array<std::string, 16> kPhenomena = {
    "anaphor_agreement", "argument_structure_transitive", "argument_structure_ditransitive",
    "binding",           "determiners",                   "ellipsis",
    "irregular_forms",   "island_effects",                "nominalization",
    "npi_licensing",     "passives",                      "quantifiers",
    "relative_clauses",  "scrambling",                    "subject_agreement",
    "suspended_affixation"};

// Compact column headers for the per-phenomenon table.
std::string phenomenon_display(const std::string& name);
bool is_known_phenomenon(const std::string& name);

struct MinimalPair {
    std::string phenomenon;
    std::string good;
    std::string bad;
};

// Newline-delimited JSON records {phenomenon, good, bad}; validates the
// phenomenon against the fixed list and good != bad.
std::vector<MinimalPair> load_minimal_pairs(const std::string& path);
void write_minimal_pairs(const std::vector<MinimalPair>& pairs, const std::string& path);

struct TruncationError : DataError {
    using DataError::DataError;
};

struct PllOptions {
    bool length_normalize = false;  // off: pairs are length-matched minimal pairs
    int copies_per_batch = 32;
};

// Pseudo-log-likelihood: mask one non-special position at a time, sum the
// log-probability of the original token. Throws TruncationError when the
// sentence does not fit max_positions, DataError when nothing is scorable.
double pll_score(const nn::Model<float>& model, const bpe::BpeVocab& vocab,
                 const std::string& sentence, const PllOptions& opt = {});

struct PhenomenonScore {
    std::string phenomenon;
    long n_pairs = 0;
    long n_correct = 0;
    long n_skipped = 0;
    double accuracy = 0.0;  // percent over scored pairs
};

struct TurblimpReport {
    std::vector<PhenomenonScore> per_phenomenon;  // fixed order, present groups only
    double average = 0.0;                         // unweighted mean over present phenomena
    long total_skipped = 0;
};

// scorer returns (good_pll, bad_pll) or nullopt to skip the pair. A pair is
// correct iff good strictly outscores bad; ties count as incorrect. The
// average weighs every phenomenon equally regardless of pair counts.
using PairScorer = std::function<std::optional<std::pair<double, double>>(const MinimalPair&)>;

TurblimpReport turblimp_eval(const PairScorer& scorer, const std::vector<MinimalPair>& pairs);

// Model-backed protocol run; over-length sentences skip their pair.
TurblimpReport turblimp_eval(const nn::Model<float>& model, const bpe::BpeVocab& vocab,
                             const std::vector<MinimalPair>& pairs, const PllOptions& opt = {});

}  // namespace desklm::evalx
