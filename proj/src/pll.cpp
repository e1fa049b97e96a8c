#include "desklm/pll.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <sstream>

#include "desklm/io.hpp"
#include "desklm/masking.hpp"
#include "desklm/threadpool.hpp"

namespace desklm::evalx {

using nlohmann::json;

std::string phenomenon_display(const std::string& name) {
    static const std::map<std::string, std::string> display = {
        {"anaphor_agreement", "Ana. Agr."},
        {"argument_structure_transitive", "Arg. Tr."},
        {"argument_structure_ditransitive", "Arg. Ditr."},
        {"binding", "Bind."},
        {"determiners", "Det."},
        {"ellipsis", "Ellip."},
        {"irregular_forms", "Irr."},
        {"island_effects", "Isl."},
        {"nominalization", "Nom."},
        {"npi_licensing", "NPI"},
        {"passives", "Pass."},
        {"quantifiers", "Quant."},
        {"relative_clauses", "RelCl."},
        {"scrambling", "Scramb."},
        {"subject_agreement", "Subj. Agr."},
        {"suspended_affixation", "Susp. Aff."}};
    auto it = display.find(name);
    return it == display.end() ? name : it->second;
}

bool is_known_phenomenon(const std::string& name) {
    return std::find(kPhenomena.begin(), kPhenomena.end(), name) != kPhenomena.end();
}

std::vector<MinimalPair> load_minimal_pairs(const std::string& path) {
    LineReader reader(path);
    std::vector<MinimalPair> pairs;
    std::string line;
    while (reader.next(line)) {
        if (line.empty()) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("bad minimal-pair record at " + path + " line " +
                            std::to_string(reader.line_number()) + ": " + e.what());
        }
        MinimalPair p;
        p.phenomenon = j.value("phenomenon", std::string());
        p.good = j.value("good", std::string());
        p.bad = j.value("bad", std::string());
        if (!is_known_phenomenon(p.phenomenon)) {
            throw DataError("unknown phenomenon '" + p.phenomenon + "' at " + path + " line " +
                            std::to_string(reader.line_number()));
        }
        if (p.good == p.bad) {
            throw DataError("minimal pair with identical sentences at " + path + " line " +
                            std::to_string(reader.line_number()));
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

void write_minimal_pairs(const std::vector<MinimalPair>& pairs, const std::string& path) {
    std::ostringstream out;
    for (const auto& p : pairs) {
        out << json{{"phenomenon", p.phenomenon}, {"good", p.good}, {"bad", p.bad}}.dump()
            << '\n';
    }
    write_text_file(path, out.str());
}

double pll_score(const nn::Model<float>& model, const bpe::BpeVocab& vocab,
                 const std::string& sentence, const PllOptions& opt) {
    const auto& cfg = model.config();
    auto enc = bpe::encode(vocab, sentence, /*add_specials=*/true);
    const int L = static_cast<int>(enc.ids.size());
    if (L > cfg.max_positions - 2) {
        throw TruncationError("sentence of " + std::to_string(L) + " tokens exceeds the " +
                              std::to_string(cfg.max_positions - 2) + "-token limit");
    }
    std::vector<int> score_positions;
    for (int t = 0; t < L; ++t) {
        if (!vocab.is_special(enc.ids[static_cast<size_t>(t)])) {
            score_positions.push_back(t);
        }
    }
    if (score_positions.empty()) {
        throw DataError("sentence tokenizes to no scorable tokens");
    }

    const int mask_id = vocab.mask_id();
    double total = 0.0;
    for (size_t base = 0; base < score_positions.size();
         base += static_cast<size_t>(opt.copies_per_batch)) {
        size_t n = std::min<size_t>(opt.copies_per_batch, score_positions.size() - base);
        nn::Batch batch;
        batch.n_seq = static_cast<int>(n);
        batch.seq_len = L;
        batch.ids.resize(n * static_cast<size_t>(L));
        batch.mask.assign(n * static_cast<size_t>(L), 1);
        for (size_t i = 0; i < n; ++i) {
            std::copy(enc.ids.begin(), enc.ids.end(),
                      batch.ids.begin() + static_cast<long>(i * L));
            batch.ids[i * L + static_cast<size_t>(score_positions[base + i])] = mask_id;
        }
        nn::Mat<float> hidden = model.forward(batch);
        nn::Mat<float> gathered(static_cast<long>(n), cfg.hidden_size);
        for (size_t i = 0; i < n; ++i) {
            gathered.row(static_cast<long>(i)) =
                hidden.row(static_cast<long>(i * L + static_cast<size_t>(score_positions[base + i])));
        }
        nn::Mat<float> logits = model.mlm_logits_rows(gathered);
        for (size_t i = 0; i < n; ++i) {
            long r = static_cast<long>(i);
            float mx = logits.row(r).maxCoeff();
            double lse =
                std::log((logits.row(r).array() - mx).exp().sum()) + static_cast<double>(mx);
            int32_t target = enc.ids[static_cast<size_t>(score_positions[base + i])];
            total += static_cast<double>(logits(r, target)) - lse;
        }
    }
    if (opt.length_normalize) {
        total /= static_cast<double>(score_positions.size());
    }
    return total;
}

TurblimpReport turblimp_eval(const PairScorer& scorer, const std::vector<MinimalPair>& pairs) {
    struct Tally {
        long n = 0;
        long correct = 0;
        long skipped = 0;
    };
    std::map<std::string, Tally> tallies;
    for (const auto& p : pairs) {
        if (!is_known_phenomenon(p.phenomenon)) {
            throw DataError("unknown phenomenon '" + p.phenomenon + "'");
        }
    }

    // Scores are computed in parallel into per-pair slots, so the report is
    // independent of evaluation order.
    std::vector<std::optional<std::pair<double, double>>> scores(pairs.size());
    global_pool().parallel_for(0, pairs.size(), [&](size_t i) { scores[i] = scorer(pairs[i]); });

    for (size_t i = 0; i < pairs.size(); ++i) {
        Tally& t = tallies[pairs[i].phenomenon];
        if (!scores[i]) {
            ++t.skipped;
            continue;
        }
        ++t.n;
        if (scores[i]->first > scores[i]->second) {
            ++t.correct;  // ties count as incorrect
        }
    }

    TurblimpReport report;
    double sum = 0.0;
    long present = 0;
    for (const auto& name : kPhenomena) {
        auto it = tallies.find(name);
        if (it == tallies.end()) {
            continue;
        }
        const Tally& t = it->second;
        report.total_skipped += t.skipped;
        if (t.n == 0) {
            std::cerr << "warning: phenomenon '" << name
                      << "' has no scored pairs; excluded from the average\n";
            continue;
        }
        PhenomenonScore ps;
        ps.phenomenon = name;
        ps.n_pairs = t.n;
        ps.n_correct = t.correct;
        ps.n_skipped = t.skipped;
        ps.accuracy = 100.0 * static_cast<double>(t.correct) / static_cast<double>(t.n);
        sum += ps.accuracy;
        ++present;
        report.per_phenomenon.push_back(std::move(ps));
    }
    if (present == 0) {
        throw DataError("no scorable minimal pairs");
    }
    report.average = sum / static_cast<double>(present);
    return report;
}

TurblimpReport turblimp_eval(const nn::Model<float>& model, const bpe::BpeVocab& vocab,
                             const std::vector<MinimalPair>& pairs, const PllOptions& opt) {
    PairScorer scorer = [&](const MinimalPair& p) -> std::optional<std::pair<double, double>> {
        try {
            double g = pll_score(model, vocab, p.good, opt);
            double b = pll_score(model, vocab, p.bad, opt);
            return std::make_pair(g, b);
        } catch (const TruncationError&) {
            return std::nullopt;
        }
    };
    return turblimp_eval(scorer, pairs);
}

}  // namespace desklm::evalx
