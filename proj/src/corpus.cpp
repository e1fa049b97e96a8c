#include "desklm/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "desklm/common.hpp"
#include "desklm/io.hpp"
#include "desklm/rng.hpp"
#include "desklm/threadpool.hpp"

namespace desklm::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

Source source_from_string(const std::string& s) {
    if (s == "mc4") return Source::mc4_like;
    if (s == "oscar") return Source::oscar_like;
    if (s == "wiki") return Source::wiki_like;
    return Source::other;
}

std::string source_to_string(Source s) {
    switch (s) {
        case Source::mc4_like: return "mc4";
        case Source::oscar_like: return "oscar";
        case Source::wiki_like: return "wiki";
        default: return "other";
    }
}

std::vector<Document> filter_documents(std::vector<RawRecord> raw, FilterStats& stats) {
    std::vector<char> keep(raw.size(), 0);
    global_pool().parallel_for(0, raw.size(),
                               [&](size_t i) { keep[i] = is_valid_utf8(raw[i].text) ? 1 : 0; });

    std::vector<Document> out;
    out.reserve(raw.size());
    stats = FilterStats{};
    for (size_t i = 0; i < raw.size(); ++i) {
        if (keep[i]) {
            ++stats.kept;
            out.push_back(make_document(std::move(raw[i].id), std::move(raw[i].text), raw[i].source));
        } else {
            ++stats.dropped_invalid_encoding;
        }
    }
    if (out.empty()) {
        throw DataError("empty corpus: no documents passed the encoding filter");
    }
    return out;
}

std::vector<RawRecord> read_raw_records(const std::string& path) {
    LineReader reader(path);
    std::vector<RawRecord> out;
    std::string line;
    std::string stem = fs::path(path).stem().string();
    while (reader.next(line)) {
        if (line.empty()) {
            continue;
        }
        RawRecord rec;
        if (!is_valid_utf8(line)) {
            // Cannot be parsed as JSON; keep the raw bytes so the filter can
            // count the drop.
            rec.id = stem + ":" + std::to_string(reader.line_number());
            rec.text = line;
            out.push_back(std::move(rec));
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("malformed record in " + path + " line " +
                            std::to_string(reader.line_number()) + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
            throw DataError("record missing text field in " + path + " line " +
                            std::to_string(reader.line_number()));
        }
        rec.text = j["text"].get<std::string>();
        rec.id = j.contains("id") && j["id"].is_string()
                     ? j["id"].get<std::string>()
                     : stem + ":" + std::to_string(reader.line_number());
        rec.source = source_from_string(j.value("source", std::string("other")));
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<size_t> seeded_permutation(size_t n, uint64_t seed) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    Rng rng(mix_seed({seed, 0x5AFFull}));
    rng.shuffle(order);
    return order;
}

std::vector<std::vector<size_t>> greedy_pack(const std::vector<Document>& docs,
                                             const std::vector<size_t>& order,
                                             uint64_t shard_bytes) {
    std::vector<std::vector<size_t>> shards;
    std::vector<size_t> current;
    uint64_t current_bytes = 0;
    for (size_t idx : order) {
        uint64_t len = docs[idx].byte_len;
        if (!current.empty() && current_bytes + len > shard_bytes) {
            shards.push_back(std::move(current));
            current.clear();
            current_bytes = 0;
        }
        current.push_back(idx);
        current_bytes += len;
    }
    if (!current.empty()) {
        shards.push_back(std::move(current));
    }
    return shards;
}

std::string document_to_json_line(const Document& d) {
    json j;
    j["id"] = d.id;
    j["text"] = d.text;
    j["source"] = source_to_string(d.source);
    return j.dump();
}

namespace {

void write_shard(const std::string& path, const std::vector<Document>& docs,
                 const std::vector<size_t>& members) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write shard: " + path);
    }
    for (size_t idx : members) {
        out << document_to_json_line(docs[idx]) << '\n';
    }
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

}  // namespace

CorpusManifest shuffle_and_shard(const std::vector<Document>& docs, uint64_t seed,
                                 uint64_t shard_bytes, const std::string& out_dir,
                                 const std::string& shard_prefix,
                                 std::optional<FilterStats> stats) {
    if (docs.empty()) {
        throw DataError("empty corpus: nothing to shard");
    }
    if (shard_bytes == 0) {
        throw ConfigError("shard_bytes must be positive");
    }
    ensure_dir(out_dir);
    auto order = seeded_permutation(docs.size(), seed);
    auto groups = greedy_pack(docs, order, shard_bytes);

    CorpusManifest m;
    m.seed = seed;
    if (stats) {
        m.filter_stats = *stats;
    } else {
        m.filter_stats.kept = docs.size();
        m.filter_stats.dropped_invalid_encoding = 0;
    }
    for (size_t s = 0; s < groups.size(); ++s) {
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%04zu.jsonl", shard_prefix.c_str(), s);
        write_shard((fs::path(out_dir) / name).string(), docs, groups[s]);
        m.shards.push_back(name);
        for (size_t idx : groups[s]) {
            m.total_bytes += docs[idx].byte_len;
        }
    }
    return m;
}

void write_manifest(const CorpusManifest& m, const std::string& path) {
    json j;
    j["format"] = "desklm-corpus-manifest-v1";
    j["seed"] = m.seed;
    j["total_bytes"] = m.total_bytes;
    j["filter_stats"] = {{"kept", m.filter_stats.kept},
                         {"dropped_invalid_encoding", m.filter_stats.dropped_invalid_encoding}};
    j["shards"] = m.shards;
    write_text_file(path, j.dump(2) + "\n");
}

CorpusManifest load_manifest(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw DataError("corrupt manifest " + path + ": " + e.what());
    }
    CorpusManifest m;
    m.seed = j.value("seed", 0ull);
    m.total_bytes = j.value("total_bytes", 0ull);
    if (j.contains("filter_stats")) {
        m.filter_stats.kept = j["filter_stats"].value("kept", 0ull);
        m.filter_stats.dropped_invalid_encoding =
            j["filter_stats"].value("dropped_invalid_encoding", 0ull);
    }
    for (const auto& s : j.value("shards", std::vector<std::string>{})) {
        m.shards.push_back(s);
    }
    return m;
}

std::vector<Document> load_manifest_documents(const CorpusManifest& m,
                                              const std::string& manifest_path) {
    fs::path base = fs::path(manifest_path).parent_path();
    std::vector<Document> docs;
    for (const auto& shard : m.shards) {
        fs::path p = fs::path(shard).is_absolute() ? fs::path(shard) : base / shard;
        auto raw = read_raw_records(p.string());
        for (auto& r : raw) {
            docs.push_back(make_document(std::move(r.id), std::move(r.text), r.source));
        }
    }
    return docs;
}

std::vector<Document> sample_documents(const std::vector<Document>& docs,
                                       uint64_t target_bytes, uint64_t seed) {
    uint64_t total = 0;
    for (const auto& d : docs) {
        total += d.byte_len;
    }
    if (target_bytes > total) {
        throw DataError("insufficient data: requested " + std::to_string(target_bytes) +
                        " bytes but corpus holds " + std::to_string(total));
    }
    auto order = seeded_permutation(docs.size(), mix_seed({seed, 0xA11ull}));
    std::vector<Document> out;
    uint64_t cum = 0;
    for (size_t idx : order) {
        if (cum >= target_bytes) {
            break;
        }
        out.push_back(docs[idx]);
        cum += docs[idx].byte_len;
    }
    return out;
}

std::vector<Document> sample_for_vocab(const CorpusManifest& m, const std::string& manifest_path,
                                       uint64_t target_bytes, uint64_t seed) {
    auto docs = load_manifest_documents(m, manifest_path);
    return sample_documents(docs, target_bytes, seed);
}

CorpusStageResult run_corpus_stage(const CorpusStageOptions& opt) {
    if (opt.inputs.empty()) {
        throw ConfigError("corpus stage needs at least one --input file");
    }
    if (opt.valid_fraction < 0.0 || opt.valid_fraction >= 1.0) {
        throw ConfigError("valid fraction must be in [0, 1)");
    }
    std::vector<RawRecord> raw;
    for (const auto& path : opt.inputs) {
        auto part = read_raw_records(path);
        std::move(part.begin(), part.end(), std::back_inserter(raw));
    }
    FilterStats stats;
    auto docs = filter_documents(std::move(raw), stats);

    ensure_dir(opt.out_dir);
    auto order = seeded_permutation(docs.size(), opt.seed);
    size_t n_valid = opt.valid_fraction > 0.0
                         ? std::max<size_t>(1, static_cast<size_t>(docs.size() * opt.valid_fraction))
                         : 0;
    if (n_valid >= docs.size()) {
        n_valid = docs.size() - 1;
    }
    std::vector<Document> train_docs, valid_docs;
    for (size_t i = 0; i < order.size(); ++i) {
        (i < order.size() - n_valid ? train_docs : valid_docs).push_back(docs[order[i]]);
    }

    CorpusStageResult res;
    // Train/valid manifests describe already-filtered subsets, so their own
    // drop count is zero; the combined manifest carries the real filter stats.
    FilterStats train_stats{train_docs.size(), 0};
    CorpusManifest train_m = shuffle_and_shard(train_docs, opt.seed, opt.shard_bytes, opt.out_dir,
                                               "train", train_stats);
    res.train_manifest_path = (fs::path(opt.out_dir) / "train_manifest.json").string();
    write_manifest(train_m, res.train_manifest_path);

    if (!valid_docs.empty()) {
        FilterStats valid_stats{valid_docs.size(), 0};
        CorpusManifest valid_m = shuffle_and_shard(valid_docs, mix_seed({opt.seed, 0x7A11Dull}),
                                                   opt.shard_bytes, opt.out_dir, "valid",
                                                   valid_stats);
        res.valid_manifest_path = (fs::path(opt.out_dir) / "valid_manifest.json").string();
        write_manifest(valid_m, res.valid_manifest_path);
    }

    res.full.seed = opt.seed;
    res.full.filter_stats = stats;
    res.full.shards = train_m.shards;
    res.full.total_bytes = train_m.total_bytes;
    if (!valid_docs.empty()) {
        CorpusManifest valid_m = load_manifest(res.valid_manifest_path);
        for (const auto& s : valid_m.shards) {
            res.full.shards.push_back(s);
        }
        res.full.total_bytes += valid_m.total_bytes;
    }
    res.full_manifest_path = (fs::path(opt.out_dir) / "corpus_manifest.json").string();
    write_manifest(res.full, res.full_manifest_path);
    return res;
}

}  // namespace desklm::corpus
