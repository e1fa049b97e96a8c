#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace desklm::corpus {

enum class Source { mc4_like, oscar_like, wiki_like, other };

Source source_from_string(const std::string& s);
std::string source_to_string(Source s);

// One record as it arrives from an input file: arbitrary bytes, not yet
// validated.
struct RawRecord {
    std::string id;
    std::string text;
    Source source = Source::other;
};

// A kept record. text is always well-formed UTF-8 once it has passed
// filter_documents.
struct Document {
    std::string id;
    std::string text;
    Source source = Source::other;
    uint64_t byte_len = 0;
};

inline Document make_document(std::string id, std::string text, Source source) {
    Document d;
    d.id = std::move(id);
    d.byte_len = text.size();
    d.text = std::move(text);
    d.source = source;
    return d;
}

struct FilterStats {
    uint64_t kept = 0;
    uint64_t dropped_invalid_encoding = 0;
};

struct CorpusManifest {
    std::vector<std::string> shards;  // paths relative to the manifest file
    uint64_t total_bytes = 0;
    uint64_t seed = 0;
    FilterStats filter_stats;
};

// Drops every record whose text is not well-formed UTF-8; applies no other
// cleaning. Validation runs in parallel, output preserves input order.
// Throws DataError if nothing survives.
std::vector<Document> filter_documents(std::vector<RawRecord> raw, FilterStats& stats);

// Reads newline-delimited JSON records {id, text, source} from a plain or
// .gz file. A line that is not valid UTF-8 cannot be parsed and is passed
// through as a raw blob for the filter to drop; a structurally broken JSON
// line on otherwise valid text is a hard error naming the line.
std::vector<RawRecord> read_raw_records(const std::string& path);

std::vector<size_t> seeded_permutation(size_t n, uint64_t seed);

// Greedy packing of documents (in the given order) into shards: a shard is
// closed once full, so every shard stays within shard_bytes except when a
// single document alone exceeds it.
std::vector<std::vector<size_t>> greedy_pack(const std::vector<Document>& docs,
                                             const std::vector<size_t>& order,
                                             uint64_t shard_bytes);

// Shuffles with a seeded Fisher-Yates permutation, packs into shards of
// roughly shard_bytes, writes them under out_dir and returns the manifest.
// filter_stats carried into the manifest defaults to {kept=|docs|, dropped=0};
// pass the real stats when this follows a filtering pass.
CorpusManifest shuffle_and_shard(const std::vector<Document>& docs, uint64_t seed,
                                 uint64_t shard_bytes, const std::string& out_dir,
                                 const std::string& shard_prefix,
                                 std::optional<FilterStats> stats = std::nullopt);

void write_manifest(const CorpusManifest& m, const std::string& path);
CorpusManifest load_manifest(const std::string& path);

// Reads every document referenced by the manifest, in shard order.
std::vector<Document> load_manifest_documents(const CorpusManifest& m,
                                              const std::string& manifest_path);

// Seeded uniform document sample whose cumulative byte_len is the smallest
// value >= target_bytes. Throws DataError when target_bytes exceeds the
// corpus size.
std::vector<Document> sample_documents(const std::vector<Document>& docs,
                                       uint64_t target_bytes, uint64_t seed);

std::vector<Document> sample_for_vocab(const CorpusManifest& m, const std::string& manifest_path,
                                       uint64_t target_bytes, uint64_t seed);

std::string document_to_json_line(const Document& d);

struct CorpusStageOptions {
    std::vector<std::string> inputs;
    std::string out_dir;
    uint64_t seed = 1;
    uint64_t shard_bytes = 64ull << 20;
    double valid_fraction = 0.01;
};

struct CorpusStageResult {
    CorpusManifest full;
    std::string train_manifest_path;
    std::string valid_manifest_path;
    std::string full_manifest_path;
};

// Full ingestion stage: read all inputs, filter, shuffle, shard, and emit
// train/valid manifests plus the combined one.
CorpusStageResult run_corpus_stage(const CorpusStageOptions& opt);

}  // namespace desklm::corpus
