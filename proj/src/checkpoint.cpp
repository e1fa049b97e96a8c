#include "desklm/checkpoint.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstring>
#include <fstream>

#include "desklm/common.hpp"

namespace desklm::nn {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'D', 'E', 'S', 'K', 'L', 'M', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void write_raw(std::ofstream& out, const void* data, size_t bytes, const std::string& path) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!out) {
        throw IoError("checkpoint write failed: " + path);
    }
}

std::string seed_to_hex(uint64_t seed) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(seed));
    return buf;
}

uint64_t seed_from_hex(const std::string& hex) {
    return std::strtoull(hex.c_str(), nullptr, 16);
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    // Directory of model tensors, in manifest order.
    json dir = json::array();
    uint64_t offset = 0;
    std::vector<const Mat<float>*> blobs;
    auto& params = const_cast<EncoderParams<float>&>(ckpt.params);
    for_each_tensor(params, [&](const std::string& name, Mat<float>& m) {
        uint64_t bytes = static_cast<uint64_t>(m.size()) * sizeof(float);
        dir.push_back({{"name", name},
                       {"shape", {m.rows(), m.cols()}},
                       {"offset", offset},
                       {"bytes", bytes}});
        offset += bytes;
        blobs.push_back(&m);
    });

    json header;
    header["config"] = config_to_json(ckpt.config);
    header["step"] = ckpt.step;
    header["rng_state"] = seed_to_hex(ckpt.rng_seed);
    header["tensors"] = dir;
    if (ckpt.tokenizer_merges) {
        header["tokenizer"] = {{"merges", *ckpt.tokenizer_merges}};
    }
    std::vector<const Mat<float>*> opt_blobs;
    if (ckpt.optimizer) {
        const auto& st = *ckpt.optimizer;
        if (st.m.size() != blobs.size() || st.v.size() != blobs.size()) {
            throw DataError("optimizer state does not match the parameter manifest");
        }
        json odir = json::array();
        for (size_t i = 0; i < st.m.size(); ++i) {
            for (const char* which : {"m", "v"}) {
                const Mat<float>& m = which[0] == 'm' ? st.m[i] : st.v[i];
                uint64_t bytes = static_cast<uint64_t>(m.size()) * sizeof(float);
                odir.push_back({{"name", std::string("adam.") + which + "." + dir[i]["name"].get<std::string>()},
                                {"shape", {m.rows(), m.cols()}},
                                {"offset", offset},
                                {"bytes", bytes}});
                offset += bytes;
                opt_blobs.push_back(&m);
            }
        }
        header["optimizer"] = {{"step", st.step}, {"tensors", odir}};
    }

    std::string header_text = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write checkpoint: " + path);
    }
    write_raw(out, kMagic, sizeof(kMagic), path);
    uint32_t version = kVersion;
    write_raw(out, &version, sizeof(version), path);
    uint64_t header_len = header_text.size();
    write_raw(out, &header_len, sizeof(header_len), path);
    write_raw(out, header_text.data(), header_text.size(), path);
    for (const auto* m : blobs) {
        write_raw(out, m->data(), static_cast<size_t>(m->size()) * sizeof(float), path);
    }
    for (const auto* m : opt_blobs) {
        write_raw(out, m->data(), static_cast<size_t>(m->size()) * sizeof(float), path);
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint: " + path);
    }
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw DataError("not a checkpoint file: " + path);
    }
    uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!in || version != kVersion) {
        throw DataError("unsupported checkpoint version in " + path);
    }
    uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!in) {
        throw DataError("truncated checkpoint header: " + path);
    }
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!in) {
        throw DataError("truncated checkpoint header: " + path);
    }
    json header;
    try {
        header = json::parse(header_text);
    } catch (const json::exception& e) {
        throw DataError("corrupt checkpoint header in " + path + ": " + e.what());
    }

    Checkpoint ckpt;
    ckpt.config = config_from_json(header.at("config"));
    ckpt.step = header.value("step", 0ull);
    ckpt.rng_seed = seed_from_hex(header.value("rng_state", std::string("0")));
    if (header.contains("tokenizer")) {
        ckpt.tokenizer_merges = header["tokenizer"].value("merges", std::string());
    }

    // The directory must match the config-derived manifest exactly.
    auto manifest = parameter_manifest(ckpt.config);
    const json& dir = header.at("tensors");
    if (dir.size() != manifest.size()) {
        throw DataError("checkpoint " + path + " holds " + std::to_string(dir.size()) +
                        " tensors, manifest expects " + std::to_string(manifest.size()));
    }
    const std::streampos blob_base = in.tellg();
    ckpt.params = allocate_params<float>(ckpt.config, /*zero=*/false);
    size_t idx = 0;
    for_each_tensor(ckpt.params, [&](const std::string& name, Mat<float>& m) {
        const json& entry = dir.at(idx);
        const auto& spec = manifest.at(idx);
        ++idx;
        if (entry.at("name").get<std::string>() != name) {
            throw DataError("checkpoint tensor mismatch: expected '" + name + "', found '" +
                            entry.at("name").get<std::string>() + "'");
        }
        long rows = entry.at("shape").at(0).get<long>();
        long cols = entry.at("shape").at(1).get<long>();
        if (rows != spec.rows || cols != spec.cols) {
            throw DataError("checkpoint tensor '" + name + "' has shape " + std::to_string(rows) +
                            "x" + std::to_string(cols) + ", expected " + std::to_string(spec.rows) +
                            "x" + std::to_string(spec.cols));
        }
        in.seekg(blob_base + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
        in.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(static_cast<size_t>(m.size()) * sizeof(float)));
        if (!in) {
            throw DataError("checkpoint tensor '" + name + "' is truncated in " + path);
        }
    });

    if (header.contains("optimizer")) {
        OptimizerState st;
        st.step = header["optimizer"].value("step", int64_t{0});
        const json& odir = header["optimizer"].at("tensors");
        for (size_t i = 0; i < odir.size(); ++i) {
            const json& entry = odir.at(i);
            long rows = entry.at("shape").at(0).get<long>();
            long cols = entry.at("shape").at(1).get<long>();
            Mat<float> m(rows, cols);
            in.seekg(blob_base + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
            in.read(reinterpret_cast<char*>(m.data()),
                    static_cast<std::streamsize>(static_cast<size_t>(m.size()) * sizeof(float)));
            if (!in) {
                throw DataError("optimizer tensor truncated in " + path);
            }
            (i % 2 == 0 ? st.m : st.v).push_back(std::move(m));
        }
        if (st.m.size() != manifest.size() || st.v.size() != manifest.size()) {
            throw DataError("optimizer directory does not match the parameter manifest");
        }
        ckpt.optimizer = std::move(st);
    }
    return ckpt;
}

bpe::BpeVocab vocab_from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.tokenizer_merges) {
        throw DataError("checkpoint carries no tokenizer; pass one explicitly");
    }
    return bpe::BpeVocab::build(bpe::parse_merges_text(*ckpt.tokenizer_merges));
}

}  // namespace desklm::nn
