#pragma once

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace desklm::nn {

// Encoder hyperparameters. Position rows carry a +2 offset because position
// indices start after the pad id, so the table holds max_positions + 2 rows.
struct ModelConfig {
    int num_layers = 12;
    int hidden_size = 768;
    int num_heads = 12;
    int ffn_size = 3072;
    int vocab_size = 52000;
    int max_positions = 512;
    double dropout = 0.1;
    double attention_dropout = 0.1;
    double layer_norm_eps = 1e-5;

    int head_dim() const { return hidden_size / num_heads; }
    int position_rows() const { return max_positions + 2; }
};

ModelConfig base_preset(int vocab_size);
ModelConfig large_preset(int vocab_size);

// Throws ConfigError on violated constraints (divisibility, minimum vocab,
// probability ranges).
void validate(const ModelConfig& cfg);

struct TensorSpec {
    std::string name;
    long rows = 0;
    long cols = 0;

    long count() const { return rows * cols; }
};

// Canonical parameter list: embeddings, every block, MLM head. Task heads are
// not part of the core manifest. The order here is the serialization order.
std::vector<TensorSpec> parameter_manifest(const ModelConfig& cfg);

int64_t count_parameters(const ModelConfig& cfg);

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

}  // namespace desklm::nn
