#include "desklm/model_config.hpp"

#include "desklm/bpe.hpp"
#include "desklm/common.hpp"

namespace desklm::nn {

ModelConfig base_preset(int vocab_size) {
    ModelConfig cfg;
    cfg.num_layers = 12;
    cfg.hidden_size = 768;
    cfg.num_heads = 12;
    cfg.ffn_size = 3072;
    cfg.vocab_size = vocab_size;
    return cfg;
}

ModelConfig large_preset(int vocab_size) {
    ModelConfig cfg;
    cfg.num_layers = 24;
    cfg.hidden_size = 1024;
    cfg.num_heads = 16;
    cfg.ffn_size = 4096;
    cfg.vocab_size = vocab_size;
    return cfg;
}

void validate(const ModelConfig& cfg) {
    if (cfg.num_layers < 0) {
        throw ConfigError("num_layers must be >= 0");
    }
    if (cfg.hidden_size <= 0 || cfg.num_heads <= 0 || cfg.hidden_size % cfg.num_heads != 0) {
        throw ConfigError("hidden_size must be a positive multiple of num_heads");
    }
    if (cfg.ffn_size <= 0) {
        throw ConfigError("ffn_size must be positive");
    }
    // Room for the five specials plus at least one regular token. Models that
    // pair with a byte-level tokenizer need vocab_size >= 261; the pretrain
    // stage enforces that against the actual tokenizer.
    if (cfg.vocab_size < 6) {
        throw ConfigError("vocab_size must be at least 6");
    }
    if (cfg.max_positions < 2) {
        throw ConfigError("max_positions must be >= 2");
    }
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0 || cfg.attention_dropout < 0.0 ||
        cfg.attention_dropout >= 1.0) {
        throw ConfigError("dropout probabilities must lie in [0, 1)");
    }
    if (cfg.layer_norm_eps <= 0.0) {
        throw ConfigError("layer_norm_eps must be positive");
    }
}

std::vector<TensorSpec> parameter_manifest(const ModelConfig& cfg) {
    std::vector<TensorSpec> specs;
    const long H = cfg.hidden_size;
    const long F = cfg.ffn_size;
    const long V = cfg.vocab_size;
    auto add = [&specs](std::string name, long rows, long cols) {
        specs.push_back(TensorSpec{std::move(name), rows, cols});
    };
    add("embed.tokens", V, H);
    add("embed.positions", cfg.position_rows(), H);
    add("embed.norm.weight", 1, H);
    add("embed.norm.bias", 1, H);
    for (int i = 0; i < cfg.num_layers; ++i) {
        std::string prefix = "layers." + std::to_string(i) + ".";
        for (const char* part : {"q", "k", "v", "out"}) {
            add(prefix + "attn." + part + ".weight", H, H);
            add(prefix + "attn." + part + ".bias", 1, H);
        }
        add(prefix + "attn.norm.weight", 1, H);
        add(prefix + "attn.norm.bias", 1, H);
        add(prefix + "ffn.fc1.weight", H, F);
        add(prefix + "ffn.fc1.bias", 1, F);
        add(prefix + "ffn.fc2.weight", F, H);
        add(prefix + "ffn.fc2.bias", 1, H);
        add(prefix + "ffn.norm.weight", 1, H);
        add(prefix + "ffn.norm.bias", 1, H);
    }
    // Output projection reuses embed.tokens (tied), so only the bias is free.
    add("mlm.dense.weight", H, H);
    add("mlm.dense.bias", 1, H);
    add("mlm.norm.weight", 1, H);
    add("mlm.norm.bias", 1, H);
    add("mlm.bias", 1, V);
    return specs;
}

int64_t count_parameters(const ModelConfig& cfg) {
    validate(cfg);
    int64_t total = 0;
    for (const auto& spec : parameter_manifest(cfg)) {
        total += spec.count();
    }
    return total;
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"num_layers", cfg.num_layers},
                          {"hidden_size", cfg.hidden_size},
                          {"num_heads", cfg.num_heads},
                          {"ffn_size", cfg.ffn_size},
                          {"vocab_size", cfg.vocab_size},
                          {"max_positions", cfg.max_positions},
                          {"dropout", cfg.dropout},
                          {"attention_dropout", cfg.attention_dropout},
                          {"layer_norm_eps", cfg.layer_norm_eps}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.num_layers = j.value("num_layers", cfg.num_layers);
    cfg.hidden_size = j.value("hidden_size", cfg.hidden_size);
    cfg.num_heads = j.value("num_heads", cfg.num_heads);
    cfg.ffn_size = j.value("ffn_size", cfg.ffn_size);
    cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
    cfg.max_positions = j.value("max_positions", cfg.max_positions);
    cfg.dropout = j.value("dropout", cfg.dropout);
    cfg.attention_dropout = j.value("attention_dropout", cfg.attention_dropout);
    cfg.layer_norm_eps = j.value("layer_norm_eps", cfg.layer_norm_eps);
    validate(cfg);
    return cfg;
}

}  // namespace desklm::nn
