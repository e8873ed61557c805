#include "maskgrid/types.hpp"

#include <fstream>

#include <json.hpp>

namespace maskgrid {

using nlohmann::json;

std::string to_string(AttentionMode m) {
    return m == AttentionMode::causal ? "causal" : "bidirectional";
}

AttentionMode attention_mode_from_string(const std::string& s) {
    if (s == "causal") return AttentionMode::causal;
    if (s == "bidirectional") return AttentionMode::bidirectional;
    throw input_error("unknown attention mode '" + s + "'");
}

std::string ModelConfig::to_json() const {
    json j{{"layers", layers},
           {"model_dim", model_dim},
           {"heads", heads},
           {"ffn_dim", ffn_dim},
           {"text_vocab", text_vocab},
           {"codebooks", codebooks},
           {"codebook_vocab", codebook_vocab},
           {"max_positions", max_positions},
           {"attention_mode", to_string(attention_mode)},
           {"rope_base", rope_base}};
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    ModelConfig cfg;
    cfg.layers = j.at("layers").get<int>();
    cfg.model_dim = j.at("model_dim").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.ffn_dim = j.at("ffn_dim").get<int>();
    cfg.text_vocab = j.at("text_vocab").get<int>();
    cfg.codebooks = j.at("codebooks").get<int>();
    cfg.codebook_vocab = j.at("codebook_vocab").get<int>();
    cfg.max_positions = j.at("max_positions").get<int>();
    cfg.attention_mode = attention_mode_from_string(j.at("attention_mode").get<std::string>());
    cfg.rope_base = j.at("rope_base").get<double>();
    cfg.validate();
    return cfg;
}

void ModelConfig::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw io_error("cannot write " + path);
    f << to_json() << "\n";
}

ModelConfig ModelConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_json(text);
}

void validate_sequence(const Sequence& seq, const ModelConfig& cfg) {
    if (seq.text.empty()) throw input_error("sequence: text prefix must be nonempty");
    if (seq.grid.codebooks != cfg.codebooks) throw input_error("sequence: codebook count mismatch");
    if (seq.prompt_len < 0 || seq.prompt_len > seq.grid.frames)
        throw input_error("sequence: prompt length out of range");
    if (seq.total_tokens() > cfg.max_positions)
        throw input_error("sequence: " + std::to_string(seq.total_tokens()) + " tokens exceed max_positions");
    for (int32_t id : seq.text)
        if (id < 0 || id >= cfg.text_vocab) throw input_error("sequence: text id out of vocabulary");
    for (int32_t code : seq.grid.codes)
        if (code < 0 || code >= cfg.codebook_vocab) throw input_error("sequence: grid code out of vocabulary");
}

}  // namespace maskgrid
