#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskgrid/common.hpp"

namespace maskgrid {

// T x C acoustic token matrix, row-major over time.
struct TokenGrid {
    int64_t frames = 0;
    int32_t codebooks = 0;
    std::vector<int32_t> codes;  // frames * codebooks

    TokenGrid() = default;
    TokenGrid(int64_t t, int32_t c) : frames(t), codebooks(c), codes(static_cast<size_t>(t * c), 0) {}

    int32_t& at(int64_t t, int32_t c) { return codes[static_cast<size_t>(t * codebooks + c)]; }
    int32_t at(int64_t t, int32_t c) const { return codes[static_cast<size_t>(t * codebooks + c)]; }

    bool operator==(const TokenGrid&) const = default;
};

// Text prefix plus token grid with its prompt/target split.
struct Sequence {
    std::vector<int32_t> text;
    TokenGrid grid;
    int64_t prompt_len = 0;  // frames in the prompt segment

    int64_t target_frames() const { return grid.frames - prompt_len; }
    int64_t total_tokens() const { return static_cast<int64_t>(text.size()) + grid.frames; }

    bool operator==(const Sequence&) const = default;
};

enum class AttentionMode { bidirectional, causal };

std::string to_string(AttentionMode m);
AttentionMode attention_mode_from_string(const std::string& s);

struct ModelConfig {
    int layers = 4;
    int model_dim = 128;
    int heads = 4;
    int ffn_dim = 512;
    int text_vocab = 64;     // last id is the learned null-text token
    int codebooks = 4;       // C
    int codebook_vocab = 64; // K, includes the reserved mask id
    int max_positions = 512;
    AttentionMode attention_mode = AttentionMode::bidirectional;
    double rope_base = 10000.0;

    int mask_id() const { return codebook_vocab - 1; }
    int null_text_id() const { return text_vocab - 1; }

    void validate() const {
        if (layers < 1 || model_dim < 1 || heads < 1 || ffn_dim < 1) throw input_error("model config: non-positive extent");
        if (model_dim % heads != 0) throw input_error("model config: model_dim must be divisible by heads");
        if (codebook_vocab < 2) throw input_error("model config: codebook vocabulary must reserve the mask id (K >= 2)");
        if (codebooks < 1) throw input_error("model config: need at least one codebook");
        if (text_vocab < 2) throw input_error("model config: text vocabulary must reserve the null-text id");
        if (max_positions < 1) throw input_error("model config: max_positions must be positive");
    }

    bool operator==(const ModelConfig&) const = default;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    void save(const std::string& path) const;
    static ModelConfig load(const std::string& path);
};

// Validates a sequence against a model config (vocabulary and length bounds).
void validate_sequence(const Sequence& seq, const ModelConfig& cfg);

}  // namespace maskgrid
