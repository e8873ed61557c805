#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskgrid/rng.hpp"
#include "maskgrid/types.hpp"

namespace maskgrid {

// Synthetic text-to-grid language with an exactly computable posterior.
// Codes follow x[t,c] = (base[c][symbol][slot] + offset[c][speaker]) mod (K-1)
// where slot = t mod frames_per_symbol; the mask id K-1 never appears in
// clean data. Tables are derived from table_seed and validated so that any
// single uncorrupted frame identifies its speaker uniquely.
struct ToySpec {
    int32_t alphabet = 26;
    int32_t frames_per_symbol = 2;
    int32_t speakers = 8;
    int32_t codebooks = 4;
    int32_t codebook_vocab = 64;  // K, includes the reserved mask id
    double eta = 0.25;            // per-code jitter rate on corrupted prompts
    int32_t min_symbols = 10;
    int32_t max_symbols = 10;
    int32_t prompt_symbols = 2;
    uint64_t table_seed = 0;

    std::vector<int32_t> base_table;  // [c][y][l]
    std::vector<int32_t> offsets;     // [c][s]

    int32_t code_modulus() const { return codebook_vocab - 1; }
    int32_t mask_id() const { return codebook_vocab - 1; }
    int32_t denoise_token() const { return alphabet; }
    // text ids: symbols, then the denoise instruct token; null-text id lives
    // at the top of the model's text vocabulary
    int32_t min_text_vocab() const { return alphabet + 2; }

    int32_t base(int32_t c, int32_t y, int32_t l) const {
        return base_table[static_cast<size_t>((c * alphabet + y) * frames_per_symbol + l)];
    }
    int32_t offset(int32_t c, int32_t s) const { return offsets[static_cast<size_t>(c * speakers + s)]; }

    // Builds and validates the tables; bumps an internal attempt counter on
    // the rare cross-speaker collision.
    static ToySpec make(uint64_t table_seed);
    static ToySpec make(ToySpec proto, uint64_t table_seed);

    std::string to_json() const;
    static ToySpec from_json(const std::string& text);
    void save(const std::string& path) const;
    static ToySpec load(const std::string& path);

    bool operator==(const ToySpec&) const = default;
};

struct ToySample {
    Sequence seq;
    int32_t speaker = 0;
    std::vector<uint8_t> corrupt_frames;  // one flag per prompt frame
    bool denoise = false;

    bool operator==(const ToySample&) const = default;
};

// Deterministic clean grid for a symbol sequence and speaker.
TokenGrid transduce(const ToySpec& spec, const std::vector<int32_t>& symbols, int32_t speaker);

// Strips instruct tokens from a text prefix, leaving plain symbols.
std::vector<int32_t> symbols_of_text(const ToySpec& spec, const std::vector<int32_t>& text);

// Uniform draws over texts and speakers. A corrupt_fraction of samples get
// their prompt codes jittered at rate eta and the denoise token prepended;
// the stored target frames stay clean.
std::vector<ToySample> generate(const ToySpec& spec, Rng& rng, int64_t count, double corrupt_fraction = 0.0);

struct PosteriorEntry {
    int32_t t = 0;
    int32_t c = 0;
    std::vector<double> probs;  // over codes [0, K-1); the mask id has mass 0
};

// Exact per-position posterior at masked grid entries: enumerate speakers
// consistent with every visible uncorrupted position, mix their deterministic
// outputs uniformly. corrupt_frames may be empty (no corruption).
std::vector<PosteriorEntry> oracle_posterior(const ToySpec& spec, const Sequence& seq,
                                             const std::vector<uint8_t>& corrupt_frames = {});

// Grid -> symbol inversion under the best-fit speaker offset, then
// Levenshtein distance to the reference divided by reference length.
// Uninvertible symbols count as substitutions.
double toy_wer(const ToySpec& spec, const TokenGrid& decoded, const std::vector<int32_t>& reference_symbols);

// Fraction of decoded frames consistent with the prompt's speaker offset.
// The prompt must identify exactly one speaker.
double toy_sim(const ToySpec& spec, const TokenGrid& decoded, const TokenGrid& prompt_grid);

// Speakers under which every frame of the segment decodes to some symbol
// (text-free consistency, used for prompt speaker identification).
std::vector<int32_t> consistent_speakers(const ToySpec& spec, const TokenGrid& grid, int64_t frame_begin,
                                         int64_t frame_end);

// Corpus JSONL, one sample per line.
void save_corpus(const std::string& path, const std::vector<ToySample>& samples);
std::vector<ToySample> load_corpus(const std::string& path);

}  // namespace maskgrid
