#include "maskgrid/toylang.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace maskgrid {

using nlohmann::json;

namespace {

// random injective map into [0, modulus) via a partial shuffle
std::vector<int32_t> sample_distinct(Rng& rng, int32_t count, int32_t modulus) {
    std::vector<int32_t> pool(static_cast<size_t>(modulus));
    std::iota(pool.begin(), pool.end(), 0);
    for (int32_t i = 0; i < count; ++i) {
        const auto j = i + static_cast<int32_t>(rng.uniform_int(static_cast<uint64_t>(modulus - i)));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(count));
    return pool;
}

// Any single clean frame must identify its speaker: no (y', s') may collide
// with (y, s) across all codebooks at the same slot.
bool tables_collision_free(const ToySpec& spec) {
    const int32_t mod = spec.code_modulus();
    for (int32_t l = 0; l < spec.frames_per_symbol; ++l) {
        for (int32_t s = 0; s < spec.speakers; ++s) {
            for (int32_t s2 = 0; s2 < spec.speakers; ++s2) {
                if (s2 == s) continue;
                for (int32_t y = 0; y < spec.alphabet; ++y) {
                    for (int32_t y2 = 0; y2 < spec.alphabet; ++y2) {
                        bool all_match = true;
                        for (int32_t c = 0; c < spec.codebooks && all_match; ++c) {
                            const int32_t a = (spec.base(c, y, l) + spec.offset(c, s)) % mod;
                            const int32_t b = (spec.base(c, y2, l) + spec.offset(c, s2)) % mod;
                            if (a != b) all_match = false;
                        }
                        if (all_match) return false;
                    }
                }
            }
        }
    }
    return true;
}

}  // namespace

ToySpec ToySpec::make(uint64_t table_seed) { return make(ToySpec{}, table_seed); }

ToySpec ToySpec::make(ToySpec proto, uint64_t table_seed) {
    if (proto.alphabet < 1 || proto.frames_per_symbol < 1 || proto.speakers < 1 || proto.codebooks < 1)
        throw input_error("toy spec: non-positive extent");
    if (proto.codebook_vocab < 3) throw input_error("toy spec: vocabulary too small for codes plus mask id");
    if (proto.alphabet > proto.code_modulus() || proto.speakers > proto.code_modulus())
        throw input_error("toy spec: alphabet/speakers exceed the code range");
    if (proto.prompt_symbols < 1 || proto.prompt_symbols >= proto.min_symbols ||
        proto.min_symbols > proto.max_symbols)
        throw input_error("toy spec: bad symbol count bounds");

    for (uint64_t attempt = 0;; ++attempt) {
        Rng rng(splitmix64(table_seed) ^ attempt);
        proto.table_seed = table_seed;
        proto.base_table.assign(
            static_cast<size_t>(proto.codebooks * proto.alphabet * proto.frames_per_symbol), 0);
        proto.offsets.assign(static_cast<size_t>(proto.codebooks * proto.speakers), 0);
        for (int32_t c = 0; c < proto.codebooks; ++c) {
            for (int32_t l = 0; l < proto.frames_per_symbol; ++l) {
                // injective per (codebook, slot) so inversion is well-defined
                std::vector<int32_t> vals = sample_distinct(rng, proto.alphabet, proto.code_modulus());
                for (int32_t y = 0; y < proto.alphabet; ++y)
                    proto.base_table[static_cast<size_t>(
                        (c * proto.alphabet + y) * proto.frames_per_symbol + l)] = vals[static_cast<size_t>(y)];
            }
            std::vector<int32_t> offs = sample_distinct(rng, proto.speakers, proto.code_modulus());
            for (int32_t s = 0; s < proto.speakers; ++s)
                proto.offsets[static_cast<size_t>(c * proto.speakers + s)] = offs[static_cast<size_t>(s)];
        }
        if (tables_collision_free(proto)) return proto;
    }
}

std::string ToySpec::to_json() const {
    json j{{"alphabet", alphabet},
           {"frames_per_symbol", frames_per_symbol},
           {"speakers", speakers},
           {"codebooks", codebooks},
           {"codebook_vocab", codebook_vocab},
           {"eta", eta},
           {"min_symbols", min_symbols},
           {"max_symbols", max_symbols},
           {"prompt_symbols", prompt_symbols},
           {"table_seed", table_seed},
           {"base_table", base_table},
           {"offsets", offsets}};
    return j.dump(2);
}

ToySpec ToySpec::from_json(const std::string& text) {
    json j = json::parse(text);
    ToySpec spec;
    spec.alphabet = j.at("alphabet").get<int32_t>();
    spec.frames_per_symbol = j.at("frames_per_symbol").get<int32_t>();
    spec.speakers = j.at("speakers").get<int32_t>();
    spec.codebooks = j.at("codebooks").get<int32_t>();
    spec.codebook_vocab = j.at("codebook_vocab").get<int32_t>();
    spec.eta = j.at("eta").get<double>();
    spec.min_symbols = j.at("min_symbols").get<int32_t>();
    spec.max_symbols = j.at("max_symbols").get<int32_t>();
    spec.prompt_symbols = j.at("prompt_symbols").get<int32_t>();
    spec.table_seed = j.at("table_seed").get<uint64_t>();
    spec.base_table = j.at("base_table").get<std::vector<int32_t>>();
    spec.offsets = j.at("offsets").get<std::vector<int32_t>>();
    return spec;
}

void ToySpec::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw io_error("cannot write " + path);
    f << to_json() << "\n";
}

ToySpec ToySpec::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_json(text);
}

TokenGrid transduce(const ToySpec& spec, const std::vector<int32_t>& symbols, int32_t speaker) {
    if (speaker < 0 || speaker >= spec.speakers) throw input_error("transduce: speaker out of range");
    TokenGrid grid(static_cast<int64_t>(symbols.size()) * spec.frames_per_symbol, spec.codebooks);
    for (size_t k = 0; k < symbols.size(); ++k) {
        if (symbols[k] < 0 || symbols[k] >= spec.alphabet) throw input_error("transduce: symbol out of range");
        for (int32_t l = 0; l < spec.frames_per_symbol; ++l)
            for (int32_t c = 0; c < spec.codebooks; ++c)
                grid.at(static_cast<int64_t>(k) * spec.frames_per_symbol + l, c) =
                    (spec.base(c, symbols[k], l) + spec.offset(c, speaker)) % spec.code_modulus();
    }
    return grid;
}

std::vector<int32_t> symbols_of_text(const ToySpec& spec, const std::vector<int32_t>& text) {
    std::vector<int32_t> symbols;
    for (int32_t id : text)
        if (id < spec.alphabet) symbols.push_back(id);
    return symbols;
}

std::vector<ToySample> generate(const ToySpec& spec, Rng& rng, int64_t count, double corrupt_fraction) {
    if (count < 1) throw input_error("generate: count must be positive");
    if (corrupt_fraction < 0.0 || corrupt_fraction > 1.0) throw input_error("generate: bad corrupt fraction");

    std::vector<ToySample> samples;
    samples.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        ToySample sample;
        const int32_t n_sym =
            spec.min_symbols + static_cast<int32_t>(rng.uniform_int(
                                   static_cast<uint64_t>(spec.max_symbols - spec.min_symbols + 1)));
        std::vector<int32_t> symbols(static_cast<size_t>(n_sym));
        for (auto& y : symbols) y = static_cast<int32_t>(rng.uniform_int(static_cast<uint64_t>(spec.alphabet)));
        sample.speaker = static_cast<int32_t>(rng.uniform_int(static_cast<uint64_t>(spec.speakers)));

        sample.seq.text = symbols;
        sample.seq.grid = transduce(spec, symbols, sample.speaker);
        sample.seq.prompt_len = static_cast<int64_t>(spec.prompt_symbols) * spec.frames_per_symbol;
        sample.corrupt_frames.assign(static_cast<size_t>(sample.seq.prompt_len), 0);

        sample.denoise = rng.bernoulli(corrupt_fraction);
        if (sample.denoise) {
            // jitter prompt codes; the target segment stays clean
            for (int64_t t = 0; t < sample.seq.prompt_len; ++t) {
                for (int32_t c = 0; c < spec.codebooks; ++c) {
                    if (!rng.bernoulli(spec.eta)) continue;
                    const int32_t orig = sample.seq.grid.at(t, c);
                    int32_t jittered =
                        static_cast<int32_t>(rng.uniform_int(static_cast<uint64_t>(spec.code_modulus() - 1)));
                    if (jittered >= orig) ++jittered;  // guarantee a different code
                    sample.seq.grid.at(t, c) = jittered;
                    sample.corrupt_frames[static_cast<size_t>(t)] = 1;
                }
            }
            sample.seq.text.insert(sample.seq.text.begin(), spec.denoise_token());
        }
        samples.push_back(std::move(sample));
    }
    return samples;
}

std::vector<PosteriorEntry> oracle_posterior(const ToySpec& spec, const Sequence& seq,
                                             const std::vector<uint8_t>& corrupt_frames) {
    const std::vector<int32_t> symbols = symbols_of_text(spec, seq.text);
    if (seq.grid.frames != static_cast<int64_t>(symbols.size()) * spec.frames_per_symbol)
        throw input_error("oracle_posterior: grid length does not match the text");
    if (seq.grid.codebooks != spec.codebooks) throw input_error("oracle_posterior: codebook mismatch");

    auto frame_corrupt = [&](int64_t t) {
        return t < static_cast<int64_t>(corrupt_frames.size()) && corrupt_frames[static_cast<size_t>(t)] != 0;
    };

    // speakers consistent with all visible uncorrupted positions
    std::vector<int32_t> candidates;
    for (int32_t s = 0; s < spec.speakers; ++s) {
        bool ok = true;
        for (int64_t t = 0; t < seq.grid.frames && ok; ++t) {
            if (frame_corrupt(t)) continue;
            const int32_t y = symbols[static_cast<size_t>(t / spec.frames_per_symbol)];
            const int32_t l = static_cast<int32_t>(t % spec.frames_per_symbol);
            for (int32_t c = 0; c < spec.codebooks; ++c) {
                const int32_t code = seq.grid.at(t, c);
                if (code == spec.mask_id()) continue;  // masked, not evidence
                if (code != (spec.base(c, y, l) + spec.offset(c, s)) % spec.code_modulus()) {
                    ok = false;
                    break;
                }
            }
        }
        if (ok) candidates.push_back(s);
    }
    if (candidates.empty()) throw input_error("oracle_posterior: no speaker consistent with the visible grid");

    std::vector<PosteriorEntry> out;
    const double w = 1.0 / static_cast<double>(candidates.size());
    for (int64_t t = 0; t < seq.grid.frames; ++t) {
        const int32_t y = symbols[static_cast<size_t>(t / spec.frames_per_symbol)];
        const int32_t l = static_cast<int32_t>(t % spec.frames_per_symbol);
        for (int32_t c = 0; c < spec.codebooks; ++c) {
            if (seq.grid.at(t, c) != spec.mask_id()) continue;
            PosteriorEntry entry;
            entry.t = static_cast<int32_t>(t);
            entry.c = c;
            entry.probs.assign(static_cast<size_t>(spec.code_modulus()), 0.0);
            for (int32_t s : candidates)
                entry.probs[static_cast<size_t>((spec.base(c, y, l) + spec.offset(c, s)) %
                                                spec.code_modulus())] += w;
            out.push_back(std::move(entry));
        }
    }
    return out;
}

namespace {

// Inverts one symbol block under a fixed speaker; returns -1 if no symbol
// reproduces every frame and codebook exactly (masked codes never match).
int32_t invert_symbol(const ToySpec& spec, const TokenGrid& grid, int64_t block, int32_t speaker) {
    const int32_t mod = spec.code_modulus();
    for (int32_t y = 0; y < spec.alphabet; ++y) {
        bool ok = true;
        for (int32_t l = 0; l < spec.frames_per_symbol && ok; ++l) {
            const int64_t t = block * spec.frames_per_symbol + l;
            for (int32_t c = 0; c < spec.codebooks; ++c) {
                if (grid.at(t, c) != (spec.base(c, y, l) + spec.offset(c, speaker)) % mod) {
                    ok = false;
                    break;
                }
            }
        }
        if (ok) return y;  // injectivity per (codebook, slot) makes this unique
    }
    return -1;
}

int64_t levenshtein(const std::vector<int32_t>& a, const std::vector<int32_t>& b) {
    const size_t n = a.size(), m = b.size();
    std::vector<int64_t> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int64_t>(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int64_t>(i);
        for (size_t j = 1; j <= m; ++j) {
            const int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

}  // namespace

double toy_wer(const ToySpec& spec, const TokenGrid& decoded, const std::vector<int32_t>& reference_symbols) {
    if (decoded.frames % spec.frames_per_symbol != 0)
        throw input_error("toy_wer: grid length must be a multiple of frames_per_symbol");
    if (reference_symbols.empty()) throw input_error("toy_wer: empty reference");
    const int64_t blocks = decoded.frames / spec.frames_per_symbol;

    // best-fit offset: the speaker inverting the most symbol blocks
    int32_t best_speaker = 0;
    int64_t best_hits = -1;
    for (int32_t s = 0; s < spec.speakers; ++s) {
        int64_t hits = 0;
        for (int64_t b = 0; b < blocks; ++b)
            if (invert_symbol(spec, decoded, b, s) >= 0) ++hits;
        if (hits > best_hits) {
            best_hits = hits;
            best_speaker = s;
        }
    }

    std::vector<int32_t> recovered(static_cast<size_t>(blocks));
    for (int64_t b = 0; b < blocks; ++b) {
        const int32_t y = invert_symbol(spec, decoded, b, best_speaker);
        recovered[static_cast<size_t>(b)] = y >= 0 ? y : -1;  // sentinel = substitution
    }
    return static_cast<double>(levenshtein(recovered, reference_symbols)) /
           static_cast<double>(reference_symbols.size());
}

std::vector<int32_t> consistent_speakers(const ToySpec& spec, const TokenGrid& grid, int64_t frame_begin,
                                         int64_t frame_end) {
    std::vector<int32_t> out;
    for (int32_t s = 0; s < spec.speakers; ++s) {
        bool ok = true;
        for (int64_t t = frame_begin; t < frame_end && ok; ++t) {
            const int32_t l = static_cast<int32_t>(t % spec.frames_per_symbol);
            bool frame_ok = false;
            for (int32_t y = 0; y < spec.alphabet && !frame_ok; ++y) {
                frame_ok = true;
                for (int32_t c = 0; c < spec.codebooks; ++c) {
                    if (grid.at(t, c) != (spec.base(c, y, l) + spec.offset(c, s)) % spec.code_modulus()) {
                        frame_ok = false;
                        break;
                    }
                }
            }
            ok = frame_ok;
        }
        if (ok) out.push_back(s);
    }
    return out;
}

double toy_sim(const ToySpec& spec, const TokenGrid& decoded, const TokenGrid& prompt_grid) {
    if (decoded.frames < 1) throw input_error("toy_sim: empty decoded grid");
    const std::vector<int32_t> speakers = consistent_speakers(spec, prompt_grid, 0, prompt_grid.frames);
    if (speakers.size() != 1)
        throw input_error("toy_sim: prompt is consistent with " + std::to_string(speakers.size()) +
                          " speakers, need exactly one");
    const int32_t s = speakers[0];

    int64_t matches = 0;
    for (int64_t t = 0; t < decoded.frames; ++t) {
        const int32_t l = static_cast<int32_t>(t % spec.frames_per_symbol);
        for (int32_t y = 0; y < spec.alphabet; ++y) {
            bool ok = true;
            for (int32_t c = 0; c < spec.codebooks; ++c) {
                if (decoded.at(t, c) != (spec.base(c, y, l) + spec.offset(c, s)) % spec.code_modulus()) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                ++matches;
                break;
            }
        }
    }
    return static_cast<double>(matches) / static_cast<double>(decoded.frames);
}

void save_corpus(const std::string& path, const std::vector<ToySample>& samples) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot write " + path);
    for (const ToySample& s : samples) {
        json row;
        row["text"] = s.seq.text;
        json grid = json::array();
        for (int64_t t = 0; t < s.seq.grid.frames; ++t) {
            json frame = json::array();
            for (int32_t c = 0; c < s.seq.grid.codebooks; ++c) frame.push_back(s.seq.grid.at(t, c));
            grid.push_back(std::move(frame));
        }
        row["grid"] = std::move(grid);
        row["prompt_len"] = s.seq.prompt_len;
        row["speaker"] = s.speaker;
        row["corrupt_frames"] = s.corrupt_frames;
        row["denoise"] = s.denoise;
        f << row.dump() << "\n";
    }
    if (!f) throw io_error("short write to " + path);
}

std::vector<ToySample> load_corpus(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open " + path);
    std::vector<ToySample> samples;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json row = json::parse(line);
        ToySample s;
        s.seq.text = row.at("text").get<std::vector<int32_t>>();
        const auto& grid = row.at("grid");
        const int64_t frames = static_cast<int64_t>(grid.size());
        const int32_t codebooks = frames > 0 ? static_cast<int32_t>(grid[0].size()) : 0;
        s.seq.grid = TokenGrid(frames, codebooks);
        for (int64_t t = 0; t < frames; ++t)
            for (int32_t c = 0; c < codebooks; ++c)
                s.seq.grid.at(t, c) = grid[static_cast<size_t>(t)][static_cast<size_t>(c)].get<int32_t>();
        s.seq.prompt_len = row.at("prompt_len").get<int64_t>();
        s.speaker = row.at("speaker").get<int32_t>();
        s.corrupt_frames = row.at("corrupt_frames").get<std::vector<uint8_t>>();
        s.denoise = row.at("denoise").get<bool>();
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace maskgrid
