#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "maskgrid/toylang.hpp"

using namespace maskgrid;

namespace {

ToySpec default_spec() { return ToySpec::make(42); }

}  // namespace

TEST_SUITE("toylang") {

TEST_CASE("table invariants: injectivity, distinct offsets, codes below the mask id") {
    ToySpec spec = default_spec();
    for (int32_t c = 0; c < spec.codebooks; ++c) {
        for (int32_t l = 0; l < spec.frames_per_symbol; ++l) {
            std::set<int32_t> seen;
            for (int32_t y = 0; y < spec.alphabet; ++y) {
                const int32_t v = spec.base(c, y, l);
                CHECK(v >= 0);
                CHECK(v < spec.code_modulus());
                CHECK(seen.insert(v).second);  // injective per (codebook, slot)
            }
        }
        std::set<int32_t> offs;
        for (int32_t s = 0; s < spec.speakers; ++s) CHECK(offs.insert(spec.offset(c, s)).second);
    }
}

TEST_CASE("spec json round trip reproduces the tables") {
    ToySpec spec = default_spec();
    ToySpec parsed = ToySpec::from_json(spec.to_json());
    CHECK(parsed == spec);
}

TEST_CASE("clean generation satisfies the transducer identity exactly") {
    ToySpec spec = default_spec();
    Rng rng(1);
    auto samples = generate(spec, rng, 50, 0.0);
    for (const auto& s : samples) {
        CHECK(!s.denoise);
        const auto symbols = symbols_of_text(spec, s.seq.text);
        CHECK(s.seq.grid == transduce(spec, symbols, s.speaker));
        for (uint8_t f : s.corrupt_frames) CHECK(f == 0);
        // generate-then-invert identity
        CHECK(toy_wer(spec, s.seq.grid, symbols) == 0.0);
    }
}

TEST_CASE("corrupt fraction 1 tags every sample with the denoise token") {
    ToySpec spec = default_spec();
    Rng rng(2);
    auto samples = generate(spec, rng, 40, 1.0);
    for (const auto& s : samples) {
        CHECK(s.denoise);
        REQUIRE(!s.seq.text.empty());
        CHECK(s.seq.text[0] == spec.denoise_token());
        // target frames stay clean
        const auto symbols = symbols_of_text(spec, s.seq.text);
        TokenGrid clean = transduce(spec, symbols, s.speaker);
        for (int64_t t = s.seq.prompt_len; t < s.seq.grid.frames; ++t)
            for (int32_t c = 0; c < spec.codebooks; ++c) CHECK(s.seq.grid.at(t, c) == clean.at(t, c));
        // flags mark exactly the jittered frames
        for (int64_t t = 0; t < s.seq.prompt_len; ++t) {
            bool differs = false;
            for (int32_t c = 0; c < spec.codebooks; ++c)
                if (s.seq.grid.at(t, c) != clean.at(t, c)) differs = true;
            CHECK(differs == (s.corrupt_frames[static_cast<size_t>(t)] != 0));
        }
    }
}

TEST_CASE("speaker frequencies are uniform within 3 sigma at 10^4 samples") {
    ToySpec spec = default_spec();
    Rng rng(3);
    auto samples = generate(spec, rng, 10000, 0.0);
    std::vector<int> counts(static_cast<size_t>(spec.speakers), 0);
    for (const auto& s : samples) counts[static_cast<size_t>(s.speaker)]++;
    const double p = 1.0 / spec.speakers;
    const double sigma = std::sqrt(10000.0 * p * (1 - p));
    for (int c : counts) CHECK(std::abs(c - 10000.0 * p) < 3 * sigma);
}

TEST_CASE("oracle posterior: one visible frame makes every masked posterior a delta") {
    ToySpec spec = default_spec();
    Rng rng(4);
    auto samples = generate(spec, rng, 1, 0.0);
    Sequence seq = samples[0].seq;
    // mask everything except frame 0
    for (int64_t t = 1; t < seq.grid.frames; ++t)
        for (int32_t c = 0; c < spec.codebooks; ++c) seq.grid.at(t, c) = spec.mask_id();

    auto posterior = oracle_posterior(spec, seq);
    CHECK(posterior.size() == static_cast<size_t>((seq.grid.frames - 1) * spec.codebooks));
    const auto symbols = symbols_of_text(spec, seq.text);
    for (const auto& entry : posterior) {
        double total = 0, peak = 0;
        for (double p : entry.probs) {
            total += p;
            peak = std::max(peak, p);
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
        CHECK(peak == 1.0);  // delta
        // and the delta sits on the true code
        const int32_t y = symbols[static_cast<size_t>(entry.t / spec.frames_per_symbol)];
        const int32_t l = entry.t % spec.frames_per_symbol;
        const int32_t truth = (spec.base(entry.c, y, l) + spec.offset(entry.c, samples[0].speaker)) %
                              spec.code_modulus();
        CHECK(entry.probs[static_cast<size_t>(truth)] == 1.0);
    }
}

TEST_CASE("oracle posterior: fully masked grid mixes all speakers uniformly") {
    ToySpec spec = default_spec();
    Sequence seq;
    seq.text = {0, 1, 2};
    seq.grid = TokenGrid(3 * spec.frames_per_symbol, spec.codebooks);
    for (auto& code : seq.grid.codes) code = spec.mask_id();
    seq.prompt_len = 0;

    auto posterior = oracle_posterior(spec, seq);
    for (const auto& entry : posterior) {
        double total = 0;
        int nonzero = 0;
        for (double p : entry.probs) {
            total += p;
            if (p > 0) {
                ++nonzero;
                // each speaker contributes 1/S; offsets are distinct per
                // codebook so no two speakers share a code here
                CHECK(p == doctest::Approx(1.0 / spec.speakers));
            }
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
        CHECK(nonzero == spec.speakers);
    }
}

TEST_CASE("oracle posterior: two-speaker crafted visible set gives a 0.5/0.5 mixture") {
    // visible prompt flagged as corrupted carries no evidence, leaving both
    // speakers of a two-speaker spec consistent
    ToySpec proto;
    proto.speakers = 2;
    ToySpec spec = ToySpec::make(proto, 7);

    std::vector<int32_t> symbols{3, 1, 4};
    Sequence seq;
    seq.text = symbols;
    seq.grid = transduce(spec, symbols, 0);
    seq.prompt_len = spec.frames_per_symbol;
    std::vector<uint8_t> corrupt(static_cast<size_t>(seq.prompt_len), 1);
    for (int64_t t = seq.prompt_len; t < seq.grid.frames; ++t)
        for (int32_t c = 0; c < spec.codebooks; ++c) seq.grid.at(t, c) = spec.mask_id();

    auto posterior = oracle_posterior(spec, seq, corrupt);
    REQUIRE(!posterior.empty());
    const auto ref_symbols = symbols_of_text(spec, seq.text);
    for (const auto& entry : posterior) {
        const int32_t y = ref_symbols[static_cast<size_t>(entry.t / spec.frames_per_symbol)];
        const int32_t l = entry.t % spec.frames_per_symbol;
        const int32_t code0 = (spec.base(entry.c, y, l) + spec.offset(entry.c, 0)) % spec.code_modulus();
        const int32_t code1 = (spec.base(entry.c, y, l) + spec.offset(entry.c, 1)) % spec.code_modulus();
        CHECK(entry.probs[static_cast<size_t>(code0)] == doctest::Approx(0.5));
        CHECK(entry.probs[static_cast<size_t>(code1)] == doctest::Approx(0.5));
    }
}

TEST_CASE("oracle posterior rejects an inconsistent grid") {
    ToySpec spec = default_spec();
    std::vector<int32_t> symbols{0, 1};
    Sequence seq;
    seq.text = symbols;
    seq.grid = transduce(spec, symbols, 0);
    // splice half the frames from another speaker: no single speaker fits
    TokenGrid other = transduce(spec, symbols, 1);
    for (int32_t c = 0; c < spec.codebooks; ++c) seq.grid.at(0, c) = other.at(0, c);
    CHECK_THROWS_AS(oracle_posterior(spec, seq), input_error);
}

TEST_CASE("toy_wer: clean output scores zero, corruption scores one substitution") {
    ToySpec spec = default_spec();
    std::vector<int32_t> symbols(10);
    Rng rng(5);
    for (auto& y : symbols) y = static_cast<int32_t>(rng.uniform_int(spec.alphabet));
    TokenGrid grid = transduce(spec, symbols, 3);
    CHECK(toy_wer(spec, grid, symbols) == 0.0);

    // one corrupted frame in 10 symbols -> 0.1
    TokenGrid corrupted = grid;
    corrupted.at(5, 2) = (corrupted.at(5, 2) + 1) % spec.code_modulus();
    CHECK(toy_wer(spec, corrupted, symbols) == doctest::Approx(0.1));

    // all-mask grid -> every symbol uninvertible -> 1.0
    TokenGrid masked = grid;
    for (auto& code : masked.codes) code = spec.mask_id();
    CHECK(toy_wer(spec, masked, symbols) == doctest::Approx(1.0));
}

TEST_CASE("toy_wer rejects bad shapes") {
    ToySpec spec = default_spec();
    TokenGrid odd(spec.frames_per_symbol + 1, spec.codebooks);
    CHECK_THROWS_AS(toy_wer(spec, odd, {0}), input_error);
}

TEST_CASE("toy_sim: correct speaker 1.0, wrong speaker 0.0, half swapped 0.5") {
    ToySpec spec = default_spec();
    std::vector<int32_t> symbols{0, 1, 2, 3, 4, 5};
    TokenGrid prompt = transduce(spec, {7, 8}, 2);

    TokenGrid same = transduce(spec, symbols, 2);
    CHECK(toy_sim(spec, same, prompt) == doctest::Approx(1.0));

    TokenGrid other = transduce(spec, symbols, 5);
    CHECK(toy_sim(spec, other, prompt) == doctest::Approx(0.0));

    TokenGrid half = same;
    for (int64_t t = 0; t < half.frames / 2; ++t)
        for (int32_t c = 0; c < spec.codebooks; ++c) half.at(t, c) = other.at(t, c);
    CHECK(toy_sim(spec, half, prompt) == doctest::Approx(0.5));
}

TEST_CASE("toy_sim rejects an ambiguous prompt") {
    ToySpec spec = default_spec();
    TokenGrid masked(spec.frames_per_symbol, spec.codebooks);
    for (auto& code : masked.codes) code = spec.mask_id();
    CHECK_THROWS_AS(toy_sim(spec, transduce(spec, {0}, 0), masked), input_error);
}

TEST_CASE("any single clean frame identifies its speaker uniquely") {
    ToySpec spec = default_spec();
    Rng rng(6);
    for (int rep = 0; rep < 50; ++rep) {
        const int32_t y = static_cast<int32_t>(rng.uniform_int(spec.alphabet));
        const int32_t s = static_cast<int32_t>(rng.uniform_int(spec.speakers));
        TokenGrid grid = transduce(spec, {y}, s);
        for (int32_t l = 0; l < spec.frames_per_symbol; ++l) {
            auto speakers = consistent_speakers(spec, grid, l, l + 1);
            REQUIRE(speakers.size() == 1);
            CHECK(speakers[0] == s);
        }
    }
}

TEST_CASE("corpus jsonl round trip") {
    ToySpec spec = default_spec();
    Rng rng(8);
    auto samples = generate(spec, rng, 25, 0.4);
    const std::string path = (std::filesystem::temp_directory_path() / "maskgrid_corpus_test.jsonl").string();
    save_corpus(path, samples);
    auto loaded = load_corpus(path);
    REQUIRE(loaded.size() == samples.size());
    for (size_t i = 0; i < samples.size(); ++i) CHECK(loaded[i] == samples[i]);
}

}  // TEST_SUITE
