#include "maskgrid/sampler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace maskgrid {

using nk::Tensor;
using nlohmann::json;

UnmaskSchedule build_schedule(int32_t steps, double tau, int64_t total_masked) {
    if (steps < 1) throw input_error("schedule: need at least one step");
    if (tau <= 0.0) throw input_error("schedule: tau must be positive");
    if (total_masked < 1) throw input_error("schedule: nothing to unmask");

    UnmaskSchedule s;
    s.steps = steps;
    s.tau = tau;
    s.total = total_masked;
    s.r.resize(static_cast<size_t>(steps));
    s.counts.resize(static_cast<size_t>(steps));
    for (int32_t n = 1; n <= steps; ++n) {
        const double frac = static_cast<double>(n) / steps;
        // algebraically 1 at n == N for any tau; pin it so coverage is exact
        s.r[static_cast<size_t>(n - 1)] = n == steps ? 1.0 : tau * frac / (1.0 + (tau - 1.0) * frac);
    }
    int64_t revealed = 0;
    for (int32_t n = 0; n < steps; ++n) {
        const int64_t cum = std::llround(s.r[static_cast<size_t>(n)] * static_cast<double>(total_masked));
        s.counts[static_cast<size_t>(n)] = cum - revealed;
        revealed = cum;
    }
    return s;
}

void SamplerConfig::validate() const {
    if (steps < 1) throw input_error("sampler config: steps must be positive");
    if (tau <= 0.0) throw input_error("sampler config: tau must be positive");
    if (temperature <= 0.0) throw input_error("sampler config: temperature must be positive");
    if (guidance_scale < 0.0) throw input_error("sampler config: guidance scale must be non-negative");
    if (layer_penalty < 0.0) throw input_error("sampler config: layer penalty must be non-negative");
}

std::string SamplerConfig::to_json() const {
    json j{{"steps", steps},
           {"tau", tau},
           {"temperature", temperature},
           {"guidance_scale", guidance_scale},
           {"layer_penalty", layer_penalty},
           {"seed", seed}};
    return j.dump(2);
}

SamplerConfig SamplerConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    SamplerConfig cfg;
    cfg.steps = j.at("steps").get<int32_t>();
    cfg.tau = j.at("tau").get<double>();
    cfg.temperature = j.at("temperature").get<double>();
    cfg.guidance_scale = j.at("guidance_scale").get<double>();
    cfg.layer_penalty = j.at("layer_penalty").get<double>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.validate();
    return cfg;
}

CharClass classify_codepoint(uint32_t cp) {
    // CJK ideographs, kana, hangul
    if ((cp >= 0x4E00 && cp <= 0x9FFF) || (cp >= 0x3400 && cp <= 0x4DBF) ||
        (cp >= 0xF900 && cp <= 0xFAFF) || (cp >= 0x20000 && cp <= 0x2FA1F) ||
        (cp >= 0x3040 && cp <= 0x30FF) || (cp >= 0xAC00 && cp <= 0xD7AF) || (cp >= 0x1100 && cp <= 0x11FF))
        return CharClass::cjk;
    if (cp >= '0' && cp <= '9') return CharClass::digit;
    if ((cp >= 'A' && cp <= 'Z') || (cp >= 'a' && cp <= 'z') ||
        (cp >= 0xC0 && cp <= 0x17F && cp != 0xD7 && cp != 0xF7))
        return CharClass::latin;
    return CharClass::space_punct;
}

namespace {

// minimal UTF-8 walk; malformed bytes count as single codepoints
std::vector<uint32_t> decode_utf8(const std::string& s) {
    std::vector<uint32_t> cps;
    size_t i = 0;
    while (i < s.size()) {
        const unsigned char b = static_cast<unsigned char>(s[i]);
        uint32_t cp = b;
        size_t extra = 0;
        if ((b & 0xE0) == 0xC0) {
            cp = b & 0x1F;
            extra = 1;
        } else if ((b & 0xF0) == 0xE0) {
            cp = b & 0x0F;
            extra = 2;
        } else if ((b & 0xF8) == 0xF0) {
            cp = b & 0x07;
            extra = 3;
        }
        if (i + extra >= s.size()) extra = 0;
        bool valid = extra > 0 || (b & 0x80) == 0;
        for (size_t k = 1; k <= extra; ++k) {
            const unsigned char cont = static_cast<unsigned char>(s[i + k]);
            if ((cont & 0xC0) != 0x80) {
                valid = false;
                break;
            }
            cp = (cp << 6) | (cont & 0x3F);
        }
        if (!valid) {
            cp = b;
            extra = 0;
        }
        cps.push_back(cp);
        i += extra + 1;
    }
    return cps;
}

double weight_of(CharClass cls, const DurationWeights& w) {
    switch (cls) {
        case CharClass::cjk: return w.cjk;
        case CharClass::latin: return w.latin;
        case CharClass::digit: return w.digit;
        case CharClass::space_punct: return w.space_punct;
    }
    return w.space_punct;
}

int64_t frames_of_duration(double duration, double frame_rate) {
    // round half up, at least one frame
    return std::max<int64_t>(1, static_cast<int64_t>(std::floor(duration * frame_rate + 0.5)));
}

uint64_t sequence_stream_seed(uint64_t seed, size_t index) {
    return splitmix64(splitmix64(seed) + static_cast<uint64_t>(index));
}

}  // namespace

double text_weight(const std::string& utf8, const DurationWeights& weights) {
    double total = 0.0;
    for (uint32_t cp : decode_utf8(utf8)) total += weight_of(classify_codepoint(cp), weights);
    return total;
}

DurationEstimate estimate_duration(const std::string& prompt_text, const std::string& target_text,
                                   double prompt_duration, const DurationWeights& weights, double frame_rate) {
    if (prompt_text.empty()) throw input_error("estimate_duration: empty prompt text");
    if (prompt_duration <= 0.0) throw input_error("estimate_duration: prompt duration must be positive");
    if (frame_rate <= 0.0) throw input_error("estimate_duration: frame rate must be positive");
    const double w_prompt = text_weight(prompt_text, weights);
    if (w_prompt <= 0.0) throw input_error("estimate_duration: prompt weight sum is zero");
    const double w_target = text_weight(target_text, weights);

    DurationEstimate out;
    // ratio first: equal weights give exactly 1
    out.duration = prompt_duration * (w_target / w_prompt);
    out.frames = frames_of_duration(out.duration, frame_rate);
    return out;
}

DurationEstimate estimate_duration_tokens(int64_t prompt_tokens, int64_t target_tokens,
                                          double prompt_duration, double frame_rate) {
    if (prompt_tokens < 1) throw input_error("estimate_duration: empty prompt");
    if (prompt_duration <= 0.0) throw input_error("estimate_duration: prompt duration must be positive");
    DurationEstimate out;
    out.duration = prompt_duration * (static_cast<double>(target_tokens) / static_cast<double>(prompt_tokens));
    out.frames = frames_of_duration(out.duration, frame_rate);
    return out;
}

void cfg_combine(std::span<const double> conditional, std::span<const double> unconditional, double scale,
                 std::span<double> out) {
    if (conditional.size() != unconditional.size() || conditional.size() != out.size())
        throw dim_error("cfg_combine: size mismatch");
    if (scale == 1.0) {
        std::copy(conditional.begin(), conditional.end(), out.begin());
        return;
    }
    for (size_t i = 0; i < out.size(); ++i) out[i] = unconditional[i] + scale * (conditional[i] - unconditional[i]);
}

namespace {

struct DecodeJob {
    const std::vector<int32_t>* text = nullptr;
    const TokenGrid* prompt = nullptr;
    int64_t target_frames = 0;
    uint64_t rng_seed = 0;
    const UnmaskSchedule* schedule_override = nullptr;
    DecodeTrace* trace = nullptr;
};

struct Candidate {
    double score;
    int64_t pos;  // canonical target-local index t*C + c
    int32_t token;
};

struct SeqState {
    Sequence cond;    // [text][prompt + working target]
    Sequence uncond;  // [null-text token][same grid]
    UnmaskSchedule schedule;
    std::vector<uint8_t> masked;  // target-local flags
    int64_t target_frames = 0;
    int64_t prompt_len = 0;
    Rng rng;
};

// row log-softmax of a [*, vocab] logits tensor, in double
template <typename T>
void row_log_softmax(const Tensor<T>& logits, int64_t row, int32_t vocab, std::span<double> out) {
    const T* p = logits.ptr() + row * vocab;
    double mx = -std::numeric_limits<double>::infinity();
    for (int32_t k = 0; k < vocab; ++k) mx = std::max(mx, static_cast<double>(p[k]));
    double denom = 0;
    for (int32_t k = 0; k < vocab; ++k) denom += std::exp(static_cast<double>(p[k]) - mx);
    const double logz = mx + std::log(denom);
    for (int32_t k = 0; k < vocab; ++k) out[static_cast<size_t>(k)] = static_cast<double>(p[k]) - logz;
}

template <typename T>
std::vector<TokenGrid> decode_impl(const ModelConfig& cfg, const Params<T>& params,
                                   std::span<DecodeJob> jobs, const SamplerConfig& sampler_cfg) {
    sampler_cfg.validate();
    if (cfg.attention_mode != AttentionMode::bidirectional)
        throw input_error("decode: model must be bidirectional");
    if (jobs.empty()) throw input_error("decode: no sequences");

    const int32_t codebooks = cfg.codebooks;
    const int32_t vocab = cfg.codebook_vocab;
    const bool use_cfg = sampler_cfg.guidance_scale != 1.0;

    std::vector<SeqState> states(jobs.size());
    for (size_t i = 0; i < jobs.size(); ++i) {
        const DecodeJob& job = jobs[i];
        SeqState& st = states[i];
        if (job.target_frames < 1) throw input_error("decode: target length must be at least one frame");
        st.target_frames = job.target_frames;
        st.prompt_len = job.prompt->frames;
        st.schedule = job.schedule_override
                          ? *job.schedule_override
                          : build_schedule(sampler_cfg.steps, sampler_cfg.tau, job.target_frames * codebooks);
        if (st.schedule.total != job.target_frames * codebooks)
            throw input_error("decode: schedule total does not match the target grid");
        st.masked.assign(static_cast<size_t>(job.target_frames * codebooks), 1);
        if (job.trace) job.trace->reveal_step.assign(st.masked.size(), -1);
        st.rng = Rng(job.rng_seed);

        st.cond.text = *job.text;
        st.cond.grid = TokenGrid(st.prompt_len + job.target_frames, codebooks);
        for (int64_t t = 0; t < st.prompt_len; ++t)
            for (int32_t c = 0; c < codebooks; ++c) st.cond.grid.at(t, c) = job.prompt->at(t, c);
        for (int64_t t = st.prompt_len; t < st.cond.grid.frames; ++t)
            for (int32_t c = 0; c < codebooks; ++c) st.cond.grid.at(t, c) = cfg.mask_id();
        st.cond.prompt_len = st.prompt_len;
        if (use_cfg) {
            st.uncond.text = {static_cast<int32_t>(cfg.null_text_id())};
            st.uncond.grid = st.cond.grid;
            st.uncond.prompt_len = st.prompt_len;
        }
    }

    int32_t max_steps = 0;
    for (const SeqState& st : states) max_steps = std::max(max_steps, st.schedule.steps);
    std::vector<double> cond_ls(static_cast<size_t>(vocab));
    std::vector<double> uncond_ls(static_cast<size_t>(vocab));
    std::vector<double> combined(static_cast<size_t>(vocab));
    std::vector<Candidate> candidates;

    for (int32_t step = 0; step < max_steps; ++step) {
        // one packed forward over every branch of every sequence
        std::vector<Sequence> branches;
        branches.reserve(states.size() * (use_cfg ? 2 : 1));
        for (SeqState& st : states) {
            branches.push_back(st.cond);
            if (use_cfg) branches.push_back(st.uncond);
        }
        auto logits = forward_packed(cfg, params, branches, static_cast<nk::Tape<T>*>(nullptr));

        for (size_t i = 0; i < states.size(); ++i) {
            SeqState& st = states[i];
            const LogitsGrid<T>& cond_logits = logits[i * (use_cfg ? 2 : 1)];
            const LogitsGrid<T>* uncond_logits = use_cfg ? &logits[i * (use_cfg ? 2 : 1) + 1] : nullptr;

            // score still-masked positions in canonical (t, c) order
            candidates.clear();
            for (int64_t t = 0; t < st.target_frames; ++t) {
                for (int32_t c = 0; c < codebooks; ++c) {
                    const int64_t pos = t * codebooks + c;
                    if (!st.masked[static_cast<size_t>(pos)]) continue;
                    const int64_t row = st.prompt_len + t;

                    row_log_softmax(cond_logits.per_codebook[static_cast<size_t>(c)], row, vocab, cond_ls);
                    if (use_cfg) {
                        row_log_softmax(uncond_logits->per_codebook[static_cast<size_t>(c)], row, vocab,
                                        uncond_ls);
                        cfg_combine(cond_ls, uncond_ls, sampler_cfg.guidance_scale, combined);
                    } else {
                        std::copy(cond_ls.begin(), cond_ls.end(), combined.begin());
                    }

                    // token by argmax of the combined scores; the reserved
                    // mask id is an input-only symbol, never emitted
                    int32_t best = 0;
                    for (int32_t k = 1; k < vocab - 1; ++k)
                        if (combined[static_cast<size_t>(k)] > combined[static_cast<size_t>(best)]) best = k;
                    if (!std::isfinite(combined[static_cast<size_t>(best)]))
                        throw numeric_error("decode: non-finite combined log-score");
                    const double confidence = combined[static_cast<size_t>(best)] -
                                              sampler_cfg.layer_penalty * static_cast<double>(c);
                    const double score = confidence / sampler_cfg.temperature + st.rng.gumbel();
                    candidates.push_back({score, pos, best});
                }
            }

            if (step >= st.schedule.steps) continue;
            const int64_t count = st.schedule.counts[static_cast<size_t>(step)];
            if (count <= 0) continue;
            const size_t take = std::min<size_t>(static_cast<size_t>(count), candidates.size());
            std::partial_sort(candidates.begin(), candidates.begin() + static_cast<int64_t>(take),
                              candidates.end(), [](const Candidate& a, const Candidate& b) {
                                  if (a.score != b.score) return a.score > b.score;
                                  return a.pos < b.pos;
                              });
            for (size_t k = 0; k < take; ++k) {
                const Candidate& chosen = candidates[k];
                const int64_t t = chosen.pos / codebooks;
                const int32_t c = static_cast<int32_t>(chosen.pos % codebooks);
                st.masked[static_cast<size_t>(chosen.pos)] = 0;
                if (jobs[i].trace) jobs[i].trace->reveal_step[static_cast<size_t>(chosen.pos)] = step;
                st.cond.grid.at(st.prompt_len + t, c) = chosen.token;
                if (use_cfg) st.uncond.grid.at(st.prompt_len + t, c) = chosen.token;
            }
        }
    }

    std::vector<TokenGrid> out;
    out.reserve(states.size());
    for (SeqState& st : states) {
        for (uint8_t m : st.masked)
            if (m) throw numeric_error("decode: schedule left masked positions behind");
        out.push_back(std::move(st.cond.grid));
    }
    return out;
}

}  // namespace

template <typename T>
TokenGrid decode(const ModelConfig& cfg, const Params<T>& params, const std::vector<int32_t>& text,
                 const TokenGrid& prompt_grid, int64_t target_frames, const SamplerConfig& sampler_cfg,
                 const UnmaskSchedule* schedule_override, DecodeTrace* trace) {
    DecodeJob job;
    job.text = &text;
    job.prompt = &prompt_grid;
    job.target_frames = target_frames;
    job.rng_seed = sequence_stream_seed(sampler_cfg.seed, 0);
    job.schedule_override = schedule_override;
    job.trace = trace;
    return std::move(decode_impl(cfg, params, std::span<DecodeJob>(&job, 1), sampler_cfg)[0]);
}

template <typename T>
std::vector<TokenGrid> decode_batch(const ModelConfig& cfg, const Params<T>& params,
                                    std::span<const std::vector<int32_t>> texts,
                                    std::span<const TokenGrid> prompt_grids,
                                    std::span<const int64_t> target_frames, const SamplerConfig& sampler_cfg) {
    if (texts.size() != prompt_grids.size() || texts.size() != target_frames.size())
        throw input_error("decode: inconsistent batch inputs");
    std::vector<DecodeJob> jobs(texts.size());
    for (size_t i = 0; i < texts.size(); ++i) {
        jobs[i].text = &texts[i];
        jobs[i].prompt = &prompt_grids[i];
        jobs[i].target_frames = target_frames[i];
        jobs[i].rng_seed = sequence_stream_seed(sampler_cfg.seed, i);
    }
    return decode_impl(cfg, params, jobs, sampler_cfg);
}

template <typename T>
std::vector<BenchRow> bench_decode(const ModelConfig& cfg, const Params<T>& params,
                                   const std::vector<int32_t>& text, const TokenGrid& prompt_grid,
                                   int64_t target_frames, std::span<const int32_t> batch_sizes,
                                   std::span<const int32_t> step_counts, SamplerConfig sampler_cfg,
                                   int32_t runs) {
    if (target_frames < 1) throw input_error("bench: target length must be at least one frame");
    if (runs < 1) throw input_error("bench: need at least one run");
    using clock = std::chrono::steady_clock;

    std::vector<BenchRow> rows;
    for (int32_t batch : batch_sizes) {
        if (batch < 1) throw input_error("bench: batch size must be positive");
        std::vector<std::vector<int32_t>> texts(static_cast<size_t>(batch), text);
        std::vector<TokenGrid> prompts(static_cast<size_t>(batch), prompt_grid);
        std::vector<int64_t> frames(static_cast<size_t>(batch), target_frames);
        for (int32_t steps : step_counts) {
            SamplerConfig run_cfg = sampler_cfg;
            run_cfg.steps = steps;
            (void)decode_batch(cfg, params, texts, prompts, frames, run_cfg);  // warmup
            std::vector<double> samples;
            for (int32_t r = 0; r < runs; ++r) {
                const auto t0 = clock::now();
                (void)decode_batch(cfg, params, texts, prompts, frames, run_cfg);
                const auto t1 = clock::now();
                samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            }
            std::sort(samples.begin(), samples.end());
            const double median = samples[samples.size() / 2];
            rows.push_back({batch, steps, median / (static_cast<double>(batch) * target_frames)});
        }
    }
    return rows;
}

std::string bench_csv(std::span<const BenchRow> rows) {
    std::ostringstream os;
    os << "batch,steps,wall_ms_per_frame\n";
    for (const BenchRow& r : rows) os << r.batch << "," << r.steps << "," << r.wall_ms_per_frame << "\n";
    return os.str();
}

#define MASKGRID_INSTANTIATE_SAMPLER(T)                                                                     \
    template TokenGrid decode<T>(const ModelConfig&, const Params<T>&, const std::vector<int32_t>&,         \
                                 const TokenGrid&, int64_t, const SamplerConfig&, const UnmaskSchedule*,    \
                                 DecodeTrace*);                                                             \
    template std::vector<TokenGrid> decode_batch<T>(const ModelConfig&, const Params<T>&,                   \
                                                    std::span<const std::vector<int32_t>>,                  \
                                                    std::span<const TokenGrid>, std::span<const int64_t>,   \
                                                    const SamplerConfig&);                                  \
    template std::vector<BenchRow> bench_decode<T>(const ModelConfig&, const Params<T>&,                    \
                                                   const std::vector<int32_t>&, const TokenGrid&, int64_t,  \
                                                   std::span<const int32_t>, std::span<const int32_t>,      \
                                                   SamplerConfig, int32_t);

MASKGRID_INSTANTIATE_SAMPLER(float)
MASKGRID_INSTANTIATE_SAMPLER(double)

#undef MASKGRID_INSTANTIATE_SAMPLER

}  // namespace maskgrid
