#include "maskgrid/eval.hpp"

#include <algorithm>
#include <cmath>

#include "maskgrid/masking.hpp"

namespace maskgrid {

namespace {

// fixed plans per sample index, shared by every model under evaluation
MaskPlan eval_plan(const Sequence& seq, uint64_t eval_seed, size_t index) {
    Rng rng(splitmix64(eval_seed ^ splitmix64(static_cast<uint64_t>(index) * 2654435761ULL)));
    return plan_full_random(seq.grid.frames, seq.grid.codebooks, seq.prompt_len, rng);
}

std::vector<int32_t> text_with_mode(const ToySpec& spec, const ToySample& sample, DenoiseTokenMode mode) {
    std::vector<int32_t> text = symbols_of_text(spec, sample.seq.text);
    const bool want_token = mode == DenoiseTokenMode::force || (mode == DenoiseTokenMode::as_is && sample.denoise);
    if (want_token) text.insert(text.begin(), spec.denoise_token());
    return text;
}

}  // namespace

template <typename T>
double heldout_masked_nll(const ModelConfig& cfg, const Params<T>& params,
                          std::span<const ToySample> samples, uint64_t eval_seed) {
    if (samples.empty()) throw input_error("heldout_masked_nll: no samples");
    double total = 0.0;
    int64_t count = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        const Sequence& seq = samples[i].seq;
        MaskPlan plan = eval_plan(seq, eval_seed, i);
        MaskedLoss<T> loss = apply_and_loss(cfg, params, seq, plan);
        total += static_cast<double>(loss.sum.item());
        count += loss.count;
    }
    return total / static_cast<double>(count);
}

template <typename T>
double probe_mean_kl(const ModelConfig& cfg, const Params<T>& params, const ToySpec& spec,
                     std::span<const ToySample> samples, uint64_t eval_seed, int64_t max_positions) {
    if (samples.empty()) throw input_error("probe_mean_kl: no samples");
    double total_kl = 0.0;
    int64_t positions = 0;

    for (size_t i = 0; i < samples.size() && positions < max_positions; ++i) {
        const ToySample& sample = samples[i];
        MaskPlan plan = eval_plan(sample.seq, eval_seed, i);
        const Sequence masked = apply_mask(sample.seq, plan, cfg);

        auto posterior = oracle_posterior(spec, masked, sample.corrupt_frames);
        auto logits = forward(cfg, params, masked);

        for (const PosteriorEntry& entry : posterior) {
            if (positions >= max_positions) break;
            // model softmax over the full vocabulary; probability mass the
            // model leaves on the mask id only increases the divergence
            const auto& l = logits.per_codebook[static_cast<size_t>(entry.c)];
            const int32_t vocab = cfg.codebook_vocab;
            double mx = -1e300;
            for (int32_t k = 0; k < vocab; ++k)
                mx = std::max(mx, static_cast<double>(l.ptr()[entry.t * vocab + k]));
            double denom = 0;
            for (int32_t k = 0; k < vocab; ++k)
                denom += std::exp(static_cast<double>(l.ptr()[entry.t * vocab + k]) - mx);
            const double logz = mx + std::log(denom);

            double kl = 0.0;
            for (size_t code = 0; code < entry.probs.size(); ++code) {
                const double p = entry.probs[code];
                if (p <= 0.0) continue;
                const double logq = static_cast<double>(l.ptr()[entry.t * vocab + static_cast<int64_t>(code)]) - logz;
                kl += p * (std::log(p) - logq);
            }
            total_kl += kl;
            ++positions;
        }
    }
    if (positions == 0) throw input_error("probe_mean_kl: no masked probe positions");
    return total_kl / static_cast<double>(positions);
}

template <typename T>
DecodeEval decode_metrics(const ModelConfig& cfg, const Params<T>& params, const ToySpec& spec,
                          std::span<const ToySample> samples, const SamplerConfig& sampler_cfg,
                          DenoiseTokenMode token_mode) {
    if (samples.empty()) throw input_error("decode_metrics: no samples");

    std::vector<std::vector<int32_t>> texts;
    std::vector<TokenGrid> prompts;
    std::vector<int64_t> frames;
    std::vector<std::vector<int32_t>> target_symbols;
    std::vector<TokenGrid> clean_prompts;

    for (const ToySample& sample : samples) {
        const std::vector<int32_t> symbols = symbols_of_text(spec, sample.seq.text);
        const int64_t prompt_syms = sample.seq.prompt_len / spec.frames_per_symbol;

        texts.push_back(text_with_mode(spec, sample, token_mode));
        TokenGrid prompt(sample.seq.prompt_len, spec.codebooks);
        for (int64_t t = 0; t < sample.seq.prompt_len; ++t)
            for (int32_t c = 0; c < spec.codebooks; ++c) prompt.at(t, c) = sample.seq.grid.at(t, c);
        prompts.push_back(std::move(prompt));

        // duration from weight-1 tokens: exact for the toy transducer
        const auto est = estimate_duration_tokens(prompt_syms, static_cast<int64_t>(symbols.size()) - prompt_syms,
                                                  static_cast<double>(sample.seq.prompt_len), 1.0);
        frames.push_back(est.frames);

        target_symbols.emplace_back(symbols.begin() + prompt_syms, symbols.end());
        const std::vector<int32_t> prompt_slice(symbols.begin(), symbols.begin() + prompt_syms);
        clean_prompts.push_back(transduce(spec, prompt_slice, sample.speaker));
    }

    auto decoded = decode_batch(cfg, params, texts, prompts, frames, sampler_cfg);

    DecodeEval out;
    out.samples = static_cast<int64_t>(samples.size());
    for (size_t i = 0; i < decoded.size(); ++i) {
        const int64_t prompt_len = samples[i].seq.prompt_len;
        TokenGrid target(decoded[i].frames - prompt_len, spec.codebooks);
        for (int64_t t = 0; t < target.frames; ++t)
            for (int32_t c = 0; c < spec.codebooks; ++c) target.at(t, c) = decoded[i].at(prompt_len + t, c);
        out.wer += toy_wer(spec, target, target_symbols[i]);
        out.sim += toy_sim(spec, target, clean_prompts[i]);
    }
    out.wer /= static_cast<double>(decoded.size());
    out.sim /= static_cast<double>(decoded.size());
    return out;
}

#define MASKGRID_INSTANTIATE_EVAL(T)                                                                        \
    template double heldout_masked_nll<T>(const ModelConfig&, const Params<T>&, std::span<const ToySample>, \
                                          uint64_t);                                                        \
    template double probe_mean_kl<T>(const ModelConfig&, const Params<T>&, const ToySpec&,                  \
                                     std::span<const ToySample>, uint64_t, int64_t);                        \
    template DecodeEval decode_metrics<T>(const ModelConfig&, const Params<T>&, const ToySpec&,             \
                                          std::span<const ToySample>, const SamplerConfig&,                 \
                                          DenoiseTokenMode);

MASKGRID_INSTANTIATE_EVAL(float)
MASKGRID_INSTANTIATE_EVAL(double)

#undef MASKGRID_INSTANTIATE_EVAL

}  // namespace maskgrid
