#include "maskgrid/masking.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace maskgrid {

using nlohmann::json;
using nk::Tape;
using nk::Tensor;

std::string to_string(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::full_random: return "full_random";
        case MaskStrategy::soundstorm: return "soundstorm";
        case MaskStrategy::maskgct: return "maskgct";
    }
    throw input_error("bad mask strategy");
}

MaskStrategy mask_strategy_from_string(const std::string& s) {
    if (s == "full_random" || s == "full") return MaskStrategy::full_random;
    if (s == "soundstorm") return MaskStrategy::soundstorm;
    if (s == "maskgct") return MaskStrategy::maskgct;
    throw input_error("unknown mask strategy '" + s + "'");
}

StrategySpec StrategySpec::preset(MaskStrategy s) {
    StrategySpec spec;
    spec.id = s;
    switch (s) {
        case MaskStrategy::full_random:
            break;
        case MaskStrategy::soundstorm:
            spec.layer_law = LayerLaw::uniform;
            spec.ratio_law = RatioLaw::cosine;
            break;
        case MaskStrategy::maskgct:
            spec.layer_law = LayerLaw::linear_decreasing;
            spec.ratio_law = RatioLaw::cosine;
            break;
    }
    return spec;
}

std::vector<double> StrategySpec::layer_probs(int codebooks) const {
    if (codebooks < 1) throw input_error("layer_probs: need at least one codebook");
    std::vector<double> p(static_cast<size_t>(codebooks));
    if (layer_law == LayerLaw::uniform) {
        std::fill(p.begin(), p.end(), 1.0 / codebooks);
    } else {
        // P(layer c) proportional to C - c for 0-based c, so the lowest layer
        // is the most likely.
        const double total = codebooks * (codebooks + 1) / 2.0;
        for (int c = 0; c < codebooks; ++c) p[static_cast<size_t>(c)] = (codebooks - c) / total;
    }
    return p;
}

double StrategySpec::draw_ratio(Rng& rng) const {
    const double u = rng.uniform01();
    return ratio_law == RatioLaw::uniform ? u : std::cos(u * M_PI / 2.0);
}

std::string MaskPlan::to_json() const {
    json j;
    j["strategy"] = maskgrid::to_string(strategy);
    j["ratio"] = ratio;
    json masked_j = json::array();
    for (const auto& [t, c] : masked) masked_j.push_back({t, c});
    json loss_j = json::array();
    for (const auto& [t, c] : loss_positions) loss_j.push_back({t, c});
    j["masked"] = std::move(masked_j);
    j["loss_positions"] = std::move(loss_j);
    return j.dump();
}

MaskPlan MaskPlan::from_json(const std::string& text) {
    json j = json::parse(text);
    MaskPlan plan;
    plan.strategy = mask_strategy_from_string(j.at("strategy").get<std::string>());
    plan.ratio = j.at("ratio").get<double>();
    for (const auto& e : j.at("masked")) plan.masked.emplace_back(e.at(0).get<int32_t>(), e.at(1).get<int32_t>());
    for (const auto& e : j.at("loss_positions"))
        plan.loss_positions.emplace_back(e.at(0).get<int32_t>(), e.at(1).get<int32_t>());
    return plan;
}

namespace {

void check_target_region(int64_t frames, int32_t codebooks, int64_t prompt_len) {
    if (codebooks < 1) throw input_error("mask plan: need at least one codebook");
    if (prompt_len < 0 || frames <= prompt_len) throw input_error("mask plan: empty target region");
}

}  // namespace

MaskPlan plan_full_random(int64_t frames, int32_t codebooks, int64_t prompt_len, Rng& rng,
                          double forced_ratio) {
    check_target_region(frames, codebooks, prompt_len);
    if (forced_ratio == 0.0) throw input_error("mask plan: ratio 0 cannot mask any position");
    MaskPlan plan;
    plan.strategy = MaskStrategy::full_random;
    while (true) {
        plan.masked.clear();
        plan.ratio = forced_ratio >= 0.0 ? forced_ratio : rng.uniform01();
        for (int64_t t = prompt_len; t < frames; ++t)
            for (int32_t c = 0; c < codebooks; ++c)
                if (rng.bernoulli(plan.ratio)) plan.masked.emplace_back(static_cast<int32_t>(t), c);
        if (!plan.masked.empty()) break;
    }
    plan.loss_positions = plan.masked;
    return plan;
}

MaskPlan plan_per_layer(const StrategySpec& spec, int64_t frames, int32_t codebooks, int64_t prompt_len,
                        Rng& rng) {
    check_target_region(frames, codebooks, prompt_len);
    MaskPlan plan;
    plan.strategy = spec.id == MaskStrategy::full_random ? MaskStrategy::soundstorm : spec.id;

    const std::vector<double> probs = spec.layer_probs(codebooks);
    while (true) {
        plan.masked.clear();
        plan.loss_positions.clear();

        // pick the loss layer
        const double u = rng.uniform01();
        int32_t layer = 0;
        double acc = 0.0;
        for (int32_t c = 0; c < codebooks; ++c) {
            acc += probs[static_cast<size_t>(c)];
            if (u < acc) {
                layer = c;
                break;
            }
            layer = c;
        }

        plan.ratio = spec.draw_ratio(rng);
        for (int64_t t = prompt_len; t < frames; ++t)
            if (rng.bernoulli(plan.ratio)) plan.loss_positions.emplace_back(static_cast<int32_t>(t), layer);
        if (plan.loss_positions.empty()) continue;

        plan.masked = plan.loss_positions;
        // layers above the loss layer: fully masked, excluded from the loss
        for (int64_t t = prompt_len; t < frames; ++t)
            for (int32_t c = layer + 1; c < codebooks; ++c) plan.masked.emplace_back(static_cast<int32_t>(t), c);
        std::sort(plan.masked.begin(), plan.masked.end());
        return plan;
    }
}

MaskPlan plan_masking(const StrategySpec& spec, int64_t frames, int32_t codebooks, int64_t prompt_len,
                      Rng& rng) {
    if (spec.id == MaskStrategy::full_random) return plan_full_random(frames, codebooks, prompt_len, rng);
    return plan_per_layer(spec, frames, codebooks, prompt_len, rng);
}

Sequence apply_mask(const Sequence& seq, const MaskPlan& plan, const ModelConfig& cfg) {
    Sequence masked = seq;
    for (const auto& [t, c] : plan.masked) {
        if (t < seq.prompt_len) throw input_error("mask plan touches the prompt segment");
        if (t >= seq.grid.frames || c < 0 || c >= seq.grid.codebooks)
            throw input_error("mask plan position outside the grid");
        masked.grid.at(t, c) = cfg.mask_id();
    }
    return masked;
}

template <typename T>
MaskedLoss<T> masked_loss_from_logits(const ModelConfig& cfg, const LogitsGrid<T>& logits,
                                      const Sequence& clean_seq, const MaskPlan& plan, Tape<T>* tape) {
    if (plan.loss_positions.empty()) throw input_error("masked loss: no loss positions");
    const int64_t frames = clean_seq.grid.frames;

    MaskedLoss<T> out;
    out.count = static_cast<int64_t>(plan.loss_positions.size());
    Tensor<T> total;
    bool first = true;
    for (int32_t c = 0; c < cfg.codebooks; ++c) {
        std::vector<uint8_t> row_mask(static_cast<size_t>(frames), 0);
        bool any = false;
        for (const auto& [t, pc] : plan.loss_positions)
            if (pc == c) {
                row_mask[static_cast<size_t>(t)] = 1;
                any = true;
            }
        if (!any) continue;
        std::vector<int32_t> targets(static_cast<size_t>(frames), 0);
        for (int64_t t = 0; t < frames; ++t) targets[static_cast<size_t>(t)] = clean_seq.grid.at(t, c);
        Tensor<T> l = nk::cross_entropy_masked(tape, logits.per_codebook[static_cast<size_t>(c)], targets, row_mask);
        total = first ? std::move(l) : nk::add(tape, total, l);
        first = false;
    }
    out.sum = std::move(total);
    return out;
}

template <typename T>
MaskedLoss<T> apply_and_loss(const ModelConfig& cfg, const Params<T>& params, const Sequence& seq,
                             const MaskPlan& plan, Tape<T>* tape) {
    const Sequence masked = apply_mask(seq, plan, cfg);
    LogitsGrid<T> logits = forward(cfg, params, masked, tape);
    return masked_loss_from_logits(cfg, logits, seq, plan, tape);
}

#define MASKGRID_INSTANTIATE_MASKING(T)                                                                     \
    template MaskedLoss<T> apply_and_loss<T>(const ModelConfig&, const Params<T>&, const Sequence&,         \
                                             const MaskPlan&, Tape<T>*);                                    \
    template MaskedLoss<T> masked_loss_from_logits<T>(const ModelConfig&, const LogitsGrid<T>&,             \
                                                      const Sequence&, const MaskPlan&, Tape<T>*);

MASKGRID_INSTANTIATE_MASKING(float)
MASKGRID_INSTANTIATE_MASKING(double)

#undef MASKGRID_INSTANTIATE_MASKING

}  // namespace maskgrid
