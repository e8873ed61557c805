#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "maskgrid/masking.hpp"

using namespace maskgrid;
using nk::Tape;
using nk::Tensor;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.model_dim = 16;
    cfg.heads = 2;
    cfg.ffn_dim = 32;
    cfg.text_vocab = 8;
    cfg.codebooks = 2;
    cfg.codebook_vocab = 8;
    cfg.max_positions = 64;
    return cfg;
}

// expectation of |loss_positions| conditioned on the redraw-on-empty rule,
// for a Bernoulli(ratio~U(0,1)) law over n positions
double conditional_mean_count(int64_t n) {
    const double unconditional = static_cast<double>(n) / 2.0;
    const double p_empty = 1.0 / static_cast<double>(n + 1);  // E[(1-p)^n]
    return unconditional / (1.0 - p_empty);
}

double per_position_nll(const Tensor<double>& logits_row_tensor, int64_t row, int32_t target, int64_t k) {
    double mx = -1e300;
    for (int64_t j = 0; j < k; ++j) mx = std::max(mx, logits_row_tensor.at({row, j}));
    double denom = 0;
    for (int64_t j = 0; j < k; ++j) denom += std::exp(logits_row_tensor.at({row, j}) - mx);
    return -(logits_row_tensor.at({row, target}) - mx - std::log(denom));
}

}  // namespace

TEST_SUITE("masking") {

TEST_CASE("forced ratio 1 masks the whole target region") {
    Rng rng(1);
    MaskPlan plan = plan_full_random(12, 4, 4, rng, 1.0);
    CHECK(plan.masked.size() == static_cast<size_t>((12 - 4) * 4));
    CHECK(plan.loss_positions == plan.masked);
    for (const auto& [t, c] : plan.masked) CHECK(t >= 4);
}

TEST_CASE("empty target region and zero forced ratio are rejected") {
    Rng rng(2);
    CHECK_THROWS_AS(plan_full_random(4, 4, 4, rng), input_error);
    CHECK_THROWS_AS(plan_full_random(4, 4, 5, rng), input_error);
    CHECK_THROWS_AS(plan_full_random(8, 4, 0, rng, 0.0), input_error);
    StrategySpec ss = StrategySpec::preset(MaskStrategy::soundstorm);
    CHECK_THROWS_AS(plan_per_layer(ss, 4, 4, 4, rng), input_error);
}

TEST_CASE("full-random mean masked fraction is 0.5 +/- 0.01 over 10^4 plans") {
    Rng rng(20260809);
    const int64_t frames = 32, prompt = 0;
    const int32_t c = 4;
    const double total = static_cast<double>(frames * c);
    double sum_frac = 0;
    for (int i = 0; i < 10000; ++i) {
        MaskPlan plan = plan_full_random(frames, c, prompt, rng);
        sum_frac += static_cast<double>(plan.masked.size()) / total;
    }
    CHECK(std::abs(sum_frac / 10000.0 - 0.5) < 0.01);
}

TEST_CASE("masked fraction is uniform on (0,1]: KS below the 1% critical value") {
    // larger grid keeps the binomial smearing well under the KS resolution
    Rng rng(7);
    const int64_t frames = 256;
    const int32_t c = 4;
    const double total = static_cast<double>(frames * c);
    std::vector<double> fracs;
    fracs.reserve(10000);
    for (int i = 0; i < 10000; ++i) {
        MaskPlan plan = plan_full_random(frames, c, 0, rng);
        fracs.push_back(static_cast<double>(plan.masked.size()) / total);
    }
    std::sort(fracs.begin(), fracs.end());
    double ks = 0;
    const double n = static_cast<double>(fracs.size());
    for (size_t i = 0; i < fracs.size(); ++i) {
        ks = std::max(ks, std::abs((i + 1) / n - fracs[i]));
        ks = std::max(ks, std::abs(fracs[i] - i / n));
    }
    CHECK(ks < 1.628 / std::sqrt(n));  // 1% critical value
}

TEST_CASE("plans never touch the prompt under any strategy") {
    Rng rng(3);
    for (MaskStrategy s : {MaskStrategy::full_random, MaskStrategy::soundstorm, MaskStrategy::maskgct}) {
        StrategySpec spec = StrategySpec::preset(s);
        for (int rep = 0; rep < 200; ++rep) {
            const int64_t prompt = 1 + static_cast<int64_t>(rng.uniform_int(4));
            const int64_t frames = prompt + 1 + static_cast<int64_t>(rng.uniform_int(8));
            MaskPlan plan = plan_masking(spec, frames, 4, prompt, rng);
            CHECK(!plan.masked.empty());
            CHECK(!plan.loss_positions.empty());
            for (const auto& [t, c] : plan.masked) CHECK(t >= prompt);
        }
    }
}

TEST_CASE("per-layer plan structure: loss layer plus fully-masked higher layers") {
    Rng rng(4);
    StrategySpec spec = StrategySpec::preset(MaskStrategy::soundstorm);
    for (int rep = 0; rep < 200; ++rep) {
        const int64_t frames = 10, prompt = 2;
        const int32_t codebooks = 4;
        MaskPlan plan = plan_per_layer(spec, frames, codebooks, prompt, rng);

        std::set<int32_t> loss_layers;
        for (const auto& [t, c] : plan.loss_positions) loss_layers.insert(c);
        REQUIRE(loss_layers.size() == 1);
        const int32_t layer = *loss_layers.begin();

        std::set<GridPos> masked(plan.masked.begin(), plan.masked.end());
        for (const auto& p : plan.loss_positions) CHECK(masked.count(p) == 1);
        // every target position above the loss layer is masked but not a loss position
        std::set<GridPos> loss(plan.loss_positions.begin(), plan.loss_positions.end());
        for (int64_t t = prompt; t < frames; ++t)
            for (int32_t c = layer + 1; c < codebooks; ++c) {
                CHECK(masked.count({static_cast<int32_t>(t), c}) == 1);
                CHECK(loss.count({static_cast<int32_t>(t), c}) == 0);
            }
        // nothing below the loss layer is masked
        for (const auto& [t, c] : plan.masked) CHECK(c >= layer);
    }
}

TEST_CASE("per-layer degenerates to single-layer masking at C=1") {
    Rng rng(5);
    StrategySpec spec = StrategySpec::preset(MaskStrategy::maskgct);
    MaskPlan plan = plan_per_layer(spec, 8, 1, 0, rng);
    CHECK(plan.loss_positions == plan.masked);
}

TEST_CASE("uniform layer law picks each of 4 layers 2500 +/- 150 times in 10^4 draws") {
    Rng rng(6);
    StrategySpec spec = StrategySpec::preset(MaskStrategy::soundstorm);
    std::vector<int> counts(4, 0);
    for (int i = 0; i < 10000; ++i) {
        MaskPlan plan = plan_per_layer(spec, 8, 4, 0, rng);
        counts[static_cast<size_t>(plan.loss_positions[0].second)]++;
    }
    for (int c = 0; c < 4; ++c) CHECK(std::abs(counts[static_cast<size_t>(c)] - 2500) < 150);
}

TEST_CASE("linear-decreasing layer law prefers lower layers") {
    StrategySpec spec = StrategySpec::preset(MaskStrategy::maskgct);
    auto probs = spec.layer_probs(4);
    CHECK(probs == std::vector<double>{0.4, 0.3, 0.2, 0.1});
    double total = 0;
    for (double p : probs) total += p;
    CHECK(total == doctest::Approx(1.0));

    Rng rng(8);
    std::vector<int> counts(4, 0);
    for (int i = 0; i < 10000; ++i) {
        MaskPlan plan = plan_per_layer(spec, 8, 4, 0, rng);
        counts[static_cast<size_t>(plan.loss_positions[0].second)]++;
    }
    // 3-sigma binomial bounds around 4000/3000/2000/1000
    const double expect[] = {4000, 3000, 2000, 1000};
    for (int c = 0; c < 4; ++c) {
        const double sigma = std::sqrt(10000 * (expect[c] / 10000) * (1 - expect[c] / 10000));
        CHECK(std::abs(counts[static_cast<size_t>(c)] - expect[c]) < 3 * sigma);
    }
}

TEST_CASE("per-layer uniform-ratio loss count is 1/C of full-random's") {
    // compare redraw-corrected empirical means: the unconditional laws have
    // expectations (T-Tp)*C/2 and (T-Tp)/2 exactly
    Rng rng(9);
    const int64_t frames = 32;
    const int32_t c = 4;
    const int n = 10000;

    double full_sum = 0;
    for (int i = 0; i < n; ++i) full_sum += static_cast<double>(plan_full_random(frames, c, 0, rng).masked.size());
    StrategySpec uniform_ratio;
    uniform_ratio.id = MaskStrategy::soundstorm;
    uniform_ratio.layer_law = LayerLaw::uniform;
    uniform_ratio.ratio_law = RatioLaw::uniform;
    double layer_sum = 0;
    for (int i = 0; i < n; ++i)
        layer_sum += static_cast<double>(plan_per_layer(uniform_ratio, frames, c, 0, rng).loss_positions.size());

    // each empirical mean sits within 3 sigma of its conditional expectation
    const double full_mean = full_sum / n, layer_mean = layer_sum / n;
    const double full_expect = conditional_mean_count(frames * c);
    const double layer_expect = conditional_mean_count(frames);
    const double full_sigma = std::sqrt((frames * c / 6.0 + frames * c * frames * c / 12.0) / n);
    const double layer_sigma = std::sqrt((frames / 6.0 + frames * frames / 12.0) / n);
    CHECK(std::abs(full_mean - full_expect) < 3 * full_sigma);
    CHECK(std::abs(layer_mean - layer_expect) < 3 * layer_sigma);

    // redraw-corrected means estimate the unconditional laws, whose ratio is C
    const double full_corrected = full_mean * (1.0 - 1.0 / (frames * c + 1));
    const double layer_corrected = layer_mean * (1.0 - 1.0 / (frames + 1));
    CHECK(full_corrected / layer_corrected == doctest::Approx(static_cast<double>(c)).epsilon(0.02));
}

TEST_CASE("cosine ratio law stays in (0,1] and has mean 2/pi") {
    Rng rng(10);
    StrategySpec spec = StrategySpec::preset(MaskStrategy::soundstorm);
    double sum = 0;
    for (int i = 0; i < 20000; ++i) {
        const double r = spec.draw_ratio(rng);
        CHECK(r > 0.0);
        CHECK(r <= 1.0);
        sum += r;
    }
    CHECK(sum / 20000.0 == doctest::Approx(2.0 / M_PI).epsilon(0.01));
}

TEST_CASE("apply_and_loss on a uniform-logit model gives mean ln K") {
    ModelConfig cfg = small_config();
    Rng rng(11);
    auto params = init_params<double>(cfg, rng);
    for (auto& [name, t] : params.entries) std::fill(t.data->begin(), t.data->end(), 0.0);

    Sequence seq;
    seq.text = {1, 2};
    seq.grid = TokenGrid(4, cfg.codebooks);
    for (auto& code : seq.grid.codes) code = 3;
    seq.prompt_len = 1;

    Rng prng(12);
    MaskPlan plan = plan_full_random(4, cfg.codebooks, 1, prng);
    auto loss = apply_and_loss(cfg, params, seq, plan);
    CHECK(loss.mean() == doctest::Approx(std::log(static_cast<double>(cfg.codebook_vocab))).epsilon(1e-12));
    CHECK(loss.count == static_cast<int64_t>(plan.loss_positions.size()));
}

TEST_CASE("single masked position with delta logits gives ~zero loss") {
    // exercised at the loss functional against a crafted logits grid
    ModelConfig cfg = small_config();
    Sequence seq;
    seq.text = {0};
    seq.grid = TokenGrid(2, cfg.codebooks);
    seq.grid.at(1, 0) = 5;
    seq.prompt_len = 1;

    LogitsGrid<double> logits;
    logits.frames = 2;
    for (int c = 0; c < cfg.codebooks; ++c) {
        Tensor<double> l = Tensor<double>::zeros({2, cfg.codebook_vocab});
        l.mut_ptr()[1 * cfg.codebook_vocab + seq.grid.at(1, c)] = 60.0;  // delta on the truth
        logits.per_codebook.push_back(std::move(l));
    }
    MaskPlan plan;
    plan.masked = {{1, 0}};
    plan.loss_positions = plan.masked;
    auto loss = masked_loss_from_logits(cfg, logits, seq, plan);
    CHECK(loss.sum.item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("loss equals a hand-rolled per-position NLL sum") {
    ModelConfig cfg = small_config();
    Rng rng(13);
    auto params = init_params<double>(cfg, rng);
    Sequence seq;
    seq.text = {1, 4};
    seq.grid = TokenGrid(5, cfg.codebooks);
    for (auto& code : seq.grid.codes) code = static_cast<int32_t>(rng.uniform_int(cfg.codebook_vocab - 1));
    seq.prompt_len = 2;

    Rng prng(14);
    MaskPlan plan = plan_full_random(5, cfg.codebooks, 2, prng);
    auto loss = apply_and_loss(cfg, params, seq, plan);

    const Sequence masked = apply_mask(seq, plan, cfg);
    auto logits = forward(cfg, params, masked);
    double hand = 0;
    for (const auto& [t, c] : plan.loss_positions)
        hand += per_position_nll(logits.per_codebook[c], t, seq.grid.at(t, c), cfg.codebook_vocab);
    CHECK(loss.sum.item() == doctest::Approx(hand).epsilon(1e-12));
}

TEST_CASE("loss functional is strategy-independent for a fixed masked set") {
    // restrict a full-random plan's loss to one layer: must equal the
    // per-layer plan with the same masked set and layer
    ModelConfig cfg = small_config();
    Rng rng(15);
    auto params = init_params<double>(cfg, rng);
    Sequence seq;
    seq.text = {2};
    seq.grid = TokenGrid(6, cfg.codebooks);
    for (auto& code : seq.grid.codes) code = static_cast<int32_t>(rng.uniform_int(cfg.codebook_vocab - 1));
    seq.prompt_len = 1;

    MaskPlan full;
    full.strategy = MaskStrategy::full_random;
    full.masked = {{1, 0}, {2, 0}, {3, 0}, {1, 1}, {2, 1}, {4, 1}};
    full.loss_positions = full.masked;

    MaskPlan layer0 = full;
    layer0.strategy = MaskStrategy::soundstorm;
    layer0.loss_positions.clear();
    for (const auto& p : full.masked)
        if (p.second == 0) layer0.loss_positions.push_back(p);

    const Sequence masked = apply_mask(seq, full, cfg);
    auto logits = forward(cfg, params, masked);
    double hand_layer0 = 0;
    for (const auto& [t, c] : layer0.loss_positions)
        hand_layer0 += per_position_nll(logits.per_codebook[c], t, seq.grid.at(t, c), cfg.codebook_vocab);

    auto full_loss = apply_and_loss(cfg, params, seq, full);
    auto layer_loss = apply_and_loss(cfg, params, seq, layer0);
    CHECK(layer_loss.sum.item() == doctest::Approx(hand_layer0).epsilon(1e-12));
    CHECK(full_loss.sum.item() > layer_loss.sum.item());  // strictly more positions
}

TEST_CASE("gradient w.r.t. the clean token embedding at a masked position is zero") {
    ModelConfig cfg = small_config();
    Rng rng(16);
    auto params = init_params<double>(cfg, rng);

    Sequence seq;
    seq.text = {1};
    seq.grid = TokenGrid(3, cfg.codebooks);
    for (auto& code : seq.grid.codes) code = 0;
    seq.grid.at(2, 0) = 5;  // unique appearance of code 5, will be masked
    seq.prompt_len = 1;

    MaskPlan plan;
    plan.masked = {{2, 0}};
    plan.loss_positions = plan.masked;

    Tape<double> tape;
    for (auto& [name, t] : params.entries) tape.watch(t);
    auto loss = apply_and_loss(cfg, params, seq, plan, &tape);
    tape.backward(loss.sum);

    const auto& table = params.at("codebook_emb.0");
    const auto& g = tape.grad(table.gid);
    double clean_row_norm = 0, mask_row_norm = 0;
    for (int64_t j = 0; j < cfg.model_dim; ++j) {
        clean_row_norm += std::abs(g[static_cast<size_t>(5 * cfg.model_dim + j)]);
        mask_row_norm += std::abs(g[static_cast<size_t>(cfg.mask_id() * cfg.model_dim + j)]);
    }
    CHECK(clean_row_norm == 0.0);  // input was replaced by [M]
    CHECK(mask_row_norm > 0.0);
}

TEST_CASE("mask plan json round trip") {
    Rng rng(17);
    MaskPlan plan = plan_per_layer(StrategySpec::preset(MaskStrategy::maskgct), 8, 4, 2, rng);
    MaskPlan parsed = MaskPlan::from_json(plan.to_json());
    CHECK(parsed.masked == plan.masked);
    CHECK(parsed.loss_positions == plan.loss_positions);
    CHECK(parsed.ratio == plan.ratio);
    CHECK(parsed.strategy == plan.strategy);
}

TEST_CASE("apply_mask validates plan against the sequence") {
    ModelConfig cfg = small_config();
    Sequence seq;
    seq.text = {0};
    seq.grid = TokenGrid(3, cfg.codebooks);
    seq.prompt_len = 2;

    MaskPlan bad;
    bad.masked = {{0, 0}};  // prompt position
    bad.loss_positions = bad.masked;
    CHECK_THROWS_AS(apply_mask(seq, bad, cfg), input_error);
    bad.masked = {{5, 0}};
    CHECK_THROWS_AS(apply_mask(seq, bad, cfg), input_error);
}

}  // TEST_SUITE
