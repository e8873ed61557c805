#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "maskgrid/backbone.hpp"
#include "maskgrid/grad_check.hpp"
#include "maskgrid/masking.hpp"

using namespace maskgrid;
using nk::Tape;
using nk::Tensor;

namespace {

ModelConfig tiny_config(AttentionMode mode = AttentionMode::bidirectional) {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.model_dim = 16;
    cfg.heads = 2;
    cfg.ffn_dim = 32;
    cfg.text_vocab = 8;
    cfg.codebooks = 2;
    cfg.codebook_vocab = 8;
    cfg.max_positions = 64;
    cfg.attention_mode = mode;
    return cfg;
}

Sequence tiny_sequence(const ModelConfig& cfg, Rng& rng, int64_t frames, size_t text_len = 3) {
    Sequence seq;
    for (size_t i = 0; i < text_len; ++i)
        seq.text.push_back(static_cast<int32_t>(rng.uniform_int(cfg.text_vocab - 1)));
    seq.grid = TokenGrid(frames, cfg.codebooks);
    for (auto& code : seq.grid.codes) code = static_cast<int32_t>(rng.uniform_int(cfg.codebook_vocab - 1));
    seq.prompt_len = frames >= 2 ? 1 : 0;
    return seq;
}

}  // namespace

TEST_SUITE("backbone") {

TEST_CASE("forward shape contract at C=1, T=1") {
    ModelConfig cfg = tiny_config();
    cfg.codebooks = 1;
    Rng rng(1);
    auto params = init_params<double>(cfg, rng);
    Sequence seq = tiny_sequence(cfg, rng, 1);
    auto logits = forward(cfg, params, seq);
    REQUIRE(logits.per_codebook.size() == 1);
    CHECK(logits.per_codebook[0].shape == nk::Shape{1, cfg.codebook_vocab});
}

TEST_CASE("token id out of vocabulary is rejected") {
    ModelConfig cfg = tiny_config();
    Rng rng(2);
    auto params = init_params<double>(cfg, rng);
    Sequence seq = tiny_sequence(cfg, rng, 2);
    seq.text[0] = cfg.text_vocab;  // out of range
    CHECK_THROWS_AS(forward(cfg, params, seq), input_error);
    seq = tiny_sequence(cfg, rng, 2);
    seq.grid.at(0, 0) = cfg.codebook_vocab;
    CHECK_THROWS_AS(forward(cfg, params, seq), input_error);
}

TEST_CASE("causal mode: logits before a changed position are bitwise identical") {
    Rng rng(3);
    ModelConfig causal = tiny_config(AttentionMode::causal);
    auto params = init_params<double>(causal, rng);
    Sequence a = tiny_sequence(causal, rng, 6);
    Sequence b = a;
    const int64_t t_star = 4;
    b.grid.at(t_star, 1) = (b.grid.at(t_star, 1) + 1) % (causal.codebook_vocab - 1);

    auto la = forward(causal, params, a);
    auto lb = forward(causal, params, b);
    for (int c = 0; c < causal.codebooks; ++c)
        for (int64_t t = 0; t < t_star; ++t)
            for (int k = 0; k < causal.codebook_vocab; ++k)
                CHECK(la.per_codebook[c].at({t, k}) == lb.per_codebook[c].at({t, k}));

    // bidirectional mode: some earlier position must feel the change
    ModelConfig bidir = tiny_config(AttentionMode::bidirectional);
    auto lba = forward(bidir, params, a);
    auto lbb = forward(bidir, params, b);
    bool any_diff_before = false;
    for (int c = 0; c < bidir.codebooks; ++c)
        for (int64_t t = 0; t < t_star; ++t)
            for (int k = 0; k < bidir.codebook_vocab; ++k)
                if (lba.per_codebook[c].at({t, k}) != lbb.per_codebook[c].at({t, k})) any_diff_before = true;
    CHECK(any_diff_before);
}

TEST_CASE("causal output is invariant to any change at later positions") {
    Rng rng(4);
    ModelConfig cfg = tiny_config(AttentionMode::causal);
    auto params = init_params<double>(cfg, rng);
    Sequence a = tiny_sequence(cfg, rng, 5);
    Sequence b = a;
    for (int64_t t = 3; t < 5; ++t)
        for (int c = 0; c < cfg.codebooks; ++c)
            b.grid.at(t, c) = static_cast<int32_t>(rng.uniform_int(cfg.codebook_vocab - 1));

    auto la = forward(cfg, params, a);
    auto lb = forward(cfg, params, b);
    for (int c = 0; c < cfg.codebooks; ++c)
        for (int64_t t = 0; t < 3; ++t)
            for (int k = 0; k < cfg.codebook_vocab; ++k)
                CHECK(la.per_codebook[c].at({t, k}) == lb.per_codebook[c].at({t, k}));
}

TEST_CASE("codebook permutation with matching table and head permutation") {
    Rng rng(5);
    ModelConfig cfg = tiny_config();
    auto params = init_params<double>(cfg, rng);
    Sequence seq = tiny_sequence(cfg, rng, 4);

    // swap codebooks 0 and 1 everywhere: grid columns, embedding tables, heads
    Sequence swapped = seq;
    for (int64_t t = 0; t < seq.grid.frames; ++t) {
        swapped.grid.at(t, 0) = seq.grid.at(t, 1);
        swapped.grid.at(t, 1) = seq.grid.at(t, 0);
    }
    Params<double> sparams = transfer_weights(cfg, params, cfg);
    std::swap(sparams.at("codebook_emb.0"), sparams.at("codebook_emb.1"));
    std::swap(sparams.at("head.0.w"), sparams.at("head.1.w"));
    std::swap(sparams.at("head.0.b"), sparams.at("head.1.b"));

    auto base = forward(cfg, params, seq);
    auto perm = forward(cfg, sparams, swapped);
    // summed frame embeddings are unchanged, so logits permute with the heads
    for (int64_t t = 0; t < seq.grid.frames; ++t)
        for (int k = 0; k < cfg.codebook_vocab; ++k) {
            CHECK(base.per_codebook[0].at({t, k}) ==
                  doctest::Approx(perm.per_codebook[1].at({t, k})).epsilon(1e-12));
            CHECK(base.per_codebook[1].at({t, k}) ==
                  doctest::Approx(perm.per_codebook[0].at({t, k})).epsilon(1e-12));
        }
}

TEST_CASE("shuffling frames with position ids held fixed changes outputs") {
    Rng rng(6);
    ModelConfig cfg = tiny_config();
    auto params = init_params<double>(cfg, rng);
    Sequence seq = tiny_sequence(cfg, rng, 6);
    Sequence shuffled = seq;
    // rotate the frame contents; position ids stay tied to slots
    for (int64_t t = 0; t < 6; ++t)
        for (int c = 0; c < cfg.codebooks; ++c) shuffled.grid.at(t, c) = seq.grid.at((t + 1) % 6, c);

    auto la = forward(cfg, params, seq);
    auto lb = forward(cfg, params, shuffled);
    bool any_diff = false;
    for (int c = 0; c < cfg.codebooks; ++c)
        for (int64_t i = 0; i < la.per_codebook[c].numel(); ++i)
            if (la.per_codebook[c].ptr()[i] != lb.per_codebook[c].ptr()[i]) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("ar_pretrain_loss contracts") {
    Rng rng(7);
    ModelConfig cfg = tiny_config(AttentionMode::causal);
    auto params = init_params<double>(cfg, rng);

    SUBCASE("requires causal mode and at least two frames") {
        Sequence seq = tiny_sequence(cfg, rng, 1);
        CHECK_THROWS_AS(ar_pretrain_loss(cfg, params, seq), input_error);
        ModelConfig bidir = cfg;
        bidir.attention_mode = AttentionMode::bidirectional;
        Sequence seq2 = tiny_sequence(bidir, rng, 3);
        CHECK_THROWS_AS(ar_pretrain_loss(bidir, params, seq2), input_error);
    }

    SUBCASE("T=2 equals the cross-entropy of frame 2 given frame 1") {
        Sequence seq = tiny_sequence(cfg, rng, 2);
        const double loss = ar_pretrain_loss(cfg, params, seq).item();

        auto logits = forward(cfg, params, seq);
        double expect = 0;
        for (int c = 0; c < cfg.codebooks; ++c) {
            std::vector<double> row(static_cast<size_t>(cfg.codebook_vocab));
            for (int k = 0; k < cfg.codebook_vocab; ++k) row[static_cast<size_t>(k)] = logits.per_codebook[c].at({0, k});
            double mx = *std::max_element(row.begin(), row.end());
            double denom = 0;
            for (double v : row) denom += std::exp(v - mx);
            expect -= row[static_cast<size_t>(seq.grid.at(1, c))] - mx - std::log(denom);
        }
        CHECK(loss == doctest::Approx(expect).epsilon(1e-12));
    }

    SUBCASE("random params give roughly uniform prediction loss") {
        Sequence seq = tiny_sequence(cfg, rng, 12);
        const double loss = ar_pretrain_loss(cfg, params, seq).item();
        const double per_frame = loss / (seq.grid.frames - 1);
        const double uniform = cfg.codebooks * std::log(static_cast<double>(cfg.codebook_vocab));
        CHECK(per_frame == doctest::Approx(uniform).epsilon(0.05));
    }
}

TEST_CASE("transfer_weights round trip and config guard") {
    Rng rng(8);
    ModelConfig causal = tiny_config(AttentionMode::causal);
    ModelConfig bidir = tiny_config(AttentionMode::bidirectional);
    auto params = init_params<double>(causal, rng);

    auto there = transfer_weights(causal, params, bidir);
    auto back = transfer_weights(bidir, there, causal);
    REQUIRE(back.entries.size() == params.entries.size());
    for (size_t i = 0; i < params.entries.size(); ++i) {
        CHECK(back.entries[i].first == params.entries[i].first);
        for (int64_t j = 0; j < params.entries[i].second.numel(); ++j)
            CHECK(back.entries[i].second.ptr()[j] == params.entries[i].second.ptr()[j]);
    }

    ModelConfig other = bidir;
    other.model_dim = 32;
    CHECK_THROWS_AS(transfer_weights(causal, params, other), checkpoint_error);

    // zero checkpoint transfers to zero
    Params<double> zeros;
    for (const auto& [name, t] : params.entries) zeros.add(name, Tensor<double>::zeros(t.shape));
    auto tz = transfer_weights(causal, zeros, bidir);
    for (const auto& [name, t] : tz.entries)
        for (int64_t j = 0; j < t.numel(); ++j) CHECK(t.ptr()[j] == 0.0);
}

TEST_CASE("one-layer transferred model matches causal output on a single frame") {
    // With one layer the acoustic position sees the same attention row in
    // both modes, so the transferred bidirectional model reproduces the
    // causal output exactly on [one text token][one frame].
    Rng rng(9);
    ModelConfig causal = tiny_config(AttentionMode::causal);
    causal.layers = 1;
    ModelConfig bidir = causal;
    bidir.attention_mode = AttentionMode::bidirectional;

    auto params = init_params<double>(causal, rng);
    auto transferred = transfer_weights(causal, params, bidir);

    Sequence seq;
    seq.text = {2};
    seq.grid = TokenGrid(1, causal.codebooks);
    seq.grid.at(0, 0) = 3;
    seq.grid.at(0, 1) = 5;
    seq.prompt_len = 0;

    auto lc = forward(causal, params, seq);
    auto lb = forward(bidir, transferred, seq);
    for (int c = 0; c < causal.codebooks; ++c)
        for (int k = 0; k < causal.codebook_vocab; ++k)
            CHECK(lc.per_codebook[c].at({0, k}) == lb.per_codebook[c].at({0, k}));
}

TEST_CASE("gradient of masked loss w.r.t. unused embedding rows is exactly zero") {
    Rng rng(10);
    ModelConfig cfg = tiny_config();
    auto params = init_params<double>(cfg, rng);

    Sequence seq;
    seq.text = {1, 2};
    seq.grid = TokenGrid(3, cfg.codebooks);
    // use only codes {0,1}; code 4 appears nowhere (and is not the mask id)
    for (int64_t t = 0; t < 3; ++t)
        for (int c = 0; c < cfg.codebooks; ++c) seq.grid.at(t, c) = static_cast<int32_t>((t + c) % 2);
    seq.prompt_len = 1;

    MaskPlan plan;
    plan.strategy = MaskStrategy::full_random;
    plan.masked = {{1, 0}, {2, 1}};
    plan.loss_positions = plan.masked;
    plan.ratio = 0.5;

    Tape<double> tape;
    for (auto& [name, t] : params.entries) tape.watch(t);
    auto loss = apply_and_loss(cfg, params, seq, plan, &tape);
    tape.backward(loss.sum);

    const int unused_code = 4;
    for (int c = 0; c < cfg.codebooks; ++c) {
        const auto& table = params.at("codebook_emb." + std::to_string(c));
        const auto& g = tape.grad(table.gid);
        for (int64_t j = 0; j < cfg.model_dim; ++j)
            CHECK(g[static_cast<size_t>(unused_code * cfg.model_dim + j)] == 0.0);
    }
    // unused text id too
    const auto& text_table = params.at("text_emb");
    const auto& gt = tape.grad(text_table.gid);
    for (int64_t j = 0; j < cfg.model_dim; ++j)
        CHECK(gt[static_cast<size_t>(5 * cfg.model_dim + j)] == 0.0);
}

TEST_CASE("full model gradient check against central differences") {
    Rng rng(11);
    ModelConfig cfg = tiny_config();
    cfg.layers = 1;
    cfg.model_dim = 8;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    auto params = init_params<double>(cfg, rng);
    Sequence seq = tiny_sequence(cfg, rng, 3);

    MaskPlan plan;
    plan.masked = {{1, 0}, {2, 0}, {2, 1}};
    plan.loss_positions = plan.masked;

    std::vector<Tensor<double>*> ptrs;
    for (auto& [name, t] : params.entries) ptrs.push_back(&t);
    Rng sub(12);
    auto result = nk::grad_check(
        [&](Tape<double>* tape) { return apply_and_loss(cfg, params, seq, plan, tape).sum; }, ptrs, 1e-5,
        1500, &sub);
    CHECK(result.max_rel_err < 1e-5);
}

TEST_CASE("checkpoint save/load round trip is bitwise") {
    Rng rng(13);
    ModelConfig cfg = tiny_config();
    auto params = init_params<float>(cfg, rng);
    const std::string prefix = (std::filesystem::temp_directory_path() / "maskgrid_test_ckpt").string();
    save_checkpoint(prefix, params, R"({"step": 7})");

    std::string meta;
    auto loaded = load_checkpoint<float>(prefix, &meta);
    REQUIRE(loaded.entries.size() == params.entries.size());
    for (size_t i = 0; i < params.entries.size(); ++i) {
        CHECK(loaded.entries[i].first == params.entries[i].first);
        CHECK(loaded.entries[i].second.shape == params.entries[i].second.shape);
        for (int64_t j = 0; j < params.entries[i].second.numel(); ++j)
            CHECK(loaded.entries[i].second.ptr()[j] == params.entries[i].second.ptr()[j]);
    }
    CHECK(meta.find("7") != std::string::npos);
    CHECK(checkpoint_dtype(prefix) == "f32");
    CHECK_THROWS_AS(load_checkpoint<double>(prefix), checkpoint_error);
}

TEST_CASE("model config json round trip") {
    ModelConfig cfg = tiny_config(AttentionMode::causal);
    ModelConfig parsed = ModelConfig::from_json(cfg.to_json());
    CHECK(parsed == cfg);
    ModelConfig bad = cfg;
    bad.heads = 3;  // 16 not divisible by 3
    CHECK_THROWS_AS(ModelConfig::from_json(bad.to_json()), input_error);
}

}  // TEST_SUITE
