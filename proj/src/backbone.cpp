#include "maskgrid/backbone.hpp"

#include <string>

namespace maskgrid {

using nk::SegRange;
using nk::Tape;
using nk::Tensor;

namespace {

template <typename T>
Tensor<T> normal_tensor(nk::Shape shape, Rng& rng, double stddev) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.mut_ptr()[i] = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

std::string layer_key(int layer, const char* name) {
    return "layer." + std::to_string(layer) + "." + name;
}

}  // namespace

template <typename T>
Params<T> init_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    constexpr double kStd = 0.02;
    const int64_t d = cfg.model_dim;
    Params<T> p;
    p.add("text_emb", normal_tensor<T>({cfg.text_vocab, d}, rng, kStd));
    for (int c = 0; c < cfg.codebooks; ++c)
        p.add("codebook_emb." + std::to_string(c), normal_tensor<T>({cfg.codebook_vocab, d}, rng, kStd));
    for (int l = 0; l < cfg.layers; ++l) {
        p.add(layer_key(l, "ln1.gamma"), Tensor<T>::full({d}, T(1)));
        p.add(layer_key(l, "ln1.beta"), Tensor<T>::zeros({d}));
        p.add(layer_key(l, "attn.wq"), normal_tensor<T>({d, d}, rng, kStd));
        p.add(layer_key(l, "attn.bq"), Tensor<T>::zeros({d}));
        p.add(layer_key(l, "attn.wk"), normal_tensor<T>({d, d}, rng, kStd));
        p.add(layer_key(l, "attn.bk"), Tensor<T>::zeros({d}));
        p.add(layer_key(l, "attn.wv"), normal_tensor<T>({d, d}, rng, kStd));
        p.add(layer_key(l, "attn.bv"), Tensor<T>::zeros({d}));
        p.add(layer_key(l, "attn.wo"), normal_tensor<T>({d, d}, rng, kStd));
        p.add(layer_key(l, "attn.bo"), Tensor<T>::zeros({d}));
        p.add(layer_key(l, "ln2.gamma"), Tensor<T>::full({d}, T(1)));
        p.add(layer_key(l, "ln2.beta"), Tensor<T>::zeros({d}));
        p.add(layer_key(l, "ffn.w1"), normal_tensor<T>({d, cfg.ffn_dim}, rng, kStd));
        p.add(layer_key(l, "ffn.b1"), Tensor<T>::zeros({cfg.ffn_dim}));
        p.add(layer_key(l, "ffn.w2"), normal_tensor<T>({cfg.ffn_dim, d}, rng, kStd));
        p.add(layer_key(l, "ffn.b2"), Tensor<T>::zeros({d}));
    }
    p.add("final_ln.gamma", Tensor<T>::full({d}, T(1)));
    p.add("final_ln.beta", Tensor<T>::zeros({d}));
    for (int c = 0; c < cfg.codebooks; ++c) {
        p.add("head." + std::to_string(c) + ".w", normal_tensor<T>({d, cfg.codebook_vocab}, rng, kStd));
        p.add("head." + std::to_string(c) + ".b", Tensor<T>::zeros({cfg.codebook_vocab}));
    }
    return p;
}

namespace {

// Transformer trunk shared by the packed forward and the AR loss: builds the
// embedded rows for every segment, runs the blocks, applies the final norm.
template <typename T>
Tensor<T> run_trunk(const ModelConfig& cfg, const Params<T>& params, std::span<const Sequence> seqs,
                    Tape<T>* tape, std::vector<SegRange>& segments_out) {
    const Tensor<T>& text_emb = params.at("text_emb");

    std::vector<Tensor<T>> seg_embeds;
    std::vector<int32_t> positions;
    segments_out.clear();
    int64_t row = 0;
    for (const Sequence& seq : seqs) {
        validate_sequence(seq, cfg);
        Tensor<T> te = nk::embedding_lookup(tape, text_emb, seq.text);
        std::vector<Tensor<T>> parts{std::move(te)};
        if (seq.grid.frames > 0) {
            // codebook embeddings of one frame are summed into a single row
            Tensor<T> fe;
            for (int c = 0; c < cfg.codebooks; ++c) {
                std::vector<int32_t> col(static_cast<size_t>(seq.grid.frames));
                for (int64_t t = 0; t < seq.grid.frames; ++t) col[static_cast<size_t>(t)] = seq.grid.at(t, c);
                Tensor<T> e = nk::embedding_lookup(tape, params.at("codebook_emb." + std::to_string(c)), col);
                fe = (c == 0) ? std::move(e) : nk::add(tape, fe, e);
            }
            parts.push_back(std::move(fe));
        }
        seg_embeds.push_back(nk::concatenate(tape, std::span<const Tensor<T>>(parts), 0));
        const int64_t len = seq.total_tokens();
        segments_out.push_back({row, row + len});
        for (int64_t i = 0; i < len; ++i) positions.push_back(static_cast<int32_t>(i));
        row += len;
    }

    Tensor<T> h = seg_embeds.size() == 1
                      ? std::move(seg_embeds[0])
                      : nk::concatenate(tape, std::span<const Tensor<T>>(seg_embeds), 0);

    const bool causal = cfg.attention_mode == AttentionMode::causal;
    for (int l = 0; l < cfg.layers; ++l) {
        Tensor<T> a = nk::layer_norm(tape, h, params.at(layer_key(l, "ln1.gamma")), params.at(layer_key(l, "ln1.beta")));
        Tensor<T> q = nk::linear(tape, a, params.at(layer_key(l, "attn.wq")), params.at(layer_key(l, "attn.bq")));
        Tensor<T> k = nk::linear(tape, a, params.at(layer_key(l, "attn.wk")), params.at(layer_key(l, "attn.bk")));
        Tensor<T> v = nk::linear(tape, a, params.at(layer_key(l, "attn.wv")), params.at(layer_key(l, "attn.bv")));
        Tensor<T> att = nk::attention(tape, q, k, v, cfg.heads, positions, segments_out, causal, cfg.rope_base);
        h = nk::add(tape, h, nk::linear(tape, att, params.at(layer_key(l, "attn.wo")), params.at(layer_key(l, "attn.bo"))));

        Tensor<T> f = nk::layer_norm(tape, h, params.at(layer_key(l, "ln2.gamma")), params.at(layer_key(l, "ln2.beta")));
        Tensor<T> f1 = nk::gelu(tape, nk::linear(tape, f, params.at(layer_key(l, "ffn.w1")), params.at(layer_key(l, "ffn.b1"))));
        h = nk::add(tape, h, nk::linear(tape, f1, params.at(layer_key(l, "ffn.w2")), params.at(layer_key(l, "ffn.b2"))));
    }
    return nk::layer_norm(tape, h, params.at("final_ln.gamma"), params.at("final_ln.beta"));
}

}  // namespace

template <typename T>
std::vector<LogitsGrid<T>> forward_packed(const ModelConfig& cfg, const Params<T>& params,
                                          std::span<const Sequence> seqs, Tape<T>* tape) {
    if (seqs.empty()) throw input_error("forward: no sequences");
    std::vector<SegRange> segments;
    Tensor<T> hidden = run_trunk(cfg, params, seqs, tape, segments);

    std::vector<LogitsGrid<T>> out(seqs.size());
    for (size_t s = 0; s < seqs.size(); ++s) {
        const int64_t text_len = static_cast<int64_t>(seqs[s].text.size());
        const int64_t frames = seqs[s].grid.frames;
        out[s].frames = frames;
        if (frames == 0) continue;
        Tensor<T> acoustic = nk::slice(tape, hidden, 0, segments[s].begin + text_len, frames);
        for (int c = 0; c < cfg.codebooks; ++c) {
            out[s].per_codebook.push_back(nk::linear(tape, acoustic, params.at("head." + std::to_string(c) + ".w"),
                                                     params.at("head." + std::to_string(c) + ".b")));
        }
    }
    return out;
}

template <typename T>
LogitsGrid<T> forward(const ModelConfig& cfg, const Params<T>& params, const Sequence& seq, Tape<T>* tape) {
    return forward_packed(cfg, params, std::span<const Sequence>(&seq, 1), tape)[0];
}

template <typename T>
Tensor<T> ar_pretrain_loss(const ModelConfig& cfg, const Params<T>& params, const Sequence& seq, Tape<T>* tape) {
    if (cfg.attention_mode != AttentionMode::causal)
        throw input_error("ar_pretrain_loss: requires causal attention mode");
    if (seq.grid.frames < 2) throw input_error("ar_pretrain_loss: need at least two frames");

    LogitsGrid<T> logits = forward(cfg, params, seq, tape);
    const int64_t frames = seq.grid.frames;

    // frame t predicts frame t+1: keep logits rows [0, frames-1)
    std::vector<uint8_t> mask(static_cast<size_t>(frames - 1), 1);
    mask.resize(static_cast<size_t>(frames), 0);
    Tensor<T> total;
    for (int c = 0; c < cfg.codebooks; ++c) {
        std::vector<int32_t> targets(static_cast<size_t>(frames), 0);
        for (int64_t t = 0; t + 1 < frames; ++t) targets[static_cast<size_t>(t)] = seq.grid.at(t + 1, c);
        Tensor<T> l = nk::cross_entropy_masked(tape, logits.per_codebook[c], targets, mask);
        total = (c == 0) ? std::move(l) : nk::add(tape, total, l);
    }
    return total;
}

template <typename T>
Params<T> transfer_weights(const ModelConfig& source_cfg, const Params<T>& source,
                           const ModelConfig& target_cfg) {
    ModelConfig a = source_cfg, b = target_cfg;
    a.attention_mode = b.attention_mode;
    if (!(a == b)) throw checkpoint_error("transfer_weights: configs differ beyond attention mode");

    Params<T> out;
    for (const auto& [name, t] : source.entries) {
        Tensor<T> copy = Tensor<T>::zeros(t.shape);
        std::copy(t.ptr(), t.ptr() + t.numel(), copy.mut_ptr());
        out.add(name, std::move(copy));
    }
    return out;
}

#define MASKGRID_INSTANTIATE_BACKBONE(T)                                                                    \
    template Params<T> init_params<T>(const ModelConfig&, Rng&);                                            \
    template LogitsGrid<T> forward<T>(const ModelConfig&, const Params<T>&, const Sequence&, Tape<T>*);     \
    template std::vector<LogitsGrid<T>> forward_packed<T>(const ModelConfig&, const Params<T>&,             \
                                                          std::span<const Sequence>, Tape<T>*);             \
    template Tensor<T> ar_pretrain_loss<T>(const ModelConfig&, const Params<T>&, const Sequence&,           \
                                           Tape<T>*);                                                       \
    template Params<T> transfer_weights<T>(const ModelConfig&, const Params<T>&, const ModelConfig&);

MASKGRID_INSTANTIATE_BACKBONE(float)
MASKGRID_INSTANTIATE_BACKBONE(double)

#undef MASKGRID_INSTANTIATE_BACKBONE

}  // namespace maskgrid
