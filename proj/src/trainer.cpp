#include "maskgrid/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "maskgrid/common.hpp"
#include "maskgrid/datakit.hpp"

namespace maskgrid {

using nk::Tape;
using nk::Tensor;
using nlohmann::json;

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision precision_from_string(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw input_error("unknown precision '" + s + "'");
}

void TrainConfig::validate() const {
    if (peak_lr < 0.0) throw input_error("train config: negative learning rate");
    if (total_updates < 1) throw input_error("train config: total_updates must be positive");
    if (warmup_fraction <= 0.0 || warmup_fraction >= 1.0)
        throw input_error("train config: warmup_fraction must lie in (0, 1)");
    if (batch_tokens < 1) throw input_error("train config: batch_tokens must be positive");
    if (cond_dropout_p < 0.0 || cond_dropout_p >= 1.0)
        throw input_error("train config: cond_dropout_p must lie in [0, 1)");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw input_error("train config: adam betas must lie in [0, 1)");
    if (grad_clip < 0.0) throw input_error("train config: negative grad clip");
}

std::string TrainConfig::to_json() const {
    json j{{"peak_lr", peak_lr},
           {"total_updates", total_updates},
           {"warmup_fraction", warmup_fraction},
           {"batch_tokens", batch_tokens},
           {"weight_decay", weight_decay},
           {"beta1", beta1},
           {"beta2", beta2},
           {"adam_eps", adam_eps},
           {"cond_dropout_p", cond_dropout_p},
           {"seed", seed},
           {"precision", to_string(precision)},
           {"strategy", maskgrid::to_string(strategy)},
           {"grad_clip", grad_clip},
           {"sum_objective", sum_objective},
           {"checkpoint_interval", checkpoint_interval},
           {"threads", threads}};
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    TrainConfig cfg;
    cfg.peak_lr = j.at("peak_lr").get<double>();
    cfg.total_updates = j.at("total_updates").get<int64_t>();
    cfg.warmup_fraction = j.at("warmup_fraction").get<double>();
    cfg.batch_tokens = j.at("batch_tokens").get<int64_t>();
    cfg.weight_decay = j.at("weight_decay").get<double>();
    cfg.beta1 = j.at("beta1").get<double>();
    cfg.beta2 = j.at("beta2").get<double>();
    cfg.adam_eps = j.at("adam_eps").get<double>();
    cfg.cond_dropout_p = j.at("cond_dropout_p").get<double>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.precision = precision_from_string(j.at("precision").get<std::string>());
    cfg.strategy = mask_strategy_from_string(j.at("strategy").get<std::string>());
    cfg.grad_clip = j.at("grad_clip").get<double>();
    cfg.sum_objective = j.at("sum_objective").get<bool>();
    cfg.checkpoint_interval = j.at("checkpoint_interval").get<int64_t>();
    cfg.threads = j.at("threads").get<int>();
    cfg.validate();
    return cfg;
}

double lr_at(int64_t step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_updates) throw input_error("lr_at: step out of range");
    const int64_t warmup = std::llround(cfg.warmup_fraction * static_cast<double>(cfg.total_updates));
    if (warmup > 0 && step <= warmup)
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(cfg.total_updates - warmup);
    return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

template <typename T>
TrainState<T> TrainState<T>::init(const ModelConfig& cfg, uint64_t seed) {
    Rng init_rng = Rng::stream(seed, "init");
    return from_params(cfg, init_params<T>(cfg, init_rng), seed);
}

template <typename T>
TrainState<T> TrainState<T>::from_params(const ModelConfig& cfg, Params<T> params, uint64_t seed) {
    TrainState<T> state;
    state.model = cfg;
    state.params = std::move(params);
    for (const auto& [name, t] : state.params.entries) {
        state.adam_m.add(name, Tensor<T>::zeros(t.shape));
        state.adam_v.add(name, Tensor<T>::zeros(t.shape));
    }
    state.rng = Rng::stream(seed, "train");
    return state;
}

template <typename T>
void save_train_state(const std::string& prefix, const TrainState<T>& state) {
    NamedTensors<T> all;
    for (const auto& [name, t] : state.params.entries) all.add(name, t);
    for (const auto& [name, t] : state.adam_m.entries) all.add("adam_m." + name, t);
    for (const auto& [name, t] : state.adam_v.entries) all.add("adam_v." + name, t);
    json meta;
    meta["step"] = state.step;
    meta["rng"] = state.rng.save_state();
    meta["model"] = json::parse(state.model.to_json());
    save_checkpoint(prefix, all, meta.dump());
}

template <typename T>
TrainState<T> load_train_state(const std::string& prefix) {
    std::string meta_text;
    NamedTensors<T> all = load_checkpoint<T>(prefix, &meta_text);
    json meta = json::parse(meta_text);

    TrainState<T> state;
    state.step = meta.at("step").get<int64_t>();
    state.model = ModelConfig::from_json(meta.at("model").dump());
    state.rng.load_state(meta.at("rng").get<std::string>());
    for (auto& [name, t] : all.entries) {
        if (name.rfind("adam_m.", 0) == 0)
            state.adam_m.add(name.substr(7), std::move(t));
        else if (name.rfind("adam_v.", 0) == 0)
            state.adam_v.add(name.substr(7), std::move(t));
        else
            state.params.add(name, std::move(t));
    }
    if (state.adam_m.entries.size() != state.params.entries.size() ||
        state.adam_v.entries.size() != state.params.entries.size())
        throw checkpoint_error("train state: optimizer moments do not match parameters");
    return state;
}

std::string StepMetrics::to_jsonl() const {
    json j{{"step", step},
           {"loss_sum", loss_sum},
           {"loss_mean", loss_mean},
           {"lr", lr},
           {"masked_count", masked_count}};
    return j.dump();
}

namespace {

template <typename T>
struct WorkerResult {
    std::vector<std::vector<T>> grads;  // aligned with param entries
    double loss_sum = 0.0;
    std::string error;
};

// Builds the loss graph for a contiguous sample range on one tape: a single
// packed forward over the range, then the masked NLL per sample.
template <typename T>
void worker_run(const ModelConfig& model, const Params<T>& shared_params,
                std::span<const PlannedSample> samples, WorkerResult<T>& out) {
    // thread-local shallow copies: shared data buffers, private tape slots
    Params<T> params;
    for (const auto& [name, t] : shared_params.entries) params.add(name, t);
    Tape<T> tape;
    for (auto& [name, t] : params.entries) tape.watch(t);

    std::vector<Sequence> inputs;
    inputs.reserve(samples.size());
    for (const PlannedSample& ps : samples) {
        Sequence masked = apply_mask(*ps.seq, ps.plan, model);
        if (ps.drop_condition) masked.text = {static_cast<int32_t>(model.null_text_id())};
        inputs.push_back(std::move(masked));
    }
    auto logits = forward_packed(model, params, inputs, &tape);

    Tensor<T> total;
    bool first = true;
    for (size_t i = 0; i < samples.size(); ++i) {
        MaskedLoss<T> loss = masked_loss_from_logits(model, logits[i], *samples[i].seq, samples[i].plan, &tape);
        total = first ? std::move(loss.sum) : nk::add(&tape, total, loss.sum);
        first = false;
    }
    out.loss_sum = static_cast<double>(total.item());
    tape.backward(total);

    out.grads.resize(params.entries.size());
    for (size_t p = 0; p < params.entries.size(); ++p) out.grads[p] = tape.grad(params.entries[p].second.gid);
}

template <typename T>
void worker_run_ar(const ModelConfig& model, const Params<T>& shared_params,
                   std::span<const Sequence> samples, WorkerResult<T>& out) {
    Params<T> params;
    for (const auto& [name, t] : shared_params.entries) params.add(name, t);
    Tape<T> tape;
    for (auto& [name, t] : params.entries) tape.watch(t);

    Tensor<T> total;
    bool first = true;
    for (const Sequence& seq : samples) {
        Tensor<T> loss = ar_pretrain_loss(model, params, seq, &tape);
        total = first ? std::move(loss) : nk::add(&tape, total, loss);
        first = false;
    }
    out.loss_sum = static_cast<double>(total.item());
    tape.backward(total);
    out.grads.resize(params.entries.size());
    for (size_t p = 0; p < params.entries.size(); ++p) out.grads[p] = tape.grad(params.entries[p].second.gid);
}

template <typename T>
StepMetrics apply_update(TrainState<T>& state, const TrainConfig& cfg, std::vector<WorkerResult<T>>& results,
                         int64_t loss_count) {
    for (const WorkerResult<T>& r : results)
        if (!r.error.empty())
            throw numeric_error("train_step: batch " + std::to_string(state.step) + ": " + r.error);

    // fixed-order reduction into worker 0's buffers
    const size_t n_params = state.params.entries.size();
    std::vector<std::vector<T>>& grads = results[0].grads;
    double loss_sum = 0.0;
    for (const WorkerResult<T>& r : results) loss_sum += r.loss_sum;
    for (size_t w = 1; w < results.size(); ++w)
        for (size_t p = 0; p < n_params; ++p) {
            std::vector<T>& dst = grads[p];
            const std::vector<T>& src = results[w].grads[p];
            for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }

    if (!std::isfinite(loss_sum))
        throw numeric_error("train_step: non-finite loss in batch " + std::to_string(state.step));

    // mean objective: scale the summed gradient by the loss-position count
    const double grad_scale = cfg.sum_objective ? 1.0 : 1.0 / static_cast<double>(loss_count);

    double clip_scale = 1.0;
    if (cfg.grad_clip > 0.0) {
        double norm_sq = 0.0;
        for (size_t p = 0; p < n_params; ++p)
            for (const T& g : grads[p]) {
                const double v = static_cast<double>(g) * grad_scale;
                norm_sq += v * v;
            }
        const double norm = std::sqrt(norm_sq);
        if (norm > cfg.grad_clip) clip_scale = cfg.grad_clip / norm;
    }

    const double lr = lr_at(state.step, cfg);
    adamw_apply(state.params, state.adam_m, state.adam_v, std::span<const std::vector<T>>(grads),
                grad_scale * clip_scale, lr, cfg, state.step + 1);

    StepMetrics metrics;
    metrics.step = state.step;
    metrics.loss_sum = loss_sum;
    metrics.loss_mean = loss_sum / static_cast<double>(loss_count);
    metrics.lr = lr;
    metrics.masked_count = loss_count;
    state.step += 1;
    return metrics;
}

int resolve_threads(const TrainConfig& cfg) { return cfg.threads > 0 ? cfg.threads : worker_threads(); }

}  // namespace

template <typename T>
void adamw_apply(Params<T>& params, Params<T>& adam_m, Params<T>& adam_v,
                 std::span<const std::vector<T>> grads, double grad_scale, double lr,
                 const TrainConfig& cfg, int64_t t_step) {
    if (grads.size() != params.entries.size()) throw input_error("adamw_apply: gradient count mismatch");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_step));

    for (size_t p = 0; p < params.entries.size(); ++p) {
        T* theta = params.entries[p].second.mut_ptr();
        T* m = adam_m.entries[p].second.mut_ptr();
        T* v = adam_v.entries[p].second.mut_ptr();
        const std::vector<T>& g = grads[p];
        for (size_t i = 0; i < g.size(); ++i) {
            const double gi = static_cast<double>(g[i]) * grad_scale;
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps) +
                                  cfg.weight_decay * static_cast<double>(theta[i]);
            theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * update);
        }
    }
}

namespace {

// contiguous balanced partition of [0, n)
std::vector<std::pair<size_t, size_t>> partition_ranges(size_t n, int threads) {
    const size_t workers = std::max<size_t>(1, std::min<size_t>(static_cast<size_t>(threads), n));
    std::vector<std::pair<size_t, size_t>> ranges;
    size_t begin = 0;
    for (size_t w = 0; w < workers; ++w) {
        const size_t len = n / workers + (w < n % workers ? 1 : 0);
        ranges.emplace_back(begin, begin + len);
        begin += len;
    }
    return ranges;
}

}  // namespace

template <typename T>
StepMetrics train_step_planned(TrainState<T>& state, const TrainConfig& cfg,
                               std::span<const PlannedSample> batch) {
    cfg.validate();
    if (batch.empty()) throw input_error("train_step: empty batch");
    int64_t loss_count = 0;
    for (const PlannedSample& ps : batch) {
        if (ps.plan.loss_positions.empty()) throw input_error("train_step: plan without loss positions");
        loss_count += static_cast<int64_t>(ps.plan.loss_positions.size());
    }

    const auto ranges = partition_ranges(batch.size(), resolve_threads(cfg));
    std::vector<WorkerResult<T>> results(ranges.size());
    if (ranges.size() == 1) {
        worker_run(state.model, state.params, batch, results[0]);
    } else {
        std::vector<std::thread> pool;
        for (size_t w = 0; w < ranges.size(); ++w) {
            pool.emplace_back([&, w] {
                try {
                    worker_run(state.model, state.params,
                               batch.subspan(ranges[w].first, ranges[w].second - ranges[w].first), results[w]);
                } catch (const std::exception& e) {
                    results[w].error = e.what();
                }
            });
        }
        for (auto& th : pool) th.join();
    }
    return apply_update(state, cfg, results, loss_count);
}

template <typename T>
StepMetrics train_step(TrainState<T>& state, const TrainConfig& cfg, const StrategySpec& strategy,
                       std::span<const Sequence> batch) {
    cfg.validate();
    if (batch.empty()) throw input_error("train_step: empty batch");

    std::vector<PlannedSample> planned(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        // one child stream per sample; the dropout draw is always consumed so
        // streams stay aligned across dropout settings
        Rng sample_rng(splitmix64(state.rng.next_u64()));
        planned[i].seq = &batch[i];
        planned[i].drop_condition = sample_rng.uniform01() < cfg.cond_dropout_p;
        planned[i].plan = plan_masking(strategy, batch[i].grid.frames, batch[i].grid.codebooks,
                                       batch[i].prompt_len, sample_rng);
    }
    return train_step_planned(state, cfg, planned);
}

template <typename T>
StepMetrics ar_train_step(TrainState<T>& state, const TrainConfig& cfg, std::span<const Sequence> batch) {
    cfg.validate();
    if (batch.empty()) throw input_error("ar_train_step: empty batch");
    int64_t loss_count = 0;
    for (const Sequence& seq : batch) {
        if (seq.grid.frames < 2) throw input_error("ar_train_step: need at least two frames");
        loss_count += (seq.grid.frames - 1) * seq.grid.codebooks;
    }

    const auto ranges = partition_ranges(batch.size(), resolve_threads(cfg));
    std::vector<WorkerResult<T>> results(ranges.size());
    if (ranges.size() == 1) {
        worker_run_ar(state.model, state.params, batch, results[0]);
    } else {
        std::vector<std::thread> pool;
        for (size_t w = 0; w < ranges.size(); ++w) {
            pool.emplace_back([&, w] {
                try {
                    worker_run_ar(state.model, state.params,
                                  batch.subspan(ranges[w].first, ranges[w].second - ranges[w].first),
                                  results[w]);
                } catch (const std::exception& e) {
                    results[w].error = e.what();
                }
            });
        }
        for (auto& th : pool) th.join();
    }
    return apply_update(state, cfg, results, loss_count);
}

template <typename T>
void run_training(TrainState<T>& state, const TrainConfig& cfg, const StrategySpec& strategy,
                  std::span<const Sequence> sequences, const TrainHooks<T>& hooks, Objective objective) {
    cfg.validate();
    if (sequences.empty()) throw input_error("run_training: empty corpus");

    std::vector<int64_t> sizes;
    sizes.reserve(sequences.size());
    for (const Sequence& s : sequences) sizes.push_back(s.total_tokens());

    int64_t epoch = 0;
    while (state.step < cfg.total_updates) {
        // seeded shuffle per epoch, then token-budget packing
        std::vector<int64_t> order(sequences.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng = Rng::stream(cfg.seed, "epoch." + std::to_string(epoch));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

        std::vector<int64_t> shuffled_sizes(order.size());
        for (size_t i = 0; i < order.size(); ++i) shuffled_sizes[i] = sizes[static_cast<size_t>(order[i])];
        auto batches = pack(shuffled_sizes, cfg.batch_tokens);

        for (const PackedBatch& pb : batches) {
            if (state.step >= cfg.total_updates) break;
            std::vector<Sequence> batch;
            batch.reserve(pb.sequence_indices.size());
            for (int64_t local : pb.sequence_indices)
                batch.push_back(sequences[static_cast<size_t>(order[static_cast<size_t>(local)])]);

            StepMetrics metrics = objective == Objective::masked
                                      ? train_step(state, cfg, strategy, batch)
                                      : ar_train_step(state, cfg, batch);
            if (hooks.on_metrics) hooks.on_metrics(metrics);
            if (hooks.on_checkpoint && cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0)
                hooks.on_checkpoint(state);
        }
        ++epoch;
    }
    if (hooks.on_checkpoint) hooks.on_checkpoint(state);
}

#define MASKGRID_INSTANTIATE_TRAINER(T)                                                                     \
    template struct TrainState<T>;                                                                          \
    template void adamw_apply<T>(Params<T>&, Params<T>&, Params<T>&, std::span<const std::vector<T>>,       \
                                 double, double, const TrainConfig&, int64_t);                              \
    template void save_train_state<T>(const std::string&, const TrainState<T>&);                            \
    template TrainState<T> load_train_state<T>(const std::string&);                                         \
    template StepMetrics train_step<T>(TrainState<T>&, const TrainConfig&, const StrategySpec&,             \
                                       std::span<const Sequence>);                                          \
    template StepMetrics train_step_planned<T>(TrainState<T>&, const TrainConfig&,                          \
                                               std::span<const PlannedSample>);                             \
    template StepMetrics ar_train_step<T>(TrainState<T>&, const TrainConfig&, std::span<const Sequence>);   \
    template void run_training<T>(TrainState<T>&, const TrainConfig&, const StrategySpec&,                  \
                                  std::span<const Sequence>, const TrainHooks<T>&, Objective);

MASKGRID_INSTANTIATE_TRAINER(float)
MASKGRID_INSTANTIATE_TRAINER(double)

#undef MASKGRID_INSTANTIATE_TRAINER

}  // namespace maskgrid
