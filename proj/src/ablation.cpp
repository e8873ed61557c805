#include "maskgrid/ablation.hpp"

#include <sstream>

#include <json.hpp>

namespace maskgrid {

using nlohmann::json;

std::string to_string(InitScheme s) { return s == InitScheme::random ? "random" : "ar-warmstart"; }

InitScheme init_scheme_from_string(const std::string& s) {
    if (s == "random") return InitScheme::random;
    if (s == "ar-warmstart" || s == "ar_warmstart") return InitScheme::ar_warmstart;
    throw input_error("unknown init scheme '" + s + "'");
}

std::string AblationRow::to_jsonl() const {
    json j{{"cell", cell},           {"seed", seed}, {"update", update},
           {"heldout_nll", heldout_nll}, {"wer", wer},   {"sim", sim}};
    return j.dump();
}

std::string ablation_jsonl(std::span<const AblationRow> rows) {
    std::ostringstream os;
    for (const AblationRow& r : rows) os << r.to_jsonl() << "\n";
    return os.str();
}

std::vector<AblationRow> run_ablation(const AblationConfig& cfg, std::span<const AblationCell> cells,
                                      const ToySpec& spec, std::span<const ToySample> train_samples,
                                      std::span<const ToySample> eval_samples) {
    if (cells.empty()) throw input_error("run_ablation: empty cell matrix");
    if (cfg.seeds.empty()) throw input_error("run_ablation: no seeds");
    if (train_samples.empty() || eval_samples.empty()) throw input_error("run_ablation: empty corpus");

    std::vector<Sequence> train_seqs;
    train_seqs.reserve(train_samples.size());
    for (const ToySample& s : train_samples) train_seqs.push_back(s.seq);

    std::span<const ToySample> eval_slice =
        eval_samples.subspan(0, std::min<size_t>(eval_samples.size(), static_cast<size_t>(cfg.eval_samples)));

    std::vector<AblationRow> rows;
    for (const AblationCell& cell : cells) {
        for (uint64_t seed : cfg.seeds) {
            TrainState<float> state = [&] {
                if (cell.init == InitScheme::random) return TrainState<float>::init(cfg.model, seed);
                // causal pretraining on the same corpus, then weight transfer
                ModelConfig causal = cfg.model;
                causal.attention_mode = AttentionMode::causal;
                TrainState<float> ar_state = TrainState<float>::init(causal, seed);
                TrainConfig ar_cfg = cfg.ar_train;
                ar_cfg.seed = seed;
                ar_cfg.total_updates = cell.ar_updates;
                run_training(ar_state, ar_cfg, cell.strategy, train_seqs, {}, Objective::ar_next_frame);
                Params<float> transferred = transfer_weights(causal, ar_state.params, cfg.model);
                return TrainState<float>::from_params(cfg.model, std::move(transferred), seed);
            }();

            auto evaluate = [&](int64_t update) {
                AblationRow row;
                row.cell = cell.name;
                row.seed = seed;
                row.update = update;
                row.heldout_nll = heldout_masked_nll(cfg.model, state.params, eval_slice, cfg.eval_seed);
                DecodeEval de = decode_metrics(cfg.model, state.params, spec, eval_slice, cfg.sampler);
                row.wer = de.wer;
                row.sim = de.sim;
                rows.push_back(std::move(row));
            };

            TrainConfig train_cfg = cfg.train;
            train_cfg.seed = seed;
            TrainHooks<float> hooks;
            hooks.on_metrics = [&](const StepMetrics& m) {
                if (cfg.eval_every > 0 && m.step + 1 < train_cfg.total_updates &&
                    (m.step + 1) % cfg.eval_every == 0)
                    evaluate(m.step + 1);
            };
            run_training(state, train_cfg, cell.strategy, train_seqs, hooks);
            evaluate(state.step);
        }
    }
    return rows;
}

}  // namespace maskgrid
