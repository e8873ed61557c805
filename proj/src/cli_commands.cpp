#include "maskgrid/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "maskgrid/ablation.hpp"
#include "maskgrid/datakit.hpp"
#include "maskgrid/eval.hpp"
#include "maskgrid/sampler.hpp"
#include "maskgrid/toylang.hpp"
#include "maskgrid/trainer.hpp"

namespace maskgrid::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot write " + path);
    f << content;
    if (!f) throw io_error("short write to " + path);
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// Tracks inputs/outputs of one command and writes the reproducibility
// summary; artifact bytes carry no timestamps so reruns are byte-identical.
struct RunContext {
    std::string command;
    fs::path out_dir;
    uint64_t seed = 0;
    json inputs = json::object();
    json artifacts = json::object();
    std::string resolved_config;

    explicit RunContext(std::string cmd, const std::string& out, uint64_t seed_value)
        : command(std::move(cmd)), out_dir(out), seed(seed_value) {
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (ec || !fs::is_directory(out_dir)) throw io_error("cannot create output dir " + out);
    }

    void note_input(const std::string& path) { inputs[path] = content_hash(path); }

    void emit(const std::string& name, const std::string& content) {
        const std::string path = (out_dir / name).string();
        write_file(path, content);
        artifacts[name] = content_hash(path);
    }

    void note_artifact(const std::string& name) {
        const std::string path = (out_dir / name).string();
        if (!fs::exists(path)) throw io_error("artifact missing: " + path);
        artifacts[name] = content_hash(path);
    }

    void finish() {
        // validate every artifact is present and non-empty before summarizing
        for (const auto& [name, hash] : artifacts.items()) {
            const fs::path p = out_dir / name;
            if (!fs::exists(p) || fs::file_size(p) == 0) throw io_error("artifact failed validation: " + name);
        }
        json summary;
        summary["command"] = command;
        summary["seed"] = seed;
        summary["config_hash"] = hash_hex(fnv1a64(resolved_config));
        summary["inputs"] = inputs;
        summary["artifacts"] = artifacts;
        write_file((out_dir / (command + "_summary.json")).string(), summary.dump(2) + "\n");
    }
};

// defaults < config-file section < command-line flags; unknown keys rejected
json merged_section(const json& defaults, const std::string& config_path, const std::string& section) {
    json out = defaults;
    if (config_path.empty()) return out;
    json file = json::parse(read_file(config_path));
    if (!file.contains(section)) return out;
    for (const auto& [key, value] : file.at(section).items()) {
        if (!out.contains(key)) throw input_error("config: unknown key '" + key + "' in section " + section);
        out[key] = value;
    }
    return out;
}

// Rejects unknown sections and keys anywhere in the file before any command
// starts doing work, whether or not the command consumes that section.
void validate_config_file(const std::string& config_path) {
    if (config_path.empty()) return;
    json file = json::parse(read_file(config_path));
    json schemas;
    schemas["model"] = json::parse(ModelConfig{}.to_json());
    schemas["train"] = json::parse(TrainConfig{}.to_json());
    schemas["sampler"] = json::parse(SamplerConfig{}.to_json());
    schemas["toy"] = json::parse(ToySpec{}.to_json());
    for (const auto& [section, body] : file.items()) {
        if (!schemas.contains(section)) throw input_error("config: unknown section '" + section + "'");
        for (const auto& [key, value] : body.items())
            if (!schemas.at(section).contains(key))
                throw input_error("config: unknown key '" + key + "' in section " + section);
    }
}

struct CommonFlags {
    std::string config_path;
    uint64_t seed = 0;
    std::string out_dir = "out";
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "JSON config file with model/train/sampler/toy sections");
    cmd->add_option("--seed", flags.seed, "root seed; per-component streams derive from it");
    cmd->add_option("--out", flags.out_dir, "output directory");
}

ModelConfig resolve_model(const CommonFlags& flags) {
    ModelConfig defaults;
    ModelConfig cfg = ModelConfig::from_json(merged_section(json::parse(defaults.to_json()), flags.config_path, "model").dump());
    return cfg;
}

TrainConfig resolve_train(const CommonFlags& flags) {
    TrainConfig defaults;
    return TrainConfig::from_json(merged_section(json::parse(defaults.to_json()), flags.config_path, "train").dump());
}

SamplerConfig resolve_sampler(const CommonFlags& flags) {
    SamplerConfig defaults;
    return SamplerConfig::from_json(merged_section(json::parse(defaults.to_json()), flags.config_path, "sampler").dump());
}

ToySpec resolve_toy_proto(const CommonFlags& flags) {
    ToySpec defaults;
    json base = json::parse(defaults.to_json());
    base.erase("base_table");
    base.erase("offsets");
    json merged = merged_section(base, flags.config_path, "toy");
    merged["base_table"] = json::array();
    merged["offsets"] = json::array();
    return ToySpec::from_json(merged.dump());
}

std::string decoded_jsonl(const std::vector<int64_t>& indices, const std::vector<TokenGrid>& grids,
                          const std::vector<int64_t>& prompt_lens) {
    std::ostringstream os;
    for (size_t i = 0; i < grids.size(); ++i) {
        json row;
        row["index"] = indices[i];
        row["prompt_len"] = prompt_lens[i];
        json grid = json::array();
        for (int64_t t = 0; t < grids[i].frames; ++t) {
            json frame = json::array();
            for (int32_t c = 0; c < grids[i].codebooks; ++c) frame.push_back(grids[i].at(t, c));
            grid.push_back(std::move(frame));
        }
        row["grid"] = std::move(grid);
        os << row.dump() << "\n";
    }
    return os.str();
}

TokenGrid grid_from_json(const json& rows) {
    const int64_t frames = static_cast<int64_t>(rows.size());
    const int32_t codebooks = frames > 0 ? static_cast<int32_t>(rows[0].size()) : 0;
    TokenGrid grid(frames, codebooks);
    for (int64_t t = 0; t < frames; ++t)
        for (int32_t c = 0; c < codebooks; ++c)
            grid.at(t, c) = rows[static_cast<size_t>(t)][static_cast<size_t>(c)].get<int32_t>();
    return grid;
}

// Loads a corpus next to its toy spec; the spec file sits beside the corpus
// unless given explicitly.
std::pair<ToySpec, std::vector<ToySample>> load_corpus_with_spec(const std::string& corpus_path,
                                                                 std::string spec_path) {
    if (spec_path.empty()) spec_path = (fs::path(corpus_path).parent_path() / "toyspec.json").string();
    return {ToySpec::load(spec_path), load_corpus(corpus_path)};
}

void check_model_fits_toy(const ModelConfig& model, const ToySpec& spec) {
    if (model.codebooks != spec.codebooks || model.codebook_vocab != spec.codebook_vocab)
        throw input_error("model grid dimensions do not match the toy spec");
    if (model.text_vocab < spec.min_text_vocab())
        throw input_error("model text vocabulary too small for the toy alphabet plus instruct tokens");
}

int cmd_gen(const CommonFlags& flags, int64_t count, double corrupt) {
    validate_config_file(flags.config_path);
    RunContext ctx("gen", flags.out_dir, flags.seed);
    ToySpec spec = ToySpec::make(resolve_toy_proto(flags), flags.seed);
    ctx.resolved_config = spec.to_json();

    Rng rng = Rng::stream(flags.seed, "corpus");
    auto samples = generate(spec, rng, count, corrupt);

    ctx.emit("toyspec.json", spec.to_json() + "\n");
    save_corpus((ctx.out_dir / "corpus.jsonl").string(), samples);
    ctx.note_artifact("corpus.jsonl");
    ctx.emit("gen_config.json", ctx.resolved_config + "\n");

    int64_t denoise = 0, frames = 0;
    for (const auto& s : samples) {
        denoise += s.denoise ? 1 : 0;
        frames += s.seq.grid.frames;
    }
    std::cout << "samples=" << samples.size() << " denoise_tagged=" << denoise << " total_frames=" << frames
              << "\n";
    ctx.finish();
    return 0;
}

int cmd_plan(const CommonFlags& flags, const std::string& manifest_path, double beta) {
    validate_config_file(flags.config_path);
    RunContext ctx("plan-resample", flags.out_dir, flags.seed);
    ctx.note_input(manifest_path);
    LanguageManifest manifest = read_manifest_csv(manifest_path);
    ResamplePlan plan = plan_resample(manifest, beta);
    ctx.resolved_config = json{{"beta", beta}, {"manifest", manifest_path}}.dump();
    ctx.emit("resample_plan.json", plan.to_json() + "\n");
    ctx.emit("plan_config.json", ctx.resolved_config + "\n");
    for (const auto& e : plan.entries)
        std::cout << e.language << ": r=" << e.repetition << " effective_hours=" << e.effective_hours << "\n";
    ctx.finish();
    return 0;
}

struct TrainFlags {
    std::string corpus;
    std::string spec_path;
    std::string init = "random";
    int64_t ar_updates = 0;
    std::optional<int64_t> updates;
    std::optional<double> lr;
    std::optional<int64_t> batch_tokens;
    std::optional<std::string> strategy;
    std::optional<std::string> precision;
    std::optional<int64_t> checkpoint_interval;
    std::optional<int> threads;
    std::optional<double> cond_dropout;
};

template <typename T>
int train_typed(RunContext& ctx, const ModelConfig& model, TrainConfig train, const TrainFlags& tf,
                const std::vector<Sequence>& seqs) {
    TrainState<T> state = [&] {
        if (init_scheme_from_string(tf.init) == InitScheme::random)
            return TrainState<T>::init(model, train.seed);
        ModelConfig causal = model;
        causal.attention_mode = AttentionMode::causal;
        TrainState<T> ar_state = TrainState<T>::init(causal, train.seed);
        TrainConfig ar_cfg = train;
        ar_cfg.total_updates = tf.ar_updates > 0 ? tf.ar_updates : std::max<int64_t>(1, train.total_updates / 2);
        ar_cfg.checkpoint_interval = 0;
        run_training(ar_state, ar_cfg, StrategySpec::preset(train.strategy), seqs, {},
                     Objective::ar_next_frame);
        return TrainState<T>::from_params(model, transfer_weights(causal, ar_state.params, model), train.seed);
    }();

    std::ostringstream metrics;
    TrainHooks<T> hooks;
    hooks.on_metrics = [&](const StepMetrics& m) { metrics << m.to_jsonl() << "\n"; };
    hooks.on_checkpoint = [&](const TrainState<T>& s) {
        if (s.step < train.total_updates)
            save_train_state((ctx.out_dir / ("checkpoint_step" + std::to_string(s.step))).string(), s);
    };
    run_training(state, train, StrategySpec::preset(train.strategy), seqs, hooks);

    save_train_state((ctx.out_dir / "checkpoint").string(), state);
    ctx.note_artifact("checkpoint.json");
    ctx.note_artifact("checkpoint.bin");
    ctx.emit("model_config.json", model.to_json() + "\n");
    ctx.emit("metrics.jsonl", metrics.str());
    return 0;
}

int cmd_train(const CommonFlags& flags, const TrainFlags& tf) {
    validate_config_file(flags.config_path);
    RunContext ctx("train", flags.out_dir, flags.seed);
    auto [spec, samples] = load_corpus_with_spec(tf.corpus, tf.spec_path);
    ctx.note_input(tf.corpus);

    ModelConfig model = resolve_model(flags);
    check_model_fits_toy(model, spec);
    TrainConfig train = resolve_train(flags);
    train.seed = flags.seed;
    if (tf.updates) train.total_updates = *tf.updates;
    if (tf.lr) train.peak_lr = *tf.lr;
    if (tf.batch_tokens) train.batch_tokens = *tf.batch_tokens;
    if (tf.strategy) train.strategy = mask_strategy_from_string(*tf.strategy);
    if (tf.precision) train.precision = precision_from_string(*tf.precision);
    if (tf.checkpoint_interval) train.checkpoint_interval = *tf.checkpoint_interval;
    if (tf.threads) train.threads = *tf.threads;
    if (tf.cond_dropout) train.cond_dropout_p = *tf.cond_dropout;
    train.validate();

    json resolved;
    resolved["model"] = json::parse(model.to_json());
    resolved["train"] = json::parse(train.to_json());
    resolved["init"] = tf.init;
    resolved["ar_updates"] = tf.ar_updates;
    ctx.resolved_config = resolved.dump(2);
    ctx.emit("train_config.json", ctx.resolved_config + "\n");

    std::vector<Sequence> seqs;
    seqs.reserve(samples.size());
    for (const ToySample& s : samples) seqs.push_back(s.seq);

    const int rc = train.precision == Precision::f32 ? train_typed<float>(ctx, model, train, tf, seqs)
                                                     : train_typed<double>(ctx, model, train, tf, seqs);
    if (rc == 0) ctx.finish();
    return rc;
}

struct SamplerFlags {
    std::optional<int32_t> steps;
    std::optional<double> tau;
    std::optional<double> temperature;
    std::optional<double> guidance;
    std::optional<double> layer_penalty;
};

void add_sampler_flags(CLI::App* cmd, SamplerFlags& sf) {
    cmd->add_option("--steps", sf.steps, "unmasking steps");
    cmd->add_option("--tau", sf.tau, "schedule shift parameter");
    cmd->add_option("--temperature", sf.temperature, "confidence sampling temperature");
    cmd->add_option("--guidance", sf.guidance, "classifier-free guidance scale");
    cmd->add_option("--layer-penalty", sf.layer_penalty, "per-codebook confidence offset");
}

SamplerConfig resolve_sampler_flags(const CommonFlags& flags, const SamplerFlags& sf) {
    SamplerConfig cfg = resolve_sampler(flags);
    cfg.seed = flags.seed;
    if (sf.steps) cfg.steps = *sf.steps;
    if (sf.tau) cfg.tau = *sf.tau;
    if (sf.temperature) cfg.temperature = *sf.temperature;
    if (sf.guidance) cfg.guidance_scale = *sf.guidance;
    if (sf.layer_penalty) cfg.layer_penalty = *sf.layer_penalty;
    cfg.validate();
    return cfg;
}

// Prepares decode jobs for the first `count` corpus samples.
struct DecodeSet {
    std::vector<int64_t> indices;
    std::vector<std::vector<int32_t>> texts;
    std::vector<TokenGrid> prompts;
    std::vector<int64_t> frames;
    std::vector<int64_t> prompt_lens;
};

DecodeSet build_decode_set(const ToySpec& spec, const std::vector<ToySample>& samples, int64_t count,
                           DenoiseTokenMode mode) {
    DecodeSet set;
    const int64_t n = std::min<int64_t>(count, static_cast<int64_t>(samples.size()));
    for (int64_t i = 0; i < n; ++i) {
        const ToySample& s = samples[static_cast<size_t>(i)];
        const auto symbols = symbols_of_text(spec, s.seq.text);
        const int64_t prompt_syms = s.seq.prompt_len / spec.frames_per_symbol;

        std::vector<int32_t> text = symbols;
        const bool token = mode == DenoiseTokenMode::force || (mode == DenoiseTokenMode::as_is && s.denoise);
        if (token) text.insert(text.begin(), spec.denoise_token());

        set.indices.push_back(i);
        set.texts.push_back(std::move(text));
        TokenGrid prompt(s.seq.prompt_len, spec.codebooks);
        for (int64_t t = 0; t < s.seq.prompt_len; ++t)
            for (int32_t c = 0; c < spec.codebooks; ++c) prompt.at(t, c) = s.seq.grid.at(t, c);
        set.prompts.push_back(std::move(prompt));
        set.frames.push_back(estimate_duration_tokens(prompt_syms,
                                                      static_cast<int64_t>(symbols.size()) - prompt_syms,
                                                      static_cast<double>(s.seq.prompt_len), 1.0)
                                 .frames);
        set.prompt_lens.push_back(s.seq.prompt_len);
    }
    return set;
}

DenoiseTokenMode token_mode_from_string(const std::string& s) {
    if (s == "as-is" || s == "as_is") return DenoiseTokenMode::as_is;
    if (s == "strip") return DenoiseTokenMode::strip;
    if (s == "force") return DenoiseTokenMode::force;
    throw input_error("unknown denoise-token mode '" + s + "'");
}

int cmd_decode(const CommonFlags& flags, const std::string& checkpoint, const std::string& corpus,
               const std::string& spec_path, int64_t count, const SamplerFlags& sf,
               const std::string& token_mode) {
    validate_config_file(flags.config_path);
    RunContext ctx("decode", flags.out_dir, flags.seed);
    if (!fs::exists(checkpoint + ".json")) throw io_error("missing checkpoint " + checkpoint + ".json");
    auto [spec, samples] = load_corpus_with_spec(corpus, spec_path);
    ctx.note_input(corpus);
    ctx.note_input(checkpoint + ".json");
    ctx.note_input(checkpoint + ".bin");

    SamplerConfig scfg = resolve_sampler_flags(flags, sf);
    json resolved;
    resolved["sampler"] = json::parse(scfg.to_json());
    resolved["count"] = count;
    ctx.resolved_config = resolved.dump(2);
    ctx.emit("decode_config.json", ctx.resolved_config + "\n");

    DecodeSet set = build_decode_set(spec, samples, count, token_mode_from_string(token_mode));

    std::vector<TokenGrid> grids;
    if (checkpoint_dtype(checkpoint) == "f32") {
        TrainState<float> state = load_train_state<float>(checkpoint);
        check_model_fits_toy(state.model, spec);
        grids = decode_batch(state.model, state.params, set.texts, set.prompts, set.frames, scfg);
    } else {
        TrainState<double> state = load_train_state<double>(checkpoint);
        check_model_fits_toy(state.model, spec);
        grids = decode_batch(state.model, state.params, set.texts, set.prompts, set.frames, scfg);
    }

    ctx.emit("decoded.jsonl", decoded_jsonl(set.indices, grids, set.prompt_lens));
    ctx.finish();
    return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint, const std::string& corpus,
             const std::string& spec_path, const std::string& decoded_path, int64_t count,
             const SamplerFlags& sf, const std::string& token_mode) {
    validate_config_file(flags.config_path);
    RunContext ctx("eval", flags.out_dir, flags.seed);
    auto [spec, samples] = load_corpus_with_spec(corpus, spec_path);
    ctx.note_input(corpus);

    struct Scored {
        int64_t index;
        double wer;
        double sim;
    };
    std::vector<Scored> scored;

    auto score_grid = [&](int64_t index, const TokenGrid& full_grid, int64_t prompt_len) {
        const ToySample& s = samples[static_cast<size_t>(index)];
        const auto symbols = symbols_of_text(spec, s.seq.text);
        const int64_t prompt_syms = prompt_len / spec.frames_per_symbol;
        const std::vector<int32_t> target_symbols(symbols.begin() + prompt_syms, symbols.end());
        const std::vector<int32_t> prompt_symbols(symbols.begin(), symbols.begin() + prompt_syms);

        TokenGrid target(full_grid.frames - prompt_len, full_grid.codebooks);
        for (int64_t t = 0; t < target.frames; ++t)
            for (int32_t c = 0; c < target.codebooks; ++c) target.at(t, c) = full_grid.at(prompt_len + t, c);
        const TokenGrid clean_prompt = transduce(spec, prompt_symbols, s.speaker);
        scored.push_back({index, toy_wer(spec, target, target_symbols), toy_sim(spec, target, clean_prompt)});
    };

    json resolved;
    resolved["count"] = count;
    resolved["decoded"] = decoded_path;

    if (!decoded_path.empty()) {
        // score precomputed grids
        ctx.note_input(decoded_path);
        std::ifstream f(decoded_path);
        if (!f) throw io_error("cannot open " + decoded_path);
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            json row = json::parse(line);
            score_grid(row.at("index").get<int64_t>(), grid_from_json(row.at("grid")),
                       row.at("prompt_len").get<int64_t>());
        }
    } else {
        if (!fs::exists(checkpoint + ".json")) throw io_error("missing checkpoint " + checkpoint + ".json");
        ctx.note_input(checkpoint + ".json");
        ctx.note_input(checkpoint + ".bin");
        SamplerConfig scfg = resolve_sampler_flags(flags, sf);
        resolved["sampler"] = json::parse(scfg.to_json());
        DecodeSet set = build_decode_set(spec, samples, count, token_mode_from_string(token_mode));
        std::vector<TokenGrid> grids;
        if (checkpoint_dtype(checkpoint) == "f32") {
            TrainState<float> state = load_train_state<float>(checkpoint);
            grids = decode_batch(state.model, state.params, set.texts, set.prompts, set.frames, scfg);
        } else {
            TrainState<double> state = load_train_state<double>(checkpoint);
            grids = decode_batch(state.model, state.params, set.texts, set.prompts, set.frames, scfg);
        }
        for (size_t i = 0; i < grids.size(); ++i) score_grid(set.indices[i], grids[i], set.prompt_lens[i]);
    }
    ctx.resolved_config = resolved.dump(2);
    ctx.emit("eval_config.json", ctx.resolved_config + "\n");

    if (scored.empty()) throw input_error("eval: nothing to score");
    std::ostringstream rows;
    double wer = 0, sim = 0;
    for (const Scored& s : scored) {
        rows << json{{"index", s.index}, {"wer", s.wer}, {"sim", s.sim}}.dump() << "\n";
        wer += s.wer;
        sim += s.sim;
    }
    wer /= static_cast<double>(scored.size());
    sim /= static_cast<double>(scored.size());
    ctx.emit("eval.jsonl", rows.str());
    ctx.emit("eval_metrics.json",
             json{{"samples", scored.size()}, {"toy_wer", wer}, {"toy_sim", sim}}.dump(2) + "\n");
    std::cout << "toy_wer=" << wer << " toy_sim=" << sim << " samples=" << scored.size() << "\n";
    ctx.finish();
    return 0;
}

int cmd_bench(const CommonFlags& flags, const std::string& checkpoint, std::vector<int32_t> batches,
              std::vector<int32_t> steps, int64_t target_frames, int32_t runs, const SamplerFlags& sf) {
    validate_config_file(flags.config_path);
    RunContext ctx("bench", flags.out_dir, flags.seed);
    if (!fs::exists(checkpoint + ".json")) throw io_error("missing checkpoint " + checkpoint + ".json");
    ctx.note_input(checkpoint + ".json");
    ctx.note_input(checkpoint + ".bin");
    if (batches.empty()) batches = {1, 2, 4, 8};
    if (steps.empty()) steps = {16, 32};

    SamplerConfig scfg = resolve_sampler_flags(flags, sf);
    json resolved;
    resolved["sampler"] = json::parse(scfg.to_json());
    resolved["batches"] = batches;
    resolved["steps"] = steps;
    resolved["target_frames"] = target_frames;
    resolved["runs"] = runs;
    ctx.resolved_config = resolved.dump(2);
    ctx.emit("bench_config.json", ctx.resolved_config + "\n");

    if (checkpoint_dtype(checkpoint) != "f32") throw input_error("bench expects an f32 checkpoint");
    TrainState<float> state = load_train_state<float>(checkpoint);

    // synthetic prompt/text sized like the training data
    std::vector<int32_t> text;
    for (int i = 0; i < 8; ++i) text.push_back(i % (state.model.text_vocab - 2));
    TokenGrid prompt(4, state.model.codebooks);
    for (auto& code : prompt.codes) code = 1;

    auto rows = bench_decode(state.model, state.params, text, prompt, target_frames, batches, steps, scfg, runs);
    ctx.emit("bench.csv", bench_csv(rows));
    std::cout << bench_csv(rows);
    ctx.finish();
    return 0;
}

int cmd_ablate(const CommonFlags& flags, const std::string& corpus, const std::string& spec_path,
               std::vector<std::string> cells, std::vector<uint64_t> seeds, int64_t updates,
               int64_t ar_updates, int64_t eval_every, int64_t eval_samples, const SamplerFlags& sf) {
    RunContext ctx("ablate", flags.out_dir, flags.seed);
    auto [spec, samples] = load_corpus_with_spec(corpus, spec_path);
    ctx.note_input(corpus);

    AblationConfig acfg;
    acfg.model = resolve_model(flags);
    check_model_fits_toy(acfg.model, spec);
    acfg.train = resolve_train(flags);
    if (updates > 0) acfg.train.total_updates = updates;
    acfg.ar_train = acfg.train;
    acfg.seeds = seeds.empty() ? std::vector<uint64_t>{1, 2, 3} : seeds;
    acfg.eval_every = eval_every;
    acfg.eval_samples = eval_samples;
    acfg.sampler = resolve_sampler_flags(flags, sf);
    acfg.eval_seed = splitmix64(flags.seed ^ fnv1a64("ablation-eval"));

    std::vector<AblationCell> matrix;
    if (cells.empty()) cells = {"full", "soundstorm", "maskgct"};
    for (const std::string& name : cells) {
        AblationCell cell;
        cell.name = name;
        if (name == "ar-warmstart") {
            cell.strategy = StrategySpec::preset(MaskStrategy::full_random);
            cell.init = InitScheme::ar_warmstart;
            cell.ar_updates = ar_updates > 0 ? ar_updates : std::max<int64_t>(1, acfg.train.total_updates / 2);
        } else if (name == "random-init") {
            cell.strategy = StrategySpec::preset(MaskStrategy::full_random);
            cell.init = InitScheme::random;
        } else {
            cell.strategy = StrategySpec::preset(mask_strategy_from_string(name));
        }
        matrix.push_back(std::move(cell));
    }

    json resolved;
    resolved["model"] = json::parse(acfg.model.to_json());
    resolved["train"] = json::parse(acfg.train.to_json());
    resolved["cells"] = cells;
    resolved["seeds"] = acfg.seeds;
    ctx.resolved_config = resolved.dump(2);
    ctx.emit("ablate_config.json", ctx.resolved_config + "\n");

    // held-out split: last 10% of the corpus
    const size_t split = samples.size() - std::max<size_t>(1, samples.size() / 10);
    std::vector<ToySample> train_split(samples.begin(), samples.begin() + static_cast<int64_t>(split));
    std::vector<ToySample> eval_split(samples.begin() + static_cast<int64_t>(split), samples.end());

    auto rows = run_ablation(acfg, matrix, spec, train_split, eval_split);
    ctx.emit("ablation.jsonl", ablation_jsonl(rows));
    for (const auto& r : rows)
        std::cout << r.cell << " seed=" << r.seed << " update=" << r.update << " nll=" << r.heldout_nll
                  << " wer=" << r.wer << " sim=" << r.sim << "\n";
    ctx.finish();
    return 0;
}

}  // namespace

std::string content_hash(const std::string& path) {
    return hash_hex(fnv1a64(read_file(path)));
}

int run(const std::vector<std::string>& args) {
    CLI::App app{"desk-scale masked-grid token model toolkit"};
    app.require_subcommand(1);

    CommonFlags gen_flags, train_flags_c, decode_flags, eval_flags, bench_flags, plan_flags, ablate_flags;

    // gen
    auto* gen = app.add_subcommand("gen", "generate a toy corpus");
    int64_t gen_count = 1000;
    double gen_corrupt = 0.0;
    add_common(gen, gen_flags);
    gen->add_option("--count", gen_count, "number of samples");
    gen->add_option("--corrupt", gen_corrupt, "fraction with jittered prompts and the denoise token");

    // train
    auto* train = app.add_subcommand("train", "train a model on a toy corpus");
    TrainFlags tf;
    add_common(train, train_flags_c);
    train->add_option("--corpus", tf.corpus, "corpus jsonl")->required();
    train->add_option("--toyspec", tf.spec_path, "toy spec json (default: toyspec.json beside the corpus)");
    train->add_option("--updates", tf.updates, "total optimizer updates");
    train->add_option("--lr", tf.lr, "peak learning rate");
    train->add_option("--batch-tokens", tf.batch_tokens, "token budget per packed batch");
    train->add_option("--strategy", tf.strategy, "masking strategy: full|soundstorm|maskgct");
    train->add_option("--init", tf.init, "initialization: random|ar-warmstart");
    train->add_option("--ar-updates", tf.ar_updates, "causal pretraining updates for ar-warmstart");
    train->add_option("--precision", tf.precision, "f32|f64");
    train->add_option("--checkpoint-interval", tf.checkpoint_interval, "intermediate checkpoint interval");
    train->add_option("--threads", tf.threads, "worker threads (0 = MASKGRID_THREADS)");
    train->add_option("--cond-dropout", tf.cond_dropout, "condition dropout probability");

    // decode
    auto* decode = app.add_subcommand("decode", "iterative unmasking over corpus prompts");
    std::string dc_checkpoint, dc_corpus, dc_spec, dc_token_mode = "as-is";
    int64_t dc_count = 16;
    SamplerFlags dc_sf;
    add_common(decode, decode_flags);
    decode->add_option("--checkpoint", dc_checkpoint, "checkpoint prefix")->required();
    decode->add_option("--corpus", dc_corpus, "corpus jsonl with prompts")->required();
    decode->add_option("--toyspec", dc_spec, "toy spec json");
    decode->add_option("--count", dc_count, "samples to decode");
    decode->add_option("--denoise-token", dc_token_mode, "as-is|strip|force");
    add_sampler_flags(decode, dc_sf);

    // eval
    auto* eval = app.add_subcommand("eval", "toy intelligibility and speaker-similarity metrics");
    std::string ev_checkpoint, ev_corpus, ev_spec, ev_decoded, ev_token_mode = "as-is";
    int64_t ev_count = 64;
    SamplerFlags ev_sf;
    add_common(eval, eval_flags);
    eval->add_option("--checkpoint", ev_checkpoint, "checkpoint prefix (decode-then-score mode)");
    eval->add_option("--corpus", ev_corpus, "corpus jsonl with references")->required();
    eval->add_option("--toyspec", ev_spec, "toy spec json");
    eval->add_option("--decoded", ev_decoded, "score an existing decoded.jsonl instead of decoding");
    eval->add_option("--count", ev_count, "samples to evaluate");
    eval->add_option("--denoise-token", ev_token_mode, "as-is|strip|force");
    add_sampler_flags(eval, ev_sf);

    // bench
    auto* bench = app.add_subcommand("bench", "decode throughput benchmark");
    std::string bn_checkpoint;
    std::vector<int32_t> bn_batches, bn_steps;
    int64_t bn_frames = 20;
    int32_t bn_runs = 5;
    SamplerFlags bn_sf;
    add_common(bench, bench_flags);
    bench->add_option("--checkpoint", bn_checkpoint, "checkpoint prefix")->required();
    bench->add_option("--batches", bn_batches, "batch sizes to time");
    bench->add_option("--step-counts", bn_steps, "step counts to time");
    bench->add_option("--target-frames", bn_frames, "generated frames per sequence");
    bench->add_option("--runs", bn_runs, "timed repetitions per cell (median)");
    add_sampler_flags(bench, bn_sf);

    // plan-resample
    auto* plan = app.add_subcommand("plan-resample", "language resampling plan from a duration manifest");
    plan->alias("plan");
    std::string pl_manifest;
    double pl_beta = 0.8;
    add_common(plan, plan_flags);
    plan->add_option("--manifest", pl_manifest, "csv of language,duration_hours")->required();
    plan->add_option("--beta", pl_beta, "smoothing exponent in [0,1]");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "masking / initialization ablation matrix");
    std::string ab_corpus, ab_spec;
    std::vector<std::string> ab_cells;
    std::vector<uint64_t> ab_seeds;
    int64_t ab_updates = 0, ab_ar_updates = 0, ab_eval_every = 0, ab_eval_samples = 64;
    SamplerFlags ab_sf;
    add_common(ablate, ablate_flags);
    ablate->add_option("--corpus", ab_corpus, "corpus jsonl")->required();
    ablate->add_option("--toyspec", ab_spec, "toy spec json");
    ablate->add_option("--cells", ab_cells, "full|soundstorm|maskgct|random-init|ar-warmstart");
    ablate->add_option("--seeds", ab_seeds, "seeds, one run per (cell, seed)");
    ablate->add_option("--updates", ab_updates, "masked-training budget per cell");
    ablate->add_option("--ar-updates", ab_ar_updates, "causal pretraining budget for ar-warmstart");
    ablate->add_option("--eval-every", ab_eval_every, "evaluate at this update interval");
    ablate->add_option("--eval-samples", ab_eval_samples, "held-out samples per evaluation");
    add_sampler_flags(ablate, ab_sf);

    std::vector<std::string> argv_like{"maskgrid"};
    argv_like.insert(argv_like.end(), args.begin(), args.end());
    std::vector<char*> argv;
    argv.reserve(argv_like.size());
    for (std::string& s : argv_like) argv.push_back(s.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
        if (gen->parsed()) return cmd_gen(gen_flags, gen_count, gen_corrupt);
        if (train->parsed()) return cmd_train(train_flags_c, tf);
        if (decode->parsed())
            return cmd_decode(decode_flags, dc_checkpoint, dc_corpus, dc_spec, dc_count, dc_sf, dc_token_mode);
        if (eval->parsed())
            return cmd_eval(eval_flags, ev_checkpoint, ev_corpus, ev_spec, ev_decoded, ev_count, ev_sf,
                            ev_token_mode);
        if (bench->parsed())
            return cmd_bench(bench_flags, bn_checkpoint, bn_batches, bn_steps, bn_frames, bn_runs, bn_sf);
        if (plan->parsed()) return cmd_plan(plan_flags, pl_manifest, pl_beta);
        if (ablate->parsed())
            return cmd_ablate(ablate_flags, ab_corpus, ab_spec, ab_cells, ab_seeds, ab_updates, ab_ar_updates,
                              ab_eval_every, ab_eval_samples, ab_sf);
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace maskgrid::cli
