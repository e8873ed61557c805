#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "maskgrid/cli.hpp"
#include "maskgrid/datakit.hpp"
#include "maskgrid/eval.hpp"
#include "maskgrid/masking.hpp"
#include "maskgrid/sampler.hpp"
#include "maskgrid/toylang.hpp"
#include "maskgrid/trainer.hpp"

namespace py = pybind11;
using namespace maskgrid;

namespace {

std::vector<std::vector<int32_t>> grid_rows(const TokenGrid& grid) {
    std::vector<std::vector<int32_t>> rows(static_cast<size_t>(grid.frames));
    for (int64_t t = 0; t < grid.frames; ++t)
        for (int32_t c = 0; c < grid.codebooks; ++c) rows[static_cast<size_t>(t)].push_back(grid.at(t, c));
    return rows;
}

TokenGrid grid_of_rows(const std::vector<std::vector<int32_t>>& rows) {
    const int64_t frames = static_cast<int64_t>(rows.size());
    const int32_t codebooks = frames > 0 ? static_cast<int32_t>(rows[0].size()) : 0;
    TokenGrid grid(frames, codebooks);
    for (int64_t t = 0; t < frames; ++t) {
        if (static_cast<int32_t>(rows[static_cast<size_t>(t)].size()) != codebooks)
            throw input_error("grid rows must all have the same codebook count");
        for (int32_t c = 0; c < codebooks; ++c) grid.at(t, c) = rows[static_cast<size_t>(t)][static_cast<size_t>(c)];
    }
    return grid;
}

// float checkpoint + its model config, decode-oriented surface
struct PyModel {
    ModelConfig config;
    Params<float> params;

    static PyModel load(const std::string& prefix) {
        if (checkpoint_dtype(prefix) != "f32") throw input_error("python bindings expect f32 checkpoints");
        TrainState<float> state = load_train_state<float>(prefix);
        return {state.model, std::move(state.params)};
    }

    std::vector<std::vector<int32_t>> decode_grid(const std::vector<int32_t>& text,
                                                  const std::vector<std::vector<int32_t>>& prompt,
                                                  int64_t target_frames, const SamplerConfig& cfg) const {
        return grid_rows(decode(config, params, text, grid_of_rows(prompt), target_frames, cfg));
    }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "masked multi-codebook grid modeling toolkit";

    py::register_exception<maskgrid::error>(m, "MaskgridError");

    py::class_<UnmaskSchedule>(m, "UnmaskSchedule")
        .def_readonly("steps", &UnmaskSchedule::steps)
        .def_readonly("tau", &UnmaskSchedule::tau)
        .def_readonly("r", &UnmaskSchedule::r)
        .def_readonly("counts", &UnmaskSchedule::counts)
        .def_readonly("total", &UnmaskSchedule::total);

    m.def("build_schedule", &build_schedule, py::arg("steps"), py::arg("tau"), py::arg("total_masked"),
          "time-shifted cumulative unmasking schedule with exact integer coverage");

    py::class_<SamplerConfig>(m, "SamplerConfig")
        .def(py::init<>())
        .def_readwrite("steps", &SamplerConfig::steps)
        .def_readwrite("tau", &SamplerConfig::tau)
        .def_readwrite("temperature", &SamplerConfig::temperature)
        .def_readwrite("guidance_scale", &SamplerConfig::guidance_scale)
        .def_readwrite("layer_penalty", &SamplerConfig::layer_penalty)
        .def_readwrite("seed", &SamplerConfig::seed);

    py::class_<DurationWeights>(m, "DurationWeights")
        .def(py::init<>())
        .def_readwrite("cjk", &DurationWeights::cjk)
        .def_readwrite("latin", &DurationWeights::latin)
        .def_readwrite("digit", &DurationWeights::digit)
        .def_readwrite("space_punct", &DurationWeights::space_punct);

    m.def("text_weight", &text_weight, py::arg("text"), py::arg("weights") = DurationWeights{});
    m.def(
        "estimate_duration",
        [](const std::string& prompt, const std::string& target, double d_prompt, double frame_rate,
           const DurationWeights& w) {
            const DurationEstimate e = estimate_duration(prompt, target, d_prompt, w, frame_rate);
            return py::make_tuple(e.duration, e.frames);
        },
        py::arg("prompt_text"), py::arg("target_text"), py::arg("prompt_duration"),
        py::arg("frame_rate") = 25.0, py::arg("weights") = DurationWeights{},
        "returns (target_duration, target_frames)");

    m.def(
        "plan_resample",
        [](const std::vector<std::pair<std::string, double>>& manifest, double beta) {
            LanguageManifest entries;
            for (const auto& [lang, hours] : manifest) entries.push_back({lang, hours});
            const ResamplePlan plan = plan_resample(entries, beta);
            py::list out;
            for (const auto& e : plan.entries) {
                py::dict row;
                row["language"] = e.language;
                row["hours"] = e.hours;
                row["repetition"] = e.repetition;
                row["effective_hours"] = e.effective_hours;
                out.append(std::move(row));
            }
            return out;
        },
        py::arg("manifest"), py::arg("beta"),
        "language repetition factors r_i = max(1, round((D_max/D_i)^(1-beta)))");

    m.def(
        "pack",
        [](const std::vector<int64_t>& sizes, int64_t budget) {
            py::list out;
            for (const PackedBatch& b : pack(sizes, budget)) {
                py::dict row;
                row["sequence_indices"] = b.sequence_indices;
                row["total_tokens"] = b.total_tokens;
                out.append(std::move(row));
            }
            return out;
        },
        py::arg("sizes"), py::arg("budget"), "first-fit-decreasing packing to a token budget");

    m.def(
        "plan_full_random",
        [](int64_t frames, int32_t codebooks, int64_t prompt_len, uint64_t seed) {
            Rng rng(seed);
            const MaskPlan plan = plan_full_random(frames, codebooks, prompt_len, rng);
            py::dict out;
            out["masked"] = plan.masked;
            out["loss_positions"] = plan.loss_positions;
            out["ratio"] = plan.ratio;
            return out;
        },
        py::arg("frames"), py::arg("codebooks"), py::arg("prompt_len"), py::arg("seed") = 0);

    py::class_<ToySpec>(m, "ToySpec")
        .def_static("make", py::overload_cast<uint64_t>(&ToySpec::make), py::arg("table_seed"))
        .def_static("load", &ToySpec::load)
        .def("save", &ToySpec::save)
        .def("to_json", &ToySpec::to_json)
        .def_readonly("alphabet", &ToySpec::alphabet)
        .def_readonly("frames_per_symbol", &ToySpec::frames_per_symbol)
        .def_readonly("speakers", &ToySpec::speakers)
        .def_readonly("codebooks", &ToySpec::codebooks)
        .def_readonly("codebook_vocab", &ToySpec::codebook_vocab)
        .def("denoise_token", &ToySpec::denoise_token);

    m.def(
        "transduce",
        [](const ToySpec& spec, const std::vector<int32_t>& symbols, int32_t speaker) {
            return grid_rows(transduce(spec, symbols, speaker));
        },
        py::arg("spec"), py::arg("symbols"), py::arg("speaker"));

    m.def(
        "toy_wer",
        [](const ToySpec& spec, const std::vector<std::vector<int32_t>>& grid,
           const std::vector<int32_t>& reference) { return toy_wer(spec, grid_of_rows(grid), reference); },
        py::arg("spec"), py::arg("grid"), py::arg("reference_symbols"));

    m.def(
        "toy_sim",
        [](const ToySpec& spec, const std::vector<std::vector<int32_t>>& grid,
           const std::vector<std::vector<int32_t>>& prompt) {
            return toy_sim(spec, grid_of_rows(grid), grid_of_rows(prompt));
        },
        py::arg("spec"), py::arg("grid"), py::arg("prompt_grid"));

    py::class_<PyModel>(m, "Model")
        .def_static("load", &PyModel::load, py::arg("checkpoint_prefix"))
        .def_property_readonly("config_json", [](const PyModel& mdl) { return mdl.config.to_json(); })
        .def("decode", &PyModel::decode_grid, py::arg("text"), py::arg("prompt_grid"),
             py::arg("target_frames"), py::arg("sampler") = SamplerConfig{},
             "iterative unmasking; returns the completed grid including prompt rows");

    m.def("run_cli", &cli::run, py::arg("args"),
          "dispatch a maskgrid subcommand in-process; returns the exit code");

    m.def("lr_at", [](int64_t step, double peak_lr, int64_t total_updates, double warmup_fraction) {
        TrainConfig cfg;
        cfg.peak_lr = peak_lr;
        cfg.total_updates = total_updates;
        cfg.warmup_fraction = warmup_fraction;
        return lr_at(step, cfg);
    }, py::arg("step"), py::arg("peak_lr") = 1e-4, py::arg("total_updates") = 1000,
          py::arg("warmup_fraction") = 0.03);
}
