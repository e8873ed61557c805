#include "maskgrid/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace maskgrid {

using nlohmann::json;

LanguageManifest read_manifest_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open " + path);
    LanguageManifest manifest;
    std::string line;
    bool header = true;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            if (line.find("language") != std::string::npos) continue;  // header row optional
        }
        const size_t comma = line.find(',');
        if (comma == std::string::npos) throw io_error("manifest: malformed line '" + line + "'");
        LanguageEntry entry;
        entry.language = line.substr(0, comma);
        try {
            entry.hours = std::stod(line.substr(comma + 1));
        } catch (const std::exception&) {
            throw io_error("manifest: bad duration in '" + line + "'");
        }
        manifest.push_back(std::move(entry));
    }
    return manifest;
}

void write_manifest_csv(const std::string& path, const LanguageManifest& manifest) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot write " + path);
    f << "language,duration_hours\n";
    for (const auto& e : manifest) f << e.language << "," << e.hours << "\n";
}

std::string ResamplePlan::to_json() const {
    json j;
    j["beta"] = beta;
    json list = json::array();
    for (const auto& e : entries) {
        list.push_back({{"language", e.language},
                        {"hours", e.hours},
                        {"repetition", e.repetition},
                        {"effective_hours", e.effective_hours}});
    }
    j["languages"] = std::move(list);
    return j.dump(2);
}

ResamplePlan plan_resample(const LanguageManifest& manifest, double beta) {
    if (manifest.empty()) throw input_error("plan_resample: empty manifest");
    if (beta < 0.0 || beta > 1.0) throw input_error("plan_resample: beta must lie in [0,1]");
    std::set<std::string> names;
    double d_max = 0.0;
    for (const auto& e : manifest) {
        if (e.hours <= 0.0) throw input_error("plan_resample: non-positive duration for " + e.language);
        if (!names.insert(e.language).second)
            throw input_error("plan_resample: duplicate language " + e.language);
        d_max = std::max(d_max, e.hours);
    }

    ResamplePlan plan;
    plan.beta = beta;
    for (const auto& e : manifest) {
        ResampleEntry out;
        out.language = e.language;
        out.hours = e.hours;
        // round half away from zero, then clamp below at 1
        const double raw = std::pow(d_max / e.hours, 1.0 - beta);
        out.repetition = std::max<int64_t>(1, static_cast<int64_t>(std::llround(raw)));
        out.effective_hours = static_cast<double>(out.repetition) * e.hours;
        plan.entries.push_back(std::move(out));
    }
    return plan;
}

std::vector<int64_t> epoch_indices(const ResamplePlan& plan, std::span<const int64_t> per_language_counts) {
    if (per_language_counts.size() != plan.entries.size())
        throw input_error("epoch_indices: counts do not match the plan");
    std::vector<int64_t> out;
    int64_t base = 0;
    for (size_t i = 0; i < plan.entries.size(); ++i) {
        for (int64_t rep = 0; rep < plan.entries[i].repetition; ++rep)
            for (int64_t k = 0; k < per_language_counts[i]; ++k) out.push_back(base + k);
        base += per_language_counts[i];
    }
    return out;
}

std::vector<PackedBatch> pack(std::span<const int64_t> sizes, int64_t budget) {
    if (budget < 1) throw input_error("pack: budget must be positive");
    for (size_t i = 0; i < sizes.size(); ++i) {
        if (sizes[i] < 1) throw input_error("pack: sequence " + std::to_string(i) + " is empty");
        if (sizes[i] > budget)
            throw input_error("pack: sequence " + std::to_string(i) + " has " + std::to_string(sizes[i]) +
                              " tokens, budget is " + std::to_string(budget));
    }

    // first-fit-decreasing, stable on ties
    std::vector<int64_t> order(sizes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t a, int64_t b) { return sizes[static_cast<size_t>(a)] > sizes[static_cast<size_t>(b)]; });

    std::vector<PackedBatch> batches;
    for (int64_t idx : order) {
        const int64_t size = sizes[static_cast<size_t>(idx)];
        PackedBatch* home = nullptr;
        for (PackedBatch& b : batches) {
            if (b.total_tokens + size <= budget) {
                home = &b;
                break;
            }
        }
        if (!home) {
            batches.emplace_back();
            home = &batches.back();
            home->budget = budget;
        }
        home->sequence_indices.push_back(idx);
        home->sizes.push_back(size);
        home->total_tokens += size;
    }
    return batches;
}

std::vector<int64_t> unpack(const std::vector<PackedBatch>& batches, int64_t count) {
    std::vector<int64_t> slots(static_cast<size_t>(count), -1);
    int64_t seen = 0;
    for (const PackedBatch& b : batches) {
        for (int64_t idx : b.sequence_indices) {
            if (idx < 0 || idx >= count || slots[static_cast<size_t>(idx)] != -1)
                throw input_error("unpack: corrupt batch indices");
            slots[static_cast<size_t>(idx)] = idx;
            ++seen;
        }
    }
    if (seen != count) throw input_error("unpack: batches do not cover all sequences");
    return slots;
}

}  // namespace maskgrid
