#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "maskgrid/types.hpp"

namespace maskgrid {

struct LanguageEntry {
    std::string language;
    double hours = 0.0;
};

using LanguageManifest = std::vector<LanguageEntry>;

// CSV with a "language,duration_hours" header.
LanguageManifest read_manifest_csv(const std::string& path);
void write_manifest_csv(const std::string& path, const LanguageManifest& manifest);

struct ResampleEntry {
    std::string language;
    double hours = 0.0;
    int64_t repetition = 1;
    double effective_hours = 0.0;  // repetition * hours
};

struct ResamplePlan {
    double beta = 0.8;
    std::vector<ResampleEntry> entries;

    std::string to_json() const;
};

// r_i = max(1, round((D_max / D_i)^(1 - beta))), round half away from zero.
ResamplePlan plan_resample(const LanguageManifest& manifest, double beta);

// Expands indices by repetition factor (virtual copies, no data duplication).
std::vector<int64_t> epoch_indices(const ResamplePlan& plan, std::span<const int64_t> per_language_counts);

struct PackedBatch {
    std::vector<int64_t> sequence_indices;  // original positions, placement order
    std::vector<int64_t> sizes;             // tokens per placed sequence
    int64_t budget = 0;
    int64_t total_tokens = 0;
};

// First-fit-decreasing packing of sequence sizes into batches of at most
// `budget` tokens. Attention isolation is the consumer's job: each placed
// sequence becomes one segment with position ids starting at 0.
std::vector<PackedBatch> pack(std::span<const int64_t> sizes, int64_t budget);

// Flattens batches back to the original order; inverse of pack.
std::vector<int64_t> unpack(const std::vector<PackedBatch>& batches, int64_t count);

}  // namespace maskgrid
