#pragma once

#include <string>
#include <vector>

namespace maskgrid::cli {

// Dispatches one subcommand (gen, train, ablate, decode, eval, bench,
// plan-resample). Returns the process exit code: 0 only when every requested
// artifact was written and validated.
int run(const std::vector<std::string>& args);

// FNV-1a hash of a file's bytes, hex-encoded; used in run summaries.
std::string content_hash(const std::string& path);

}  // namespace maskgrid::cli
