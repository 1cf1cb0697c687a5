#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "loft/config.hpp"
#include "loft/pipelines.hpp"

namespace loft::cli {

// One grid cell of the experiment runner.
struct Cell {
    pipe::GenMethod method;
    int s = 0;
    int k = 0;
    uint64_t seed = 0;

    std::string label() const { return method.tag(); }
};

// Fixed evaluation grids (row order of the result tables). The default grid
// crosses {classcond, perclass, loft-fixed0.5, loft-fixed1} x s x k x seeds;
// the ablation grid sweeps fusion-weight samplers at k = 8.
std::vector<Cell> default_grid(const cfg::RunConfig& rc);
std::vector<Cell> ablation_grid(const cfg::RunConfig& rc);

// Runs every cell of the grid, reusing stage artifacts cached under
// out_dir/cache by content key, then writes results.csv (plus flips.csv and
// scatter.csv on the default grid), config.txt, and manifest.json.
void run_experiment(const cfg::RunConfig& rc, const std::filesystem::path& out_dir, bool ablation);

// Rebuilds the CSVs from the cached cell reports without recomputing
// anything. The configuration is read from the directory's config.txt — the
// one that produced the cache — so the keys are guaranteed to match.
void export_grid(const std::filesystem::path& out_dir, bool ablation);

// Entry point behind main(): parses the subcommand, runs it, maps errors to
// exit codes (0 ok, 2 usage/config, 3 missing artifact, 1 other failure).
int cli_dispatch(int argc, const char* const* argv);

}  // namespace loft::cli
