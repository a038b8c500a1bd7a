#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "flare/io.hpp"

namespace flare {

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidationFail = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

struct CliPaths {
    std::filesystem::path out_dir = ".";
    std::filesystem::path data;        // dataset CSV; empty = <out>/<dataset>.csv
    std::filesystem::path checkpoint;  // empty = <out>/<dataset>.ckpt
    std::filesystem::path real;        // eval: real-data CSV
    std::filesystem::path samples;     // eval: generated-samples CSV
    std::vector<std::filesystem::path> scores;  // eval: one or more score CSVs
    std::size_t n_score_samples = 2000;
    std::size_t threads = 1;
};

// Each command returns a process exit code and writes its artifacts under
// paths.out_dir. Errors mapping: SchemaError/InvalidArgument -> kExitUsage,
// numerical failures -> kExitNumerical (handled by the caller in main).

int cmd_gen_data(const RunConfig& cfg, const CliPaths& paths);
int cmd_train(const RunConfig& cfg, const CliPaths& paths);
int cmd_score(const RunConfig& cfg, const CliPaths& paths);
int cmd_eval(const RunConfig& cfg, const CliPaths& paths);
int cmd_validate(const RunConfig& cfg, const CliPaths& paths, const std::string& study);
int cmd_ablate_keep(const RunConfig& cfg, const CliPaths& paths);

// FNV-1a over a file's bytes, for manifest provenance fields.
std::uint64_t file_hash(const std::filesystem::path& path);

// Deterministic parallel map over [0, n): results are produced into a caller
// vector by index regardless of scheduling.
void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)>& body);

}  // namespace flare
