#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "flare/datasets.hpp"
#include "flare/denoiser.hpp"
#include "flare/diffusion.hpp"
#include "flare/eval.hpp"
#include "flare/training.hpp"
#include "flare/uncertainty.hpp"

#include <nlohmann/json_fwd.hpp>

namespace flare {

// --- CSV ------------------------------------------------------------------
// UTF-8, comma delimiter, '.' decimal point, one header row. Doubles are
// written with round-trip precision so rereads are bit-exact.

void write_csv(const std::filesystem::path& path, const Matrix& data,
               const std::vector<std::string>& header);

struct CsvTable {
    std::vector<std::string> header;
    Matrix data;
};

CsvTable read_csv(const std::filesystem::path& path);

// Serialize one double with round-trip precision (shortest form preferred).
std::string format_double(double v);

// --- Checkpoints ----------------------------------------------------------
// Layout: magic "FLRE", version u32, header-length u64, JSON header
// (architecture, layout table, seed, schedule hash), then two raw
// little-endian float64 blocks: raw parameters and EMA parameters.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    Vector params;      // raw final parameters
    Vector ema_params;  // EMA parameters (evaluation point)
    std::uint64_t seed = 0;
    std::uint64_t schedule_hash = 0;
};

void save_checkpoint(const std::filesystem::path& path, const DenoiserModel& model,
                     const Vector& ema_params, std::uint64_t seed, std::uint64_t schedule_hash);

// expected_schedule_hash: when nonzero, a mismatch raises SchemaError.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::uint64_t expected_schedule_hash = 0);

DenoiserModel model_from_checkpoint(const Checkpoint& ckpt, bool use_ema = true);

// --- Run configuration ----------------------------------------------------
// Strict JSON: unknown keys anywhere raise SchemaError, as do missing
// mandatory fields (dataset name and seed) and type mismatches.

struct RunConfig {
    std::string dataset;          // grid | sine | chirp | damped
    std::size_t n_samples = 0;    // dataset size override; 0 = preset
    ModelConfig model;            // zero data_dim = fill from preset
    std::size_t total_steps = 0;  // schedule override; 0 = preset
    TrainConfig train;
    EstimatorKind estimator = EstimatorKind::Flare;
    std::size_t subnet_m = 0;  // 0 = preset (p/2 for sine/grid, 4412 otherwise)
    double lambda = 1e-4;
    std::size_t ggn_pairs = 256;
    SamplerKind sampler = SamplerKind::Ddpm;
    double filter_percentile = 0.0;  // 0 = preset (50 sine/grid, 25 chirp)
    std::size_t bootstrap_b = 1000;
    std::size_t mc_draws = 32;  // S for predictive-variance style baselines
    std::vector<double> thresholds{0.01};
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string output_dir = ".";
    bool emit_svg = false;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Preset hyperparameters for a named dataset (Table-2-style defaults).
std::size_t preset_dataset_size(const std::string& dataset);
TrainConfig preset_train_config(const std::string& dataset);
double preset_filter_percentile(const std::string& dataset);
std::size_t preset_subnet_m(const std::string& dataset, std::size_t param_count);

// --- Reports --------------------------------------------------------------

nlohmann::json metrics_report_json(const MetricsReport& report);
nlohmann::json cross_term_report_json(const CrossTermReport& report);
nlohmann::json sketch_report_json(const SketchStudyReport& report);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace flare
