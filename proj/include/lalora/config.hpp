// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "lalora/curvature.hpp"
#include "lalora/tasks.hpp"
#include "lalora/training.hpp"

namespace lalora {

struct ModelConfig {
    std::size_t input_dim = 20;
    std::vector<std::size_t> hidden_dims{128, 128};
    std::size_t num_classes = 10;
    std::uint64_t seed = 7;
};

struct LoraConfig {
    std::size_t rank = 8;
    double alpha = 16.0;
    double dropout_p = 0.0;
    std::vector<std::size_t> target_layers{0, 1};
};

struct DataConfig {
    std::vector<std::uint64_t> source_seeds{11, 12, 13};
    std::uint64_t target_seed = 99;
    std::size_t samples = 2000;
    std::size_t eval_samples = 500;
    double noise_scale = 0.8;
};

struct LaplaceConfig {
    std::vector<CurvatureKind> kinds{CurvatureKind::kDiag};
    std::size_t batches_per_subdataset = 1;
    std::size_t batch_size = 128;
    bool per_example = false;
};

struct TrainSection {
    TrainConfig base;  // lambda and seed are taken from the lists below
    std::vector<double> lambdas{0.0};
    std::vector<std::uint64_t> seeds{1};
};

struct RunConfig {
    ModelConfig model;
    LoraConfig lora;
    DataConfig data;
    LaplaceConfig laplace;
    TrainSection train;
    TrainConfig pretrain{1e-3, Schedule::kConstant, 20, 32, 0.0, OptimizerKind::kAdam, {}, 5, 20};

    /// Cross-field checks (dimensions, nonempty lists, valid ranges).
    void validate() const;

    [[nodiscard]] TaskSpec task_spec() const;
    [[nodiscard]] TrainConfig train_config(double lambda, std::uint64_t seed) const;
    [[nodiscard]] DiagOptions diag_options() const;
};

/// Parses JSON text with the exact key tree; unknown keys are errors.
RunConfig parse_config(std::string_view json_text);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical JSON rendering (sorted keys, every field explicit).
std::string canonical_json(const RunConfig& config);

/// FNV-1a 64-bit of canonical_json.
std::uint64_t config_hash(const RunConfig& config);

/// FNV-1a 64-bit over raw bytes.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;

/// Parses "1e3,0,10" style lists; values must be finite and ≥ 0.
std::vector<double> parse_lambda_list(std::string_view text);

/// Shortest round-trip rendering used in file names, e.g. 0, 10, 1e+06.
std::string lambda_tag(double lambda);

}  // namespace lalora
