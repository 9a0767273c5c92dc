// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>

#include "lalora/checkpoint.hpp"
#include "lalora/config.hpp"
#include "lalora/errors.hpp"
#include "lalora/harness.hpp"

// File-level pipeline stages behind the command-line tool.
namespace lalora {

/// What a checkpoint holds, stored as "meta.stage".
enum class Stage : std::uint8_t { kPretrained = 0, kPosterior = 1, kFinetuned = 2 };

/// Network checkpoint tagged with the stage and config hash.
TensorFile network_checkpoint(const Network& network, const RunConfig& config, Stage stage);

/// Throws ValidationError if the file is not of the expected stage.
void expect_stage(const TensorFile& file, Stage stage, const std::filesystem::path& path);

/// Pretrains the base network and writes it to `out`.
void cmd_pretrain(const RunConfig& config, const std::filesystem::path& out);

/// Attaches adapters seeded by `seed`, fits the curvature on N_s batches per
/// source sub-dataset and writes the adapted network with its posterior.
void cmd_fit_laplace(const RunConfig& config, const std::filesystem::path& model, const std::filesystem::path& out,
                     CurvatureKind kind, std::uint64_t seed);

/// One fine-tuning run. Writes run_{kind}_{λ}_{seed}.csv (history),
/// record_{kind}_{λ}_{seed}.csv and adapters_{kind}_{λ}_{seed}.lalr into `out_dir`.
CellResult cmd_train(const RunConfig& config, const std::filesystem::path& model,
                     const std::filesystem::path& posterior, const std::filesystem::path& out_dir, double lambda,
                     std::uint64_t seed);

/// Full grid. Pretrains unless `model` is given, then writes posteriors,
/// histories, adapters, records.csv and sb_{kind}.csv. Returns the exit code
/// of the first failed cell, or success.
ExitCode cmd_sweep(const RunConfig& config, const std::optional<std::filesystem::path>& model,
                   const std::filesystem::path& out_dir, std::size_t threads);

struct AnalyzeInputs {
    std::filesystem::path posterior;
    std::optional<std::filesystem::path> before;  // defaults to the posterior means
    std::optional<std::filesystem::path> after_regularized;
    std::optional<std::filesystem::path> after_baseline;
};

/// Writes cost.csv and cost.txt, plus group_report.csv when both "after"
/// checkpoints are given (diagonal posteriors only).
void cmd_analyze(const AnalyzeInputs& inputs, const std::filesystem::path& out_dir);

std::string record_filename(CurvatureKind kind, double lambda, std::uint64_t seed);
std::string adapters_filename(CurvatureKind kind, double lambda, std::uint64_t seed);
std::string posterior_filename(CurvatureKind kind, std::uint64_t seed);

/// λ, L, F, L′, F′, S_B and Pareto membership per λ, with λ_stability and λ_plasticity.
std::string sb_csv(std::span<const SbInput> points);

}  // namespace lalora
