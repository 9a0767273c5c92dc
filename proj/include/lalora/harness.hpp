// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lalora/config.hpp"
#include "lalora/curvature.hpp"
#include "lalora/errors.hpp"
#include "lalora/metrics.hpp"
#include "lalora/model.hpp"
#include "lalora/posterior.hpp"
#include "lalora/tasks.hpp"
#include "lalora/training.hpp"

namespace lalora {

/// Accuracies of a network before fine-tuning.
struct Baseline {
    double target_acc = 0.0;
    double source_acc_mean = 0.0;
    std::vector<double> source_acc;
};

Baseline measure_baseline(const Network& network, const EvalSuite& eval);

struct SweepRecord {
    double lambda = 0.0;
    std::uint64_t seed = 0;
    CurvatureKind kind = CurvatureKind::kDiag;
    std::size_t n_s = 0;
    double final_target_acc = 0.0;
    double final_source_acc_mean = 0.0;
    std::vector<double> per_subdataset_source_acc;
    double forgetting_pp = 0.0;  // 100·(pretrained source mean − final source mean)
    double learning_pp = 0.0;    // 100·(final target − pretrained target)
    bool ok = true;
    ExitCode failure = ExitCode::kSuccess;
    std::string error;
};

SweepRecord make_record(const Baseline& baseline, const Network& finetuned, const EvalSuite& eval, double lambda,
                        std::uint64_t seed, CurvatureKind kind, std::size_t n_s);

// Pipeline stages, each a pure function of the config and its inputs.
TaskSuite build_suite(const RunConfig& config);
std::vector<LabeledDataset> source_train_sets(const TaskSuite& suite);
Network build_pretrained(const RunConfig& config, const TaskSuite& suite);
/// LoRA adapters initialized from `seed`.
Network attach_adapters(const RunConfig& config, const Network& base, std::uint64_t seed);
SourceBatches laplace_batches(const RunConfig& config, const TaskSuite& suite, std::uint64_t seed);
LaplacePosterior fit_posterior(const RunConfig& config, const Network& adapted, const TaskSuite& suite,
                               CurvatureKind kind, std::uint64_t seed);

struct CellResult {
    SweepRecord record;
    TrainHistory history;
    AdapterParams final_params;
};

/// Fine-tunes a copy of `adapted` on the target with the given λ and seed.
CellResult run_cell(const RunConfig& config, const Network& adapted, const LaplacePosterior& posterior,
                    const TaskSuite& suite, const Baseline& baseline, double lambda, std::uint64_t seed);

struct SweepCell {
    CurvatureKind kind = CurvatureKind::kDiag;
    double lambda = 0.0;
    std::uint64_t seed = 0;
};

/// Grid in output order: kinds as configured, λ ascending, seeds ascending.
std::vector<SweepCell> sweep_cells(const RunConfig& config);

struct SweepOutput {
    Baseline baseline;
    std::vector<CellResult> cells;
    /// Posterior means per (kind, seed) in sweep_cells order of first use.
    std::vector<LaplacePosterior> posteriors;
    /// (kind, seed) of each entry in `posteriors`.
    std::vector<std::pair<CurvatureKind, std::uint64_t>> posterior_keys;
    [[nodiscard]] bool any_failed() const;
};

/// Runs every cell, reusing one posterior per (kind, seed). Cells run on up
/// to `threads` workers; a failing cell is recorded and the rest continue.
SweepOutput sweep(const RunConfig& config, const Network& base, const TaskSuite& suite, std::size_t threads);

/// LALORA_THREADS if set to a positive integer, else the hardware concurrency (at least 1).
std::size_t thread_cap_from_env();

std::string run_filename(CurvatureKind kind, double lambda, std::uint64_t seed);
std::string history_csv(const TrainHistory& history, double lambda, std::uint64_t seed, CurvatureKind kind,
                        std::size_t sources);
std::string records_csv(std::span<const SweepRecord> records, std::size_t sources);
std::vector<SweepRecord> parse_records_csv(std::string_view text);

/// One point of a method's λ sweep. L is the target accuracy, F the source accuracy.
struct SbInput {
    double lambda = 0.0;
    double target_acc = 0.0;
    double source_acc = 0.0;
};

struct SbScore {
    double lambda = 0.0;
    double l_norm = 0.0;
    double f_norm = 0.0;
    double score = 0.0;
};

struct SbResult {
    std::vector<SbScore> scores;
    double lambda_stability = 0.0;   // argmax F, first on ties
    double lambda_plasticity = 0.0;  // argmax S_B, first on ties
};

inline constexpr double kSbAlpha = 0.7;

/// S_B = α·L′ + (1−α)·F′ with min-max normalization over the given set.
SbResult score_sb(std::span<const SbInput> points, double alpha = kSbAlpha);

/// Seed-averaged (λ, target, source) per λ for one kind, λ ascending; failed cells skipped.
std::vector<SbInput> average_by_lambda(std::span<const SweepRecord> records, CurvatureKind kind);

/// Indices of points not dominated in (source_acc, target_acc).
std::vector<std::size_t> pareto_front(std::span<const SbInput> points);

struct GroupStats {
    std::size_t count = 0;
    double mean_precision = 0.0;
    double min_precision = 0.0;
    double max_precision = 0.0;
    double mean_change_regularized = 0.0;
    double mean_change_baseline = 0.0;
};

/// Flexible (lowest 60% precision), middle (next 30%), important (top 10%).
struct GroupReport {
    double p60 = 0.0;
    double p90 = 0.0;
    std::array<GroupStats, 3> groups;
};

inline constexpr std::array<const char*, 3> kGroupNames{"flexible", "middle", "important"};

/// Ranks every adapter parameter ([vec(A); vec(B)] per adapter) by its diagonal
/// precision, index breaking ties, and summarizes each group.
GroupReport group_analysis(const LaplacePosterior& posterior, const AdapterParams& before,
                           const AdapterParams& after_regularized, const AdapterParams& after_baseline);

std::string group_report_csv(const GroupReport& report);

struct CostRow {
    std::size_t adapter = 0;
    CurvatureKind kind = CurvatureKind::kDiag;
    std::size_t rank = 0;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::size_t stored_values = 0;   // counted from the payload
    std::size_t formula_values = 0;  // closed form for the kind
    std::size_t multiplies = 0;      // per regularizer evaluation
};

std::size_t expected_storage(CurvatureKind kind, std::size_t rank, std::size_t d_in, std::size_t d_out);
std::size_t multiply_count(CurvatureKind kind, std::size_t rank, std::size_t d_in, std::size_t d_out);

/// Throws ContractError if a payload count disagrees with the closed form.
std::vector<CostRow> cost_report(const LaplacePosterior& posterior);
std::string cost_report_csv(std::span<const CostRow> rows);
std::string cost_report_text(std::span<const CostRow> rows);

}  // namespace lalora
