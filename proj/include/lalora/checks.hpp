// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lalora/config.hpp"
#include "lalora/harness.hpp"

// Self-checks of the library against its oracles and of the synthetic
// learning–forgetting behavior. Each returns a pass/fail line.
namespace lalora::checks {

struct CheckResult {
    int id = 0;
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

/// reg_value equals the dense quadratic form for every kind on 200 random instances.
CheckResult oracle_equivalence(std::uint64_t seed, std::size_t instances = 200);

/// Single-example block tri-diagonal assembly equals the dense empirical Fisher.
CheckResult single_sample_kfac(std::uint64_t seed, std::size_t pairs = 100);

/// Analytic gradient of nll + λ·reg against central differences.
CheckResult gradient_check(std::uint64_t seed, std::size_t min_coordinates = 500);

/// Nonnegativity, PSD factors, center, homogeneity, cross-term symmetry, factor combination.
CheckResult structural_invariants(std::uint64_t seed);

/// Diagonal ΔW covariance against Monte-Carlo and the K-FAC scalar collapse against brute force.
CheckResult collapse(std::uint64_t seed, std::size_t samples = 1'000'000);

/// The S_B value of the diagonal method at λ = 10 on a fixed reference row.
CheckResult sb_pin();

/// Serialized curvature sizes against the closed-form storage counts.
CheckResult cost_accounting(std::uint64_t seed);

/// Trend conditions on seed-averaged sweep records of one kind.
CheckResult learning_forgetting(std::span<const SweepRecord> records, CurvatureKind kind,
                                std::span<const SweepRecord> fixture);

/// Important vs flexible mean |Δ| at λ_stability, for every seed.
CheckResult update_separation(const RunConfig& config, const SweepOutput& output);

/// Runs pretrain → fit-laplace → train twice in fresh directories and compares bytes.
CheckResult determinism(const RunConfig& config, const std::filesystem::path& scratch);

std::string format_line(const CheckResult& r);

/// The fast oracle checks (1–5, 7, 9).
std::vector<CheckResult> run_oracle_suite(std::uint64_t seed);

}  // namespace lalora::checks
