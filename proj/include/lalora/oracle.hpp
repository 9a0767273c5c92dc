// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "lalora/curvature.hpp"
#include "lalora/linalg.hpp"
#include "lalora/model.hpp"
#include "lalora/posterior.hpp"
#include "lalora/tasks.hpp"

// Brute-force references. Nothing here calls forward/backward or the
// Kronecker helpers of the modules it checks.
namespace lalora::oracle {

/// Largest per-adapter parameter count the dense oracles will materialize.
inline constexpr std::size_t kDenseLimit = 2000;

struct AdapterShape {
    std::size_t rank = 0;
    std::size_t d_in = 0;
    std::size_t d_out = 0;

    [[nodiscard]] std::size_t a_size() const noexcept { return rank * d_in; }
    [[nodiscard]] std::size_t dimension() const noexcept { return rank * (d_in + d_out); }
};

std::vector<AdapterShape> shapes_of(const Network& network);
std::vector<AdapterShape> shapes_of(const AdapterParams& params);

enum class FisherReduction {
    kPerExample,  // mean over examples of g gᵀ
    kPerBatch,    // (Σ g)(Σ g)ᵀ
};

/// Per-example log-likelihood gradients, one row per example, columns
/// [vec(∂A); vec(∂B)] for the given adapter. Computed by a scalar loop.
Matrix per_example_adapter_gradients(const Network& network, const Batch& batch, std::size_t adapter);

/// Dense empirical Fisher per adapter over [vec(A); vec(B)], eval mode, true labels.
std::vector<Matrix> dense_empirical_fisher(const Network& network, const Batch& examples,
                                           FisherReduction reduction = FisherReduction::kPerExample);

/// Explicitly assembled precision per adapter: diagonal, block-diagonal
/// kron blocks, or with the cross block kron(L01, R12) and its transpose.
std::vector<Matrix> dense_from_curvature(const CurvatureEstimate& estimate, std::span<const AdapterShape> shapes);

/// Σ_adapters vᵀ M v with v = [vec(A − μ_A); vec(B − μ_B)].
double dense_quadratic(std::span<const Matrix> dense, const AdapterParams& params, const AdapterParams& means);

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central differences (f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h for every coordinate.
Vector finite_diff(const ScalarFn& f, std::span<const double> theta, double h);

/// Central differences for the listed coordinates only.
Vector finite_diff(const ScalarFn& f, std::span<const double> theta, double h,
                   std::span<const std::size_t> coordinates);

/// Flattens adapters as [vec(A₀); vec(B₀); vec(A₁); …] and back.
Vector flatten(const AdapterParams& params);
AdapterParams unflatten(std::span<const double> theta, std::span<const AdapterShape> shapes);

struct CovIndex {
    std::size_t p = 0;
    std::size_t q = 0;
    std::size_t k = 0;
    std::size_t l = 0;
};

struct McEstimate {
    double covariance = 0.0;
    double standard_error = 0.0;
};

/// Samples A, B independently from the zero-mean diagonal Gaussian of one
/// adapter, forms ΔW = B·A (unscaled) and estimates the requested covariances.
/// Standard errors come from a delete-one-block jackknife over `blocks` blocks.
std::vector<McEstimate> mc_delta_w_cov(const LaplacePosterior& posterior, std::size_t adapter,
                                       std::size_t samples, std::uint64_t seed, std::span<const CovIndex> entries,
                                       std::size_t blocks = 100);

}  // namespace lalora::oracle
