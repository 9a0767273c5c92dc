// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <utility>

#include "lalora/curvature.hpp"
#include "lalora/linalg.hpp"
#include "lalora/model.hpp"

namespace lalora {

/// Gaussian over adapter weights: mean at the adapter initialization
/// (μ_A = A at attach time, μ_B = 0) and a precision given by `curvature`.
struct LaplacePosterior {
    AdapterParams means;
    CurvatureEstimate curvature;

    /// Throws ValidationError unless means and curvature agree with the network's adapters.
    void check_compatible(const Network& network) const;
    void check_compatible(const AdapterParams& params) const;
};

/// Takes μ_A from the network's current A and sets μ_B to zero.
LaplacePosterior make_posterior(const Network& network, CurvatureEstimate curvature);

/// Quadratic penalty Σ_adapters vec(θ−μ)ᵀ Σ̄⁻¹ vec(θ−μ) for the posterior's structure.
double reg_value(const LaplacePosterior& posterior, const AdapterParams& params);
double reg_value(const LaplacePosterior& posterior, const Network& network);

/// Analytic gradient of reg_value w.r.t. every adapter's A and B.
AdapterGrads reg_grad(const LaplacePosterior& posterior, const AdapterParams& params);
AdapterGrads reg_grad(const LaplacePosterior& posterior, const Network& network);

/// Both orderings of the cross quadratic term summed over adapters:
/// vec(ΔA)ᵀ (L01 ⊗ R12) vec(ΔB) and vec(ΔB)ᵀ (L01ᵀ ⊗ R12ᵀ) vec(ΔA).
std::pair<double, double> cross_term_symmetric(const LaplacePosterior& posterior, const Network& network);

/// cov(ΔW_pq, ΔW_kl) for ΔW = B·A under the diagonal posterior of one adapter,
/// treating A and B as independent and zero-mean.
double delta_w_cov_diag(const LaplacePosterior& posterior, std::size_t adapter, std::size_t p, std::size_t q,
                        std::size_t k, std::size_t l);

/// The block-diagonal K-FAC posterior implies cov(ΔW) = scalar · pattern with
/// pattern = R22⁻¹ ⊗ L00⁻¹ (rows indexed p·D_in + q) and
/// scalar = Σ_αβ (L11⁻¹ ⊙ R11⁻¹)_αβ.
struct CollapsedCovariance {
    Matrix pattern;
    double scalar = 0.0;
};
CollapsedCovariance bkfac_collapse(const LaplacePosterior& posterior, std::size_t adapter);

/// Σ_αβ (X ⊙ Y)_αβ by explicit double loop.
double elementwise_product_sum(const Matrix& x, const Matrix& y);

}  // namespace lalora
