// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "lalora/linalg.hpp"
#include "lalora/model.hpp"
#include "lalora/tasks.hpp"

namespace lalora {

enum class CurvatureKind : std::uint8_t { kDiag = 0, kBlockKfac = 1, kBlockTriKfac = 2, kIdentity = 3 };

/// Short tags used in file names and CSV: diag, bkfac, btrikfac, identity.
std::string_view to_string(CurvatureKind kind) noexcept;
CurvatureKind parse_curvature_kind(std::string_view tag);

/// Per-entry precision of one adapter, in column-stacked (vec) order.
struct DiagFactors {
    Vector d_a;  // r·D_in
    Vector d_b;  // r·D_out
};

/// Kronecker factors of one adapter's precision blocks:
///   AA ≈ L00 ⊗ R11,  BB ≈ L11 ⊗ R22,  AB ≈ L01 ⊗ R12 (tri-diagonal only).
struct KfacFactors {
    Matrix l00;  // D_in × D_in, E[x xᵀ]
    Matrix r11;  // r × r, E[g₁ g₁ᵀ]
    Matrix l11;  // r × r, E[a₁ a₁ᵀ]
    Matrix r22;  // D_out × D_out, E[g₂ g₂ᵀ]
    std::optional<Matrix> l01;  // D_in × r, E[x a₁ᵀ]
    std::optional<Matrix> r12;  // r × D_out, E[g₁ g₂ᵀ]

    [[nodiscard]] bool has_cross() const noexcept { return l01.has_value() && r12.has_value(); }
};

struct BatchDescriptor {
    std::uint32_t subdataset = 0;
    std::uint32_t batch_index = 0;
    std::uint64_t seed = 0;

    friend bool operator==(const BatchDescriptor&, const BatchDescriptor&) = default;
};

struct Provenance {
    std::vector<std::uint32_t> subdatasets;
    std::size_t batches_per_subdataset = 0;
    std::vector<BatchDescriptor> batches;
};

using CurvaturePayload = std::variant<std::monostate, std::vector<DiagFactors>, std::vector<KfacFactors>>;

struct CurvatureEstimate {
    CurvatureKind kind = CurvatureKind::kIdentity;
    CurvaturePayload payload;
    Provenance provenance;

    [[nodiscard]] const std::vector<DiagFactors>& diag() const;
    [[nodiscard]] const std::vector<KfacFactors>& kfac() const;
    [[nodiscard]] std::size_t adapter_count() const;

    /// Payload matches kind; provenance nonempty unless Identity.
    void validate() const;

    /// Multiplies every precision value by c. Kronecker kinds scale only the
    /// right-hand factors so the implied precision scales by exactly c.
    [[nodiscard]] CurvatureEstimate scaled(double c) const;
};

/// Source mini-batches grouped by sub-dataset, with their descriptors.
struct SourceBatches {
    std::vector<std::vector<Batch>> per_subdataset;
    Provenance provenance;
};

/// Takes the first `per_subdataset` batches of a seeded shuffle of every source dataset.
SourceBatches draw_source_batches(std::span<const LabeledDataset> sources, std::size_t per_subdataset,
                                  std::size_t batch_size, std::uint64_t seed);

/// How one batch becomes a diagonal precision.
enum class DiagReduction {
    kPerBatch,    // square of the batch-summed log-likelihood gradient
    kPerExample,  // mean over examples of squared per-example gradients
};

/// How batches inside one sub-dataset are combined for the diagonal.
enum class DiagAccumulation { kSum, kMean };

struct DiagOptions {
    DiagReduction reduction = DiagReduction::kPerBatch;
    DiagAccumulation accumulation = DiagAccumulation::kSum;
};

/// Empirical diagonal Fisher summed over batches and sub-datasets (eval mode, true labels).
CurvatureEstimate fit_diag(const Network& network, const SourceBatches& source, DiagOptions options = {});

/// Diagonal precision of a single batch, one entry per adapter.
std::vector<DiagFactors> diag_batch(const Network& network, const Batch& batch, DiagReduction reduction);

/// Per-batch K-FAC factors (means over the batch's examples), one entry per adapter.
std::vector<KfacFactors> fit_kfac_batch(const Network& network, const Batch& batch, bool with_cross);

/// K-FAC factors from an eval-mode trace whose g signals were filled by backward.
std::vector<KfacFactors> kfac_from_trace(const ForwardTrace& trace, bool with_cross);

/// Arithmetic mean of each factor across N_s batches.
std::vector<KfacFactors> average_over_batches(std::span<const std::vector<KfacFactors>> factors);

/// Diag: entrywise sum. Kronecker kinds: every factor becomes (1/n)·Σⱼ factorⱼ.
CurvatureEstimate combine_subdatasets(std::span<const CurvatureEstimate> estimates);

/// Per-sub-dataset K-FAC (batch means) combined across sub-datasets.
CurvatureEstimate fit_kfac(const Network& network, const SourceBatches& source, bool with_cross);

/// Identity precision: the L² baseline.
CurvatureEstimate identity_curvature();

/// Dispatches on kind.
CurvatureEstimate fit_curvature(const Network& network, CurvatureKind kind, const SourceBatches& source,
                                DiagOptions diag_options = {});

}  // namespace lalora
