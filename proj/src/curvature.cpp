// SPDX-License-Identifier: Apache-2.0
#include "lalora/curvature.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "lalora/errors.hpp"
#include "lalora/random.hpp"

namespace lalora {

std::string_view to_string(CurvatureKind kind) noexcept {
    switch (kind) {
        case CurvatureKind::kDiag:
            return "diag";
        case CurvatureKind::kBlockKfac:
            return "bkfac";
        case CurvatureKind::kBlockTriKfac:
            return "btrikfac";
        case CurvatureKind::kIdentity:
            return "identity";
    }
    return "unknown";
}

CurvatureKind parse_curvature_kind(std::string_view tag) {
    for (auto kind : {CurvatureKind::kDiag, CurvatureKind::kBlockKfac, CurvatureKind::kBlockTriKfac,
                      CurvatureKind::kIdentity}) {
        if (tag == to_string(kind)) {
            return kind;
        }
    }
    throw ValidationError(fmt::format("unknown curvature kind '{}' (expected diag, bkfac, btrikfac, identity)", tag));
}

const std::vector<DiagFactors>& CurvatureEstimate::diag() const {
    const auto* p = std::get_if<std::vector<DiagFactors>>(&payload);
    if (p == nullptr) {
        throw ValidationError(fmt::format("curvature of kind {} has no diagonal payload", to_string(kind)));
    }
    return *p;
}

const std::vector<KfacFactors>& CurvatureEstimate::kfac() const {
    const auto* p = std::get_if<std::vector<KfacFactors>>(&payload);
    if (p == nullptr) {
        throw ValidationError(fmt::format("curvature of kind {} has no Kronecker payload", to_string(kind)));
    }
    return *p;
}

std::size_t CurvatureEstimate::adapter_count() const {
    if (const auto* d = std::get_if<std::vector<DiagFactors>>(&payload)) {
        return d->size();
    }
    if (const auto* k = std::get_if<std::vector<KfacFactors>>(&payload)) {
        return k->size();
    }
    return 0;
}

void CurvatureEstimate::validate() const {
    switch (kind) {
        case CurvatureKind::kIdentity:
            if (!std::holds_alternative<std::monostate>(payload)) {
                throw ValidationError("identity curvature carries a payload");
            }
            return;
        case CurvatureKind::kDiag:
            for (const auto& d : diag()) {
                if (std::any_of(d.d_a.begin(), d.d_a.end(), [](double v) { return !(v >= 0.0); }) ||
                    std::any_of(d.d_b.begin(), d.d_b.end(), [](double v) { return !(v >= 0.0); })) {
                    throw ValidationError("diagonal precision has negative or NaN entries");
                }
            }
            break;
        case CurvatureKind::kBlockKfac:
        case CurvatureKind::kBlockTriKfac: {
            const bool want_cross = kind == CurvatureKind::kBlockTriKfac;
            for (const auto& f : kfac()) {
                if (f.has_cross() != want_cross) {
                    throw ValidationError("Kronecker payload cross factors do not match the kind");
                }
                const std::size_t d_in = f.l00.rows();
                const std::size_t r = f.r11.rows();
                const std::size_t d_out = f.r22.rows();
                if (f.l00.cols() != d_in || f.r11.cols() != r || f.l11.rows() != r || f.l11.cols() != r ||
                    f.r22.cols() != d_out) {
                    throw ValidationError("Kronecker factor shapes are inconsistent");
                }
                if (want_cross && (f.l01->rows() != d_in || f.l01->cols() != r || f.r12->rows() != r ||
                                   f.r12->cols() != d_out)) {
                    throw ValidationError("Kronecker cross factor shapes are inconsistent");
                }
            }
            break;
        }
    }
    if (provenance.batches.empty()) {
        throw ValidationError("fitted curvature has empty provenance");
    }
}

CurvatureEstimate CurvatureEstimate::scaled(double c) const {
    CurvatureEstimate out = *this;
    if (auto* d = std::get_if<std::vector<DiagFactors>>(&out.payload)) {
        for (auto& f : *d) {
            for (double& v : f.d_a) {
                v *= c;
            }
            for (double& v : f.d_b) {
                v *= c;
            }
        }
    } else if (auto* k = std::get_if<std::vector<KfacFactors>>(&out.payload)) {
        for (auto& f : *k) {
            f.r11 *= c;
            f.r22 *= c;
            if (f.r12) {
                *f.r12 *= c;
            }
        }
    } else {
        throw ValidationError("identity curvature cannot be rescaled");
    }
    return out;
}

SourceBatches draw_source_batches(std::span<const LabeledDataset> sources, std::size_t per_subdataset,
                                  std::size_t batch_size, std::uint64_t seed) {
    if (sources.empty() || per_subdataset == 0) {
        throw ValidationError("draw_source_batches: need at least one sub-dataset and one batch each");
    }
    SourceBatches out;
    out.provenance.batches_per_subdataset = per_subdataset;
    for (std::size_t j = 0; j < sources.size(); ++j) {
        const std::uint64_t shuffle_seed = mix64(seed ^ mix64(streams::kLaplaceBatches + j));
        EpochBatches epoch(sources[j], batch_size, shuffle_seed, 0);
        if (epoch.count() < per_subdataset) {
            throw ValidationError(fmt::format("sub-dataset {} has only {} batches of size {}, {} requested", j,
                                              epoch.count(), batch_size, per_subdataset));
        }
        std::vector<Batch> batches;
        for (std::size_t i = 0; i < per_subdataset; ++i) {
            batches.push_back(epoch.batch(i));
            out.provenance.batches.push_back(
                BatchDescriptor{static_cast<std::uint32_t>(j), static_cast<std::uint32_t>(i), shuffle_seed});
        }
        out.per_subdataset.push_back(std::move(batches));
        out.provenance.subdatasets.push_back(static_cast<std::uint32_t>(j));
    }
    return out;
}

namespace {

ForwardTrace traced_backward(const Network& network, const Batch& batch) {
    if (network.adapter_count() == 0) {
        throw ValidationError("curvature: network has no adapters");
    }
    if (batch.size() == 0) {
        throw ValidationError("curvature: empty batch");
    }
    // Curvature reflects the deterministic predictor: no dropout.
    ForwardTrace trace = forward(network, batch.inputs, Mode::kEval);
    backward(network, trace, batch.labels);
    return trace;
}

void check_source(const SourceBatches& source) {
    if (source.per_subdataset.empty()) {
        throw ValidationError("curvature: empty batch list");
    }
    for (const auto& batches : source.per_subdataset) {
        if (batches.empty()) {
            throw ValidationError("curvature: a sub-dataset contributes no batches");
        }
    }
}

void add_into(Vector& acc, const Vector& v) {
    for (std::size_t i = 0; i < acc.size(); ++i) {
        acc[i] += v[i];
    }
}

// vec-ordered entrywise square of Σ_b u_b v_bᵀ (column-stacked).
Vector squared_sum_outer(const Matrix& u, const Matrix& v) {
    Vector out = vec(matmul_tn(u, v));
    for (double& e : out) {
        e *= e;
    }
    return out;
}

// vec-ordered mean over rows b of (u_b v_bᵀ)².
Vector mean_squared_outer(const Matrix& u, const Matrix& v) {
    const std::size_t m = u.cols();
    const std::size_t n = v.cols();
    Vector out(m * n, 0.0);
    for (std::size_t b = 0; b < u.rows(); ++b) {
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t i = 0; i < m; ++i) {
                const double e = u(b, i) * v(b, j);
                out[j * m + i] += e * e;
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(u.rows());
    for (double& e : out) {
        e *= inv;
    }
    return out;
}

Matrix mean_outer(const Matrix& u, const Matrix& v) {
    Matrix m = matmul_tn(u, v);
    m *= 1.0 / static_cast<double>(u.rows());
    return m;
}

}  // namespace

std::vector<DiagFactors> diag_batch(const Network& network, const Batch& batch, DiagReduction reduction) {
    const ForwardTrace trace = traced_backward(network, batch);
    std::vector<DiagFactors> out;
    for (const auto& at : trace.adapters) {
        // ∂ log p / ∂A = Σ_b g₁ xᵀ and ∂ log p / ∂B = Σ_b g₂ a₁ᵀ.
        if (reduction == DiagReduction::kPerBatch) {
            out.push_back(DiagFactors{squared_sum_outer(*at.g1, at.x), squared_sum_outer(*at.g2, at.a1)});
        } else {
            out.push_back(DiagFactors{mean_squared_outer(*at.g1, at.x), mean_squared_outer(*at.g2, at.a1)});
        }
    }
    return out;
}

CurvatureEstimate fit_diag(const Network& network, const SourceBatches& source, DiagOptions options) {
    check_source(source);
    std::vector<DiagFactors> total;
    for (const auto& batches : source.per_subdataset) {
        std::vector<DiagFactors> sub;
        for (const auto& batch : batches) {
            auto d = diag_batch(network, batch, options.reduction);
            if (sub.empty()) {
                sub = std::move(d);
                continue;
            }
            for (std::size_t a = 0; a < sub.size(); ++a) {
                add_into(sub[a].d_a, d[a].d_a);
                add_into(sub[a].d_b, d[a].d_b);
            }
        }
        if (options.accumulation == DiagAccumulation::kMean) {
            const double inv = 1.0 / static_cast<double>(batches.size());
            for (auto& f : sub) {
                for (double& v : f.d_a) {
                    v *= inv;
                }
                for (double& v : f.d_b) {
                    v *= inv;
                }
            }
        }
        if (total.empty()) {
            total = std::move(sub);
            continue;
        }
        for (std::size_t a = 0; a < total.size(); ++a) {
            add_into(total[a].d_a, sub[a].d_a);
            add_into(total[a].d_b, sub[a].d_b);
        }
    }
    return CurvatureEstimate{CurvatureKind::kDiag, std::move(total), source.provenance};
}

std::vector<KfacFactors> kfac_from_trace(const ForwardTrace& trace, bool with_cross) {
    std::vector<KfacFactors> out;
    for (const auto& at : trace.adapters) {
        if (!at.g1 || !at.g2) {
            throw ContractError("fit_kfac_batch: trace is missing backward signals");
        }
        KfacFactors f{mean_outer(at.x, at.x), mean_outer(*at.g1, *at.g1), mean_outer(at.a1, at.a1),
                      mean_outer(*at.g2, *at.g2), std::nullopt, std::nullopt};
        if (with_cross) {
            f.l01 = mean_outer(at.x, at.a1);
            f.r12 = mean_outer(*at.g1, *at.g2);
        }
        out.push_back(std::move(f));
    }
    return out;
}

std::vector<KfacFactors> fit_kfac_batch(const Network& network, const Batch& batch, bool with_cross) {
    return kfac_from_trace(traced_backward(network, batch), with_cross);
}

namespace {

void require_same_layout(const KfacFactors& a, const KfacFactors& b) {
    if (!a.l00.same_shape(b.l00) || !a.r11.same_shape(b.r11) || !a.l11.same_shape(b.l11) ||
        !a.r22.same_shape(b.r22) || a.has_cross() != b.has_cross() ||
        (a.has_cross() && (!a.l01->same_shape(*b.l01) || !a.r12->same_shape(*b.r12)))) {
        throw ValidationError("Kronecker factor sets disagree in shape");
    }
}

std::vector<KfacFactors> mean_of(std::span<const std::vector<KfacFactors>> sets) {
    if (sets.empty()) {
        throw ValidationError("average: no factor sets");
    }
    std::vector<KfacFactors> acc = sets.front();
    for (std::size_t s = 1; s < sets.size(); ++s) {
        if (sets[s].size() != acc.size()) {
            throw ValidationError("average: adapter count mismatch");
        }
        for (std::size_t a = 0; a < acc.size(); ++a) {
            const auto& f = sets[s][a];
            require_same_layout(acc[a], f);
            acc[a].l00 += f.l00;
            acc[a].r11 += f.r11;
            acc[a].l11 += f.l11;
            acc[a].r22 += f.r22;
            if (acc[a].has_cross()) {
                *acc[a].l01 += *f.l01;
                *acc[a].r12 += *f.r12;
            }
        }
    }
    if (sets.size() > 1) {
        const double inv = 1.0 / static_cast<double>(sets.size());
        for (auto& f : acc) {
            f.l00 *= inv;
            f.r11 *= inv;
            f.l11 *= inv;
            f.r22 *= inv;
            if (f.has_cross()) {
                *f.l01 *= inv;
                *f.r12 *= inv;
            }
        }
    }
    return acc;
}

}  // namespace

std::vector<KfacFactors> average_over_batches(std::span<const std::vector<KfacFactors>> factors) {
    return mean_of(factors);
}

CurvatureEstimate combine_subdatasets(std::span<const CurvatureEstimate> estimates) {
    if (estimates.empty()) {
        throw ValidationError("combine_subdatasets: no estimates");
    }
    const CurvatureKind kind = estimates.front().kind;
    for (const auto& e : estimates) {
        if (e.kind != kind) {
            throw ValidationError("combine_subdatasets: mixed curvature kinds");
        }
    }
    if (estimates.size() == 1) {
        return estimates.front();
    }
    CurvatureEstimate out{kind, {}, {}};
    out.provenance.batches_per_subdataset = estimates.front().provenance.batches_per_subdataset;
    for (const auto& e : estimates) {
        out.provenance.subdatasets.insert(out.provenance.subdatasets.end(), e.provenance.subdatasets.begin(),
                                          e.provenance.subdatasets.end());
        out.provenance.batches.insert(out.provenance.batches.end(), e.provenance.batches.begin(),
                                      e.provenance.batches.end());
    }
    switch (kind) {
        case CurvatureKind::kIdentity:
            out.payload = std::monostate{};
            break;
        case CurvatureKind::kDiag: {
            std::vector<DiagFactors> total = estimates.front().diag();
            for (std::size_t s = 1; s < estimates.size(); ++s) {
                const auto& d = estimates[s].diag();
                if (d.size() != total.size()) {
                    throw ValidationError("combine_subdatasets: adapter count mismatch");
                }
                for (std::size_t a = 0; a < total.size(); ++a) {
                    if (d[a].d_a.size() != total[a].d_a.size() || d[a].d_b.size() != total[a].d_b.size()) {
                        throw ValidationError("combine_subdatasets: diagonal length mismatch");
                    }
                    add_into(total[a].d_a, d[a].d_a);
                    add_into(total[a].d_b, d[a].d_b);
                }
            }
            out.payload = std::move(total);
            break;
        }
        case CurvatureKind::kBlockKfac:
        case CurvatureKind::kBlockTriKfac: {
            std::vector<std::vector<KfacFactors>> sets;
            for (const auto& e : estimates) {
                sets.push_back(e.kfac());
            }
            out.payload = mean_of(sets);
            break;
        }
    }
    return out;
}

CurvatureEstimate fit_kfac(const Network& network, const SourceBatches& source, bool with_cross) {
    check_source(source);
    std::vector<CurvatureEstimate> per_sub;
    std::size_t offset = 0;
    for (std::size_t j = 0; j < source.per_subdataset.size(); ++j) {
        const auto& batches = source.per_subdataset[j];
        std::vector<std::vector<KfacFactors>> factors;
        for (const auto& batch : batches) {
            factors.push_back(fit_kfac_batch(network, batch, with_cross));
        }
        Provenance prov;
        prov.batches_per_subdataset = source.provenance.batches_per_subdataset;
        if (j < source.provenance.subdatasets.size()) {
            prov.subdatasets.push_back(source.provenance.subdatasets[j]);
        }
        for (std::size_t i = 0; i < batches.size() && offset + i < source.provenance.batches.size(); ++i) {
            prov.batches.push_back(source.provenance.batches[offset + i]);
        }
        offset += batches.size();
        per_sub.push_back(CurvatureEstimate{with_cross ? CurvatureKind::kBlockTriKfac : CurvatureKind::kBlockKfac,
                                            average_over_batches(factors), std::move(prov)});
    }
    return combine_subdatasets(per_sub);
}

CurvatureEstimate identity_curvature() { return CurvatureEstimate{CurvatureKind::kIdentity, std::monostate{}, {}}; }

CurvatureEstimate fit_curvature(const Network& network, CurvatureKind kind, const SourceBatches& source,
                                DiagOptions diag_options) {
    switch (kind) {
        case CurvatureKind::kDiag:
            return fit_diag(network, source, diag_options);
        case CurvatureKind::kBlockKfac:
            return fit_kfac(network, source, false);
        case CurvatureKind::kBlockTriKfac:
            return fit_kfac(network, source, true);
        case CurvatureKind::kIdentity:
            return identity_curvature();
    }
    throw ValidationError("fit_curvature: unknown kind");
}

}  // namespace lalora
