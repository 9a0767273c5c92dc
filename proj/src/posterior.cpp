// SPDX-License-Identifier: Apache-2.0
#include "lalora/posterior.hpp"

#include <fmt/format.h>

#include "lalora/errors.hpp"

namespace lalora {

void LaplacePosterior::check_compatible(const AdapterParams& params) const {
    if (params.size() != means.size()) {
        throw ValidationError(
            fmt::format("posterior has {} adapters, parameters have {}", means.size(), params.size()));
    }
    for (std::size_t i = 0; i < means.size(); ++i) {
        if (!params[i].a.same_shape(means[i].a) || !params[i].b.same_shape(means[i].b)) {
            throw ValidationError(fmt::format("adapter {} shape differs from the posterior mean", i));
        }
    }
    if (curvature.kind != CurvatureKind::kIdentity && curvature.adapter_count() != means.size()) {
        throw ValidationError("curvature adapter count differs from the posterior mean");
    }
    if (curvature.kind == CurvatureKind::kDiag) {
        const auto& d = curvature.diag();
        for (std::size_t i = 0; i < means.size(); ++i) {
            if (d[i].d_a.size() != means[i].a.size() || d[i].d_b.size() != means[i].b.size()) {
                throw ValidationError(fmt::format("adapter {} diagonal precision length mismatch", i));
            }
        }
    } else if (curvature.kind != CurvatureKind::kIdentity) {
        const auto& k = curvature.kfac();
        for (std::size_t i = 0; i < means.size(); ++i) {
            const auto& f = k[i];
            const std::size_t r = means[i].a.rows();
            if (f.l00.rows() != means[i].a.cols() || f.r11.rows() != r || f.l11.rows() != r ||
                f.r22.rows() != means[i].b.rows()) {
                throw ValidationError(fmt::format("adapter {} Kronecker factor shape mismatch", i));
            }
        }
    }
}

void LaplacePosterior::check_compatible(const Network& network) const {
    check_compatible(snapshot_adapters(network));
}

LaplacePosterior make_posterior(const Network& network, CurvatureEstimate curvature) {
    if (network.adapter_count() == 0) {
        throw ValidationError("posterior needs a network with adapters");
    }
    LaplacePosterior post;
    for (const auto* ad : network.adapters()) {
        post.means.push_back(AdapterPair{ad->a, Matrix(ad->b.rows(), ad->b.cols())});
    }
    post.curvature = std::move(curvature);
    post.curvature.validate();
    post.check_compatible(network);
    return post;
}

namespace {

double diag_quad(const Vector& d, const Matrix& delta) {
    const Vector v = vec(delta);
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += d[i] * v[i] * v[i];
    }
    return s;
}

Matrix diag_grad(const Vector& d, const Matrix& delta) {
    Vector v = vec(delta);
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] *= 2.0 * d[i];
    }
    return unvec(v, delta.rows(), delta.cols());
}

}  // namespace

double reg_value(const LaplacePosterior& posterior, const AdapterParams& params) {
    posterior.check_compatible(params);
    const auto& cur = posterior.curvature;
    double total = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Matrix da = params[i].a - posterior.means[i].a;
        const Matrix db = params[i].b - posterior.means[i].b;
        switch (cur.kind) {
            case CurvatureKind::kIdentity:
                total += squared_norm(da) + squared_norm(db);
                break;
            case CurvatureKind::kDiag: {
                const auto& d = cur.diag()[i];
                total += diag_quad(d.d_a, da) + diag_quad(d.d_b, db);
                break;
            }
            case CurvatureKind::kBlockKfac:
            case CurvatureKind::kBlockTriKfac: {
                const auto& f = cur.kfac()[i];
                total += kron_quadform(f.l00, f.r11, da, da) + kron_quadform(f.l11, f.r22, db, db);
                if (f.has_cross()) {
                    total += 2.0 * kron_quadform(*f.l01, *f.r12, da, db);
                }
                break;
            }
        }
    }
    return total;
}

double reg_value(const LaplacePosterior& posterior, const Network& network) {
    return reg_value(posterior, snapshot_adapters(network));
}

AdapterGrads reg_grad(const LaplacePosterior& posterior, const AdapterParams& params) {
    posterior.check_compatible(params);
    const auto& cur = posterior.curvature;
    AdapterGrads grads;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Matrix da = params[i].a - posterior.means[i].a;
        const Matrix db = params[i].b - posterior.means[i].b;
        switch (cur.kind) {
            case CurvatureKind::kIdentity:
                grads.push_back(AdapterPair{2.0 * da, 2.0 * db});
                break;
            case CurvatureKind::kDiag: {
                const auto& d = cur.diag()[i];
                grads.push_back(AdapterPair{diag_grad(d.d_a, da), diag_grad(d.d_b, db)});
                break;
            }
            case CurvatureKind::kBlockKfac:
            case CurvatureKind::kBlockTriKfac: {
                const auto& f = cur.kfac()[i];
                // ∇_X ⟨X, R X Lᵀ⟩ = R X Lᵀ + Rᵀ X L.
                Matrix ga = kron_apply(f.l00, f.r11, da) + kron_apply(transpose(f.l00), transpose(f.r11), da);
                Matrix gb = kron_apply(f.l11, f.r22, db) + kron_apply(transpose(f.l11), transpose(f.r22), db);
                if (f.has_cross()) {
                    // 2⟨ΔA, R12 ΔB L01ᵀ⟩
                    ga += 2.0 * kron_apply(*f.l01, *f.r12, db);
                    gb += 2.0 * matmul(matmul_tn(*f.r12, da), *f.l01);
                }
                grads.push_back(AdapterPair{std::move(ga), std::move(gb)});
                break;
            }
        }
    }
    return grads;
}

AdapterGrads reg_grad(const LaplacePosterior& posterior, const Network& network) {
    return reg_grad(posterior, snapshot_adapters(network));
}

std::pair<double, double> cross_term_symmetric(const LaplacePosterior& posterior, const Network& network) {
    if (posterior.curvature.kind != CurvatureKind::kBlockTriKfac) {
        throw ValidationError("cross_term_symmetric needs a block tri-diagonal posterior");
    }
    const AdapterParams params = snapshot_adapters(network);
    posterior.check_compatible(params);
    double forward = 0.0;
    double reverse = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& f = posterior.curvature.kfac()[i];
        const Matrix da = params[i].a - posterior.means[i].a;
        const Matrix db = params[i].b - posterior.means[i].b;
        forward += kron_quadform(*f.l01, *f.r12, da, db);
        reverse += kron_quadform(transpose(*f.l01), transpose(*f.r12), db, da);
    }
    return {forward, reverse};
}

double delta_w_cov_diag(const LaplacePosterior& posterior, std::size_t adapter, std::size_t p, std::size_t q,
                        std::size_t k, std::size_t l) {
    if (posterior.curvature.kind != CurvatureKind::kDiag) {
        throw ValidationError("delta_w_cov_diag needs a diagonal posterior");
    }
    const auto& diag = posterior.curvature.diag();
    if (adapter >= diag.size()) {
        throw ValidationError(fmt::format("adapter index {} out of range", adapter));
    }
    const Matrix& mu_a = posterior.means[adapter].a;
    const Matrix& mu_b = posterior.means[adapter].b;
    const std::size_t r = mu_a.rows();
    const std::size_t d_in = mu_a.cols();
    const std::size_t d_out = mu_b.rows();
    if (p >= d_out || k >= d_out || q >= d_in || l >= d_in) {
        throw ValidationError(fmt::format("index ({},{},{},{}) outside ΔW of shape {}x{}", p, q, k, l, d_out, d_in));
    }
    if (p != k || q != l) {
        return 0.0;
    }
    const Matrix prec_a = unvec(diag[adapter].d_a, r, d_in);
    const Matrix prec_b = unvec(diag[adapter].d_b, d_out, r);
    double s = 0.0;
    for (std::size_t alpha = 0; alpha < r; ++alpha) {
        const double pb = prec_b(p, alpha);
        const double pa = prec_a(alpha, q);
        if (pb <= 0.0 || pa <= 0.0) {
            throw SingularityError(
                fmt::format("zero precision at B[{},{}] or A[{},{}] has no covariance", p, alpha, alpha, q));
        }
        s += (1.0 / pb) * (1.0 / pa);
    }
    return s;
}

double elementwise_product_sum(const Matrix& x, const Matrix& y) {
    if (!x.same_shape(y)) {
        throw SizeError("elementwise_product_sum: shape mismatch");
    }
    double s = 0.0;
    for (std::size_t a = 0; a < x.rows(); ++a) {
        for (std::size_t b = 0; b < x.cols(); ++b) {
            s += x(a, b) * y(a, b);
        }
    }
    return s;
}

CollapsedCovariance bkfac_collapse(const LaplacePosterior& posterior, std::size_t adapter) {
    if (posterior.curvature.kind != CurvatureKind::kBlockKfac) {
        throw ValidationError("bkfac_collapse needs a block-diagonal K-FAC posterior");
    }
    const auto& k = posterior.curvature.kfac();
    if (adapter >= k.size()) {
        throw ValidationError(fmt::format("adapter index {} out of range", adapter));
    }
    const auto& f = k[adapter];
    return CollapsedCovariance{kron(inverse(f.r22), inverse(f.l00)),
                               elementwise_product_sum(inverse(f.l11), inverse(f.r11))};
}

}  // namespace lalora
