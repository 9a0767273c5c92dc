// SPDX-License-Identifier: Apache-2.0
#include "lalora/oracle.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <fmt/format.h>

#include "lalora/errors.hpp"
#include "lalora/random.hpp"

namespace lalora::oracle {

std::vector<AdapterShape> shapes_of(const Network& network) {
    std::vector<AdapterShape> out;
    for (const auto* ad : network.adapters()) {
        out.push_back(AdapterShape{ad->rank, ad->in_dim(), ad->out_dim()});
    }
    return out;
}

std::vector<AdapterShape> shapes_of(const AdapterParams& params) {
    std::vector<AdapterShape> out;
    for (const auto& p : params) {
        out.push_back(AdapterShape{p.a.rows(), p.a.cols(), p.b.rows()});
    }
    return out;
}

namespace {

void guard(std::size_t dimension) {
    if (dimension > kDenseLimit) {
        throw SizeError(fmt::format("dense oracle: adapter dimension {} exceeds {}", dimension, kDenseLimit));
    }
}

using Vec = std::vector<double>;

// One example through the network, every quantity kept per layer.
struct Pass {
    std::vector<Vec> inputs;  // input to layer l
    std::vector<Vec> pre;     // pre-activation of layer l
    std::vector<Vec> low;     // A·x for adapted layers, empty otherwise
};

Pass run(const Network& net, std::span<const double> x0) {
    Pass p;
    Vec x(x0.begin(), x0.end());
    for (const auto& layer : net.layers) {
        const std::size_t n_out = layer.weight.rows();
        const std::size_t n_in = layer.weight.cols();
        Vec z(n_out, 0.0);
        for (std::size_t i = 0; i < n_out; ++i) {
            double s = layer.bias[i];
            for (std::size_t j = 0; j < n_in; ++j) {
                s += layer.weight(i, j) * x[j];
            }
            z[i] = s;
        }
        Vec low;
        if (layer.lora) {
            const auto& ad = *layer.lora;
            low.assign(ad.rank, 0.0);
            for (std::size_t a = 0; a < ad.rank; ++a) {
                for (std::size_t j = 0; j < n_in; ++j) {
                    low[a] += ad.a(a, j) * x[j];
                }
            }
            for (std::size_t i = 0; i < n_out; ++i) {
                double s = 0.0;
                for (std::size_t a = 0; a < ad.rank; ++a) {
                    s += ad.b(i, a) * low[a];
                }
                z[i] += ad.scale() * s;
            }
        }
        p.inputs.push_back(x);
        p.pre.push_back(z);
        p.low.push_back(low);
        x = z;
        if (layer.activation == Activation::kRelu) {
            for (double& v : x) {
                v = v > 0.0 ? v : 0.0;
            }
        }
    }
    return p;
}

// ∂ log p(y|x) / ∂ vec(A), ∂ vec(B) for every adapter, concatenated per adapter.
std::vector<Vec> example_gradients(const Network& net, std::span<const double> x0, Label y) {
    const Pass p = run(net, x0);
    const Vec& logits = p.pre.back();
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) {
        z += std::exp(v - m);
    }
    // δ = ∂ log p / ∂ pre-activation, starting from onehot − softmax.
    Vec delta(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        delta[i] = (i == y ? 1.0 : 0.0) - std::exp(logits[i] - m) / z;
    }
    std::vector<Vec> grads;
    for (std::size_t li = net.layers.size(); li-- > 0;) {
        const auto& layer = net.layers[li];
        const Vec& x = p.inputs[li];
        if (layer.lora) {
            const auto& ad = *layer.lora;
            const std::size_t r = ad.rank;
            const std::size_t d_in = x.size();
            const std::size_t d_out = delta.size();
            Vec g(r * (d_in + d_out), 0.0);
            // ∂/∂A[a,j] = c Σ_i δ_i B[i,a] x_j ; vec index j·r + a.
            for (std::size_t a = 0; a < r; ++a) {
                double bd = 0.0;
                for (std::size_t i = 0; i < d_out; ++i) {
                    bd += ad.b(i, a) * delta[i];
                }
                for (std::size_t j = 0; j < d_in; ++j) {
                    g[j * r + a] = ad.scale() * bd * x[j];
                }
            }
            // ∂/∂B[i,a] = c δ_i (A x)_a ; vec index a·d_out + i after the A block.
            for (std::size_t a = 0; a < r; ++a) {
                for (std::size_t i = 0; i < d_out; ++i) {
                    g[r * d_in + a * d_out + i] = ad.scale() * delta[i] * p.low[li][a];
                }
            }
            grads.push_back(std::move(g));
        }
        if (li == 0) {
            break;
        }
        // δ for the previous layer: (W + c B A)ᵀ δ through the previous ReLU.
        Vec back(x.size(), 0.0);
        for (std::size_t j = 0; j < x.size(); ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < delta.size(); ++i) {
                double w = layer.weight(i, j);
                if (layer.lora) {
                    const auto& ad = *layer.lora;
                    double ba = 0.0;
                    for (std::size_t a = 0; a < ad.rank; ++a) {
                        ba += ad.b(i, a) * ad.a(a, j);
                    }
                    w += ad.scale() * ba;
                }
                s += w * delta[i];
            }
            const bool active = net.layers[li - 1].activation != Activation::kRelu || p.pre[li - 1][j] > 0.0;
            back[j] = active ? s : 0.0;
        }
        delta = std::move(back);
    }
    std::reverse(grads.begin(), grads.end());
    return grads;
}

}  // namespace

Matrix per_example_adapter_gradients(const Network& network, const Batch& batch, std::size_t adapter) {
    const auto shapes = shapes_of(network);
    if (adapter >= shapes.size()) {
        throw ValidationError(fmt::format("adapter index {} out of range", adapter));
    }
    Matrix out(batch.size(), shapes[adapter].dimension());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto g = example_gradients(network, batch.inputs.row(b), batch.labels[b]);
        std::copy(g[adapter].begin(), g[adapter].end(), out.row(b).begin());
    }
    return out;
}

std::vector<Matrix> dense_empirical_fisher(const Network& network, const Batch& examples,
                                           FisherReduction reduction) {
    const auto shapes = shapes_of(network);
    if (shapes.empty()) {
        throw ValidationError("dense_empirical_fisher: network has no adapters");
    }
    if (examples.size() == 0) {
        throw ValidationError("dense_empirical_fisher: no examples");
    }
    for (const auto& s : shapes) {
        guard(s.dimension());
    }
    std::vector<Matrix> out;
    std::vector<Vec> sums;
    for (const auto& s : shapes) {
        out.emplace_back(s.dimension(), s.dimension());
        sums.emplace_back(s.dimension(), 0.0);
    }
    for (std::size_t b = 0; b < examples.size(); ++b) {
        const auto grads = example_gradients(network, examples.inputs.row(b), examples.labels[b]);
        for (std::size_t a = 0; a < grads.size(); ++a) {
            const Vec& g = grads[a];
            if (reduction == FisherReduction::kPerBatch) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    sums[a][i] += g[i];
                }
                continue;
            }
            for (std::size_t i = 0; i < g.size(); ++i) {
                for (std::size_t j = 0; j < g.size(); ++j) {
                    out[a](i, j) += g[i] * g[j];
                }
            }
        }
    }
    for (std::size_t a = 0; a < out.size(); ++a) {
        if (reduction == FisherReduction::kPerBatch) {
            for (std::size_t i = 0; i < sums[a].size(); ++i) {
                for (std::size_t j = 0; j < sums[a].size(); ++j) {
                    out[a](i, j) = sums[a][i] * sums[a][j];
                }
            }
        } else {
            out[a] *= 1.0 / static_cast<double>(examples.size());
        }
    }
    return out;
}

namespace {

// Explicit kron without the linalg helper.
void place_kron(Matrix& dst, std::size_t row0, std::size_t col0, const Matrix& p, const Matrix& q) {
    for (std::size_t i = 0; i < p.rows(); ++i) {
        for (std::size_t j = 0; j < p.cols(); ++j) {
            for (std::size_t k = 0; k < q.rows(); ++k) {
                for (std::size_t l = 0; l < q.cols(); ++l) {
                    dst(row0 + i * q.rows() + k, col0 + j * q.cols() + l) = p(i, j) * q(k, l);
                }
            }
        }
    }
}

}  // namespace

std::vector<Matrix> dense_from_curvature(const CurvatureEstimate& estimate, std::span<const AdapterShape> shapes) {
    if (estimate.kind != CurvatureKind::kIdentity && estimate.adapter_count() != shapes.size()) {
        throw ValidationError("dense_from_curvature: adapter count mismatch");
    }
    std::vector<Matrix> out;
    for (std::size_t a = 0; a < shapes.size(); ++a) {
        const auto& s = shapes[a];
        guard(s.dimension());
        Matrix m(s.dimension(), s.dimension());
        switch (estimate.kind) {
            case CurvatureKind::kIdentity:
                for (std::size_t i = 0; i < s.dimension(); ++i) {
                    m(i, i) = 1.0;
                }
                break;
            case CurvatureKind::kDiag: {
                const auto& d = estimate.diag()[a];
                if (d.d_a.size() != s.a_size() || d.d_b.size() != s.rank * s.d_out) {
                    throw ValidationError("dense_from_curvature: diagonal length mismatch");
                }
                for (std::size_t i = 0; i < d.d_a.size(); ++i) {
                    m(i, i) = d.d_a[i];
                }
                for (std::size_t i = 0; i < d.d_b.size(); ++i) {
                    m(s.a_size() + i, s.a_size() + i) = d.d_b[i];
                }
                break;
            }
            case CurvatureKind::kBlockKfac:
            case CurvatureKind::kBlockTriKfac: {
                const auto& f = estimate.kfac()[a];
                if (f.l00.rows() * f.r11.rows() != s.a_size() || f.l11.rows() * f.r22.rows() != s.rank * s.d_out) {
                    throw ValidationError("dense_from_curvature: factor shapes mismatch");
                }
                place_kron(m, 0, 0, f.l00, f.r11);
                place_kron(m, s.a_size(), s.a_size(), f.l11, f.r22);
                if (f.has_cross()) {
                    place_kron(m, 0, s.a_size(), *f.l01, *f.r12);
                    for (std::size_t i = 0; i < s.a_size(); ++i) {
                        for (std::size_t j = s.a_size(); j < s.dimension(); ++j) {
                            m(j, i) = m(i, j);
                        }
                    }
                }
                break;
            }
        }
        out.push_back(std::move(m));
    }
    return out;
}

Vector flatten(const AdapterParams& params) {
    Vector out;
    for (const auto& p : params) {
        for (std::size_t j = 0; j < p.a.cols(); ++j) {
            for (std::size_t i = 0; i < p.a.rows(); ++i) {
                out.push_back(p.a(i, j));
            }
        }
        for (std::size_t j = 0; j < p.b.cols(); ++j) {
            for (std::size_t i = 0; i < p.b.rows(); ++i) {
                out.push_back(p.b(i, j));
            }
        }
    }
    return out;
}

AdapterParams unflatten(std::span<const double> theta, std::span<const AdapterShape> shapes) {
    AdapterParams out;
    std::size_t pos = 0;
    for (const auto& s : shapes) {
        if (pos + s.dimension() > theta.size()) {
            throw SizeError("unflatten: parameter vector too short");
        }
        AdapterPair p{Matrix(s.rank, s.d_in), Matrix(s.d_out, s.rank)};
        for (std::size_t j = 0; j < s.d_in; ++j) {
            for (std::size_t i = 0; i < s.rank; ++i) {
                p.a(i, j) = theta[pos++];
            }
        }
        for (std::size_t j = 0; j < s.rank; ++j) {
            for (std::size_t i = 0; i < s.d_out; ++i) {
                p.b(i, j) = theta[pos++];
            }
        }
        out.push_back(std::move(p));
    }
    if (pos != theta.size()) {
        throw SizeError("unflatten: parameter vector too long");
    }
    return out;
}

double dense_quadratic(std::span<const Matrix> dense, const AdapterParams& params, const AdapterParams& means) {
    if (dense.size() != params.size() || means.size() != params.size()) {
        throw ValidationError("dense_quadratic: adapter count mismatch");
    }
    double total = 0.0;
    for (std::size_t a = 0; a < params.size(); ++a) {
        AdapterParams one{AdapterPair{params[a].a - means[a].a, params[a].b - means[a].b}};
        const Vector v = flatten(one);
        if (dense[a].rows() != v.size()) {
            throw ValidationError("dense_quadratic: dimension mismatch");
        }
        for (std::size_t i = 0; i < v.size(); ++i) {
            for (std::size_t j = 0; j < v.size(); ++j) {
                total += v[i] * dense[a](i, j) * v[j];
            }
        }
    }
    return total;
}

Vector finite_diff(const ScalarFn& f, std::span<const double> theta, double h,
                   std::span<const std::size_t> coordinates) {
    if (!(h > 0.0)) {
        throw ValidationError("finite_diff: step must be positive");
    }
    Vector work(theta.begin(), theta.end());
    Vector out;
    out.reserve(coordinates.size());
    for (std::size_t i : coordinates) {
        if (i >= work.size()) {
            throw ValidationError(fmt::format("finite_diff: coordinate {} out of range", i));
        }
        const double saved = work[i];
        work[i] = saved + h;
        const double up = f(work);
        work[i] = saved - h;
        const double down = f(work);
        work[i] = saved;
        out.push_back((up - down) / (2.0 * h));
    }
    return out;
}

Vector finite_diff(const ScalarFn& f, std::span<const double> theta, double h) {
    std::vector<std::size_t> all(theta.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    return finite_diff(f, theta, h, all);
}

std::vector<McEstimate> mc_delta_w_cov(const LaplacePosterior& posterior, std::size_t adapter,
                                       std::size_t samples, std::uint64_t seed, std::span<const CovIndex> entries,
                                       std::size_t blocks) {
    if (posterior.curvature.kind != CurvatureKind::kDiag) {
        throw ValidationError("mc_delta_w_cov needs a diagonal posterior");
    }
    const auto& diag = posterior.curvature.diag();
    if (adapter >= diag.size()) {
        throw ValidationError(fmt::format("adapter index {} out of range", adapter));
    }
    if (blocks < 2 || samples < blocks || samples % blocks != 0) {
        throw ValidationError("mc_delta_w_cov: samples must be a positive multiple of blocks >= 2");
    }
    const std::size_t r = posterior.means[adapter].a.rows();
    const std::size_t d_in = posterior.means[adapter].a.cols();
    const std::size_t d_out = posterior.means[adapter].b.rows();
    // Standard deviations in row-major layout; vec index of A[a,j] is j·r + a.
    Matrix sd_a(r, d_in);
    Matrix sd_b(d_out, r);
    for (std::size_t j = 0; j < d_in; ++j) {
        for (std::size_t a = 0; a < r; ++a) {
            const double d = diag[adapter].d_a[j * r + a];
            if (!(d > 0.0)) {
                throw SingularityError(fmt::format("mc_delta_w_cov: zero precision at A[{},{}]", a, j));
            }
            sd_a(a, j) = 1.0 / std::sqrt(d);
        }
    }
    for (std::size_t a = 0; a < r; ++a) {
        for (std::size_t i = 0; i < d_out; ++i) {
            const double d = diag[adapter].d_b[a * d_out + i];
            if (!(d > 0.0)) {
                throw SingularityError(fmt::format("mc_delta_w_cov: zero precision at B[{},{}]", i, a));
            }
            sd_b(i, a) = 1.0 / std::sqrt(d);
        }
    }
    for (const auto& e : entries) {
        if (e.p >= d_out || e.k >= d_out || e.q >= d_in || e.l >= d_in) {
            throw ValidationError("mc_delta_w_cov: index outside ΔW");
        }
    }
    // Per block: Σx, Σy, Σxy for every requested entry.
    const std::size_t per_block = samples / blocks;
    std::vector<std::array<double, 3>> block_sums(entries.size() * blocks, {0.0, 0.0, 0.0});
    CounterRng rng(seed, streams::kMonteCarlo);
    Matrix a(r, d_in);
    Matrix b(d_out, r);
    for (std::size_t s = 0; s < samples; ++s) {
        for (double& v : a.data()) {
            v = rng.normal();
        }
        for (double& v : b.data()) {
            v = rng.normal();
        }
        const std::size_t blk = s / per_block;
        for (std::size_t e = 0; e < entries.size(); ++e) {
            double x = 0.0;
            double y = 0.0;
            for (std::size_t al = 0; al < r; ++al) {
                x += b(entries[e].p, al) * sd_b(entries[e].p, al) * a(al, entries[e].q) * sd_a(al, entries[e].q);
                y += b(entries[e].k, al) * sd_b(entries[e].k, al) * a(al, entries[e].l) * sd_a(al, entries[e].l);
            }
            auto& acc = block_sums[e * blocks + blk];
            acc[0] += x;
            acc[1] += y;
            acc[2] += x * y;
        }
    }
    std::vector<McEstimate> out;
    const double n = static_cast<double>(samples);
    for (std::size_t e = 0; e < entries.size(); ++e) {
        std::array<double, 3> total{0.0, 0.0, 0.0};
        for (std::size_t k = 0; k < blocks; ++k) {
            for (int c = 0; c < 3; ++c) {
                total[c] += block_sums[e * blocks + k][c];
            }
        }
        const auto cov = [](const std::array<double, 3>& t, double count) {
            return t[2] / count - (t[0] / count) * (t[1] / count);
        };
        const double full = cov(total, n);
        Vector loo(blocks);
        double loo_mean = 0.0;
        for (std::size_t k = 0; k < blocks; ++k) {
            std::array<double, 3> t = total;
            for (int c = 0; c < 3; ++c) {
                t[c] -= block_sums[e * blocks + k][c];
            }
            loo[k] = cov(t, n - static_cast<double>(per_block));
            loo_mean += loo[k];
        }
        loo_mean /= static_cast<double>(blocks);
        double var = 0.0;
        for (double v : loo) {
            var += (v - loo_mean) * (v - loo_mean);
        }
        var *= static_cast<double>(blocks - 1) / static_cast<double>(blocks);
        out.push_back(McEstimate{full, std::sqrt(var)});
    }
    return out;
}

}  // namespace lalora::oracle
