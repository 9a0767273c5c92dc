// SPDX-License-Identifier: Apache-2.0
#include "lalora/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>

#include <fmt/format.h>

#include "lalora/checkpoint.hpp"
#include "lalora/commands.hpp"
#include "lalora/oracle.hpp"

namespace lalora::checks {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kCheckStream = 0xC4EC;

class Timer {
public:
    Timer() : start_(std::chrono::steady_clock::now()) {}
    [[nodiscard]] double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

CheckResult finish(int id, std::string name, bool passed, std::string detail, const Timer& timer) {
    return CheckResult{id, std::move(name), passed, std::move(detail), timer.seconds()};
}

std::size_t pick(CounterRng& rng, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

Matrix random_matrix(CounterRng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (auto& v : m.data()) {
        v = scale * rng.normal();
    }
    return m;
}

// G·Gᵀ with an extra column so the result is usually full rank.
Matrix random_psd(CounterRng& rng, std::size_t n) {
    const Matrix g = random_matrix(rng, n, n + 1);
    return matmul_nt(g, g);
}

Vector random_positive(CounterRng& rng, std::size_t n) {
    Vector v(n);
    for (auto& x : v) {
        x = 0.1 + rng.uniform() * 2.0;
    }
    return v;
}

Provenance one_batch(std::uint64_t seed) {
    return Provenance{{0}, 1, {BatchDescriptor{0, 0, seed}}};
}

std::vector<oracle::AdapterShape> random_shapes(CounterRng& rng, std::size_t max_in, std::size_t max_out,
                                                std::size_t max_rank) {
    std::vector<oracle::AdapterShape> shapes(pick(rng, 1, 2));
    for (auto& s : shapes) {
        s.rank = pick(rng, 1, max_rank);
        s.d_in = pick(rng, 1, max_in);
        s.d_out = pick(rng, 1, max_out);
    }
    return shapes;
}

AdapterParams random_params(CounterRng& rng, std::span<const oracle::AdapterShape> shapes) {
    AdapterParams p;
    for (const auto& s : shapes) {
        p.push_back(AdapterPair{random_matrix(rng, s.rank, s.d_in), random_matrix(rng, s.d_out, s.rank)});
    }
    return p;
}

CurvatureEstimate random_curvature(CurvatureKind kind, CounterRng& rng, std::span<const oracle::AdapterShape> shapes,
                                   std::uint64_t seed) {
    if (kind == CurvatureKind::kIdentity) {
        return identity_curvature();
    }
    CurvatureEstimate est;
    est.kind = kind;
    est.provenance = one_batch(seed);
    if (kind == CurvatureKind::kDiag) {
        std::vector<DiagFactors> d;
        for (const auto& s : shapes) {
            d.push_back(DiagFactors{random_positive(rng, s.rank * s.d_in), random_positive(rng, s.rank * s.d_out)});
        }
        est.payload = std::move(d);
        return est;
    }
    std::vector<KfacFactors> k;
    for (const auto& s : shapes) {
        KfacFactors f{random_psd(rng, s.d_in), random_psd(rng, s.rank), random_psd(rng, s.rank),
                      random_psd(rng, s.d_out), std::nullopt, std::nullopt};
        if (kind == CurvatureKind::kBlockTriKfac) {
            f.l01 = random_matrix(rng, s.d_in, s.rank);
            f.r12 = random_matrix(rng, s.rank, s.d_out);
        }
        k.push_back(std::move(f));
    }
    est.payload = std::move(k);
    return est;
}

// A small adapted network with random, nonzero A and B.
Network random_network(CounterRng& rng, std::uint64_t seed, std::size_t max_width) {
    const std::vector<std::size_t> dims{pick(rng, 2, max_width), pick(rng, 2, max_width)};
    const std::size_t classes = pick(rng, 2, 4);
    Network net = init_network(dims, classes, seed);
    std::vector<std::size_t> layers;
    const std::size_t mode = pick(rng, 0, 2);
    if (mode != 1) {
        layers.push_back(0);
    }
    if (mode != 0) {
        layers.push_back(1);
    }
    const std::size_t max_rank = std::min({std::size_t{3}, dims[0], dims[1], classes});
    net = attach_lora(std::move(net), layers, pick(rng, 1, max_rank), 2.0 + rng.uniform() * 14.0, seed);
    for (auto* a : net.adapters()) {
        a->a = random_matrix(rng, a->a.rows(), a->a.cols(), 0.5);
        a->b = random_matrix(rng, a->b.rows(), a->b.cols(), 0.5);
    }
    return net;
}

Batch random_batch(CounterRng& rng, const Network& net, std::size_t n) {
    Batch b{random_matrix(rng, n, net.input_dim()), {}};
    for (std::size_t i = 0; i < n; ++i) {
        b.labels.push_back(static_cast<Label>(rng.below(net.num_classes)));
    }
    return b;
}

bool close_rel(double a, double b, double rel) {
    return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b));
}

double max_abs(const Matrix& m) {
    double out = 0.0;
    for (double v : m.data()) {
        out = std::max(out, std::abs(v));
    }
    return out;
}

std::vector<fs::path> list_files(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) {
            out.push_back(fs::relative(e.path(), dir));
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

CheckResult oracle_equivalence(std::uint64_t seed, std::size_t instances) {
    const Timer timer;
    CounterRng rng(seed, kCheckStream + 1);
    std::size_t failures = 0;
    double worst = 0.0;
    for (std::size_t i = 0; i < instances; ++i) {
        const auto shapes = random_shapes(rng, 8, 8, 3);
        const AdapterParams means = random_params(rng, shapes);
        const AdapterParams params = random_params(rng, shapes);
        for (auto kind : {CurvatureKind::kDiag, CurvatureKind::kBlockKfac, CurvatureKind::kBlockTriKfac,
                          CurvatureKind::kIdentity}) {
            const LaplacePosterior post{means, random_curvature(kind, rng, shapes, seed + i)};
            const double fast = reg_value(post, params);
            const auto dense = oracle::dense_from_curvature(post.curvature, shapes);
            const double slow = oracle::dense_quadratic(dense, params, means);
            const double rel = std::abs(fast - slow) / std::max(std::abs(fast), std::abs(slow));
            worst = std::max(worst, rel);
            if (!close_rel(fast, slow, 1e-10)) {
                ++failures;
            }
        }
    }
    return finish(1, "oracle equivalence", failures == 0,
                  fmt::format("{} instances x 4 kinds, {} mismatches, worst relative error {:.2e}", instances,
                              failures, worst),
                  timer);
}

CheckResult single_sample_kfac(std::uint64_t seed, std::size_t pairs) {
    const Timer timer;
    CounterRng rng(seed, kCheckStream + 2);
    std::size_t failures = 0;
    double worst = 0.0;
    for (std::size_t i = 0; i < pairs; ++i) {
        const Network net = random_network(rng, seed * 1000 + i, 6);
        const Batch one = random_batch(rng, net, 1);
        CurvatureEstimate est;
        est.kind = CurvatureKind::kBlockTriKfac;
        est.payload = fit_kfac_batch(net, one, true);
        est.provenance = one_batch(seed + i);
        const auto shapes = oracle::shapes_of(net);
        const auto assembled = oracle::dense_from_curvature(est, shapes);
        const auto fisher = oracle::dense_empirical_fisher(net, one);
        for (std::size_t k = 0; k < shapes.size(); ++k) {
            const auto& m = assembled[k];
            const auto& f = fisher[k];
            for (std::size_t e = 0; e < m.size(); ++e) {
                const double a = m.data()[e];
                const double b = f.data()[e];
                if (a == b) {
                    continue;
                }
                const double rel = std::abs(a - b) / std::max(std::abs(a), std::abs(b));
                worst = std::max(worst, rel);
                if (rel > 1e-10) {
                    ++failures;
                }
            }
        }
    }
    return finish(2, "single-sample K-FAC exactness", failures == 0,
                  fmt::format("{} pairs, {} entries off, worst relative error {:.2e}", pairs, failures, worst), timer);
}

CheckResult gradient_check(std::uint64_t seed, std::size_t min_coordinates) {
    const Timer timer;
    CounterRng rng(seed, kCheckStream + 3);
    constexpr std::array kinds{CurvatureKind::kDiag, CurvatureKind::kBlockKfac, CurvatureKind::kBlockTriKfac,
                               CurvatureKind::kIdentity};
    constexpr std::array lambdas{0.0, 1.0, 1e3};
    const std::size_t combos = kinds.size() * lambdas.size();
    const std::size_t per_combo = (min_coordinates + combos - 1) / combos;
    std::size_t checked = 0;
    std::size_t failures = 0;
    double worst = 0.0;
    std::size_t round = 0;
    for (auto kind : kinds) {
        for (double lambda : lambdas) {
            std::size_t done = 0;
            while (done < per_combo) {
                Network net = random_network(rng, seed * 7919 + round++, 6);
                const auto shapes = oracle::shapes_of(net);
                const Batch batch = random_batch(rng, net, 5);
                const LaplacePosterior post{random_params(rng, shapes), random_curvature(kind, rng, shapes, seed)};
                const Vector theta = oracle::flatten(snapshot_adapters(net));
                auto f = [&](std::span<const double> t) {
                    Network copy = net;
                    restore_adapters(copy, oracle::unflatten(t, shapes));
                    return regularized_loss(copy, batch, &post, lambda).total;
                };
                const LossResult analytic = regularized_loss(net, batch, &post, lambda);
                AdapterParams as_params;
                for (const auto& g : analytic.grads) {
                    as_params.push_back(g);
                }
                const Vector grad = oracle::flatten(as_params);
                std::vector<std::size_t> coords;
                const std::size_t want = std::min(per_combo - done, theta.size());
                for (std::size_t c = 0; c < want; ++c) {
                    coords.push_back(static_cast<std::size_t>(rng.below(theta.size())));
                }
                const Vector fd = oracle::finite_diff(f, theta, 1e-6, coords);
                const double floor = 1e-8 * std::max(1.0, std::abs(analytic.total));
                for (std::size_t c = 0; c < coords.size(); ++c) {
                    const double a = grad[coords[c]];
                    const double err = std::abs(a - fd[c]);
                    const double scale = std::max(std::abs(a), std::abs(fd[c]));
                    if (scale > 0.0) {
                        worst = std::max(worst, err / std::max(scale, floor));
                    }
                    if (err > 1e-4 * scale + floor) {
                        ++failures;
                    }
                }
                done += coords.size();
                checked += coords.size();
            }
        }
    }
    return finish(3, "gradient correctness", failures == 0 && checked >= min_coordinates,
                  fmt::format("{} coordinates over 4 kinds x 3 lambdas, {} outside tolerance, worst {:.2e}", checked,
                              failures, worst),
                  timer);
}

CheckResult structural_invariants(std::uint64_t seed) {
    const Timer timer;
    CounterRng rng(seed, kCheckStream + 4);
    std::vector<std::string> broken;
    double worst_eig = 0.0;
    double worst_homog = 0.0;
    double worst_sym = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        const Network net = random_network(rng, seed * 31 + i, 6);
        SourceBatches source;
        for (std::uint32_t s = 0; s < 2; ++s) {
            source.per_subdataset.push_back({random_batch(rng, net, 6)});
            source.provenance.subdatasets.push_back(s);
            source.provenance.batches.push_back(BatchDescriptor{s, 0, seed + i});
        }
        source.provenance.batches_per_subdataset = 1;

        for (auto reduction : {DiagReduction::kPerBatch, DiagReduction::kPerExample}) {
            const auto diag = fit_diag(net, source, DiagOptions{reduction, DiagAccumulation::kSum});
            for (const auto& d : diag.diag()) {
                for (const auto* v : {&d.d_a, &d.d_b}) {
                    if (std::any_of(v->begin(), v->end(), [](double x) { return !(x >= 0.0); })) {
                        broken.emplace_back("negative diagonal Fisher entry");
                    }
                }
            }
        }
        const auto tri = fit_kfac(net, source, true);
        for (const auto& f : tri.kfac()) {
            for (const auto* m : {&f.l00, &f.r11, &f.l11, &f.r22}) {
                const double e = min_eig_lower_bound(*m);
                worst_eig = std::min(worst_eig, e);
                if (e < -1e-10) {
                    broken.emplace_back("K-FAC factor not PSD");
                }
            }
        }

        const auto shapes = oracle::shapes_of(net);
        for (auto kind : {CurvatureKind::kDiag, CurvatureKind::kBlockKfac, CurvatureKind::kBlockTriKfac,
                          CurvatureKind::kIdentity}) {
            const LaplacePosterior post = make_posterior(net, fit_curvature(net, kind, source));
            if (reg_value(post, post.means) != 0.0) {
                broken.emplace_back(fmt::format("{}: regularizer nonzero at the mean", to_string(kind)));
            }
            const AdapterParams moved = random_params(rng, shapes);
            const double base = reg_value(post, moved);
            for (double c : {0.5, 3.0, 1e3}) {
                if (kind == CurvatureKind::kIdentity) {
                    continue;
                }
                const LaplacePosterior scaled{post.means, post.curvature.scaled(c)};
                const double got = reg_value(scaled, moved);
                const double rel = std::abs(got - c * base) / std::abs(c * base);
                worst_homog = std::max(worst_homog, rel);
                if (rel > 1e-12) {
                    broken.emplace_back(fmt::format("{}: homogeneity off by {:.2e}", to_string(kind), rel));
                }
            }
            if (kind == CurvatureKind::kBlockTriKfac) {
                Network shifted = net;
                restore_adapters(shifted, moved);
                const auto [fwd, rev] = cross_term_symmetric(post, shifted);
                const double rel = std::abs(fwd - rev) / std::max({std::abs(fwd), std::abs(rev), 1e-300});
                worst_sym = std::max(worst_sym, rel);
                if (rel > 1e-12) {
                    broken.emplace_back(fmt::format("cross-term orderings differ by {:.2e}", rel));
                }
            }
        }
    }

    // Scalar factors L ∈ {2, 4}, R ∈ {3, 5}: the mean-of-factors product and
    // the four-term expansion both give 12.
    std::vector<CurvatureEstimate> parts;
    for (auto [l, r] : {std::pair{2.0, 3.0}, std::pair{4.0, 5.0}}) {
        CurvatureEstimate e;
        e.kind = CurvatureKind::kBlockKfac;
        e.provenance = one_batch(seed);
        e.payload = std::vector<KfacFactors>{
            KfacFactors{Matrix{{l}}, Matrix{{r}}, Matrix{{l}}, Matrix{{r}}, std::nullopt, std::nullopt}};
        parts.push_back(std::move(e));
    }
    const auto combined = combine_subdatasets(parts).kfac().front();
    const double product = combined.l00(0, 0) * combined.r11(0, 0);
    const double expansion = 0.25 * (2.0 * 3.0 + 4.0 * 5.0 + 2.0 * 5.0 + 4.0 * 3.0);
    if (product != 12.0 || expansion != 12.0) {
        broken.emplace_back(fmt::format("factor combination gives {} (expansion {})", product, expansion));
    }

    std::string detail = fmt::format("min eig {:.2e}, homogeneity {:.2e}, cross symmetry {:.2e}, combination {}",
                                     worst_eig, worst_homog, worst_sym, product);
    if (!broken.empty()) {
        detail += fmt::format("; {} violations, first: {}", broken.size(), broken.front());
    }
    return finish(4, "structural invariants", broken.empty(), detail, timer);
}

CheckResult collapse(std::uint64_t seed, std::size_t samples) {
    const Timer timer;
    CounterRng rng(seed, kCheckStream + 5);
    std::vector<std::string> broken;

    // Diagonal posterior with zero-mean A: Monte-Carlo against the closed form.
    const std::vector<oracle::AdapterShape> shapes{{2, 4, 3}};
    const AdapterParams zero{AdapterPair{Matrix(2, 4), Matrix(3, 2)}};
    const LaplacePosterior diag{zero, random_curvature(CurvatureKind::kDiag, rng, shapes, seed)};
    std::vector<oracle::CovIndex> entries;
    while (entries.size() < 20) {
        oracle::CovIndex e{rng.below(3), rng.below(4), 0, 0};
        if (entries.size() % 2 == 0) {
            e.k = e.p;
            e.l = e.q;
        } else {
            e.k = rng.below(3);
            e.l = rng.below(4);
        }
        entries.push_back(e);
    }
    const auto mc = oracle::mc_delta_w_cov(diag, 0, samples, seed, entries);
    double worst_z = 0.0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        const double exact = delta_w_cov_diag(diag, 0, e.p, e.q, e.k, e.l);
        const double z = std::abs(mc[i].covariance - exact) / mc[i].standard_error;
        worst_z = std::max(worst_z, z);
        if (!(z <= 5.0)) {
            broken.emplace_back(fmt::format("entry ({},{};{},{}) is {:.1f} standard errors away", e.p, e.q, e.k, e.l, z));
        }
    }

    // Block-diagonal K-FAC: collapsed scalar against a double loop, and the
    // collapsed covariance against sums over explicitly inverted kron blocks.
    double worst_scalar = 0.0;
    double worst_dense = 0.0;
    for (std::size_t t = 0; t < 10; ++t) {
        const std::vector<oracle::AdapterShape> s{{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}};
        const auto& sh = s.front();
        const LaplacePosterior post{random_params(rng, s), random_curvature(CurvatureKind::kBlockKfac, rng, s, seed)};
        const auto& f = post.curvature.kfac().front();
        const CollapsedCovariance cc = bkfac_collapse(post, 0);

        const Matrix l11_inv = inverse(f.l11);
        const Matrix r11_inv = inverse(f.r11);
        double scalar = 0.0;
        for (std::size_t a = 0; a < sh.rank; ++a) {
            for (std::size_t b = 0; b < sh.rank; ++b) {
                scalar += l11_inv(a, b) * r11_inv(a, b);
            }
        }
        const double rel = std::abs(scalar - cc.scalar) / std::abs(scalar);
        worst_scalar = std::max(worst_scalar, rel);
        if (rel > 1e-12) {
            broken.emplace_back(fmt::format("collapsed scalar off by {:.2e}", rel));
        }

        // cov(vec A) = (L00 ⊗ R11)⁻¹ with vec A index q·r + α; cov(vec B) = (L11 ⊗ R22)⁻¹ with index α·D_out + p.
        const Matrix cov_a = inverse(kron(f.l00, f.r11));
        const Matrix cov_b = inverse(kron(f.l11, f.r22));
        Matrix brute(sh.d_out * sh.d_in, sh.d_out * sh.d_in);
        for (std::size_t p = 0; p < sh.d_out; ++p) {
            for (std::size_t q = 0; q < sh.d_in; ++q) {
                for (std::size_t k = 0; k < sh.d_out; ++k) {
                    for (std::size_t l = 0; l < sh.d_in; ++l) {
                        double sum = 0.0;
                        for (std::size_t a = 0; a < sh.rank; ++a) {
                            for (std::size_t b = 0; b < sh.rank; ++b) {
                                sum += cov_b(a * sh.d_out + p, b * sh.d_out + k) * cov_a(q * sh.rank + a, l * sh.rank + b);
                            }
                        }
                        brute(p * sh.d_in + q, k * sh.d_in + l) = sum;
                    }
                }
            }
        }
        const double err = max_abs_diff(cc.scalar * cc.pattern, brute) / max_abs(brute);
        worst_dense = std::max(worst_dense, err);
        if (err > 1e-9) {
            broken.emplace_back(fmt::format("collapsed covariance off by {:.2e}", err));
        }
    }

    std::string detail = fmt::format("{} samples, worst |z| {:.2f}; scalar {:.2e}, dense covariance {:.2e}", samples,
                                     worst_z, worst_scalar, worst_dense);
    if (!broken.empty()) {
        detail += "; " + broken.front();
    }
    return finish(5, "delta-W covariance collapse", broken.empty(), detail, timer);
}

CheckResult sb_pin() {
    const Timer timer;
    // Reference diag row: (λ, L, F). The λ = 1 column is left out so the
    // normalization ranges are F ∈ [0.618, 0.658] and L ∈ [0.209, 0.276].
    const std::vector<SbInput> row{{0.0, 0.250, 0.618},  {10.0, 0.276, 0.635},  {1e2, 0.233, 0.646},
                                   {1e3, 0.232, 0.658},  {1e4, 0.226, 0.647},   {1e5, 0.209, 0.653},
                                   {1e6, 0.233, 0.658}};
    const SbResult sb = score_sb(row);
    const double got = sb.scores[1].score;
    const double expected = 0.7 * 1.0 + 0.3 * (0.635 - 0.618) / (0.658 - 0.618);

    std::vector<SbInput> full = row;
    full.insert(full.begin() + 1, SbInput{1.0, 0.265, 0.616});
    const double with_lambda_one = score_sb(full).scores[2].score;

    const bool passed = std::abs(got - 0.83) <= 0.005 && std::abs(got - expected) <= 1e-12;
    return finish(7, "S_B arithmetic pin", passed,
                  fmt::format("S_B(10) = {:.4f} (closed form {:.4f}); with the lambda = 1 column {:.4f}", got,
                              expected, with_lambda_one),
                  timer);
}

CheckResult cost_accounting(std::uint64_t seed) {
    const Timer timer;
    CounterRng rng(seed, kCheckStream + 9);
    std::vector<std::string> broken;
    std::vector<std::vector<oracle::AdapterShape>> cases{{{4, 20, 64}}};
    for (int i = 0; i < 10; ++i) {
        cases.push_back(random_shapes(rng, 12, 12, 4));
    }
    std::size_t rows_checked = 0;
    for (const auto& shapes : cases) {
        for (auto kind : {CurvatureKind::kDiag, CurvatureKind::kBlockKfac, CurvatureKind::kBlockTriKfac}) {
            const LaplacePosterior post{random_params(rng, shapes), random_curvature(kind, rng, shapes, seed)};
            TensorFile file;
            put_posterior(file, post);
            const TensorFile back = decode(encode(file));
            for (std::size_t a = 0; a < shapes.size(); ++a) {
                const auto& s = shapes[a];
                std::size_t formula = 0;
                switch (kind) {
                    case CurvatureKind::kDiag:
                        formula = s.rank * (s.d_in + s.d_out);
                        break;
                    case CurvatureKind::kBlockKfac:
                        formula = s.d_in * s.d_in + s.d_out * s.d_out + 2 * s.rank * s.rank;
                        break;
                    default:
                        formula = s.d_in * s.d_in + s.d_out * s.d_out + 2 * s.rank * s.rank + s.d_in * s.rank +
                                  s.rank * s.d_out;
                        break;
                }
                const std::size_t stored = stored_curvature_values(back, a);
                if (stored != formula) {
                    broken.emplace_back(fmt::format("{} r={} D_in={} D_out={}: stored {} expected {}", to_string(kind),
                                                    s.rank, s.d_in, s.d_out, stored, formula));
                }
                ++rows_checked;
            }
            try {
                (void)cost_report(post);
            } catch (const Error& e) {
                broken.emplace_back(e.what());
            }
        }
    }
    const std::size_t diag_ref = expected_storage(CurvatureKind::kDiag, 4, 20, 64);
    const std::size_t kfac_ref = expected_storage(CurvatureKind::kBlockKfac, 4, 20, 64);
    if (diag_ref != 336 || kfac_ref != 4528) {
        broken.emplace_back(fmt::format("reference shapes give {} and {}", diag_ref, kfac_ref));
    }
    std::string detail = fmt::format("{} adapter payloads; r=4, 20->64: diag {}, bkfac {}", rows_checked, diag_ref,
                                     kfac_ref);
    if (!broken.empty()) {
        detail += "; " + broken.front();
    }
    return finish(9, "cost accounting", broken.empty(), detail, timer);
}

CheckResult learning_forgetting(std::span<const SweepRecord> records, CurvatureKind kind,
                                std::span<const SweepRecord> fixture) {
    const Timer timer;
    std::vector<std::string> broken;
    std::map<double, std::pair<double, double>> pp;  // λ → (forgetting, learning) seed means
    std::map<double, std::size_t> counts;
    for (const auto& r : records) {
        if (r.kind != kind) {
            continue;
        }
        if (!r.ok) {
            broken.emplace_back(fmt::format("cell lambda={} seed={} failed: {}", r.lambda, r.seed, r.error));
            continue;
        }
        pp[r.lambda].first += r.forgetting_pp;
        pp[r.lambda].second += r.learning_pp;
        ++counts[r.lambda];
    }
    for (auto& [lambda, v] : pp) {
        v.first /= static_cast<double>(counts[lambda]);
        v.second /= static_cast<double>(counts[lambda]);
    }
    const auto points = average_by_lambda(records, kind);
    if (points.empty() || points.front().lambda != 0.0) {
        return finish(6, "learning-forgetting trend", false, "no lambda = 0 baseline in the records", timer);
    }
    const auto [forget0, learn0] = pp.at(0.0);
    if (!(forget0 >= 5.0 && learn0 >= 15.0)) {
        broken.emplace_back(fmt::format("baseline forgets {:.2f}pp and learns {:.2f}pp", forget0, learn0));
    }
    for (std::size_t i = 1; i < points.size(); ++i) {
        if (points[i].source_acc < points[i - 1].source_acc - 0.01) {
            broken.emplace_back(fmt::format("source accuracy drops from lambda={} to lambda={}", points[i - 1].lambda,
                                            points[i].lambda));
        }
    }
    double best_lambda = -1.0;
    for (const auto& [lambda, v] : pp) {
        if (lambda > 0.0 && v.first <= 0.5 * forget0 && v.second >= 0.7 * learn0) {
            best_lambda = lambda;
            break;
        }
    }
    if (best_lambda < 0.0) {
        broken.emplace_back("no lambda halves forgetting while keeping 70% of the target gain");
    }

    double fixture_gap = 0.0;
    if (!fixture.empty()) {
        const auto expected = average_by_lambda(fixture, kind);
        if (expected.size() != points.size()) {
            broken.emplace_back("lambda grid differs from the reference run");
        } else {
            for (std::size_t i = 0; i < points.size(); ++i) {
                if (expected[i].lambda != points[i].lambda) {
                    broken.emplace_back("lambda grid differs from the reference run");
                    break;
                }
                fixture_gap = std::max({fixture_gap, std::abs(expected[i].target_acc - points[i].target_acc),
                                        std::abs(expected[i].source_acc - points[i].source_acc)});
            }
            if (fixture_gap > 0.01) {
                broken.emplace_back(fmt::format("seed means drift {:.4f} from the reference run", fixture_gap));
            }
        }
    }

    std::string detail = fmt::format("lambda=0: forgetting {:.2f}pp, learning {:.2f}pp", forget0, learn0);
    if (best_lambda >= 0.0) {
        detail += fmt::format("; lambda={:g}: forgetting {:.2f}pp, learning {:.2f}pp", best_lambda,
                              pp.at(best_lambda).first, pp.at(best_lambda).second);
    }
    if (!fixture.empty()) {
        detail += fmt::format("; reference gap {:.4f}", fixture_gap);
    }
    if (!broken.empty()) {
        detail += "; " + broken.front();
    }
    return finish(6, "learning-forgetting trend", broken.empty(), detail, timer);
}

CheckResult update_separation(const RunConfig& config, const SweepOutput& output) {
    const Timer timer;
    std::vector<SweepRecord> records;
    for (const auto& c : output.cells) {
        records.push_back(c.record);
    }
    const auto points = average_by_lambda(records, CurvatureKind::kDiag);
    if (points.empty()) {
        return finish(8, "update-pattern separation", false, "no diag records", timer);
    }
    const double lambda = score_sb(points).lambda_stability;
    auto cell_for = [&](double l, std::uint64_t seed) -> const CellResult* {
        for (const auto& c : output.cells) {
            if (c.record.kind == CurvatureKind::kDiag && c.record.lambda == l && c.record.seed == seed &&
                c.record.ok) {
                return &c;
            }
        }
        return nullptr;
    };
    std::vector<std::string> parts;
    bool passed = true;
    for (auto seed : config.train.seeds) {
        const LaplacePosterior* post = nullptr;
        for (std::size_t i = 0; i < output.posteriors.size(); ++i) {
            if (output.posterior_keys[i] == std::make_pair(CurvatureKind::kDiag, seed)) {
                post = &output.posteriors[i];
            }
        }
        const CellResult* reg = cell_for(lambda, seed);
        const CellResult* base = cell_for(0.0, seed);
        if (post == nullptr || reg == nullptr || base == nullptr) {
            passed = false;
            parts.push_back(fmt::format("seed {}: missing runs", seed));
            continue;
        }
        const GroupReport g = group_analysis(*post, post->means, reg->final_params, base->final_params);
        const double flexible = g.groups[0].mean_change_regularized;
        const double important = g.groups[2].mean_change_regularized;
        const bool ok = important <= 0.1 * flexible;
        passed = passed && ok;
        parts.push_back(fmt::format("seed {}: {:.3g} vs {:.3g} ({:.1f}x)", seed, important, flexible,
                                    important > 0.0 ? flexible / important : INFINITY));
    }
    std::string detail = fmt::format("lambda_stability={:g}", lambda);
    for (const auto& p : parts) {
        detail += "; " + p;
    }
    return finish(8, "update-pattern separation", passed, detail, timer);
}

CheckResult determinism(const RunConfig& config, const fs::path& scratch) {
    const Timer timer;
    RunConfig one = config;
    double lambda = 0.0;
    for (double l : config.train.lambdas) {
        if (l > 0.0 && (lambda == 0.0 || l < lambda)) {
            lambda = l;
        }
    }
    const std::uint64_t seed = *std::min_element(config.train.seeds.begin(), config.train.seeds.end());
    const CurvatureKind kind = config.laplace.kinds.front();
    one.train.lambdas = {lambda};
    one.train.seeds = {seed};
    one.laplace.kinds = {kind};

    auto run = [&](const fs::path& dir) {
        fs::remove_all(dir);
        fs::create_directories(dir / "train");
        fs::create_directories(dir / "sweep");
        fs::create_directories(dir / "analyze");
        cmd_pretrain(one, dir / "pretrained.lalr");
        cmd_fit_laplace(one, dir / "pretrained.lalr", dir / "posterior.lalr", kind, seed);
        cmd_train(one, dir / "pretrained.lalr", dir / "posterior.lalr", dir / "train", lambda, seed);
        const auto code = cmd_sweep(one, dir / "pretrained.lalr", dir / "sweep", 2);
        if (code != ExitCode::kSuccess) {
            throw NumericError("sweep cell failed during the determinism run");
        }
        const fs::path adapters = dir / "train" / adapters_filename(kind, lambda, seed);
        AnalyzeInputs in{dir / "posterior.lalr", std::nullopt, std::nullopt, std::nullopt};
        if (kind == CurvatureKind::kDiag) {
            in.after_regularized = adapters;
            in.after_baseline = adapters;
        }
        cmd_analyze(in, dir / "analyze");
    };
    const fs::path a = scratch / "run_a";
    const fs::path b = scratch / "run_b";
    run(a);
    run(b);

    const auto files_a = list_files(a);
    const auto files_b = list_files(b);
    std::vector<std::string> broken;
    std::size_t checkpoints = 0;
    if (files_a != files_b) {
        broken.emplace_back("the two runs wrote different file sets");
    } else {
        for (const auto& rel : files_a) {
            const auto bytes_a = read_file(a / rel);
            const auto bytes_b = read_file(b / rel);
            if (bytes_a != bytes_b) {
                broken.push_back(fmt::format("{} differs", rel.string()));
                continue;
            }
            if (rel.extension() == ".lalr") {
                ++checkpoints;
                if (crc32_of(std::span(bytes_a).subspan(4, bytes_a.size() - 8)) !=
                    crc32_of(std::span(bytes_b).subspan(4, bytes_b.size() - 8))) {
                    broken.push_back(fmt::format("{} CRC differs", rel.string()));
                }
            }
        }
    }
    std::string detail = fmt::format("{} files ({} checkpoints) compared, lambda={:g}, seed={}", files_a.size(),
                                     checkpoints, lambda, seed);
    if (!broken.empty()) {
        detail += "; " + broken.front();
    }
    return finish(10, "determinism", broken.empty(), detail, timer);
}

std::string format_line(const CheckResult& r) {
    return fmt::format("[{}] criterion {:>2} {} ({:.2f} s): {}", r.passed ? "PASS" : "FAIL", r.id, r.name, r.seconds,
                       r.detail);
}

std::vector<CheckResult> run_oracle_suite(std::uint64_t seed) {
    std::vector<CheckResult> out;
    auto guarded = [&](int id, const char* name, auto&& fn) {
        try {
            out.push_back(fn());
        } catch (const std::exception& e) {
            out.push_back(CheckResult{id, name, false, fmt::format("threw: {}", e.what()), 0.0});
        }
    };
    guarded(1, "oracle equivalence", [&] { return oracle_equivalence(seed); });
    guarded(2, "single-sample K-FAC exactness", [&] { return single_sample_kfac(seed); });
    guarded(3, "gradient correctness", [&] { return gradient_check(seed); });
    guarded(4, "structural invariants", [&] { return structural_invariants(seed); });
    guarded(5, "delta-W covariance collapse", [&] { return collapse(seed); });
    guarded(7, "S_B arithmetic pin", [] { return sb_pin(); });
    guarded(9, "cost accounting", [&] { return cost_accounting(seed); });
    return out;
}

}  // namespace lalora::checks
