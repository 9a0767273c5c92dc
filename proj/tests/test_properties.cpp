// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "lalora/harness.hpp"
#include "lalora/oracle.hpp"
#include "support.hpp"

namespace lalora {
namespace {

std::vector<CurvatureEstimate> fitted_kinds(const Network& net, const SourceBatches& batches) {
    std::vector<CurvatureEstimate> out;
    for (auto kind : {CurvatureKind::kDiag, CurvatureKind::kBlockKfac, CurvatureKind::kBlockTriKfac}) {
        out.push_back(fit_curvature(net, kind, batches));
    }
    return out;
}

SourceBatches sample_batches(std::uint64_t seed) {
    RunConfig c = test::tiny_config();
    c.laplace.batches_per_subdataset = 2;
    c.model.input_dim = 4;
    c.data.samples = 60;
    return laplace_batches(c, build_suite(c), seed);
}

TEST(Property, CurvatureIgnoresBatchOrder) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Network net = test::small_network(seed);
        const SourceBatches batches = sample_batches(seed);
        SourceBatches reversed = batches;
        std::reverse(reversed.per_subdataset.begin(), reversed.per_subdataset.end());
        for (auto& per : reversed.per_subdataset) {
            std::reverse(per.begin(), per.end());
        }
        const auto a = fitted_kinds(net, batches);
        const auto b = fitted_kinds(net, reversed);
        const Network moved = test::small_network(seed + 100);
        for (std::size_t k = 0; k < a.size(); ++k) {
            const LaplacePosterior pa = make_posterior(net, a[k]);
            const LaplacePosterior pb = make_posterior(net, b[k]);
            const double va = reg_value(pa, moved);
            EXPECT_NEAR(va, reg_value(pb, moved), 1e-12 * std::abs(va)) << to_string(a[k].kind);
        }
    }
}

TEST(Property, RegularizerIsNonnegativeAndQuadratic) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Network net = test::small_network(seed);
        for (const auto& c : fitted_kinds(net, sample_batches(seed))) {
            const LaplacePosterior p{snapshot_adapters(net), c};
            const auto mu = oracle::flatten(p.means);
            const auto x = oracle::flatten(snapshot_adapters(test::small_network(seed + 50)));
            const auto shapes = oracle::shapes_of(net);
            auto at = [&](double t) {
                Vector v(mu.size());
                for (std::size_t i = 0; i < v.size(); ++i) {
                    v[i] = mu[i] + t * (x[i] - mu[i]);
                }
                return reg_value(p, oracle::unflatten(v, shapes));
            };
            const double base = at(1.0);
            EXPECT_GE(base, 0.0);
            EXPECT_NEAR(at(-1.0), base, 1e-12 * base);
            EXPECT_NEAR(at(2.5), 6.25 * base, 1e-11 * base);
        }
    }
}

TEST(Property, RegularizationPressureGrowsWithLambda) {
    RunConfig c = test::tiny_config();
    c.train.base.epochs = 4;
    const TaskSuite suite = build_suite(c);
    const Network base = build_pretrained(c, suite);
    const Network adapted = attach_adapters(c, base, 1);
    const LaplacePosterior post = fit_posterior(c, adapted, suite, CurvatureKind::kDiag, 1);
    const Baseline baseline = measure_baseline(base, eval_suite_of(suite));
    std::vector<double> regs;
    for (double lambda : {0.0, 1.0, 10.0, 100.0, 1000.0}) {
        const CellResult cell = run_cell(c, adapted, post, suite, baseline, lambda, 1);
        regs.push_back(reg_value(post, cell.final_params));
        if (regs.size() > 1) {
            EXPECT_LE(regs.back(), regs[regs.size() - 2]) << "lambda " << lambda;
        }
    }
    EXPECT_LT(regs.back(), 0.5 * regs.front());
}

TEST(Property, CellsAreBitReproducible) {
    const RunConfig c = test::tiny_config();
    const TaskSuite suite = build_suite(c);
    const Network base = build_pretrained(c, suite);
    EXPECT_EQ(base_weights_hash(base), base_weights_hash(build_pretrained(c, suite)));
    const Network adapted = attach_adapters(c, base, 2);
    const LaplacePosterior post = fit_posterior(c, adapted, suite, CurvatureKind::kBlockTriKfac, 2);
    const Baseline baseline = measure_baseline(base, eval_suite_of(suite));
    const CellResult a = run_cell(c, adapted, post, suite, baseline, 10.0, 2);
    const CellResult b = run_cell(c, adapted, post, suite, baseline, 10.0, 2);
    for (std::size_t k = 0; k < a.final_params.size(); ++k) {
        EXPECT_EQ(a.final_params[k].a, b.final_params[k].a);
        EXPECT_EQ(a.final_params[k].b, b.final_params[k].b);
    }
    EXPECT_EQ(records_csv(std::span(&a.record, 1), 2), records_csv(std::span(&b.record, 1), 2));
}

TEST(Property, LearningAndForgettingBookkeeping) {
    const RunConfig c = test::tiny_config();
    const TaskSuite suite = build_suite(c);
    const Network base = build_pretrained(c, suite);
    const SweepOutput out = sweep(c, base, suite, 1);
    for (const auto& cell : out.cells) {
        const auto& r = cell.record;
        EXPECT_NEAR(r.learning_pp, 100.0 * (r.final_target_acc - out.baseline.target_acc), 1e-9);
        EXPECT_NEAR(r.forgetting_pp, 100.0 * (out.baseline.source_acc_mean - r.final_source_acc_mean), 1e-9);
        double mean = 0.0;
        for (double s : r.per_subdataset_source_acc) {
            mean += s;
        }
        EXPECT_NEAR(mean / static_cast<double>(r.per_subdataset_source_acc.size()), r.final_source_acc_mean, 1e-15);
        // The first history row is the untouched adapted network.
        EXPECT_EQ(cell.history.rows.front().epoch, 0U);
        EXPECT_NEAR(cell.history.rows.back().target_acc, r.final_target_acc, 1e-15);
    }
}

TEST(Property, ParetoFrontIsUndominatedAndCovering) {
    CounterRng rng(7, 1);
    auto dominates = [](const SbInput& a, const SbInput& b) {
        return a.source_acc >= b.source_acc && a.target_acc >= b.target_acc &&
               (a.source_acc > b.source_acc || a.target_acc > b.target_acc);
    };
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<SbInput> pts;
        const std::size_t n = 1 + rng.below(12);
        for (std::size_t i = 0; i < n; ++i) {
            // Coarse grid so ties and duplicates occur.
            pts.push_back(SbInput{static_cast<double>(i), static_cast<double>(rng.below(5)) / 4.0,
                                  static_cast<double>(rng.below(5)) / 4.0});
        }
        const auto front = pareto_front(pts);
        ASSERT_FALSE(front.empty());
        for (std::size_t i = 0; i < n; ++i) {
            const bool on = std::find(front.begin(), front.end(), i) != front.end();
            const bool dominated = std::any_of(pts.begin(), pts.end(), [&](const SbInput& q) { return dominates(q, pts[i]); });
            EXPECT_EQ(on, !dominated);
        }
    }
}

TEST(Property, ScoreSbInvariantUnderAffineRescaling) {
    CounterRng rng(8, 1);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<SbInput> pts;
        std::vector<SbInput> scaled;
        for (std::size_t i = 0; i < 6; ++i) {
            const SbInput p{static_cast<double>(i), rng.uniform(), rng.uniform()};
            pts.push_back(p);
            scaled.push_back(SbInput{p.lambda, 3.0 * p.target_acc + 1.0, 0.5 * p.source_acc - 2.0});
        }
        const SbResult a = score_sb(pts);
        const SbResult b = score_sb(scaled);
        EXPECT_EQ(a.lambda_plasticity, b.lambda_plasticity);
        EXPECT_EQ(a.lambda_stability, b.lambda_stability);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            EXPECT_NEAR(a.scores[i].score, b.scores[i].score, 1e-12);
            EXPECT_GE(a.scores[i].score, 0.0);
            EXPECT_LE(a.scores[i].score, 1.0);
        }
        const auto best = std::max_element(a.scores.begin(), a.scores.end(),
                                           [](const SbScore& x, const SbScore& y) { return x.score < y.score; });
        EXPECT_EQ(best->lambda, a.lambda_plasticity);
    }
}

TEST(Property, GroupSizesFollowRanks) {
    CounterRng rng(9, 1);
    for (std::size_t d = 1; d <= 12; ++d) {
        CurvatureEstimate c;
        c.kind = CurvatureKind::kDiag;
        c.provenance = test::one_batch_provenance();
        DiagFactors f{Vector(d), Vector(d)};
        for (auto& v : f.d_a) {
            v = rng.uniform();
        }
        for (auto& v : f.d_b) {
            v = rng.uniform();
        }
        c.payload = std::vector<DiagFactors>{f};
        const LaplacePosterior p{{AdapterPair{Matrix(1, d), Matrix(d, 1)}}, c};
        const GroupReport g = group_analysis(p, p.means, p.means, p.means);
        const std::size_t n = 2 * d;
        EXPECT_EQ(g.groups[0].count + g.groups[1].count + g.groups[2].count, n);
        EXPECT_EQ(g.groups[0].count, n * 6 / 10);
        EXPECT_EQ(g.groups[2].count, n - n * 9 / 10);
        if (g.groups[0].count > 0 && g.groups[2].count > 0) {
            EXPECT_LE(g.groups[0].max_precision, g.groups[2].min_precision);
        }
    }
}

}  // namespace
}  // namespace lalora
