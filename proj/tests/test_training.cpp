// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "lalora/errors.hpp"
#include "lalora/metrics.hpp"
#include "lalora/training.hpp"
#include "support.hpp"

namespace lalora {
namespace {

Task small_task(std::uint64_t seed) {
    TaskSpec spec;
    spec.seed = seed;
    spec.dim = 4;
    spec.classes = 3;
    spec.samples = 60;
    spec.eval_samples = 30;
    return generate_task(spec);
}

EvalSuite eval_for(const Task& target, const Task& source) { return EvalSuite{target.eval, {source.eval}}; }

LaplacePosterior identity_posterior(const Network& net) { return make_posterior(net, identity_curvature()); }

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.learning_rate = 0.0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.lambda = -1.0;
    EXPECT_THROW(c.validate(), ValidationError);
    c.lambda = std::numeric_limits<double>::infinity();
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.eval_every = 0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.adam.beta1 = 1.0;
    EXPECT_THROW(c.validate(), ValidationError);
}

TEST(TrainConfig, ParseTags) {
    EXPECT_EQ(parse_schedule("constant"), Schedule::kConstant);
    EXPECT_EQ(parse_schedule(to_string(Schedule::kLinearDecay)), Schedule::kLinearDecay);
    EXPECT_EQ(parse_optimizer("adam"), OptimizerKind::kAdam);
    EXPECT_EQ(parse_optimizer(to_string(OptimizerKind::kSgd)), OptimizerKind::kSgd);
    EXPECT_THROW(parse_schedule("cosine"), ValidationError);
    EXPECT_THROW(parse_optimizer("lion"), ValidationError);
}

TEST(LearningRate, LinearDecayAndConstant) {
    TrainConfig c;
    c.learning_rate = 0.4;
    c.schedule = Schedule::kLinearDecay;
    EXPECT_DOUBLE_EQ(learning_rate_at(c, 0, 10), 0.4);
    EXPECT_DOUBLE_EQ(learning_rate_at(c, 5, 10), 0.2);
    EXPECT_DOUBLE_EQ(learning_rate_at(c, 10, 10), 0.0);
    EXPECT_DOUBLE_EQ(learning_rate_at(c, 12, 10), 0.0);
    c.schedule = Schedule::kConstant;
    EXPECT_DOUBLE_EQ(learning_rate_at(c, 9, 10), 0.4);
}

TEST(Sgd, StepAndLengthCheck) {
    Vector p{1.0, -2.0};
    const Vector g{0.5, 4.0};
    sgd_step(p, g, 0.1);
    EXPECT_DOUBLE_EQ(p[0], 0.95);
    EXPECT_DOUBLE_EQ(p[1], -2.4);
    EXPECT_THROW(sgd_step(p, Vector{1.0}, 0.1), ContractError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    AdamState adam;
    Vector p{1.0, 1.0, 1.0};
    const Vector g{3.0, -0.01, 0.0};
    std::vector<std::span<double>> ps{p};
    std::vector<std::span<const double>> gs{g};
    adam.step(ps, gs, 0.1);
    EXPECT_EQ(adam.steps(), 1U);
    EXPECT_NEAR(p[0], 0.9, 1e-8);
    EXPECT_NEAR(p[1], 1.1, 1e-5);
    EXPECT_DOUBLE_EQ(p[2], 1.0);
}

TEST(Adam, SecondStepHandComputed) {
    AdamState adam;
    Vector p{0.0};
    std::vector<std::span<double>> ps{p};
    const Vector g1{1.0};
    const Vector g2{2.0};
    adam.step(ps, std::vector<std::span<const double>>{g1}, 1.0);
    const double after_first = p[0];
    adam.step(ps, std::vector<std::span<const double>>{g2}, 1.0);
    const double m = (0.9 * 0.1 * 1.0 + 0.1 * 2.0) / (1.0 - 0.81);
    const double v = (0.999 * 0.001 * 1.0 + 0.001 * 4.0) / (1.0 - 0.999 * 0.999);
    EXPECT_NEAR(p[0] - after_first, -m / (std::sqrt(v) + 1e-8), 1e-12);
}

TEST(Adam, SlotContract) {
    AdamState adam;
    Vector p{0.0, 0.0};
    Vector q{0.0};
    const Vector g{1.0, 1.0};
    std::vector<std::span<double>> ps{p};
    std::vector<std::span<const double>> gs{g};
    adam.step(ps, gs, 0.1);
    std::vector<std::span<double>> two{p, q};
    EXPECT_THROW(adam.step(two, gs, 0.1), ContractError);
    std::vector<std::span<double>> shorter{std::span<double>(p).first(1)};
    std::vector<std::span<const double>> gshort{std::span<const double>(g).first(1)};
    EXPECT_THROW(adam.step(shorter, gshort, 0.1), ContractError);
}

TEST(RegularizedLoss, CombinesNllAndPenalty) {
    const Network net = test::small_network(1);
    Network moved = net;
    moved.adapters()[0]->a(0, 0) += 0.7;
    const LaplacePosterior post = identity_posterior(net);
    const Batch batch = test::random_batch(1, 8, 4, 3);
    const LossResult plain = regularized_loss(moved, batch, nullptr, 0.0);
    const LossResult reg = regularized_loss(moved, batch, &post, 3.0);
    EXPECT_DOUBLE_EQ(plain.nll, reg.nll);
    EXPECT_DOUBLE_EQ(reg.reg, reg_value(post, moved));
    EXPECT_DOUBLE_EQ(reg.total, reg.nll + 3.0 * reg.reg);
    const AdapterGrads rg = reg_grad(post, moved);
    for (std::size_t k = 0; k < rg.size(); ++k) {
        const Matrix expected_a = plain.grads[k].a + 3.0 * rg[k].a;
        for (std::size_t i = 0; i < expected_a.size(); ++i) {
            EXPECT_NEAR(reg.grads[k].a.data()[i], expected_a.data()[i], 1e-14);
        }
    }
    EXPECT_THROW(regularized_loss(moved, batch, nullptr, 1.0), ValidationError);
    EXPECT_THROW(regularized_loss(moved, batch, &post, -1.0), ValidationError);
}

TEST(Pretrain, ZeroEpochsAndAdapterGuard) {
    const std::vector<std::size_t> dims{4, 8};
    const Network net = init_network(dims, 3, 2);
    const Task t = small_task(1);
    TrainConfig c;
    c.epochs = 0;
    const Network same = pretrain(net, std::span(&t.train, 1), c);
    EXPECT_EQ(base_weights_hash(same), base_weights_hash(net));
    EXPECT_THROW(pretrain(test::small_network(1), std::span(&t.train, 1), c), ValidationError);
}

TEST(Pretrain, ReducesSourceLoss) {
    const std::vector<std::size_t> dims{4, 16};
    const Network net = init_network(dims, 3, 2);
    const Task t = small_task(1);
    TrainConfig c;
    c.epochs = 20;
    c.batch_size = 10;
    c.learning_rate = 1e-2;
    c.schedule = Schedule::kConstant;
    const Network trained = pretrain(net, std::span(&t.train, 1), c);
    EXPECT_LT(evaluate_nll(trained, t.train), 0.8 * evaluate_nll(net, t.train));
}

TEST(Finetune, HistoryRowsAndFrozenBase) {
    Network net = test::small_network(2);
    const Task target = small_task(5);
    const Task source = small_task(6);
    const LaplacePosterior post{snapshot_adapters(net), identity_curvature()};
    const std::uint64_t base = base_weights_hash(net);
    TrainConfig c;
    c.epochs = 7;
    c.eval_every = 3;
    c.batch_size = 16;
    c.lambda = 1.0;
    const TrainHistory h = finetune(net, target.train, &post, c, eval_for(target, source));
    ASSERT_EQ(h.rows.size(), 7U / 3U + 1U);
    EXPECT_EQ(h.rows[0].epoch, 0U);
    EXPECT_EQ(h.rows[1].epoch, 3U);
    EXPECT_EQ(h.rows[2].epoch, 6U);
    EXPECT_EQ(h.rows[0].reg_value, 0.0);
    EXPECT_GT(h.rows[2].reg_value, 0.0);
    EXPECT_EQ(h.rows[0].source_acc.size(), 1U);
    EXPECT_EQ(base_weights_hash(net), base);
}

TEST(Finetune, LambdaZeroIgnoresPosterior) {
    const Network start = test::small_network(3);
    const Task target = small_task(5);
    const Task source = small_task(6);
    CounterRng rng(3, 1);
    CurvatureEstimate c;
    c.kind = CurvatureKind::kDiag;
    c.provenance = test::one_batch_provenance();
    std::vector<DiagFactors> ds;
    for (const auto* a : start.adapters()) {
        DiagFactors d{Vector(a->a.size(), 5.0), Vector(a->b.size(), 7.0)};
        ds.push_back(d);
    }
    c.payload = ds;
    const LaplacePosterior post = make_posterior(start, c);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.eval_every = 1;
    cfg.lambda = 0.0;
    Network with = start;
    Network without = start;
    finetune(with, target.train, &post, cfg, eval_for(target, source));
    finetune(without, target.train, nullptr, cfg, eval_for(target, source));
    const auto a = snapshot_adapters(with);
    const auto b = snapshot_adapters(without);
    for (std::size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(a[k].a, b[k].a);
        EXPECT_EQ(a[k].b, b[k].b);
    }
}

TEST(Finetune, ErrorPaths) {
    const Task target = small_task(5);
    const Task source = small_task(6);
    TrainConfig c;
    c.epochs = 1;
    const std::vector<std::size_t> dims{4, 5};
    Network bare = init_network(dims, 3, 1);
    EXPECT_THROW(finetune(bare, target.train, nullptr, c, eval_for(target, source)), ValidationError);
    Network net = test::small_network(4);
    c.lambda = 2.0;
    EXPECT_THROW(finetune(net, target.train, nullptr, c, eval_for(target, source)), ValidationError);
    const Network other = test::small_network(4, 4, 6, 3, 2);
    const LaplacePosterior wrong = identity_posterior(other);
    EXPECT_THROW(finetune(net, target.train, &wrong, c, eval_for(target, source)), ValidationError);
}

TEST(Finetune, DivergenceNamesTheStep) {
    Network net = test::small_network(5);
    const Task target = small_task(5);
    const Task source = small_task(6);
    TrainConfig c;
    c.epochs = 3;
    c.optimizer = OptimizerKind::kSgd;
    c.schedule = Schedule::kConstant;
    c.learning_rate = 1e300;
    try {
        finetune(net, target.train, nullptr, c, eval_for(target, source));
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
    }
}

}  // namespace
}  // namespace lalora
