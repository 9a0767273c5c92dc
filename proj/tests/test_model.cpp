// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "lalora/errors.hpp"
#include "lalora/metrics.hpp"
#include "lalora/model.hpp"
#include "lalora/oracle.hpp"
#include "support.hpp"

namespace lalora {
namespace {

TEST(InitNetwork, ShapeChain) {
    const std::vector<std::size_t> dims{20, 64, 64};
    const Network net = init_network(dims, 10, 1);
    ASSERT_EQ(net.layers.size(), 3U);
    EXPECT_EQ(net.layers[0].in_dim(), 20U);
    EXPECT_EQ(net.layers[0].out_dim(), 64U);
    EXPECT_EQ(net.layers[1].out_dim(), 64U);
    EXPECT_EQ(net.layers[2].out_dim(), 10U);
    EXPECT_EQ(net.layers[2].activation, Activation::kIdentity);
    EXPECT_EQ(net.layers[0].activation, Activation::kRelu);
}

TEST(InitNetwork, DeterministicAndSeeded) {
    const std::vector<std::size_t> dims{5, 7};
    EXPECT_EQ(init_network(dims, 3, 4).layers[0].weight, init_network(dims, 3, 4).layers[0].weight);
    EXPECT_NE(init_network(dims, 3, 4).layers[0].weight, init_network(dims, 3, 5).layers[0].weight);
}

TEST(InitNetwork, RejectsMissingHiddenLayer) {
    const std::vector<std::size_t> dims{5};
    EXPECT_THROW(init_network(dims, 3, 1), ValidationError);
}

TEST(InitNetwork, ChanceAccuracyAtInit) {
    TaskSpec s;
    s.seed = 3;
    s.samples = 2000;
    s.eval_samples = 10;
    const Task t = generate_task(s);
    const std::vector<std::size_t> dims{20, 64, 64};
    double mean = 0.0;
    for (std::uint64_t seed = 1; seed <= 8; ++seed) {
        mean += evaluate_accuracy(init_network(dims, 10, seed), t.train) / 8.0;
    }
    EXPECT_NEAR(mean, 0.10, 0.03);
}

TEST(AttachLora, InitialState) {
    const std::vector<std::size_t> dims{20, 64};
    const std::vector<std::size_t> targets{0};
    const Network net = attach_lora(init_network(dims, 10, 1), targets, 4, 8.0, 2);
    ASSERT_EQ(net.adapter_count(), 1U);
    const LoraAdapter& a = *net.adapters()[0];
    EXPECT_EQ(a.parameter_count(), 336U);
    EXPECT_EQ(a.b, Matrix(64, 4));
    EXPECT_TRUE(net.base_frozen);
    double sq = 0.0;
    for (double v : a.a.data()) {
        sq += v * v;
    }
    EXPECT_NEAR(std::sqrt(sq / static_cast<double>(a.a.size())), kLoraInitStd, 0.003);
}

TEST(AttachLora, Scale) {
    const std::vector<std::size_t> dims{20, 64};
    const std::vector<std::size_t> targets{1};
    const Network net = attach_lora(init_network(dims, 32, 1), targets, 16, 32.0, 2);
    EXPECT_DOUBLE_EQ(net.adapters()[0]->scale(), 2.0);
}

TEST(AttachLora, Errors) {
    const std::vector<std::size_t> dims{4, 6};
    const Network base = init_network(dims, 3, 1);
    const std::vector<std::size_t> first{0};
    EXPECT_THROW(attach_lora(base, first, 5, 1.0, 1), ValidationError);
    const std::vector<std::size_t> missing{2};
    EXPECT_THROW(attach_lora(base, missing, 1, 1.0, 1), ValidationError);
    const std::vector<std::size_t> dup{0, 0};
    EXPECT_THROW(attach_lora(base, dup, 1, 1.0, 1), ValidationError);
    EXPECT_THROW(attach_lora(base, first, 1, 1.0, 1, 1.0), ValidationError);
    EXPECT_THROW(attach_lora(attach_lora(base, first, 1, 1.0, 1), first, 1, 1.0, 1), ValidationError);
}

TEST(Forward, ZeroEffectStartIsBitExact) {
    const std::vector<std::size_t> dims{6, 8, 8};
    const Network base = init_network(dims, 4, 3);
    const std::vector<std::size_t> targets{0, 1, 2};
    const Network adapted = attach_lora(base, targets, 2, 4.0, 9);
    const Batch b = test::random_batch(1, 10, 6, 4);
    EXPECT_EQ(predict_logits(base, b.inputs), predict_logits(adapted, b.inputs));
}

TEST(Forward, HandComputedTwoByTwo) {
    Network net;
    net.num_classes = 2;
    LinearLayer l;
    l.weight = Matrix{{1.0, 2.0}, {0.5, -1.0}};
    l.bias = {0.1, -0.2};
    l.activation = Activation::kIdentity;
    l.lora = LoraAdapter{Matrix{{0.3, -0.4}}, Matrix{{2.0}, {-1.0}}, 1, 3.0, 0.0};
    net.layers.push_back(l);
    const Matrix x{{1.5, -2.0}};
    const Matrix out = predict_logits(net, x);
    // W0 x + b = (1.5 - 4 + 0.1, 0.75 + 2 - 0.2) = (-2.4, 2.55); A x = 0.45 + 0.8 = 1.25; (α/r) B A x = 3·(2.5, -1.25).
    EXPECT_NEAR(out(0, 0), -2.4 + 7.5, 1e-14);
    EXPECT_NEAR(out(0, 1), 2.55 - 3.75, 1e-14);
}

TEST(Forward, InputWidthChecked) {
    const Network net = test::small_network(1);
    EXPECT_THROW(forward(net, Matrix(2, 7), Mode::kEval), ValidationError);
    EXPECT_THROW(forward(net, Matrix(0, 4), Mode::kEval), ValidationError);
}

TEST(Forward, NonFiniteIsNumericError) {
    const Network net = test::small_network(1);
    Matrix x(1, 4);
    x(0, 0) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(forward(net, x, Mode::kEval), NumericError);
}

TEST(Forward, DropoutOnlyInTrainMode) {
    const std::vector<std::size_t> dims{6, 8};
    const std::vector<std::size_t> targets{0};
    Network net = attach_lora(init_network(dims, 3, 1), targets, 2, 4.0, 2, 0.5);
    CounterRng rng(1, 1);
    for (auto* a : net.adapters()) {
        a->b = test::random_matrix(rng, a->b.rows(), a->b.cols());
    }
    const Batch b = test::random_batch(2, 5, 6, 3);
    const auto eval1 = forward(net, b.inputs, Mode::kEval);
    const auto eval2 = forward(net, b.inputs, Mode::kEval);
    EXPECT_EQ(eval1.logits, eval2.logits);
    EXPECT_THROW(forward(net, b.inputs, Mode::kTrain), ContractError);
    CounterRng drop(5, streams::kDropout);
    const auto train = forward(net, b.inputs, Mode::kTrain, &drop);
    EXPECT_NE(train.logits, eval1.logits);
    EXPECT_FALSE(train.adapters[0].mask.empty());
}

TEST(Nll, UniformLogits) {
    const Matrix logits(3, 5);
    const std::vector<Label> labels{0, 2, 4};
    EXPECT_NEAR(nll_loss(logits, labels), std::log(5.0), 1e-14);
}

TEST(Nll, ConfidentCorrectGoesToZero) {
    const Matrix logits{{800.0, 0.0}, {0.0, 900.0}};
    const std::vector<Label> labels{0, 1};
    EXPECT_LE(nll_loss(logits, labels), 1e-300);
}

TEST(Nll, MatchesNaiveExtendedPrecision) {
    CounterRng rng(4, 1);
    const Matrix logits = test::random_matrix(rng, 20, 6, 3.0);
    std::vector<Label> labels;
    for (int i = 0; i < 20; ++i) {
        labels.push_back(static_cast<Label>(rng.below(6)));
    }
    long double total = 0.0L;
    for (std::size_t i = 0; i < 20; ++i) {
        long double z = 0.0L;
        for (std::size_t k = 0; k < 6; ++k) {
            z += std::exp(static_cast<long double>(logits(i, k)));
        }
        total += std::log(z) - logits(i, labels[i]);
    }
    EXPECT_NEAR(nll_loss(logits, labels), static_cast<double>(total / 20.0L), 1e-12);
    const Vector per = nll_per_example(logits, labels);
    double sum = 0.0;
    for (double v : per) {
        sum += v;
    }
    EXPECT_NEAR(sum / 20.0, nll_loss(logits, labels), 1e-14);
}

TEST(Nll, LabelErrors) {
    const Matrix logits(2, 3);
    const std::vector<Label> short_labels{0};
    EXPECT_THROW(nll_loss(logits, short_labels), ContractError);
    const std::vector<Label> bad{0, 3};
    EXPECT_THROW(nll_loss(logits, bad), ValidationError);
}

TEST(Backward, MatchesFiniteDifferences) {
    const Network net = test::small_network(3);
    const Batch b = test::random_batch(4, 6, 4, 3);
    ForwardTrace trace = forward(net, b.inputs, Mode::kEval);
    const AdapterGrads g = backward(net, trace, b.labels);
    const Vector grad = oracle::flatten(g);
    const auto shapes = oracle::shapes_of(net);
    auto f = [&](std::span<const double> theta) {
        Network copy = net;
        restore_adapters(copy, oracle::unflatten(theta, shapes));
        return nll_loss(predict_logits(copy, b.inputs), b.labels);
    };
    std::vector<std::size_t> coords;
    for (std::size_t i = 0; i < 20; ++i) {
        coords.push_back(i * 3 % grad.size());
    }
    const Vector fd = oracle::finite_diff(f, oracle::flatten(snapshot_adapters(net)), 1e-5, coords);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        EXPECT_LE(std::abs(grad[coords[i]] - fd[i]), 1e-5 * std::abs(fd[i]) + 1e-9) << "coordinate " << coords[i];
    }
}

TEST(Backward, SingleExampleChainRule) {
    const Network net = test::small_network(5);
    const Batch one = test::random_batch(6, 1, 4, 3);
    ForwardTrace trace = forward(net, one.inputs, Mode::kEval);
    const AdapterGrads g = backward(net, trace, one.labels);
    for (std::size_t k = 0; k < trace.adapters.size(); ++k) {
        const auto& t = trace.adapters[k];
        ASSERT_TRUE(t.g1.has_value());
        ASSERT_TRUE(t.g2.has_value());
        // g₁ is the log-likelihood gradient w.r.t. A·x with α/r folded in, so ∂NLL/∂A = −g₁ᵀ x.
        const Matrix expected_a = -1.0 * matmul_tn(*t.g1, t.x);
        const Matrix expected_b = -1.0 * matmul_tn(*t.g2, t.a1);
        EXPECT_LE(max_abs_diff(g[k].a, expected_a), 1e-12);
        EXPECT_LE(max_abs_diff(g[k].b, expected_b), 1e-12);
    }
}

TEST(Backward, SaturatedModelHasZeroGradient) {
    Network net = test::small_network(7);
    auto& last = net.layers.back();
    const Batch b = test::random_batch(8, 4, 4, 3);
    // Make the logit of every label overwhelm the rest through the bias.
    std::vector<Label> labels(b.size(), 1);
    last.bias = {-1e6, 1e6, -1e6};
    ForwardTrace trace = forward(net, b.inputs, Mode::kEval);
    const AdapterGrads g = backward(net, trace, labels);
    for (const auto& p : g) {
        EXPECT_LE(squared_norm(p.a) + squared_norm(p.b), 1e-16);
    }
}

TEST(Backward, StaleTraceRejected) {
    const Network net = test::small_network(9);
    const Batch b = test::random_batch(1, 4, 4, 3);
    ForwardTrace trace = forward(net, b.inputs, Mode::kEval);
    const Network other = test::small_network(9, 4, 6, 3, 2);
    EXPECT_THROW(backward(other, trace, b.labels), ContractError);
    const std::vector<Label> wrong(3, 0);
    EXPECT_THROW(backward(net, trace, wrong), ContractError);
}

TEST(MergeDeltaW, Cases) {
    LoraAdapter a{Matrix{{2.0}}, Matrix{{3.0}}, 1, 4.0, 0.0};
    EXPECT_DOUBLE_EQ(merge_delta_w(a)(0, 0), 24.0);
    a.b = Matrix{{0.0}};
    EXPECT_EQ(merge_delta_w(a), Matrix(1, 1));
    CounterRng rng(1, 1);
    LoraAdapter big{test::random_matrix(rng, 2, 7), test::random_matrix(rng, 6, 2), 2, 4.0, 0.0};
    EXPECT_LE(numerical_rank(merge_delta_w(big)), 2U);
}

TEST(Adapters, SnapshotRestoreAndHash) {
    Network net = test::small_network(2);
    const AdapterParams snap = snapshot_adapters(net);
    const std::uint64_t hash = base_weights_hash(net);
    AdapterParams changed = snap;
    changed[0].a(0, 0) += 1.0;
    restore_adapters(net, changed);
    EXPECT_EQ(net.adapters()[0]->a(0, 0), snap[0].a(0, 0) + 1.0);
    EXPECT_EQ(base_weights_hash(net), hash);
    net.layers[0].weight(0, 0) += 1e-12;
    EXPECT_NE(base_weights_hash(net), hash);
    AdapterParams wrong = snap;
    wrong.pop_back();
    EXPECT_THROW(restore_adapters(net, wrong), ValidationError);
}

TEST(Metrics, AccuracyMatchesLoop) {
    const Network net = test::small_network(11);
    TaskSpec s;
    s.seed = 1;
    s.dim = 4;
    s.classes = 3;
    s.samples = 60;
    const Task t = generate_task(s);
    const Matrix logits = predict_logits(net, t.train.inputs);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < t.train.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < 3; ++k) {
            if (logits(i, k) > logits(i, best)) {
                best = k;
            }
        }
        correct += best == t.train.labels[i] ? 1 : 0;
    }
    EXPECT_EQ(evaluate_accuracy(net, t.train), static_cast<double>(correct) / 60.0);
}

TEST(Metrics, ConstantPredictorOnBalancedData) {
    Network net = test::small_network(12);
    net.layers.back().bias = {1e6, 0.0, 0.0};
    TaskSpec s;
    s.seed = 1;
    s.dim = 4;
    s.classes = 3;
    s.samples = 60;
    const Task t = generate_task(s);
    EXPECT_DOUBLE_EQ(evaluate_accuracy(net, t.train), 1.0 / 3.0);
}

}  // namespace
}  // namespace lalora
