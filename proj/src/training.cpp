// SPDX-License-Identifier: Apache-2.0
#include "lalora/training.hpp"

#include <cmath>

#include <fmt/format.h>

#include "lalora/errors.hpp"
#include "lalora/random.hpp"

namespace lalora {

std::string_view to_string(Schedule s) noexcept { return s == Schedule::kConstant ? "constant" : "linear"; }

std::string_view to_string(OptimizerKind o) noexcept { return o == OptimizerKind::kSgd ? "sgd" : "adam"; }

Schedule parse_schedule(std::string_view tag) {
    if (tag == "constant") {
        return Schedule::kConstant;
    }
    if (tag == "linear") {
        return Schedule::kLinearDecay;
    }
    throw ValidationError(fmt::format("unknown schedule '{}' (expected constant, linear)", tag));
}

OptimizerKind parse_optimizer(std::string_view tag) {
    if (tag == "sgd") {
        return OptimizerKind::kSgd;
    }
    if (tag == "adam") {
        return OptimizerKind::kAdam;
    }
    throw ValidationError(fmt::format("unknown optimizer '{}' (expected sgd, adam)", tag));
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ValidationError(fmt::format("train: learning rate must be positive, got {}", learning_rate));
    }
    if (batch_size == 0) {
        throw ValidationError("train: batch_size must be >= 1");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw ValidationError(fmt::format("train: lambda must be finite and >= 0, got {}", lambda));
    }
    if (eval_every == 0) {
        throw ValidationError("train: eval_every must be >= 1");
    }
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
        throw ValidationError("train: invalid Adam hyperparameters");
    }
}

double learning_rate_at(const TrainConfig& config, std::size_t step, std::size_t total_steps) {
    if (config.schedule == Schedule::kConstant || total_steps == 0) {
        return config.learning_rate;
    }
    const double remaining = static_cast<double>(total_steps - std::min(step, total_steps));
    return config.learning_rate * remaining / static_cast<double>(total_steps);
}

void sgd_step(std::span<double> params, std::span<const double> grads, double lr) {
    if (params.size() != grads.size()) {
        throw ContractError("sgd_step: parameter and gradient lengths differ");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i] -= lr * grads[i];
    }
}

void AdamState::step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
                     double lr) {
    if (params.size() != grads.size()) {
        throw ContractError("adam: slot counts differ");
    }
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }
    if (m_.size() != params.size()) {
        throw ContractError("adam: slot count changed between steps");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
    for (std::size_t s = 0; s < params.size(); ++s) {
        auto p = params[s];
        auto g = grads[s];
        if (p.size() != m_[s].size() || g.size() != p.size()) {
            throw ContractError(fmt::format("adam: slot {} changed length", s));
        }
        auto& m = m_[s];
        auto& v = v_[s];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = hyper_.beta1 * m[i] + (1.0 - hyper_.beta1) * g[i];
            v[i] = hyper_.beta2 * v[i] + (1.0 - hyper_.beta2) * g[i] * g[i];
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper_.eps);
        }
    }
}

LossResult regularized_loss(const Network& network, const Batch& batch, const LaplacePosterior* posterior,
                            double lambda, Mode mode, CounterRng* rng) {
    if (!(lambda >= 0.0)) {
        throw ValidationError("regularized_loss: lambda must be >= 0");
    }
    ForwardTrace trace = forward(network, batch.inputs, mode, rng);
    LossResult out;
    out.nll = nll_loss(trace.logits, batch.labels);
    out.grads = backward(network, trace, batch.labels);
    out.total = out.nll;
    if (lambda > 0.0) {
        if (posterior == nullptr) {
            throw ValidationError("regularized_loss: lambda > 0 needs a posterior");
        }
        const AdapterParams params = snapshot_adapters(network);
        out.reg = reg_value(*posterior, params);
        out.total += lambda * out.reg;
        const AdapterGrads rg = reg_grad(*posterior, params);
        for (std::size_t i = 0; i < rg.size(); ++i) {
            out.grads[i].a += lambda * rg[i].a;
            out.grads[i].b += lambda * rg[i].b;
        }
    }
    return out;
}

namespace {

template <class F>
auto at_step(std::size_t step, F&& f) {
    try {
        return f();
    } catch (const NumericError& e) {
        throw NumericError(fmt::format("step {}: {}", step, e.what()));
    }
}

void require_finite_loss(double loss, std::size_t step) {
    if (!std::isfinite(loss)) {
        throw NumericError(fmt::format("non-finite loss at step {}", step));
    }
}

class Optimizer {
public:
    Optimizer(const TrainConfig& config) : kind_(config.optimizer), adam_(config.adam) {}

    void step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads, double lr) {
        if (kind_ == OptimizerKind::kAdam) {
            adam_.step(params, grads, lr);
            return;
        }
        for (std::size_t s = 0; s < params.size(); ++s) {
            sgd_step(params[s], grads[s], lr);
        }
    }

private:
    OptimizerKind kind_;
    AdamState adam_;
};

HistoryRow eval_row(const Network& network, std::size_t epoch, const LabeledDataset& target,
                    const LaplacePosterior* posterior, const EvalSuite& eval) {
    HistoryRow row;
    row.epoch = epoch;
    row.train_loss = evaluate_nll(network, target);
    row.reg_value = posterior != nullptr ? reg_value(*posterior, network) : 0.0;
    row.target_acc = evaluate_accuracy(network, eval.target);
    double sum = 0.0;
    for (const auto& s : eval.sources) {
        row.source_acc.push_back(evaluate_accuracy(network, s));
        sum += row.source_acc.back();
    }
    row.source_acc_mean = eval.sources.empty() ? 0.0 : sum / static_cast<double>(eval.sources.size());
    return row;
}

}  // namespace

Network pretrain(Network network, std::span<const LabeledDataset> sources, const TrainConfig& config) {
    config.validate();
    if (network.adapter_count() != 0 || network.base_frozen) {
        throw ValidationError("pretrain: network already carries adapters");
    }
    if (config.epochs == 0) {
        return network;
    }
    const LabeledDataset data = concatenate(sources);
    Optimizer opt(config);
    const std::size_t per_epoch = (data.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total = per_epoch * config.epochs;
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        for (const Batch& batch : EpochBatches(data, config.batch_size, config.seed, epoch)) {
            ForwardTrace trace = at_step(step, [&] { return forward(network, batch.inputs, Mode::kTrain); });
            require_finite_loss(nll_loss(trace.logits, batch.labels), step);
            BaseGrads grads = backward_base(network, trace, batch.labels);
            std::vector<std::span<double>> p;
            std::vector<std::span<const double>> g;
            for (std::size_t l = 0; l < network.layers.size(); ++l) {
                p.push_back(network.layers[l].weight.data());
                p.push_back(network.layers[l].bias);
                g.push_back(grads[l].weight.data());
                g.push_back(grads[l].bias);
            }
            opt.step(p, g, learning_rate_at(config, step, total));
            ++step;
        }
    }
    return network;
}

TrainHistory finetune(Network& network, const LabeledDataset& target, const LaplacePosterior* posterior,
                      const TrainConfig& config, const EvalSuite& eval) {
    config.validate();
    if (network.adapter_count() == 0) {
        throw ValidationError("finetune: network has no adapters");
    }
    if (config.lambda > 0.0 && posterior == nullptr) {
        throw ValidationError("finetune: lambda > 0 needs a posterior");
    }
    if (posterior != nullptr) {
        posterior->check_compatible(network);
    }
    const std::uint64_t base_hash = base_weights_hash(network);
    // Regularization off means the posterior takes no part in the update.
    const LaplacePosterior* active = config.lambda > 0.0 ? posterior : nullptr;

    TrainHistory history;
    history.rows.push_back(eval_row(network, 0, target, posterior, eval));

    Optimizer opt(config);
    CounterRng dropout_rng(config.seed, streams::kDropout);
    const std::size_t per_epoch = (target.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total = per_epoch * config.epochs;
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        for (const Batch& batch : EpochBatches(target, config.batch_size, config.seed, epoch)) {
            LossResult loss = at_step(step, [&] {
                return regularized_loss(network, batch, active, config.lambda, Mode::kTrain, &dropout_rng);
            });
            require_finite_loss(loss.total, step);
            auto adapters = network.adapters();
            std::vector<std::span<double>> p;
            std::vector<std::span<const double>> g;
            for (std::size_t i = 0; i < adapters.size(); ++i) {
                p.push_back(adapters[i]->a.data());
                p.push_back(adapters[i]->b.data());
                g.push_back(loss.grads[i].a.data());
                g.push_back(loss.grads[i].b.data());
            }
            opt.step(p, g, learning_rate_at(config, step, total));
            ++step;
        }
        if (epoch % config.eval_every == 0) {
            history.rows.push_back(eval_row(network, epoch, target, posterior, eval));
        }
    }
    if (base_weights_hash(network) != base_hash) {
        throw ContractError("finetune: base weights changed");
    }
    return history;
}

}  // namespace lalora
