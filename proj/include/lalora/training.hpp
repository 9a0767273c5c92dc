// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "lalora/metrics.hpp"
#include "lalora/model.hpp"
#include "lalora/posterior.hpp"
#include "lalora/tasks.hpp"

namespace lalora {

enum class Schedule : std::uint8_t { kConstant, kLinearDecay };
enum class OptimizerKind : std::uint8_t { kSgd, kAdam };

std::string_view to_string(Schedule s) noexcept;
std::string_view to_string(OptimizerKind o) noexcept;
Schedule parse_schedule(std::string_view tag);
OptimizerKind parse_optimizer(std::string_view tag);

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// λ multiplies the quadratic penalty directly; the ½ in front of the usual
/// Gaussian log-density is folded into it.
struct TrainConfig {
    double learning_rate = 5e-4;
    Schedule schedule = Schedule::kLinearDecay;
    std::size_t epochs = 15;
    std::size_t batch_size = 12;
    double lambda = 0.0;
    OptimizerKind optimizer = OptimizerKind::kAdam;
    AdamHyper adam;
    std::uint64_t seed = 0;
    std::size_t eval_every = 5;

    void validate() const;
};

/// Learning rate for a 0-based step; linear decay reaches zero at total_steps.
double learning_rate_at(const TrainConfig& config, std::size_t step, std::size_t total_steps);

/// θ ← θ − lr·g
void sgd_step(std::span<double> params, std::span<const double> grads, double lr);

/// Bias-corrected Adam over a fixed list of parameter slots.
class AdamState {
public:
    explicit AdamState(AdamHyper hyper = {}) : hyper_(hyper) {}

    /// One update of every slot; `params[i]` and `grads[i]` must keep the same length across calls.
    void step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads, double lr);

    [[nodiscard]] std::uint64_t steps() const noexcept { return t_; }

private:
    AdamHyper hyper_;
    std::uint64_t t_ = 0;
    std::vector<Vector> m_;
    std::vector<Vector> v_;
};

struct LossResult {
    double nll = 0.0;
    double reg = 0.0;
    double total = 0.0;
    AdapterGrads grads;
};

/// nll + λ·reg and its adapter gradients. With λ = 0 the posterior is never read.
LossResult regularized_loss(const Network& network, const Batch& batch, const LaplacePosterior* posterior,
                            double lambda, Mode mode = Mode::kEval, CounterRng* rng = nullptr);

/// Trains every base weight on the union of the source training sets.
/// λ in the config is ignored. Zero epochs returns the network unchanged.
Network pretrain(Network network, std::span<const LabeledDataset> sources, const TrainConfig& config);

struct HistoryRow {
    std::size_t epoch = 0;
    double train_loss = 0.0;  // mean NLL over the full target training set
    double reg_value = 0.0;   // 0 when no posterior was given
    double target_acc = 0.0;
    double source_acc_mean = 0.0;
    std::vector<double> source_acc;
};

struct TrainHistory {
    std::vector<HistoryRow> rows;
};

/// Regularized fine-tuning of the adapters only. Records an eval row at
/// epoch 0 and after every `eval_every` epochs. Throws NumericError naming
/// the step on a non-finite loss and ContractError if a base weight moved.
TrainHistory finetune(Network& network, const LabeledDataset& target, const LaplacePosterior* posterior,
                      const TrainConfig& config, const EvalSuite& eval);

}  // namespace lalora
