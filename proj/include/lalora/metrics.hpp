// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "lalora/model.hpp"
#include "lalora/tasks.hpp"

namespace lalora {

/// Fraction of rows whose argmax logit (first index on ties) equals the label. Eval mode.
double evaluate_accuracy(const Network& network, const LabeledDataset& data);

/// Mean NLL over a whole dataset, eval mode.
double evaluate_nll(const Network& network, const LabeledDataset& data);

/// Held-out sets watched during fine-tuning.
struct EvalSuite {
    LabeledDataset target;
    std::vector<LabeledDataset> sources;
};

EvalSuite eval_suite_of(const TaskSuite& suite);

}  // namespace lalora
