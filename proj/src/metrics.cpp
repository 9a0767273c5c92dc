// SPDX-License-Identifier: Apache-2.0
#include "lalora/metrics.hpp"

#include "lalora/errors.hpp"

namespace lalora {

double evaluate_accuracy(const Network& network, const LabeledDataset& data) {
    if (data.size() == 0) {
        throw ValidationError("evaluate_accuracy: empty dataset");
    }
    const Matrix logits = predict_logits(network, data.inputs);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto row = logits.row(i);
        std::size_t best = 0;
        for (std::size_t k = 1; k < row.size(); ++k) {
            if (row[k] > row[best]) {
                best = k;
            }
        }
        correct += best == data.labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

double evaluate_nll(const Network& network, const LabeledDataset& data) {
    if (data.size() == 0) {
        throw ValidationError("evaluate_nll: empty dataset");
    }
    return nll_loss(predict_logits(network, data.inputs), data.labels);
}

EvalSuite eval_suite_of(const TaskSuite& suite) {
    EvalSuite out{suite.target.eval, {}};
    for (const auto& s : suite.sources) {
        out.sources.push_back(s.eval);
    }
    return out;
}

}  // namespace lalora
