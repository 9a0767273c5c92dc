// SPDX-License-Identifier: Apache-2.0
#include "lalora/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <Eigen/QR>
#include <fmt/format.h>

#include "lalora/errors.hpp"
#include "lalora/random.hpp"

namespace lalora {

void TaskSpec::validate() const {
    if (classes < 2) {
        throw ValidationError(fmt::format("task: classes must be >= 2, got {}", classes));
    }
    if (samples < classes) {
        throw ValidationError(fmt::format("task: samples ({}) must be >= classes ({})", samples, classes));
    }
    if (dim == 0) {
        throw ValidationError("task: dim must be positive");
    }
    if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) {
        throw ValidationError(fmt::format("task: noise_scale must be finite and >= 0, got {}", noise_scale));
    }
}

Matrix random_rotation(std::size_t dim, std::uint64_t seed) {
    CounterRng rng(seed, streams::kRotation);
    Eigen::MatrixXd g(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
        for (Eigen::Index j = 0; j < g.cols(); ++j) {
            g(i, j) = rng.normal();
        }
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    // Sign-fix so that the factorization is unique (positive diagonal of R).
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
        if (r(j, j) < 0.0) {
            q.col(j) *= -1.0;
        }
    }
    Matrix out(dim, dim);
    for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
            out(i, j) = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
    }
    return out;
}

namespace {

LabeledDataset sample_split(const Matrix& means, std::size_t count, double noise, CounterRng rng) {
    const std::size_t k = means.rows();
    const std::size_t dim = means.cols();
    LabeledDataset data{Matrix(count, dim), std::vector<Label>(count), k};
    for (std::size_t i = 0; i < count; ++i) {
        const auto label = static_cast<Label>(i % k);
        data.labels[i] = label;
        for (std::size_t d = 0; d < dim; ++d) {
            data.inputs(i, d) = means(label, d) + noise * rng.normal();
        }
    }
    return data;
}

void rotate_inputs(LabeledDataset& data, const Matrix& rotation) {
    // Rows are samples, so x ← Q x becomes X ← X Qᵀ.
    data.inputs = matmul_nt(data.inputs, rotation);
}

}  // namespace

Task generate_task(const TaskSpec& spec) {
    spec.validate();
    CounterRng mean_rng(spec.seed, streams::kClassMeans);
    Matrix means(spec.classes, spec.dim);
    for (double& v : means.data()) {
        v = mean_rng.normal();
    }
    Task task{sample_split(means, spec.samples, spec.noise_scale, CounterRng(spec.seed, streams::kTrainNoise)),
              sample_split(means, spec.eval_samples, spec.noise_scale, CounterRng(spec.seed, streams::kEvalNoise))};
    if (spec.rotation_seed) {
        const Matrix q = random_rotation(spec.dim, *spec.rotation_seed);
        rotate_inputs(task.train, q);
        rotate_inputs(task.eval, q);
    }
    return task;
}

TaskSuite make_suite(std::span<const std::uint64_t> source_seeds, std::uint64_t target_seed, const TaskSpec& base,
                     bool rotate_target) {
    if (source_seeds.empty()) {
        throw ValidationError("make_suite: at least one source seed is required");
    }
    std::set<std::uint64_t> seen(source_seeds.begin(), source_seeds.end());
    if (seen.size() != source_seeds.size() || seen.contains(target_seed)) {
        throw ValidationError("make_suite: source and target seeds must be distinct");
    }
    TaskSuite suite;
    for (std::uint64_t seed : source_seeds) {
        TaskSpec spec = base;
        spec.seed = seed;
        spec.rotation_seed.reset();
        suite.sources.push_back(generate_task(spec));
    }
    TaskSpec target = base;
    target.seed = target_seed;
    target.rotation_seed = rotate_target ? std::optional<std::uint64_t>(base.rotation_seed.value_or(target_seed))
                                         : std::nullopt;
    suite.target = generate_task(target);
    return suite;
}

Batch gather(const LabeledDataset& data, std::span<const std::size_t> rows) {
    Batch b{Matrix(rows.size(), data.dim()), std::vector<Label>(rows.size())};
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= data.size()) {
            throw ValidationError(fmt::format("gather: row {} out of range for {} samples", rows[i], data.size()));
        }
        const auto src = data.inputs.row(rows[i]);
        std::copy(src.begin(), src.end(), b.inputs.row(i).begin());
        b.labels[i] = data.labels[rows[i]];
    }
    return b;
}

Batch as_batch(const LabeledDataset& data) { return Batch{data.inputs, data.labels}; }

LabeledDataset concatenate(std::span<const LabeledDataset> parts) {
    if (parts.empty()) {
        throw ValidationError("concatenate: no datasets");
    }
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.dim() != parts.front().dim() || p.classes != parts.front().classes) {
            throw ValidationError("concatenate: datasets disagree on dim or classes");
        }
        total += p.size();
    }
    LabeledDataset out{Matrix(total, parts.front().dim()), {}, parts.front().classes};
    out.labels.reserve(total);
    std::size_t row = 0;
    for (const auto& p : parts) {
        std::copy(p.inputs.data().begin(), p.inputs.data().end(),
                  out.inputs.data().begin() + static_cast<std::ptrdiff_t>(row * out.dim()));
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
        row += p.size();
    }
    return out;
}

EpochBatches::EpochBatches(const LabeledDataset& data, std::size_t batch_size, std::uint64_t seed,
                           std::uint64_t epoch)
    : data_(&data), batch_size_(batch_size), order_(data.size()) {
    if (batch_size == 0) {
        throw ValidationError("batches: batch_size must be >= 1");
    }
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    CounterRng rng(mix64(seed) ^ mix64(epoch + 1), streams::kShuffle);
    for (std::size_t i = order_.size(); i > 1; --i) {
        std::swap(order_[i - 1], order_[rng.below(i)]);
    }
}

std::size_t EpochBatches::count() const noexcept { return (order_.size() + batch_size_ - 1) / batch_size_; }

Batch EpochBatches::batch(std::size_t index) const {
    const std::size_t begin = index * batch_size_;
    const std::size_t end = std::min(begin + batch_size_, order_.size());
    return gather(*data_, std::span<const std::size_t>(order_).subspan(begin, end - begin));
}

}  // namespace lalora
