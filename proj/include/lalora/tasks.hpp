// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <iterator>
#include <optional>
#include <span>
#include <vector>

#include "lalora/linalg.hpp"

namespace lalora {

using Label = std::uint32_t;

/// Gaussian-cluster classification task: `classes` means drawn from N(0, I),
/// samples at mean + noise_scale·N(0, I), optionally rotated by a random
/// orthogonal matrix.
struct TaskSpec {
    std::uint64_t seed = 0;
    std::size_t dim = 20;
    std::size_t classes = 10;
    std::size_t samples = 2000;
    std::size_t eval_samples = 500;
    double noise_scale = 0.3;
    std::optional<std::uint64_t> rotation_seed;

    void validate() const;
};

struct LabeledDataset {
    Matrix inputs;  // samples × dim
    std::vector<Label> labels;
    std::size_t classes = 0;

    [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
    [[nodiscard]] std::size_t dim() const noexcept { return inputs.cols(); }
};

struct Task {
    LabeledDataset train;
    LabeledDataset eval;
};

struct TaskSuite {
    std::vector<Task> sources;
    Task target;
};

struct Batch {
    Matrix inputs;  // batch × dim
    std::vector<Label> labels;

    [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
};

/// Train and eval splits share class means and rotation, with independent noise.
Task generate_task(const TaskSpec& spec);

/// Random orthogonal dim×dim matrix from the QR factorization of a seeded Gaussian matrix.
Matrix random_rotation(std::size_t dim, std::uint64_t seed);

/// Sources use `base` with each source seed and no rotation; the target uses
/// `target_seed` and, when `rotate_target` is set, a rotation seeded by
/// `base.rotation_seed` or else `target_seed`.
TaskSuite make_suite(std::span<const std::uint64_t> source_seeds, std::uint64_t target_seed, const TaskSpec& base,
                     bool rotate_target = true);

/// Row-subset of a dataset as a batch.
Batch gather(const LabeledDataset& data, std::span<const std::size_t> rows);

/// Whole dataset as one batch.
Batch as_batch(const LabeledDataset& data);

/// Concatenation of datasets that share dim and classes.
LabeledDataset concatenate(std::span<const LabeledDataset> parts);

/// Mini-batches for one epoch; the shuffle is a pure function of (seed, epoch)
/// and the last partial batch is kept.
class EpochBatches {
public:
    EpochBatches(const LabeledDataset& data, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch);

    [[nodiscard]] std::size_t count() const noexcept;
    [[nodiscard]] Batch batch(std::size_t index) const;
    [[nodiscard]] std::span<const std::size_t> order() const noexcept { return order_; }

    class iterator {
    public:
        using iterator_category = std::input_iterator_tag;
        using value_type = Batch;
        using difference_type = std::ptrdiff_t;

        iterator(const EpochBatches* owner, std::size_t index) : owner_(owner), index_(index) {}
        Batch operator*() const { return owner_->batch(index_); }
        iterator& operator++() {
            ++index_;
            return *this;
        }
        bool operator==(const iterator& other) const { return index_ == other.index_; }

    private:
        const EpochBatches* owner_;
        std::size_t index_;
    };

    [[nodiscard]] iterator begin() const { return {this, 0}; }
    [[nodiscard]] iterator end() const { return {this, count()}; }

private:
    const LabeledDataset* data_;
    std::size_t batch_size_;
    std::vector<std::size_t> order_;
};

}  // namespace lalora
