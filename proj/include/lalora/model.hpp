// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lalora/linalg.hpp"
#include "lalora/random.hpp"
#include "lalora/tasks.hpp"

namespace lalora {

enum class Activation : std::uint8_t { kIdentity = 0, kRelu = 1 };

/// Low-rank adapter on a frozen linear map: h = W₀x + (α/r)·B·A·x.
struct LoraAdapter {
    Matrix a;  // r × D_in
    Matrix b;  // D_out × r
    std::size_t rank = 0;
    double alpha = 0.0;
    double dropout_p = 0.0;

    [[nodiscard]] double scale() const noexcept { return alpha / static_cast<double>(rank); }
    [[nodiscard]] std::size_t in_dim() const noexcept { return a.cols(); }
    [[nodiscard]] std::size_t out_dim() const noexcept { return b.rows(); }
    [[nodiscard]] std::size_t parameter_count() const noexcept { return rank * (in_dim() + out_dim()); }
};

struct LinearLayer {
    Matrix weight;  // D_out × D_in
    Vector bias;
    Activation activation = Activation::kRelu;
    std::optional<LoraAdapter> lora;

    [[nodiscard]] std::size_t in_dim() const noexcept { return weight.cols(); }
    [[nodiscard]] std::size_t out_dim() const noexcept { return weight.rows(); }
};

struct Network {
    std::vector<LinearLayer> layers;
    std::size_t num_classes = 0;
    bool base_frozen = false;

    [[nodiscard]] std::size_t input_dim() const noexcept { return layers.empty() ? 0 : layers.front().in_dim(); }
    /// Indices of layers that carry an adapter, in order.
    [[nodiscard]] std::vector<std::size_t> adapted_layers() const;
    [[nodiscard]] std::size_t adapter_count() const noexcept;
    [[nodiscard]] std::size_t trainable_count() const noexcept;
    /// Adapters in layer order.
    [[nodiscard]] std::vector<const LoraAdapter*> adapters() const;
    [[nodiscard]] std::vector<LoraAdapter*> adapters();

    /// Throws ValidationError when adjacent dimensions do not chain.
    void validate() const;
};

/// dims = [input, hidden...]; a final layer maps the last hidden width to
/// num_classes. He-normal weights, zero biases, ReLU on hidden layers.
Network init_network(std::span<const std::size_t> dims, std::size_t num_classes, std::uint64_t seed);

/// A ~ N(0, 0.02²) entrywise, B = 0, base weights marked frozen.
Network attach_lora(Network network, std::span<const std::size_t> target_layers, std::size_t rank, double alpha,
                    std::uint64_t seed, double dropout_p = 0.0);

/// Standard deviation used for A at attach time.
inline constexpr double kLoraInitStd = 0.02;

/// (α/r)·B·A
Matrix merge_delta_w(const LoraAdapter& adapter);

enum class Mode { kTrain, kEval };

/// Signals one adapter contributes to curvature estimation. Rows index examples.
struct AdapterTrace {
    std::size_t layer = 0;
    Matrix x;     // batch × D_in, post-dropout adapter input
    Matrix a1;    // batch × r, A·x
    Matrix mask;  // batch × D_in dropout multipliers; empty when dropout is off
    /// Per-example gradients of the summed log-likelihood w.r.t. s₁ = A·x and
    /// s₂ = B·a₁ (α/r included through the chain rule). Filled by backward.
    std::optional<Matrix> g1;  // batch × r
    std::optional<Matrix> g2;  // batch × D_out
};

struct LayerCache {
    Matrix input;           // batch × D_in
    Matrix pre_activation;  // batch × D_out
};

struct ForwardTrace {
    std::size_t batch_size = 0;
    std::vector<LayerCache> layers;
    std::vector<AdapterTrace> adapters;
    Matrix logits;
};

/// Runs the network. Dropout applies only in train mode and draws from `rng`
/// (required when any adapter has dropout_p > 0 in train mode).
ForwardTrace forward(const Network& network, const Matrix& inputs, Mode mode, CounterRng* rng = nullptr);

/// Eval-mode logits without keeping a trace.
Matrix predict_logits(const Network& network, const Matrix& inputs);

/// Mean softmax cross-entropy over the batch.
double nll_loss(const Matrix& logits, std::span<const Label> labels);

/// Per-example softmax cross-entropy.
Vector nll_per_example(const Matrix& logits, std::span<const Label> labels);

/// One value per adapter entry, shaped like (A, B). Used for gradients,
/// parameter snapshots and posterior means.
struct AdapterPair {
    Matrix a;
    Matrix b;
};
using AdapterGrads = std::vector<AdapterPair>;
using AdapterParams = std::vector<AdapterPair>;

struct LayerGrad {
    Matrix weight;
    Vector bias;
};
using BaseGrads = std::vector<LayerGrad>;

/// Gradients of the mean NLL w.r.t. every adapter's A and B. Fills g₁, g₂ in the trace.
AdapterGrads backward(const Network& network, ForwardTrace& trace, std::span<const Label> labels);

/// Gradients of the mean NLL w.r.t. all base weights and biases.
BaseGrads backward_base(const Network& network, const ForwardTrace& trace, std::span<const Label> labels);

/// Zero-valued gradients shaped like the network's adapters.
AdapterGrads zero_adapter_grads(const Network& network);

/// Copies of every adapter's (A, B) in layer order.
AdapterParams snapshot_adapters(const Network& network);

/// Overwrites adapter values from a snapshot with matching shapes.
void restore_adapters(Network& network, const AdapterParams& params);

/// FNV-1a over the bytes of every base weight and bias.
std::uint64_t base_weights_hash(const Network& network);

}  // namespace lalora
