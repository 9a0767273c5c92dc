// SPDX-License-Identifier: Apache-2.0
#include "lalora/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include <fmt/format.h>

#include "lalora/errors.hpp"

namespace lalora {

std::vector<std::size_t> Network::adapted_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].lora) {
            out.push_back(i);
        }
    }
    return out;
}

std::size_t Network::adapter_count() const noexcept {
    return static_cast<std::size_t>(
        std::count_if(layers.begin(), layers.end(), [](const LinearLayer& l) { return l.lora.has_value(); }));
}

std::size_t Network::trainable_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) {
        if (l.lora) {
            n += l.lora->parameter_count();
        }
    }
    return n;
}

std::vector<const LoraAdapter*> Network::adapters() const {
    std::vector<const LoraAdapter*> out;
    for (const auto& l : layers) {
        if (l.lora) {
            out.push_back(&*l.lora);
        }
    }
    return out;
}

std::vector<LoraAdapter*> Network::adapters() {
    std::vector<LoraAdapter*> out;
    for (auto& l : layers) {
        if (l.lora) {
            out.push_back(&*l.lora);
        }
    }
    return out;
}

void Network::validate() const {
    if (layers.empty()) {
        throw ValidationError("network has no layers");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (l.bias.size() != l.out_dim()) {
            throw ValidationError(fmt::format("layer {}: bias length {} != out dim {}", i, l.bias.size(), l.out_dim()));
        }
        if (i > 0 && layers[i - 1].out_dim() != l.in_dim()) {
            throw ValidationError(fmt::format("layer {}: input {} does not chain from {}", i, l.in_dim(),
                                              layers[i - 1].out_dim()));
        }
        if (l.lora) {
            const auto& a = *l.lora;
            if (a.a.rows() != a.rank || a.a.cols() != l.in_dim() || a.b.rows() != l.out_dim() || a.b.cols() != a.rank) {
                throw ValidationError(fmt::format("layer {}: adapter shapes inconsistent with rank {}", i, a.rank));
            }
        }
    }
    if (layers.back().out_dim() != num_classes) {
        throw ValidationError("network output width differs from num_classes");
    }
}

Network init_network(std::span<const std::size_t> dims, std::size_t num_classes, std::uint64_t seed) {
    if (dims.size() < 2) {
        throw ValidationError("init_network: need an input width and at least one hidden layer");
    }
    if (num_classes < 2 || std::find(dims.begin(), dims.end(), std::size_t{0}) != dims.end()) {
        throw ValidationError("init_network: widths must be positive and num_classes >= 2");
    }
    std::vector<std::size_t> widths(dims.begin(), dims.end());
    widths.push_back(num_classes);

    Network net;
    net.num_classes = num_classes;
    CounterRng rng(seed, streams::kBaseInit);
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const std::size_t in = widths[i];
        const std::size_t out = widths[i + 1];
        LinearLayer layer{Matrix(out, in), Vector(out, 0.0),
                          i + 2 == widths.size() ? Activation::kIdentity : Activation::kRelu, std::nullopt};
        const double std_dev = std::sqrt(2.0 / static_cast<double>(in));
        for (double& w : layer.weight.data()) {
            w = std_dev * rng.normal();
        }
        net.layers.push_back(std::move(layer));
    }
    return net;
}

Network attach_lora(Network network, std::span<const std::size_t> target_layers, std::size_t rank, double alpha,
                    std::uint64_t seed, double dropout_p) {
    if (target_layers.empty()) {
        throw ValidationError("attach_lora: no target layers");
    }
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
        throw ValidationError(fmt::format("attach_lora: dropout_p must lie in [0,1), got {}", dropout_p));
    }
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
        throw ValidationError("attach_lora: alpha must be positive");
    }
    std::set<std::size_t> unique(target_layers.begin(), target_layers.end());
    if (unique.size() != target_layers.size()) {
        throw ValidationError("attach_lora: duplicate target layer");
    }
    for (std::size_t idx : unique) {
        if (idx >= network.layers.size()) {
            throw ValidationError(fmt::format("attach_lora: layer {} does not exist", idx));
        }
        auto& layer = network.layers[idx];
        if (layer.lora) {
            throw ValidationError(fmt::format("attach_lora: layer {} already has an adapter", idx));
        }
        if (rank == 0 || rank > std::min(layer.in_dim(), layer.out_dim())) {
            throw ValidationError(fmt::format("attach_lora: rank {} invalid for {}->{} layer {}", rank, layer.in_dim(),
                                              layer.out_dim(), idx));
        }
        LoraAdapter adapter{Matrix(rank, layer.in_dim()), Matrix(layer.out_dim(), rank), rank, alpha, dropout_p};
        CounterRng rng(seed, streams::kLoraInit * 1000 + idx);
        for (double& v : adapter.a.data()) {
            v = kLoraInitStd * rng.normal();
        }
        layer.lora = std::move(adapter);
    }
    network.base_frozen = true;
    return network;
}

Matrix merge_delta_w(const LoraAdapter& adapter) { return adapter.scale() * matmul(adapter.b, adapter.a); }

namespace {

void add_bias(Matrix& h, std::span<const double> bias) {
    for (std::size_t i = 0; i < h.rows(); ++i) {
        auto row = h.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] += bias[j];
        }
    }
}

void check_finite(const Matrix& m, std::size_t layer, const char* what) {
    if (!all_finite(m)) {
        throw NumericError(fmt::format("non-finite {} at layer {}", what, layer));
    }
}

// Output of one layer before its activation; records adapter signals when asked.
Matrix layer_forward(const LinearLayer& layer, std::size_t index, const Matrix& input, Mode mode, CounterRng* rng,
                     AdapterTrace* adapter_trace) {
    Matrix h = matmul_nt(input, layer.weight);
    add_bias(h, layer.bias);
    if (layer.lora) {
        const auto& ad = *layer.lora;
        Matrix x = input;
        Matrix mask;
        if (mode == Mode::kTrain && ad.dropout_p > 0.0) {
            if (rng == nullptr) {
                throw ContractError("forward: dropout in train mode needs an rng");
            }
            mask = Matrix(input.rows(), input.cols());
            const double keep = 1.0 - ad.dropout_p;
            for (double& m : mask.data()) {
                m = rng->uniform() < keep ? 1.0 / keep : 0.0;
            }
            x = hadamard(x, mask);
        }
        Matrix a1 = matmul_nt(x, ad.a);
        Matrix s2 = matmul_nt(a1, ad.b);
        s2 *= ad.scale();
        h += s2;
        if (adapter_trace != nullptr) {
            adapter_trace->layer = index;
            adapter_trace->x = std::move(x);
            adapter_trace->a1 = std::move(a1);
            adapter_trace->mask = std::move(mask);
        }
    }
    check_finite(h, index, "pre-activation");
    return h;
}

Matrix activate(const Matrix& pre, Activation act) {
    if (act == Activation::kIdentity) {
        return pre;
    }
    Matrix out = pre;
    for (double& v : out.data()) {
        v = v > 0.0 ? v : 0.0;
    }
    return out;
}

void require_labels(std::span<const Label> labels, std::size_t rows, std::size_t classes) {
    if (labels.size() != rows) {
        throw ContractError(fmt::format("labels ({}) do not match batch size ({})", labels.size(), rows));
    }
    for (Label y : labels) {
        if (y >= classes) {
            throw ValidationError(fmt::format("label {} out of range for {} classes", y, classes));
        }
    }
}

// Gradient of the summed NLL w.r.t. logits: softmax − onehot.
Matrix softmax_minus_onehot(const Matrix& logits, std::span<const Label> labels) {
    Matrix d(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        auto z = logits.row(i);
        const double m = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (double v : z) {
            sum += std::exp(v - m);
        }
        auto di = d.row(i);
        for (std::size_t k = 0; k < z.size(); ++k) {
            di[k] = std::exp(z[k] - m) / sum;
        }
        di[labels[i]] -= 1.0;
    }
    return d;
}

struct BackpropResult {
    AdapterGrads adapters;
    BaseGrads base;
};

BackpropResult backprop(const Network& network, const ForwardTrace& trace, std::span<const Label> labels,
                        bool want_base, std::vector<AdapterTrace>* fill_signals) {
    if (trace.layers.size() != network.layers.size() || trace.adapters.size() != network.adapter_count()) {
        throw ContractError("backward: trace does not match network structure");
    }
    for (std::size_t li = 0; li < network.layers.size(); ++li) {
        const auto& cache = trace.layers[li];
        if (cache.input.cols() != network.layers[li].in_dim() ||
            cache.pre_activation.cols() != network.layers[li].out_dim() || cache.input.rows() != trace.batch_size) {
            throw ContractError(fmt::format("backward: trace of layer {} does not match the network", li));
        }
    }
    require_labels(labels, trace.batch_size, network.num_classes);
    const double inv_n = 1.0 / static_cast<double>(trace.batch_size);

    BackpropResult result;
    result.adapters.resize(trace.adapters.size());
    if (want_base) {
        result.base.resize(network.layers.size());
    }

    // dh: gradient of the summed NLL w.r.t. the current layer's pre-activation.
    Matrix dh = softmax_minus_onehot(trace.logits, labels);
    std::size_t adapter_idx = trace.adapters.size();
    for (std::size_t li = network.layers.size(); li-- > 0;) {
        const auto& layer = network.layers[li];
        const auto& cache = trace.layers[li];
        if (layer.activation == Activation::kRelu) {
            for (std::size_t k = 0; k < dh.size(); ++k) {
                if (cache.pre_activation.data()[k] <= 0.0) {
                    dh.data()[k] = 0.0;
                }
            }
        }
        if (want_base) {
            Matrix dw = matmul_tn(dh, cache.input);
            dw *= inv_n;
            Vector db(layer.out_dim(), 0.0);
            for (std::size_t i = 0; i < dh.rows(); ++i) {
                for (std::size_t j = 0; j < dh.cols(); ++j) {
                    db[j] += dh(i, j);
                }
            }
            for (double& v : db) {
                v *= inv_n;
            }
            result.base[li] = LayerGrad{std::move(dw), std::move(db)};
        }

        Matrix dx;
        if (li > 0) {
            dx = matmul(dh, layer.weight);
        }
        if (layer.lora) {
            const auto& ad = *layer.lora;
            const auto& at = trace.adapters[--adapter_idx];
            if (at.layer != li || at.x.rows() != trace.batch_size) {
                throw ContractError("backward: stale adapter trace");
            }
            // Log-likelihood is −NLL, hence the sign flip.
            Matrix g2 = dh;
            g2 *= -ad.scale();
            Matrix g1 = matmul(g2, ad.b);
            Matrix grad_a = matmul_tn(g1, at.x);
            grad_a *= -inv_n;
            Matrix grad_b = matmul_tn(g2, at.a1);
            grad_b *= -inv_n;
            result.adapters[adapter_idx] = AdapterPair{std::move(grad_a), std::move(grad_b)};
            if (li > 0) {
                Matrix through = matmul(g1, ad.a);
                if (!at.mask.empty()) {
                    through = hadamard(through, at.mask);
                }
                dx -= through;
            }
            if (fill_signals != nullptr) {
                (*fill_signals)[adapter_idx].g1 = std::move(g1);
                (*fill_signals)[adapter_idx].g2 = std::move(g2);
            }
        }
        if (li > 0) {
            dh = std::move(dx);
        }
    }
    return result;
}

}  // namespace

ForwardTrace forward(const Network& network, const Matrix& inputs, Mode mode, CounterRng* rng) {
    if (network.layers.empty() || inputs.cols() != network.input_dim()) {
        throw ValidationError(fmt::format("forward: input width {} != network input {}", inputs.cols(),
                                          network.input_dim()));
    }
    if (inputs.rows() == 0) {
        throw ValidationError("forward: empty batch");
    }
    ForwardTrace trace;
    trace.batch_size = inputs.rows();
    trace.layers.reserve(network.layers.size());
    Matrix current = inputs;
    for (std::size_t i = 0; i < network.layers.size(); ++i) {
        const auto& layer = network.layers[i];
        AdapterTrace at;
        Matrix pre = layer_forward(layer, i, current, mode, rng, layer.lora ? &at : nullptr);
        if (layer.lora) {
            trace.adapters.push_back(std::move(at));
        }
        Matrix next = activate(pre, layer.activation);
        trace.layers.push_back(LayerCache{std::move(current), std::move(pre)});
        current = std::move(next);
    }
    trace.logits = std::move(current);
    return trace;
}

Matrix predict_logits(const Network& network, const Matrix& inputs) {
    if (network.layers.empty() || inputs.cols() != network.input_dim()) {
        throw ValidationError(fmt::format("predict: input width {} != network input {}", inputs.cols(),
                                          network.input_dim()));
    }
    Matrix current = inputs;
    for (std::size_t i = 0; i < network.layers.size(); ++i) {
        current = activate(layer_forward(network.layers[i], i, current, Mode::kEval, nullptr, nullptr),
                           network.layers[i].activation);
    }
    return current;
}

Vector nll_per_example(const Matrix& logits, std::span<const Label> labels) {
    require_labels(labels, logits.rows(), logits.cols());
    Vector out(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        auto z = logits.row(i);
        const double m = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (double v : z) {
            sum += std::exp(v - m);
        }
        out[i] = m + std::log(sum) - z[labels[i]];
    }
    return out;
}

double nll_loss(const Matrix& logits, std::span<const Label> labels) {
    const Vector per = nll_per_example(logits, labels);
    double s = 0.0;
    for (double v : per) {
        s += v;
    }
    return s / static_cast<double>(per.size());
}

AdapterGrads backward(const Network& network, ForwardTrace& trace, std::span<const Label> labels) {
    return backprop(network, trace, labels, false, &trace.adapters).adapters;
}

BaseGrads backward_base(const Network& network, const ForwardTrace& trace, std::span<const Label> labels) {
    return backprop(network, trace, labels, true, nullptr).base;
}

AdapterGrads zero_adapter_grads(const Network& network) {
    AdapterGrads g;
    for (const auto* ad : network.adapters()) {
        g.push_back(AdapterPair{Matrix(ad->a.rows(), ad->a.cols()), Matrix(ad->b.rows(), ad->b.cols())});
    }
    return g;
}

AdapterParams snapshot_adapters(const Network& network) {
    AdapterParams out;
    for (const auto* ad : network.adapters()) {
        out.push_back(AdapterPair{ad->a, ad->b});
    }
    return out;
}

void restore_adapters(Network& network, const AdapterParams& params) {
    auto adapters = network.adapters();
    if (adapters.size() != params.size()) {
        throw ValidationError("restore_adapters: adapter count mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!adapters[i]->a.same_shape(params[i].a) || !adapters[i]->b.same_shape(params[i].b)) {
            throw ValidationError(fmt::format("restore_adapters: adapter {} shape mismatch", i));
        }
        adapters[i]->a = params[i].a;
        adapters[i]->b = params[i].b;
    }
}

std::uint64_t base_weights_hash(const Network& network) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](std::span<const double> values) {
        for (double v : values) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof(double));
            for (unsigned char c : bytes) {
                h ^= c;
                h *= 0x100000001b3ULL;
            }
        }
    };
    for (const auto& l : network.layers) {
        feed(l.weight.data());
        feed(l.bias);
    }
    return h;
}

}  // namespace lalora
