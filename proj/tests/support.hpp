// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lalora/config.hpp"
#include "lalora/curvature.hpp"
#include "lalora/linalg.hpp"
#include "lalora/model.hpp"
#include "lalora/random.hpp"

namespace lalora::test {

inline Matrix random_matrix(CounterRng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (auto& v : m.data()) {
        v = scale * rng.normal();
    }
    return m;
}

inline Matrix random_gram(CounterRng& rng, std::size_t n, std::size_t k) {
    const Matrix g = random_matrix(rng, n, k);
    return matmul_nt(g, g);
}

/// 2-layer network (in → hidden → classes) with adapters on both layers and random nonzero A, B.
inline Network small_network(std::uint64_t seed, std::size_t in = 4, std::size_t hidden = 5, std::size_t classes = 3,
                             std::size_t rank = 2, double alpha = 4.0) {
    const std::vector<std::size_t> dims{in, hidden};
    const std::vector<std::size_t> targets{0, 1};
    Network net = attach_lora(init_network(dims, classes, seed), targets, rank, alpha, seed + 1);
    CounterRng rng(seed, 99);
    for (auto* a : net.adapters()) {
        a->a = random_matrix(rng, a->a.rows(), a->a.cols(), 0.4);
        a->b = random_matrix(rng, a->b.rows(), a->b.cols(), 0.4);
    }
    return net;
}

inline Batch random_batch(std::uint64_t seed, std::size_t n, std::size_t dim, std::size_t classes) {
    CounterRng rng(seed, 98);
    Batch b{random_matrix(rng, n, dim), {}};
    for (std::size_t i = 0; i < n; ++i) {
        b.labels.push_back(static_cast<Label>(rng.below(classes)));
    }
    return b;
}

inline Provenance one_batch_provenance() { return Provenance{{0}, 1, {BatchDescriptor{0, 0, 1}}}; }

/// A fast configuration for end-to-end tests: tiny tasks, short training.
inline RunConfig tiny_config() {
    RunConfig c;
    c.model.input_dim = 6;
    c.model.hidden_dims = {12};
    c.model.num_classes = 3;
    c.lora.rank = 2;
    c.lora.alpha = 4.0;
    c.lora.target_layers = {0, 1};
    c.data.source_seeds = {11, 12};
    c.data.target_seed = 99;
    c.data.samples = 90;
    c.data.eval_samples = 30;
    c.data.noise_scale = 0.5;
    c.laplace.batch_size = 16;
    c.train.base.epochs = 2;
    c.train.base.batch_size = 16;
    c.train.base.eval_every = 1;
    c.train.lambdas = {0.0, 10.0};
    c.train.seeds = {1};
    c.pretrain.epochs = 3;
    c.pretrain.batch_size = 16;
    return c;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("lalora_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace lalora::test
