// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lalora/linalg.hpp"
#include "lalora/model.hpp"
#include "lalora/posterior.hpp"

namespace lalora {

/// Named f64 tensor, row-major.
struct Tensor {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<double> values;

    [[nodiscard]] std::size_t element_count() const noexcept;
};

/// Ordered tensor list with unique names.
class TensorFile {
public:
    void add(Tensor tensor);
    void add_scalar(std::string name, double value);
    void add_matrix(std::string name, const Matrix& m);
    void add_vector(std::string name, std::span<const double> v);
    /// Stored as two 32-bit halves so every bit survives the f64 payload.
    void add_u64(std::string name, std::uint64_t value);

    [[nodiscard]] bool contains(std::string_view name) const noexcept;
    [[nodiscard]] const Tensor& get(std::string_view name) const;
    [[nodiscard]] double scalar(std::string_view name) const;
    [[nodiscard]] Matrix matrix(std::string_view name) const;
    [[nodiscard]] Vector vector(std::string_view name) const;
    [[nodiscard]] std::uint64_t u64(std::string_view name) const;

    [[nodiscard]] const std::vector<Tensor>& tensors() const noexcept { return tensors_; }

private:
    std::vector<Tensor> tensors_;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Container bytes: "LALR", u16 version, u32 count, tensors, u32 CRC-32 of everything after the magic.
std::vector<std::uint8_t> encode(const TensorFile& file);
TensorFile decode(std::span<const std::uint8_t> bytes);

/// CRC-32 (zlib polynomial) of the bytes.
std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

void save_tensors(const std::filesystem::path& path, const TensorFile& file);
TensorFile load_tensors(const std::filesystem::path& path);

/// Network tensors under "net.*"; adapters included when present.
void put_network(TensorFile& file, const Network& network);
Network get_network(const TensorFile& file);

/// Posterior tensors under "post.*": means, curvature payload and provenance.
void put_posterior(TensorFile& file, const LaplacePosterior& posterior);
LaplacePosterior get_posterior(const TensorFile& file);

/// Number of f64 values stored for one adapter's curvature payload.
std::size_t stored_curvature_values(const TensorFile& file, std::size_t adapter);

}  // namespace lalora
