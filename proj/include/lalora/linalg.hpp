// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace lalora {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
///
/// Storage is row-major, but `vec`/`unvec` use the column-stacking
/// convention so that (Q ⊗ U) vec(V) = vec(U V Qᵀ) holds.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> d);

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

    [[nodiscard]] std::span<double> data() noexcept { return data_; }
    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
    [[nodiscard]] std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    [[nodiscard]] std::span<const double> row(std::size_t i) const noexcept {
        return {data_.data() + i * cols_, cols_};
    }

    [[nodiscard]] bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s) noexcept;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix m);

Matrix transpose(const Matrix& m);
/// a · b
Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// aᵀ · b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);
Matrix outer(std::span<const double> u, std::span<const double> v);
Matrix hadamard(const Matrix& a, const Matrix& b);

/// Σᵢⱼ a[i,j]·b[i,j], i.e. vec(a)ᵀ vec(b).
double frobenius_dot(const Matrix& a, const Matrix& b);
double squared_norm(const Matrix& m) noexcept;
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& m) noexcept;
bool all_finite(std::span<const double> v) noexcept;
bool is_symmetric(const Matrix& m, double tol);

/// Upper bound on the number of elements a materialized Kronecker product may have.
inline constexpr std::size_t kDefaultKronCap = std::size_t{1} << 24;

/// Kronecker product: result[(i·p+k),(j·q+l)] = P[i,j]·Q[k,l].
Matrix kron(const Matrix& p, const Matrix& q, std::size_t max_elements = kDefaultKronCap);

/// Column-stacking vectorization: vec(M)[j·m+i] = M[i,j].
Vector vec(const Matrix& m);
Matrix unvec(std::span<const double> v, std::size_t rows, std::size_t cols);

/// vec(X)ᵀ (L ⊗ R) vec(Y) computed as ⟨X, R·Y·Lᵀ⟩ without materializing L ⊗ R.
double kron_quadform(const Matrix& l, const Matrix& r, const Matrix& x, const Matrix& y);

/// R·Y·Lᵀ, the matrix form of (L ⊗ R) vec(Y).
Matrix kron_apply(const Matrix& l, const Matrix& r, const Matrix& y);

/// Largest size for which `min_eig_lower_bound` runs a full eigendecomposition.
inline constexpr std::size_t kDenseEigenLimit = 64;

/// A value ≤ the smallest eigenvalue of a symmetric matrix. Exact up to 64×64;
/// beyond that it is the smallest diagonal shift for which a Cholesky
/// factorization succeeds.
double min_eig_lower_bound(const Matrix& m, double symmetry_tol = 1e-10);

/// Inverse of a square matrix; throws SingularityError when not invertible.
Matrix inverse(const Matrix& m);

/// Numerical rank from a full-pivot LU with the default threshold.
std::size_t numerical_rank(const Matrix& m);

}  // namespace lalora
