// SPDX-License-Identifier: Apache-2.0
#include "lalora/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <fmt/format.h>

#include "lalora/errors.hpp"

namespace lalora {

namespace {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const EigenRowMajor> as_eigen(const Matrix& m) {
    return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

Matrix from_eigen(const EigenRowMajor& e) {
    Matrix out(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
    std::copy(e.data(), e.data() + e.size(), out.data().begin());
    return out;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (!a.same_shape(b)) {
        throw SizeError(fmt::format("{}: shape mismatch {}x{} vs {}x{}", what, a.rows(), a.cols(), b.rows(), b.cols()));
    }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw SizeError(fmt::format("matrix {}x{} given {} values", rows_, cols_, data_.size()));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) {
            throw SizeError("ragged matrix literal");
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        m(i, i) = d[i];
    }
    return m;
}

Matrix& Matrix::operator+=(const Matrix& other) {
    require_same_shape(*this, other, "operator+=");
    for (std::size_t k = 0; k < data_.size(); ++k) {
        data_[k] += other.data_[k];
    }
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    require_same_shape(*this, other, "operator-=");
    for (std::size_t k = 0; k < data_.size(); ++k) {
        data_[k] -= other.data_[k];
    }
    return *this;
}

Matrix& Matrix::operator*=(double s) noexcept {
    for (double& v : data_) {
        v *= s;
    }
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix m) { return m *= s; }

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            t(j, i) = m(i, j);
        }
    }
    return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw SizeError(fmt::format("matmul: {}x{} · {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ci = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) {
                continue;
            }
            auto bk = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                ci[j] += aik * bk[j];
            }
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw SizeError(fmt::format("matmul_nt: {}x{} · ({}x{})ᵀ", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ai = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            auto bj = b.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) {
                s += ai[k] * bj[k];
            }
            c(i, j) = s;
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw SizeError(fmt::format("matmul_tn: ({}x{})ᵀ · {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    Matrix c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto ak = a.row(k);
        auto bk = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = ak[i];
            if (aki == 0.0) {
                continue;
            }
            auto ci = c.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                ci[j] += aki * bk[j];
            }
        }
    }
    return c;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) {
        throw SizeError(fmt::format("matvec: {}x{} · {}", a.rows(), a.cols(), x.size()));
    }
    Vector y(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ai = a.row(i);
        double s = 0.0;
        for (std::size_t k = 0; k < x.size(); ++k) {
            s += ai[k] * x[k];
        }
        y[i] = s;
    }
    return y;
}

Matrix outer(std::span<const double> u, std::span<const double> v) {
    Matrix m(u.size(), v.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
        for (std::size_t j = 0; j < v.size(); ++j) {
            m(i, j) = u[i] * v[j];
        }
    }
    return m;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix c = a;
    auto cd = c.data();
    auto bd = b.data();
    for (std::size_t k = 0; k < cd.size(); ++k) {
        cd[k] *= bd[k];
    }
    return c;
}

double frobenius_dot(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "frobenius_dot");
    double s = 0.0;
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t k = 0; k < ad.size(); ++k) {
        s += ad[k] * bd[k];
    }
    return s;
}

double squared_norm(const Matrix& m) noexcept {
    double s = 0.0;
    for (double v : m.data()) {
        s += v * v;
    }
    return s;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double worst = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        worst = std::max(worst, std::abs(a.data()[k] - b.data()[k]));
    }
    return worst;
}

bool all_finite(const Matrix& m) noexcept { return all_finite(m.data()); }

bool all_finite(std::span<const double> v) noexcept {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool is_symmetric(const Matrix& m, double tol) {
    if (m.rows() != m.cols()) {
        return false;
    }
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = i + 1; j < m.cols(); ++j) {
            if (std::abs(m(i, j) - m(j, i)) > tol) {
                return false;
            }
        }
    }
    return true;
}

Matrix kron(const Matrix& p, const Matrix& q, std::size_t max_elements) {
    if (p.empty() || q.empty()) {
        throw SizeError("kron: empty operand");
    }
    const std::size_t rows = p.rows() * q.rows();
    const std::size_t cols = p.cols() * q.cols();
    if (cols != 0 && rows > max_elements / cols) {
        throw SizeError(fmt::format("kron: {}x{} result exceeds cap of {} elements", rows, cols, max_elements));
    }
    Matrix out(rows, cols);
    for (std::size_t i = 0; i < p.rows(); ++i) {
        for (std::size_t j = 0; j < p.cols(); ++j) {
            const double pij = p(i, j);
            for (std::size_t k = 0; k < q.rows(); ++k) {
                for (std::size_t l = 0; l < q.cols(); ++l) {
                    out(i * q.rows() + k, j * q.cols() + l) = pij * q(k, l);
                }
            }
        }
    }
    return out;
}

Vector vec(const Matrix& m) {
    Vector v(m.size());
    for (std::size_t j = 0; j < m.cols(); ++j) {
        for (std::size_t i = 0; i < m.rows(); ++i) {
            v[j * m.rows() + i] = m(i, j);
        }
    }
    return v;
}

Matrix unvec(std::span<const double> v, std::size_t rows, std::size_t cols) {
    if (v.size() != rows * cols) {
        throw SizeError(fmt::format("unvec: length {} cannot form {}x{}", v.size(), rows, cols));
    }
    Matrix m(rows, cols);
    for (std::size_t j = 0; j < cols; ++j) {
        for (std::size_t i = 0; i < rows; ++i) {
            m(i, j) = v[j * rows + i];
        }
    }
    return m;
}

Matrix kron_apply(const Matrix& l, const Matrix& r, const Matrix& y) {
    // (L ⊗ R) vec(Y) = vec(R Y Lᵀ): needs R.cols == Y.rows, L.cols == Y.cols.
    if (r.cols() != y.rows() || l.cols() != y.cols()) {
        throw SizeError(fmt::format("kron_apply: L {}x{}, R {}x{}, Y {}x{}", l.rows(), l.cols(), r.rows(), r.cols(),
                                    y.rows(), y.cols()));
    }
    return matmul_nt(matmul(r, y), l);
}

double kron_quadform(const Matrix& l, const Matrix& r, const Matrix& x, const Matrix& y) {
    Matrix ry = kron_apply(l, r, y);
    if (!ry.same_shape(x)) {
        throw SizeError(fmt::format("kron_quadform: X is {}x{}, (L⊗R)vec(Y) reshapes to {}x{}", x.rows(), x.cols(),
                                    ry.rows(), ry.cols()));
    }
    return frobenius_dot(x, ry);
}

double min_eig_lower_bound(const Matrix& m, double symmetry_tol) {
    if (m.rows() != m.cols() || m.empty()) {
        throw ContractError("min_eig_lower_bound: matrix must be square and nonempty");
    }
    if (!is_symmetric(m, symmetry_tol)) {
        throw ContractError(fmt::format("min_eig_lower_bound: asymmetry beyond {}", symmetry_tol));
    }
    const auto e = as_eigen(m);
    EigenRowMajor sym = 0.5 * (e + e.transpose());
    if (m.rows() <= kDenseEigenLimit) {
        Eigen::SelfAdjointEigenSolver<EigenRowMajor> solver(sym, Eigen::EigenvaluesOnly);
        return solver.eigenvalues().minCoeff();
    }
    // Cholesky attempts with growing diagonal shifts; success at shift t proves λ_min > -t.
    const double scale = std::max(sym.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
    const Eigen::Index n = sym.rows();
    double shift = 0.0;
    for (int attempt = 0; attempt < 40; ++attempt) {
        Eigen::LLT<EigenRowMajor> llt(sym + shift * EigenRowMajor::Identity(n, n));
        if (llt.info() == Eigen::Success) {
            return -shift;
        }
        shift = shift == 0.0 ? scale * 1e-14 : shift * 4.0;
    }
    // Gershgorin disc bound as the last resort.
    double bound = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
        bound = std::min(bound, sym(i, i) - (sym.row(i).cwiseAbs().sum() - std::abs(sym(i, i))));
    }
    return bound;
}

Matrix inverse(const Matrix& m) {
    if (m.rows() != m.cols() || m.empty()) {
        throw SizeError("inverse: matrix must be square and nonempty");
    }
    Eigen::FullPivLU<EigenRowMajor> lu(as_eigen(m));
    if (!lu.isInvertible()) {
        throw SingularityError(fmt::format("inverse: {}x{} matrix is singular", m.rows(), m.cols()));
    }
    EigenRowMajor inv = lu.inverse();
    return from_eigen(inv);
}

std::size_t numerical_rank(const Matrix& m) {
    if (m.empty()) {
        return 0;
    }
    Eigen::FullPivLU<EigenRowMajor> lu(as_eigen(m));
    return static_cast<std::size_t>(lu.rank());
}

}  // namespace lalora
