#include "gpn/linalg.hpp"

#include <cmath>
#include <string>

namespace gpn::linalg {

double asymmetry(const MatrixXd& a) {
    const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
    return (a - a.transpose()).cwiseAbs().maxCoeff() / scale;
}

CholeskyFactor cholesky(const MatrixXd& a) {
    if (a.rows() != a.cols())
        throw DimensionMismatch("cholesky: matrix is not square");
    if (a.rows() > 0 && asymmetry(a) > 1e-10)
        throw DimensionMismatch("cholesky: matrix is not symmetric");

    const Eigen::Index n = a.rows();
    MatrixXd l = MatrixXd::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        double pivot = a(j, j);
        for (Eigen::Index k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
        if (!(pivot > 0.0))
            throw NotPositiveDefinite("cholesky: pivot " + std::to_string(j) +
                                      " is " + std::to_string(pivot));
        const double d = std::sqrt(pivot);
        l(j, j) = d;
        for (Eigen::Index i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / d;
        }
    }
    return CholeskyFactor{std::move(l)};
}

JitteredFactor jittered_cholesky(const MatrixXd& a, double jitter0) {
    if (jitter0 <= 0.0)
        throw DimensionMismatch("jittered_cholesky: jitter0 must be positive");
    const Eigen::Index n = a.rows();
    const MatrixXd eye = MatrixXd::Identity(n, n);
    double jitter = 0.0;
    for (int attempt = 0; attempt <= 7; ++attempt) {
        try {
            CholeskyFactor f = cholesky(jitter == 0.0 ? a : MatrixXd(a + jitter * eye));
            return JitteredFactor{std::move(f), jitter};
        } catch (const NotPositiveDefinite&) {
            jitter = (attempt == 0) ? jitter0 : jitter * 10.0;
        }
    }
    throw JitterExhausted("jittered_cholesky: failed up to jitter " +
                          std::to_string(jitter0 * 1e6));
}

MatrixXd solve_lower(const MatrixXd& l, const MatrixXd& b) {
    if (l.rows() != b.rows())
        throw DimensionMismatch("solve_lower: dimension mismatch");
    MatrixXd x = b;
    l.triangularView<Eigen::Lower>().solveInPlace(x);
    return x;
}

MatrixXd solve_lower_transposed(const MatrixXd& l, const MatrixXd& b) {
    if (l.rows() != b.rows())
        throw DimensionMismatch("solve_lower_transposed: dimension mismatch");
    MatrixXd x = b;
    l.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
    return x;
}

MatrixXd chol_solve(const CholeskyFactor& factor, const MatrixXd& b) {
    if (factor.dim() != b.rows())
        throw DimensionMismatch("chol_solve: factor side does not match rhs rows");
    return solve_lower_transposed(factor.lower, solve_lower(factor.lower, b));
}

double log_det(const CholeskyFactor& factor) {
    return 2.0 * factor.lower.diagonal().array().log().sum();
}

CholeskyFactor psd_cholesky(const MatrixXd& a, double tol_rel) {
    if (a.rows() != a.cols())
        throw DimensionMismatch("psd_cholesky: matrix is not square");
    const Eigen::Index n = a.rows();
    const double scale = std::max(1.0, n > 0 ? a.diagonal().cwiseAbs().maxCoeff() : 1.0);
    const double tol = tol_rel * scale;
    MatrixXd l = MatrixXd::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        double pivot = a(j, j);
        for (Eigen::Index k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
        if (pivot < -tol)
            throw NotPositiveDefinite("psd_cholesky: pivot " + std::to_string(j) +
                                      " is " + std::to_string(pivot));
        if (pivot <= tol) continue; // rank-deficient direction, leave column zero
        const double d = std::sqrt(pivot);
        l(j, j) = d;
        for (Eigen::Index i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / d;
        }
    }
    return CholeskyFactor{std::move(l)};
}

} // namespace gpn::linalg
