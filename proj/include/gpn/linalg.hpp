#ifndef GPN_LINALG_HPP
#define GPN_LINALG_HPP

#include <Eigen/Dense>

#include "gpn/errors.hpp"

namespace gpn::linalg {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Lower-triangular Cholesky factor L with L * L^T = A.
struct CholeskyFactor {
    MatrixXd lower;

    Eigen::Index dim() const { return lower.rows(); }
    MatrixXd reconstruct() const { return lower * lower.transpose(); }
};

/// Plain LL^T factorization of a symmetric positive definite matrix.
/// Throws NotPositiveDefinite as soon as a pivot drops to or below zero,
/// which is the caller's cue to retry with jitter.
CholeskyFactor cholesky(const MatrixXd& a);

/// Factorize a + jitter*I, escalating jitter through
/// {0, jitter0, 10*jitter0, ..., 1e6*jitter0} until a factorization
/// succeeds. Returns the factor and the jitter that was used.
struct JitteredFactor {
    CholeskyFactor factor;
    double jitter_used = 0.0;
};
JitteredFactor jittered_cholesky(const MatrixXd& a, double jitter0 = 1e-8);

/// Solve (L L^T) x = b given the factor.
MatrixXd chol_solve(const CholeskyFactor& factor, const MatrixXd& b);

/// Forward substitution: solve L x = b, L lower-triangular.
MatrixXd solve_lower(const MatrixXd& l, const MatrixXd& b);

/// Back substitution: solve L^T x = b, L lower-triangular.
MatrixXd solve_lower_transposed(const MatrixXd& l, const MatrixXd& b);

/// log(det(L L^T)) = 2 * sum(log(diag(L)))
double log_det(const CholeskyFactor& factor);

/// Cholesky for positive SEMI-definite matrices: pivots within a tolerance
/// of zero produce a zero column (exact for singular PSD inputs such as the
/// zero matrix); pivots clearly negative throw NotPositiveDefinite.
CholeskyFactor psd_cholesky(const MatrixXd& a, double tol_rel = 1e-10);

/// (a + a^T) / 2
inline MatrixXd symmetrize(const MatrixXd& a) {
    return 0.5 * (a + a.transpose());
}

/// Relative asymmetry max|a - a^T| / max(1, max|a|).
double asymmetry(const MatrixXd& a);

} // namespace gpn::linalg

#endif
