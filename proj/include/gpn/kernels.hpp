#ifndef GPN_KERNELS_HPP
#define GPN_KERNELS_HPP

#include <Eigen/Dense>

#include "gpn/errors.hpp"

namespace gpn::kernels {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Squared-exponential covariance exp(-(a-a')^2 / (2 lambda^2)).
double se_kernel(double a, double a_prime, double lengthscale);

/// Covariance of a unit that projects its inputs onto w before applying the
/// scalar SE kernel; equals se_kernel(w.x, w.x', lambda).
double gpn_cov(const VectorXd& x, const VectorXd& x_prime, const VectorXd& w,
               double lengthscale);

/// Gram matrix K(a, b)_ij = se_kernel(a_i, b_j, lambda).
MatrixXd kernel_matrix(const VectorXd& a, const VectorXd& b, double lengthscale);

/// psi_r = E[k_SE(A, v_r)] for A ~ N(mu, var):
///   sqrt(l^2/(l^2+var)) * exp(-(mu - v_r)^2 / (2 (l^2+var)))
VectorXd psi(double mu, double var, const VectorXd& v, double lengthscale);

/// Omega_rt = E[k_SE(A, v_r) k_SE(A, v_t)] for A ~ N(mu, var):
///   sqrt(l^2/(l^2+2var))
///   * exp(-(mu-(v_r+v_t)/2)^2/(l^2+2var) - (v_r-v_t)^2/(4 l^2))
MatrixXd omega(double mu, double var, const VectorXd& v, double lengthscale);

/// Expectation of a product of kernel values of two jointly normal
/// activations:
///   result_rt = E[k_SE(A_a, va_r; la) * k_SE(A_b, vb_t; lb)]
/// with (A_a, A_b) ~ N([mu_a, mu_b], [[var_a, cov],[cov, var_b]]).
MatrixXd cross_expectation(double mu_a, double mu_b, double var_a, double var_b,
                           double cov, const VectorXd& va, const VectorXd& vb,
                           double la, double lb);

/// Cross-unit kernel expectation between units n and m; the row index pairs
/// with unit m's inducing points and the column index with unit n's:
///   Lambda_rt = E[k_SE(A_m, v_m[r]; lambda_m) * k_SE(A_n, v_n[t]; lambda_n)]
/// Throws NotPsd when [[var_n, cov],[cov, var_m]] has determinant < -1e-12.
MatrixXd lambda_cross(double mu_n, double mu_m, double var_n, double var_m,
                      double cov_nm, const VectorXd& v_n, const VectorXd& v_m,
                      double lambda_n, double lambda_m);

} // namespace gpn::kernels

#endif
