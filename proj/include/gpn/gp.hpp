#ifndef GPN_GP_HPP
#define GPN_GP_HPP

#include <Eigen/Dense>

#include "gpn/errors.hpp"

namespace gpn::gp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// One unit's activation function, parameterized by R virtual observations:
/// inducing point v_r (an activation value), target u_r (the response there)
/// and observation variance s_r.
struct VirtualObservations {
    VectorXd v;
    VectorXd u;
    VectorXd s;

    Eigen::Index count() const { return v.size(); }
};

struct GpPrediction {
    VectorXd mean;
    MatrixXd cov;
};

/// Zero-mean exact GP regression with the scalar SE kernel: posterior
/// moments of f(test_x) given noisy observations train_y = f(train_x) + eps.
GpPrediction gp_regress(const VectorXd& train_x, const VectorXd& train_y,
                        const VectorXd& test_x, double lengthscale,
                        double noise_var);

/// Sparse prediction from virtual observations: mean and covariance of the
/// unit output at the given activations, including the output noise term on
/// the diagonal.
GpPrediction sparse_predict(const VectorXd& activations,
                            const VirtualObservations& obs, double lengthscale,
                            double noise_var);

/// Marginal output covariance of one non-parametric unit across samples:
/// entry (i,j) = gpn_cov(row_i, row_j, w, lengthscale) + noise_var * delta_ij.
MatrixXd nonparam_marginal_cov(const MatrixXd& x_prev, const VectorXd& w,
                               double lengthscale, double noise_var);

enum class ActivationTarget { Tanh, Relu, Identity };

double eval_activation_target(ActivationTarget f, double a);

/// Virtual observations that pin a named activation function on r_count
/// equidistant inducing points spanning [lo, hi].
VirtualObservations fit_activation(ActivationTarget target, int r_count,
                                   double lo, double hi, double noise = 1e-4);

} // namespace gpn::gp

#endif
