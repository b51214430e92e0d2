#ifndef GPN_OBJECTIVES_HPP
#define GPN_OBJECTIVES_HPP

#include <Eigen/Dense>

#include "gpn/network.hpp"

namespace gpn::objectives {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using network::MomentState;
using network::NetworkParams;
using network::VariationalPosterior;

/// Numerically stable softmax (max subtraction).
VectorXd softmax(const VectorXd& o);

inline double kappa_u_default(int n_classes) { return 3.0 - n_classes; }

/// Deterministic sigma-point representation of N(mean, cov).
struct SigmaPointSet {
    MatrixXd points;   // (2C+1) x C, row 0 is the mean point
    VectorXd weights;  // sums to 1
    double kappa_u = 0.0;
};

SigmaPointSet sigma_points(const VectorXd& mean, const MatrixXd& cov,
                           double kappa_u);

/// Regression negative-log-likelihood bound, summed over samples and units
/// (lower is better). sigma_l is the final layer's per-unit noise std.
double regression_nll(const MomentState& final_state, const MatrixXd& targets,
                      const VectorXd& sigma_l);

/// Unscented softmax cross-entropy against one-hot targets, averaged over
/// samples; a loss to minimize.
double classification_loss(const MomentState& final_state, const MatrixXd& out_w,
                           const MatrixXd& targets_onehot, double kappa_u);

/// Penalty discouraging virtual-observation variances from collapsing to 0.
double s_penalty(const NetworkParams& net, double alpha_s = 0.1,
                 double beta_s = 1e-3);

/// Sum over layers and units of the variational KL terms (without the
/// additive constant R/2 per unit).
double elbo_reg_term(const NetworkParams& net, const VariationalPosterior& post);

/// Expected log-likelihood term of the ELBO (higher is better); equals
/// -regression_nll on the same final moments.
double elbo_pred_term(const MomentState& final_state, const MatrixXd& targets,
                      const VectorXd& sigma_l);

/// Expected class probabilities under the unscented transform (used for
/// prediction); rows sum to 1.
MatrixXd predict_probs(const MomentState& final_state, const MatrixXd& out_w,
                       double kappa_u);

} // namespace gpn::objectives

#endif
