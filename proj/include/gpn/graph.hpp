#ifndef GPN_GRAPH_HPP
#define GPN_GRAPH_HPP

#include <vector>

#include "gpn/autodiff.hpp"
#include "gpn/network.hpp"

// Tape-level builders for moment propagation and the training objectives.
// Both the plain evaluation API (network.hpp / objectives.hpp) and the
// trainer go through these, so there is exactly one implementation of every
// formula.

namespace gpn::graph {

using ad::Tape;
using ad::Var;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using network::PropagationMode;

/// Natural-valued parameter handles of one layer on a tape.
struct LayerVars {
    Var w;
    Var lambda;              // N x 1, positive
    Var sigma;               // N x 1, positive
    std::vector<Var> v;      // per unit (or one shared entry)
    std::vector<Var> u;
    std::vector<Var> s;      // empty in variational mode (S treated as 0)
    network::Sharing sharing = network::Sharing::None;

    int units() const { return static_cast<int>(w.cols()); }
    const Var& unit_v(int n) const { return v[v.size() == 1 ? 0 : n]; }
    const Var& unit_u(int n) const { return u[u.size() == 1 ? 0 : n]; }
    const Var& unit_s(int n) const { return s[s.size() == 1 ? 0 : n]; }
};

struct PostVars {
    std::vector<Var> mu_u;          // per unit, R x 1
    std::vector<Var> chol_sigma_u;  // per unit, R x R lower
};

struct StateVars {
    PropagationMode mode = PropagationMode::MeanVariance;
    Var mean;       // S x N
    Var var;        // S x N (not MeanOnly)
    Var cov_flat;   // S x N^2 (FullCovariance, invalid while deterministic)
    int width = 0;
    bool deterministic = false;
};

LayerVars constant_layer(Tape& tape, const network::LayerParams& layer,
                         bool variational);

/// Per-sample covariance blocks flattened into the column-major S x N^2
/// layout used on the tape, and back.
MatrixXd flatten_cov(const std::vector<MatrixXd>& cov, Eigen::Index n);
std::vector<MatrixXd> unflatten_cov(const MatrixXd& flat, Eigen::Index n);

StateVars state_to_vars(Tape& tape, const network::MomentState& state);
network::MomentState vars_to_state(const StateVars& s);

StateVars input_state(Tape& tape, const MatrixXd& x, PropagationMode mode);

StateVars propagate_activation_g(StateVars state, Var w);

StateVars propagate_response_ml_g(const StateVars& a_state, const LayerVars& lv);

StateVars propagate_response_vb_g(const StateVars& a_state, const LayerVars& lv,
                                  const PostVars& post);

StateVars forward_g(Tape& tape, const std::vector<LayerVars>& layers,
                    const MatrixXd& inputs, PropagationMode mode,
                    const std::vector<PostVars>* post = nullptr);

/// Negative log-likelihood bound for regression (sum over samples and units,
/// lower is better). sigma is the final layer's noise std, N x 1.
Var regression_nll_g(const StateVars& final_state, const MatrixXd& targets,
                     Var sigma);

/// Unscented softmax cross-entropy, averaged over samples (to minimize).
Var classification_loss_g(const StateVars& final_state, Var head,
                          const MatrixXd& targets_onehot, double kappa_u);

Var s_penalty_g(Tape& tape, const std::vector<LayerVars>& layers,
                double alpha_s, double beta_s);

/// Variational regularizer: sum of the KL terms of Eq-49 shape (without the
/// additive constant R/2 per unit).
Var elbo_reg_g(Tape& tape, const std::vector<LayerVars>& layers,
               const std::vector<PostVars>& post);

/// Expected log-likelihood term of the ELBO; equals -regression_nll on the
/// same moments.
Var elbo_pred_g(const StateVars& final_state, const MatrixXd& targets,
                Var sigma);

} // namespace gpn::graph

#endif
