#include "gpn/objectives.hpp"

#include <cmath>

#include "gpn/graph.hpp"
#include "gpn/linalg.hpp"

namespace gpn::objectives {

VectorXd softmax(const VectorXd& o) {
    const double mx = o.maxCoeff();
    VectorXd e = (o.array() - mx).exp();
    return e / e.sum();
}

SigmaPointSet sigma_points(const VectorXd& mean, const MatrixXd& cov,
                           double kappa_u) {
    const int c = static_cast<int>(mean.size());
    if (cov.rows() != c || cov.cols() != c)
        throw DimensionMismatch("sigma_points: covariance shape mismatch");
    if (!(static_cast<double>(c) + kappa_u > 0.0))
        throw DimensionMismatch("sigma_points: need C + kappa_u > 0");
    const double spread = static_cast<double>(c) + kappa_u;

    const auto fac = linalg::psd_cholesky(linalg::symmetrize(spread * cov));

    SigmaPointSet set;
    set.kappa_u = kappa_u;
    set.points.resize(2 * c + 1, c);
    set.weights.resize(2 * c + 1);
    set.points.row(0) = mean.transpose();
    set.weights[0] = kappa_u / spread;
    for (int i = 0; i < c; ++i) {
        set.points.row(1 + i) = (mean + fac.lower.col(i)).transpose();
        set.points.row(1 + c + i) = (mean - fac.lower.col(i)).transpose();
        set.weights[1 + i] = 1.0 / (2.0 * spread);
        set.weights[1 + c + i] = 1.0 / (2.0 * spread);
    }
    return set;
}

double regression_nll(const MomentState& final_state, const MatrixXd& targets,
                      const VectorXd& sigma_l) {
    ad::Tape tape;
    graph::StateVars s = graph::state_to_vars(tape, final_state);
    return graph::regression_nll_g(s, targets, tape.constant(sigma_l)).value()(0, 0);
}

double classification_loss(const MomentState& final_state, const MatrixXd& out_w,
                           const MatrixXd& targets_onehot, double kappa_u) {
    ad::Tape tape;
    graph::StateVars s = graph::state_to_vars(tape, final_state);
    return graph::classification_loss_g(s, tape.constant(out_w), targets_onehot,
                                        kappa_u)
        .value()(0, 0);
}

double s_penalty(const NetworkParams& net, double alpha_s, double beta_s) {
    if (!(alpha_s > 0.0) || !(beta_s > 0.0))
        throw DimensionMismatch("s_penalty: alpha_s and beta_s must be positive");
    ad::Tape tape;
    std::vector<graph::LayerVars> layers;
    for (const auto& l : net.layers)
        layers.push_back(graph::constant_layer(tape, l, false));
    return graph::s_penalty_g(tape, layers, alpha_s, beta_s).value()(0, 0);
}

double elbo_reg_term(const NetworkParams& net, const VariationalPosterior& post) {
    ad::Tape tape;
    std::vector<graph::LayerVars> layers;
    std::vector<graph::PostVars> pvs;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        layers.push_back(graph::constant_layer(tape, net.layers[l], true));
        graph::PostVars pv;
        for (const auto& up : post.layers.at(l)) {
            pv.mu_u.push_back(tape.constant(up.mu_u));
            pv.chol_sigma_u.push_back(tape.constant(up.chol_sigma_u));
        }
        pvs.push_back(std::move(pv));
    }
    return graph::elbo_reg_g(tape, layers, pvs).value()(0, 0);
}

double elbo_pred_term(const MomentState& final_state, const MatrixXd& targets,
                      const VectorXd& sigma_l) {
    return -regression_nll(final_state, targets, sigma_l);
}

MatrixXd predict_probs(const MomentState& final_state, const MatrixXd& out_w,
                       double kappa_u) {
    const Eigen::Index s_count = final_state.samples();
    const int c = static_cast<int>(out_w.cols());
    const double spread = static_cast<double>(c) + kappa_u;
    if (!(spread > 0.0))
        throw DimensionMismatch("predict_probs: need C + kappa_u > 0");

    MatrixXd logits = final_state.mean * out_w;
    MatrixXd probs = MatrixXd::Zero(s_count, c);

    if (final_state.mode == network::PropagationMode::MeanOnly) {
        for (Eigen::Index i = 0; i < s_count; ++i)
            probs.row(i) = softmax(logits.row(i)).transpose();
        return probs;
    }

    const double w0 = kappa_u / spread;
    const double wi = 1.0 / (2.0 * spread);
    const bool full = final_state.mode == network::PropagationMode::FullCovariance;
    MatrixXd offsets;
    if (!full) {
        // per-sample diagonal logits covariance; the factor is a square root
        offsets = ((final_state.var * out_w.cwiseAbs2()).array() * spread + 1e-12)
                      .sqrt();
    }
    for (Eigen::Index i = 0; i < s_count; ++i) {
        VectorXd mean_i = logits.row(i).transpose();
        probs.row(i) = w0 * softmax(mean_i).transpose();
        MatrixXd l;
        if (full) {
            MatrixXd cov = spread * out_w.transpose() * final_state.cov[i] * out_w;
            cov.diagonal().array() += 1e-12;
            l = linalg::jittered_cholesky(linalg::symmetrize(cov), 1e-12)
                    .factor.lower;
        }
        for (int j = 0; j < c; ++j) {
            VectorXd off = full ? VectorXd(l.col(j))
                                : VectorXd(VectorXd::Unit(c, j) * offsets(i, j));
            probs.row(i) += wi * (softmax(mean_i + off) + softmax(mean_i - off)).transpose();
        }
    }
    return probs;
}

} // namespace gpn::objectives
