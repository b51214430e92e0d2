#include "gpn/gp.hpp"

#include <algorithm>
#include <cmath>

#include "gpn/kernels.hpp"
#include "gpn/linalg.hpp"

namespace gpn::gp {

GpPrediction gp_regress(const VectorXd& train_x, const VectorXd& train_y,
                        const VectorXd& test_x, double lengthscale,
                        double noise_var) {
    if (train_x.size() != train_y.size())
        throw DimensionMismatch("gp_regress: train_x and train_y differ in length");

    const MatrixXd k_star = kernels::kernel_matrix(test_x, test_x, lengthscale);
    if (train_x.size() == 0)
        return GpPrediction{VectorXd::Zero(test_x.size()), k_star};

    MatrixXd k_train = kernels::kernel_matrix(train_x, train_x, lengthscale);
    k_train.diagonal().array() += noise_var;
    const auto fac = linalg::jittered_cholesky(k_train);

    const MatrixXd k_cross = kernels::kernel_matrix(test_x, train_x, lengthscale);
    const VectorXd alpha = linalg::chol_solve(fac.factor, train_y);
    const MatrixXd reduce = linalg::chol_solve(fac.factor, k_cross.transpose());

    GpPrediction out;
    out.mean = k_cross * alpha;
    out.cov = linalg::symmetrize(k_star - k_cross * reduce);
    return out;
}

GpPrediction sparse_predict(const VectorXd& activations,
                            const VirtualObservations& obs, double lengthscale,
                            double noise_var) {
    MatrixXd k_vv = kernels::kernel_matrix(obs.v, obs.v, lengthscale);
    k_vv.diagonal() += obs.s;
    const auto fac = linalg::jittered_cholesky(k_vv);

    const MatrixXd k_av = kernels::kernel_matrix(activations, obs.v, lengthscale);
    const MatrixXd k_aa = kernels::kernel_matrix(activations, activations, lengthscale);

    GpPrediction out;
    out.mean = k_av * linalg::chol_solve(fac.factor, obs.u);
    out.cov = linalg::symmetrize(k_aa - k_av * linalg::chol_solve(fac.factor, k_av.transpose()));
    out.cov.diagonal().array() += noise_var;
    return out;
}

MatrixXd nonparam_marginal_cov(const MatrixXd& x_prev, const VectorXd& w,
                               double lengthscale, double noise_var) {
    if (x_prev.cols() != w.size())
        throw DimensionMismatch("nonparam_marginal_cov: weight length mismatch");
    const VectorXd proj = x_prev * w;
    MatrixXd cov = kernels::kernel_matrix(proj, proj, lengthscale);
    cov.diagonal().array() += noise_var;
    return cov;
}

double eval_activation_target(ActivationTarget f, double a) {
    switch (f) {
        case ActivationTarget::Tanh: return std::tanh(a);
        case ActivationTarget::Relu: return std::max(0.0, a);
        case ActivationTarget::Identity: return a;
    }
    return a;
}

VirtualObservations fit_activation(ActivationTarget target, int r_count,
                                   double lo, double hi, double noise) {
    if (r_count < 2) throw DimensionMismatch("fit_activation: need at least 2 points");
    if (!(lo < hi)) throw DimensionMismatch("fit_activation: empty range");
    VirtualObservations obs;
    obs.v = VectorXd::LinSpaced(r_count, lo, hi);
    obs.u.resize(r_count);
    for (int r = 0; r < r_count; ++r)
        obs.u[r] = eval_activation_target(target, obs.v[r]);
    obs.s = VectorXd::Constant(r_count, noise);
    return obs;
}

} // namespace gpn::gp
