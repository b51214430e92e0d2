#include "doctest.h"

#include <cmath>

#include "gpn/gp.hpp"
#include "gpn/kernels.hpp"
#include "gpn/linalg.hpp"
#include "gpn/rng.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using namespace gpn;

TEST_CASE("gp_regress with no training points returns the prior") {
    VectorXd test(3);
    test << -1.0, 0.0, 2.0;
    const auto pred = gp::gp_regress(VectorXd(), VectorXd(), test, 1.0, 0.1);
    CHECK(pred.mean.cwiseAbs().maxCoeff() == 0.0);
    CHECK((pred.cov - kernels::kernel_matrix(test, test, 1.0)).cwiseAbs().maxCoeff() ==
          0.0);
}

TEST_CASE("gp_regress interpolates noiseless observations") {
    VectorXd x(3), y(3);
    x << -1.0, 0.2, 1.5;
    y << 0.3, -0.8, 1.1;
    const auto pred = gp::gp_regress(x, y, x, 1.0, 0.0);
    CHECK((pred.mean - y).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("gp_regress matches a brute-force conditional Gaussian") {
    Rng rng(99);
    VectorXd train_x(5), train_y(5), test_x(3);
    for (int i = 0; i < 5; ++i) {
        train_x[i] = rng.uniform(-2.0, 2.0);
        train_y[i] = rng.normal();
    }
    for (int i = 0; i < 3; ++i) test_x[i] = rng.uniform(-2.0, 2.0);
    const double lambda = 0.8, noise = 0.05;

    // joint normal over (noisy train outputs, test function values),
    // conditioned with explicit inverses
    const MatrixXd k_tt = kernels::kernel_matrix(train_x, train_x, lambda) +
                          noise * MatrixXd::Identity(5, 5);
    const MatrixXd k_tx = kernels::kernel_matrix(train_x, test_x, lambda);
    const MatrixXd k_xx = kernels::kernel_matrix(test_x, test_x, lambda);
    const MatrixXd k_tt_inv = k_tt.inverse();
    const VectorXd mean_oracle = k_tx.transpose() * k_tt_inv * train_y;
    const MatrixXd cov_oracle = k_xx - k_tx.transpose() * k_tt_inv * k_tx;

    const auto pred = gp::gp_regress(train_x, train_y, test_x, lambda, noise);
    CHECK((pred.mean - mean_oracle).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK((pred.cov - cov_oracle).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("sparse_predict interpolates a single noiseless observation") {
    gp::VirtualObservations obs;
    obs.v = VectorXd::Constant(1, 0.4);
    obs.u = VectorXd::Constant(1, -1.3);
    obs.s = VectorXd::Zero(1);
    const auto pred = gp::sparse_predict(obs.v, obs, 1.0, 0.0);
    CHECK(std::abs(pred.mean[0] - obs.u[0]) <= 1e-8);
}

TEST_CASE("sparse_predict with zero targets predicts zero") {
    gp::VirtualObservations obs;
    obs.v = VectorXd::LinSpaced(5, -2.0, 2.0);
    obs.u = VectorXd::Zero(5);
    obs.s = VectorXd::Constant(5, 0.1);
    VectorXd q(4);
    q << -1.7, -0.3, 0.9, 2.2;
    const auto pred = gp::sparse_predict(q, obs, 1.0, 0.3);
    CHECK(pred.mean.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sparse_predict equals exact GP regression when V covers the data") {
    Rng rng(1234);
    for (int rep = 0; rep < 10; ++rep) {
        const int n = 2 + int(rng.below(9));
        VectorXd x(n), y(n);
        for (int i = 0; i < n; ++i) {
            x[i] = rng.uniform(-2.0, 2.0);
            y[i] = rng.normal();
        }
        const double lambda = rng.uniform(0.6, 1.5);
        const double noise = rng.uniform(0.01, 0.3);
        VectorXd test(4);
        for (int i = 0; i < 4; ++i) test[i] = rng.uniform(-2.5, 2.5);

        gp::VirtualObservations obs;
        obs.v = x;
        obs.u = y;
        obs.s = VectorXd::Constant(n, noise);
        const auto sparse = gp::sparse_predict(test, obs, lambda, noise);
        const auto exact = gp::gp_regress(x, y, test, lambda, noise);
        CHECK((sparse.mean - exact.mean).cwiseAbs().maxCoeff() <= 1e-8);
        CHECK((sparse.cov - exact.cov).cwiseAbs().maxCoeff() <= 1e-8);
    }
}

TEST_CASE("sparse_predict variance never drops below the noise floor") {
    Rng rng(555);
    for (int rep = 0; rep < 20; ++rep) {
        const int r = 1 + int(rng.below(8));
        gp::VirtualObservations obs;
        obs.v.resize(r);
        obs.u.resize(r);
        obs.s.resize(r);
        for (int i = 0; i < r; ++i) {
            obs.v[i] = rng.uniform(-2.0, 2.0);
            obs.u[i] = rng.normal();
            obs.s[i] = rng.uniform(0.0, 0.2);
        }
        const double noise = rng.uniform(0.0, 0.5);
        VectorXd q(6);
        for (int i = 0; i < 6; ++i) q[i] = rng.uniform(-3.0, 3.0);
        const auto pred = gp::sparse_predict(q, obs, rng.uniform(0.5, 1.5), noise);
        CHECK(pred.cov.diagonal().minCoeff() >= noise - 1e-10);
    }
}

TEST_CASE("nonparam_marginal_cov basics") {
    MatrixXd single(1, 3);
    single << 0.2, -0.4, 1.0;
    VectorXd w(3);
    w << 0.5, -1.0, 0.25;
    const MatrixXd c1 = gp::nonparam_marginal_cov(single, w, 1.0, 0.07);
    CHECK(c1.rows() == 1);
    CHECK(c1(0, 0) == doctest::Approx(1.07).epsilon(1e-14));

    MatrixXd twin(2, 3);
    twin.row(0) = single.row(0);
    twin.row(1) = single.row(0);
    const MatrixXd c2 = gp::nonparam_marginal_cov(twin, w, 1.0, 0.07);
    CHECK(c2(0, 1) == 1.0);
}

TEST_CASE("nonparam_marginal_cov is PSD and invariant to shifts orthogonal to w") {
    Rng rng(77);
    MatrixXd x(4, 3);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) x(i, j) = rng.normal();
    VectorXd w(3);
    w << 1.0, -0.5, 2.0;
    const MatrixXd cov = gp::nonparam_marginal_cov(x, w, 0.9, 0.0);
    CHECK_NOTHROW(linalg::jittered_cholesky(cov));

    // z with w.z = 0
    VectorXd z(3);
    z << 0.5, 1.0, 0.0;
    z -= w * (w.dot(z) / w.squaredNorm());
    CHECK(std::abs(w.dot(z)) <= 1e-12);
    MatrixXd shifted = x;
    shifted.rowwise() += z.transpose();
    const MatrixXd cov2 = gp::nonparam_marginal_cov(shifted, w, 0.9, 0.0);
    CHECK((cov - cov2).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("fit_activation places equidistant observations on the targets") {
    const auto obs = gp::fit_activation(gp::ActivationTarget::Identity, 3, -1.0, 1.0);
    VectorXd expect(3);
    expect << -1.0, 0.0, 1.0;
    CHECK((obs.v - expect).cwiseAbs().maxCoeff() == 0.0);
    CHECK((obs.u - expect).cwiseAbs().maxCoeff() == 0.0);
    CHECK(obs.s[0] == 1e-4);
    CHECK_THROWS_AS(gp::fit_activation(gp::ActivationTarget::Tanh, 1, -1.0, 1.0),
                    DimensionMismatch);
}

TEST_CASE("eight observations reproduce tanh closely; five are worse for relu") {
    const VectorXd grid = VectorXd::LinSpaced(101, -2.0, 2.0);
    auto max_err = [&grid](gp::ActivationTarget fn, int r) {
        const auto obs = gp::fit_activation(fn, r, -2.0, 2.0);
        const auto pred = gp::sparse_predict(grid, obs, 1.0, 0.0);
        double err = 0.0;
        for (int i = 0; i < grid.size(); ++i)
            err = std::max(err, std::abs(pred.mean[i] -
                                         gp::eval_activation_target(fn, grid[i])));
        return err;
    };
    CHECK(max_err(gp::ActivationTarget::Tanh, 8) <= 0.05);
    CHECK(max_err(gp::ActivationTarget::Identity, 8) <= 1e-3);
    CHECK(max_err(gp::ActivationTarget::Relu, 5) >
          max_err(gp::ActivationTarget::Relu, 8));
}
