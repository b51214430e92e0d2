#include "doctest.h"

#include <cmath>

#include "gpn/kernels.hpp"
#include "gpn/rng.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using namespace gpn;

TEST_CASE("se_kernel closed form") {
    CHECK(kernels::se_kernel(0.5, 0.5, 1.0) == 1.0);
    CHECK(kernels::se_kernel(0.0, 1.0, 1.0) == doctest::Approx(std::exp(-0.5)).epsilon(1e-14));
    CHECK(kernels::se_kernel(0.0, 1.0, 1e6) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK_THROWS_AS(kernels::se_kernel(0.0, 1.0, 0.0), DimensionMismatch);
}

TEST_CASE("gpn_cov equals the SE kernel of the projections") {
    Rng rng(7);
    VectorXd x(4), xp(4), w(4);
    for (int i = 0; i < 4; ++i) {
        x[i] = rng.normal();
        xp[i] = rng.normal();
        w[i] = rng.normal();
    }
    CHECK(kernels::gpn_cov(x, x, w, 0.8) == 1.0);
    CHECK(kernels::gpn_cov(x, xp, VectorXd::Zero(4), 1.3) == 1.0);
    CHECK(kernels::gpn_cov(x, xp, w, 0.9) ==
          doctest::Approx(kernels::se_kernel(w.dot(x), w.dot(xp), 0.9)).epsilon(1e-14));
    CHECK_THROWS_AS(kernels::gpn_cov(x, xp, VectorXd::Zero(3), 1.0),
                    DimensionMismatch);
}

TEST_CASE("kernel_matrix entries") {
    VectorXd one(1);
    one << 0.0;
    CHECK(kernels::kernel_matrix(one, one, 1.0)(0, 0) == 1.0);

    VectorXd two(2);
    two << 0.0, 1.0;
    const MatrixXd k = kernels::kernel_matrix(two, two, 1.0);
    CHECK(k(0, 0) == 1.0);
    CHECK(k(1, 1) == 1.0);
    CHECK(k(0, 1) == doctest::Approx(std::exp(-0.5)).epsilon(1e-14));
    CHECK(k(0, 1) == k(1, 0));

    VectorXd b(3);
    b << 0.0, 1.0, 2.0;
    const MatrixXd row = kernels::kernel_matrix(one, b, 1.0);
    CHECK(row.rows() == 1);
    CHECK(row.cols() == 3);
    CHECK(row(0, 0) > row(0, 1));
    CHECK(row(0, 1) > row(0, 2));
}

TEST_CASE("psi reduces to the kernel row at zero variance") {
    VectorXd v(5);
    v << -2.0, -0.7, 0.1, 1.1, 2.0;
    const VectorXd p = kernels::psi(0.4, 0.0, v, 0.9);
    for (int r = 0; r < 5; ++r)
        CHECK(std::abs(p[r] - kernels::se_kernel(0.4, v[r], 0.9)) <= 1e-12);
}

TEST_CASE("psi closed-form point value") {
    VectorXd v(1);
    v << 0.0;
    CHECK(kernels::psi(0.0, 1.0, v, 1.0)[0] ==
          doctest::Approx(std::sqrt(0.5)).epsilon(1e-14));
}

TEST_CASE("psi against Monte-Carlo") {
    VectorXd v(3);
    v << -1.0, 0.0, 1.0;
    const double mu = 0.3, var = 0.5, lambda = 1.0;
    const VectorXd analytic = kernels::psi(mu, var, v, lambda);

    Rng rng(123);
    const long n = 200000;
    VectorXd sum = VectorXd::Zero(3), sum_sq = VectorXd::Zero(3);
    for (long i = 0; i < n; ++i) {
        const double a = mu + std::sqrt(var) * rng.normal();
        for (int r = 0; r < 3; ++r) {
            const double k = kernels::se_kernel(a, v[r], lambda);
            sum[r] += k;
            sum_sq[r] += k * k;
        }
    }
    for (int r = 0; r < 3; ++r) {
        const double mean = sum[r] / n;
        const double se = std::sqrt((sum_sq[r] / n - mean * mean) / n);
        CHECK(std::abs(analytic[r] - mean) <= 3.0 * se);
    }
}

TEST_CASE("omega factorizes at zero variance and matches the diagonal form") {
    VectorXd v(4);
    v << -1.5, -0.2, 0.6, 1.8;
    const double mu = 0.25, lambda = 1.1;
    const MatrixXd om0 = kernels::omega(mu, 0.0, v, lambda);
    for (int r = 0; r < 4; ++r)
        for (int t = 0; t < 4; ++t)
            CHECK(std::abs(om0(r, t) - kernels::se_kernel(mu, v[r], lambda) *
                                           kernels::se_kernel(mu, v[t], lambda)) <=
                  1e-12);

    const double var = 0.7;
    const MatrixXd om = kernels::omega(mu, var, v, lambda);
    CHECK((om - om.transpose()).cwiseAbs().maxCoeff() == 0.0);
    for (int r = 0; r < 4; ++r) {
        const double c = lambda * lambda + 2.0 * var;
        const double expect = std::sqrt(lambda * lambda / c) *
                              std::exp(-(mu - v[r]) * (mu - v[r]) / c);
        CHECK(om(r, r) == doctest::Approx(expect).epsilon(1e-12));
        for (int t = 0; t < 4; ++t) {
            CHECK(om(r, t) > 0.0);
            CHECK(om(r, t) <= 1.0);
        }
    }
}

TEST_CASE("omega against Monte-Carlo") {
    VectorXd v(2);
    v << -1.0, 1.0;
    const double mu = 0.3, var = 0.5, lambda = 1.0;
    const MatrixXd analytic = kernels::omega(mu, var, v, lambda);

    Rng rng(321);
    const long n = 200000;
    MatrixXd sum = MatrixXd::Zero(2, 2), sum_sq = MatrixXd::Zero(2, 2);
    for (long i = 0; i < n; ++i) {
        const double a = mu + std::sqrt(var) * rng.normal();
        for (int r = 0; r < 2; ++r)
            for (int t = 0; t < 2; ++t) {
                const double k = kernels::se_kernel(a, v[r], lambda) *
                                 kernels::se_kernel(a, v[t], lambda);
                sum(r, t) += k;
                sum_sq(r, t) += k * k;
            }
    }
    for (int r = 0; r < 2; ++r)
        for (int t = 0; t < 2; ++t) {
            const double mean = sum(r, t) / n;
            const double se = std::sqrt((sum_sq(r, t) / n - mean * mean) / n);
            CHECK(std::abs(analytic(r, t) - mean) <= 3.0 * se);
        }
}

TEST_CASE("lambda_cross factorizes into psi vectors at zero covariance") {
    VectorXd vn(3), vm(2);
    vn << -1.0, 0.0, 1.0;
    vm << -0.5, 0.8;
    const double mu_n = 0.2, mu_m = -0.4, var_n = 0.5, var_m = 0.8;
    const double ln = 1.0, lm = 1.3;
    const MatrixXd lam =
        kernels::lambda_cross(mu_n, mu_m, var_n, var_m, 0.0, vn, vm, ln, lm);
    const VectorXd psi_m = kernels::psi(mu_m, var_m, vm, lm);
    const VectorXd psi_n = kernels::psi(mu_n, var_n, vn, ln);
    REQUIRE(lam.rows() == 2); // rows pair with unit m's inducing points
    REQUIRE(lam.cols() == 3);
    for (int r = 0; r < 2; ++r)
        for (int t = 0; t < 3; ++t)
            CHECK(std::abs(lam(r, t) - psi_m[r] * psi_n[t]) <= 1e-10);
}

TEST_CASE("lambda_cross reduces to plain kernels in the deterministic case") {
    VectorXd vn(2), vm(2);
    vn << -0.8, 0.9;
    vm << -0.3, 0.4;
    const double mu_n = 0.1, mu_m = -0.6;
    const MatrixXd lam =
        kernels::lambda_cross(mu_n, mu_m, 0.0, 0.0, 0.0, vn, vm, 1.0, 0.7);
    for (int r = 0; r < 2; ++r)
        for (int t = 0; t < 2; ++t)
            CHECK(std::abs(lam(r, t) - kernels::se_kernel(mu_m, vm[r], 0.7) *
                                           kernels::se_kernel(mu_n, vn[t], 1.0)) <=
                  1e-12);
}

TEST_CASE("lambda_cross against Monte-Carlo with correlated activations") {
    VectorXd v(3);
    v << -1.0, 0.0, 1.0;
    const double mu_n = 0.2, mu_m = -0.4, var_n = 0.5, var_m = 0.8, cov = 0.3;
    const MatrixXd analytic =
        kernels::lambda_cross(mu_n, mu_m, var_n, var_m, cov, v, v, 1.0, 1.0);

    Rng rng(777);
    const long n = 200000;
    const double l11 = std::sqrt(var_n);
    const double l21 = cov / l11;
    const double l22 = std::sqrt(var_m - l21 * l21);
    MatrixXd sum = MatrixXd::Zero(3, 3), sum_sq = MatrixXd::Zero(3, 3);
    for (long i = 0; i < n; ++i) {
        const double z1 = rng.normal(), z2 = rng.normal();
        const double an = mu_n + l11 * z1;
        const double am = mu_m + l21 * z1 + l22 * z2;
        for (int r = 0; r < 3; ++r)
            for (int t = 0; t < 3; ++t) {
                const double k = kernels::se_kernel(am, v[r], 1.0) *
                                 kernels::se_kernel(an, v[t], 1.0);
                sum(r, t) += k;
                sum_sq(r, t) += k * k;
            }
    }
    for (int r = 0; r < 3; ++r)
        for (int t = 0; t < 3; ++t) {
            const double mean = sum(r, t) / n;
            const double se = std::sqrt((sum_sq(r, t) / n - mean * mean) / n);
            CHECK(std::abs(analytic(r, t) - mean) <= 3.0 * se);
            CHECK(analytic(r, t) > 0.0);
            CHECK(analytic(r, t) <= 1.0);
        }
}

TEST_CASE("lambda_cross rejects a non-PSD moment matrix") {
    VectorXd v(1);
    v << 0.0;
    CHECK_THROWS_AS(kernels::lambda_cross(0.0, 0.0, 0.1, 0.1, 0.5, v, v, 1.0, 1.0),
                    NotPsd);
}
