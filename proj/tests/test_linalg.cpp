#include "doctest.h"

#include <Eigen/Dense>

#include "gpn/linalg.hpp"
#include "gpn/rng.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using namespace gpn;

namespace {

MatrixXd random_spd(Rng& rng, int n, double diag_boost = 0.5) {
    MatrixXd g(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) g(i, j) = rng.normal();
    MatrixXd a = g * g.transpose() / double(n);
    a.diagonal().array() += diag_boost;
    return a;
}

} // namespace

TEST_CASE("cholesky of the identity is the identity") {
    const MatrixXd eye = MatrixXd::Identity(3, 3);
    const auto fac = linalg::cholesky(eye);
    CHECK((fac.lower - eye).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("cholesky reconstructs a 2x2 SPD matrix") {
    MatrixXd a(2, 2);
    a << 4, 2, 2, 3;
    const auto fac = linalg::cholesky(a);
    CHECK((fac.reconstruct() - a).norm() / a.norm() <= 1e-10);
    // lower-triangular with positive diagonal
    CHECK(fac.lower(0, 1) == 0.0);
    CHECK(fac.lower(0, 0) > 0.0);
    CHECK(fac.lower(1, 1) > 0.0);
}

TEST_CASE("cholesky rejects an indefinite matrix") {
    MatrixXd a(2, 2);
    a << 1, 2, 2, 1; // eigenvalues 3 and -1
    CHECK_THROWS_AS(linalg::cholesky(a), NotPositiveDefinite);
}

TEST_CASE("cholesky reconstruction property on random SPD inputs") {
    Rng rng(41);
    for (int rep = 0; rep < 25; ++rep) {
        const int n = 1 + int(rng.below(8));
        const MatrixXd a = random_spd(rng, n);
        const auto fac = linalg::cholesky(a);
        CHECK((fac.reconstruct() - a).norm() / a.norm() <= 1e-10);
        const MatrixXd x = linalg::chol_solve(fac, a);
        CHECK((x - MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() <= 1e-8);
    }
}

TEST_CASE("jittered_cholesky leaves PD matrices alone") {
    const auto res = linalg::jittered_cholesky(MatrixXd::Identity(2, 2), 1e-8);
    CHECK(res.jitter_used == 0.0);
}

TEST_CASE("jittered_cholesky escalates on a rank-1 matrix") {
    MatrixXd a(2, 2);
    a << 1, 1, 1, 1;
    const auto res = linalg::jittered_cholesky(a, 1e-8);
    CHECK(res.jitter_used >= 1e-8);
    const MatrixXd target = a + res.jitter_used * MatrixXd::Identity(2, 2);
    CHECK((res.factor.reconstruct() - target).norm() <= 1e-10 * target.norm());
}

TEST_CASE("jittered_cholesky on the zero matrix gives sqrt(jitter) I") {
    const auto res = linalg::jittered_cholesky(MatrixXd::Zero(2, 2), 1e-8);
    CHECK(res.jitter_used > 0.0);
    const MatrixXd expect =
        std::sqrt(res.jitter_used) * MatrixXd::Identity(2, 2);
    CHECK((res.factor.lower - expect).cwiseAbs().maxCoeff() <= 1e-18);
}

TEST_CASE("jittered_cholesky is deterministic") {
    MatrixXd a(3, 3);
    a.setConstant(0.7);
    const auto r1 = linalg::jittered_cholesky(a, 1e-8);
    const auto r2 = linalg::jittered_cholesky(a, 1e-8);
    CHECK(r1.jitter_used == r2.jitter_used);
    CHECK((r1.factor.lower - r2.factor.lower).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("jittered_cholesky exhausts on a matrix with a large negative eigenvalue") {
    MatrixXd a(2, 2);
    a << 1, 0, 0, -1e3;
    CHECK_THROWS_AS(linalg::jittered_cholesky(a, 1e-8), JitterExhausted);
}

TEST_CASE("chol_solve identities") {
    const auto eye_fac = linalg::cholesky(MatrixXd::Identity(3, 3));
    MatrixXd b(3, 2);
    b << 1, 2, 3, 4, 5, 6;
    CHECK((linalg::chol_solve(eye_fac, b) - b).cwiseAbs().maxCoeff() == 0.0);

    MatrixXd a(2, 2);
    a << 4, 2, 2, 3;
    const auto fac = linalg::cholesky(a);
    MatrixXd rhs(2, 1);
    rhs << 1, 0;
    const MatrixXd x = linalg::chol_solve(fac, rhs);
    CHECK((a * x - rhs).cwiseAbs().maxCoeff() <= 1e-8);

    MatrixXd d = MatrixXd::Zero(2, 2);
    d.diagonal() << 2, 8;
    MatrixXd rhs2(2, 1);
    rhs2 << 2, 8;
    const MatrixXd ones = linalg::chol_solve(linalg::cholesky(d), rhs2);
    CHECK((ones - MatrixXd::Ones(2, 1)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("chol_solve rejects mismatched shapes") {
    const auto fac = linalg::cholesky(MatrixXd::Identity(3, 3));
    CHECK_THROWS_AS(linalg::chol_solve(fac, MatrixXd::Zero(2, 1)),
                    DimensionMismatch);
}

TEST_CASE("psd_cholesky handles singular PSD inputs exactly") {
    CHECK(linalg::psd_cholesky(MatrixXd::Zero(3, 3)).lower.isZero(0.0));

    MatrixXd a(2, 2);
    a << 1, 1, 1, 1;
    const auto fac = linalg::psd_cholesky(a);
    CHECK((fac.reconstruct() - a).cwiseAbs().maxCoeff() <= 1e-12);

    MatrixXd bad(2, 2);
    bad << 1, 0, 0, -1;
    CHECK_THROWS_AS(linalg::psd_cholesky(bad), NotPositiveDefinite);
}
