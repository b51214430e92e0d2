#include "doctest.h"

#include <functional>
#include <vector>

#include "gpn/autodiff.hpp"
#include "gpn/rng.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using namespace gpn;

namespace {

using Builder =
    std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

double eval_builder(const Builder& build, const std::vector<MatrixXd>& values) {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const auto& v : values) leaves.push_back(tape.leaf(v));
    return build(tape, leaves).value()(0, 0);
}

// compares every tape gradient entry against central differences
void check_grads(const Builder& build, std::vector<MatrixXd> values,
                 double tol = 2e-5, double h = 1e-6) {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const auto& v : values) leaves.push_back(tape.leaf(v));
    ad::Var loss = build(tape, leaves);
    tape.backward(loss);

    for (std::size_t leaf = 0; leaf < values.size(); ++leaf) {
        const MatrixXd analytic = tape.gradient(leaves[leaf]);
        for (Eigen::Index i = 0; i < values[leaf].rows(); ++i)
            for (Eigen::Index j = 0; j < values[leaf].cols(); ++j) {
                const double saved = values[leaf](i, j);
                values[leaf](i, j) = saved + h;
                const double fp = eval_builder(build, values);
                values[leaf](i, j) = saved - h;
                const double fm = eval_builder(build, values);
                values[leaf](i, j) = saved;
                const double numeric = (fp - fm) / (2.0 * h);
                const double err = std::abs(analytic(i, j) - numeric);
                const double scale =
                    std::max({1.0, std::abs(analytic(i, j)), std::abs(numeric)});
                INFO("leaf " << leaf << " entry (" << i << "," << j
                             << "): analytic " << analytic(i, j) << " numeric "
                             << numeric);
                CHECK(err <= tol * scale);
            }
    }
}

MatrixXd random_mat(Rng& rng, int r, int c, double scale = 1.0) {
    MatrixXd m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
    return m;
}

MatrixXd random_spd(Rng& rng, int n, double boost = 0.6) {
    MatrixXd g = random_mat(rng, n, n);
    MatrixXd a = g * g.transpose() / double(n);
    a.diagonal().array() += boost;
    return a;
}

// contract the op output against fixed random weights to get a scalar
ad::Var weigh(ad::Tape& tape, ad::Var x, std::uint64_t seed) {
    Rng rng(seed);
    return ad::sum(ad::cwise_mul(
        x, tape.constant(random_mat(rng, int(x.rows()), int(x.cols())))));
}

} // namespace

TEST_CASE("arithmetic and elementwise adjoints") {
    Rng rng(11);
    const MatrixXd a = random_mat(rng, 3, 4);
    const MatrixXd b = random_mat(rng, 4, 2);
    const MatrixXd c = random_mat(rng, 3, 4);

    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::matmul(l[0], l[1]), 1);
        },
        {a, b});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::cwise_mul(ad::add(l[0], l[1]), ad::sub(l[0], l[1])), 2);
        },
        {a, c});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::affine(l[0], -1.7, 0.4), 3);
        },
        {a});
}

TEST_CASE("unary function adjoints") {
    Rng rng(12);
    MatrixXd pos = random_mat(rng, 3, 3).cwiseAbs();
    pos.array() += 0.5;
    const MatrixXd any = random_mat(rng, 3, 3);

    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::cwise_exp(l[0]), 4);
        },
        {any});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::cwise_log(l[0]), 5);
        },
        {pos});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::cwise_sqrt(l[0]), 6);
        },
        {pos});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::cwise_square(l[0]), 7);
        },
        {any});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::cwise_inv(l[0]), 8);
        },
        {pos});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::softplus(l[0]), 9);
        },
        {any});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::logistic(l[0]), 10);
        },
        {any});
}

TEST_CASE("structural op adjoints") {
    Rng rng(13);
    const MatrixXd a = random_mat(rng, 4, 5);
    const MatrixXd sq = random_mat(rng, 4, 4);
    const MatrixXd col = random_mat(rng, 4, 1);
    const MatrixXd scalar = random_mat(rng, 1, 1);

    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::transpose(l[0]), 20);
        },
        {a});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return ad::sum(ad::block(l[0], 1, 2, 2, 3));
        },
        {a});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::reshape(l[0], 2, 10), 21);
        },
        {a});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::rowwise_sum(l[0]), 22);
        },
        {a});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::colwise_sum(l[0]), 23);
        },
        {a});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::hstack({l[0], l[1], l[0]}), 24);
        },
        {col, col});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t,
                         ad::scatter_cols({{0, l[0]}, {3, l[1]}, {2, l[0]}}, 4, 5),
                         25);
        },
        {col, col});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::diag_part(l[0]), 26);
        },
        {sq});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::add_diag(l[0], l[1]), 27);
        },
        {sq, col});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::broadcast_col(l[0], 6), 28);
        },
        {col});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::mul_scalar(l[0], l[1]), 29);
        },
        {a, scalar});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::add_scalar(l[0], l[1]), 30);
        },
        {a, scalar});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::add_to_col(l[0], l[1], 2), 31);
        },
        {a, col});
}

TEST_CASE("log-softmax adjoint") {
    Rng rng(14);
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::log_softmax_rows(l[0]), 32);
        },
        {random_mat(rng, 5, 3)});
}

TEST_CASE("cholesky and triangular solve adjoints") {
    Rng rng(15);
    const MatrixXd spd = random_spd(rng, 4);
    const MatrixXd lower = MatrixXd(random_spd(rng, 4).llt().matrixL());
    const MatrixXd b = random_mat(rng, 4, 2);

    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::cholesky(l[0]), 40);
        },
        {spd});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::tri_solve_lower(l[0], l[1]), 41);
        },
        {lower, b});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::tri_solve_lower_transposed(l[0], l[1]), 42);
        },
        {lower, b});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::chol_solve(ad::cholesky(l[0]), l[1]), 43);
        },
        {spd, b});
}

TEST_CASE("kernel expectation adjoints") {
    Rng rng(16);
    const int s = 3, r = 4;
    MatrixXd mu = random_mat(rng, s, 1);
    MatrixXd var = random_mat(rng, s, 1).cwiseAbs();
    var.array() += 0.2;
    MatrixXd v = random_mat(rng, r, 1, 1.2);
    MatrixXd lam(1, 1);
    lam << 0.9;

    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::se_gram(l[0], l[1]), 50);
        },
        {v, lam});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::psi_op(l[0], l[1], l[2], l[3]), 51);
        },
        {mu, var, v, lam});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::omega_flat(l[0], l[1], l[2], l[3]), 52);
        },
        {mu, var, v, lam});

    MatrixXd mu_b = random_mat(rng, s, 1);
    MatrixXd var_b = random_mat(rng, s, 1).cwiseAbs();
    var_b.array() += 0.3;
    MatrixXd cov(s, 1);
    for (int i = 0; i < s; ++i)
        cov(i, 0) = 0.5 * std::sqrt(var(i, 0) * var_b(i, 0)) * rng.uniform(-1, 1);
    MatrixXd vb = random_mat(rng, 3, 1, 1.0);
    MatrixXd lam_b(1, 1);
    lam_b << 1.25;
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t,
                         ad::cross_flat(l[0], l[1], l[2], l[3], l[4], l[5], l[6],
                                        l[7], l[8]),
                         53);
        },
        {mu, mu_b, var, var_b, cov, v, vb, lam, lam_b});
}

TEST_CASE("per-sample congruence and cholesky adjoints") {
    Rng rng(17);
    const int s = 3, p = 3, n = 2;
    MatrixXd cov_flat(s, p * p);
    for (int i = 0; i < s; ++i) {
        const MatrixXd c = random_spd(rng, p);
        cov_flat.row(i) = c.reshaped(1, p * p);
    }
    const MatrixXd w = random_mat(rng, p, n);

    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::quad_congruence(l[0], l[1]), 60);
        },
        {cov_flat, w});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::chol_rows(l[0], 3), 61);
        },
        {cov_flat});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::extract_col_rows(ad::chol_rows(l[0], 3), 1, 3), 62);
        },
        {cov_flat});
}

TEST_CASE("lower_from_packed adjoint") {
    Rng rng(18);
    const int r = 4;
    const MatrixXd packed = random_mat(rng, r * (r + 1) / 2, 1);
    const MatrixXd packed_diag = random_mat(rng, r, 1);
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::lower_from_packed(l[0], 4, false), 70);
        },
        {packed});
    check_grads(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            return weigh(t, ad::lower_from_packed(l[0], 4, true), 71);
        },
        {packed_diag});
}

TEST_CASE("clamp_nonneg passes gradients only through positive entries") {
    ad::Tape tape;
    MatrixXd x(2, 2);
    x << 0.5, -2e-9, 1.0, -1e-9;
    ad::Var leaf = tape.leaf(x);
    ad::Var out = ad::clamp_nonneg(leaf);
    CHECK(out.value()(0, 1) == 0.0);
    CHECK(out.value()(1, 1) == 0.0);
    tape.backward(ad::sum(out));
    const MatrixXd g = tape.gradient(leaf);
    CHECK(g(0, 0) == 1.0);
    CHECK(g(0, 1) == 0.0);

    MatrixXd bad(1, 1);
    bad << -1.0;
    ad::Var bad_leaf = tape.leaf(bad);
    CHECK_THROWS_AS(ad::clamp_nonneg(bad_leaf), NonFiniteGradient);
}

TEST_CASE("gradient accumulates across reuse of a variable") {
    ad::Tape tape;
    MatrixXd x(1, 1);
    x << 3.0;
    ad::Var leaf = tape.leaf(x);
    // f = x^2 + 2x  =>  f' = 2x + 2 = 8
    ad::Var loss = ad::add(ad::cwise_square(leaf), ad::affine(leaf, 2.0, 0.0));
    tape.backward(loss);
    CHECK(tape.gradient(leaf)(0, 0) == doctest::Approx(8.0).epsilon(1e-14));
}
