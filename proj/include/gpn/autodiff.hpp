#ifndef GPN_AUTODIFF_HPP
#define GPN_AUTODIFF_HPP

#include <Eigen/Dense>
#include <memory>
#include <utility>
#include <vector>

#include "gpn/errors.hpp"

// Reverse-mode differentiation on a tape of matrix-valued operations.
// Values are computed eagerly when a node is recorded; backward() replays
// the tape in reverse, each node accumulating into its inputs' gradients
// through a hand-derived adjoint. Matrix multiply, Cholesky, triangular
// solves and the Gaussian kernel expectations are primitives of the tape,
// so gradients flow through everything the moment propagation uses.

namespace gpn::ad {

using Eigen::MatrixXd;
using Eigen::VectorXd;

class Tape;

struct Var {
    Tape* tape = nullptr;
    int index = -1;

    bool valid() const { return tape != nullptr && index >= 0; }
    const MatrixXd& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

class Node {
public:
    MatrixXd value;
    MatrixXd grad;          // allocated on first accumulation
    bool needs_grad = false;

    virtual ~Node() = default;
    virtual void backward(Tape& tape) {}
};

class Tape {
public:
    Var constant(MatrixXd v);
    Var leaf(MatrixXd v);

    const MatrixXd& value(Var v) const { return nodes_[v.index]->value; }

    // Gradient of the last backward() root with respect to v; zero matrix
    // if nothing flowed into v.
    MatrixXd gradient(Var v) const;

    // Seeds d(root)/d(root) = 1 and sweeps the tape in reverse. root must
    // be 1x1.
    void backward(Var root);

    void accumulate(int index, const MatrixXd& g);
    bool wants_grad(int index) const { return nodes_[index]->needs_grad; }
    Node& node(int index) { return *nodes_[index]; }
    const Node& node(int index) const { return *nodes_[index]; }

    Var record(std::unique_ptr<Node> node);

    std::size_t size() const { return nodes_.size(); }
    // Resident bytes of all values and gradients; used for memory reporting.
    std::size_t bytes() const;

private:
    std::vector<std::unique_ptr<Node>> nodes_;
};

// ---- primitive operations -------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var cwise_mul(Var a, Var b);
// a*x + b elementwise
Var affine(Var x, double a, double b);
Var cwise_exp(Var x);
Var cwise_log(Var x);
Var cwise_sqrt(Var x);
Var cwise_square(Var x);
Var cwise_inv(Var x);
Var softplus(Var x);
Var logistic(Var x);
Var transpose(Var x);
Var sum(Var x);                       // 1x1
Var rowwise_sum(Var x);               // S x 1
Var colwise_sum(Var x);               // 1 x N
Var block(Var x, int i, int j, int rows, int cols);
Var reshape(Var x, int rows, int cols);   // column-major, like Eigen
Var hstack(const std::vector<Var>& cols);
// S x total_cols matrix, zero except the given columns
Var scatter_cols(const std::vector<std::pair<int, Var>>& cols, int rows,
                 int total_cols);
Var diag_part(Var x);                 // n x 1
Var add_diag(Var a, Var v);           // square a, column v
Var broadcast_col(Var col, int n);    // replicate S x 1 into S x n
Var mul_scalar(Var a, Var s);         // s is 1x1
Var add_scalar(Var a, Var s);         // a + s * ones, s is 1x1
// column col added into column j of a
Var add_to_col(Var a, Var col, int j);
// elementwise max(x, 0); entries below -hard_floor throw NonFiniteGradient
Var clamp_nonneg(Var x, double soft_floor = 1e-8, double hard_floor = 1e-4);
Var log_softmax_rows(Var x);

// Cholesky of a (+ escalating jitter when needed); lower factor.
Var cholesky(Var a, double jitter0 = 1e-8);
Var tri_solve_lower(Var l, Var b);             // L^{-1} B
Var tri_solve_lower_transposed(Var l, Var b);  // L^{-T} B
inline Var chol_solve(Var l, Var b) {
    return tri_solve_lower_transposed(l, tri_solve_lower(l, b));
}

// SE gram matrix K(v, v) as a function of the inducing points and the
// lengthscale (both 1x1 or column vars).
Var se_gram(Var v, Var lambda);

// psi(s, r) = E[k_SE(A_s, v_r)], A_s ~ N(mu_s, var_s); mu, var are S x 1,
// v is R x 1, lambda 1x1. Result S x R.
Var psi_op(Var mu, Var var, Var v, Var lambda);

// omega, flattened column-major over (r, t): out(s, r + t*R) =
// E[k_SE(A_s, v_r) k_SE(A_s, v_t)]. Result S x R^2.
Var omega_flat(Var mu, Var var, Var v, Var lambda);

// cross-unit expectation, flattened column-major over (r, t):
// out(s, r + t*Ra) = E[k_SE(Aa_s, va_r; la) k_SE(Ab_s, vb_t; lb)] under the
// per-sample bivariate normal with moments (mu_a, mu_b, var_a, var_b, cov).
Var cross_flat(Var mu_a, Var mu_b, Var var_a, Var var_b, Var cov, Var va,
               Var vb, Var la, Var lb);

// Per-sample congruence: row s of the result is vec(W^T C_s W) for
// cov_flat row s = vec(C_s), C_s a P x P matrix. Result S x N^2.
Var quad_congruence(Var cov_flat, Var w);

// Per-sample Cholesky of row-wise vec'd square matrices (with escalating
// per-sample jitter). Result rows are vec(L_s).
Var chol_rows(Var cov_flat, int dim, double jitter0 = 1e-10);

// Row s of the result is column j of the matrix vec'd in row s of l_flat.
Var extract_col_rows(Var l_flat, int j, int dim);

// Lower-triangular R x R matrix from a packed parameter vector. Packing is
// column-major over the lower triangle (diagonal entry first per column);
// diagonal entries pass through softplus so the factor stays invertible.
// With diagonal_only, packed holds just the R diagonal parameters.
Var lower_from_packed(Var packed, int dim, bool diagonal_only);

inline Var dot(Var a, Var b) { return sum(cwise_mul(a, b)); }

} // namespace gpn::ad

#endif
