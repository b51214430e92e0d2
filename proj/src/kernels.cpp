#include "gpn/kernels.hpp"

#include <cmath>

namespace gpn::kernels {

namespace {
constexpr double kDetFloor = 1e-12;

void require_positive_lengthscale(double l) {
    if (!(l > 0.0)) throw DimensionMismatch("kernels: lengthscale must be positive");
}
} // namespace

double se_kernel(double a, double a_prime, double lengthscale) {
    require_positive_lengthscale(lengthscale);
    const double d = a - a_prime;
    return std::exp(-d * d / (2.0 * lengthscale * lengthscale));
}

double gpn_cov(const VectorXd& x, const VectorXd& x_prime, const VectorXd& w,
               double lengthscale) {
    if (x.size() != x_prime.size() || x.size() != w.size())
        throw DimensionMismatch("gpn_cov: x, x', w must have equal length");
    return se_kernel(w.dot(x), w.dot(x_prime), lengthscale);
}

MatrixXd kernel_matrix(const VectorXd& a, const VectorXd& b, double lengthscale) {
    require_positive_lengthscale(lengthscale);
    const double inv = 1.0 / (2.0 * lengthscale * lengthscale);
    MatrixXd k(a.size(), b.size());
    for (Eigen::Index i = 0; i < a.size(); ++i)
        for (Eigen::Index j = 0; j < b.size(); ++j) {
            const double d = a[i] - b[j];
            k(i, j) = std::exp(-d * d * inv);
        }
    return k;
}

VectorXd psi(double mu, double var, const VectorXd& v, double lengthscale) {
    require_positive_lengthscale(lengthscale);
    if (var < 0.0) throw DimensionMismatch("psi: variance must be nonnegative");
    const double l2 = lengthscale * lengthscale;
    const double e = l2 + var;
    const double amp = std::sqrt(l2 / e);
    VectorXd out(v.size());
    for (Eigen::Index r = 0; r < v.size(); ++r) {
        const double d = mu - v[r];
        out[r] = amp * std::exp(-d * d / (2.0 * e));
    }
    return out;
}

MatrixXd omega(double mu, double var, const VectorXd& v, double lengthscale) {
    require_positive_lengthscale(lengthscale);
    if (var < 0.0) throw DimensionMismatch("omega: variance must be nonnegative");
    const double l2 = lengthscale * lengthscale;
    const double c = l2 + 2.0 * var;
    const double amp = std::sqrt(l2 / c);
    const Eigen::Index n = v.size();
    MatrixXd out(n, n);
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index t = r; t < n; ++t) {
            const double mid = mu - 0.5 * (v[r] + v[t]);
            const double diff = v[r] - v[t];
            const double val =
                amp * std::exp(-mid * mid / c - diff * diff / (4.0 * l2));
            out(r, t) = val;
            out(t, r) = val;
        }
    return out;
}

MatrixXd cross_expectation(double mu_a, double mu_b, double var_a, double var_b,
                           double cov, const VectorXd& va, const VectorXd& vb,
                           double la, double lb) {
    require_positive_lengthscale(la);
    require_positive_lengthscale(lb);
    const double ea = la * la + var_a;
    const double eb = lb * lb + var_b;
    double det = ea * eb - cov * cov;
    if (det < kDetFloor) det = kDetFloor; // Cauchy-Schwarz keeps it nonnegative
    const double amp = la * lb / std::sqrt(det);
    MatrixXd out(va.size(), vb.size());
    for (Eigen::Index r = 0; r < va.size(); ++r) {
        const double da = va[r] - mu_a;
        for (Eigen::Index t = 0; t < vb.size(); ++t) {
            const double db = vb[t] - mu_b;
            const double quad = eb * da * da + ea * db * db - 2.0 * cov * da * db;
            out(r, t) = amp * std::exp(-quad / (2.0 * det));
        }
    }
    return out;
}

MatrixXd lambda_cross(double mu_n, double mu_m, double var_n, double var_m,
                      double cov_nm, const VectorXd& v_n, const VectorXd& v_m,
                      double lambda_n, double lambda_m) {
    if (var_n * var_m - cov_nm * cov_nm < -1e-12)
        throw NotPsd("lambda_cross: input moment matrix is not PSD");
    return cross_expectation(mu_m, mu_n, var_m, var_n, cov_nm, v_m, v_n,
                             lambda_m, lambda_n);
}

} // namespace gpn::kernels
