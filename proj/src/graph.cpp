#include "gpn/graph.hpp"

namespace gpn::graph {

namespace {

using network::Sharing;

Var unit_scalar(Var vec, int n) { return ad::block(vec, n, 0, 1, 1); }

Var state_var_col(const StateVars& s, int n) {
    return ad::block(s.var, 0, n, static_cast<int>(s.var.rows()), 1);
}

Var state_cov_col(const StateVars& s, int n, int m) {
    return ad::block(s.cov_flat, 0, n + m * s.width,
                     static_cast<int>(s.cov_flat.rows()), 1);
}

struct UnitContext {
    Var beta;      // R x 1
    Var m_matrix;  // kappa - beta beta^T (ML) or Khat - beta beta^T (VB)
    Var lam;       // 1 x 1
};

} // namespace

MatrixXd flatten_cov(const std::vector<MatrixXd>& cov, Eigen::Index n) {
    MatrixXd flat(static_cast<Eigen::Index>(cov.size()), n * n);
    for (std::size_t s = 0; s < cov.size(); ++s)
        flat.row(static_cast<Eigen::Index>(s)) = cov[s].reshaped(1, n * n);
    return flat;
}

std::vector<MatrixXd> unflatten_cov(const MatrixXd& flat, Eigen::Index n) {
    std::vector<MatrixXd> cov(flat.rows());
    for (Eigen::Index s = 0; s < flat.rows(); ++s)
        cov[s] = flat.row(s).reshaped(n, n);
    return cov;
}

StateVars state_to_vars(Tape& tape, const network::MomentState& state) {
    StateVars s;
    s.mode = state.mode;
    s.width = static_cast<int>(state.width());
    s.deterministic = false;
    s.mean = tape.constant(state.mean);
    if (state.mode != PropagationMode::MeanOnly) s.var = tape.constant(state.var);
    if (state.mode == PropagationMode::FullCovariance)
        s.cov_flat = tape.constant(flatten_cov(state.cov, state.width()));
    return s;
}

network::MomentState vars_to_state(const StateVars& s) {
    network::MomentState out;
    out.mode = s.mode;
    out.mean = s.mean.value();
    if (s.mode != PropagationMode::MeanOnly) out.var = s.var.value();
    if (s.mode == PropagationMode::FullCovariance)
        out.cov = unflatten_cov(s.cov_flat.value(), s.width);
    return out;
}

LayerVars constant_layer(Tape& tape, const network::LayerParams& layer,
                         bool variational) {
    LayerVars lv;
    lv.sharing = layer.sharing;
    lv.w = tape.constant(layer.w);
    VectorXd lam(layer.units()), sig(layer.units());
    for (int n = 0; n < layer.units(); ++n) {
        lam[n] = layer.lambda(n);
        sig[n] = layer.sigma(n);
    }
    lv.lambda = tape.constant(lam);
    lv.sigma = tape.constant(sig);
    for (const auto& obs : layer.obs) {
        lv.v.push_back(tape.constant(obs.v));
        lv.u.push_back(tape.constant(obs.u));
        if (!variational) lv.s.push_back(tape.constant(obs.s()));
    }
    return lv;
}

StateVars input_state(Tape& tape, const MatrixXd& x, PropagationMode mode) {
    StateVars s;
    s.mode = mode;
    s.mean = tape.constant(x);
    s.width = static_cast<int>(x.cols());
    s.deterministic = true;
    return s;
}

StateVars propagate_activation_g(StateVars state, Var w) {
    if (state.mean.cols() != w.rows())
        throw DimensionMismatch("propagate_activation: width mismatch");
    Tape& tape = *state.mean.tape;
    const int s_count = static_cast<int>(state.mean.rows());
    const int n_out = static_cast<int>(w.cols());

    StateVars out;
    out.mode = state.mode;
    out.width = n_out;
    out.deterministic = false;
    out.mean = ad::matmul(state.mean, w);
    if (state.mode == PropagationMode::MeanOnly) return out;

    if (state.deterministic) {
        out.var = tape.constant(MatrixXd::Zero(s_count, n_out));
        if (state.mode == PropagationMode::FullCovariance)
            out.cov_flat = tape.constant(MatrixXd::Zero(s_count, n_out * n_out));
        return out;
    }

    if (state.mode == PropagationMode::MeanVariance) {
        out.var = ad::matmul(state.var, ad::cwise_square(w));
    } else {
        out.cov_flat = ad::quad_congruence(state.cov_flat, w);
        std::vector<Var> diag;
        diag.reserve(n_out);
        for (int n = 0; n < n_out; ++n)
            diag.push_back(ad::block(out.cov_flat, 0, n + n * n_out, s_count, 1));
        out.var = ad::hstack(diag);
    }
    return out;
}

namespace {

// Shared ML/VB response assembly once beta and the trace matrix M are known
// per unit: mean = psi beta, var = 1 - tr(M Omega) - mean^2 + sigma^2,
// cross-covariance via the Lambda expectation.
StateVars assemble_response(const StateVars& a_state, const LayerVars& lv,
                            const std::vector<UnitContext>& ctx) {
    Tape& tape = *a_state.mean.tape;
    const int s_count = static_cast<int>(a_state.mean.rows());
    const int n_units = lv.units();
    const bool mean_only = a_state.mode == PropagationMode::MeanOnly;
    const bool full_cov = a_state.mode == PropagationMode::FullCovariance;

    Var zero_col = tape.constant(MatrixXd::Zero(s_count, 1));

    std::vector<Var> mean_cols(n_units), var_cols, mu_a(n_units), var_a(n_units);
    if (!mean_only) var_cols.resize(n_units);
    std::vector<Var> psis(n_units);

    for (int n = 0; n < n_units; ++n) {
        mu_a[n] = ad::block(a_state.mean, 0, n, s_count, 1);
        var_a[n] = mean_only ? zero_col : state_var_col(a_state, n);
        const Var& vn = lv.unit_v(n);
        psis[n] = ad::psi_op(mu_a[n], var_a[n], vn, ctx[n].lam);
        mean_cols[n] = ad::matmul(psis[n], ctx[n].beta);
        if (mean_only) continue;

        const int r = static_cast<int>(vn.rows());
        Var om = ad::omega_flat(mu_a[n], var_a[n], vn, ctx[n].lam);
        Var tr = ad::matmul(om, ad::reshape(ctx[n].m_matrix, r * r, 1));
        Var ef2 = ad::affine(tr, -1.0, 1.0);
        Var fvar = ad::clamp_nonneg(ad::sub(ef2, ad::cwise_square(mean_cols[n])));
        Var sig2 = ad::cwise_square(unit_scalar(lv.sigma, n));
        var_cols[n] = ad::add_scalar(fvar, sig2);
    }

    StateVars out;
    out.mode = a_state.mode;
    out.width = n_units;
    out.deterministic = false;
    out.mean = ad::hstack(mean_cols);
    if (mean_only) return out;
    out.var = ad::hstack(var_cols);

    if (full_cov) {
        std::vector<std::pair<int, Var>> cols;
        cols.reserve(n_units * n_units);
        for (int n = 0; n < n_units; ++n)
            cols.emplace_back(n + n * n_units, var_cols[n]);
        for (int n = 0; n < n_units; ++n)
            for (int m = n + 1; m < n_units; ++m) {
                const Var& vn = lv.unit_v(n);
                const Var& vm = lv.unit_v(m);
                const int rn = static_cast<int>(vn.rows());
                const int rm = static_cast<int>(vm.rows());
                Var cov_a = a_state.deterministic ? zero_col
                                                  : state_cov_col(a_state, n, m);
                // E[alpha_rn alpha_tm], flattened to match vec(beta_n beta_m^T)
                Var lam_flat = ad::cross_flat(mu_a[n], mu_a[m], var_a[n], var_a[m],
                                              cov_a, vn, vm, ctx[n].lam, ctx[m].lam);
                Var outer = ad::reshape(
                    ad::matmul(ctx[n].beta, ad::transpose(ctx[m].beta)), rn * rm, 1);
                Var cov_nm = ad::sub(ad::matmul(lam_flat, outer),
                                     ad::cwise_mul(mean_cols[n], mean_cols[m]));
                cols.emplace_back(n + m * n_units, cov_nm);
                cols.emplace_back(m + n * n_units, cov_nm);
            }
        out.cov_flat = ad::scatter_cols(cols, s_count, n_units * n_units);
    }
    return out;
}

} // namespace

StateVars propagate_response_ml_g(const StateVars& a_state, const LayerVars& lv) {
    if (a_state.width != lv.w.cols())
        throw DimensionMismatch("propagate_response_ml: unit count mismatch");
    Tape& tape = *a_state.mean.tape;
    const int n_units = lv.units();

    // kappa and beta are per unit (or per shared observation set) and do not
    // depend on the samples.
    std::vector<UnitContext> ctx(n_units);
    const bool shared = lv.sharing == Sharing::Layer;
    for (int n = 0; n < n_units; ++n) {
        ctx[n].lam = unit_scalar(lv.lambda, n);
        if (shared && n > 0) {
            // the gram matrix is shared, but lambda may differ per unit only
            // when observations are not shared; with layer sharing lambda is
            // still per unit, so kappa must be rebuilt per unit.
        }
        const Var& vn = lv.unit_v(n);
        const int r = static_cast<int>(vn.rows());
        Var k = ad::se_gram(vn, ctx[n].lam);
        Var kj = ad::add_diag(k, lv.unit_s(n));
        Var l = ad::cholesky(kj);
        Var eye = tape.constant(MatrixXd::Identity(r, r));
        Var kappa = ad::chol_solve(l, eye);
        ctx[n].beta = ad::chol_solve(l, lv.unit_u(n));
        ctx[n].m_matrix =
            ad::sub(kappa, ad::matmul(ctx[n].beta, ad::transpose(ctx[n].beta)));
    }
    return assemble_response(a_state, lv, ctx);
}

StateVars propagate_response_vb_g(const StateVars& a_state, const LayerVars& lv,
                                  const PostVars& post) {
    if (a_state.width != lv.w.cols())
        throw DimensionMismatch("propagate_response_vb: unit count mismatch");
    Tape& tape = *a_state.mean.tape;
    const int n_units = lv.units();

    std::vector<UnitContext> ctx(n_units);
    for (int n = 0; n < n_units; ++n) {
        ctx[n].lam = unit_scalar(lv.lambda, n);
        const Var& vn = lv.unit_v(n);
        const int r = static_cast<int>(vn.rows());
        Var k = ad::se_gram(vn, ctx[n].lam);
        Var l = ad::cholesky(k);
        ctx[n].beta = ad::chol_solve(l, post.mu_u[n]);
        // Khat = L^{-T} (I - Q Q^T) L^{-1} with Q = L^{-1} C; this form makes
        // the prior posterior (C = L) cancel exactly.
        Var q = ad::tri_solve_lower(l, post.chol_sigma_u[n]);
        Var eye = tape.constant(MatrixXd::Identity(r, r));
        Var mq = ad::sub(eye, ad::matmul(q, ad::transpose(q)));
        Var t1 = ad::tri_solve_lower_transposed(l, mq);
        Var khat = ad::transpose(ad::tri_solve_lower_transposed(l, ad::transpose(t1)));
        ctx[n].m_matrix =
            ad::sub(khat, ad::matmul(ctx[n].beta, ad::transpose(ctx[n].beta)));
    }
    return assemble_response(a_state, lv, ctx);
}

StateVars forward_g(Tape& tape, const std::vector<LayerVars>& layers,
                    const MatrixXd& inputs, PropagationMode mode,
                    const std::vector<PostVars>* post) {
    StateVars state = input_state(tape, inputs, mode);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        state = propagate_activation_g(state, layers[l].w);
        state = post ? propagate_response_vb_g(state, layers[l], (*post)[l])
                     : propagate_response_ml_g(state, layers[l]);
    }
    return state;
}

Var regression_nll_g(const StateVars& final_state, const MatrixXd& targets,
                     Var sigma) {
    Tape& tape = *final_state.mean.tape;
    const int s_count = static_cast<int>(final_state.mean.rows());
    const int n = final_state.width;
    if (targets.rows() != s_count || targets.cols() != n)
        throw DimensionMismatch("regression_nll: target shape mismatch");

    Var t = tape.constant(targets);
    Var sig2 = ad::cwise_square(sigma);
    // E[F^2]; the propagated variance carries sigma^2, so subtract it back
    // out except in MeanOnly mode where F is treated as deterministic.
    Var ef2;
    Var mean2 = ad::cwise_square(final_state.mean);
    if (final_state.mode == PropagationMode::MeanOnly) {
        ef2 = mean2;
    } else {
        Var ones = tape.constant(MatrixXd::Ones(s_count, 1));
        Var sig2_rows = ad::matmul(ones, ad::transpose(sig2));
        ef2 = ad::sub(ad::add(final_state.var, mean2), sig2_rows);
    }
    Var resid = ad::add(ad::sub(tape.constant(MatrixXd(targets.array().square())),
                                ad::affine(ad::cwise_mul(t, final_state.mean), 2.0, 0.0)),
                        ef2);
    Var scaled = ad::matmul(resid, ad::cwise_inv(sig2)); // sums over units? no:
    // resid is S x N and cwise_inv(sig2) is N x 1, so the product already
    // contracts the unit dimension with the 1/sigma^2 weights.
    Var quad = ad::affine(ad::sum(scaled), 0.5, 0.0);
    Var log_term = ad::affine(ad::sum(ad::cwise_log(sigma)),
                              static_cast<double>(s_count), 0.0);
    return ad::add(log_term, quad);
}

Var elbo_pred_g(const StateVars& final_state, const MatrixXd& targets, Var sigma) {
    return ad::affine(regression_nll_g(final_state, targets, sigma), -1.0, 0.0);
}

namespace {

Var ut_point_term(Var point, Var t_const) {
    return ad::sum(ad::cwise_mul(t_const, ad::log_softmax_rows(point)));
}

} // namespace

Var classification_loss_g(const StateVars& final_state, Var head,
                          const MatrixXd& targets_onehot, double kappa_u) {
    Tape& tape = *final_state.mean.tape;
    const int s_count = static_cast<int>(final_state.mean.rows());
    const int c = static_cast<int>(head.cols());
    if (targets_onehot.rows() != s_count || targets_onehot.cols() != c)
        throw DimensionMismatch("classification_loss: target shape mismatch");
    if (kappa_u <= -static_cast<double>(c))
        throw DimensionMismatch("classification_loss: kappa_u must exceed -C");
    const double spread = static_cast<double>(c) + kappa_u;

    Var t = tape.constant(targets_onehot);
    Var logits_mean = ad::matmul(final_state.mean, head);

    const double w0 = kappa_u / spread;
    const double wi = 1.0 / (2.0 * spread);

    Var acc = ad::affine(ut_point_term(logits_mean, t), w0, 0.0);
    if (final_state.mode == PropagationMode::MeanVariance) {
        Var logits_var = ad::matmul(final_state.var, ad::cwise_square(head));
        Var offsets = ad::cwise_sqrt(ad::affine(logits_var, spread, 1e-12));
        for (int j = 0; j < c; ++j) {
            Var col = ad::block(offsets, 0, j, s_count, 1);
            Var plus = ad::add_to_col(logits_mean, col, j);
            Var minus = ad::add_to_col(logits_mean, ad::affine(col, -1.0, 0.0), j);
            acc = ad::add(acc, ad::affine(ad::add(ut_point_term(plus, t),
                                                  ut_point_term(minus, t)),
                                          wi, 0.0));
        }
    } else if (final_state.mode == PropagationMode::FullCovariance) {
        Var cov_logits = ad::quad_congruence(final_state.cov_flat, head);
        Var scaled = ad::affine(cov_logits, spread, 0.0);
        // tiny diagonal floor keeps the per-sample factorization defined when
        // the head projects to more classes than there are units
        std::vector<std::pair<int, Var>> floor_cols;
        Var l_flat = ad::chol_rows(scaled, c, 1e-12);
        for (int j = 0; j < c; ++j) {
            Var col = ad::extract_col_rows(l_flat, j, c); // S x C rows = L_s col j
            Var plus = ad::add(logits_mean, col);
            Var minus = ad::sub(logits_mean, col);
            acc = ad::add(acc, ad::affine(ad::add(ut_point_term(plus, t),
                                                  ut_point_term(minus, t)),
                                          wi, 0.0));
        }
    } else {
        // MeanOnly: point mass, the mean point is the whole transform; its
        // weight must be 1 regardless of kappa.
        acc = ut_point_term(logits_mean, t);
    }
    return ad::affine(acc, -1.0 / static_cast<double>(s_count), 0.0);
}

Var s_penalty_g(Tape& tape, const std::vector<LayerVars>& layers, double alpha_s,
                double beta_s) {
    Var total = tape.constant(MatrixXd::Zero(1, 1));
    for (const auto& lv : layers) {
        if (lv.s.empty()) continue;
        const double r = static_cast<double>(lv.v[0].rows());
        if (lv.sharing == Sharing::Layer) {
            Var term = ad::sum(ad::logistic(ad::affine(ad::cwise_inv(lv.s[0]), beta_s, 0.0)));
            total = ad::add(total, ad::affine(term, alpha_s / r, 0.0));
        } else {
            const double n_units = static_cast<double>(lv.units());
            for (const Var& s : lv.s) {
                Var term = ad::sum(ad::logistic(ad::affine(ad::cwise_inv(s), beta_s, 0.0)));
                total = ad::add(total, ad::affine(term, alpha_s / (r * n_units), 0.0));
            }
        }
    }
    return total;
}

Var elbo_reg_g(Tape& tape, const std::vector<LayerVars>& layers,
               const std::vector<PostVars>& post) {
    Var total = tape.constant(MatrixXd::Zero(1, 1));
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const LayerVars& lv = layers[l];
        for (int n = 0; n < lv.units(); ++n) {
            Var lam = unit_scalar(lv.lambda, n);
            Var k = ad::se_gram(lv.unit_v(n), lam);
            Var chol_k = ad::cholesky(k);
            const Var& c = post[l].chol_sigma_u[n];
            Var trace = ad::sum(ad::cwise_square(ad::tri_solve_lower(chol_k, c)));
            Var quad = ad::sum(ad::cwise_square(
                ad::tri_solve_lower(chol_k, post[l].mu_u[n])));
            Var logdet = ad::affine(
                ad::sub(ad::sum(ad::cwise_log(ad::diag_part(chol_k))),
                        ad::sum(ad::cwise_log(ad::diag_part(c)))),
                2.0, 0.0);
            total = ad::add(total,
                            ad::affine(ad::add(ad::add(trace, quad), logdet), 0.5, 0.0));
        }
    }
    return total;
}

} // namespace gpn::graph
