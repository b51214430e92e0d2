#include "gpn/training.hpp"

#include <chrono>
#include <fstream>

#include "gpn/objectives.hpp"
#include "gpn/rng.hpp"

namespace gpn::training {

using network::NetworkParams;
using network::VariationalPosterior;

void adam_step(OptimizerState& state, VectorXd& params, const VectorXd& grads,
               double lr) {
    if (params.size() != grads.size())
        throw DimensionMismatch("adam_step: shape mismatch");
    if (state.m.size() != params.size()) {
        state.m = VectorXd::Zero(params.size());
        state.v = VectorXd::Zero(params.size());
        state.step = 0;
    }
    ++state.step;
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
    state.v = state.beta2 * state.v +
              (1.0 - state.beta2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(state.beta1, double(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, double(state.step));
    params.array() -= lr * (state.m.array() / c1) /
                      ((state.v.array() / c2).sqrt() + state.eps);
}

// ---- ParamLayout ----------------------------------------------------------------

ParamLayout ParamLayout::build(const NetworkParams& net,
                               const VariationalPosterior* post,
                               const TrainConfig& cfg) {
    ParamLayout layout;
    const bool vb = is_vb(cfg.objective);
    if (vb && !post)
        throw DimensionMismatch("ParamLayout: variational objective needs a posterior");
    layout.diagonal_post_ = post && post->diagonal;

    auto push = [&layout](Kind kind, int layer, int obs, int size) {
        layout.entries_.push_back(Entry{kind, layer, obs, layout.total_, size});
        layout.total_ += size;
    };

    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& layer = net.layers[l];
        const int li = static_cast<int>(l);
        push(Kind::LayerW, li, -1, static_cast<int>(layer.w.size()));
        if (!cfg.freeze_obs) {
            push(Kind::LayerLambda, li, -1, static_cast<int>(layer.raw_lambda.size()));
        }
        push(Kind::LayerSigma, li, -1, static_cast<int>(layer.raw_sigma.size()));
        if (!vb && !cfg.freeze_obs) {
            for (std::size_t o = 0; o < layer.obs.size(); ++o) {
                const int r = static_cast<int>(layer.obs[o].v.size());
                push(Kind::ObsU, li, static_cast<int>(o), r);
                push(Kind::ObsS, li, static_cast<int>(o), r);
                if (cfg.train_v && !layer.freeze_v)
                    push(Kind::ObsV, li, static_cast<int>(o), r);
            }
        }
    }
    if (net.has_head())
        push(Kind::HeadW, -1, -1, static_cast<int>(net.out_weights.size()));
    if (vb) {
        for (std::size_t l = 0; l < post->layers.size(); ++l)
            for (std::size_t u = 0; u < post->layers[l].size(); ++u) {
                const int r = static_cast<int>(post->layers[l][u].mu_u.size());
                push(Kind::PostMu, static_cast<int>(l), static_cast<int>(u), r);
                push(Kind::PostChol, static_cast<int>(l), static_cast<int>(u),
                     post->diagonal ? r : r * (r + 1) / 2);
            }
    }
    return layout;
}

namespace {

VectorXd pack_chol(const Eigen::MatrixXd& c, bool diagonal) {
    const int r = static_cast<int>(c.rows());
    if (diagonal) {
        VectorXd p(r);
        for (int j = 0; j < r; ++j) p[j] = network::softplus_inv(c(j, j));
        return p;
    }
    VectorXd p(r * (r + 1) / 2);
    int k = 0;
    for (int j = 0; j < r; ++j) {
        p[k++] = network::softplus_inv(c(j, j));
        for (int i = j + 1; i < r; ++i) p[k++] = c(i, j);
    }
    return p;
}

Eigen::MatrixXd unpack_chol(const VectorXd& p, int r, bool diagonal) {
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(r, r);
    if (diagonal) {
        for (int j = 0; j < r; ++j) c(j, j) = network::softplus(p[j]);
        return c;
    }
    int k = 0;
    for (int j = 0; j < r; ++j) {
        c(j, j) = network::softplus(p[k++]);
        for (int i = j + 1; i < r; ++i) c(i, j) = p[k++];
    }
    return c;
}

} // namespace

VectorXd ParamLayout::flatten(const NetworkParams& net,
                              const VariationalPosterior* post) const {
    VectorXd x(total_);
    for (const Entry& e : entries_) {
        Eigen::Map<VectorXd> dst(x.data() + e.offset, e.size);
        switch (e.kind) {
            case Kind::LayerW: {
                const auto& w = net.layers[e.layer].w;
                dst = Eigen::Map<const VectorXd>(w.data(), w.size());
                break;
            }
            case Kind::LayerLambda: dst = net.layers[e.layer].raw_lambda; break;
            case Kind::LayerSigma: dst = net.layers[e.layer].raw_sigma; break;
            case Kind::ObsU: dst = net.layers[e.layer].obs[e.obs].u; break;
            case Kind::ObsS: dst = net.layers[e.layer].obs[e.obs].raw_s; break;
            case Kind::ObsV: dst = net.layers[e.layer].obs[e.obs].v; break;
            case Kind::HeadW: {
                const auto& w = net.out_weights;
                dst = Eigen::Map<const VectorXd>(w.data(), w.size());
                break;
            }
            case Kind::PostMu: dst = post->layers[e.layer][e.obs].mu_u; break;
            case Kind::PostChol:
                dst = pack_chol(post->layers[e.layer][e.obs].chol_sigma_u,
                                diagonal_post_);
                break;
        }
    }
    return x;
}

void ParamLayout::unflatten(const VectorXd& x, NetworkParams& net,
                            VariationalPosterior* post) const {
    for (const Entry& e : entries_) {
        Eigen::Map<const VectorXd> src(x.data() + e.offset, e.size);
        switch (e.kind) {
            case Kind::LayerW: {
                auto& w = net.layers[e.layer].w;
                Eigen::Map<VectorXd>(w.data(), w.size()) = src;
                break;
            }
            case Kind::LayerLambda: net.layers[e.layer].raw_lambda = src; break;
            case Kind::LayerSigma: net.layers[e.layer].raw_sigma = src; break;
            case Kind::ObsU: net.layers[e.layer].obs[e.obs].u = src; break;
            case Kind::ObsS: net.layers[e.layer].obs[e.obs].raw_s = src; break;
            case Kind::ObsV: net.layers[e.layer].obs[e.obs].v = src; break;
            case Kind::HeadW: {
                auto& w = net.out_weights;
                Eigen::Map<VectorXd>(w.data(), w.size()) = src;
                break;
            }
            case Kind::PostMu: post->layers[e.layer][e.obs].mu_u = src; break;
            case Kind::PostChol: {
                auto& c = post->layers[e.layer][e.obs].chol_sigma_u;
                c = unpack_chol(src, static_cast<int>(c.rows()), diagonal_post_);
                break;
            }
        }
    }
}

// ---- Problem ---------------------------------------------------------------------

Problem::Problem(NetworkParams net, std::optional<VariationalPosterior> post,
                 TrainConfig cfg, long total_train_samples)
    : net_(std::move(net)),
      post_(std::move(post)),
      cfg_(cfg),
      total_train_(total_train_samples),
      layout_(ParamLayout::build(net_, post_ ? &*post_ : nullptr, cfg_)) {}

void Problem::set_batch(MatrixXd x, MatrixXd t) {
    batch_x_ = std::move(x);
    batch_t_ = std::move(t);
}

double Problem::kappa_u() const {
    if (!std::isnan(cfg_.kappa_u)) return cfg_.kappa_u;
    return objectives::kappa_u_default(net_.output_width());
}

double Problem::eval(const VectorXd& params, bool with_grad, bool data_term_only,
                     VectorXd* grad_out) {
    layout_.unflatten(params, net_, post_ ? &*post_ : nullptr);
    const bool vb = is_vb(cfg_.objective);

    ad::Tape tape;
    struct LeafRef {
        ParamLayout::Kind kind;
        ad::Var var;
    };
    std::vector<std::pair<ParamLayout::Entry, ad::Var>> leaves;

    auto make_var = [&](const Eigen::MatrixXd& value, ParamLayout::Kind kind,
                        int layer, int obs) -> ad::Var {
        if (!with_grad) return tape.constant(value);
        for (const auto& e : layout_.entries())
            if (e.kind == kind && e.layer == layer && e.obs == obs) {
                ad::Var leaf = tape.leaf(value);
                leaves.emplace_back(e, leaf);
                return leaf;
            }
        return tape.constant(value);
    };

    // layer parameter graph handles (natural-valued)
    std::vector<graph::LayerVars> lvs;
    std::vector<graph::PostVars> pvs;
    for (std::size_t l = 0; l < net_.layers.size(); ++l) {
        const auto& layer = net_.layers[l];
        const int li = static_cast<int>(l);
        graph::LayerVars lv;
        lv.sharing = layer.sharing;
        lv.w = make_var(layer.w, ParamLayout::Kind::LayerW, li, -1);
        lv.lambda = ad::softplus(
            make_var(layer.raw_lambda, ParamLayout::Kind::LayerLambda, li, -1));
        lv.sigma = ad::softplus(
            make_var(layer.raw_sigma, ParamLayout::Kind::LayerSigma, li, -1));
        for (std::size_t o = 0; o < layer.obs.size(); ++o) {
            const int oi = static_cast<int>(o);
            lv.v.push_back(make_var(layer.obs[o].v, ParamLayout::Kind::ObsV, li, oi));
            lv.u.push_back(make_var(layer.obs[o].u, ParamLayout::Kind::ObsU, li, oi));
            if (!vb)
                lv.s.push_back(ad::softplus(
                    make_var(layer.obs[o].raw_s, ParamLayout::Kind::ObsS, li, oi)));
        }
        lvs.push_back(std::move(lv));

        if (vb) {
            graph::PostVars pv;
            for (std::size_t u = 0; u < post_->layers[l].size(); ++u) {
                const auto& up = post_->layers[l][u];
                const int ui = static_cast<int>(u);
                pv.mu_u.push_back(
                    make_var(up.mu_u, ParamLayout::Kind::PostMu, li, ui));
                const int r = static_cast<int>(up.mu_u.size());
                if (with_grad) {
                    ad::Var packed = make_var(pack_chol(up.chol_sigma_u, post_->diagonal),
                                              ParamLayout::Kind::PostChol, li, ui);
                    pv.chol_sigma_u.push_back(
                        ad::lower_from_packed(packed, r, post_->diagonal));
                } else {
                    pv.chol_sigma_u.push_back(tape.constant(up.chol_sigma_u));
                }
            }
            pvs.push_back(std::move(pv));
        }
    }
    ad::Var head;
    if (net_.has_head())
        head = make_var(net_.out_weights, ParamLayout::Kind::HeadW, -1, -1);

    graph::StateVars state = graph::forward_g(tape, lvs, batch_x_, cfg_.mode,
                                              vb ? &pvs : nullptr);

    const double batch_n = static_cast<double>(batch_x_.rows());
    ad::Var loss;
    if (is_classification(cfg_.objective)) {
        loss = graph::classification_loss_g(state, head, batch_t_, kappa_u());
    } else {
        loss = ad::affine(
            graph::regression_nll_g(state, batch_t_, lvs.back().sigma),
            1.0 / batch_n, 0.0);
    }
    if (!data_term_only) {
        if (vb) {
            ad::Var kl = graph::elbo_reg_g(tape, lvs, pvs);
            loss = ad::add(loss,
                           ad::affine(kl, 1.0 / static_cast<double>(total_train_), 0.0));
        } else if (cfg_.penalty && !cfg_.freeze_obs) {
            loss = ad::add(loss, graph::s_penalty_g(tape, lvs, cfg_.alpha_s,
                                                    cfg_.beta_s));
        }
    }

    const double value = loss.value()(0, 0);
    if (with_grad) {
        tape.backward(loss);
        VectorXd g = VectorXd::Zero(layout_.size());
        for (const auto& [entry, leaf] : leaves) {
            const Eigen::MatrixXd gm = tape.gradient(leaf);
            Eigen::Map<const VectorXd> gv(gm.data(), gm.size());
            g.segment(entry.offset, entry.size) = gv;
        }
        *grad_out = std::move(g);
    }
    last_tape_bytes_ = tape.bytes();
    return value;
}

double Problem::loss(const VectorXd& params) {
    return eval(params, false, false, nullptr);
}

std::pair<double, VectorXd> Problem::loss_grad(const VectorXd& params) {
    VectorXd g;
    const double v = eval(params, true, false, &g);
    return {v, std::move(g)};
}

std::size_t Problem::tape_bytes(const VectorXd& params) {
    VectorXd g;
    eval(params, true, false, &g);
    return last_tape_bytes_;
}

double Problem::data_loss(const VectorXd& params, const MatrixXd& x,
                          const MatrixXd& t) {
    MatrixXd saved_x = std::move(batch_x_), saved_t = std::move(batch_t_);
    batch_x_ = x;
    batch_t_ = t;
    const double v = eval(params, false, true, nullptr);
    batch_x_ = std::move(saved_x);
    batch_t_ = std::move(saved_t);
    return v;
}

VectorXd grad(Problem& problem, const VectorXd& params) {
    auto [value, g] = problem.loss_grad(params);
    if (!std::isfinite(value) || !g.allFinite())
        throw NonFiniteGradient("grad: non-finite loss or gradient");
    return g;
}

// ---- finite differences -------------------------------------------------------------

FdReport finite_diff_check(Problem& problem, const VectorXd& params, double h,
                           double tol, int max_components, std::uint64_t seed) {
    if (h < 1e-7 || h > 1e-3)
        throw DimensionMismatch("finite_diff_check: h out of [1e-7, 1e-3]");
    auto [value, analytic] = problem.loss_grad(params);
    (void)value;

    std::vector<int> idx(params.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    if (static_cast<int>(idx.size()) > max_components) {
        Rng rng(derive_seed(seed, "finite-diff"));
        rng.shuffle(idx);
        idx.resize(max_components);
    }

    FdReport report;
    VectorXd p = params;
    for (int i : idx) {
        const double saved = p[i];
        p[i] = saved + h;
        const double fp = problem.loss(p);
        p[i] = saved - h;
        const double fm = problem.loss(p);
        p[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[i];
        const double scale = std::max(std::abs(a), std::abs(numeric));
        if (scale < 1e-6) continue;
        const double rel = std::abs(a - numeric) / scale;
        ++report.checked;
        report.worst_rel = std::max(report.worst_rel, rel);
        if (rel > tol) report.failures.push_back(FdFailure{i, a, numeric, rel});
    }
    return report;
}

// ---- training loop -----------------------------------------------------------------

double classification_error(const NetworkParams& net,
                            const VariationalPosterior* post,
                            network::PropagationMode mode, const MatrixXd& x,
                            const MatrixXd& t_onehot, double kappa_u, int chunk) {
    long wrong = 0;
    for (Eigen::Index start = 0; start < x.rows(); start += chunk) {
        const Eigen::Index count = std::min<Eigen::Index>(chunk, x.rows() - start);
        const MatrixXd xs = x.middleRows(start, count);
        network::MomentState out = network::forward(net, xs, mode, post);
        MatrixXd probs = objectives::predict_probs(out, net.out_weights, kappa_u);
        for (Eigen::Index i = 0; i < count; ++i) {
            Eigen::Index pred, truth;
            probs.row(i).maxCoeff(&pred);
            t_onehot.row(start + i).maxCoeff(&truth);
            if (pred != truth) ++wrong;
        }
    }
    return static_cast<double>(wrong) / static_cast<double>(x.rows());
}

namespace {

double regression_rmse(const NetworkParams& net,
                       const VariationalPosterior* post,
                       network::PropagationMode mode, const MatrixXd& x,
                       const MatrixXd& t, int chunk = 2048) {
    double se = 0.0;
    for (Eigen::Index start = 0; start < x.rows(); start += chunk) {
        const Eigen::Index count = std::min<Eigen::Index>(chunk, x.rows() - start);
        network::MomentState out =
            network::forward(net, x.middleRows(start, count), mode, post);
        se += (out.mean - t.middleRows(start, count)).squaredNorm();
    }
    return std::sqrt(se / static_cast<double>(x.rows() * t.cols()));
}

} // namespace

TrainResult train(NetworkParams& net, std::optional<VariationalPosterior>& post,
                  const MatrixXd& train_x, const MatrixXd& train_t,
                  const MatrixXd& val_x, const MatrixXd& val_t,
                  const TrainConfig& cfg) {
    if (train_x.rows() == 0) throw DimensionMismatch("train: empty training set");
    Problem problem(net, post, cfg, train_x.rows());
    VectorXd params = problem.layout().flatten(net, post ? &*post : nullptr);

    OptimizerState opt;
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    std::vector<int> order(train_x.rows());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    const bool have_val = val_x.rows() > 0;
    TrainResult result;
    double lr = cfg.lr0;
    double best = std::numeric_limits<double>::infinity();
    VectorXd best_params = params;
    int plateau = 0;
    long iter = 0;
    bool done = false;

    const int batch = std::max(1, cfg.batch_size);
    MatrixXd bx, bt;

    while (!done) {
        const auto epoch_start = std::chrono::steady_clock::now();
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        long epoch_batches = 0;

        for (Eigen::Index start = 0; start < train_x.rows() && !done;
             start += batch) {
            const Eigen::Index count =
                std::min<Eigen::Index>(batch, train_x.rows() - start);
            bx.resize(count, train_x.cols());
            bt.resize(count, train_t.cols());
            for (Eigen::Index i = 0; i < count; ++i) {
                bx.row(i) = train_x.row(order[start + i]);
                bt.row(i) = train_t.row(order[start + i]);
            }
            problem.set_batch(bx, bt);
            double value;
            VectorXd g;
            try {
                std::tie(value, g) = problem.loss_grad(params);
            } catch (const NonFiniteGradient&) {
                result.aborted_non_finite = true;
                done = true;
                break;
            }
            if (!std::isfinite(value) || !g.allFinite()) {
                result.aborted_non_finite = true;
                done = true;
                break;
            }
            epoch_loss += value;
            ++epoch_batches;
            adam_step(opt, params, g, lr);
            ++iter;
            if (iter >= cfg.max_iters) {
                result.hit_max_iters = true;
                done = true;
            }
        }
        if (epoch_batches == 0) break;

        const double train_loss = epoch_loss / double(epoch_batches);
        double val_loss = train_loss;
        if (have_val) val_loss = problem.data_loss(params, val_x, val_t) /
                                 (is_classification(cfg.objective)
                                      ? 1.0
                                      : 1.0); // data_loss already per-sample
        double val_error = std::numeric_limits<double>::quiet_NaN();
        {
            // error metric on the tracked split
            problem.layout().unflatten(params, problem.net(),
                                       problem.posterior() ? &*problem.posterior()
                                                           : nullptr);
            const MatrixXd& ex = have_val ? val_x : train_x;
            const MatrixXd& et = have_val ? val_t : train_t;
            const network::VariationalPosterior* p =
                problem.posterior() ? &*problem.posterior() : nullptr;
            if (is_classification(cfg.objective))
                val_error = classification_error(problem.net(), p, cfg.mode, ex, et,
                                                 problem.kappa_u());
            else
                val_error = regression_rmse(problem.net(), p, cfg.mode, ex, et);
        }

        const auto epoch_end = std::chrono::steady_clock::now();
        const double wall_ms =
            std::chrono::duration<double, std::milli>(epoch_end - epoch_start)
                .count();
        result.history.push_back(
            HistoryRow{iter, lr, train_loss, val_loss, val_error, wall_ms});

        if (val_loss < best * (1.0 - cfg.min_rel_improvement) || !std::isfinite(best)) {
            best = val_loss;
            best_params = params;
            result.best_iteration = iter;
            plateau = 0;
        } else {
            ++plateau;
        }
        if (!done && plateau >= cfg.patience) {
            if (lr <= cfg.lr_min * (1.0 + 1e-9)) {
                result.schedule_terminated = true;
                done = true;
            } else {
                lr = std::max(lr / cfg.lr_decay, cfg.lr_min);
                plateau = 0;
            }
        }
    }

    result.iterations = iter;
    result.best_val_loss = best;
    problem.layout().unflatten(best_params, net, post ? &*post : nullptr);
    return result;
}

void write_history_csv(const std::string& path,
                       const std::vector<HistoryRow>& history) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write history: " + path);
    out << "iteration,lr,train_loss,val_loss,val_error,wall_ms\n";
    char buf[256];
    for (const auto& row : history) {
        std::snprintf(buf, sizeof(buf), "%ld,%.10g,%.10g,%.10g,%.10g,%.3f\n",
                      row.iteration, row.lr, row.train_loss, row.val_loss,
                      row.val_error, row.wall_ms);
        out << buf;
    }
}

} // namespace gpn::training
