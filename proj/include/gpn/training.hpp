#ifndef GPN_TRAINING_HPP
#define GPN_TRAINING_HPP

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gpn/graph.hpp"
#include "gpn/network.hpp"

namespace gpn::training {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class ObjectiveKind {
    MlRegression,
    MlClassification,
    VbRegression,
    VbClassification,
};

inline bool is_vb(ObjectiveKind k) {
    return k == ObjectiveKind::VbRegression || k == ObjectiveKind::VbClassification;
}
inline bool is_classification(ObjectiveKind k) {
    return k == ObjectiveKind::MlClassification ||
           k == ObjectiveKind::VbClassification;
}

struct TrainConfig {
    double lr0 = 1e-3;
    double lr_decay = 10.0;
    double lr_min = 1e-6;
    int patience = 10;                  // validation evaluations without improvement
    double min_rel_improvement = 1e-3;  // 0.1% relative
    int batch_size = 200;
    long max_iters = 200000;
    std::uint64_t seed = 0;
    network::PropagationMode mode = network::PropagationMode::MeanVariance;
    ObjectiveKind objective = ObjectiveKind::MlClassification;
    bool penalty = true;
    double alpha_s = 0.1;
    double beta_s = 1e-3;
    double kappa_u = std::numeric_limits<double>::quiet_NaN(); // default 3 - C
    bool freeze_obs = false; // fixed-activation baseline: U, S, lambda frozen
    bool train_v = false;    // inducing points are fixed by default
};

// ---- Adam ---------------------------------------------------------------------

struct OptimizerState {
    VectorXd m, v;
    long step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

void adam_step(OptimizerState& state, VectorXd& params, const VectorXd& grads,
               double lr);

// ---- flat parameter view --------------------------------------------------------

class ParamLayout {
public:
    enum class Kind { LayerW, LayerLambda, LayerSigma, ObsU, ObsS, ObsV, HeadW,
                      PostMu, PostChol };
    struct Entry {
        Kind kind;
        int layer = -1;
        int obs = -1; // observation-set or unit index
        int offset = 0;
        int size = 0;
    };

    static ParamLayout build(const network::NetworkParams& net,
                             const network::VariationalPosterior* post,
                             const TrainConfig& cfg);

    int size() const { return total_; }
    const std::vector<Entry>& entries() const { return entries_; }

    VectorXd flatten(const network::NetworkParams& net,
                     const network::VariationalPosterior* post) const;
    void unflatten(const VectorXd& x, network::NetworkParams& net,
                   network::VariationalPosterior* post) const;

private:
    std::vector<Entry> entries_;
    int total_ = 0;
    bool diagonal_post_ = false;
};

// ---- objective evaluation --------------------------------------------------------

/// Binds a network (and optional posterior), an objective configuration and
/// a mini-batch; evaluates the deterministic loss and its exact gradient at
/// any flat parameter vector.
class Problem {
public:
    Problem(network::NetworkParams net,
            std::optional<network::VariationalPosterior> post, TrainConfig cfg,
            long total_train_samples);

    void set_batch(MatrixXd x, MatrixXd t);

    double loss(const VectorXd& params);
    std::pair<double, VectorXd> loss_grad(const VectorXd& params);
    /// Data term only (no penalty, no KL); used for validation tracking.
    double data_loss(const VectorXd& params, const MatrixXd& x, const MatrixXd& t);
    /// Bytes resident on the tape after one loss+gradient evaluation.
    std::size_t tape_bytes(const VectorXd& params);

    const ParamLayout& layout() const { return layout_; }
    network::NetworkParams& net() { return net_; }
    std::optional<network::VariationalPosterior>& posterior() { return post_; }
    const TrainConfig& config() const { return cfg_; }
    double kappa_u() const;

private:
    double eval(const VectorXd& params, bool with_grad, bool data_term_only,
                VectorXd* grad_out);

    network::NetworkParams net_;
    std::optional<network::VariationalPosterior> post_;
    TrainConfig cfg_;
    long total_train_ = 0;
    ParamLayout layout_;
    MatrixXd batch_x_, batch_t_;
    std::size_t last_tape_bytes_ = 0;
};

/// Exact gradient of the configured objective at `params`.
VectorXd grad(Problem& problem, const VectorXd& params);

// ---- finite differences -----------------------------------------------------------

struct FdFailure {
    int component;
    double analytic, numeric, rel_err;
};

struct FdReport {
    double worst_rel = 0.0;
    int checked = 0;
    std::vector<FdFailure> failures;
};

/// Central-difference check of every trainable scalar (or a seeded subset of
/// at least `max_components` when there are more). Components where both the
/// analytic and numeric values are below 1e-6 in magnitude are skipped.
FdReport finite_diff_check(Problem& problem, const VectorXd& params,
                           double h = 1e-5, double tol = 1e-4,
                           int max_components = 200, std::uint64_t seed = 0);

// ---- training loop -----------------------------------------------------------------

struct HistoryRow {
    long iteration;
    double lr, train_loss, val_loss, val_error, wall_ms;
};

struct TrainResult {
    std::vector<HistoryRow> history;
    double best_val_loss = 0.0;
    long best_iteration = 0;
    long iterations = 0;
    bool schedule_terminated = false;
    bool hit_max_iters = false;
    bool aborted_non_finite = false;
};

/// Mini-batch Adam loop with per-epoch validation, plateau learning-rate
/// decay by cfg.lr_decay, termination once the rate has bottomed out at
/// cfg.lr_min, and best-validation checkpointing. net (and post) are updated
/// to the best-validation parameters on return.
TrainResult train(network::NetworkParams& net,
                  std::optional<network::VariationalPosterior>& post,
                  const MatrixXd& train_x, const MatrixXd& train_t,
                  const MatrixXd& val_x, const MatrixXd& val_t,
                  const TrainConfig& cfg);

void write_history_csv(const std::string& path,
                       const std::vector<HistoryRow>& history);

/// Misclassification rate of the expected-probability argmax.
double classification_error(const network::NetworkParams& net,
                            const network::VariationalPosterior* post,
                            network::PropagationMode mode, const MatrixXd& x,
                            const MatrixXd& t_onehot, double kappa_u,
                            int chunk = 512);

} // namespace gpn::training

#endif
