#ifndef GPN_NETWORK_HPP
#define GPN_NETWORK_HPP

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gpn/errors.hpp"
#include "gpn/gp.hpp"

namespace gpn::network {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Unconstrained value that softplus maps (numerically) back to y; y = 0 is
// representable because softplus underflows to exact zero far below -745.
inline double softplus_inv(double y) {
    if (y <= 0.0) return -800.0;
    if (y > 40.0) return y;
    return std::log(std::expm1(y));
}

enum class PropagationMode { MeanOnly, MeanVariance, FullCovariance };
enum class Sharing { None, Layer };
enum class TargetInit { RandomNormal, Identity, Tanh };

/// Per-sample output moments of a layer (or of the whole network).
struct MomentState {
    PropagationMode mode = PropagationMode::MeanVariance;
    MatrixXd mean;               // S x N
    MatrixXd var;                // S x N, empty in MeanOnly mode
    std::vector<MatrixXd> cov;   // S matrices of N x N, FullCovariance only

    Eigen::Index samples() const { return mean.rows(); }
    Eigen::Index width() const { return mean.cols(); }
};

/// One unit's virtual observations with the variance kept unconstrained;
/// softplus(raw_s) is the actual observation variance.
struct UnitObservations {
    VectorXd v;
    VectorXd u;
    VectorXd raw_s;

    VectorXd s() const {
        VectorXd out(raw_s.size());
        for (Eigen::Index i = 0; i < raw_s.size(); ++i) out[i] = softplus(raw_s[i]);
        return out;
    }
    gp::VirtualObservations natural() const { return gp::VirtualObservations{v, u, s()}; }
};

struct LayerParams {
    MatrixXd w;             // N_prev x N
    VectorXd raw_lambda;    // N, lengthscale = softplus(raw)
    VectorXd raw_sigma;     // N, output noise std = softplus(raw)
    std::vector<UnitObservations> obs; // N entries, or one shared entry
    Sharing sharing = Sharing::None;
    bool freeze_v = true;

    int inputs() const { return static_cast<int>(w.rows()); }
    int units() const { return static_cast<int>(w.cols()); }
    int r_count() const { return static_cast<int>(obs.at(0).v.size()); }
    double lambda(int n) const { return softplus(raw_lambda[n]); }
    double sigma(int n) const { return softplus(raw_sigma[n]); }
    const UnitObservations& unit_obs(int n) const {
        return sharing == Sharing::Layer ? obs[0] : obs[n];
    }
};

struct NetworkParams {
    std::vector<LayerParams> layers;
    MatrixXd out_weights;   // N_L x C classification head; empty for regression
    std::uint64_t seed = 0;

    bool has_head() const { return out_weights.size() > 0; }
    int input_width() const { return layers.front().inputs(); }
    int output_width() const {
        return has_head() ? static_cast<int>(out_weights.cols())
                          : layers.back().units();
    }
};

/// Variational posterior over the inducing targets U of each unit:
/// Sigma_hat = chol_sigma_u * chol_sigma_u^T.
struct UnitPosterior {
    VectorXd mu_u;
    MatrixXd chol_sigma_u;
};

struct VariationalPosterior {
    std::vector<std::vector<UnitPosterior>> layers;
    bool diagonal = false;
};

/// Posterior equal to the (jitter-consistent) prior: mu = 0 and
/// chol_sigma_u set to the exact Cholesky factor the propagation uses for
/// K(V, V), so prior recovery cancels structurally.
VariationalPosterior prior_posterior(const NetworkParams& net);

/// Network construction per the initialization recipe: fixed equidistant
/// inducing points, softplus-encoded lambda = 1, sigma = 0.1, S = sqrt(0.1),
/// Glorot-uniform weights from the seeded generator.
NetworkParams init_network(const std::vector<int>& shape, bool classifier,
                           TargetInit target_init, std::uint64_t seed,
                           int r_count = 14, double v_lo = -2.0,
                           double v_hi = 2.0, Sharing sharing = Sharing::None);

MomentState propagate_activation(const MomentState& x_state, const MatrixXd& w);

MomentState propagate_response_ml(const MomentState& a_state,
                                  const LayerParams& layer);

MomentState propagate_response_vb(const MomentState& a_state,
                                  const LayerParams& layer,
                                  const std::vector<UnitPosterior>& post);

MomentState forward(const NetworkParams& net, const MatrixXd& inputs,
                    PropagationMode mode,
                    const VariationalPosterior* vb = nullptr);

// ---- checkpoint container ----------------------------------------------------

struct Checkpoint {
    NetworkParams net;
    PropagationMode mode = PropagationMode::MeanVariance;
    std::optional<VariationalPosterior> posterior;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

const char* mode_name(PropagationMode m);
PropagationMode mode_from_name(const std::string& name);

} // namespace gpn::network

#endif
