#include "gpn/network.hpp"

#include <fstream>

#include "json.hpp"

#include "gpn/graph.hpp"
#include "gpn/kernels.hpp"
#include "gpn/linalg.hpp"
#include "gpn/rng.hpp"

namespace gpn::network {

using nlohmann::json;

MomentState propagate_activation(const MomentState& x_state, const MatrixXd& w) {
    ad::Tape tape;
    graph::StateVars s = graph::state_to_vars(tape, x_state);
    return graph::vars_to_state(graph::propagate_activation_g(s, tape.constant(w)));
}

MomentState propagate_response_ml(const MomentState& a_state,
                                  const LayerParams& layer) {
    ad::Tape tape;
    graph::StateVars s = graph::state_to_vars(tape, a_state);
    graph::LayerVars lv = graph::constant_layer(tape, layer, false);
    return graph::vars_to_state(graph::propagate_response_ml_g(s, lv));
}

MomentState propagate_response_vb(const MomentState& a_state,
                                  const LayerParams& layer,
                                  const std::vector<UnitPosterior>& post) {
    ad::Tape tape;
    graph::StateVars s = graph::state_to_vars(tape, a_state);
    graph::LayerVars lv = graph::constant_layer(tape, layer, true);
    graph::PostVars pv;
    for (const auto& up : post) {
        pv.mu_u.push_back(tape.constant(up.mu_u));
        pv.chol_sigma_u.push_back(tape.constant(up.chol_sigma_u));
    }
    return graph::vars_to_state(graph::propagate_response_vb_g(s, lv, pv));
}

MomentState forward(const NetworkParams& net, const MatrixXd& inputs,
                    PropagationMode mode, const VariationalPosterior* vb) {
    if (inputs.cols() != net.input_width())
        throw DimensionMismatch("forward: input width mismatch");
    ad::Tape tape;
    std::vector<graph::LayerVars> layers;
    layers.reserve(net.layers.size());
    for (const auto& l : net.layers)
        layers.push_back(graph::constant_layer(tape, l, vb != nullptr));
    std::vector<graph::PostVars> post;
    if (vb) {
        for (const auto& lp : vb->layers) {
            graph::PostVars pv;
            for (const auto& up : lp) {
                pv.mu_u.push_back(tape.constant(up.mu_u));
                pv.chol_sigma_u.push_back(tape.constant(up.chol_sigma_u));
            }
            post.push_back(std::move(pv));
        }
    }
    return graph::vars_to_state(
        graph::forward_g(tape, layers, inputs, mode, vb ? &post : nullptr));
}

VariationalPosterior prior_posterior(const NetworkParams& net) {
    VariationalPosterior post;
    for (const auto& layer : net.layers) {
        std::vector<UnitPosterior> units;
        for (int n = 0; n < layer.units(); ++n) {
            const auto& obs = layer.unit_obs(n);
            // identical arithmetic to the propagation path so that prior
            // recovery cancels exactly
            MatrixXd k = linalg::symmetrize(
                kernels::kernel_matrix(obs.v, obs.v, layer.lambda(n)));
            auto fac = linalg::jittered_cholesky(k);
            units.push_back(UnitPosterior{VectorXd::Zero(obs.v.size()),
                                          fac.factor.lower});
        }
        post.layers.push_back(std::move(units));
    }
    return post;
}

NetworkParams init_network(const std::vector<int>& shape, bool classifier,
                           TargetInit target_init, std::uint64_t seed,
                           int r_count, double v_lo, double v_hi,
                           Sharing sharing) {
    if (shape.size() < 2) throw BadShape("init_network: need at least two sizes");
    if (classifier && shape.size() < 3)
        throw BadShape("init_network: classifier needs at least one hidden layer");
    for (int s : shape)
        if (s <= 0) throw BadShape("init_network: sizes must be positive");
    if (r_count < 2) throw BadShape("init_network: r_count must be at least 2");

    Rng rng(derive_seed(seed, "init"));
    const std::size_t n_weight_layers = shape.size() - 1;
    const std::size_t n_gpn_layers = classifier ? n_weight_layers - 1 : n_weight_layers;

    NetworkParams net;
    net.seed = seed;
    const VectorXd v_grid = VectorXd::LinSpaced(r_count, v_lo, v_hi);
    const double raw_s0 = softplus_inv(std::sqrt(0.1));

    for (std::size_t l = 0; l < n_gpn_layers; ++l) {
        LayerParams layer;
        const int fan_in = shape[l];
        const int n_units = shape[l + 1];
        const int ahead = shape[std::min(l + 2, shape.size() - 1)];
        const double bound = std::sqrt(6.0) / std::sqrt(double(fan_in + ahead));
        layer.w.resize(fan_in, n_units);
        for (int j = 0; j < n_units; ++j)
            for (int i = 0; i < fan_in; ++i)
                layer.w(i, j) = rng.uniform(-bound, bound);
        layer.raw_lambda = VectorXd::Constant(n_units, softplus_inv(1.0));
        layer.raw_sigma = VectorXd::Constant(n_units, softplus_inv(0.1));
        layer.sharing = sharing;
        const int n_obs = sharing == Sharing::Layer ? 1 : n_units;
        for (int n = 0; n < n_obs; ++n) {
            UnitObservations obs;
            obs.v = v_grid;
            obs.u.resize(r_count);
            for (int r = 0; r < r_count; ++r) {
                switch (target_init) {
                    case TargetInit::RandomNormal: obs.u[r] = rng.normal(); break;
                    case TargetInit::Identity: obs.u[r] = obs.v[r]; break;
                    case TargetInit::Tanh: obs.u[r] = std::tanh(obs.v[r]); break;
                }
            }
            obs.raw_s = VectorXd::Constant(r_count, raw_s0);
            layer.obs.push_back(std::move(obs));
        }
        net.layers.push_back(std::move(layer));
    }

    if (classifier) {
        const int n_in = shape[shape.size() - 2];
        const int n_out = shape.back();
        const double bound = std::sqrt(6.0) / std::sqrt(double(n_in + n_out));
        net.out_weights.resize(n_in, n_out);
        for (int j = 0; j < n_out; ++j)
            for (int i = 0; i < n_in; ++i)
                net.out_weights(i, j) = rng.uniform(-bound, bound);
    }
    return net;
}

// ---- checkpoint io -------------------------------------------------------

namespace {

json mat_to_json(const MatrixXd& m) {
    json j;
    j["rows"] = m.rows();
    j["cols"] = m.cols();
    std::vector<double> data;
    data.reserve(m.size());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(i, c));
    j["data"] = std::move(data);
    return j;
}

MatrixXd mat_from_json(const json& j) {
    MatrixXd m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
    const auto& data = j.at("data");
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(i, c) = data.at(k++).get<double>();
    return m;
}

json vec_to_json(const VectorXd& v) {
    std::vector<double> data(v.data(), v.data() + v.size());
    return json(data);
}

VectorXd vec_from_json(const json& j) {
    VectorXd v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j.at(i).get<double>();
    return v;
}

} // namespace

const char* mode_name(PropagationMode m) {
    switch (m) {
        case PropagationMode::MeanOnly: return "mean";
        case PropagationMode::MeanVariance: return "meanvar";
        case PropagationMode::FullCovariance: return "fullcov";
    }
    return "meanvar";
}

PropagationMode mode_from_name(const std::string& name) {
    if (name == "mean") return PropagationMode::MeanOnly;
    if (name == "meanvar") return PropagationMode::MeanVariance;
    if (name == "fullcov") return PropagationMode::FullCovariance;
    throw ParseError("unknown propagation mode: " + name);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    json j;
    j["format"] = "gpn-checkpoint";
    j["version"] = 1;
    j["seed"] = ckpt.net.seed;
    j["mode"] = mode_name(ckpt.mode);
    json layers = json::array();
    for (const auto& l : ckpt.net.layers) {
        json jl;
        jl["w"] = mat_to_json(l.w);
        jl["raw_lambda"] = vec_to_json(l.raw_lambda);
        jl["raw_sigma"] = vec_to_json(l.raw_sigma);
        jl["sharing"] = l.sharing == Sharing::Layer ? "layer" : "none";
        jl["freeze_v"] = l.freeze_v;
        json obs = json::array();
        for (const auto& o : l.obs) {
            json jo;
            jo["v"] = vec_to_json(o.v);
            jo["u"] = vec_to_json(o.u);
            jo["raw_s"] = vec_to_json(o.raw_s);
            obs.push_back(std::move(jo));
        }
        jl["obs"] = std::move(obs);
        layers.push_back(std::move(jl));
    }
    j["layers"] = std::move(layers);
    if (ckpt.net.has_head()) j["out_weights"] = mat_to_json(ckpt.net.out_weights);
    if (ckpt.posterior) {
        json jp = json::array();
        for (const auto& lp : ckpt.posterior->layers) {
            json ju = json::array();
            for (const auto& up : lp) {
                json u;
                u["mu_u"] = vec_to_json(up.mu_u);
                u["chol_sigma_u"] = mat_to_json(up.chol_sigma_u);
                ju.push_back(std::move(u));
            }
            jp.push_back(std::move(ju));
        }
        j["posterior"] = std::move(jp);
        j["posterior_diagonal"] = ckpt.posterior->diagonal;
    }
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write checkpoint: " + path);
    out << j.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot read checkpoint: " + path);
    json j;
    in >> j;
    if (j.value("format", "") != std::string("gpn-checkpoint"))
        throw ParseError("not a checkpoint file: " + path);

    Checkpoint ckpt;
    ckpt.net.seed = j.at("seed").get<std::uint64_t>();
    ckpt.mode = mode_from_name(j.at("mode").get<std::string>());
    for (const auto& jl : j.at("layers")) {
        LayerParams l;
        l.w = mat_from_json(jl.at("w"));
        l.raw_lambda = vec_from_json(jl.at("raw_lambda"));
        l.raw_sigma = vec_from_json(jl.at("raw_sigma"));
        l.sharing = jl.at("sharing").get<std::string>() == "layer" ? Sharing::Layer
                                                                   : Sharing::None;
        l.freeze_v = jl.at("freeze_v").get<bool>();
        for (const auto& jo : jl.at("obs")) {
            UnitObservations o;
            o.v = vec_from_json(jo.at("v"));
            o.u = vec_from_json(jo.at("u"));
            o.raw_s = vec_from_json(jo.at("raw_s"));
            l.obs.push_back(std::move(o));
        }
        ckpt.net.layers.push_back(std::move(l));
    }
    if (j.contains("out_weights"))
        ckpt.net.out_weights = mat_from_json(j.at("out_weights"));
    if (j.contains("posterior")) {
        VariationalPosterior post;
        post.diagonal = j.value("posterior_diagonal", false);
        for (const auto& jl : j.at("posterior")) {
            std::vector<UnitPosterior> units;
            for (const auto& ju : jl) {
                UnitPosterior up;
                up.mu_u = vec_from_json(ju.at("mu_u"));
                up.chol_sigma_u = mat_from_json(ju.at("chol_sigma_u"));
                units.push_back(std::move(up));
            }
            post.layers.push_back(std::move(units));
        }
        ckpt.posterior = std::move(post);
    }
    return ckpt;
}

} // namespace gpn::network
