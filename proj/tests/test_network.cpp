#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "gpn/kernels.hpp"
#include "gpn/linalg.hpp"
#include "gpn/network.hpp"
#include "gpn/rng.hpp"
#include "gpn/verify.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using namespace gpn;
using network::LayerParams;
using network::MomentState;
using network::NetworkParams;
using network::PropagationMode;

namespace {

LayerParams make_layer(Rng& rng, int n_in, int n_units, int r_count,
                       double s_lo = 1e-3, double s_hi = 0.3) {
    LayerParams layer;
    layer.w.resize(n_in, n_units);
    for (int i = 0; i < n_in; ++i)
        for (int j = 0; j < n_units; ++j) layer.w(i, j) = rng.normal() * 0.6;
    layer.raw_lambda.resize(n_units);
    layer.raw_sigma.resize(n_units);
    for (int n = 0; n < n_units; ++n) {
        layer.raw_lambda[n] = network::softplus_inv(rng.uniform(0.7, 1.4));
        layer.raw_sigma[n] = network::softplus_inv(rng.uniform(0.05, 0.3));
    }
    for (int n = 0; n < n_units; ++n) {
        network::UnitObservations obs;
        obs.v.resize(r_count);
        for (int r = 0; r < r_count; ++r) obs.v[r] = rng.uniform(-2.0, 2.0);
        std::sort(obs.v.data(), obs.v.data() + obs.v.size());
        obs.u.resize(r_count);
        for (int r = 0; r < r_count; ++r) obs.u[r] = rng.normal();
        obs.raw_s.resize(r_count);
        for (int r = 0; r < r_count; ++r)
            obs.raw_s[r] = network::softplus_inv(rng.uniform(s_lo, s_hi));
        layer.obs.push_back(std::move(obs));
    }
    return layer;
}

MomentState deterministic_state(const MatrixXd& mean, PropagationMode mode) {
    MomentState s;
    s.mode = mode;
    s.mean = mean;
    if (mode != PropagationMode::MeanOnly)
        s.var = MatrixXd::Zero(mean.rows(), mean.cols());
    if (mode == PropagationMode::FullCovariance)
        s.cov.assign(mean.rows(), MatrixXd::Zero(mean.cols(), mean.cols()));
    return s;
}

} // namespace

TEST_CASE("propagate_activation with the identity leaves the state unchanged") {
    Rng rng(1);
    MomentState s;
    s.mode = PropagationMode::MeanVariance;
    s.mean = MatrixXd::Random(4, 3);
    s.var = MatrixXd::Random(4, 3).cwiseAbs();
    const MomentState out = network::propagate_activation(s, MatrixXd::Identity(3, 3));
    CHECK((out.mean - s.mean).cwiseAbs().maxCoeff() == 0.0);
    CHECK((out.var - s.var).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("propagate_activation sums independent variances") {
    MomentState s;
    s.mode = PropagationMode::MeanVariance;
    s.mean = MatrixXd::Zero(1, 2);
    s.var = MatrixXd::Ones(1, 2);
    MatrixXd w(2, 1);
    w << 1.0, 1.0;
    const MomentState out = network::propagate_activation(s, w);
    CHECK(out.var(0, 0) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("propagate_activation full covariance matches sampling") {
    Rng rng(42);
    const int n_in = 3, n_out = 2;
    MatrixXd g(n_in, n_in);
    for (int i = 0; i < n_in; ++i)
        for (int j = 0; j < n_in; ++j) g(i, j) = rng.normal();
    MatrixXd cov = g * g.transpose() / n_in;
    VectorXd mean(n_in);
    mean << 0.5, -0.2, 1.0;
    MatrixXd w(n_in, n_out);
    for (int i = 0; i < n_in; ++i)
        for (int j = 0; j < n_out; ++j) w(i, j) = rng.normal();

    MomentState s;
    s.mode = PropagationMode::FullCovariance;
    s.mean = mean.transpose();
    s.var = cov.diagonal().transpose();
    s.cov = {cov};
    const MomentState out = network::propagate_activation(s, w);

    // covariance of sampled x * w draws
    const auto fac = linalg::psd_cholesky(cov);
    const long n = 200000;
    MatrixXd draws(n, n_out);
    VectorXd z(n_in);
    for (long i = 0; i < n; ++i) {
        for (int k = 0; k < n_in; ++k) z[k] = rng.normal();
        draws.row(i) = (mean + fac.lower * z).transpose() * w;
    }
    const Eigen::RowVectorXd emp_mean = draws.colwise().mean();
    MatrixXd centered = draws.rowwise() - emp_mean;
    MatrixXd emp_cov = centered.transpose() * centered / double(n);
    // loose 3-sigma-style bound via the known sampling error scale
    for (int a = 0; a < n_out; ++a)
        for (int b = 0; b < n_out; ++b) {
            const double se = std::sqrt(
                (emp_cov(a, a) * emp_cov(b, b) + emp_cov(a, b) * emp_cov(a, b)) /
                double(n));
            CHECK(std::abs(out.cov[0](a, b) - emp_cov(a, b)) <= 4.0 * se);
        }
}

TEST_CASE("deterministic activations reduce the response to sparse prediction") {
    Rng rng(7);
    const int n_units = 3, r_count = 5;
    LayerParams layer = make_layer(rng, 2, n_units, r_count);
    MatrixXd a(4, n_units);
    for (int i = 0; i < 4; ++i)
        for (int n = 0; n < n_units; ++n) a(i, n) = rng.uniform(-1.5, 1.5);

    const MomentState out = network::propagate_response_ml(
        deterministic_state(a, PropagationMode::MeanVariance), layer);

    for (int n = 0; n < n_units; ++n) {
        const auto pred = gp::sparse_predict(a.col(n), layer.unit_obs(n).natural(),
                                             layer.lambda(n), 0.0);
        const double sig2 = layer.sigma(n) * layer.sigma(n);
        for (int i = 0; i < 4; ++i) {
            CHECK(std::abs(out.mean(i, n) - pred.mean[i]) <= 1e-10);
            CHECK(std::abs(out.var(i, n) - (pred.cov(i, i) + sig2)) <= 1e-10);
        }
    }
}

TEST_CASE("zero targets give zero response mean and the no-beta variance") {
    Rng rng(8);
    const int n_units = 2, r_count = 4;
    LayerParams layer = make_layer(rng, 2, n_units, r_count);
    for (auto& obs : layer.obs) obs.u.setZero();

    MomentState a;
    a.mode = PropagationMode::MeanVariance;
    a.mean = MatrixXd::Random(3, n_units);
    a.var = MatrixXd::Random(3, n_units).cwiseAbs();
    const MomentState out = network::propagate_response_ml(a, layer);
    CHECK(out.mean.cwiseAbs().maxCoeff() == 0.0);

    for (int n = 0; n < n_units; ++n) {
        const auto obs = layer.unit_obs(n).natural();
        MatrixXd k = kernels::kernel_matrix(obs.v, obs.v, layer.lambda(n));
        k.diagonal() += obs.s;
        const MatrixXd kappa = linalg::chol_solve(
            linalg::jittered_cholesky(linalg::symmetrize(k)).factor,
            MatrixXd::Identity(r_count, r_count));
        for (int i = 0; i < 3; ++i) {
            const MatrixXd om =
                kernels::omega(a.mean(i, n), a.var(i, n), obs.v, layer.lambda(n));
            const double expect = 1.0 - (kappa.array() * om.array()).sum() +
                                  layer.sigma(n) * layer.sigma(n);
            CHECK(out.var(i, n) == doctest::Approx(expect).epsilon(1e-10));
        }
    }
}

TEST_CASE("ml layer propagation matches Monte-Carlo moments") {
    Rng rng(4242);
    const int n_units = 3;
    LayerParams layer = make_layer(rng, 2, n_units, 5);
    VectorXd a_mean(n_units);
    a_mean << 0.4, -0.6, 0.9;
    MatrixXd g(n_units, n_units);
    for (int i = 0; i < n_units; ++i)
        for (int j = 0; j < n_units; ++j) g(i, j) = rng.normal();
    const MatrixXd a_cov = linalg::symmetrize(0.4 * g * g.transpose() / n_units);

    const auto reports =
        verify::mc_layer_moments(layer, a_mean, a_cov, 400000, 17);
    int failed = 0;
    for (const auto& r : reports) {
        INFO(r.quantity << ": analytic " << r.analytic << " mc " << r.mc_estimate
                        << " +/- " << r.mc_stderr);
        if (!r.pass) ++failed;
    }
    CHECK(failed == 0);
}

TEST_CASE("vb layer propagation matches Monte-Carlo moments") {
    Rng rng(100);
    const int n_units = 2, r_count = 4;
    LayerParams layer = make_layer(rng, 2, n_units, r_count);
    std::vector<network::UnitPosterior> post;
    for (int n = 0; n < n_units; ++n) {
        network::UnitPosterior up;
        up.mu_u.resize(r_count);
        for (int r = 0; r < r_count; ++r) up.mu_u[r] = rng.normal();
        MatrixXd c = MatrixXd::Zero(r_count, r_count);
        for (int i = 0; i < r_count; ++i) {
            for (int j = 0; j < i; ++j) c(i, j) = 0.15 * rng.normal();
            c(i, i) = rng.uniform(0.1, 0.5);
        }
        up.chol_sigma_u = c;
        post.push_back(std::move(up));
    }
    VectorXd a_mean(n_units);
    a_mean << 0.2, -0.5;
    MatrixXd g(n_units, n_units);
    for (int i = 0; i < n_units; ++i)
        for (int j = 0; j < n_units; ++j) g(i, j) = rng.normal();
    const MatrixXd a_cov = linalg::symmetrize(0.3 * g * g.transpose() / n_units);

    const auto reports =
        verify::mc_layer_moments(layer, a_mean, a_cov, 400000, 18, &post);
    int failed = 0;
    for (const auto& r : reports) {
        INFO(r.quantity << ": analytic " << r.analytic << " mc " << r.mc_estimate
                        << " +/- " << r.mc_stderr);
        if (!r.pass) ++failed;
    }
    CHECK(failed == 0);
}

TEST_CASE("variational prior recovery gives unit variance plus noise exactly") {
    Rng rng(55);
    NetworkParams net = network::init_network({3, 4, 2}, false,
                                              network::TargetInit::RandomNormal, 9);
    const network::VariationalPosterior post = network::prior_posterior(net);
    MatrixXd x(5, 3);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 3; ++j) x(i, j) = rng.uniform(0.0, 1.0);
    const MomentState out =
        network::forward(net, x, PropagationMode::MeanVariance, &post);
    CHECK(out.mean.cwiseAbs().maxCoeff() <= 1e-300);
    for (int l = 0; l < 2; ++l) {
        // every layer's output variance is 1 + sigma_n^2; check the final one
    }
    const auto& last = net.layers.back();
    for (int n = 0; n < last.units(); ++n) {
        const double expect = 1.0 + last.sigma(n) * last.sigma(n);
        for (int i = 0; i < 5; ++i)
            CHECK(std::abs(out.var(i, n) - expect) <= 1e-10);
    }
}

TEST_CASE("zero posterior covariance reduces vb to ml with S = 0") {
    Rng rng(66);
    const int n_units = 3, r_count = 4;
    // well-conditioned inducing set so both code paths agree to 1e-10
    LayerParams layer = make_layer(rng, 2, n_units, r_count);
    for (auto& obs : layer.obs) {
        obs.v = VectorXd::LinSpaced(r_count, -2.0, 2.0);
        obs.raw_s = VectorXd::Constant(r_count, network::softplus_inv(0.0));
    }
    for (int n = 0; n < n_units; ++n)
        layer.raw_lambda[n] = network::softplus_inv(0.6);

    std::vector<network::UnitPosterior> post;
    for (int n = 0; n < n_units; ++n) {
        network::UnitPosterior up;
        up.mu_u = layer.obs[n].u;
        up.chol_sigma_u = MatrixXd::Zero(r_count, r_count);
        post.push_back(std::move(up));
    }

    MomentState a;
    a.mode = PropagationMode::FullCovariance;
    a.mean = MatrixXd::Random(4, n_units);
    a.var = MatrixXd::Random(4, n_units).cwiseAbs();
    a.cov.clear();
    for (int i = 0; i < 4; ++i) {
        MatrixXd g(n_units, n_units);
        for (int r = 0; r < n_units; ++r)
            for (int c = 0; c < n_units; ++c) g(r, c) = rng.normal();
        MatrixXd cov = linalg::symmetrize(0.2 * g * g.transpose() / n_units);
        cov.diagonal() = a.var.row(i);
        a.cov.push_back(cov);
    }

    const MomentState vb = network::propagate_response_vb(a, layer, post);
    const MomentState ml = network::propagate_response_ml(a, layer);
    CHECK((vb.mean - ml.mean).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((vb.var - ml.var).cwiseAbs().maxCoeff() <= 1e-10);
    for (int i = 0; i < 4; ++i)
        CHECK((vb.cov[i] - ml.cov[i]).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("forward on a single layer equals response after activation") {
    Rng rng(77);
    NetworkParams net = network::init_network({3, 4}, false,
                                              network::TargetInit::RandomNormal, 3);
    MatrixXd x(6, 3);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 3; ++j) x(i, j) = rng.uniform(0.0, 1.0);
    const MomentState direct = network::propagate_response_ml(
        deterministic_state(x * net.layers[0].w, PropagationMode::MeanVariance),
        net.layers[0]);
    const MomentState full =
        network::forward(net, x, PropagationMode::MeanVariance);
    CHECK((direct.mean - full.mean).cwiseAbs().maxCoeff() == 0.0);
    CHECK((direct.var - full.var).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("zero weights make every sample produce identical moments") {
    NetworkParams net = network::init_network({3, 4, 2}, false,
                                              network::TargetInit::RandomNormal, 4);
    for (auto& layer : net.layers) layer.w.setZero();
    MatrixXd x = MatrixXd::Random(5, 3);
    const MomentState out = network::forward(net, x, PropagationMode::MeanVariance);
    for (int i = 1; i < 5; ++i) {
        CHECK((out.mean.row(i) - out.mean.row(0)).cwiseAbs().maxCoeff() == 0.0);
        CHECK((out.var.row(i) - out.var.row(0)).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("full covariance diagonal equals mean-variance propagation on two layers") {
    Rng rng(88);
    NetworkParams net = network::init_network({16, 5, 5}, false,
                                              network::TargetInit::RandomNormal, 5);
    MatrixXd x(7, 16);
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 16; ++j) x(i, j) = rng.uniform(0.0, 1.0);
    const MomentState mv = network::forward(net, x, PropagationMode::MeanVariance);
    const MomentState fc = network::forward(net, x, PropagationMode::FullCovariance);
    CHECK((mv.mean - fc.mean).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((mv.var - fc.var).cwiseAbs().maxCoeff() <= 1e-10);
    for (int i = 0; i < 7; ++i)
        for (int n = 0; n < 5; ++n)
            CHECK(std::abs(fc.cov[i](n, n) - fc.var(i, n)) <= 1e-12);
}

TEST_CASE("scaling weights and lengthscales together leaves outputs unchanged") {
    Rng rng(91);
    NetworkParams net = network::init_network({4, 3, 2}, false,
                                              network::TargetInit::RandomNormal, 6);
    MatrixXd x(5, 4);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) x(i, j) = rng.uniform(0.0, 1.0);
    const MomentState base = network::forward(net, x, PropagationMode::MeanVariance);

    const double c = 2.7;
    NetworkParams scaled = net;
    scaled.layers[0].w *= c;
    for (int n = 0; n < scaled.layers[0].units(); ++n)
        scaled.layers[0].raw_lambda[n] =
            network::softplus_inv(c * net.layers[0].lambda(n));
    const MomentState out = network::forward(scaled, x, PropagationMode::MeanVariance);
    CHECK((base.mean - out.mean).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((base.var - out.var).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("init_network follows the documented recipe") {
    NetworkParams id_net = network::init_network({2, 3}, false,
                                                 network::TargetInit::Identity, 0,
                                                 3, -1.0, 1.0);
    VectorXd expect(3);
    expect << -1.0, 0.0, 1.0;
    for (const auto& obs : id_net.layers[0].obs) {
        CHECK((obs.v - expect).cwiseAbs().maxCoeff() == 0.0);
        CHECK((obs.u - expect).cwiseAbs().maxCoeff() == 0.0);
        CHECK(network::softplus(obs.raw_s[0]) ==
              doctest::Approx(std::sqrt(0.1)).epsilon(1e-12));
    }
    CHECK(id_net.layers[0].lambda(0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(id_net.layers[0].sigma(0) == doctest::Approx(0.1).epsilon(1e-12));

    const NetworkParams a = network::init_network(
        {5, 4, 3}, false, network::TargetInit::RandomNormal, 123);
    const NetworkParams b = network::init_network(
        {5, 4, 3}, false, network::TargetInit::RandomNormal, 123);
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        CHECK((a.layers[l].w - b.layers[l].w).cwiseAbs().maxCoeff() == 0.0);
        for (std::size_t o = 0; o < a.layers[l].obs.size(); ++o)
            CHECK((a.layers[l].obs[o].u - b.layers[l].obs[o].u).cwiseAbs().maxCoeff() ==
                  0.0);
    }

    // weight bound for layer 1 of 16x30x15x26 uses sizes 16 and 15
    const NetworkParams big = network::init_network(
        {16, 30, 15, 26}, true, network::TargetInit::RandomNormal, 7);
    const double bound = std::sqrt(6.0) / std::sqrt(16.0 + 15.0);
    CHECK(big.layers[0].w.cwiseAbs().maxCoeff() <= bound);
    CHECK(big.layers[0].w.cwiseAbs().maxCoeff() >= 0.8 * bound);
    CHECK(big.layers.size() == 2);
    CHECK(big.out_weights.rows() == 15);
    CHECK(big.out_weights.cols() == 26);

    CHECK_THROWS_AS(network::init_network({4}, false,
                                          network::TargetInit::RandomNormal, 0),
                    BadShape);
    CHECK_THROWS_AS(network::init_network({4, 3}, true,
                                          network::TargetInit::RandomNormal, 0),
                    BadShape);
}

TEST_CASE("layer-shared observations use one record for all units") {
    NetworkParams net = network::init_network({3, 4, 2}, false,
                                              network::TargetInit::RandomNormal, 11,
                                              6, -2.0, 2.0,
                                              network::Sharing::Layer);
    CHECK(net.layers[0].obs.size() == 1);
    CHECK(&net.layers[0].unit_obs(0) == &net.layers[0].unit_obs(3));
    MatrixXd x = MatrixXd::Random(3, 3).cwiseAbs();
    CHECK_NOTHROW(network::forward(net, x, PropagationMode::MeanVariance));
}

TEST_CASE("checkpoint round trip is lossless") {
    NetworkParams net = network::init_network({4, 3, 2, 3}, true,
                                              network::TargetInit::RandomNormal, 21);
    network::VariationalPosterior post = network::prior_posterior(net);
    const std::string path =
        (std::filesystem::temp_directory_path() / "gpn_ckpt_test.json").string();
    network::save_checkpoint(path, {net, PropagationMode::FullCovariance, post});
    const network::Checkpoint loaded = network::load_checkpoint(path);

    CHECK(loaded.mode == PropagationMode::FullCovariance);
    CHECK(loaded.net.seed == net.seed);
    REQUIRE(loaded.net.layers.size() == net.layers.size());
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        CHECK((loaded.net.layers[l].w - net.layers[l].w).cwiseAbs().maxCoeff() == 0.0);
        CHECK((loaded.net.layers[l].raw_lambda - net.layers[l].raw_lambda)
                  .cwiseAbs()
                  .maxCoeff() == 0.0);
        for (std::size_t o = 0; o < net.layers[l].obs.size(); ++o) {
            CHECK((loaded.net.layers[l].obs[o].v - net.layers[l].obs[o].v)
                      .cwiseAbs()
                      .maxCoeff() == 0.0);
            CHECK((loaded.net.layers[l].obs[o].u - net.layers[l].obs[o].u)
                      .cwiseAbs()
                      .maxCoeff() == 0.0);
            CHECK((loaded.net.layers[l].obs[o].raw_s - net.layers[l].obs[o].raw_s)
                      .cwiseAbs()
                      .maxCoeff() == 0.0);
        }
    }
    CHECK((loaded.net.out_weights - net.out_weights).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(loaded.posterior.has_value());
    for (std::size_t l = 0; l < post.layers.size(); ++l)
        for (std::size_t u = 0; u < post.layers[l].size(); ++u)
            CHECK((loaded.posterior->layers[l][u].chol_sigma_u -
                   post.layers[l][u].chol_sigma_u)
                      .cwiseAbs()
                      .maxCoeff() == 0.0);
    std::filesystem::remove(path);
}
