#ifndef GPN_VERIFY_HPP
#define GPN_VERIFY_HPP

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gpn/data.hpp"
#include "gpn/gp.hpp"
#include "gpn/network.hpp"
#include "gpn/training.hpp"

namespace gpn::verify {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Deliberate formula corruptions used as negative controls; they must make
/// the Monte-Carlo comparisons fail.
enum class NegativeControl { None, OmegaSign, LambdaSign };

struct McReport {
    std::string quantity;
    double analytic = 0.0;
    double mc_estimate = 0.0;
    double mc_stderr = 0.0;
    long n_draws = 0;
    bool pass = false; // |analytic - mc_estimate| <= 3 * mc_stderr
};

// ---- kernel expectation oracles -------------------------------------------------

struct SuiteResult {
    int cases = 0;
    int passed = 0;
    std::vector<McReport> reports;
};

/// quantity is one of "psi", "omega", "lambda". Each case draws random
/// parameters and compares one seeded-random entry of the analytic
/// expectation against a Monte-Carlo estimate.
SuiteResult kernel_mc_suite(const std::string& quantity, int cases, long draws,
                            std::uint64_t seed,
                            NegativeControl corrupt = NegativeControl::None);

// ---- layer propagation oracle -----------------------------------------------------

/// Empirical layer-output moments from sampling activations (and, in the
/// variational case, inducing targets) against the analytic propagation.
/// Returns one report per output mean, variance and pairwise covariance.
std::vector<McReport> mc_layer_moments(
    const network::LayerParams& layer, const VectorXd& a_mean,
    const MatrixXd& a_cov, long n_draws, std::uint64_t seed,
    const std::vector<network::UnitPosterior>* vb_post = nullptr,
    NegativeControl corrupt = NegativeControl::None);

/// Random single-layer configurations; each case checks `checks_per_case`
/// seeded-random entries of the report set so the 3-sigma criterion stays
/// statistically meaningful.
SuiteResult layer_mc_suite(bool variational, int cases, long draws,
                           std::uint64_t seed, int checks_per_case = 4);

// ---- CLT experiment ----------------------------------------------------------------

/// Kolmogorov-Smirnov distance between the empirical third-layer activation
/// distribution and its moment-matched normal, per layer width.
std::map<int, double> clt_experiment(const std::vector<int>& widths,
                                     std::uint64_t seed, int n_draws = 1000);

struct CltResult {
    std::vector<int> widths;
    std::vector<std::map<int, double>> trials;
    int wins(int small_width, int large_width) const;
};

CltResult clt_suite(const std::vector<int>& widths, int trials, int n_draws,
                    std::uint64_t seed);

// ---- activation fitting --------------------------------------------------------------

struct FitRow {
    int r_count = 0;
    std::string function;
    double max_abs = 0.0;
    double rms = 0.0;
};

std::vector<FitRow> activation_fit_experiment(
    const std::vector<int>& r_counts,
    const std::vector<gp::ActivationTarget>& functions, double noise = 1e-4,
    int grid_points = 101);

// ---- unscented transform -----------------------------------------------------------

struct UnscentedResult {
    int exact_cases = 0;
    double worst_mean_err = 0.0;
    double worst_cov_err = 0.0;
    bool exact_pass = false;
    SuiteResult mc;          // UT loss vs Monte-Carlo cross-entropy
    int closer_than_zero_cov = 0;
};

UnscentedResult unscented_suite(int exact_cases, int mc_cases, long draws,
                                std::uint64_t seed);

// ---- gradient suite -----------------------------------------------------------------

struct GradientCheckRow {
    std::string objective;
    std::string mode;
    double worst_rel = 0.0;
    int checked = 0;
    bool pass = false;
};

std::vector<GradientCheckRow> gradient_suite(double h, double tol,
                                             std::uint64_t seed);

// ---- benchmarks ---------------------------------------------------------------------

struct BenchVariant {
    std::string name = "mean_variance";
    network::PropagationMode mode = network::PropagationMode::MeanVariance;
    network::Sharing sharing = network::Sharing::None;
    network::TargetInit init = network::TargetInit::RandomNormal;
    bool freeze_obs = false;
};

BenchVariant variant_from_name(const std::string& name);

std::vector<int> parse_arch(const std::string& arch);

/// Load one of the named benchmark datasets from data_dir, with its
/// conventional test portion marked. Throws DatasetMissing when files are
/// absent.
data::Dataset load_benchmark_dataset(const std::string& name,
                                     const std::string& data_dir);

struct BenchRow {
    std::string dataset, variant;
    std::uint64_t seed = 0;
    double train_error = 0.0, val_error = 0.0, test_error = 0.0;
    long iterations = 0;
    double ms_per_iteration = 0.0;
    double est_peak_mb = 0.0;
};

struct BenchResult {
    std::vector<BenchRow> rows;
    double mean_test_error = 0.0;
    double stderr_test_error = 0.0;
};

BenchResult benchmark_run(const std::string& dataset_name,
                          const std::string& arch, const BenchVariant& variant,
                          int seeds, const std::string& data_dir,
                          training::TrainConfig base_cfg,
                          const std::string& out_dir = "");

/// Median wall-clock per training iteration for each propagation mode on a
/// synthetic task with identical 50-unit layers. Only the ordering is
/// meaningful.
std::map<std::string, double> runtime_ordering(int width = 50, int batch = 32,
                                               int iters = 5,
                                               std::uint64_t seed = 0);

/// Per-unit activation-function CSV exports (grid, predictive mean/std,
/// inducing points, targets).
void export_activations(const network::NetworkParams& net,
                        const std::string& out_dir, int grid_points = 101,
                        double lo = -2.0, double hi = 2.0);

void write_bench_csv(const std::string& path, const BenchResult& result);

} // namespace gpn::verify

#endif
