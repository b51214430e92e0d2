#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "gpn/data.hpp"
#include "gpn/network.hpp"
#include "gpn/objectives.hpp"
#include "gpn/rng.hpp"
#include "gpn/training.hpp"
#include "gpn/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gpn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFail = 1;
constexpr int kExitUsage = 2;
constexpr int kExitMissing = 3;

struct RunConfig {
    std::string dataset = "toy-regression";
    std::string data_dir = "data";
    std::string arch;
    std::string mode = "meanvar";
    std::string objective = "ml_classification";
    std::string sharing = "none";
    std::string target_init = "random";
    std::string out = "out";
    std::uint64_t seed = 0;
    double lr0 = 1e-3;
    int batch = 200;
    long max_iters = 200000;
    int patience = 10;
    int r_count = 14;
    bool no_penalty = false;
    double val_fraction = 0.10;
};

void apply_config_file(const std::string& path, RunConfig& cfg) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config file: " + path);
    json j;
    in >> j;
    if (j.contains("dataset")) cfg.dataset = j["dataset"].get<std::string>();
    if (j.contains("data_dir")) cfg.data_dir = j["data_dir"].get<std::string>();
    if (j.contains("arch")) cfg.arch = j["arch"].get<std::string>();
    if (j.contains("mode")) cfg.mode = j["mode"].get<std::string>();
    if (j.contains("objective")) cfg.objective = j["objective"].get<std::string>();
    if (j.contains("sharing")) cfg.sharing = j["sharing"].get<std::string>();
    if (j.contains("target_init")) cfg.target_init = j["target_init"].get<std::string>();
    if (j.contains("out")) cfg.out = j["out"].get<std::string>();
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("lr0")) cfg.lr0 = j["lr0"].get<double>();
    if (j.contains("batch")) cfg.batch = j["batch"].get<int>();
    if (j.contains("max_iters")) cfg.max_iters = j["max_iters"].get<long>();
    if (j.contains("patience")) cfg.patience = j["patience"].get<int>();
    if (j.contains("r_count")) cfg.r_count = j["r_count"].get<int>();
    if (j.contains("no_penalty")) cfg.no_penalty = j["no_penalty"].get<bool>();
    if (j.contains("val_fraction")) cfg.val_fraction = j["val_fraction"].get<double>();
}

training::ObjectiveKind objective_from_name(const std::string& name) {
    if (name == "ml_regression") return training::ObjectiveKind::MlRegression;
    if (name == "ml_classification") return training::ObjectiveKind::MlClassification;
    if (name == "vb_regression") return training::ObjectiveKind::VbRegression;
    if (name == "vb_classification") return training::ObjectiveKind::VbClassification;
    throw ParseError("unknown objective: " + name);
}

network::TargetInit init_from_name(const std::string& name) {
    if (name == "random") return network::TargetInit::RandomNormal;
    if (name == "identity") return network::TargetInit::Identity;
    if (name == "tanh") return network::TargetInit::Tanh;
    throw ParseError("unknown target init: " + name);
}

network::Sharing sharing_from_name(const std::string& name) {
    if (name == "none") return network::Sharing::None;
    if (name == "layer") return network::Sharing::Layer;
    throw ParseError("unknown sharing: " + name);
}

data::Dataset toy_regression(std::uint64_t seed, int n = 256) {
    Rng rng(derive_seed(seed, "toy-regression"));
    Eigen::MatrixXd x(n, 1), t(n, 1);
    for (int i = 0; i < n; ++i) {
        x(i, 0) = rng.uniform(-1.0, 1.0);
        t(i, 0) = std::sin(3.0 * x(i, 0));
    }
    return data::from_matrices(std::move(x), std::move(t), false);
}

data::Dataset resolve_dataset(const RunConfig& cfg) {
    if (cfg.dataset == "toy-regression") return toy_regression(cfg.seed);
    return verify::load_benchmark_dataset(cfg.dataset, cfg.data_dir);
}

json config_to_json(const RunConfig& cfg) {
    json j;
    j["dataset"] = cfg.dataset;
    j["data_dir"] = cfg.data_dir;
    j["arch"] = cfg.arch;
    j["mode"] = cfg.mode;
    j["objective"] = cfg.objective;
    j["sharing"] = cfg.sharing;
    j["target_init"] = cfg.target_init;
    j["out"] = cfg.out;
    j["seed"] = cfg.seed;
    j["lr0"] = cfg.lr0;
    j["batch"] = cfg.batch;
    j["max_iters"] = cfg.max_iters;
    j["patience"] = cfg.patience;
    j["r_count"] = cfg.r_count;
    j["no_penalty"] = cfg.no_penalty;
    j["val_fraction"] = cfg.val_fraction;
    return j;
}

int cmd_train(const RunConfig& cfg) {
    data::Dataset ds = resolve_dataset(cfg);
    ds = data::split(ds, cfg.val_fraction, cfg.seed);

    const bool classification = ds.onehot_targets;
    std::vector<int> shape;
    if (!cfg.arch.empty()) {
        shape = verify::parse_arch(cfg.arch);
    } else if (cfg.dataset == "toy-regression") {
        shape = {1, 10, 1};
    } else {
        throw ParseError("--arch is required for dataset " + cfg.dataset);
    }
    if (shape.front() != ds.features())
        throw SchemaMismatch("architecture input width does not match dataset");

    network::NetworkParams net = network::init_network(
        shape, classification, init_from_name(cfg.target_init), cfg.seed,
        cfg.r_count, -2.0, 2.0, sharing_from_name(cfg.sharing));

    training::TrainConfig tc;
    tc.seed = cfg.seed;
    tc.lr0 = cfg.lr0;
    tc.batch_size = cfg.batch;
    tc.max_iters = cfg.max_iters;
    tc.patience = cfg.patience;
    tc.mode = network::mode_from_name(cfg.mode);
    tc.objective = objective_from_name(cfg.objective);
    tc.penalty = !cfg.no_penalty;
    if (classification && !training::is_classification(tc.objective))
        throw SchemaMismatch("dataset is classification but objective is regression");
    if (!classification && training::is_classification(tc.objective))
        throw SchemaMismatch("dataset is regression but objective is classification");

    std::optional<network::VariationalPosterior> post;
    if (training::is_vb(tc.objective)) post = network::prior_posterior(net);

    const Eigen::MatrixXd train_x = ds.split_x(data::Split::Train);
    const Eigen::MatrixXd train_t = ds.split_t(data::Split::Train);
    const Eigen::MatrixXd val_x = ds.split_x(data::Split::Val);
    const Eigen::MatrixXd val_t = ds.split_t(data::Split::Val);

    training::TrainResult result =
        training::train(net, post, train_x, train_t, val_x, val_t, tc);

    fs::create_directories(cfg.out);
    network::save_checkpoint((fs::path(cfg.out) / "checkpoint.json").string(),
                             network::Checkpoint{net, tc.mode, post});
    training::write_history_csv((fs::path(cfg.out) / "history.csv").string(),
                                result.history);
    json manifest;
    manifest["config"] = config_to_json(cfg);
    manifest["build_id"] = GPN_BUILD_ID;
    manifest["iterations"] = result.iterations;
    manifest["best_val_loss"] = result.best_val_loss;
    manifest["best_iteration"] = result.best_iteration;
    manifest["schedule_terminated"] = result.schedule_terminated;
    manifest["aborted_non_finite"] = result.aborted_non_finite;
    std::ofstream mout((fs::path(cfg.out) / "manifest.json").string());
    mout << manifest.dump(2) << "\n";

    std::printf("trained %ld iterations, best val loss %.6g (iteration %ld)%s\n",
                result.iterations, result.best_val_loss, result.best_iteration,
                result.aborted_non_finite ? " [aborted: non-finite gradient]" : "");
    return result.aborted_non_finite ? kExitUsage : kExitOk;
}

int cmd_eval(const std::string& checkpoint, const RunConfig& cfg) {
    network::Checkpoint ckpt = network::load_checkpoint(checkpoint);
    data::Dataset ds = resolve_dataset(cfg);
    ds = data::split(ds, cfg.val_fraction, cfg.seed);
    const network::VariationalPosterior* post =
        ckpt.posterior ? &*ckpt.posterior : nullptr;

    if (ds.onehot_targets) {
        const double kappa = objectives::kappa_u_default(ckpt.net.output_width());
        for (auto [name, split] : {std::pair{"train", data::Split::Train},
                                   {"val", data::Split::Val},
                                   {"test", data::Split::Test}}) {
            const Eigen::MatrixXd x = ds.split_x(split);
            if (x.rows() == 0) continue;
            const double err = training::classification_error(
                ckpt.net, post, ckpt.mode, x, ds.split_t(split), kappa);
            std::printf("%s error: %.6f (%ld samples)\n", name, err, long(x.rows()));
        }
    } else {
        for (auto [name, split] : {std::pair{"train", data::Split::Train},
                                   {"val", data::Split::Val},
                                   {"test", data::Split::Test}}) {
            const Eigen::MatrixXd x = ds.split_x(split);
            if (x.rows() == 0) continue;
            network::MomentState out = network::forward(ckpt.net, x, ckpt.mode, post);
            const double rmse = std::sqrt(
                (out.mean - ds.split_t(split)).squaredNorm() / double(x.rows()));
            std::printf("%s rmse: %.6f (%ld samples)\n", name, rmse, long(x.rows()));
        }
    }
    return kExitOk;
}

struct VerifyOptions {
    std::string only;
    std::uint64_t seed = 0;
    int kernel_cases = 100;
    long kernel_draws = 1000000;
    int layer_cases = 20;
    long layer_draws = 1000000;
    int clt_trials = 20;
    bool inject_wrong_lambda = false;
    bool inject_wrong_omega = false;
};

bool selected(const VerifyOptions& opt, const std::string& name) {
    return opt.only.empty() || opt.only == name;
}

int cmd_verify(const VerifyOptions& opt) {
    bool all_pass = true;
    auto report = [&all_pass](const std::string& name, bool pass,
                              const std::string& detail) {
        std::printf("[%s] %s%s%s\n", pass ? "PASS" : "FAIL", name.c_str(),
                    detail.empty() ? "" : ": ", detail.c_str());
        all_pass = all_pass && pass;
    };

    const auto corrupt = opt.inject_wrong_lambda ? verify::NegativeControl::LambdaSign
                         : opt.inject_wrong_omega ? verify::NegativeControl::OmegaSign
                                                  : verify::NegativeControl::None;

    if (selected(opt, "kernels")) {
        for (const char* q : {"psi", "omega", "lambda"}) {
            const auto res = verify::kernel_mc_suite(q, opt.kernel_cases,
                                                     opt.kernel_draws, opt.seed,
                                                     corrupt);
            std::ostringstream detail;
            detail << res.passed << "/" << res.cases << " cases within 3 stderr";
            report(std::string("kernel-mc-") + q, res.passed >= res.cases - 1,
                   detail.str());
        }
    }
    if (selected(opt, "layers")) {
        for (bool vb : {false, true}) {
            const auto res = verify::layer_mc_suite(vb, opt.layer_cases,
                                                    opt.layer_draws, opt.seed);
            std::ostringstream detail;
            detail << res.passed << "/" << res.cases << " configs within 3 stderr";
            report(vb ? "layer-mc-vb" : "layer-mc-ml", res.passed >= res.cases - 1,
                   detail.str());
        }
    }
    if (selected(opt, "gradients")) {
        const auto rows = verify::gradient_suite(1e-5, 1e-4, opt.seed);
        for (const auto& row : rows) {
            std::ostringstream detail;
            detail << "worst rel err " << row.worst_rel << " over " << row.checked
                   << " components";
            report("gradient-" + row.objective + "-" + row.mode, row.pass,
                   detail.str());
        }
    }
    if (selected(opt, "clt")) {
        const auto res = verify::clt_suite({1, 3, 10}, opt.clt_trials, 1000, opt.seed);
        const int wins = res.wins(3, 10);
        std::ostringstream detail;
        detail << "KS(10) < KS(3) in " << wins << "/" << opt.clt_trials << " trials";
        report("clt-width-trend", wins * 4 >= opt.clt_trials * 3, detail.str());
    }
    if (selected(opt, "fit")) {
        const auto rows = verify::activation_fit_experiment(
            {5, 8}, {gp::ActivationTarget::Tanh, gp::ActivationTarget::Relu,
                     gp::ActivationTarget::Identity});
        double tanh8 = 1.0, relu5 = 0.0, relu8 = 1.0, id8 = 1.0;
        for (const auto& row : rows) {
            if (row.function == "tanh" && row.r_count == 8) tanh8 = row.max_abs;
            if (row.function == "relu" && row.r_count == 5) relu5 = row.max_abs;
            if (row.function == "relu" && row.r_count == 8) relu8 = row.max_abs;
            if (row.function == "identity" && row.r_count == 8) id8 = row.max_abs;
        }
        std::ostringstream detail;
        detail << "tanh8 " << tanh8 << ", identity8 " << id8 << ", relu5 " << relu5
               << " > relu8 " << relu8;
        report("activation-fit", tanh8 <= 0.05 && id8 <= 1e-3 && relu5 > relu8,
               detail.str());
    }
    if (selected(opt, "unscented")) {
        const auto res = verify::unscented_suite(100, 20, 1000000, opt.seed);
        std::ostringstream detail;
        detail << "exact worst mean/cov err " << res.worst_mean_err << "/"
               << res.worst_cov_err << "; MC " << res.mc.passed << "/"
               << res.mc.cases << ", closer than zero-cov " << res.closer_than_zero_cov
               << "/" << res.mc.cases;
        report("unscented", res.exact_pass && res.mc.passed >= res.mc.cases - 1 &&
                                res.closer_than_zero_cov >= res.mc.cases - 1,
               detail.str());
    }
    if (selected(opt, "runtime")) {
        const auto times = verify::runtime_ordering();
        std::ostringstream detail;
        detail << "mean " << times.at("mean") << " ms <= meanvar "
               << times.at("meanvar") << " ms <= fullcov " << times.at("fullcov")
               << " ms";
        report("runtime-ordering",
               times.at("mean") <= times.at("meanvar") &&
                   times.at("meanvar") <= times.at("fullcov"),
               detail.str());
    }
    return all_pass ? kExitOk : kExitVerifyFail;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gaussian process neuron networks"};
    app.require_subcommand(1);

    RunConfig cfg;
    std::string config_path;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file");
        cmd->add_option("--dataset", cfg.dataset,
                        "toy-regression | letter | adult | connect4 | mnist");
        cmd->add_option("--data-dir", cfg.data_dir, "directory with dataset files");
        cmd->add_option("--arch", cfg.arch, "layer sizes, e.g. 16x30x15x26");
        cmd->add_option("--mode", cfg.mode, "mean | meanvar | fullcov");
        cmd->add_option("--objective", cfg.objective,
                        "ml_regression | ml_classification | vb_regression | "
                        "vb_classification");
        cmd->add_option("--sharing", cfg.sharing, "none | layer");
        cmd->add_option("--target-init", cfg.target_init, "random | identity | tanh");
        cmd->add_option("--out", cfg.out, "output directory");
        cmd->add_option("--seed", cfg.seed, "top-level seed");
        cmd->add_option("--lr0", cfg.lr0, "initial learning rate");
        cmd->add_option("--batch", cfg.batch, "mini-batch size");
        cmd->add_option("--max-iters", cfg.max_iters, "iteration cap");
        cmd->add_option("--patience", cfg.patience, "plateau patience");
        cmd->add_option("--r-count", cfg.r_count, "virtual observations per unit");
        cmd->add_flag("--no-penalty", cfg.no_penalty, "disable the S penalty");
        cmd->add_option("--val-fraction", cfg.val_fraction, "validation fraction");
    };

    auto* train_cmd = app.add_subcommand("train", "train a network");
    add_common(train_cmd);

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string checkpoint_path;
    eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")
        ->required();
    add_common(eval_cmd);

    auto* verify_cmd = app.add_subcommand("verify", "run the verification suites");
    VerifyOptions vopt;
    verify_cmd->add_option("--only", vopt.only,
                           "kernels | layers | gradients | clt | fit | unscented | runtime");
    verify_cmd->add_option("--seed", vopt.seed, "suite seed");
    verify_cmd->add_option("--kernel-cases", vopt.kernel_cases, "kernel MC cases");
    verify_cmd->add_option("--kernel-draws", vopt.kernel_draws, "kernel MC draws");
    verify_cmd->add_option("--layer-cases", vopt.layer_cases, "layer MC cases");
    verify_cmd->add_option("--layer-draws", vopt.layer_draws, "layer MC draws");
    verify_cmd->add_option("--clt-trials", vopt.clt_trials, "CLT seeded trials");
    verify_cmd->add_flag("--inject-wrong-lambda-sign", vopt.inject_wrong_lambda,
                         "negative control: corrupt the Lambda exponent sign");
    verify_cmd->add_flag("--inject-wrong-omega-sign", vopt.inject_wrong_omega,
                         "negative control: corrupt the Omega exponent sign");

    auto* bench_cmd = app.add_subcommand("bench", "benchmark runs");
    std::string variant_name = "mean_variance";
    int bench_seeds = 5;
    bool export_acts = false;
    bench_cmd->add_option("--variant", variant_name,
                          "mean_only | mean_variance | full_covariance | fixed_tanh");
    bench_cmd->add_option("--seeds", bench_seeds, "number of seeded repetitions");
    bench_cmd->add_flag("--export-activations", export_acts,
                        "write per-unit activation CSVs");
    add_common(bench_cmd);

    auto* clt_cmd = app.add_subcommand("clt", "central-limit experiment");
    std::string widths_str = "1,3,10";
    int clt_trials = 20, clt_draws = 1000;
    std::string clt_out;
    std::uint64_t clt_seed = 0;
    clt_cmd->add_option("--widths", widths_str, "comma-separated layer widths");
    clt_cmd->add_option("--trials", clt_trials, "seeded trials");
    clt_cmd->add_option("--draws", clt_draws, "draws per trial");
    clt_cmd->add_option("--seed", clt_seed, "seed");
    clt_cmd->add_option("--out", clt_out, "CSV output path");

    auto* fit_cmd = app.add_subcommand("fit-activation", "activation fitting table");
    std::string r_str = "5,8", fn_str = "tanh,relu,identity", fit_out;
    fit_cmd->add_option("--r", r_str, "comma-separated observation counts");
    fit_cmd->add_option("--functions", fn_str, "tanh | relu | identity list");
    fit_cmd->add_option("--out", fit_out, "CSV output path");

    auto* export_cmd =
        app.add_subcommand("export-activations", "per-unit activation CSVs");
    std::string export_ckpt, export_dir = "activations";
    export_cmd->add_option("--checkpoint", export_ckpt, "checkpoint file")->required();
    export_cmd->add_option("--out", export_dir, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        // config file first, then explicit flags override it
        if (!config_path.empty()) {
            RunConfig file_cfg;
            apply_config_file(config_path, file_cfg);
            RunConfig flag_cfg = cfg;
            CLI::App* active = app.get_subcommands().front();
            auto overridden = [&](const std::string& flag) {
                const CLI::Option* o = active->get_option_no_throw(flag);
                return o != nullptr && o->count() > 0;
            };
            cfg = file_cfg;
            if (overridden("--dataset")) cfg.dataset = flag_cfg.dataset;
            if (overridden("--data-dir")) cfg.data_dir = flag_cfg.data_dir;
            if (overridden("--arch")) cfg.arch = flag_cfg.arch;
            if (overridden("--mode")) cfg.mode = flag_cfg.mode;
            if (overridden("--objective")) cfg.objective = flag_cfg.objective;
            if (overridden("--sharing")) cfg.sharing = flag_cfg.sharing;
            if (overridden("--target-init")) cfg.target_init = flag_cfg.target_init;
            if (overridden("--out")) cfg.out = flag_cfg.out;
            if (overridden("--seed")) cfg.seed = flag_cfg.seed;
            if (overridden("--lr0")) cfg.lr0 = flag_cfg.lr0;
            if (overridden("--batch")) cfg.batch = flag_cfg.batch;
            if (overridden("--max-iters")) cfg.max_iters = flag_cfg.max_iters;
            if (overridden("--patience")) cfg.patience = flag_cfg.patience;
            if (overridden("--r-count")) cfg.r_count = flag_cfg.r_count;
            if (overridden("--no-penalty")) cfg.no_penalty = flag_cfg.no_penalty;
            if (overridden("--val-fraction")) cfg.val_fraction = flag_cfg.val_fraction;
        }

        if (train_cmd->parsed()) return cmd_train(cfg);
        if (eval_cmd->parsed()) return cmd_eval(checkpoint_path, cfg);
        if (verify_cmd->parsed()) return cmd_verify(vopt);
        if (bench_cmd->parsed()) {
            training::TrainConfig tc;
            tc.seed = cfg.seed;
            tc.lr0 = cfg.lr0;
            tc.batch_size = cfg.batch;
            tc.max_iters = cfg.max_iters;
            tc.patience = cfg.patience;
            tc.penalty = !cfg.no_penalty;
            const auto variant = verify::variant_from_name(variant_name);
            const auto result = verify::benchmark_run(
                cfg.dataset, cfg.arch, variant, bench_seeds, cfg.data_dir, tc, cfg.out);
            fs::create_directories(cfg.out);
            verify::write_bench_csv(
                (fs::path(cfg.out) / (cfg.dataset + "_" + variant.name + ".csv")).string(),
                result);
            std::printf("%s %s: test error %.4f +/- %.4f over %d seeds\n",
                        cfg.dataset.c_str(), variant.name.c_str(),
                        result.mean_test_error, result.stderr_test_error, bench_seeds);
            if (export_acts && !result.rows.empty()) {
                const std::string tag = cfg.dataset + "_" + variant.name + "_s" +
                                        std::to_string(result.rows.back().seed);
                const auto ckpt = network::load_checkpoint(
                    (fs::path(cfg.out) / (tag + "_checkpoint.json")).string());
                verify::export_activations(ckpt.net,
                                           (fs::path(cfg.out) / "activations").string());
            }
            return kExitOk;
        }
        if (clt_cmd->parsed()) {
            std::vector<int> widths;
            std::stringstream ss(widths_str);
            std::string tok;
            while (std::getline(ss, tok, ',')) widths.push_back(std::stoi(tok));
            const auto res = verify::clt_suite(widths, clt_trials, clt_draws, clt_seed);
            if (!clt_out.empty()) {
                std::ofstream out(clt_out);
                out << "trial";
                for (int w : widths) out << ",ks_width_" << w;
                out << "\n";
                for (std::size_t t = 0; t < res.trials.size(); ++t) {
                    out << t;
                    for (int w : widths) out << "," << res.trials[t].at(w);
                    out << "\n";
                }
            }
            for (int w : widths) {
                double total = 0.0;
                for (const auto& trial : res.trials) total += trial.at(w);
                std::printf("width %d: mean KS %.4f over %d trials\n", w,
                            total / double(res.trials.size()), clt_trials);
            }
            return kExitOk;
        }
        if (fit_cmd->parsed()) {
            std::vector<int> rs;
            {
                std::stringstream ss(r_str);
                std::string tok;
                while (std::getline(ss, tok, ',')) rs.push_back(std::stoi(tok));
            }
            std::vector<gp::ActivationTarget> fns;
            {
                std::stringstream ss(fn_str);
                std::string tok;
                while (std::getline(ss, tok, ',')) {
                    if (tok == "tanh") fns.push_back(gp::ActivationTarget::Tanh);
                    else if (tok == "relu") fns.push_back(gp::ActivationTarget::Relu);
                    else if (tok == "identity") fns.push_back(gp::ActivationTarget::Identity);
                    else throw ParseError("unknown function: " + tok);
                }
            }
            const auto rows = verify::activation_fit_experiment(rs, fns);
            std::ostringstream csv;
            csv << "function,r_count,max_abs_error,rms_error\n";
            for (const auto& row : rows) {
                csv << row.function << "," << row.r_count << "," << row.max_abs
                    << "," << row.rms << "\n";
            }
            if (!fit_out.empty()) {
                std::ofstream out(fit_out);
                out << csv.str();
            }
            std::fputs(csv.str().c_str(), stdout);
            return kExitOk;
        }
        if (export_cmd->parsed()) {
            const auto ckpt = network::load_checkpoint(export_ckpt);
            verify::export_activations(ckpt.net, export_dir);
            return kExitOk;
        }
    } catch (const DatasetMissing& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitMissing;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }
    return kExitUsage;
}
