#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mtil/control_math.hpp"
#include "mtil/errors.hpp"
#include "mtil/eval_metrics.hpp"
#include "mtil/exp_harness.hpp"
#include "mtil/lti_env.hpp"
#include "mtil/random.hpp"
#include "mtil/theory_probe.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;
constexpr int kExitProbe = 3;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void print_matrix(const Eigen::MatrixXd& m, const std::string& indent) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::cout << indent;
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%12.6g", m(i, j));
      std::cout << buf;
    }
    std::cout << '\n';
  }
}

int cmd_run(const std::string& config_path, const std::string& out_dir,
            std::optional<std::uint64_t> seed, std::optional<int> parallelism, bool plot) {
  mtil::ExperimentConfig cfg = mtil::load_config(config_path);
  if (seed) cfg.seed = *seed;
  if (parallelism) {
    if (*parallelism < 1) {
      throw mtil::Error(mtil::ErrorCode::kValidationError, "--parallelism: must be at least 1");
    }
    cfg.parallelism = *parallelism;
  }
  const auto rows = mtil::run_sweep(cfg);
  const auto paths = mtil::write_results(rows, cfg, out_dir, plot);
  std::cout << rows.size() << " rows\n";
  for (const auto& p : paths) std::cout << "wrote " << p.string() << '\n';
  return kExitOk;
}

int cmd_verify(const std::string& probe, const std::string& out_dir, std::uint64_t seed) {
  std::vector<std::string> names;
  if (probe == "all") {
    names = mtil::probe_names();
  } else {
    names.push_back(probe);
  }
  const mtil::SeedTree root{seed, {}};
  std::filesystem::create_directories(out_dir);
  const auto path = std::filesystem::path(out_dir) / "verify.csv";
  std::ofstream csv(path, std::ios::binary | std::ios::trunc);
  if (!csv) throw mtil::Error(mtil::ErrorCode::kIoError, "cannot write '" + path.string() + "'");
  csv << "name,trials,failures,delta_target,margin,pass\n";
  bool all_pass = true;
  for (const auto& name : names) {
    const mtil::ProbeReport rep = mtil::run_named_probe(name, root);
    char line[256];
    std::snprintf(line, sizeof line, "%s,%lld,%lld,%.17g,%.17g,%d\n", rep.name.c_str(),
                  rep.trials, rep.failures, rep.delta_target, rep.margin, rep.pass ? 1 : 0);
    csv << line;
    std::cout << (rep.pass ? "[PASS] " : "[FAIL] ") << rep.name << "  trials=" << rep.trials
              << " failures=" << rep.failures << " margin=" << num(rep.margin);
    if (!rep.note.empty()) std::cout << " (" << rep.note << ")";
    std::cout << '\n';
    for (const auto& [k, v] : rep.details) std::cout << "    " << k << " = " << num(v) << '\n';
    all_pass = all_pass && rep.pass;
  }
  std::cout << "wrote " << path.string() << '\n';
  return all_pass ? kExitOk : kExitProbe;
}

int cmd_synth(const std::string& preset, int lift_dim, std::uint64_t seed, int H,
              double sigma_z) {
  const mtil::LinearSystem base = mtil::preset_system(preset);
  if (H < 1) throw mtil::Error(mtil::ErrorCode::kValidationError, "--H: must be at least 1");
  if (lift_dim < 0 || (lift_dim > 0 && lift_dim < base.nx())) {
    throw mtil::Error(mtil::ErrorCode::kValidationError,
                      "--lift-dim: must be 0 or at least the state dimension");
  }
  mtil::TaskEnsemble ens = mtil::lqr_ensemble(
      base, H, -2.0, 2.0, Eigen::MatrixXd::Identity(base.nu(), base.nu()), sigma_z);
  const auto alphas = mtil::logspace(-2.0, 2.0, H + 1);
  if (lift_dim > 0) {
    mtil::RandomStream stream = mtil::SeedTree{seed, {}}.child("lift", 0).stream();
    const Eigen::MatrixXd G = mtil::sample_lift_matrix(lift_dim, base.nx(), stream);
    ens = mtil::lift_ensemble(ens, G);
  }
  std::cout << "preset " << preset << "  n_x=" << ens.system.nx() << " n_u=" << ens.system.nu()
            << "  H=" << H << "  sigma_z=" << num(sigma_z);
  if (lift_dim > 0) std::cout << "  lifted from n_x=" << base.nx() << " (seed " << seed << ")";
  std::cout << "\n\n";
  const bool full = ens.system.nx() <= 6;
  std::cout << "task  alpha        rho(A+BK)    ||K||_2      tr(Sigma_x)  lmin(Sigma_x) lmax(Sigma_x)\n";
  for (int h = 0; h <= H; ++h) {
    const auto& t = ens.task(h);
    char line[160];
    std::snprintf(line, sizeof line, "%-5s %-12.6g %-12.6g %-12.6g %-12.6g %-13.6g %-12.6g\n",
                  h == H ? "tgt" : std::to_string(h + 1).c_str(), alphas[static_cast<std::size_t>(h)],
                  mtil::spectral_radius(ens.system.closed_loop(t.K)), mtil::spectral_norm(t.K),
                  t.sigma_x.trace(), mtil::min_eigenvalue(t.sigma_x),
                  mtil::max_eigenvalue(t.sigma_x));
    std::cout << line;
  }
  std::cout << "\ngains (original coordinates)\n";
  mtil::GroundTruthFactors truth;
  if (ens.truth) {
    truth = *ens.truth;
  } else {
    truth.phi_star = Eigen::MatrixXd::Identity(base.nx(), base.nx());
    for (int h = 0; h <= H; ++h) truth.f_stars.push_back(ens.task(h).K);
  }
  for (int h = 0; h <= H; ++h) {
    std::cout << "  " << (h == H ? std::string("target") : "h=" + std::to_string(h + 1)) << '\n';
    print_matrix(truth.f_stars[static_cast<std::size_t>(h)], "    ");
    if (full) {
      std::cout << "  Sigma_x\n";
      print_matrix(ens.task(h).sigma_x, "    ");
    }
  }
  const mtil::DiversityReport div = mtil::task_diversity_constants(ens, truth);
  std::cout << "\ndiversity\n"
            << "  c            " << num(div.c) << '\n'
            << "  nu           " << num(div.nu) << '\n'
            << "  nu*H         " << num(div.nu_times_H) << '\n'
            << "  lambda_bar   " << num(div.lambda_bar) << '\n'
            << "  lambda_under " << num(div.lambda_under) << '\n'
            << "  ratio        " << num(div.lambda_bar / div.lambda_under) << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task imitation learning workbench for linear systems"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run a seeded multi-task vs direct sweep");
  std::string config_path;
  std::string run_out;
  std::optional<std::uint64_t> run_seed;
  std::optional<int> parallelism;
  bool plot = false;
  run->add_option("--config", config_path, "JSON config file")->required();
  run->add_option("--out", run_out, "Output directory")->required();
  run->add_option("--seed", run_seed, "Override run.seed");
  run->add_option("--parallelism", parallelism, "Worker threads");
  run->add_flag("--emit-plot-script", plot, "Also write plot.gp for gnuplot");

  auto* verify = app.add_subcommand("verify", "Run Monte-Carlo bound probes");
  std::string probe = "all";
  std::string verify_out;
  std::uint64_t verify_seed = 1;
  verify->add_option("--probe", probe, "Probe name or 'all'");
  verify->add_option("--out", verify_out, "Output directory")->required();
  verify->add_option("--seed", verify_seed, "Root seed");

  auto* synth = app.add_subcommand("synth", "Print an expert family and its diversity constants");
  std::string preset = "hong2021";
  int lift_dim = 0;
  std::uint64_t synth_seed = 1;
  int H = 9;
  double sigma_z = 1.0;
  synth->add_option("--preset", preset, "Plant preset");
  synth->add_option("--lift-dim", lift_dim, "Lift to this observation dimension (0 = none)");
  synth->add_option("--seed", synth_seed, "Seed for the lift matrix");
  synth->add_option("--H", H, "Number of source tasks");
  synth->add_option("--sigma-z", sigma_z, "Actuator noise std");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*run) return cmd_run(config_path, run_out, run_seed, parallelism, plot);
    if (*verify) return cmd_verify(probe, verify_out, verify_seed);
    if (*synth) return cmd_synth(preset, lift_dim, synth_seed, H, sigma_z);
  } catch (const mtil::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    switch (e.code()) {
      case mtil::ErrorCode::kValidationError:
      case mtil::ErrorCode::kParseError:
      case mtil::ErrorCode::kInvalidArgument:
        return kExitValidation;
      default:
        return kExitFailure;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
