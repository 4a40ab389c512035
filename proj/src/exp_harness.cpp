#include "mtil/exp_harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "mtil/control_math.hpp"
#include "mtil/data_gen.hpp"
#include "mtil/errors.hpp"
#include "mtil/eval_metrics.hpp"
#include "mtil/lti_env.hpp"
#include "mtil/mtil_learn.hpp"
#include "mtil/random.hpp"

namespace mtil {

using nlohmann::json;

ExperimentConfig::ExperimentConfig() {
  for (int i = 1; i <= 20; ++i) n2.push_back(i);
}

namespace {

[[noreturn]] void invalid(const std::string& path, const std::string& what) {
  throw Error(ErrorCode::kValidationError, path + ": " + what);
}

void check_keys(const json& obj, const std::string& path,
                const std::set<std::string>& allowed) {
  if (!obj.is_object()) invalid(path.empty() ? "<root>" : path, "expected an object");
  for (const auto& item : obj.items()) {
    if (!allowed.count(item.key())) {
      invalid(path.empty() ? item.key() : path + "." + item.key(), "unknown key");
    }
  }
}

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void read_int(const json& obj, const std::string& path, const char* key, int& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) invalid(join(path, key), "expected an integer");
  const auto value = v.get<long long>();
  if (value < std::numeric_limits<int>::min() || value > std::numeric_limits<int>::max()) {
    invalid(join(path, key), "integer out of range");
  }
  out = static_cast<int>(value);
}

void read_double(const json& obj, const std::string& path, const char* key, double& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_number()) invalid(join(path, key), "expected a number");
  out = v.get<double>();
  if (!std::isfinite(out)) invalid(join(path, key), "expected a finite number");
}

void read_bool(const json& obj, const std::string& path, const char* key, bool& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_boolean()) invalid(join(path, key), "expected true or false");
  out = v.get<bool>();
}

std::vector<int> read_int_grid(const json& v, const std::string& path) {
  std::vector<int> out;
  if (v.is_number_integer()) {
    out.push_back(v.get<int>());
  } else if (v.is_array()) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number_integer()) {
        invalid(path + "[" + std::to_string(i) + "]", "expected an integer");
      }
      out.push_back(v[i].get<int>());
    }
  } else {
    invalid(path, "expected an integer or an array of integers");
  }
  if (out.empty()) invalid(path, "grid must be nonempty");
  for (int x : out) {
    if (x < 1) invalid(path, "grid values must be positive");
  }
  return out;
}

MatrixXd read_matrix(const json& v, const std::string& path) {
  if (!v.is_array() || v.empty()) invalid(path, "expected a nonempty array of rows");
  const std::size_t rows = v.size();
  std::size_t cols = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!v[i].is_array() || v[i].empty()) {
      invalid(path + "[" + std::to_string(i) + "]", "expected a nonempty row");
    }
    if (i == 0) cols = v[i].size();
    if (v[i].size() != cols) invalid(path, "rows have different lengths");
  }
  MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const json& e = v[i][j];
      if (!e.is_number()) {
        invalid(path + "[" + std::to_string(i) + "][" + std::to_string(j) + "]",
                "expected a number");
      }
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = e.get<double>();
    }
  }
  return m;
}

json matrix_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

LinearSystem base_system(const ExperimentConfig& c) {
  if (c.A && c.B) return LinearSystem(*c.A, *c.B);
  return preset_system(c.preset);
}

MatrixXd input_cost(const ExperimentConfig& c, Eigen::Index nu) {
  return c.R ? *c.R : MatrixXd::Identity(nu, nu);
}

void validate(ExperimentConfig& c) {
  LinearSystem sys;
  try {
    sys = base_system(c);
  } catch (const Error& e) {
    invalid(c.A ? "system.A" : "system.preset", e.what());
  }
  const Eigen::Index n = sys.nx();
  const Eigen::Index nu = sys.nu();
  if (c.lift_dim < 0) invalid("system.lift_dim", "must be nonnegative");
  if (c.lift_dim > 0 && c.lift_dim < n) {
    invalid("system.lift_dim", "must be at least the state dimension");
  }
  if (c.sigma_z < 0.0) invalid("system.sigma_z", "must be nonnegative");
  if (c.sigma_w <= 0.0) invalid("system.sigma_w", "must be positive");
  if (c.H < 1) invalid("tasks.H", "must be at least 1");
  if (c.alpha_lo > c.alpha_hi) invalid("tasks.alphas", "lower exponent exceeds upper");
  if (c.R) {
    if (c.R->rows() != nu || c.R->cols() != nu) invalid("tasks.R", "shape must be n_u x n_u");
    if (!(min_eigenvalue(symmetrize(*c.R)) > 0.0)) invalid("tasks.R", "must be positive definite");
  }
  const Eigen::Index nx_obs = c.lift_dim > 0 ? c.lift_dim : n;
  if (c.k < 1) invalid("learn.k", "must be at least 1");
  if (c.k > nx_obs) invalid("learn.k", "exceeds the state dimension");
  if (c.lift_dim > 0 && 2 * c.k > c.lift_dim) invalid("learn.k", "2k exceeds the lifted dimension");
  if (c.restarts < 1) invalid("learn.restarts", "must be at least 1");
  if (c.max_sweeps < 0) invalid("learn.max_sweeps", "must be nonnegative");
  if (!(c.rel_tol >= 0.0)) invalid("learn.rel_tol", "must be nonnegative");
  if (c.T < 1) invalid("sweep.T", "must be at least 1");
  if (c.T_test < 1) invalid("sweep.T_test", "must be at least 1");
  if (c.trials_system < 1) invalid("sweep.trials_system", "must be at least 1");
  if (c.trials_noise < 1) invalid("sweep.trials_noise", "must be at least 1");
  if (c.methods.empty()) invalid("sweep.methods", "must be nonempty");
  for (const auto& m : c.methods) {
    if (m != "multitask" && m != "direct") invalid("sweep.methods", "unknown method '" + m + "'");
  }
  std::sort(c.methods.begin(), c.methods.end());
  c.methods.erase(std::unique(c.methods.begin(), c.methods.end()), c.methods.end());
  if (c.eval_task < 0 || c.eval_task > c.H) invalid("sweep.eval_task", "must be 'target' or in 1..H");
  if (c.parallelism < 1) invalid("run.parallelism", "must be at least 1");
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig c;
  if (doc.is_null()) {
    validate(c);
    return c;
  }
  check_keys(doc, "", {"system", "tasks", "learn", "sweep", "run"});
  if (doc.contains("system")) {
    const json& s = doc.at("system");
    check_keys(s, "system", {"preset", "A", "B", "lift_dim", "sigma_z", "sigma_w"});
    if (s.contains("preset")) {
      if (!s.at("preset").is_string()) invalid("system.preset", "expected a string");
      c.preset = s.at("preset").get<std::string>();
    }
    if (s.contains("A") != s.contains("B")) invalid("system", "A and B must be given together");
    if (s.contains("A")) {
      c.A = read_matrix(s.at("A"), "system.A");
      c.B = read_matrix(s.at("B"), "system.B");
      if (c.A->rows() != c.A->cols()) invalid("system.A", "must be square");
      if (c.B->rows() != c.A->rows()) invalid("system.B", "row count must match A");
      c.preset = "inline";
    }
    if (s.contains("lift_dim") && s.at("lift_dim").is_null()) {
      c.lift_dim = 0;
    } else {
      read_int(s, "system", "lift_dim", c.lift_dim);
    }
    read_double(s, "system", "sigma_z", c.sigma_z);
    read_double(s, "system", "sigma_w", c.sigma_w);
  }
  if (doc.contains("tasks")) {
    const json& t = doc.at("tasks");
    check_keys(t, "tasks", {"H", "alphas", "R"});
    read_int(t, "tasks", "H", c.H);
    if (t.contains("alphas")) {
      const json& a = t.at("alphas");
      if (!a.is_array() || a.size() != 2 || !a[0].is_number() || !a[1].is_number()) {
        invalid("tasks.alphas", "expected [lo_exponent, hi_exponent]");
      }
      c.alpha_lo = a[0].get<double>();
      c.alpha_hi = a[1].get<double>();
    }
    if (t.contains("R")) {
      const json& r = t.at("R");
      if (r.is_number()) {
        c.R = MatrixXd::Constant(1, 1, r.get<double>());  // expanded to r * I below
      } else {
        c.R = read_matrix(r, "tasks.R");
      }
    }
  }
  if (doc.contains("learn")) {
    const json& l = doc.at("learn");
    check_keys(l, "learn", {"k", "restarts", "max_sweeps", "rel_tol"});
    read_int(l, "learn", "k", c.k);
    read_int(l, "learn", "restarts", c.restarts);
    read_int(l, "learn", "max_sweeps", c.max_sweeps);
    read_double(l, "learn", "rel_tol", c.rel_tol);
  }
  if (doc.contains("sweep")) {
    const json& s = doc.at("sweep");
    check_keys(s, "sweep", {"T", "T_test", "n1", "n2", "trials_system", "trials_noise",
                            "methods", "eval_task", "reuse_source_data"});
    read_int(s, "sweep", "T", c.T);
    read_int(s, "sweep", "T_test", c.T_test);
    if (s.contains("n1")) c.n1 = read_int_grid(s.at("n1"), "sweep.n1");
    if (s.contains("n2")) c.n2 = read_int_grid(s.at("n2"), "sweep.n2");
    read_int(s, "sweep", "trials_system", c.trials_system);
    read_int(s, "sweep", "trials_noise", c.trials_noise);
    if (s.contains("methods")) {
      const json& m = s.at("methods");
      if (!m.is_array()) invalid("sweep.methods", "expected an array of strings");
      c.methods.clear();
      for (const auto& e : m) {
        if (!e.is_string()) invalid("sweep.methods", "expected an array of strings");
        c.methods.push_back(e.get<std::string>());
      }
    }
    if (s.contains("eval_task")) {
      const json& e = s.at("eval_task");
      if (e.is_string() && e.get<std::string>() == "target") {
        c.eval_task = 0;
      } else if (e.is_number_integer()) {
        c.eval_task = e.get<int>();
        if (c.eval_task < 1) invalid("sweep.eval_task", "must be 'target' or in 1..H");
      } else {
        invalid("sweep.eval_task", "expected 'target' or a source index");
      }
    }
    read_bool(s, "sweep", "reuse_source_data", c.reuse_source_data);
  }
  if (doc.contains("run")) {
    const json& r = doc.at("run");
    check_keys(r, "run", {"seed", "parallelism"});
    if (r.contains("seed")) {
      const json& s = r.at("seed");
      if (!s.is_number_unsigned()) {
        invalid("run.seed", "expected a nonnegative integer");
      }
      c.seed = s.get<std::uint64_t>();
    }
    read_int(r, "run", "parallelism", c.parallelism);
  }
  if (doc.contains("tasks") && doc.at("tasks").contains("R") &&
      doc.at("tasks").at("R").is_number()) {
    LinearSystem sys;
    try {
      sys = base_system(c);
    } catch (const Error& e) {
      invalid(c.A ? "system.A" : "system.preset", e.what());
    }
    c.R = (*c.R)(0, 0) * MatrixXd::Identity(sys.nu(), sys.nu());
  }
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open config '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return parse_config(json());
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParseError, path.string() + ": " + e.what());
  }
  return parse_config(doc);
}

json config_to_json(const ExperimentConfig& c) {
  json doc;
  doc["system"]["preset"] = c.preset;
  if (c.A) doc["system"]["A"] = matrix_to_json(*c.A);
  if (c.B) doc["system"]["B"] = matrix_to_json(*c.B);
  doc["system"]["lift_dim"] = c.lift_dim;
  doc["system"]["sigma_z"] = c.sigma_z;
  doc["system"]["sigma_w"] = c.sigma_w;
  doc["tasks"]["H"] = c.H;
  doc["tasks"]["alphas"] = {c.alpha_lo, c.alpha_hi};
  doc["tasks"]["R"] = matrix_to_json(input_cost(c, base_system(c).nu()));
  doc["learn"]["k"] = c.k;
  doc["learn"]["restarts"] = c.restarts;
  doc["learn"]["max_sweeps"] = c.max_sweeps;
  doc["learn"]["rel_tol"] = c.rel_tol;
  doc["sweep"]["T"] = c.T;
  doc["sweep"]["T_test"] = c.T_test;
  doc["sweep"]["n1"] = c.n1;
  doc["sweep"]["n2"] = c.n2;
  doc["sweep"]["trials_system"] = c.trials_system;
  doc["sweep"]["trials_noise"] = c.trials_noise;
  doc["sweep"]["methods"] = c.methods;
  if (c.eval_task == 0) {
    doc["sweep"]["eval_task"] = "target";
  } else {
    doc["sweep"]["eval_task"] = c.eval_task;
  }
  doc["sweep"]["reuse_source_data"] = c.reuse_source_data;
  doc["run"]["seed"] = c.seed;
  doc["run"]["parallelism"] = c.parallelism;
  return doc;
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

struct SourcePretrain {
  std::vector<TrajectoryBatch> batches;
  std::map<int, PretrainResult> by_n1;
  std::map<int, std::string> errors;
};

struct SystemState {
  TaskEnsemble ensemble;
  std::optional<SourcePretrain> shared;  // set when source data is reused
  std::string error;
};

TaskEnsemble build_ensemble(const ExperimentConfig& c, const SeedTree& sys_tree) {
  const LinearSystem base = base_system(c);
  const MatrixXd R = input_cost(c, base.nu());
  const auto gains =
      synthesize_expert_family(base, logspace(c.alpha_lo, c.alpha_hi, c.H + 1), R);
  if (c.lift_dim == 0) {
    return make_ensemble(base, gains, c.sigma_w * c.sigma_w * MatrixXd::Identity(base.nx(), base.nx()),
                         c.sigma_z);
  }
  const TaskEnsemble raw =
      make_ensemble(base, gains, MatrixXd::Identity(base.nx(), base.nx()), c.sigma_z);
  RandomStream lift_stream = sys_tree.child("lift", 0).stream();
  const MatrixXd G = sample_lift_matrix(c.lift_dim, base.nx(), lift_stream);
  return lift_ensemble(raw, G, c.sigma_w * c.sigma_w * MatrixXd::Identity(c.lift_dim, c.lift_dim));
}

SourcePretrain pretrain_sources(const ExperimentConfig& c, const TaskEnsemble& ens,
                                const SeedTree& src_tree, bool need_pretrain) {
  SourcePretrain out;
  const int max_n1 = *std::max_element(c.n1.begin(), c.n1.end());
  for (int h = 0; h < ens.H(); ++h) {
    RandomStream stream = src_tree.child("task", h).stream();
    out.batches.push_back(rollout_expert(ens.system, ens.sources[static_cast<std::size_t>(h)],
                                         c.T, max_n1, stream, h));
  }
  if (!need_pretrain) return out;
  PretrainOptions opt;
  opt.k = c.k;
  opt.max_sweeps = c.max_sweeps;
  opt.rel_tol = c.rel_tol;
  opt.restarts = c.restarts;
  for (int n1 : c.n1) {
    std::vector<StackedData> data;
    for (const auto& b : out.batches) data.push_back(stack_prefix(b, n1));
    RandomStream als = src_tree.child("als", n1).stream();
    try {
      out.by_n1.emplace(n1, pretrain_alternating(data, opt, als));
    } catch (const Error& e) {
      out.errors.emplace(n1, e.what());
    }
  }
  return out;
}

ResultRow base_row(const ExperimentConfig& c, const std::string& method, int s, int j,
                   int n1, int n2) {
  ResultRow r;
  r.method = method;
  r.system_trial = s;
  r.noise_trial = j;
  r.N1 = n1;
  r.N2 = n2;
  r.H = c.H;
  r.T = c.T;
  r.k = c.k;
  return r;
}

void mark_failed(ResultRow& r) {
  r.tracking_err = std::numeric_limits<double>::infinity();
  r.param_err = std::numeric_limits<double>::infinity();
  r.excess_risk = std::numeric_limits<double>::infinity();
  r.stable = false;
  r.nonfinite = true;
}

void fill_metrics(ResultRow& r, const LinearSystem& sys, const ExpertTask& task,
                  const MatrixXd& K_hat, int T_test, const SeedTree& eval_tree) {
  if (!K_hat.allFinite()) {
    mark_failed(r);
    return;
  }
  const MetricsRecord m = evaluate_controller(sys, task, K_hat, T_test, 1, eval_tree).front();
  r.tracking_err = m.tracking_err;
  r.param_err = m.param_err;
  r.stable = m.stable;
  r.excess_risk = m.excess_risk;
  r.nonfinite = m.nonfinite;
}

bool has_method(const ExperimentConfig& c, const char* name) {
  return std::find(c.methods.begin(), c.methods.end(), name) != c.methods.end();
}

std::vector<ResultRow> run_cell(const ExperimentConfig& c, const SystemState& st, int s,
                                int j) {
  std::vector<ResultRow> rows;
  const SeedTree sys_tree = SeedTree{c.seed, {}}.child("system", s);
  const SeedTree noise_tree = sys_tree.child("noise", j);
  const SeedTree eval_tree = noise_tree.child("eval", 0);
  const bool multitask = has_method(c, "multitask");
  const bool direct = has_method(c, "direct");
  const bool target_mode = c.eval_task == 0;
  std::vector<int> n2_grid = target_mode ? c.n2 : std::vector<int>{0};

  auto all_failed = [&](const std::string&) {
    for (const auto& method : c.methods) {
      for (int n1 : c.n1) {
        for (int n2 : n2_grid) {
          ResultRow r = base_row(c, method, s, j, n1, n2);
          mark_failed(r);
          rows.push_back(r);
        }
      }
    }
    return rows;
  };
  if (!st.error.empty()) return all_failed(st.error);

  const TaskEnsemble& ens = st.ensemble;
  SourcePretrain local;
  const SourcePretrain* src = nullptr;
  try {
    if (st.shared) {
      src = &*st.shared;
    } else {
      local = pretrain_sources(c, ens, noise_tree.child("source", 0), multitask);
      src = &local;
    }
  } catch (const Error& e) {
    return all_failed(e.what());
  }

  const int eval_index = target_mode ? ens.H() : c.eval_task - 1;
  const ExpertTask& task = ens.task(eval_index);

  if (target_mode) {
    const int max_n2 = *std::max_element(c.n2.begin(), c.n2.end());
    TrajectoryBatch pool;
    try {
      RandomStream stream = noise_tree.child("target", 0).stream();
      pool = rollout_expert(ens.system, task, c.T, max_n2, stream, ens.H());
    } catch (const Error& e) {
      return all_failed(e.what());
    }
    for (int n2 : c.n2) {
      const StackedData data = stack_prefix(pool, n2);
      if (direct) {
        const auto start = Clock::now();
        ResultRow proto = base_row(c, "direct", s, j, 0, n2);
        try {
          const LeastSquaresFit fit = direct_ols(data);
          proto.underdetermined = fit.underdetermined;
          fill_metrics(proto, ens.system, task, fit.weights, c.T_test, eval_tree);
        } catch (const Error&) {
          mark_failed(proto);
        }
        proto.wall_time_ms = elapsed_ms(start);
        for (int n1 : c.n1) {
          ResultRow r = proto;
          r.N1 = n1;
          rows.push_back(r);
        }
      }
      if (multitask) {
        for (int n1 : c.n1) {
          const auto start = Clock::now();
          ResultRow r = base_row(c, "multitask", s, j, n1, n2);
          const auto it = src->by_n1.find(n1);
          if (it == src->by_n1.end()) {
            mark_failed(r);
          } else {
            try {
              const LeastSquaresFit fit = finetune_target(it->second.phi_hat, data);
              r.underdetermined = fit.underdetermined;
              fill_metrics(r, ens.system, task, fit.weights * it->second.phi_hat, c.T_test,
                           eval_tree);
            } catch (const Error&) {
              mark_failed(r);
            }
          }
          r.wall_time_ms = elapsed_ms(start);
          rows.push_back(r);
        }
      }
    }
  } else {
    for (int n1 : c.n1) {
      if (direct) {
        const auto start = Clock::now();
        ResultRow r = base_row(c, "direct", s, j, n1, 0);
        try {
          const LeastSquaresFit fit =
              direct_ols(stack_prefix(src->batches[static_cast<std::size_t>(eval_index)], n1));
          r.underdetermined = fit.underdetermined;
          fill_metrics(r, ens.system, task, fit.weights, c.T_test, eval_tree);
        } catch (const Error&) {
          mark_failed(r);
        }
        r.wall_time_ms = elapsed_ms(start);
        rows.push_back(r);
      }
      if (multitask) {
        const auto start = Clock::now();
        ResultRow r = base_row(c, "multitask", s, j, n1, 0);
        const auto it = src->by_n1.find(n1);
        if (it == src->by_n1.end()) {
          mark_failed(r);
        } else {
          try {
            const PretrainResult& pre = it->second;
            fill_metrics(r, ens.system, task,
                         pre.f_hats[static_cast<std::size_t>(eval_index)] * pre.phi_hat,
                         c.T_test, eval_tree);
          } catch (const Error&) {
            mark_failed(r);
          }
        }
        r.wall_time_ms = elapsed_ms(start);
        rows.push_back(r);
      }
    }
  }
  return rows;
}

template <typename Fn>
void parallel_for(int count, int workers, Fn&& fn) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

auto sort_key(const ResultRow& r) {
  return std::tie(r.method, r.N1, r.N2, r.system_trial, r.noise_trial);
}

}  // namespace

std::vector<ResultRow> run_sweep(const ExperimentConfig& config) {
  const int S = config.trials_system;
  const int J = config.trials_noise;
  const bool multitask = has_method(config, "multitask");
  std::vector<SystemState> systems(static_cast<std::size_t>(S));
  parallel_for(S, config.parallelism, [&](int s) {
    SystemState& st = systems[static_cast<std::size_t>(s)];
    const SeedTree sys_tree = SeedTree{config.seed, {}}.child("system", s);
    try {
      st.ensemble = build_ensemble(config, sys_tree);
      if (config.reuse_source_data) {
        st.shared = pretrain_sources(config, st.ensemble, sys_tree.child("source", 0), multitask);
      }
    } catch (const Error& e) {
      st.error = e.what();
    }
  });

  std::vector<std::vector<ResultRow>> cells(static_cast<std::size_t>(S * J));
  parallel_for(S * J, config.parallelism, [&](int idx) {
    const int s = idx / J;
    const int j = idx % J;
    cells[static_cast<std::size_t>(idx)] = run_cell(config, systems[static_cast<std::size_t>(s)], s, j);
  });

  std::vector<ResultRow> rows;
  for (auto& cell : cells) {
    for (auto& r : cell) rows.push_back(std::move(r));
  }
  std::sort(rows.begin(), rows.end(),
            [](const ResultRow& a, const ResultRow& b) { return sort_key(a) < sort_key(b); });
  return rows;
}

std::vector<SummaryRow> summarize_rows(const std::vector<ResultRow>& rows) {
  std::vector<ResultRow> sorted = rows;
  std::stable_sort(sorted.begin(), sorted.end(), [](const ResultRow& a, const ResultRow& b) {
    return std::tie(a.method, a.N1, a.N2) < std::tie(b.method, b.N1, b.N2);
  });
  std::vector<SummaryRow> out;
  const std::vector<double> qs = {0.5, 0.2, 0.8};
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t end = i;
    std::vector<double> tr, pe, er;
    int stable = 0;
    while (end < sorted.size() && sorted[end].method == sorted[i].method &&
           sorted[end].N1 == sorted[i].N1 && sorted[end].N2 == sorted[i].N2) {
      tr.push_back(sorted[end].tracking_err);
      pe.push_back(sorted[end].param_err);
      er.push_back(sorted[end].excess_risk);
      stable += sorted[end].stable ? 1 : 0;
      ++end;
    }
    SummaryRow s;
    s.method = sorted[i].method;
    s.N1 = sorted[i].N1;
    s.N2 = sorted[i].N2;
    s.count = static_cast<int>(end - i);
    auto t = summarize_quantiles(tr, qs);
    auto p = summarize_quantiles(pe, qs);
    auto e = summarize_quantiles(er, qs);
    s.tracking_median = t[0], s.tracking_q20 = t[1], s.tracking_q80 = t[2];
    s.param_median = p[0], s.param_q20 = p[1], s.param_q80 = p[2];
    s.risk_median = e[0], s.risk_q20 = e[1], s.risk_q80 = e[2];
    s.stable_fraction = static_cast<double>(stable) / s.count;
    out.push_back(s);
    i = end;
  }
  return out;
}

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string out =
      "method,system_trial,noise_trial,N1,N2,H,T,k,tracking_err,param_err,stable,"
      "excess_risk,underdetermined,nonfinite\n";
  for (const auto& r : rows) {
    out += r.method + ',' + std::to_string(r.system_trial) + ',' +
           std::to_string(r.noise_trial) + ',' + std::to_string(r.N1) + ',' +
           std::to_string(r.N2) + ',' + std::to_string(r.H) + ',' + std::to_string(r.T) +
           ',' + std::to_string(r.k) + ',' + fmt(r.tracking_err) + ',' + fmt(r.param_err) +
           ',' + (r.stable ? "1" : "0") + ',' + fmt(r.excess_risk) + ',' +
           (r.underdetermined ? "1" : "0") + ',' + (r.nonfinite ? "1" : "0") + '\n';
  }
  return out;
}

namespace {

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out =
      "method,N1,N2,count,tracking_err_median,tracking_err_q20,tracking_err_q80,"
      "param_err_median,param_err_q20,param_err_q80,excess_risk_median,excess_risk_q20,"
      "excess_risk_q80,stable_fraction\n";
  for (const auto& s : rows) {
    out += s.method + ',' + std::to_string(s.N1) + ',' + std::to_string(s.N2) + ',' +
           std::to_string(s.count) + ',' + fmt(s.tracking_median) + ',' + fmt(s.tracking_q20) +
           ',' + fmt(s.tracking_q80) + ',' + fmt(s.param_median) + ',' + fmt(s.param_q20) +
           ',' + fmt(s.param_q80) + ',' + fmt(s.risk_median) + ',' + fmt(s.risk_q20) + ',' +
           fmt(s.risk_q80) + ',' + fmt(s.stable_fraction) + '\n';
  }
  return out;
}

std::string timings_csv(const std::vector<ResultRow>& rows) {
  std::string out = "method,system_trial,noise_trial,N1,N2,wall_time_ms\n";
  for (const auto& r : rows) {
    out += r.method + ',' + std::to_string(r.system_trial) + ',' +
           std::to_string(r.noise_trial) + ',' + std::to_string(r.N1) + ',' +
           std::to_string(r.N2) + ',' + fmt(r.wall_time_ms) + '\n';
  }
  return out;
}

std::string plot_script(bool target_mode) {
  const char* x = target_mode ? "3" : "2";
  const char* xlabel = target_mode ? "N2 (target trajectories)" : "N1 (source trajectories)";
  std::string s;
  s += "set datafile separator ','\n";
  s += "set terminal pngcairo size 1500,420\n";
  s += "set output 'summary.png'\n";
  s += "set multiplot layout 1,3\n";
  s += std::string("set xlabel '") + xlabel + "'\n";
  s += "set logscale y\n";
  s += "set title 'Tracking error'\n";
  s += std::string("plot for [m in 'multitask direct'] '< grep ^'.m.', summary.csv' using ") +
       x + ":5:6:7 with yerrorlines title m\n";
  s += "set title 'Parameter error'\n";
  s += std::string("plot for [m in 'multitask direct'] '< grep ^'.m.', summary.csv' using ") +
       x + ":8:9:10 with yerrorlines title m\n";
  s += "unset logscale y\n";
  s += "set title 'Percent stable'\n";
  s += std::string("plot for [m in 'multitask direct'] '< grep ^'.m.', summary.csv' using ") +
       x + ":(100*$14) with linespoints title m\n";
  s += "unset multiplot\n";
  return s;
}

void write_file(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write '" + path.string() + "'");
  out << body;
  if (!out) throw Error(ErrorCode::kIoError, "write failed for '" + path.string() + "'");
}

}  // namespace

std::vector<std::filesystem::path> write_results(const std::vector<ResultRow>& rows,
                                                 const ExperimentConfig& config,
                                                 const std::filesystem::path& out_dir,
                                                 bool emit_plot_script) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create '" + out_dir.string() + "': " + ec.message());
  std::vector<std::filesystem::path> paths = {out_dir / "results.csv", out_dir / "summary.csv",
                                              out_dir / "manifest.json", out_dir / "timings.csv"};
  write_file(paths[0], results_csv(rows));
  write_file(paths[1], summary_csv(summarize_rows(rows)));
  json manifest;
  manifest["schema_version"] = kResultsSchemaVersion;
  manifest["tool_version"] = kToolVersion;
  manifest["seed"] = config.seed;
  manifest["rows"] = rows.size();
  manifest["config"] = config_to_json(config);
  write_file(paths[2], manifest.dump(2) + "\n");
  write_file(paths[3], timings_csv(rows));
  if (emit_plot_script) {
    paths.push_back(out_dir / "plot.gp");
    write_file(paths.back(), plot_script(config.eval_task == 0));
  }
  return paths;
}

}  // namespace mtil
