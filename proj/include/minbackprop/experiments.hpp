#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "minbackprop/backward.hpp"
#include "minbackprop/report.hpp"
#include "minbackprop/synthetic.hpp"

namespace minbackprop::experiments {

using Json = nlohmann::json;
using report::Cell;
using report::RunReport;
using backward::BackwardMethod;
using backward::Problem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitAcceptance = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

/// Bad command parameters (exit code 2), as opposed to numerical failures.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  int iters = 30;
  std::optional<double> lr;
  std::optional<std::string> backward;
  std::optional<int> trials;
  std::uint64_t seed = 0;
  std::optional<double> tol;
  std::string problem = "all";
  std::optional<double> corruption;  // registration toy offset
  bool corrupt_system = false;       // p3p-example negative control
};

struct CommandResult {
  RunReport report;
  Json summary;
  std::string text;  // human-readable output for the terminal
  int exit_code = kExitOk;
};

/// splitmix64 step; independent per-trial streams from one seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline BackwardMethod method_for(const ExperimentConfig& cfg, Problem problem, BackwardMethod fallback) {
  if (!cfg.backward) return fallback;
  const auto m = backward::parse_method(*cfg.backward);
  if (!m) throw UsageError("unknown backward method '" + *cfg.backward + "'");
  if (!backward::applicable(*m, problem)) {
    throw UsageError(std::string(backward::to_string(*m)) + " does not apply to " + backward::to_string(problem));
  }
  return *m;
}

inline double learning_rate(const ExperimentConfig& cfg, double fallback) {
  const double lr = cfg.lr.value_or(fallback);
  if (!std::isfinite(lr) || lr < 0.0) throw UsageError("learning rate must be finite and non-negative");
  return lr;
}

inline std::string matrix_text(const Matrix& m, int precision = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      os.width(precision + 5);
      os << m(r, c) << (c + 1 < m.cols() ? " " : "");
    }
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// p3p-example

inline Vector example1_parameters() {
  Vector b(18);
  b << 0, 0, 3, 2, 0, 3, 0, 6, 3, -1.0 / 3, -1.0 / 3, 1, 1.0 / 3, -1.0 / 3, 1, -1.0 / 3, 5.0 / 3, 1;
  return b;
}

inline Vector3d example1_solution() { return Vector3d(3.0, 3.0, 3.0); }

struct PrintedEntry {
  const char* matrix;
  int row;
  int col;
  double value;
};

/// Published reference values for J_x, J_a and dx/da (shown columns only).
inline std::vector<PrintedEntry> example1_printed() {
  std::vector<PrintedEntry> out;
  const double jx[3][3] = {{-1.33, -1.33, 0.00}, {0.00, -5.33, -21.33}, {-4.00, 0.00, -20.00}};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out.push_back({"J_x", r, c, jx[r][c]});
  const int cols[9] = {0, 1, 2, 3, 4, 5, 15, 16, 17};
  const double ja[3][9] = {{-4, 0, 0, 4, 0, 0, 0, 0, 0}, {0, 0, 0, 4, -12, 0, 12, -36, 0}, {0, -12, 0, 0, 0, 0, 0, -36, 0}};
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 9; ++k) out.push_back({"J_a", r, cols[k], ja[r][k]});
  const int dcols[6] = {0, 1, 2, 15, 16, 17};
  const double dx[3][6] = {{1.66, 1.33, 0, 1.25, 0.24, 0}, {1.33, -1.33, 0, -1.25, -0.24, 0}, {-0.33, 0.33, 0, -0.25, -1.75, 0}};
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 6; ++k) out.push_back({"dx/da", r, dcols[k], dx[r][k]});
  return out;
}

inline constexpr double kPrintedTolerance = 5e-3;

inline CommandResult run_p3p_example(const ExperimentConfig& cfg) {
  auto sys = systems::p3p_system();
  if (cfg.corrupt_system) {
    auto ja = sys.jac_a;
    sys.jac_a = [ja](const Vector& x, const Vector& a) { return Matrix(1.1 * ja(x, a)); };
  }
  const Vector b = example1_parameters();
  const Vector x = example1_solution();
  const Matrix jx = sys.jac_x(x, b);
  const Matrix ja = sys.jac_a(x, b);
  const auto sol = ift::ift_jacobian(sys, x, b);
  const Matrix plus = jx.partialPivLu().solve(ja);  // +Jx^-1 Ja, for the diff report

  CommandResult res;
  res.report.header = {"matrix", "row", "col", "computed", "printed", "abs_diff", "match"};
  int mismatches = 0;
  int explained_by_sign = 0;
  std::ostringstream diff;
  for (const auto& e : example1_printed()) {
    const std::string name = e.matrix;
    const double v = name == "J_x" ? jx(e.row, e.col) : name == "J_a" ? ja(e.row, e.col) : sol.dxda(e.row, e.col);
    const double d = std::abs(v - e.value);
    const bool ok = d <= kPrintedTolerance;
    if (!ok) {
      ++mismatches;
      const bool sign = name == "dx/da" && std::abs(plus(e.row, e.col) - e.value) <= kPrintedTolerance;
      explained_by_sign += sign;
      diff << "  " << name << "[" << e.row << "][" << e.col << "] computed " << v << " printed " << e.value
           << (sign ? "  (printed value matches +Jx^-1 Ja)" : "") << "\n";
    }
    res.report.add_row({name, double(e.row), double(e.col), v, e.value, d, ok ? 1.0 : 0.0});
  }

  std::ostringstream text;
  text << "J_x at x = [3, 3, 3]:\n" << matrix_text(jx, 2) << "J_a:\n" << matrix_text(ja, 2)
       << "dx/da = -J_x^-1 J_a (" << ift::to_string(sol.method) << "):\n" << matrix_text(sol.dxda, 4);
  if (mismatches == 0) {
    text << "all " << res.report.rows.size() << " printed entries match within " << kPrintedTolerance << "\n";
  } else {
    text << mismatches << " of " << res.report.rows.size() << " printed entries differ by more than "
         << kPrintedTolerance << ":\n"
         << diff.str();
  }
  res.text = text.str();
  res.summary = {{"command", "p3p-example"},
                 {"entries", res.report.rows.size()},
                 {"mismatches", mismatches},
                 {"mismatches_matching_plus_inverse", explained_by_sign},
                 {"tolerance", kPrintedTolerance},
                 {"method", ift::to_string(sol.method)},
                 {"pass", mismatches == 0}};
  res.exit_code = mismatches == 0 ? kExitOk : kExitAcceptance;
  return res;
}

// ---------------------------------------------------------------------------
// Toy experiments

struct StepGradient {
  Vector grad;
  double ms = 0.0;
  int rank_failures = 0;
  bool fallback = false;
};

/// Runs `primary`; on a degeneracy error tries `secondary` (if given), and
/// otherwise reports a zero gradient. Either way the step is flagged.
template <typename Primary, typename Secondary>
StepGradient guarded_gradient(Index n, Primary primary, std::optional<Secondary> secondary) {
  const auto t0 = std::chrono::steady_clock::now();
  StepGradient out;
  auto recoverable = [](ErrorCode c) {
    return c == ErrorCode::kRankDeficient || c == ErrorCode::kDegenerateSpectrum ||
           c == ErrorCode::kTrackingFailure;
  };
  try {
    out.grad = primary();
  } catch (const Error& err) {
    if (!recoverable(err.code())) throw;
    out.fallback = true;
    out.rank_failures += err.code() == ErrorCode::kRankDeficient;
    out.grad = Vector::Zero(n);
    if (secondary) {
      try {
        out.grad = (*secondary)();
      } catch (const Error& err2) {
        if (!recoverable(err2.code())) throw;
        out.rank_failures += err2.code() == ErrorCode::kRankDeficient;
      }
    }
  }
  out.ms = elapsed_ms(t0);
  return out;
}

inline std::vector<std::string> toy_header(Index n) {
  std::vector<std::string> h = {"iter", "J"};
  for (Index i = 0; i < n; ++i) h.push_back("w_" + std::to_string(i + 1));
  for (const char* c : {"grad_norm", "time_ms", "rank_failures", "fallback"}) h.emplace_back(c);
  return h;
}

inline std::vector<Cell> toy_row(int iter, double j, const Vector& w, const StepGradient& g) {
  std::vector<Cell> row = {double(iter), j};
  for (Index i = 0; i < w.size(); ++i) row.emplace_back(w[i]);
  row.emplace_back(g.grad.norm());
  row.emplace_back(g.ms);
  row.emplace_back(double(g.rank_failures));
  row.emplace_back(g.fallback ? 1.0 : 0.0);
  return row;
}

inline void require_iters(const ExperimentConfig& cfg) {
  if (cfg.iters < 1) throw UsageError("iterations must be at least 1");
}

inline Json toy_summary(const char* command, const RunReport& rep, Index n, BackwardMethod m, double lr) {
  const size_t last = rep.rows.size() - 1;
  Json w0 = Json::array(), w1 = Json::array();
  for (Index i = 0; i < n; ++i) {
    w0.push_back(rep.number(0, "w_" + std::to_string(i + 1)));
    w1.push_back(rep.number(last, "w_" + std::to_string(i + 1)));
  }
  int fallbacks = 0;
  for (size_t r = 0; r < rep.rows.size(); ++r) fallbacks += rep.number(r, "fallback") > 0.0;
  return {{"command", command},      {"backward", backward::to_string(m)}, {"lr", lr},
          {"iterations", last},      {"J_initial", rep.number(0, "J")},    {"J_final", rep.number(last, "J")},
          {"weights_initial", w0},   {"weights_final", w1},                {"fallback_rows", fallbacks}};
}

/// Registration toy: gradient descent on the correspondence weights with
/// the geodesic rotation error as upper loss. The corrupted match is w_1.
inline CommandResult run_toy_registration(const ExperimentConfig& cfg) {
  require_iters(cfg);
  const BackwardMethod method = method_for(cfg, Problem::kRegistration, BackwardMethod::kKktIft);
  const double lr = learning_rate(cfg, 0.1);
  synthetic::RegistrationToyConfig toy;
  toy.seed = cfg.seed;
  if (cfg.corruption) toy.corruption = *cfg.corruption;
  RegistrationInstance inst = synthetic::make_registration_toy(toy);
  const auto loss = systems::rotation_geodesic_loss(inst.r_true);
  const Index n = inst.size();

  CommandResult res;
  res.report.header = toy_header(n);
  for (int it = 0; it <= cfg.iters; ++it) {
    const Matrix3d r = solvers::solve_kabsch(inst);
    const double j = loss.eval(r);
    const Vector upper = numerics::vec(loss.grad(r));
    auto kkt = [&] { return Vector(backward::registration_jacobian_kkt(r, inst).transpose() * upper); };
    auto primary = [&]() -> Vector {
      switch (method) {
        case BackwardMethod::kSvdClosedForm: return backward::registration_jacobian_svd(r, inst).transpose() * upper;
        case BackwardMethod::kFiniteDifference: return backward::fd_registration(inst).transpose() * upper;
        default: return kkt();
      }
    };
    const auto g = method == BackwardMethod::kKktIft
                       ? guarded_gradient(n, primary, std::optional<decltype(kkt)>{})
                       : guarded_gradient(n, primary, std::optional<decltype(kkt)>{kkt});
    res.report.add_row(toy_row(it, j, inst.w, g));
    if (it < cfg.iters) inst.w -= lr * g.grad;
    numerics::require_finite(inst.w, "weights");
  }
  res.summary = toy_summary("toy-registration", res.report, n, method, lr);
  res.summary["outlier_index"] = 1;
  std::ostringstream text;
  text << "toy-registration (" << backward::to_string(method) << ", lr " << lr << ", " << cfg.iters
       << " iterations)\n  J: " << res.summary["J_initial"].get<double>() << " -> "
       << res.summary["J_final"].get<double>() << "\n  weights: " << res.summary["weights_final"].dump() << "\n";
  res.text = text.str();
  return res;
}

/// Fundamental toy: weighted 8-point forward, ||F - F_true||^2 upper loss.
/// The outlier is w_1.
inline CommandResult run_toy_fundamental(const ExperimentConfig& cfg) {
  require_iters(cfg);
  const BackwardMethod method = method_for(cfg, Problem::kFundamental, BackwardMethod::kKktIft);
  const double lr = learning_rate(cfg, 1000.0);
  EpipolarInstance inst = synthetic::make_two_view(synthetic::fundamental_toy_config(cfg.seed));
  const auto loss = systems::frobenius_to_gt_loss(*inst.f_true);
  const Index n = inst.size();

  CommandResult res;
  res.report.header = toy_header(n);
  for (int it = 0; it <= cfg.iters; ++it) {
    const Matrix3d f = solvers::solve_fundamental_8pt(inst);
    const double j = loss.eval(f);
    const Vector upper = numerics::vec(loss.grad(f));
    auto kkt = [&] { return Vector(backward::fundamental_jacobian_kkt(f, inst).transpose() * upper); };
    auto primary = [&]() -> Vector {
      switch (method) {
        case BackwardMethod::kSvdClosedForm: return backward::fundamental_jacobian_svd(f, inst).transpose() * upper;
        case BackwardMethod::kFiniteDifference: return backward::fd_fundamental(inst).transpose() * upper;
        default: return kkt();
      }
    };
    const auto g = method == BackwardMethod::kKktIft
                       ? guarded_gradient(n, primary, std::optional<decltype(kkt)>{})
                       : guarded_gradient(n, primary, std::optional<decltype(kkt)>{kkt});
    res.report.add_row(toy_row(it, j, inst.weights, g));
    if (it < cfg.iters) {
      inst.weights -= lr * g.grad;
      numerics::require_finite(inst.weights, "weights");
      if (inst.weights.minCoeff() < 0.0) {
        fail(ErrorCode::kDegenerateConfiguration,
             "a weight became negative after iteration " + std::to_string(it) + "; lower the learning rate");
      }
    }
  }
  res.summary = toy_summary("toy-fundamental", res.report, n, method, lr);
  res.summary["outlier_index"] = 1;
  std::ostringstream text;
  text << "toy-fundamental (" << backward::to_string(method) << ", lr " << lr << ", " << cfg.iters
       << " iterations)\n  J: " << res.summary["J_initial"].get<double>() << " -> "
       << res.summary["J_final"].get<double>() << "\n  outlier weight: "
       << res.summary["weights_initial"][0].get<double>() << " -> "
       << res.summary["weights_final"][0].get<double>() << "\n";
  res.text = text.str();
  return res;
}

// ---------------------------------------------------------------------------
// gradcheck

inline constexpr double kMaxExcludedFraction = 0.05;

inline double default_tolerance(Problem p) { return p == Problem::kFundamental ? 1e-3 : 1e-5; }

inline double jacobian_error(const Matrix& a, const Matrix& fd) {
  return (a - fd).norm() / std::max(fd.norm(), 1e-8);
}

/// The oracle at the default step, rejected (as a tracking failure) when
/// halving the step moves it by more than `tol`: near a root collision the
/// truncation error of the central difference alone can exceed the tolerance.
template <typename Fd>
Matrix converged_fd(Fd fd, double tol) {
  const backward::FdOptions opt;
  backward::FdOptions half = opt;
  half.rel_step /= 2.0;
  half.abs_step /= 2.0;
  const Matrix coarse = fd(opt);
  const Matrix fine = fd(half);
  const double drift = jacobian_error(coarse, fine);
  if (drift > tol) {
    fail(ErrorCode::kTrackingFailure, "finite differences not converged (step-halving drift " + std::to_string(drift) + ")");
  }
  return coarse;
}

struct TrialOutcome {
  std::vector<std::pair<BackwardMethod, double>> errors;
  bool excluded = false;
  std::string note;
};

inline TrialOutcome gradcheck_trial(Problem problem, std::uint64_t seed, double tol) {
  TrialOutcome out;
  auto degenerate = [](ErrorCode c) {
    return c == ErrorCode::kTrackingFailure || c == ErrorCode::kDegenerateSpectrum ||
           c == ErrorCode::kRankDeficient || c == ErrorCode::kDegenerateConfiguration ||
           c == ErrorCode::kNoRealSolution;
  };
  try {
    switch (problem) {
      case Problem::kP3p: {
        const auto [inst, depths] = synthetic::make_p3p(seed);
        const auto roots = solvers::solve_p3p(inst);
        require(!roots.empty(), ErrorCode::kNoRealSolution, "no P3P root");
        Vector3d x = roots.front();
        for (const auto& r : roots)
          if ((r - depths).norm() < (x - depths).norm()) x = r;
        const Matrix fd = converged_fd([&](const auto& o) { return backward::fd_p3p(inst, x, o); }, tol);
        const auto g = backward::backward_p3p(x, inst, Vector3d::Zero());
        out.errors.push_back({BackwardMethod::kIftDirect, jacobian_error(g.jacobian, fd)});
        break;
      }
      case Problem::kRegistration: {
        const auto inst = synthetic::make_registration(8, 0.05, seed);
        const Matrix3d r = solvers::solve_kabsch(inst);
        const Matrix fd = converged_fd([&](const auto& o) { return backward::fd_registration(inst, o); }, tol);
        out.errors.push_back({BackwardMethod::kKktIft, jacobian_error(backward::registration_jacobian_kkt(r, inst), fd)});
        out.errors.push_back(
            {BackwardMethod::kSvdClosedForm, jacobian_error(backward::registration_jacobian_svd(r, inst), fd)});
        break;
      }
      case Problem::kFundamental: {
        synthetic::SceneConfig c;
        c.n_points = 15;
        c.n_outliers = 1;
        c.noise_sigma = 1e-3;
        c.seed = seed;
        EpipolarInstance inst = synthetic::make_two_view(c);
        synthetic::Rng rng(derive_seed(seed, 1));
        std::uniform_real_distribution<double> weight(0.2, 1.0);
        for (Index i = 0; i < inst.size(); ++i) inst.weights[i] = weight(rng);
        const Matrix3d f = solvers::solve_fundamental_8pt(inst);
        const Matrix fd = converged_fd([&](const auto& o) { return backward::fd_fundamental(inst, o); }, tol);
        out.errors.push_back({BackwardMethod::kKktIft, jacobian_error(backward::fundamental_jacobian_kkt(f, inst), fd)});
        out.errors.push_back(
            {BackwardMethod::kSvdClosedForm, jacobian_error(backward::fundamental_jacobian_svd(f, inst), fd)});
        break;
      }
      case Problem::kEssential: {
        const auto inst = synthetic::make_minimal_sample(seed);
        const auto set = solvers::solve_essential_5pt(inst.matches);
        const auto sel = solvers::select_closest(std::span<const Matrix3d>(set.candidates), inst.e_gt);
        const Matrix fd =
            converged_fd([&](const auto& o) { return backward::fd_essential(inst.matches, sel.model, o); }, tol);
        std::mt19937_64 rng(derive_seed(seed, 2));
        const auto ej = backward::essential_solution_jacobian(sel.model, inst.matches, rng);
        out.errors.push_back({BackwardMethod::kIftDirect, jacobian_error(ej.dEdw, fd)});
        break;
      }
    }
  } catch (const Error& err) {
    if (!degenerate(err.code())) throw;
    out.errors.clear();
    out.excluded = true;
    out.note = std::string(to_string(err.code()));
  }
  return out;
}

inline std::vector<Problem> problems_for(const std::string& name) {
  if (name == "all") return {Problem::kP3p, Problem::kRegistration, Problem::kFundamental, Problem::kEssential};
  const auto p = backward::parse_problem(name);
  if (!p) throw UsageError("unknown problem '" + name + "'");
  return {*p};
}

inline CommandResult run_gradcheck(const ExperimentConfig& cfg) {
  const int trials = cfg.trials.value_or(100);
  if (trials < 1) throw UsageError("trials must be at least 1");
  if (cfg.tol && !(*cfg.tol >= 0.0)) throw UsageError("tolerance must be non-negative");
  const auto problems = problems_for(cfg.problem);

  CommandResult res;
  res.report.header = {"problem", "trial", "method", "rel_error", "tol", "pass", "excluded", "note"};
  res.summary = {{"command", "gradcheck"}, {"trials", trials}, {"seed", cfg.seed}, {"problems", Json::object()}};
  bool all_pass = true;
  std::ostringstream text;
  for (size_t pi = 0; pi < problems.size(); ++pi) {
    const Problem p = problems[pi];
    const double tol = cfg.tol.value_or(default_tolerance(p));
    const std::string name = backward::to_string(p);
    int excluded = 0, failed = 0;
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
      // The oracle's own convergence is judged at the default tolerance so that
      // --tol cannot turn failures into exclusions.
      const auto outcome = gradcheck_trial(p, derive_seed(cfg.seed, 1000u * (pi + 1) + t), default_tolerance(p));
      if (outcome.excluded) {
        ++excluded;
        res.report.add_row({name, double(t), "-", std::numeric_limits<double>::quiet_NaN(), tol, 0.0, 1.0,
                            outcome.note});
        continue;
      }
      for (const auto& [m, err] : outcome.errors) {
        const bool ok = err < tol;
        failed += !ok;
        worst = std::max(worst, err);
        res.report.add_row({name, double(t), backward::to_string(m), err, tol, ok ? 1.0 : 0.0, 0.0, std::string()});
      }
    }
    const bool pass = failed == 0 && excluded < kMaxExcludedFraction * trials;
    all_pass = all_pass && pass;
    res.report.add_row({name, -1.0, "summary", worst, tol, pass ? 1.0 : 0.0, double(excluded),
                        "trials=" + std::to_string(trials)});
    res.summary["problems"][name] = {{"max_rel_error", worst},
                                     {"tol", tol},
                                     {"failed", failed},
                                     {"excluded", excluded},
                                     {"excluded_fraction", double(excluded) / trials},
                                     {"pass", pass}};
    text << name << ": max rel error " << worst << " (tol " << tol << "), " << failed << " failed, " << excluded
         << "/" << trials << " excluded -> " << (pass ? "pass" : "FAIL") << "\n";
  }
  res.summary["pass"] = all_pass;
  res.text = text.str();
  res.exit_code = all_pass ? kExitOk : kExitAcceptance;
  return res;
}

// ---------------------------------------------------------------------------
// bench-essential

inline constexpr double kRequiredSpeedup = 5.0;

inline CommandResult run_bench_essential(const ExperimentConfig& cfg) {
  const int trials = cfg.trials.value_or(1000);
  if (trials < 100) throw UsageError("bench-essential needs at least 100 trials");

  CommandResult res;
  res.report.header = {"trial",    "candidates", "attempts",   "rank_failure", "fd_excluded",
                       "forward_ms", "ift_ms",     "fd_ms"};
  std::vector<double> fwd, ift, fd;
  int unstable = 0;
  for (int t = 0; t < trials; ++t) {
    const std::uint64_t seed = derive_seed(cfg.seed, t);
    const auto inst = synthetic::make_minimal_sample(seed);
    auto t0 = std::chrono::steady_clock::now();
    const auto set = solvers::solve_essential_5pt(inst.matches);
    const double fwd_ms = elapsed_ms(t0);
    const auto sel = solvers::select_closest(std::span<const Matrix3d>(set.candidates), inst.e_gt);

    std::mt19937_64 rng(derive_seed(seed, 2));
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix3d upper;
    for (int i = 0; i < 9; ++i) upper(i / 3, i % 3) = gauss(rng);

    bool rank_failure = false;
    int attempts = 0;
    t0 = std::chrono::steady_clock::now();
    try {
      const auto ej = backward::essential_solution_jacobian(sel.model, inst.matches, rng);
      const Vector g = ej.dEdw.transpose() * numerics::vec(upper);
      numerics::require_finite(g, "essential gradient");
      attempts = ej.attempts;
    } catch (const Error& err) {
      if (err.code() != ErrorCode::kRankDeficient) throw;
      rank_failure = true;
      attempts = backward::kDefaultMaxRetries + 1;
    }
    const double ift_ms = elapsed_ms(t0);

    bool fd_excluded = false;
    t0 = std::chrono::steady_clock::now();
    try {
      const Vector g = backward::fd_essential(inst.matches, sel.model).transpose() * numerics::vec(upper);
      numerics::require_finite(g, "finite-difference gradient");
    } catch (const Error& err) {
      if (err.code() != ErrorCode::kTrackingFailure) throw;
      fd_excluded = true;
    }
    const double fd_ms = elapsed_ms(t0);

    unstable += rank_failure;
    fwd.push_back(fwd_ms);
    if (!rank_failure) ift.push_back(ift_ms);
    if (!fd_excluded) fd.push_back(fd_ms);
    res.report.add_row({double(t), double(set.candidates.size()), double(attempts), rank_failure ? 1.0 : 0.0,
                        fd_excluded ? 1.0 : 0.0, fwd_ms, ift_ms, fd_ms});
  }
  const double stability = 100.0 * (trials - unstable) / trials;
  const double med_ift = median(ift);
  const double med_fd = median(fd);
  const double speedup = med_fd / med_ift;
  const bool pass = unstable == 0 && speedup >= kRequiredSpeedup;
  res.summary = {{"command", "bench-essential"},
                 {"trials", trials},
                 {"seed", cfg.seed},
                 {"stability_percent", stability},
                 {"median_forward_ms", median(fwd)},
                 {"median_ift_ms", med_ift},
                 {"median_fd_ms", med_fd},
                 {"speedup_fd_over_ift", speedup},
                 {"fd_excluded", trials - static_cast<int>(fd.size())},
                 {"pass", pass}};
  std::ostringstream text;
  text << "bench-essential: " << trials << " trials, stability " << stability << "%, median forward "
       << median(fwd) << " ms, ift " << med_ift << " ms, fd " << med_fd << " ms, speedup " << speedup << "x\n";
  res.text = text.str();
  res.exit_code = pass ? kExitOk : kExitAcceptance;
  return res;
}

}  // namespace minbackprop::experiments
