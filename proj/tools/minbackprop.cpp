// minbackprop: desk-scale experiments and checks for the backward passes.

#include <cstdint>
#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "minbackprop/experiments.hpp"

namespace ex = minbackprop::experiments;
using minbackprop::Error;
using minbackprop::ErrorCode;

namespace {

struct Flags {
  std::uint64_t seed = 0;
  std::string out;
  std::string json;
  std::string config;
  int iters = 30;
  double lr = 0.0;
  std::string backward;
  int trials = 0;
  double tol = 0.0;
  std::string problem;
  double corruption = 0.0;
  bool corrupt = false;
};

template <typename T>
void from_file(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

template <typename T>
void from_file(const nlohmann::json& j, const char* key, std::optional<T>& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

struct Settings {
  ex::ExperimentConfig cfg;
  std::string out;
  std::string json;
};

// File values first, then any flag given on the command line.
Settings resolve(const CLI::App& sub, const Flags& f) {
  Settings s;
  auto given = [&](const char* name) {
    const CLI::Option* opt = sub.get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
  };
  if (!f.config.empty()) {
    const auto j = nlohmann::json::parse(minbackprop::report::read_text(f.config));
    if (!j.is_object()) throw ex::UsageError("config file must hold a JSON object");
    from_file(j, "seed", s.cfg.seed);
    from_file(j, "iters", s.cfg.iters);
    from_file(j, "lr", s.cfg.lr);
    from_file(j, "backward", s.cfg.backward);
    from_file(j, "trials", s.cfg.trials);
    from_file(j, "tol", s.cfg.tol);
    from_file(j, "problem", s.cfg.problem);
    from_file(j, "corruption", s.cfg.corruption);
    from_file(j, "corrupt", s.cfg.corrupt_system);
    from_file(j, "out", s.out);
    from_file(j, "json", s.json);
  }
  if (given("--seed")) s.cfg.seed = f.seed;
  if (given("--iters")) s.cfg.iters = f.iters;
  if (given("--lr")) s.cfg.lr = f.lr;
  if (given("--backward")) s.cfg.backward = f.backward;
  if (given("--trials")) s.cfg.trials = f.trials;
  if (given("--tol")) s.cfg.tol = f.tol;
  if (given("--problem")) s.cfg.problem = f.problem;
  if (given("--corruption")) s.cfg.corruption = f.corruption;
  if (given("--corrupt")) s.cfg.corrupt_system = f.corrupt;
  if (given("--out")) s.out = f.out;
  if (given("--json")) s.json = f.json;
  return s;
}

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--seed", f.seed, "random seed");
  sub->add_option("--out", f.out, "CSV report path");
  sub->add_option("--json", f.json, "JSON summary path");
  sub->add_option("--config", f.config, "JSON file with flag values")->check(CLI::ExistingFile);
}

void add_toy(CLI::App* sub, Flags& f) {
  sub->add_option("--iters", f.iters, "gradient descent iterations (default 30)");
  sub->add_option("--lr", f.lr, "learning rate");
  sub->add_option("--backward", f.backward, "kkt-ift | svd-closed-form | finite-difference");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backpropagation through minimal solvers: examples, toys and checks"};
  app.require_subcommand(1);
  Flags f;

  auto* p3p = app.add_subcommand("p3p-example", "Jacobians of the worked P3P example");
  add_common(p3p, f);
  p3p->add_flag("--corrupt", f.corrupt, "perturb J_a as a negative control");

  auto* reg = app.add_subcommand("toy-registration", "weight learning on the registration toy");
  add_common(reg, f);
  add_toy(reg, f);
  reg->add_option("--corruption", f.corruption, "offset applied to the first target point (default 1)");

  auto* fun = app.add_subcommand("toy-fundamental", "weight learning on the fundamental toy");
  add_common(fun, f);
  add_toy(fun, f);

  auto* gc = app.add_subcommand("gradcheck", "compare backward methods with finite differences");
  add_common(gc, f);
  gc->add_option("--problem", f.problem, "p3p | registration | fundamental | essential | all");
  gc->add_option("--trials", f.trials, "trials per problem (default 100)");
  gc->add_option("--tol", f.tol, "relative error tolerance (defaults 1e-5, fundamental 1e-3)");

  auto* bench = app.add_subcommand("bench-essential", "5-point backward timing and stability");
  add_common(bench, f);
  bench->add_option("--trials", f.trials, "minimal samples (default 1000)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ex::kExitOk : ex::kExitUsage;
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    const Settings s = resolve(*sub, f);
    std::function<ex::CommandResult(const ex::ExperimentConfig&)> run;
    if (sub == p3p) run = ex::run_p3p_example;
    if (sub == reg) run = ex::run_toy_registration;
    if (sub == fun) run = ex::run_toy_fundamental;
    if (sub == gc) run = ex::run_gradcheck;
    if (sub == bench) run = ex::run_bench_essential;

    const ex::CommandResult res = run(s.cfg);
    std::cout << res.text;
    if (!s.out.empty()) minbackprop::report::write_text(s.out, res.report.to_csv());
    if (!s.json.empty()) minbackprop::report::write_text(s.json, res.summary.dump(2) + "\n");
    return res.exit_code;
  } catch (const ex::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return ex::kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return ex::kExitUsage;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    const bool usage = e.code() == ErrorCode::kInvalidArgument || e.code() == ErrorCode::kDimensionMismatch;
    return usage ? ex::kExitUsage : ex::kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return ex::kExitNumerical;
  }
}
