// Command-line front end: mesh, simulate, fit, predict, select, diagnose.
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
// failure. Failures print a one-line machine-readable JSON record to stderr.

#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "nestedspde/run_commands.hpp"
#include "nestedspde/types.hpp"
#include "nestedspde/version.hpp"

namespace {

int fail(const char* type, int code, const std::string& message) {
  nlohmann::json record = {
      {"error",
       {{"type", type}, {"exit_code", code}, {"message", message}}}};
  std::cerr << record.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string("nested SPDE random fields on meshes (version ") +
               nspde::kVersion + ")"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 1;

  const std::pair<const char*, const char*> commands[] = {
      {"mesh", "Build or load the mesh and write it to the output directory"},
      {"simulate", "Draw field realizations at the mesh nodes"},
      {"fit", "Estimate model parameters from an observation file"},
      {"predict", "Kriging mean and standard deviation at query locations"},
      {"select", "Fit a list of models and rank them by BIC"},
      {"diagnose", "Residual covariance and per-node residual summaries"},
  };
  for (const auto& [name, description] : commands) {
    CLI::App* sub = app.add_subcommand(name, description);
    sub->add_option("--config", config_path, "Configuration file (JSON)")
        ->required();
    sub->add_option("--seed", seed, "Override the config seed")
        ->each([&](const std::string&) { seed_given = true; });
    sub->add_option("--out", out_dir, "Output directory (default: .)");
    sub->add_option("--threads", threads,
                    "Concurrent fits for select (default: 1)")
        ->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("config", 2, e.what());
  }

  try {
    nspde::RunContext ctx;
    ctx.config = nspde::load_run_config(config_path);
    if (seed_given) ctx.config.seed = seed;
    ctx.out_dir = out_dir;
    ctx.threads = threads;

    if (app.got_subcommand("mesh")) nspde::run_mesh(ctx);
    else if (app.got_subcommand("simulate")) nspde::run_simulate(ctx);
    else if (app.got_subcommand("fit")) nspde::run_fit(ctx);
    else if (app.got_subcommand("predict")) nspde::run_predict(ctx);
    else if (app.got_subcommand("select")) nspde::run_select(ctx);
    else if (app.got_subcommand("diagnose")) nspde::run_diagnose(ctx);
    return 0;
  } catch (const nspde::ConfigError& e) {
    return fail("config", 2, e.what());
  } catch (const nspde::DataError& e) {
    return fail("data", 3, e.what());
  } catch (const nspde::NumericError& e) {
    return fail("numeric", 4, e.what());
  } catch (const std::exception& e) {
    return fail("internal", 1, e.what());
  }
}
