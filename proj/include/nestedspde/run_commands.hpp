#pragma once

#include <string>

#include "nestedspde/config.hpp"

namespace nspde {

// One command invocation: the parsed config plus command-line settings.
struct RunContext {
  RunConfig config;
  std::string out_dir = ".";
  int threads = 1;
};

// Each command reads what it needs from the config, writes its artifacts
// into out_dir (created on demand, fixed file names, atomic writes), and
// throws ConfigError / DataError / NumericError on failure. Every output
// carries a header echoing the config hash and software version. Outputs are
// deterministic functions of (config, seed).

// mesh.txt
void run_mesh(const RunContext& ctx);

// simulation.tsv: one node-value column per seed; optionally a synthetic
// observation file drawn from replicate 0.
void run_simulate(const RunContext& ctx);

// fitted_parameters.tsv (packed estimates by name, trend coefficients,
// log marginal posterior, AIC, BIC, convergence flag) and fit_log.tsv
// (objective per stage).
void run_fit(const RunContext& ctx);

// predictions.tsv: query location, posterior mean, posterior sd.
void run_predict(const RunContext& ctx);

// model_selection.tsv sorted by BIC plus per-model parameter files. Models
// are fitted in config order; when an earlier model's structure nests inside
// a later one, the later fit starts from the earlier estimates. Individual
// failures are recorded in the header and ranking proceeds over successes.
void run_select(const RunContext& ctx);

// residual_covariance.tsv (binned residual covariance against distance) and
// node_residuals.tsv (per-node pooled residual mean/sd).
void run_diagnose(const RunContext& ctx);

}  // namespace nspde
