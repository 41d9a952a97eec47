#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "ddc/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Deep data consistency: train denoisers and consistency networks, restore degraded images"};
  app.require_subcommand(1);

  struct Raw {
    std::string config;
    std::uint64_t seed = 0;
    std::string strategy, out, axis;
    std::size_t steps = 0, synthetic = 0;
    double sigma = 0;
  } raw;

  auto add_common = [&](CLI::App* sub, bool sampling) {
    sub->add_option("--config", raw.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", raw.seed, "master seed override");
    sub->add_option("--synthetic", raw.synthetic, "use N generated images instead of a dataset directory")
        ->check(CLI::PositiveNumber);
    sub->add_option("--out", raw.out, "output directory override");
    if (sampling) {
      sub->add_option("--strategy", raw.strategy, "consistency strategy")
          ->check(CLI::IsMember({"ddc", "dps", "ddnm", "none"}));
      sub->add_option("--steps", raw.steps, "number of sampling steps")->check(CLI::PositiveNumber);
      sub->add_option("--sigma", raw.sigma, "measurement noise standard deviation")
          ->check(CLI::NonNegativeNumber);
    }
  };

  add_common(app.add_subcommand("train-denoiser", "train the unconditional noise predictor"), false);
  add_common(app.add_subcommand("train-ddc", "train the consistency network against a frozen denoiser"), false);
  add_common(app.add_subcommand("solve", "restore degraded evaluation images"), true);
  add_common(app.add_subcommand("diagnose-kurtosis", "record noise-prediction kurtosis along sampling"), true);
  auto* sweep = app.add_subcommand("sweep", "evaluate over a grid of steps or noise levels");
  add_common(sweep, true);
  sweep->add_option("--axis", raw.axis, "sweep axis")->check(CLI::IsMember({"steps", "sigma"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ddc::kExitOk : ddc::kExitValidation;
  }

  CLI::App* sub = app.get_subcommands().front();
  ddc::CommandOptions o;
  o.config_path = raw.config;
  auto given = [&](const char* name) { return sub->get_option_no_throw(name) && sub->count(name) > 0; };
  if (given("--seed")) o.seed = raw.seed;
  if (given("--synthetic")) o.synthetic = raw.synthetic;
  if (given("--out")) o.out = raw.out;
  if (given("--strategy")) o.strategy = raw.strategy;
  if (given("--steps")) o.steps = raw.steps;
  if (given("--sigma")) o.sigma = raw.sigma;
  if (given("--axis")) o.axis = raw.axis;
  return ddc::run_command(sub->get_name(), o);
}
