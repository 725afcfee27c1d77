// kprox: sampler demos, two-stage training, sweeps, ablations and gradient checks.

#include "kprox/commands.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

using namespace kprox;

namespace {

struct CommonOptions
{
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/latest";
  std::string dataset = "toy";
  std::string preset;
  std::vector<std::string> overrides;
  int label_col = -1;
  std::optional<std::size_t> epochs;
};

nlohmann::json read_config_file(const std::string& path)
{
  if (path.empty())
    return nlohmann::json::object();
  nlohmann::json j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw InputError("config file '" + path + "' is not a JSON object");
  return j;
}

// preset < config file < --epochs < --seed < --set
TrainConfig resolve_train_config(const CommonOptions& o, const DatasetSpec& ds)
{
  const Preset preset = o.preset.empty() ? default_preset(ds) : preset_from_string(o.preset);
  TrainConfig cfg = train_config_from_json(read_config_file(o.config_path), preset_config(preset));
  if (o.epochs) {
    cfg.epochs_generative = *o.epochs;
    cfg.epochs_inference = *o.epochs;
  }
  if (o.seed)
    cfg.seed = *o.seed;
  for (const auto& s : o.overrides)
    cfg = apply_override(cfg, s);
  cfg.validate();
  return cfg;
}

DatasetSpec resolve_dataset(const CommonOptions& o)
{
  DatasetSpec ds = parse_dataset_spec(o.dataset);
  ds.label_column = o.label_col;
  return ds;
}

std::vector<double> parse_values(const std::string& s)
{
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto v = parse_double(tok);
    if (!v)
      throw InputError("sweep value '" + tok + "' is not a number");
    out.push_back(*v);
  }
  return out;
}

void print_report(const char* label, const MetricReport& r)
{
  std::cout << label << ": r2=" << format_double(r.r2) << " rmse=" << format_double(r.rmse)
            << " mae=" << format_double(r.mae)
            << " mape=" << (r.mape ? format_double(*r.mape) + "%" : std::string("undefined"))
            << " n=" << r.n << " (" << to_string(r.label_space) << ")\n";
}

} // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Kernelized Wasserstein-proximal latent variable model toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  CommonOptions o;
  app.add_option("--config", o.config_path, "JSON file with configuration fields");
  app.add_option("--seed", o.seed, "master seed");
  app.add_option("--out", o.out, "output directory")->capture_default_str();
  app.add_option("--dataset", o.dataset, "toy | dbc | dbc:<path> | csv:<path>")
    ->capture_default_str();
  app.add_option("--preset", o.preset, "desk | paper | toy (default: toy for toy data, desk otherwise)");
  app.add_option("--set", o.overrides, "field override key=value (repeatable)");
  app.add_option("--label-col", o.label_col, "label column for csv data (negative counts from the end)")
    ->capture_default_str();

  auto* demo = app.add_subcommand("demo-posterior", "sampler on the bimodal toy target");
  auto* train = app.add_subcommand("train", "two-stage training and test evaluation");
  train->add_option("--epochs", o.epochs, "epochs for both stages");
  auto* sweep = app.add_subcommand("sweep", "one training run per parameter value");
  std::string sweep_param;
  std::string sweep_values;
  sweep->add_option("--param", sweep_param, "epsilon | batch_size | encoder_lr | particles")
    ->required();
  sweep->add_option("--values", sweep_values, "comma-separated values")->required();
  auto* ablate = app.add_subcommand("ablate", "full model against no_kprox and no_wass");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of all gradients");
  GradCheckOptions gopt;
  grad->add_option("--instances", gopt.instances, "random instances per check")->capture_default_str();
  grad->add_option("--corrupt", gopt.corrupt, "perturb one analytic gradient (testing hook)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (demo->parsed()) {
      DemoConfig cfg = demo_config_from_json(read_config_file(o.config_path));
      if (o.seed)
        cfg.seed = *o.seed;
      for (const auto& s : o.overrides)
        cfg = apply_demo_override(cfg, s);
      RunRecorder rec("demo-posterior", o.out, to_json(cfg), cfg.seed);
      const DemoResult res = cmd_demo_posterior(cfg, rec);
      for (const auto& r : res.runs)
        std::cout << r.init << ": W2 " << format_double(r.initial_w2()) << " -> "
                  << format_double(r.final_w2()) << ", mode masses " << format_double(r.left_mass)
                  << " / " << format_double(r.right_mass) << '\n';
      rec.finish(true);
      return 0;
    }

    if (grad->parsed()) {
      if (o.seed)
        gopt.seed = *o.seed;
      RunRecorder rec("gradcheck", o.out,
                      {{"instances", gopt.instances}, {"corrupt", gopt.corrupt}}, gopt.seed);
      const auto results = cmd_gradcheck(gopt, rec);
      bool ok = true;
      for (const auto& r : results) {
        std::cout << (r.passed ? "pass " : "FAIL ") << r.name << " max_rel_error="
                  << format_double(r.max_rel_error) << " tol=" << format_double(r.tolerance)
                  << " instances=" << r.instances << '\n';
        ok = ok && r.passed;
      }
      rec.finish(ok);
      return ok ? 0 : 1;
    }

    const DatasetSpec ds = resolve_dataset(o);
    const TrainConfig cfg = resolve_train_config(o, ds);

    if (train->parsed()) {
      RunRecorder rec("train", o.out, to_json(cfg), cfg.seed);
      const TrainOutcome out = cmd_train(ds, cfg, rec);
      std::cout << "dataset " << dataset_name(ds) << ": " << out.splits.train.size() << "/"
                << out.splits.valid.size() << "/" << out.splits.test.size()
                << " rows, best epoch " << out.result.best_epoch << '\n';
      print_report("test", out.result.test_standardized);
      print_report("test", out.result.test_original);
      if (ds.kind == DatasetKind::dbc)
        std::cout << "note: lagged label features use measured past labels\n";
      rec.finish(true);
      return 0;
    }

    if (sweep->parsed()) {
      RunRecorder rec("sweep", o.out, to_json(cfg), cfg.seed);
      const auto rows = cmd_sweep(ds, cfg, sweep_param, parse_values(sweep_values), rec);
      bool ok = true;
      for (const auto& r : rows) {
        std::cout << sweep_param << "=" << format_double(r.value) << ": ";
        if (r.ok)
          std::cout << "r2=" << format_double(r.test.r2) << " rmse=" << format_double(r.test.rmse)
                    << '\n';
        else
          std::cout << "failed: " << r.error << '\n';
        ok = ok && r.ok;
      }
      rec.finish(ok);
      return ok ? 0 : 1;
    }

    if (ablate->parsed()) {
      RunRecorder rec("ablate", o.out, to_json(cfg), cfg.seed);
      const auto rows = cmd_ablate(ds, cfg, rec);
      for (const auto& r : rows)
        std::cout << to_string(r.mode) << ": r2=" << format_double(r.test.r2)
                  << " rmse=" << format_double(r.test.rmse)
                  << " r2_degradation=" << format_double(r.r2_degradation_pct) << "%\n";
      rec.finish(true);
      return 0;
    }
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
