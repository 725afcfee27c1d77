#pragma once

#include "kprox/gradcheck.hpp"
#include "kprox/train.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace kprox {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Dataset selection
// ---------------------------------------------------------------------------

enum class DatasetKind { toy, dbc, csv };

struct DatasetSpec
{
  DatasetKind kind = DatasetKind::toy;
  std::string path;      // dbc or csv file; empty selects the dbc default lookup
  int label_column = -1; // csv only
  std::size_t toy_rows = 1000;
};

inline constexpr const char* kDbcDefaultPath = "data/debutanizer_data.txt";

/// "toy", "dbc", "dbc:<path>" or "csv:<path>".
inline DatasetSpec parse_dataset_spec(const std::string& s)
{
  DatasetSpec d;
  if (s == "toy")
    return d;
  if (s == "dbc") {
    d.kind = DatasetKind::dbc;
    return d;
  }
  if (s.rfind("dbc:", 0) == 0 || s.rfind("csv:", 0) == 0) {
    d.kind = s[0] == 'd' ? DatasetKind::dbc : DatasetKind::csv;
    d.path = s.substr(4);
    detail::require(!d.path.empty(), "dataset '" + s + "' names no file");
    return d;
  }
  throw InputError("unknown dataset '" + s + "' (expected toy, dbc, dbc:<path> or csv:<path>)");
}

inline std::string dataset_name(const DatasetSpec& d)
{
  switch (d.kind) {
  case DatasetKind::toy: return "toy";
  case DatasetKind::dbc: return "dbc";
  case DatasetKind::csv: return "csv";
  }
  return "unknown";
}

/// Explicit path, then KPROX_DBC_PATH, then data/debutanizer_data.txt.
inline fs::path resolve_dbc_path(const DatasetSpec& d)
{
  if (!d.path.empty())
    return d.path;
  if (const char* env = std::getenv("KPROX_DBC_PATH"); env && *env)
    return env;
  return kDbcDefaultPath;
}

/// Raw debutanizer table: seven process inputs then the butane label,
/// whitespace separated.
inline TabularDataset load_dbc_raw(const fs::path& path)
{
  if (!fs::exists(path))
    throw InputError("debutanizer data not found at '" + path.string() +
                     "'; pass --dataset dbc:<path> or set KPROX_DBC_PATH");
  TableFormat fmt;
  fmt.delimiter = '\0';
  fmt.label_column = -1;
  return load_table(path, fmt);
}

inline TabularDataset load_dataset(const DatasetSpec& d, std::uint64_t seed)
{
  switch (d.kind) {
  case DatasetKind::toy: return make_toy_regression(seed, d.toy_rows);
  case DatasetKind::dbc: return build_dbc_features(load_dbc_raw(resolve_dbc_path(d)));
  case DatasetKind::csv: {
    TableFormat fmt;
    fmt.label_column = d.label_column;
    return load_table(d.path, fmt);
  }
  }
  throw InputError("unknown dataset kind");
}

inline Preset default_preset(const DatasetSpec& d)
{
  return d.kind == DatasetKind::toy ? Preset::toy : Preset::desk;
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

inline std::string utc_timestamp(std::chrono::system_clock::time_point t)
{
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

/// Collects outputs of one command. metrics.json holds only deterministic
/// content; timing lives in manifest.json.
class RunRecorder
{
public:
  RunRecorder(std::string command, fs::path out_dir, nlohmann::json config, std::uint64_t seed)
    : command_(std::move(command)), out_(std::move(out_dir)), config_(std::move(config)),
      seed_(seed), start_(std::chrono::system_clock::now())
  {
    fs::create_directories(out_);
  }

  const fs::path& out_dir() const { return out_; }

  /// Opens `relative` under the output directory and records it.
  std::ofstream open(const fs::path& relative)
  {
    outputs_.push_back(relative.generic_string());
    return open_output(out_ / relative);
  }

  void write_json(const fs::path& relative, const nlohmann::json& j)
  {
    auto f = open(relative);
    f << j.dump(2) << '\n';
  }

  void finish(bool gates_passed)
  {
    const auto end = std::chrono::system_clock::now();
    nlohmann::json m;
    m["command"] = command_;
    m["seed"] = seed_;
    m["config"] = config_;
    m["config_hash"] = [&] {
      char buf[17];
      std::snprintf(buf, sizeof(buf), "%016llx",
                    static_cast<unsigned long long>(fnv1a(config_.dump())));
      return std::string(buf);
    }();
    m["started_at"] = utc_timestamp(start_);
    m["finished_at"] = utc_timestamp(end);
    m["elapsed_seconds"] = std::chrono::duration<double>(end - start_).count();
    m["threads"] = worker_count();
    m["gates_passed"] = gates_passed;
    std::vector<std::string> outs = outputs_;
    outs.push_back("manifest.json");
    m["outputs"] = outs;
    auto f = open_output(out_ / "manifest.json");
    f << m.dump(2) << '\n';
  }

private:
  std::string command_;
  fs::path out_;
  nlohmann::json config_;
  std::uint64_t seed_;
  std::chrono::system_clock::time_point start_;
  std::vector<std::string> outputs_;
};

// ---------------------------------------------------------------------------
// demo-posterior
// ---------------------------------------------------------------------------

struct DemoConfig
{
  std::size_t particles = 500;
  double epsilon = 0.1;
  std::size_t steps = 200;
  std::size_t record_every = 10;
  std::size_t reference_size = 100000;
  std::size_t kde_points = 401;
  double kernel_bandwidth = 1.0;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const DemoConfig& c)
{
  return {{"particles", c.particles},       {"epsilon", c.epsilon},
          {"steps", c.steps},               {"record_every", c.record_every},
          {"reference_size", c.reference_size}, {"kde_points", c.kde_points},
          {"kernel_bandwidth", c.kernel_bandwidth}, {"seed", c.seed}};
}

inline DemoConfig demo_config_from_json(const nlohmann::json& j, DemoConfig base = {})
{
  const nlohmann::json known = to_json(base);
  for (const auto& [k, v] : j.items())
    if (!known.contains(k))
      throw InputError("unknown demo config field '" + k + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key))
        field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("particles", base.particles);
    get("epsilon", base.epsilon);
    get("steps", base.steps);
    get("record_every", base.record_every);
    get("reference_size", base.reference_size);
    get("kde_points", base.kde_points);
    get("kernel_bandwidth", base.kernel_bandwidth);
    get("seed", base.seed);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed demo config: ") + e.what());
  }
  detail::require(base.particles >= 2, "demo: need at least two particles");
  detail::require(base.reference_size >= 2, "demo: reference set too small");
  detail::require(base.record_every >= 1, "demo: record_every must be >= 1");
  detail::require(base.kde_points >= 2, "demo: kde_points must be >= 2");
  return base;
}

inline DemoConfig apply_demo_override(const DemoConfig& cfg, const std::string& assignment)
{
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw InputError("override '" + assignment + "' is not of the form key=value");
  nlohmann::json value = nlohmann::json::parse(assignment.substr(eq + 1), nullptr, false);
  if (value.is_discarded())
    value = assignment.substr(eq + 1);
  return demo_config_from_json(nlohmann::json{{assignment.substr(0, eq), value}}, cfg);
}

struct DemoInitResult
{
  std::string init;
  std::vector<std::size_t> steps;
  std::vector<double> w2;
  double left_mass = 0.0;
  double right_mass = 0.0;
  std::vector<ParticleEnsemble> trajectory;

  double initial_w2() const { return w2.front(); }
  double final_w2() const { return w2.back(); }
};

struct DemoResult
{
  std::vector<double> reference;
  std::vector<DemoInitResult> runs;
};

inline std::vector<double> column0(const Matrix& m)
{
  return std::vector<double>(m.col(0).data(), m.col(0).data() + m.rows());
}

inline std::vector<double> mixture_reference(const GaussianMixture1D& target, std::size_t n,
                                             std::uint64_t seed)
{
  Rng rng = make_rng(seed, "demo-reference");
  std::vector<double> ref(n);
  for (auto& v : ref)
    v = target.sample(rng);
  return ref;
}

/// Sampler on the bimodal toy target from N(0, 1) and U(-0.5, 0.5) starts.
inline DemoResult run_demo_posterior(const DemoConfig& cfg)
{
  const GaussianMixture1D target = GaussianMixture1D::bimodal_toy();
  DemoResult res;
  res.reference = mixture_reference(target, cfg.reference_size, cfg.seed);
  KproxConfig k;
  k.epsilon = cfg.epsilon;
  k.steps = cfg.steps;
  k.kernel.bandwidth = cfg.kernel_bandwidth;
  const std::pair<std::string, InitSpec> inits[] = {
    {"gaussian", InitSpec::gaussian(0.0, 1.0, 1, cfg.particles)},
    {"uniform", InitSpec::uniform(-0.5, 0.5, 1, cfg.particles)}};
  for (const auto& [name, spec] : inits) {
    DemoInitResult r;
    r.init = name;
    const KproxRun run =
      kprox_run(init_ensemble(spec, derive_seed(cfg.seed, "demo-init-" + name)), target, k,
                cfg.record_every);
    r.trajectory = run.trajectory;
    for (const auto& snap : run.trajectory) {
      r.steps.push_back(snap.step_index);
      r.w2.push_back(wasserstein2_1d_exact(column0(snap.particles), res.reference));
    }
    const auto [left, right] = mode_masses(column0(run.final.particles), 0.0);
    r.left_mass = left;
    r.right_mass = right;
    res.runs.push_back(std::move(r));
  }
  return res;
}

inline nlohmann::json demo_metrics(const DemoResult& res, const DemoConfig& cfg)
{
  nlohmann::json j;
  j["command"] = "demo-posterior";
  j["config"] = to_json(cfg);
  for (const auto& r : res.runs)
    j["runs"][r.init] = {{"initial_w2", r.initial_w2()},
                         {"final_w2", r.final_w2()},
                         {"w2_ratio", r.final_w2() / r.initial_w2()},
                         {"left_mass", r.left_mass},
                         {"right_mass", r.right_mass}};
  return j;
}

/// Writes trajectory_<init>.csv, w2_<init>.csv, kde_<init>.csv (one density
/// column per recorded step), kde_target.csv and metrics.json.
inline DemoResult cmd_demo_posterior(const DemoConfig& cfg, RunRecorder& rec)
{
  DemoResult res = run_demo_posterior(cfg);
  const GaussianMixture1D target = GaussianMixture1D::bimodal_toy();
  const std::vector<double> grid = linspace(-5.0, 5.0, cfg.kde_points);
  {
    auto f = rec.open("kde_target.csv");
    f << "grid,target_density,reference_kde\n";
    const auto ref_kde = kde_1d(res.reference, grid);
    for (std::size_t g = 0; g < grid.size(); ++g)
      f << format_double(grid[g]) << ',' << format_double(target.pdf(grid[g])) << ','
        << format_double(ref_kde[g]) << '\n';
  }
  for (const auto& r : res.runs) {
    {
      auto f = rec.open("trajectory_" + r.init + ".csv");
      write_trajectory_csv(f, r.trajectory);
    }
    {
      auto f = rec.open("w2_" + r.init + ".csv");
      f << "step,w2\n";
      for (std::size_t i = 0; i < r.steps.size(); ++i)
        f << r.steps[i] << ',' << format_double(r.w2[i]) << '\n';
    }
    {
      std::vector<std::vector<double>> dens;
      for (const auto& snap : r.trajectory) {
        const auto xs = column0(snap.particles);
        // A collapsed snapshot has no spread for the default bandwidth.
        const bool flat = std::all_of(xs.begin(), xs.end(), [&](double v) { return v == xs[0]; });
        dens.push_back(flat ? kde_1d(xs, grid, 0.05) : kde_1d(xs, grid));
      }
      auto f = rec.open("kde_" + r.init + ".csv");
      f << "grid";
      for (auto s : r.steps)
        f << ",step_" << s;
      f << '\n';
      for (std::size_t g = 0; g < grid.size(); ++g) {
        f << format_double(grid[g]);
        for (const auto& d : dens)
          f << ',' << format_double(d[g]);
        f << '\n';
      }
    }
  }
  rec.write_json("metrics.json", demo_metrics(res, cfg));
  return res;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline nlohmann::json pipeline_metrics(const PipelineResult& r, const DataSplits& splits,
                                       const DatasetSpec& ds, const TrainConfig& cfg)
{
  nlohmann::json j;
  j["dataset"] = dataset_name(ds);
  j["ablation"] = to_string(cfg.ablation);
  j["config_hash"] = config_hash(cfg);
  j["n_train"] = splits.train.size();
  j["n_valid"] = splits.valid.size();
  j["n_test"] = splits.test.size();
  j["best_epoch"] = r.best_epoch;
  j["best_valid_sse"] = r.best_valid_sse;
  j["test"] = {{"standardized", to_json(r.test_standardized)},
               {"original", to_json(r.test_original)}};
  j["valid"] = to_json(r.valid_standardized);
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& l : r.logs)
    if (l.stage == "generative")
      curve.push_back(-l.loss);
  j["stage1_mean_loglik"] = curve;
  if (ds.kind == DatasetKind::dbc)
    j["note"] = "lagged label features at validation and test time use measured past labels";
  return j;
}

struct TrainOutcome
{
  PipelineResult result;
  DataSplits splits;
  nlohmann::json metrics;
};

inline TrainOutcome train_on(const DatasetSpec& ds, const TrainConfig& cfg)
{
  TrainOutcome o;
  o.splits = split_chronological(load_dataset(ds, cfg.seed));
  o.result = run_pipeline(o.splits, cfg);
  o.metrics = pipeline_metrics(o.result, o.splits, ds, cfg);
  return o;
}

/// checkpoint.json, metrics.json and logs/train.csv.
inline TrainOutcome cmd_train(const DatasetSpec& ds, const TrainConfig& cfg, RunRecorder& rec)
{
  TrainOutcome o = train_on(ds, cfg);
  rec.write_json("checkpoint.json", to_json(o.result.bundle));
  {
    auto f = rec.open("logs/train.csv");
    write_log_csv(f, o.result.logs);
  }
  nlohmann::json m = o.metrics;
  m["command"] = "train";
  m["config"] = to_json(cfg);
  rec.write_json("metrics.json", m);
  return o;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& sweep_parameters()
{
  static const std::vector<std::string> p{"epsilon", "batch_size", "encoder_lr", "particles"};
  return p;
}

inline TrainConfig with_sweep_value(TrainConfig cfg, const std::string& param, double v)
{
  auto count = [&](double x) {
    if (!(x >= 1.0) || x != std::floor(x))
      throw InputError(param + " must be a positive integer, got " + format_double(x));
    return static_cast<std::size_t>(x);
  };
  if (param == "epsilon")
    cfg.kprox_epsilon = v;
  else if (param == "batch_size")
    cfg.batch_size = count(v);
  else if (param == "encoder_lr")
    cfg.encoder_lr = v;
  else if (param == "particles")
    cfg.particles = count(v);
  else
    throw InputError("cannot sweep '" + param + "' (expected epsilon, batch_size, encoder_lr or particles)");
  cfg.validate();
  return cfg;
}

struct SweepRow
{
  double value = 0.0;
  bool ok = false;
  std::string error;
  MetricReport test;
};

/// One full run per value with a shared seed. A failing value is recorded
/// and the sweep moves on.
inline std::vector<SweepRow> cmd_sweep(const DatasetSpec& ds, const TrainConfig& cfg,
                                       const std::string& param, const std::vector<double>& values,
                                       RunRecorder& rec)
{
  detail::require(!values.empty(), "sweep: no values given");
  with_sweep_value(cfg, param, values.front()); // reject unknown names up front
  std::vector<SweepRow> rows;
  nlohmann::json runs = nlohmann::json::array();
  for (double v : values) {
    SweepRow row;
    row.value = v;
    nlohmann::json entry{{"value", v}};
    try {
      const TrainConfig c = with_sweep_value(cfg, param, v);
      const TrainOutcome o = train_on(ds, c);
      row.ok = true;
      row.test = o.result.test_standardized;
      entry["metrics"] = o.metrics;
    } catch (const std::exception& e) {
      row.error = e.what();
      entry["error"] = row.error;
    }
    runs.push_back(entry);
    rows.push_back(std::move(row));
  }
  {
    auto f = rec.open("sweep.csv");
    f << "param,value,status,r2,rmse,mae,mape,error\n";
    for (const auto& r : rows) {
      f << param << ',' << format_double(r.value) << ',' << (r.ok ? "ok" : "failed") << ',';
      if (r.ok)
        f << format_double(r.test.r2) << ',' << format_double(r.test.rmse) << ','
          << format_double(r.test.mae) << ','
          << (r.test.mape ? format_double(*r.test.mape) : std::string("undefined"));
      else
        f << ",,,";
      std::string err = r.error;
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      f << ',' << err << '\n';
    }
  }
  rec.write_json("metrics.json", {{"command", "sweep"},
                                  {"param", param},
                                  {"config", to_json(cfg)},
                                  {"dataset", dataset_name(ds)},
                                  {"runs", runs}});
  return rows;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblationRow
{
  AblationMode mode;
  MetricReport test;
  double r2_degradation_pct = 0.0;
  double rmse_degradation_pct = 0.0;
};

/// Full, no_kprox and no_wass with a shared seed. Degradations are relative
/// to the full model: (R2_full - R2) / |R2_full| and (RMSE - RMSE_full) / RMSE_full,
/// in percent.
inline std::vector<AblationRow> cmd_ablate(const DatasetSpec& ds, const TrainConfig& cfg,
                                           RunRecorder& rec)
{
  const DataSplits splits = split_chronological(load_dataset(ds, cfg.seed));
  std::vector<AblationRow> rows;
  nlohmann::json runs;
  for (AblationMode m : {AblationMode::full, AblationMode::no_kprox, AblationMode::no_wass}) {
    TrainConfig c = cfg;
    c.ablation = m;
    const PipelineResult r = run_pipeline(splits, c);
    rows.push_back({m, r.test_standardized, 0.0, 0.0});
    runs[to_string(m)] = pipeline_metrics(r, splits, ds, c);
  }
  const MetricReport& full = rows.front().test;
  for (auto& r : rows) {
    r.r2_degradation_pct = 100.0 * (full.r2 - r.test.r2) / std::abs(full.r2);
    r.rmse_degradation_pct = 100.0 * (r.test.rmse - full.rmse) / full.rmse;
  }
  {
    auto f = rec.open("ablation.csv");
    f << "mode,r2,rmse,mae,r2_degradation_pct,rmse_degradation_pct\n";
    for (const auto& r : rows)
      f << to_string(r.mode) << ',' << format_double(r.test.r2) << ','
        << format_double(r.test.rmse) << ',' << format_double(r.test.mae) << ','
        << format_double(r.r2_degradation_pct) << ',' << format_double(r.rmse_degradation_pct)
        << '\n';
  }
  rec.write_json("metrics.json", {{"command", "ablate"},
                                  {"config", to_json(cfg)},
                                  {"dataset", dataset_name(ds)},
                                  {"runs", runs}});
  return rows;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

inline std::vector<GradCheckResult> cmd_gradcheck(const GradCheckOptions& opt, RunRecorder& rec)
{
  const auto results = run_gradcheck(opt);
  auto f = rec.open("gradcheck.csv");
  f << "check,instances,max_rel_error,tolerance,status\n";
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : results) {
    f << r.name << ',' << r.instances << ',' << format_double(r.max_rel_error) << ','
      << format_double(r.tolerance) << ',' << (r.passed ? "pass" : "FAIL") << '\n';
    j.push_back({{"check", r.name},
                 {"instances", r.instances},
                 {"max_rel_error", r.max_rel_error},
                 {"tolerance", r.tolerance},
                 {"passed", r.passed}});
  }
  rec.write_json("metrics.json", {{"command", "gradcheck"}, {"checks", j}});
  return results;
}

} // namespace kprox
