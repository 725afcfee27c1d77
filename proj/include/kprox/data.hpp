#pragma once

#include "kprox/io.hpp"
#include "kprox/numcore.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace kprox {

/// Time-ordered samples: X is N x D, y has length N.
struct TabularDataset
{
  Matrix X;
  Vector y;
  std::vector<std::string> column_names; // feature names
  std::string label_name = "y";
  bool time_ordered = true;

  std::size_t size() const { return static_cast<std::size_t>(X.rows()); }
  std::size_t num_features() const { return static_cast<std::size_t>(X.cols()); }

  void validate() const
  {
    detail::require(X.rows() == y.size(), "dataset: feature and label row counts differ");
    detail::require(column_names.empty() || column_names.size() == num_features(),
                    "dataset: column name count does not match feature count");
    detail::require(X.allFinite() && y.allFinite(), "dataset: non-finite entries");
  }

  TabularDataset rows(std::size_t begin, std::size_t end) const
  {
    TabularDataset out;
    const auto b = static_cast<Eigen::Index>(begin);
    const auto n = static_cast<Eigen::Index>(end - begin);
    out.X = X.middleRows(b, n);
    out.y = y.segment(b, n);
    out.column_names = column_names;
    out.label_name = label_name;
    out.time_ordered = time_ordered;
    return out;
  }
};

// ---------------------------------------------------------------------------
// Delimited text
// ---------------------------------------------------------------------------

struct TableFormat
{
  // ',' for CSV; '\0' splits on runs of whitespace.
  char delimiter = ',';
  // Column holding the label; negative counts from the end (-1 = last).
  int label_column = -1;
};

namespace detail {

inline std::vector<std::string> split_line(const std::string& line, char delim)
{
  std::vector<std::string> cells;
  if (delim == '\0') {
    std::istringstream ss(line);
    std::string cell;
    while (ss >> cell)
      cells.push_back(cell);
  } else {
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, delim))
      cells.push_back(cell);
    if (!line.empty() && line.back() == delim)
      cells.emplace_back();
  }
  return cells;
}

inline bool blank(const std::string& s)
{
  return s.find_first_not_of(" \t\r") == std::string::npos;
}

} // namespace detail

/// Reads a rectangular numeric table; rows are kept in file order. A first line
/// with no numeric cell is taken as a header. Errors name the 1-based file row
/// and column.
inline TabularDataset parse_table(std::istream& in, const TableFormat& fmt,
                                  const std::string& source = "<stream>")
{
  std::vector<std::vector<double>> rows;
  std::vector<std::string> header;
  std::string line;
  std::size_t lineno = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    if (detail::blank(line))
      continue;
    auto cells = detail::split_line(line, fmt.delimiter);
    if (rows.empty() && header.empty()) {
      bool any_numeric = false;
      for (const auto& c : cells)
        any_numeric = any_numeric || parse_double(c).has_value();
      if (!any_numeric) {
        header = cells;
        width = cells.size();
        continue;
      }
    }
    if (width == 0)
      width = cells.size();
    if (cells.size() != width)
      throw InputError(source + ": row " + std::to_string(lineno) + " has " +
                       std::to_string(cells.size()) + " cells, expected " +
                       std::to_string(width));
    std::vector<double> vals(width);
    for (std::size_t c = 0; c < width; ++c) {
      auto v = parse_double(cells[c]);
      if (!v || !std::isfinite(*v))
        throw InputError(source + ": row " + std::to_string(lineno) + ", column " +
                         std::to_string(c + 1) + ": non-numeric cell '" + cells[c] + "'");
      vals[c] = *v;
    }
    rows.push_back(std::move(vals));
  }
  if (rows.empty())
    throw InputError(source + ": no data rows");
  if (width < 2)
    throw InputError(source + ": need at least one feature column and a label column");

  const int lc = fmt.label_column < 0 ? static_cast<int>(width) + fmt.label_column
                                      : fmt.label_column;
  if (lc < 0 || lc >= static_cast<int>(width))
    throw InputError(source + ": label column " + std::to_string(fmt.label_column) +
                     " out of range for " + std::to_string(width) + " columns");
  const auto label = static_cast<std::size_t>(lc);

  TabularDataset ds;
  ds.X.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width - 1));
  ds.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    Eigen::Index k = 0;
    for (std::size_t c = 0; c < width; ++c) {
      if (c == label)
        ds.y[static_cast<Eigen::Index>(r)] = rows[r][c];
      else
        ds.X(static_cast<Eigen::Index>(r), k++) = rows[r][c];
    }
  }
  for (std::size_t c = 0; c < width; ++c) {
    std::string name = header.empty() ? (c == label ? "y" : "x" + std::to_string(c)) : header[c];
    if (c == label)
      ds.label_name = name;
    else
      ds.column_names.push_back(name);
  }
  return ds;
}

inline TabularDataset load_table(const std::filesystem::path& path, const TableFormat& fmt = {})
{
  std::ifstream in(path);
  if (!in)
    throw InputError("cannot open data file '" + path.string() + "'");
  return parse_table(in, fmt, path.string());
}

/// Features then label, comma separated, with a header row.
inline void write_table_csv(std::ostream& out, const TabularDataset& ds)
{
  for (std::size_t c = 0; c < ds.num_features(); ++c)
    out << (ds.column_names.empty() ? "x" + std::to_string(c) : ds.column_names[c]) << ',';
  out << ds.label_name << '\n';
  for (Eigen::Index r = 0; r < ds.X.rows(); ++r) {
    for (Eigen::Index c = 0; c < ds.X.cols(); ++c)
      out << format_double(ds.X(r, c)) << ',';
    out << format_double(ds.y[r]) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Debutanizer lagged features
// ---------------------------------------------------------------------------

inline constexpr std::size_t kDbcRawInputs = 7;
inline constexpr std::size_t kDbcFeatures = 13;
inline constexpr std::size_t kDbcMaxLag = 4;

/// [U1..U5, U5(t-1..t-3), (U1+U2)/2, Y(t-1..t-4)] with label Y(t). Only past
/// values are referenced, so the first emitted row is raw index 4.
inline TabularDataset build_dbc_features(const TabularDataset& raw)
{
  detail::require(raw.num_features() == kDbcRawInputs,
                  "build_dbc_features: expected 7 process inputs, got " +
                    std::to_string(raw.num_features()));
  detail::require(raw.size() > kDbcMaxLag,
                  "build_dbc_features: need at least 5 rows, got " + std::to_string(raw.size()));
  const auto n_out = static_cast<Eigen::Index>(raw.size() - kDbcMaxLag);
  TabularDataset ds;
  ds.X.resize(n_out, static_cast<Eigen::Index>(kDbcFeatures));
  ds.y.resize(n_out);
  const auto& U = raw.X;
  for (Eigen::Index r = 0; r < n_out; ++r) {
    const Eigen::Index t = r + static_cast<Eigen::Index>(kDbcMaxLag);
    auto row = ds.X.row(r);
    for (Eigen::Index k = 0; k < 5; ++k)
      row[k] = U(t, k);
    row[5] = U(t - 1, 4);
    row[6] = U(t - 2, 4);
    row[7] = U(t - 3, 4);
    row[8] = 0.5 * (U(t, 0) + U(t, 1));
    for (Eigen::Index k = 0; k < 4; ++k)
      row[9 + k] = raw.y[t - 1 - k];
    ds.y[r] = raw.y[t];
  }
  ds.column_names = {"u1", "u2", "u3", "u4", "u5", "u5_lag1", "u5_lag2", "u5_lag3",
                     "u1u2_mean", "y_lag1", "y_lag2", "y_lag3", "y_lag4"};
  ds.label_name = raw.label_name;
  ds.time_ordered = true;
  return ds;
}

// ---------------------------------------------------------------------------
// Chronological split
// ---------------------------------------------------------------------------

struct SplitSpec
{
  double train_frac = 0.6;
  double valid_frac = 0.2;
};

struct DataSplits
{
  TabularDataset train;
  TabularDataset valid;
  TabularDataset test;
};

/// Contiguous prefix / middle / suffix with boundaries floor(N f_train) and
/// floor(N (f_train + f_valid)).
inline DataSplits split_chronological(const TabularDataset& ds, const SplitSpec& spec = {})
{
  detail::require(ds.time_ordered, "split_chronological: dataset is not time ordered");
  detail::require(spec.train_frac > 0.0 && spec.valid_frac > 0.0 &&
                    spec.train_frac + spec.valid_frac < 1.0,
                  "split_chronological: fractions must be positive and sum below 1");
  const std::size_t n = ds.size();
  // The relative nudge keeps e.g. 10 * 0.6 from flooring to 5.
  auto cut = [n](double f) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f * (1.0 + 1e-12)));
  };
  const std::size_t a = cut(spec.train_frac);
  const std::size_t b = cut(spec.train_frac + spec.valid_frac);
  if (a == 0 || b <= a || b >= n)
    throw InputError("split_chronological: " + std::to_string(n) +
                     " rows leave an empty partition");
  return {ds.rows(0, a), ds.rows(a, b), ds.rows(b, n)};
}

// ---------------------------------------------------------------------------
// Standardisation
// ---------------------------------------------------------------------------

/// Per-column mean / population std fitted on training rows only.
struct Standardizer
{
  Vector x_mean;
  Vector x_std;
  double y_mean = 0.0;
  double y_std = 1.0;

  TabularDataset apply(const TabularDataset& ds) const
  {
    detail::require(ds.X.cols() == x_mean.size(), "standardizer: feature count mismatch");
    TabularDataset out = ds;
    out.X = ((ds.X.rowwise() - x_mean.transpose()).array().rowwise() /
             x_std.transpose().array())
              .matrix();
    out.y = ((ds.y.array() - y_mean) / y_std).matrix();
    return out;
  }

  TabularDataset invert(const TabularDataset& ds) const
  {
    TabularDataset out = ds;
    out.X = ((ds.X.array().rowwise() * x_std.transpose().array()).rowwise() +
             x_mean.transpose().array())
              .matrix();
    out.y = (ds.y.array() * y_std + y_mean).matrix();
    return out;
  }

  double label_to_original(double v) const { return v * y_std + y_mean; }
  double label_to_standard(double v) const { return (v - y_mean) / y_std; }
};

inline Standardizer fit_standardizer(const TabularDataset& train)
{
  detail::require(train.size() >= 2, "fit_standardizer: need at least two rows");
  Standardizer s;
  s.x_mean = train.X.colwise().mean().transpose();
  s.x_std = ((train.X.rowwise() - s.x_mean.transpose()).array().square().colwise().mean())
              .sqrt()
              .matrix()
              .transpose();
  for (Eigen::Index c = 0; c < s.x_std.size(); ++c) {
    if (!(s.x_std[c] > 0.0)) {
      const std::string name = train.column_names.empty()
                                 ? "#" + std::to_string(c)
                                 : train.column_names[static_cast<std::size_t>(c)];
      throw InputError("fit_standardizer: feature column '" + name +
                       "' is constant on the training split");
    }
  }
  s.y_mean = train.y.mean();
  s.y_std = std::sqrt((train.y.array() - s.y_mean).square().mean());
  if (!(s.y_std > 0.0))
    throw InputError("fit_standardizer: label column '" + train.label_name +
                     "' is constant on the training split");
  return s;
}

inline TabularDataset apply_standardizer(const Standardizer& s, const TabularDataset& ds)
{
  return s.apply(ds);
}

inline nlohmann::json to_json(const Standardizer& s)
{
  return {{"x_mean", std::vector<double>(s.x_mean.data(), s.x_mean.data() + s.x_mean.size())},
          {"x_std", std::vector<double>(s.x_std.data(), s.x_std.data() + s.x_std.size())},
          {"y_mean", s.y_mean},
          {"y_std", s.y_std}};
}

inline Standardizer standardizer_from_json(const nlohmann::json& j)
{
  Standardizer s;
  auto m = j.at("x_mean").get<std::vector<double>>();
  auto d = j.at("x_std").get<std::vector<double>>();
  s.x_mean = Eigen::Map<Vector>(m.data(), static_cast<Eigen::Index>(m.size()));
  s.x_std = Eigen::Map<Vector>(d.data(), static_cast<Eigen::Index>(d.size()));
  s.y_mean = j.at("y_mean").get<double>();
  s.y_std = j.at("y_std").get<double>();
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic regression data
// ---------------------------------------------------------------------------

inline constexpr double kToyWeights[4] = {1.0, -0.8, 0.6, 0.5};
inline constexpr double kToySineScale = 0.5;

/// x ~ N(0, I_4), y = w.x + 0.5 sin(x_0 x_1) + noise * N(0, 1).
/// The sine term is uncorrelated with every x_k, so least squares on x
/// recovers w.
inline TabularDataset make_toy_regression(std::uint64_t seed, std::size_t n, double noise = 0.05)
{
  detail::require(n >= 1, "make_toy_regression: need at least one sample");
  Rng rng = make_rng(seed, "toy-regression");
  std::normal_distribution<double> g(0.0, 1.0);
  TabularDataset ds;
  ds.X.resize(static_cast<Eigen::Index>(n), 4);
  ds.y.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(n); ++r) {
    double lin = 0.0;
    for (Eigen::Index k = 0; k < 4; ++k) {
      ds.X(r, k) = g(rng);
      lin += kToyWeights[k] * ds.X(r, k);
    }
    const double eps = g(rng);
    ds.y[r] = lin + kToySineScale * std::sin(ds.X(r, 0) * ds.X(r, 1)) + noise * eps;
  }
  ds.column_names = {"x0", "x1", "x2", "x3"};
  ds.label_name = "y";
  return ds;
}

} // namespace kprox
