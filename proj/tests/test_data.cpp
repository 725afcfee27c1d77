#include "kprox/data.hpp"
#include "kprox/parallel.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace kprox;

namespace {

TabularDataset parse(const std::string& text, TableFormat fmt = {})
{
  std::istringstream in(text);
  return parse_table(in, fmt);
}

TabularDataset ramp(std::size_t n)
{
  TabularDataset ds;
  ds.X.resize(static_cast<Eigen::Index>(n), 2);
  ds.y.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    ds.X(i, 0) = static_cast<double>(i);
    ds.X(i, 1) = static_cast<double>(i * i % 7);
    ds.y[i] = 0.5 * static_cast<double>(i);
  }
  return ds;
}

std::string error_of(const std::function<void()>& f)
{
  try {
    f();
  } catch (const InputError& e) {
    return e.what();
  }
  return {};
}

} // namespace

TEST(Rng, StreamsAreIndependentAndReproducible)
{
  EXPECT_EQ(derive_seed(1, "a", 0), derive_seed(1, "a", 0));
  EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
  EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
  EXPECT_NE(derive_seed(1, "a", 0), derive_seed(2, "a", 0));
  Rng r1 = make_rng(5, "s", 3), r2 = make_rng(5, "s", 3);
  EXPECT_EQ(r1(), r2());
}

TEST(LoadTable, CommaWithHeaderAndLabelLast)
{
  const auto ds = parse("a,b,target\n1,2,3\n4,5,6\n");
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.num_features(), 2u);
  EXPECT_EQ(ds.column_names, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ds.label_name, "target");
  EXPECT_EQ(ds.X(1, 1), 5.0);
  EXPECT_EQ(ds.y[0], 3.0);
}

TEST(LoadTable, WhitespaceWithoutHeader)
{
  TableFormat fmt;
  fmt.delimiter = '\0';
  const auto ds = parse("  1.5\t2  3\n\n4 5   6e-1\n", fmt);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.X(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(ds.y[1], 0.6);
}

TEST(LoadTable, LabelColumnSelectable)
{
  TableFormat fmt;
  fmt.label_column = 0;
  const auto ds = parse("9,1,2\n8,3,4\n", fmt);
  EXPECT_EQ(ds.y[0], 9.0);
  EXPECT_EQ(ds.X(1, 0), 3.0);
  fmt.label_column = 5;
  EXPECT_THROW(parse("9,1,2\n", fmt), InputError);
}

TEST(LoadTable, NonNumericCellNamesRowAndColumn)
{
  std::string text = "a,b,y\n";
  for (int r = 2; r <= 9; ++r)
    text += r == 7 ? "1,oops,3\n" : "1,2,3\n";
  const std::string msg = error_of([&] { parse(text); });
  EXPECT_NE(msg.find("row 7"), std::string::npos) << msg;
  EXPECT_NE(msg.find("column 2"), std::string::npos) << msg;
}

TEST(LoadTable, RaggedRowRejected)
{
  const std::string msg = error_of([] { parse("1,2,3\n4,5\n"); });
  EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
}

TEST(LoadTable, MissingFileRejected)
{
  const std::string msg = error_of([] { load_table("/nonexistent/kprox/data.csv"); });
  EXPECT_NE(msg.find("/nonexistent/kprox/data.csv"), std::string::npos);
}

TEST(LoadTable, EmptyFileRejected)
{
  EXPECT_THROW(parse("a,b\n"), InputError);
}

TEST(LoadTable, CsvRoundTripThroughFile)
{
  const auto ds = make_toy_regression(3, 25);
  const auto path = std::filesystem::temp_directory_path() / "kprox_roundtrip.csv";
  {
    std::ofstream out(path);
    write_table_csv(out, ds);
  }
  const auto back = load_table(path);
  EXPECT_EQ(back.X, ds.X);
  EXPECT_EQ(back.y, ds.y);
  EXPECT_EQ(back.column_names, ds.column_names);
  std::filesystem::remove(path);
}

TEST(DbcFeatures, LayoutAndLags)
{
  TabularDataset raw;
  raw.X.resize(8, 7);
  raw.y.resize(8);
  for (Eigen::Index t = 0; t < 8; ++t) {
    for (Eigen::Index k = 0; k < 7; ++k)
      raw.X(t, k) = 10.0 * static_cast<double>(k + 1) + static_cast<double>(t);
    raw.y[t] = 100.0 + static_cast<double>(t);
  }
  const auto ds = build_dbc_features(raw);
  ASSERT_EQ(ds.size(), 4u);
  ASSERT_EQ(ds.num_features(), 13u);
  // First row corresponds to raw index 4.
  const auto row = ds.X.row(0);
  for (Eigen::Index k = 0; k < 5; ++k)
    EXPECT_EQ(row[k], raw.X(4, k));
  EXPECT_EQ(row[5], raw.X(3, 4));
  EXPECT_EQ(row[6], raw.X(2, 4));
  EXPECT_EQ(row[7], raw.X(1, 4));
  EXPECT_EQ(row[8], 0.5 * (raw.X(4, 0) + raw.X(4, 1)));
  for (Eigen::Index k = 0; k < 4; ++k)
    EXPECT_EQ(row[9 + k], raw.y[3 - k]);
  EXPECT_EQ(ds.y[0], raw.y[4]);
  EXPECT_EQ(ds.y[3], raw.y[7]);
}

TEST(DbcFeatures, NoFutureValuesUsed)
{
  TabularDataset raw;
  raw.X = Matrix::Random(12, 7);
  raw.y = Vector::Random(12);
  const auto base = build_dbc_features(raw);
  // Perturbing the last raw row may only change the last feature row.
  auto moved = raw;
  moved.X.row(11).array() += 1.0;
  moved.y[11] += 1.0;
  const auto after = build_dbc_features(moved);
  EXPECT_EQ(base.X.topRows(7), after.X.topRows(7));
  EXPECT_EQ(base.y.head(7), after.y.head(7));
}

TEST(DbcFeatures, WrongWidthRejected)
{
  TabularDataset raw;
  raw.X = Matrix::Zero(10, 6);
  raw.y = Vector::Zero(10);
  EXPECT_THROW(build_dbc_features(raw), InputError);
}

TEST(Split, DebutanizerSizes)
{
  const auto s = split_chronological(ramp(2394));
  EXPECT_EQ(s.train.size(), 1436u);
  EXPECT_EQ(s.valid.size(), 479u);
  EXPECT_EQ(s.test.size(), 479u);
}

TEST(Split, TenRows)
{
  const auto s = split_chronological(ramp(10));
  EXPECT_EQ(s.train.size(), 6u);
  EXPECT_EQ(s.valid.size(), 2u);
  EXPECT_EQ(s.test.size(), 2u);
}

TEST(Split, ContiguousAndOrdered)
{
  const auto ds = ramp(101);
  const auto s = split_chronological(ds);
  EXPECT_EQ(s.train.size() + s.valid.size() + s.test.size(), 101u);
  EXPECT_EQ(s.train.X(0, 0), 0.0);
  EXPECT_EQ(s.valid.X(0, 0), static_cast<double>(s.train.size()));
  EXPECT_EQ(s.test.X(0, 0), static_cast<double>(s.train.size() + s.valid.size()));
  EXPECT_LT(s.train.X.col(0).maxCoeff(), s.valid.X.col(0).minCoeff());
  EXPECT_LT(s.valid.X.col(0).maxCoeff(), s.test.X.col(0).minCoeff());
}

TEST(Split, TooFewRowsRejected)
{
  EXPECT_THROW(split_chronological(ramp(2)), InputError);
}

TEST(Standardizer, TrainStatisticsOnly)
{
  const auto s = split_chronological(ramp(50));
  const auto st = fit_standardizer(s.train);
  const auto t = st.apply(s.train);
  for (Eigen::Index c = 0; c < 2; ++c) {
    EXPECT_NEAR(t.X.col(c).mean(), 0.0, 1e-12);
    EXPECT_NEAR(std::sqrt(t.X.col(c).array().square().mean()), 1.0, 1e-12);
  }
  EXPECT_NEAR(t.y.mean(), 0.0, 1e-12);
  // The test split is not centred by the train statistics.
  EXPECT_GT(st.apply(s.test).X.col(0).mean(), 1.0);
}

TEST(Standardizer, InvertRoundTrip)
{
  const auto ds = make_toy_regression(1, 40);
  const auto st = fit_standardizer(ds);
  const auto back = st.invert(st.apply(ds));
  EXPECT_LT((back.X - ds.X).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((back.y - ds.y).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(st.label_to_original(st.label_to_standard(3.25)), 3.25, 1e-14);
}

TEST(Standardizer, ConstantColumnNamedInError)
{
  auto ds = ramp(10);
  ds.X.col(1).setConstant(2.0);
  ds.column_names = {"flow", "temp"};
  const std::string msg = error_of([&] { fit_standardizer(ds); });
  EXPECT_NE(msg.find("temp"), std::string::npos) << msg;
}

TEST(Standardizer, JsonRoundTrip)
{
  const auto st = fit_standardizer(make_toy_regression(2, 30));
  const auto back = standardizer_from_json(nlohmann::json::parse(to_json(st).dump()));
  EXPECT_EQ(back.x_mean, st.x_mean);
  EXPECT_EQ(back.x_std, st.x_std);
  EXPECT_EQ(back.y_mean, st.y_mean);
  EXPECT_EQ(back.y_std, st.y_std);
}

TEST(ToyRegression, Reproducible)
{
  const auto a = make_toy_regression(4, 100);
  const auto b = make_toy_regression(4, 100);
  EXPECT_EQ(a.X, b.X);
  EXPECT_EQ(a.y, b.y);
  EXPECT_NE(a.y, make_toy_regression(5, 100).y);
}

TEST(ToyRegression, LeastSquaresRecoversWeights)
{
  const auto ds = make_toy_regression(0, 1000);
  Matrix A(1000, 5);
  A.leftCols(4) = ds.X;
  A.col(4).setOnes();
  const Vector w = A.colPivHouseholderQr().solve(ds.y);
  for (int k = 0; k < 4; ++k)
    EXPECT_NEAR(w[k], kToyWeights[k], 0.05 * std::abs(kToyWeights[k])) << k;
}

TEST(ParallelFor, VisitsEveryIndexOnce)
{
  for (std::size_t workers : {1u, 3u, 8u}) {
    std::vector<std::atomic<int>> hits(37);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i]++; }, workers);
    for (auto& h : hits)
      EXPECT_EQ(h.load(), 1);
  }
}

TEST(ParallelFor, RethrowsWorkerException)
{
  EXPECT_THROW(parallel_for(
                 10,
                 [](std::size_t i) {
                   if (i == 6)
                     throw NumericalError("boom");
                 },
                 4),
               NumericalError);
}

TEST(ParallelFor, ThreadCountFromEnvironment)
{
  ::setenv("KPROX_THREADS", "3", 1);
  EXPECT_EQ(worker_count(), 3u);
  ::setenv("KPROX_THREADS", "zero", 1);
  EXPECT_GE(worker_count(), 1u);
  ::unsetenv("KPROX_THREADS");
}
